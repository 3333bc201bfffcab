//! Schema-driven randomized request generation.
//!
//! Requests are drawn from the device model's api section: operations by
//! weight, payload fields by declared type. Medication plans come from a
//! dedicated generator that produces valid plans by construction or
//! deliberately violating ones at a configured ratio, since a valid plan
//! needs coordinated values (start date, dose times, doses per intake,
//! days, roll size) that independent field draws would almost never hit.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::value::PropertyType;
use crate::model::EndpointDef;
use crate::time::{VirtualTime, MS_PER_DAY};
use crate::wire::{DeviceRequest, TICK};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenError {
    #[error("api has no operations to generate from")]
    EmptyApi,
    #[error("enum domain of '{operation}.{field}' is empty")]
    EmptyEnumDomain { operation: String, field: String },
}

/// Tuning knobs for the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Fraction of generated medication plans that deliberately violate a
    /// plan invariant.
    pub invalid_ratio: f64,
    /// Relative operation weights as (operation, weight). Operations not
    /// listed get weight 1.
    pub op_weights: Vec<(String, f64)>,
    /// When true, a `DispenseDue` state hint boosts confirm_intake.
    pub follow_hints: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            invalid_ratio: 0.1,
            op_weights: vec![
                ("load_plan".to_string(), 4.0),
                ("confirm_intake".to_string(), 2.0),
                ("set_language".to_string(), 7.0),
                ("set_alarm".to_string(), 7.0),
            ],
            follow_hints: false,
        }
    }
}

/// Observations a campaign runner may feed back into generation.
#[derive(Debug, Clone, Default)]
pub struct StateHints {
    pub last_state: Option<String>,
}

/// Dose-time patterns drawn for plans, with weights. Mostly outside a
/// morning campaign window so dispensing stays a rare event class.
const DOSE_PATTERNS: [(&str, f64); 5] = [
    ("08:00,20:00", 0.45),
    ("08:00,14:00,20:00", 0.2),
    ("08:00", 0.1),
    ("09:00", 0.15),
    ("08:30,20:30", 0.1),
];

pub struct RequestGenerator {
    rng: ChaCha8Rng,
    api: Vec<EndpointDef>,
    cfg: GeneratorConfig,
    /// Device roll capacity assumed when sizing plans.
    roll_capacity: i64,
}

impl RequestGenerator {
    pub fn new(seed: u64, api: &[EndpointDef], cfg: GeneratorConfig) -> Result<Self, GenError> {
        let ops: Vec<EndpointDef> = api.iter().filter(|e| e.operation != TICK).cloned().collect();
        if ops.is_empty() {
            return Err(GenError::EmptyApi);
        }
        for e in &ops {
            for f in &e.request {
                if let PropertyType::Enum(domain) = &f.ty {
                    if domain.is_empty() {
                        return Err(GenError::EmptyEnumDomain {
                            operation: e.operation.clone(),
                            field: f.name.clone(),
                        });
                    }
                }
            }
        }
        Ok(RequestGenerator {
            rng: ChaCha8Rng::seed_from_u64(seed),
            api: ops,
            cfg,
            roll_capacity: 28,
        })
    }

    pub fn with_roll_capacity(mut self, capacity: i64) -> Self {
        self.roll_capacity = capacity;
        self
    }

    fn weight_of(&self, op: &str, hints: &StateHints) -> f64 {
        let base = self
            .cfg
            .op_weights
            .iter()
            .find(|(name, _)| name == op)
            .map(|(_, w)| *w)
            .unwrap_or(1.0);
        if self.cfg.follow_hints
            && op == "confirm_intake"
            && hints.last_state.as_deref() == Some("DispenseDue")
        {
            base * 8.0
        } else {
            base
        }
    }

    /// Draws the next randomized, schema-valid request.
    pub fn generate(&mut self, seq: u64, now: VirtualTime, hints: &StateHints) -> DeviceRequest {
        let weights: Vec<f64> = self
            .api
            .iter()
            .map(|e| self.weight_of(&e.operation, hints))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut draw = self.rng.random::<f64>() * total;
        let mut idx = 0;
        for (i, w) in weights.iter().enumerate() {
            if draw < *w {
                idx = i;
                break;
            }
            draw -= w;
        }
        let endpoint = self.api[idx].clone();

        let payload = if endpoint.operation == "load_plan" {
            let valid = self.rng.random::<f64>() >= self.cfg.invalid_ratio;
            self.plan_payload(now, valid)
        } else {
            self.generic_payload(&endpoint)
        };

        DeviceRequest {
            seq,
            operation: endpoint.operation,
            virtual_now: now,
            payload,
        }
    }

    fn generic_payload(&mut self, endpoint: &EndpointDef) -> BTreeMap<String, Value> {
        let mut payload = BTreeMap::new();
        for f in &endpoint.request {
            let value = match &f.ty {
                PropertyType::Enum(domain) => {
                    Value::from(domain[self.rng.random_range(0..domain.len())].clone())
                }
                PropertyType::Int => Value::from(self.rng.random_range(0..=100i64)),
                PropertyType::Float => Value::from(self.rng.random::<f64>()),
                PropertyType::Bool => Value::from(self.rng.random::<bool>()),
                PropertyType::Str => {
                    let n = self.rng.random_range(3..=8);
                    let s: String = (0..n)
                        .map(|_| (b'a' + self.rng.random_range(0..26u8)) as char)
                        .collect();
                    Value::from(s)
                }
                PropertyType::Datetime => Value::from("2026-01-05"),
                PropertyType::Duration => {
                    Value::from(format!("{}m", self.rng.random_range(1..=120)))
                }
            };
            payload.insert(f.name.clone(), value);
        }
        payload
    }

    fn pick_pattern(&mut self) -> &'static str {
        let total: f64 = DOSE_PATTERNS.iter().map(|(_, w)| w).sum();
        let mut draw = self.rng.random::<f64>() * total;
        for (pattern, w) in DOSE_PATTERNS {
            if draw < w {
                return pattern;
            }
            draw -= w;
        }
        DOSE_PATTERNS[0].0
    }

    /// Generates a medication-plan payload. Valid plans satisfy every
    /// plan invariant by construction; invalid ones violate exactly one,
    /// mostly the roll-capacity arithmetic.
    pub fn plan_payload(&mut self, now: VirtualTime, valid: bool) -> BTreeMap<String, Value> {
        let pattern = self.pick_pattern();
        let times_per_day = pattern.split(',').count() as i64;
        let today = VirtualTime(now.0 - now.0 % MS_PER_DAY);
        let start = if self.rng.random::<f64>() < 0.8 {
            today
        } else {
            VirtualTime(today.0 + MS_PER_DAY)
        };

        let doses_per_intake = if self.rng.random::<f64>() < 0.85 { 1 } else { 2 };
        let max_days = (self.roll_capacity / (doses_per_intake * times_per_day)).max(1);
        let plan_days = self.rng.random_range(1..=max_days.min(14));
        let needed = doses_per_intake * times_per_day * plan_days;
        let roll_total = self.rng.random_range(needed..=self.roll_capacity.max(needed));

        let mut payload = BTreeMap::new();
        payload.insert("start_date".to_string(), Value::from(start.format()));
        payload.insert("dose_times".to_string(), Value::from(pattern));
        payload.insert("doses_per_intake".to_string(), Value::from(doses_per_intake));
        payload.insert("plan_days".to_string(), Value::from(plan_days));
        payload.insert("roll_total".to_string(), Value::from(roll_total));

        if !valid {
            match self.rng.random_range(0..10) {
                // Roll too small for the planned doses.
                0..=4 => {
                    let short = self.rng.random_range(1..=needed.min(5));
                    payload.insert("roll_total".to_string(), Value::from(needed - short));
                }
                // Roll exceeds the device capacity.
                5..=6 => {
                    payload.insert(
                        "roll_total".to_string(),
                        Value::from(self.roll_capacity + self.rng.random_range(1..=12)),
                    );
                }
                // Non-positive counts.
                7 => {
                    payload.insert("doses_per_intake".to_string(), Value::from(0));
                }
                // Malformed dose times.
                8 => {
                    payload.insert("dose_times".to_string(), Value::from("25:99"));
                }
                // Unordered dose times.
                _ => {
                    payload.insert("dose_times".to_string(), Value::from("20:00,08:00"));
                }
            }
        }
        payload
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mbdt::MedicationPlan;
    use crate::model::parse_model;

    fn medido_api() -> Vec<EndpointDef> {
        let src = include_str!("../../examples/medido.twinmodel");
        parse_model(src).unwrap().api
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let make = || {
            let mut g =
                RequestGenerator::new(1, &medido_api(), GeneratorConfig::default()).unwrap();
            (0..5)
                .map(|i| {
                    g.generate(
                        i,
                        VirtualTime::parse("2026-01-05T08:00").unwrap().plus(i * 600),
                        &StateHints::default(),
                    )
                })
                .collect::<Vec<_>>()
        };
        let a = make();
        let b = make();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|r| r.operation != TICK));
    }

    #[test]
    fn invalid_ratio_is_respected_within_binomial_bounds() {
        let cfg = GeneratorConfig {
            invalid_ratio: 0.2,
            ..GeneratorConfig::default()
        };
        let mut g = RequestGenerator::new(3, &medido_api(), cfg).unwrap();
        let now = VirtualTime::parse("2026-01-05T08:00").unwrap();
        let mut invalid = 0usize;
        let n = 1000usize;
        for _ in 0..n {
            let payload = {
                let valid = g.rng.random::<f64>() >= g.cfg.invalid_ratio;
                g.plan_payload(now, valid)
            };
            let ok = MedicationPlan::validate(
                VirtualTime::parse(payload["start_date"].as_str().unwrap()).unwrap(),
                payload["dose_times"].as_str().unwrap(),
                payload["doses_per_intake"].as_i64().unwrap(),
                payload["plan_days"].as_i64().unwrap(),
                payload["roll_total"].as_i64().unwrap(),
                28,
            );
            if ok.is_err() {
                invalid += 1;
            }
        }
        // 200 +- 3 * sqrt(1000 * 0.2 * 0.8) ~ 38.
        let sigma = (1000.0f64 * 0.2 * 0.8).sqrt();
        assert!(
            (invalid as f64 - 200.0).abs() <= 3.0 * sigma,
            "invalid = {invalid}"
        );
    }

    #[test]
    fn valid_plans_are_always_valid() {
        let mut g = RequestGenerator::new(11, &medido_api(), GeneratorConfig::default()).unwrap();
        let now = VirtualTime::parse("2026-01-05T08:00").unwrap();
        for _ in 0..500 {
            let payload = g.plan_payload(now, true);
            let ok = MedicationPlan::validate(
                VirtualTime::parse(payload["start_date"].as_str().unwrap()).unwrap(),
                payload["dose_times"].as_str().unwrap(),
                payload["doses_per_intake"].as_i64().unwrap(),
                payload["plan_days"].as_i64().unwrap(),
                payload["roll_total"].as_i64().unwrap(),
                28,
            );
            assert!(ok.is_ok(), "generated invalid 'valid' plan: {payload:?}");
        }
    }

    #[test]
    fn empty_api_is_a_precondition_error() {
        assert_eq!(
            RequestGenerator::new(1, &[], GeneratorConfig::default()).unwrap_err(),
            GenError::EmptyApi
        );
        let api = vec![EndpointDef {
            operation: "set_mode".into(),
            request: vec![crate::model::FieldDef {
                name: "mode".into(),
                ty: PropertyType::Enum(vec![]),
            }],
            response: vec![],
        }];
        assert!(matches!(
            RequestGenerator::new(1, &api, GeneratorConfig::default()),
            Err(GenError::EmptyEnumDomain { .. })
        ));
    }
}
