//! Reference device: a hand-coded emulator of the dispenser that serves
//! as the ground-truth twin for fidelity experiments.
//!
//! This module deliberately re-implements the dispenser semantics from
//! scratch — states, plan validation, dose scheduling, grace windows —
//! without touching the model interpreter in [`crate::mbdt`]. With
//! divergence disabled the two must produce byte-identical responses on
//! any request stream; the differential tests hold both sides to that.
//!
//! Divergence injection perturbs emitted responses (never internal
//! state) with a seeded probability, so experiments can recover a known
//! ground-truth fidelity. Outcome flips keep a running sign balance per
//! step size so that perturbations do not systematically push the
//! outcome scalar in one direction.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::time::{TimeOfDay, VirtualTime, MS_PER_DAY, MS_PER_MINUTE};
use crate::wire::{reasons, DeviceEvent, DeviceRequest, DeviceResponse, OutcomeClass};

/// How a perturbed response is altered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    /// Replace the outcome class with a different one.
    FlipOutcome,
    /// Shift the `roll_remaining` response field into another encoding
    /// bucket (falls back to an outcome flip when the response carries no
    /// fields).
    PerturbField,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSpec {
    pub probability: f64,
    pub kind: DivergenceKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefDeviceConfig {
    pub language: String,
    pub alarm_volume: String,
    pub roll_capacity: i64,
    /// Time the physical device needs per request, in virtual ms. Shapes
    /// reported completion times only; semantics evaluate at the
    /// request's own timestamp.
    pub processing_delay_ms: u64,
    pub grace_ms: u64,
    pub divergence: Option<DivergenceSpec>,
}

impl Default for RefDeviceConfig {
    fn default() -> Self {
        RefDeviceConfig {
            language: "no".to_string(),
            alarm_volume: "medium".to_string(),
            roll_capacity: 28,
            processing_delay_ms: 2_000,
            grace_ms: 30 * MS_PER_MINUTE,
            divergence: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DeviceState {
    Idle,
    PlanLoaded,
    DispenseDue,
    Dispensed,
    Missed,
}

impl DeviceState {
    fn name(self) -> &'static str {
        match self {
            DeviceState::Idle => "Idle",
            DeviceState::PlanLoaded => "PlanLoaded",
            DeviceState::DispenseDue => "DispenseDue",
            DeviceState::Dispensed => "Dispensed",
            DeviceState::Missed => "Missed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dose {
    Skipped,
    Pending,
    DispensedAt(u64),
    Taken,
    Missed,
}

/// Loaded plan and roll bookkeeping, written independently of the twin
/// engine's plan runtime.
#[derive(Debug, Clone)]
struct LoadedPlan {
    doses: Vec<(u64, Dose)>, // (due instant ms, status), schedule order
    doses_per_intake: i64,
    roll_remaining: i64,
    awaiting: Option<usize>,
}

impl LoadedPlan {
    fn next_pending(&self) -> Option<usize> {
        self.doses.iter().position(|(_, d)| *d == Dose::Pending)
    }

    fn dose_due(&self, now: u64) -> bool {
        if self.awaiting.is_some() || self.roll_remaining < self.doses_per_intake {
            return false;
        }
        match self.next_pending() {
            Some(i) => self.doses[i].0 <= now,
            None => false,
        }
    }

    fn exhausted(&self) -> bool {
        self.awaiting.is_none()
            && (self.next_pending().is_none() || self.roll_remaining < self.doses_per_intake)
    }

    fn doses_remaining(&self) -> i64 {
        self.doses.iter().filter(|(_, d)| *d == Dose::Pending).count() as i64
    }
}

struct Divergence {
    rng: ChaCha8Rng,
    probability: f64,
    kind: DivergenceKind,
    /// Signed count of applied outcome steps, per step magnitude.
    flip_debt: BTreeMap<u8, i64>,
    field_debt: i64,
    perturbed: u64,
}

impl Divergence {
    fn new(spec: DivergenceSpec) -> Divergence {
        Divergence {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            probability: spec.probability,
            kind: spec.kind,
            flip_debt: BTreeMap::new(),
            field_debt: 0,
            perturbed: 0,
        }
    }

    fn apply(&mut self, mut resp: DeviceResponse) -> DeviceResponse {
        if self.rng.random::<f64>() >= self.probability {
            return resp;
        }
        self.perturbed += 1;
        match self.kind {
            DivergenceKind::FlipOutcome => self.flip_outcome(&mut resp),
            DivergenceKind::PerturbField => {
                if !self.perturb_field(&mut resp) {
                    self.flip_outcome(&mut resp);
                }
            }
        }
        resp
    }

    /// Flips the outcome class, choosing the replacement that best evens
    /// out the per-magnitude sign balance of scalar steps.
    fn flip_outcome(&mut self, resp: &mut DeviceResponse) {
        let current = resp.status.scalar_index() as i64;
        let mut candidates: Vec<(i64, i64)> = Vec::new(); // (score, class index)
        for candidate in 0..crate::wire::OUTCOME_CLASSES.len() as i64 {
            if candidate == current {
                continue;
            }
            let step = candidate - current;
            let magnitude = step.unsigned_abs() as u8;
            let debt = *self.flip_debt.get(&magnitude).unwrap_or(&0);
            let score = (debt + step.signum()).abs();
            candidates.push((score, candidate));
        }
        candidates.sort();
        let min_score = candidates[0].0;
        let tied: Vec<i64> = candidates
            .iter()
            .take_while(|(s, _)| *s == min_score)
            .map(|(_, c)| *c)
            .collect();
        let pick = tied[self.rng.random_range(0..tied.len())];
        let step = pick - current;
        *self.flip_debt.entry(step.unsigned_abs() as u8).or_insert(0) += step.signum();
        resp.status = crate::wire::OutcomeClass::from_scalar_index(pick as usize).unwrap();
    }

    /// Moves `roll_remaining` by two encoding buckets, alternating
    /// direction. Returns false when the response has no such field.
    fn perturb_field(&mut self, resp: &mut DeviceResponse) -> bool {
        let Some(v) = resp.fields.get("roll_remaining").and_then(Value::as_i64) else {
            return false;
        };
        let delta = 2 * crate::fidelity::encode::FIELD_BUCKET_WIDTH as i64;
        let preferred: i64 = if self.field_debt > 0 { -1 } else { 1 };
        let max = crate::fidelity::encode::FIELD_BUCKET_RANGE as i64 - 1;
        let sign = if (0..=max).contains(&(v + preferred * delta)) {
            preferred
        } else {
            -preferred
        };
        self.field_debt += sign;
        resp.fields
            .insert("roll_remaining".to_string(), Value::from(v + sign * delta));
        true
    }
}

/// The emulator. Strictly serial, like the physical device: one request
/// at a time, FIFO.
pub struct RefDevice {
    config: RefDeviceConfig,
    state: DeviceState,
    language: String,
    alarm_volume: String,
    plan: Option<LoadedPlan>,
    divergence: Option<Divergence>,
    last_time: u64,
    /// Virtual instant the device finishes its current backlog.
    free_at: u64,
    pub requests_handled: u64,
}

impl RefDevice {
    pub fn new(config: RefDeviceConfig) -> RefDevice {
        RefDevice {
            state: DeviceState::Idle,
            language: config.language.clone(),
            alarm_volume: config.alarm_volume.clone(),
            plan: None,
            divergence: config.divergence.map(Divergence::new),
            last_time: 0,
            free_at: 0,
            requests_handled: 0,
            config,
        }
    }

    pub fn perturbed_count(&self) -> u64 {
        self.divergence.as_ref().map_or(0, |d| d.perturbed)
    }

    pub fn state_name(&self) -> &'static str {
        self.state.name()
    }

    /// Processes one request. Returns the response plus the virtual
    /// completion instant after queueing behind earlier requests.
    pub fn handle_device_request(&mut self, req: &DeviceRequest) -> (DeviceResponse, VirtualTime) {
        self.requests_handled += 1;
        let now = req.virtual_now.0;
        let completed_at = VirtualTime(now.max(self.free_at) + self.config.processing_delay_ms);
        self.free_at = completed_at.0;

        let resp = self.process(req, now);
        let resp = match self.divergence.as_mut() {
            Some(d) => d.apply(resp),
            None => resp,
        };
        (resp, completed_at)
    }

    fn process(&mut self, req: &DeviceRequest, now: u64) -> DeviceResponse {
        if now < self.last_time {
            return self.protocol_error(req, reasons::TIME_REGRESSION.to_string());
        }
        self.last_time = now;

        match req.operation.as_str() {
            "load_plan" => self.op_load_plan(req, now),
            "confirm_intake" => self.op_confirm(req),
            "set_language" => self.op_set_language(req),
            "set_alarm" => self.op_set_alarm(req),
            "tick" => self.op_tick(req, now),
            other => self.protocol_error(req, reasons::unknown_operation(other)),
        }
    }

    fn op_load_plan(&mut self, req: &DeviceRequest, now: u64) -> DeviceResponse {
        const FIELDS: [&str; 5] = [
            "start_date",
            "dose_times",
            "doses_per_intake",
            "plan_days",
            "roll_total",
        ];
        if let Some(reason) = check_schema(&req.payload, &FIELDS, |name, v| match name {
            "start_date" => parse_datetime(v).is_some(),
            "dose_times" => v.is_string(),
            _ => v.as_i64().is_some(),
        }) {
            return self.protocol_error(req, reason);
        }
        if !matches!(self.state, DeviceState::Idle | DeviceState::PlanLoaded) {
            return self.rejected(req);
        }
        match self.validate_plan(&req.payload, now) {
            Ok(plan) => {
                self.plan = Some(plan);
                self.state = DeviceState::PlanLoaded;
                self.respond(req, OutcomeClass::Accepted, vec![], None)
            }
            // An invalid plan never disturbs a loaded one.
            Err(detail) => self.respond(
                req,
                OutcomeClass::Error,
                vec![],
                Some(reasons::invalid_plan(detail)),
            ),
        }
    }

    fn validate_plan(
        &self,
        payload: &BTreeMap<String, Value>,
        now: u64,
    ) -> Result<LoadedPlan, &'static str> {
        let doses_per_intake = payload["doses_per_intake"].as_i64().unwrap();
        let plan_days = payload["plan_days"].as_i64().unwrap();
        let roll_total = payload["roll_total"].as_i64().unwrap();
        let start = parse_datetime(&payload["start_date"]).unwrap();
        let csv = payload["dose_times"].as_str().unwrap();

        if doses_per_intake < 1 {
            return Err(reasons::plan::DOSES_PER_INTAKE);
        }
        if plan_days < 1 {
            return Err(reasons::plan::PLAN_DAYS);
        }
        if roll_total < 1 {
            return Err(reasons::plan::ROLL_TOTAL);
        }
        let mut times: Vec<u64> = Vec::new();
        for part in csv.split(',') {
            let t = TimeOfDay::parse(part.trim()).ok_or(reasons::plan::DOSE_TIMES)?;
            times.push(t.as_millis());
        }
        if times.is_empty() {
            return Err(reasons::plan::DOSE_TIMES);
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(reasons::plan::DOSE_TIMES_ORDER);
        }
        let needed = doses_per_intake
            .checked_mul(times.len() as i64)
            .and_then(|n| n.checked_mul(plan_days))
            .ok_or(reasons::plan::OVERCOMMITTED)?;
        if needed > roll_total {
            return Err(reasons::plan::OVERCOMMITTED);
        }
        if roll_total > self.config.roll_capacity {
            return Err(reasons::plan::ROLL_TOO_LARGE);
        }

        let mut doses = Vec::new();
        for day in 0..plan_days as u64 {
            for &t in &times {
                let due = start.0 + day * MS_PER_DAY + t;
                let status = if due < now { Dose::Skipped } else { Dose::Pending };
                doses.push((due, status));
            }
        }
        Ok(LoadedPlan {
            doses,
            doses_per_intake,
            roll_remaining: roll_total,
            awaiting: None,
        })
    }

    fn op_confirm(&mut self, req: &DeviceRequest) -> DeviceResponse {
        if let Some(reason) = check_schema(&req.payload, &[], |_, _| true) {
            return self.protocol_error(req, reason);
        }
        if self.state != DeviceState::DispenseDue {
            return self.rejected(req);
        }
        if let Some(plan) = self.plan.as_mut() {
            if let Some(i) = plan.awaiting.take() {
                plan.doses[i].1 = Dose::Taken;
            }
        }
        self.state = DeviceState::Dispensed;
        self.respond(req, OutcomeClass::Accepted, vec![], None)
    }

    fn op_set_language(&mut self, req: &DeviceRequest) -> DeviceResponse {
        if let Some(reason) = check_schema(&req.payload, &["language"], |_, v| {
            matches!(v.as_str(), Some("no" | "en" | "de"))
        }) {
            return self.protocol_error(req, reason);
        }
        if !matches!(self.state, DeviceState::Idle | DeviceState::PlanLoaded) {
            return self.rejected(req);
        }
        self.language = req.payload["language"].as_str().unwrap().to_string();
        self.respond(req, OutcomeClass::Accepted, vec![], None)
    }

    fn op_set_alarm(&mut self, req: &DeviceRequest) -> DeviceResponse {
        if let Some(reason) = check_schema(&req.payload, &["volume"], |_, v| {
            matches!(v.as_str(), Some("low" | "medium" | "high"))
        }) {
            return self.protocol_error(req, reason);
        }
        if !matches!(self.state, DeviceState::Idle | DeviceState::PlanLoaded) {
            return self.rejected(req);
        }
        self.alarm_volume = req.payload["volume"].as_str().unwrap().to_string();
        self.respond(req, OutcomeClass::Accepted, vec![], None)
    }

    fn op_tick(&mut self, req: &DeviceRequest, now: u64) -> DeviceResponse {
        if let Some(reason) = check_schema(&req.payload, &[], |_, _| true) {
            return self.protocol_error(req, reason);
        }
        match self.state {
            DeviceState::Idle => self.rejected(req),
            DeviceState::DispenseDue => {
                let expired = self.plan.as_ref().is_some_and(|p| {
                    p.awaiting.is_some_and(|i| match p.doses[i].1 {
                        Dose::DispensedAt(at) => now >= at + self.config.grace_ms,
                        _ => false,
                    })
                });
                if expired {
                    if let Some(plan) = self.plan.as_mut() {
                        if let Some(i) = plan.awaiting.take() {
                            plan.doses[i].1 = Dose::Missed;
                        }
                    }
                    self.state = DeviceState::Missed;
                    let event = DeviceEvent {
                        kind: "missed_dose".to_string(),
                        at: VirtualTime(now),
                    };
                    self.respond(req, OutcomeClass::MissedNotify, vec![event], None)
                } else {
                    self.respond(req, OutcomeClass::Accepted, vec![], None)
                }
            }
            DeviceState::PlanLoaded | DeviceState::Dispensed | DeviceState::Missed => {
                let (due, exhausted) = match self.plan.as_ref() {
                    Some(p) => (p.dose_due(now), p.exhausted()),
                    None => (false, true),
                };
                if due {
                    let plan = self.plan.as_mut().unwrap();
                    let i = plan.next_pending().unwrap();
                    plan.doses[i].1 = Dose::DispensedAt(now);
                    plan.awaiting = Some(i);
                    plan.roll_remaining -= plan.doses_per_intake;
                    self.state = DeviceState::DispenseDue;
                    self.respond(req, OutcomeClass::Dispensed, vec![], None)
                } else if exhausted {
                    self.plan = None;
                    self.state = DeviceState::Idle;
                    self.respond(req, OutcomeClass::Accepted, vec![], None)
                } else {
                    self.state = DeviceState::PlanLoaded;
                    self.respond(req, OutcomeClass::Accepted, vec![], None)
                }
            }
        }
    }

    fn fields(&self) -> BTreeMap<String, Value> {
        let mut fields = BTreeMap::new();
        let (roll, doses) = match self.plan.as_ref() {
            Some(p) => (p.roll_remaining, p.doses_remaining()),
            None => (0, 0),
        };
        fields.insert("roll_remaining".to_string(), Value::from(roll));
        fields.insert("doses_remaining".to_string(), Value::from(doses));
        fields
    }

    fn respond(
        &mut self,
        req: &DeviceRequest,
        status: OutcomeClass,
        events: Vec<DeviceEvent>,
        reason: Option<String>,
    ) -> DeviceResponse {
        DeviceResponse {
            seq: req.seq,
            operation: req.operation.clone(),
            status,
            state: Some(self.state.name().to_string()),
            fields: self.fields(),
            events,
            reason,
        }
    }

    fn rejected(&mut self, req: &DeviceRequest) -> DeviceResponse {
        let reason = reasons::rejected_in_state(self.state.name(), &req.operation);
        DeviceResponse {
            seq: req.seq,
            operation: req.operation.clone(),
            status: OutcomeClass::RejectedInState,
            state: Some(self.state.name().to_string()),
            fields: BTreeMap::new(),
            events: vec![],
            reason: Some(reason),
        }
    }

    fn protocol_error(&mut self, req: &DeviceRequest, reason: String) -> DeviceResponse {
        DeviceResponse {
            seq: req.seq,
            operation: req.operation.clone(),
            status: OutcomeClass::Error,
            state: Some(self.state.name().to_string()),
            fields: BTreeMap::new(),
            events: vec![],
            reason: Some(reason),
        }
    }
}

/// Schema check shared by all operations: unknown fields first (sorted
/// key order), then missing, then per-field validity, in declaration
/// order.
fn check_schema(
    payload: &BTreeMap<String, Value>,
    declared: &[&str],
    valid: impl Fn(&str, &Value) -> bool,
) -> Option<String> {
    for key in payload.keys() {
        if !declared.contains(&key.as_str()) {
            return Some(reasons::unknown_field(key));
        }
    }
    for &name in declared {
        match payload.get(name) {
            None => return Some(reasons::missing_field(name)),
            Some(v) => {
                if !valid(name, v) {
                    return Some(reasons::invalid_field(name));
                }
            }
        }
    }
    None
}

fn parse_datetime(v: &Value) -> Option<VirtualTime> {
    if let Some(ms) = v.as_u64() {
        return Some(VirtualTime(ms));
    }
    v.as_str().and_then(VirtualTime::parse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn t(s: &str) -> VirtualTime {
        VirtualTime::parse(s).unwrap()
    }

    fn req(seq: u64, op: &str, now: VirtualTime, payload: &[(&str, Value)]) -> DeviceRequest {
        DeviceRequest {
            seq,
            operation: op.to_string(),
            virtual_now: now,
            payload: payload
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        }
    }

    fn plan(seq: u64, now: VirtualTime) -> DeviceRequest {
        req(
            seq,
            "load_plan",
            now,
            &[
                ("start_date", json!("2026-01-01")),
                ("dose_times", json!("08:00,20:00")),
                ("doses_per_intake", json!(1)),
                ("plan_days", json!(14)),
                ("roll_total", json!(28)),
            ],
        )
    }

    #[test]
    fn golden_scenario_matches_dispenser_semantics() {
        let mut dev = RefDevice::new(RefDeviceConfig::default());
        let (r, _) = dev.handle_device_request(&plan(1, t("2026-01-01T07:00")));
        assert_eq!(r.status, OutcomeClass::Accepted);
        assert_eq!(r.state.as_deref(), Some("PlanLoaded"));

        let (r, _) = dev.handle_device_request(&DeviceRequest::tick(2, t("2026-01-01T08:00")));
        assert_eq!(r.status, OutcomeClass::Dispensed);
        assert_eq!(r.fields["roll_remaining"], json!(27));

        let (r, _) =
            dev.handle_device_request(&req(3, "confirm_intake", t("2026-01-01T08:10"), &[]));
        assert_eq!(r.status, OutcomeClass::Accepted);
        assert_eq!(r.state.as_deref(), Some("Dispensed"));
    }

    #[test]
    fn fifo_queue_orders_completion_times() {
        let mut dev = RefDevice::new(RefDeviceConfig::default());
        // Three requests land at the same instant; the 2-second processing
        // time queues them.
        let base = t("2026-01-01T07:00");
        let (_, c1) = dev.handle_device_request(&plan(1, base));
        let (_, c2) = dev.handle_device_request(&DeviceRequest::tick(2, base));
        let (_, c3) = dev.handle_device_request(&DeviceRequest::tick(3, base));
        assert_eq!(c1.0, base.0 + 2_000);
        assert_eq!(c2.0, base.0 + 4_000);
        assert_eq!(c3.0, base.0 + 6_000);
    }

    #[test]
    fn divergence_rate_is_binomial_and_reproducible() {
        let spec = DivergenceSpec {
            probability: 0.05,
            kind: DivergenceKind::FlipOutcome,
            seed: 1234,
        };
        let run = || {
            let cfg = RefDeviceConfig {
                divergence: Some(spec),
                ..RefDeviceConfig::default()
            };
            let mut dev = RefDevice::new(cfg);
            let mut statuses = Vec::new();
            dev.handle_device_request(&plan(0, t("2026-01-01T06:00")));
            for i in 0..10_000u64 {
                let now = VirtualTime(t("2026-01-01T06:00").0 + (i + 1) * 1_000);
                let (r, _) = dev.handle_device_request(&DeviceRequest::tick(i + 1, now));
                statuses.push(r.status);
            }
            (dev.perturbed_count(), statuses)
        };
        let (count_a, statuses_a) = run();
        let (count_b, statuses_b) = run();
        assert_eq!(statuses_a, statuses_b, "divergence must be seed-reproducible");
        assert_eq!(count_a, count_b);
        // Binomial bound: 500 +- 3 * sqrt(10000 * 0.05 * 0.95) ~ 65.4.
        let expected = 10_000.0 * 0.05;
        let sigma = (10_000.0f64 * 0.05 * 0.95).sqrt();
        assert!(
            ((count_a as f64) - expected).abs() <= 3.0 * sigma,
            "perturbed {count_a} outside 3-sigma of {expected}"
        );
    }

    #[test]
    fn flip_outcome_balances_scalar_steps() {
        let mut div = Divergence::new(DivergenceSpec {
            probability: 1.0,
            kind: DivergenceKind::FlipOutcome,
            seed: 7,
        });
        let mk = |status| DeviceResponse {
            seq: 0,
            operation: "tick".into(),
            status,
            state: Some("PlanLoaded".into()),
            fields: BTreeMap::new(),
            events: vec![],
            reason: None,
        };
        let mut net: i64 = 0;
        for _ in 0..10_000 {
            let flipped = div.apply(mk(OutcomeClass::Accepted));
            let step = flipped.status.scalar_index() as i64
                - OutcomeClass::Accepted.scalar_index() as i64;
            assert_ne!(step, 0, "flip must change the class");
            net += step;
        }
        assert!(net.abs() <= 4, "flip kernel drifted: net={net}");
    }
}
