//! Fidelity reports over paired twin/reference responses, and the
//! divergence-to-similarity oracle used to calibrate experiments.

use serde::{Deserialize, Serialize};

use crate::fidelity::encode::{encode_response, outcome_scalar, TwinKind};
use crate::fidelity::{cliffs_delta, cosine, wilcoxon_signed_rank, Magnitude, StatsError};
use crate::wire::{DeviceResponse, OUTCOME_CLASSES};

pub const ALPHA: f64 = 0.05;

/// Statistical summary of a twin stream against the reference stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub twin_kind: TwinKind,
    pub mean_cosine: f64,
    pub wilcoxon_p: f64,
    /// True when every paired outcome scalar was identical.
    pub wilcoxon_all_zero: bool,
    pub cliffs_delta: f64,
    pub magnitude: Magnitude,
    pub n_pairs: usize,
    pub alpha: f64,
}

/// Evaluates fidelity over (twin response, reference response) pairs.
/// Cosine runs over the per-kind encodings; the Wilcoxon signed-rank test
/// and Cliff's delta run over the paired outcome scalars with A = twin,
/// B = reference.
pub fn evaluate_fidelity(
    pairs: &[(DeviceResponse, DeviceResponse)],
    kind: TwinKind,
) -> Result<FidelityReport, StatsError> {
    if pairs.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut cos_sum = 0.0;
    let mut twin_scalars = Vec::with_capacity(pairs.len());
    let mut ref_scalars = Vec::with_capacity(pairs.len());
    for (twin, reference) in pairs {
        let u = encode_response(twin, kind);
        let v = encode_response(reference, kind);
        cos_sum += cosine(&u, &v)?;
        twin_scalars.push(outcome_scalar(twin));
        ref_scalars.push(outcome_scalar(reference));
    }
    let wilcoxon = wilcoxon_signed_rank(&twin_scalars, &ref_scalars)?;
    let (delta, magnitude) = cliffs_delta(&twin_scalars, &ref_scalars)?;
    Ok(FidelityReport {
        twin_kind: kind,
        mean_cosine: cos_sum / pairs.len() as f64,
        wilcoxon_p: wilcoxon.p,
        wilcoxon_all_zero: wilcoxon.all_zero,
        cliffs_delta: delta,
        magnitude,
        n_pairs: pairs.len(),
        alpha: ALPHA,
    })
}

/// Inputs the oracle needs beyond the divergence rate: the stream's
/// similarity with divergence disabled. Exactly 1.0 for a model-based
/// twin (shared canonical semantics); measured for an ML twin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub mean_cosine_p0: f64,
}

impl Baseline {
    pub fn exact() -> Baseline {
        Baseline { mean_cosine_p0: 1.0 }
    }
}

/// Expected per-pair cosine on perturbed pairs.
///
/// Model-based: exactly one of the K one-hot blocks changes, so a
/// perturbed pair scores (K-1)/K. ML (outcome-only): a perturbed pair
/// matches only when the twin had already predicted the class the flip
/// lands on, approximated as (1-B)/(C-1).
fn perturbed_pair_cosine(kind: TwinKind, baseline: Baseline) -> f64 {
    match kind {
        TwinKind::ModelBased => {
            let k = kind.block_count() as f64;
            (k - 1.0) / k
        }
        TwinKind::MachineLearning => {
            (1.0 - baseline.mean_cosine_p0) / (OUTCOME_CLASSES.len() as f64 - 1.0)
        }
    }
}

/// Expected mean cosine when the reference perturbs each response
/// independently with probability `p`.
pub fn expected_similarity(kind: TwinKind, p: f64, baseline: Baseline) -> f64 {
    let b = baseline.mean_cosine_p0;
    let m = perturbed_pair_cosine(kind, baseline);
    (1.0 - p) * b + p * m
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrationError {
    #[error("target {target} is not reachable from baseline {baseline}")]
    Unreachable { target: f64, baseline: f64 },
}

/// Solves `expected_similarity(kind, p, baseline) = target` for p.
pub fn calibrate_divergence(
    kind: TwinKind,
    target: f64,
    baseline: Baseline,
) -> Result<f64, CalibrationError> {
    let b = baseline.mean_cosine_p0;
    let m = perturbed_pair_cosine(kind, baseline);
    if target > b || b <= m {
        return Err(CalibrationError::Unreachable {
            target,
            baseline: b,
        });
    }
    Ok(((b - target) / (b - m)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::OutcomeClass;
    use std::collections::BTreeMap;

    fn resp(status: OutcomeClass, roll: i64, state: &str) -> DeviceResponse {
        let mut fields = BTreeMap::new();
        fields.insert("roll_remaining".to_string(), serde_json::json!(roll));
        fields.insert("doses_remaining".to_string(), serde_json::json!(roll));
        DeviceResponse {
            seq: 0,
            operation: "tick".into(),
            status,
            state: Some(state.to_string()),
            fields,
            events: vec![],
            reason: None,
        }
    }

    #[test]
    fn identical_streams_have_unit_fidelity() {
        let pairs: Vec<_> = (0..50)
            .map(|i| {
                let r = resp(OutcomeClass::Accepted, 28 - (i % 5), "PlanLoaded");
                (r.clone(), r)
            })
            .collect();
        let report = evaluate_fidelity(&pairs, TwinKind::ModelBased).unwrap();
        assert_eq!(report.mean_cosine, 1.0);
        assert_eq!(report.cliffs_delta, 0.0);
        assert_eq!(report.magnitude, Magnitude::Negligible);
        assert_eq!(report.wilcoxon_p, 1.0);
        assert!(report.wilcoxon_all_zero);
    }

    #[test]
    fn calibration_inverts_the_oracle() {
        for kind in [TwinKind::ModelBased, TwinKind::MachineLearning] {
            let baseline = match kind {
                TwinKind::ModelBased => Baseline::exact(),
                TwinKind::MachineLearning => Baseline { mean_cosine_p0: 0.98 },
            };
            let target = 0.94;
            let p = calibrate_divergence(kind, target, baseline).unwrap();
            let back = expected_similarity(kind, p, baseline);
            assert!((back - target).abs() < 1e-12, "{kind:?}: {back} vs {target}");
        }
    }

    #[test]
    fn model_based_oracle_is_one_minus_p_over_k() {
        let p = 0.24;
        let expected = expected_similarity(TwinKind::ModelBased, p, Baseline::exact());
        assert!((expected - (1.0 - p / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn unreachable_target_is_an_error() {
        let err = calibrate_divergence(
            TwinKind::MachineLearning,
            0.99,
            Baseline { mean_cosine_p0: 0.95 },
        )
        .unwrap_err();
        assert!(matches!(err, CalibrationError::Unreachable { .. }));
    }
}
