//! Fidelity evaluation: similarity and nonparametric statistics over
//! paired device responses, plus the scalability and time-cost
//! experiments.
//!
//! The statistics follow the usual conventions: cosine similarity over
//! response encodings, the two-sided Wilcoxon signed-rank test (exact by
//! sign-assignment enumeration for n <= 20, normal approximation with
//! continuity and tie correction above), and Cliff's delta with the
//! standard 0.147 / 0.33 / 0.474 magnitude thresholds.

pub mod encode;
pub mod experiments;
pub mod report;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("samples must be non-empty")]
    Empty,
    #[error("samples must be finite")]
    NonFinite,
}

/// Cosine similarity `u.v / (|u||v|)`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, StatsError> {
    if u.len() != v.len() {
        return Err(StatsError::LengthMismatch(u.len(), v.len()));
    }
    if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(StatsError::ZeroVector);
    }
    Ok(dot / (nu * nv))
}

/// Result of the two-sided Wilcoxon signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n: usize,
    /// True when every difference was zero; `p` is then 1.0 by convention.
    pub all_zero: bool,
}

/// Largest n for which the exact enumeration over 2^n sign assignments
/// runs.
pub const WILCOXON_EXACT_MAX_N: usize = 20;

/// Two-sided Wilcoxon signed-rank test on paired samples.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::Empty);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    wilcoxon_from_diffs(&diffs)
}

/// Two-sided Wilcoxon signed-rank test from paired differences.
pub fn wilcoxon_from_diffs(diffs: &[f64]) -> Result<WilcoxonResult, StatsError> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if nonzero.is_empty() {
        return Ok(WilcoxonResult {
            p: 1.0,
            w_plus: 0.0,
            w_minus: 0.0,
            n: 0,
            all_zero: true,
        });
    }

    let n = nonzero.len();
    // Doubled average ranks stay integral (ties average to halves), so the
    // exact path works in integer arithmetic.
    let ranks2 = doubled_ranks(&nonzero);
    let w_plus2: i64 = nonzero
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let total2: i64 = ranks2.iter().sum(); // n(n+1)
    let w_minus2 = total2 - w_plus2;

    let p = if n <= WILCOXON_EXACT_MAX_N {
        exact_two_sided_p(&ranks2, w_plus2, total2)
    } else {
        normal_approx_p(&nonzero, w_plus2, n)
    };

    Ok(WilcoxonResult {
        p: p.clamp(0.0, 1.0),
        w_plus: w_plus2 as f64 / 2.0,
        w_minus: w_minus2 as f64 / 2.0,
        n,
        all_zero: false,
    })
}

/// Average ranks of |d|, doubled so ties keep the values integral.
fn doubled_ranks(diffs: &[f64]) -> Vec<i64> {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks2 = vec![0i64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // Positions i..=j (0-based) share the average rank; doubled it is
        // (i+1 + j+1) = i + j + 2.
        let rank2 = (i + j + 2) as i64;
        for &k in &order[i..=j] {
            ranks2[k] = rank2;
        }
        i = j + 1;
    }
    ranks2
}

/// Exact two-sided p: the share of the 2^n sign assignments whose W+ lies
/// at least as far from the mean as observed.
fn exact_two_sided_p(ranks2: &[i64], w_plus2: i64, total2: i64) -> f64 {
    let n = ranks2.len();
    // The mean of the doubled statistic 2W+ is total2/2, so the distance
    // of an assignment from the mean is |2*w2 - total2| in integer units.
    let observed = (2 * w_plus2 - total2).abs();
    let mut count = 0u64;
    let assignments = 1u64 << n;
    for mask in 0..assignments {
        let mut w2 = 0i64;
        for (bit, r) in ranks2.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                w2 += r;
            }
        }
        if (2 * w2 - total2).abs() >= observed {
            count += 1;
        }
    }
    count as f64 / assignments as f64
}

/// Normal approximation with continuity correction and tie correction.
fn normal_approx_p(diffs: &[f64], w_plus2: i64, n: usize) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    // Tie counts per |d| group.
    let mut sorted: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let variance = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if variance <= 0.0 {
        return 1.0;
    }
    let w_plus = w_plus2 as f64 / 2.0;
    let centered = w_plus - mean;
    let corrected = centered - 0.5 * centered.signum();
    let z = corrected / variance.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0)
}

/// Effect-size label for |delta|.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Magnitude {
    Negligible,
    Small,
    Medium,
    Large,
}

impl Magnitude {
    pub fn as_str(self) -> &'static str {
        match self {
            Magnitude::Negligible => "negligible",
            Magnitude::Small => "small",
            Magnitude::Medium => "medium",
            Magnitude::Large => "large",
        }
    }
}

/// Magnitude labeling is a pure function of |delta|.
pub fn magnitude_of(delta: f64) -> Magnitude {
    let d = delta.abs();
    if d < 0.147 {
        Magnitude::Negligible
    } else if d < 0.33 {
        Magnitude::Small
    } else if d < 0.474 {
        Magnitude::Medium
    } else {
        Magnitude::Large
    }
}

/// Cliff's delta: (#{a>b} - #{a<b}) / (|A||B|), with its magnitude label.
/// Counting runs on sorted copies in O((n+m) log(nm)) rather than over
/// all pairs.
pub fn cliffs_delta(a: &[f64], b: &[f64]) -> Result<(f64, Magnitude), StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut sorted_b: Vec<f64> = b.to_vec();
    sorted_b.sort_by(|x, y| x.partial_cmp(y).unwrap());

    let mut greater: i64 = 0;
    let mut less: i64 = 0;
    for &x in a {
        let below = sorted_b.partition_point(|&y| y < x) as i64;
        let at_or_below = sorted_b.partition_point(|&y| y <= x) as i64;
        greater += below;
        less += sorted_b.len() as i64 - at_or_below;
    }
    let delta = (greater - less) as f64 / (a.len() as f64 * b.len() as f64);
    Ok((delta, magnitude_of(delta)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_matches_hand_computed_values() {
        assert!((cosine(&[2.0, 1.0], &[2.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // [1,0,1].[1,1,1] = 2 / (sqrt(2) * sqrt(3))
        let expected = 2.0 / (2.0f64.sqrt() * 3.0f64.sqrt());
        let got = cosine(&[1.0, 0.0, 1.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.81650).abs() < 1e-5);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(StatsError::ZeroVector)
        ));
    }

    #[test]
    fn wilcoxon_symmetric_differences_give_p_one() {
        // W+ = W- = 5 over ranks {1.5, 1.5, 3.5, 3.5}.
        let r = wilcoxon_from_diffs(&[1.0, -1.0, 2.0, -2.0]).unwrap();
        assert_eq!(r.w_plus, 5.0);
        assert_eq!(r.w_minus, 5.0);
        assert_eq!(r.p, 1.0);
        assert!(!r.all_zero);
    }

    #[test]
    fn wilcoxon_single_pair_is_p_one_two_sided() {
        let r = wilcoxon_from_diffs(&[3.0]).unwrap();
        assert_eq!(r.n, 1);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn wilcoxon_all_zero_flagged() {
        let r = wilcoxon_from_diffs(&[0.0, 0.0, 0.0]).unwrap();
        assert!(r.all_zero);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.n, 0);
    }

    #[test]
    fn wilcoxon_detects_one_sided_shift() {
        // 15 strictly positive differences: strong evidence.
        let diffs: Vec<f64> = (1..=15).map(|i| i as f64).collect();
        let r = wilcoxon_from_diffs(&diffs).unwrap();
        assert!(r.p < 0.01, "p = {}", r.p);
    }

    #[test]
    fn cliffs_delta_matches_brute_force_counts() {
        // 8 of 9 pairs favor A.
        let (d, m) = cliffs_delta(&[3.0, 4.0, 5.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((d - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(m, Magnitude::Large);

        let (d, m) = cliffs_delta(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(m, Magnitude::Negligible);
    }

    #[test]
    fn magnitude_thresholds() {
        assert_eq!(magnitude_of(-0.12), Magnitude::Negligible);
        assert_eq!(magnitude_of(0.146999), Magnitude::Negligible);
        assert_eq!(magnitude_of(0.147), Magnitude::Small);
        assert_eq!(magnitude_of(-0.4), Magnitude::Medium);
        assert_eq!(magnitude_of(0.474), Magnitude::Large);
    }
}
