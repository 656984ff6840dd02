//! Oracles shared by the integration tests: central finite differences and
//! exhaustive threshold-sweep average precision.

#![allow(dead_code)]

use rand::Rng;

/// `max(|a|, |b|, 1e-6)`-relative error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest elementwise relative error between two gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// AP as the sum over true positives of the precision of the set
/// `{score >= s_tp}`, divided by `positives`. Quadratic on purpose.
pub fn brute_force_ap(scored: &[(f64, bool)], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for &(s, hit) in scored {
        if !hit {
            continue;
        }
        let selected = scored.iter().filter(|(t, _)| *t >= s).count();
        let tp = scored.iter().filter(|(t, h)| *t >= s && *h).count();
        total += tp as f64 / selected as f64;
    }
    total / positives as f64
}

/// Sweep over every distinct threshold: `Σ (R_i - R_{i-1}) · P_i`.
pub fn sweep_ap(scored: &[(f64, bool)], positives: usize) -> f64 {
    let mut thresholds: Vec<f64> = scored.iter().map(|p| p.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let selected = scored.iter().filter(|(s, _)| *s >= t).count();
        let tp = scored.iter().filter(|(s, h)| *s >= t && *h).count();
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev) * tp as f64 / selected as f64;
        prev = recall;
    }
    ap
}
