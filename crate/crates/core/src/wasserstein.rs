//! One-dimensional 2-Wasserstein distances and the importance regulariser.
//!
//! In 1-D the optimal plan is the monotone (quantile) coupling, so the
//! distance is computed by sweeping the two cumulative distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MASS_TOL: f64 = 1e-9;

/// Weighted atoms on the real line, sorted by position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    /// Atoms are sorted by position; weights must be non-negative and sum to 1.
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() || points.is_empty() {
            return Err(Error::contract("distribution needs matching, non-empty points and weights"));
        }
        if points.iter().any(|p| !p.is_finite()) || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::contract("distribution points must be finite and weights non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::contract(format!("weights sum to {total}, not 1")));
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a].total_cmp(&points[b]));
        Ok(DiscreteDistribution {
            points: order.iter().map(|&k| points[k]).collect(),
            weights: order.iter().map(|&k| weights[k]).collect(),
        })
    }

    pub fn point_mass(x: f64) -> Self {
        DiscreteDistribution { points: vec![x], weights: vec![1.0] }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Cumulative sums with the final entry pinned to exactly 1.
fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut c: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w;
            acc.min(1.0)
        })
        .collect();
    if let Some(last) = c.last_mut() {
        *last = 1.0;
    }
    c
}

/// Squared cost of the quantile coupling between sorted atoms.
fn quantile_cost(x: &[f64], ca: &[f64], y: &[f64], cb: &[f64]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut prev = 0.0;
    let mut cost = 0.0;
    while i < x.len() && j < y.len() {
        let next = ca[i].min(cb[j]);
        cost += (next - prev).max(0.0) * (x[i] - y[j]).powi(2);
        prev = next;
        if ca[i] <= next {
            i += 1;
        }
        if cb[j] <= next {
            j += 1;
        }
    }
    cost
}

/// `W₂(μ, ν)`.
pub fn w2_discrete(mu: &DiscreteDistribution, nu: &DiscreteDistribution) -> f64 {
    quantile_cost(&mu.points, &cumulative(&mu.weights), &nu.points, &cumulative(&nu.weights)).sqrt()
}

/// Uniform mass on the `⌈ρ·d⌉` most important neurons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    pub mass: Vec<f64>,
    /// Selected indices in ascending order.
    pub support: Vec<usize>,
    /// `(1 − ρ)` quantile of the importance values, linearly interpolated.
    pub threshold: f64,
}

/// Linear-interpolation percentile (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Number of entries in the top-`ρ` fraction of `d`.
pub fn support_size(rho: f64, d: usize) -> usize {
    ((rho * d as f64 - 1e-9).ceil().max(1.0) as usize).min(d)
}

/// Indices of the `k` largest values, ties resolved towards lower indices.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

pub fn target_distribution(importance: &[f64], rho: f64) -> Result<TargetDistribution> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::contract(format!("target ratio must lie in (0, 1], got {rho}")));
    }
    if importance.is_empty() {
        return Err(Error::contract("importance vector is empty"));
    }
    let support = top_k(importance, support_size(rho, importance.len()));
    let mut mass = vec![0.0; importance.len()];
    for &j in &support {
        mass[j] = 1.0 / support.len() as f64;
    }
    Ok(TargetDistribution { mass, support, threshold: percentile(importance, (1.0 - rho) * 100.0) })
}

/// Space in which transport distances are measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundSpace {
    /// Normalised importance as mass over index positions `j / (d − 1)`.
    #[default]
    IndexPosition,
    /// Max-normalised importance values against the 0/1 target pattern, equal mass per entry.
    ImportanceValue,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WassersteinLoss {
    pub value: f64,
    /// Derivative of `value` with respect to each importance entry.
    pub gradient: Vec<f64>,
    /// Set when every importance was zero and a uniform source was used.
    pub degenerate: bool,
}

fn positions(d: usize) -> Vec<f64> {
    if d == 1 {
        return vec![0.0];
    }
    (0..d).map(|j| j as f64 / (d - 1) as f64).collect()
}

/// Regulariser pulling the importance profile towards its own top-`ρ` target.
pub fn wasserstein_loss(importance: &[f64], rho: f64) -> Result<WassersteinLoss> {
    let target = target_distribution(importance, rho)?;
    wasserstein_loss_against(importance, &target, GroundSpace::IndexPosition)
}

/// Loss against a given target; the target is held fixed when differentiating.
pub fn wasserstein_loss_against(
    importance: &[f64],
    target: &TargetDistribution,
    ground: GroundSpace,
) -> Result<WassersteinLoss> {
    let d = importance.len();
    if d == 0 || target.mass.len() != d {
        return Err(Error::contract("importance and target differ in length"));
    }
    if importance.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::contract("importance must be finite and non-negative"));
    }
    let total: f64 = importance.iter().sum();
    let degenerate = total == 0.0;
    match ground {
        GroundSpace::IndexPosition => index_space_loss(importance, total, target, degenerate),
        GroundSpace::ImportanceValue => value_space_loss(importance, target, degenerate),
    }
}

fn index_space_loss(
    importance: &[f64],
    total: f64,
    target: &TargetDistribution,
    degenerate: bool,
) -> Result<WassersteinLoss> {
    let d = importance.len();
    let x = positions(d);
    let a: Vec<f64> = if degenerate {
        vec![1.0 / d as f64; d]
    } else {
        importance.iter().map(|v| v / total).collect()
    };
    let ca = cumulative(&a);
    let cb = cumulative(&target.mass);
    let cost = quantile_cost(&x, &ca, &x, &cb);
    let value = cost.sqrt();
    let mut gradient = vec![0.0; d];
    if degenerate || value == 0.0 || d == 1 {
        return Ok(WassersteinLoss { value, gradient, degenerate });
    }
    // d cost / d ca_i for each interior breakpoint, with the coupling order fixed.
    let mut dca = vec![0.0; d];
    let mut jt = 0;
    for i in 0..d - 1 {
        while jt + 1 < d && cb[jt] < ca[i] {
            jt += 1;
        }
        let y = x[jt];
        dca[i] = (x[i] - y).powi(2) - (x[i + 1] - y).powi(2);
    }
    // ca_i = Σ_{k ≤ i} a_k, so d cost / d a_k = Σ_{i ≥ k} d cost / d ca_i.
    let mut ga = vec![0.0; d];
    let mut acc = 0.0;
    for k in (0..d).rev() {
        acc += dca[k];
        ga[k] = acc;
    }
    let mean_g: f64 = a.iter().zip(&ga).map(|(ak, gk)| ak * gk).sum();
    for l in 0..d {
        gradient[l] = (ga[l] - mean_g) / total / (2.0 * value);
    }
    Ok(WassersteinLoss { value, gradient, degenerate })
}

fn value_space_loss(importance: &[f64], target: &TargetDistribution, degenerate: bool) -> Result<WassersteinLoss> {
    let d = importance.len();
    let (peak_idx, peak) = importance
        .iter()
        .enumerate()
        .fold((0, 0.0_f64), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let v: Vec<f64> = if degenerate { vec![1.0; d] } else { importance.iter().map(|a| a / peak).collect() };
    let t: Vec<f64> = target.mass.iter().map(|m| if *m > 0.0 { 1.0 } else { 0.0 }).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut ts = t.clone();
    ts.sort_by(f64::total_cmp);
    let cost: f64 = order.iter().zip(&ts).map(|(&j, tv)| (v[j] - tv).powi(2)).sum::<f64>() / d as f64;
    let value = cost.sqrt();
    let mut gradient = vec![0.0; d];
    if degenerate || value == 0.0 {
        return Ok(WassersteinLoss { value, gradient, degenerate });
    }
    let mut gv = vec![0.0; d];
    for (&j, tv) in order.iter().zip(&ts) {
        gv[j] = 2.0 * (v[j] - tv) / d as f64;
    }
    // v_j = A_j / A_peak.
    let mut through_peak = 0.0;
    for j in 0..d {
        gradient[j] += gv[j] / peak;
        through_peak += gv[j] * importance[j] / (peak * peak);
    }
    gradient[peak_idx] -= through_peak;
    gradient.iter_mut().for_each(|g| *g /= 2.0 * value);
    Ok(WassersteinLoss { value, gradient, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_dist(rng: &mut ChaCha8Rng, n: usize) -> DiscreteDistribution {
        let pts: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        DiscreteDistribution::new(pts, w.iter().map(|v| v / s).collect()).unwrap()
    }

    #[test]
    fn basic_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mu = rand_dist(&mut rng, 5);
        assert_eq!(w2_discrete(&mu, &mu), 0.0);
        assert_eq!(w2_discrete(&DiscreteDistribution::point_mass(0.0), &DiscreteDistribution::point_mass(1.0)), 1.0);
        assert!(DiscreteDistribution::new(vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(DiscreteDistribution::new(vec![0.0, 1.0], vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (n1, n2, n3) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
            let (a, b, c) = (rand_dist(&mut rng, n1), rand_dist(&mut rng, n2), rand_dist(&mut rng, n3));
            assert!((w2_discrete(&a, &b) - w2_discrete(&b, &a)).abs() < 1e-12);
            assert!(w2_discrete(&a, &c) <= w2_discrete(&a, &b) + w2_discrete(&b, &c) + 1e-9);
        }
    }

    #[test]
    fn two_atoms_shift() {
        // Uniform on {0, 1} against uniform on {0.5, 1.5}: every unit of mass moves 0.5.
        let a = DiscreteDistribution::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let b = DiscreteDistribution::new(vec![0.5, 1.5], vec![0.5, 0.5]).unwrap();
        assert!((w2_discrete(&a, &b) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn targets() {
        let t = target_distribution(&[0.4, 0.1, 0.3], 1.0).unwrap();
        assert_eq!(t.support, vec![0, 1, 2]);
        assert!(t.mass.iter().all(|m| (m - 1.0 / 3.0).abs() < 1e-15));
        let t = target_distribution(&[1.0, 2.0, 3.0, 4.0], 0.25).unwrap();
        assert_eq!(t.mass, vec![0.0, 0.0, 0.0, 1.0]);
        let t = target_distribution(&[2.0; 10], 0.25).unwrap();
        assert_eq!(t.support, vec![0, 1, 2]);
        assert!(target_distribution(&[1.0], 0.0).is_err());
        assert!((percentile(&[1.0, 2.0, 3.0, 4.0], 75.0) - 3.25).abs() < 1e-15);
    }

    #[test]
    fn loss_zero_when_matched_and_span_when_opposite() {
        let l = wasserstein_loss(&[0.0, 0.0, 5.0, 5.0], 0.5).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.gradient.iter().all(|g| *g == 0.0));

        let d = 6;
        let mut imp = vec![0.0; d];
        imp[0] = 1.0;
        let mut mass = vec![0.0; d];
        mass[d - 1] = 1.0;
        let target = TargetDistribution { mass, support: vec![d - 1], threshold: 0.0 };
        let l = wasserstein_loss_against(&imp, &target, GroundSpace::IndexPosition).unwrap();
        assert!((l.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_source() {
        let l = wasserstein_loss(&[0.0; 5], 0.4).unwrap();
        assert!(l.degenerate && l.value > 0.0);
        assert!(wasserstein_loss(&[1.0, -1.0], 0.5).is_err());
    }

    #[test]
    fn scale_invariance() {
        let imp = [0.3, 1.2, 0.05, 0.9, 0.4];
        let base = wasserstein_loss(&imp, 0.4).unwrap().value;
        for c in [1e-3, 7.0, 1e4] {
            let scaled: Vec<f64> = imp.iter().map(|v| v * c).collect();
            assert!((wasserstein_loss(&scaled, 0.4).unwrap().value - base).abs() < 1e-12);
        }
    }

    fn fd_check(ground: GroundSpace, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checked = 0;
        while checked < 20 {
            let imp: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..2.0)).collect();
            let target = target_distribution(&imp, 0.3).unwrap();
            let l = wasserstein_loss_against(&imp, &target, ground).unwrap();
            let h = 1e-6;
            let mut ok = true;
            let mut fds = Vec::new();
            for k in 0..8 {
                let (mut p, mut m) = (imp.clone(), imp.clone());
                p[k] += h;
                m[k] -= h;
                let lp = wasserstein_loss_against(&p, &target, ground).unwrap().value;
                let lm = wasserstein_loss_against(&m, &target, ground).unwrap().value;
                // Skip probes that straddle a change in the coupling order.
                let l0 = l.value;
                let one_sided = ((lp - l0) / h - (l0 - lm) / h).abs();
                if one_sided > 1e-3 * (lp - lm).abs().max(1e-6) / h {
                    ok = false;
                }
                fds.push((lp - lm) / (2.0 * h));
            }
            if !ok {
                continue;
            }
            for k in 0..8 {
                let scale = fds[k].abs().max(l.gradient[k].abs()).max(1e-8);
                assert!((fds[k] - l.gradient[k]).abs() / scale <= 1e-3, "{ground:?} k={k}: {} vs {}", fds[k], l.gradient[k]);
            }
            checked += 1;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        fd_check(GroundSpace::IndexPosition, 3);
        fd_check(GroundSpace::ImportanceValue, 4);
    }
}
