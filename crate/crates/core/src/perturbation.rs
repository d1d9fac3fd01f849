//! Brightness and contrast perturbations of a single image.
//!
//! Both are one-parameter families `s ↦ h(s)` with pixel values clipped to
//! `[0, 1]`; the unperturbed image sits at `s = s₀`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// `clip(x + s)`, `s₀ = 0`.
    Brightness,
    /// `clip(s · x)`, `s₀ = 1`.
    Contrast,
}

impl PerturbationKind {
    pub fn center(self) -> f64 {
        match self {
            PerturbationKind::Brightness => 0.0,
            PerturbationKind::Contrast => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::Brightness => "brightness",
            PerturbationKind::Contrast => "contrast",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// Radius in parameter space.
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

/// One cell of a grid partition of `[s₀ − ε, s₀ + ε]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub s_center: f64,
    pub half_width: f64,
    pub image: Vec<f64>,
    /// Upper bound on `‖h(s) − h(s_center)‖₂` over the cell.
    pub input_radius: f64,
}

/// Slack for parameters that land on the boundary through rounding.
const RADIUS_SLACK: f64 = 1e-12;

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, epsilon: f64) -> Result<Self> {
        let spec = PerturbationSpec { kind, epsilon, seed: 0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn brightness(epsilon: f64) -> Self {
        PerturbationSpec { kind: PerturbationKind::Brightness, epsilon, seed: 0 }
    }

    pub fn contrast(epsilon: f64) -> Self {
        PerturbationSpec { kind: PerturbationKind::Contrast, epsilon, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("perturbation radius must be finite and >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn center(&self) -> f64 {
        self.kind.center()
    }

    /// Short identifier such as `brightness@0.0078431`.
    pub fn label(&self) -> String {
        format!("{}@{:.7}", self.kind.name(), self.epsilon)
    }

    /// `h(s)`, clipped to `[0, 1]`.
    pub fn apply(&self, x0: &[f64], s: f64) -> Result<Vec<f64>> {
        if !s.is_finite() || (s - self.center()).abs() > self.epsilon + RADIUS_SLACK {
            return Err(Error::contract(format!(
                "parameter {s} outside [{} ± {}]",
                self.center(),
                self.epsilon
            )));
        }
        Ok(self.apply_unchecked(x0, s))
    }

    pub(crate) fn apply_unchecked(&self, x0: &[f64], s: f64) -> Vec<f64> {
        match self.kind {
            PerturbationKind::Brightness => x0.iter().map(|v| (v + s).clamp(0.0, 1.0)).collect(),
            PerturbationKind::Contrast => x0.iter().map(|v| (s * v).clamp(0.0, 1.0)).collect(),
        }
    }

    /// `m` parameters drawn uniformly from `[s₀ − ε, s₀ + ε]`.
    pub fn sample_params<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<f64> {
        let c = self.center();
        (0..m)
            .map(|_| if self.epsilon == 0.0 { c } else { c + self.epsilon * (2.0 * rng.random::<f64>() - 1.0) })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, x0: &[f64], m: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if m == 0 {
            return Err(Error::contract("sample count must be at least 1"));
        }
        self.validate()?;
        Ok(self.sample_params(m, rng).into_iter().map(|s| self.apply_unchecked(x0, s)).collect())
    }

    /// Bound on `‖h(s) − h(s')‖₂` for `|s − s'| ≤ half_width` (pre-clip; clipping is 1-Lipschitz).
    pub fn input_radius(&self, x0: &[f64], half_width: f64) -> f64 {
        match self.kind {
            PerturbationKind::Brightness => half_width * (x0.len() as f64).sqrt(),
            PerturbationKind::Contrast => half_width * x0.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    /// Partitions the parameter interval into `n_cells` equal cells.
    pub fn grid(&self, x0: &[f64], n_cells: usize) -> Result<Vec<GridCell>> {
        if n_cells == 0 {
            return Err(Error::contract("grid needs at least one cell"));
        }
        self.validate()?;
        let half_width = self.epsilon / n_cells as f64;
        let radius = self.input_radius(x0, half_width);
        let lo = self.center() - self.epsilon;
        Ok((0..n_cells)
            .map(|k| {
                let s_center = lo + (2 * k + 1) as f64 * half_width;
                GridCell { s_center, half_width, image: self.apply_unchecked(x0, s_center), input_radius: radius }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64) / 100.0).collect()
    }

    fn l2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn identity_parameters() {
        let x = image(50);
        assert_eq!(PerturbationSpec::brightness(0.1).apply(&x, 0.0).unwrap(), x);
        assert_eq!(PerturbationSpec::contrast(0.1).apply(&x, 1.0).unwrap(), x);
    }

    #[test]
    fn brightness_shift_on_mid_gray() {
        let x = vec![0.5; 16];
        let y = PerturbationSpec::brightness(2.0 / 255.0).apply(&x, 2.0 / 255.0).unwrap();
        assert!(y.iter().all(|v| *v == 0.5 + 2.0 / 255.0));
    }

    #[test]
    fn out_of_radius_is_contract_error() {
        let x = image(4);
        assert!(matches!(PerturbationSpec::brightness(0.01).apply(&x, 0.02), Err(Error::Contract(_))));
        assert!(matches!(PerturbationSpec::contrast(0.01).apply(&x, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_radius_samples_are_x0() {
        let x = image(9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for img in PerturbationSpec::contrast(0.0).sample(&x, 20, &mut rng).unwrap() {
            assert_eq!(img, x);
        }
    }

    #[test]
    fn uniform_mean_within_three_sigma() {
        let spec = PerturbationSpec::brightness(0.05);
        let m = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mean = spec.sample_params(m, &mut rng).iter().sum::<f64>() / m as f64;
        assert!(mean.abs() <= 3.0 * spec.epsilon / (3.0 * m as f64).sqrt());
    }

    #[test]
    fn sampling_is_reproducible() {
        let x = image(10);
        let spec = PerturbationSpec::contrast(0.2);
        let a = spec.sample(&x, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = spec.sample(&x, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_closed_forms() {
        let x = vec![0.3; 64 * 64];
        let eps = 2.0 / 255.0;
        let spec = PerturbationSpec::brightness(eps);
        let one = spec.grid(&x, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].half_width, eps);
        let four = spec.grid(&x, 4).unwrap();
        for c in &four {
            assert!((c.input_radius - eps * 16.0).abs() < 1e-15);
        }
        let eight = spec.grid(&x, 8).unwrap();
        assert!((eight[0].input_radius * 2.0 - four[0].input_radius).abs() < 1e-15);
        assert!(matches!(spec.grid(&x, 0), Err(Error::Contract(_))));
        // Cells tile the interval.
        assert!((four[0].s_center - four[0].half_width + eps).abs() < 1e-15);
        assert!((four[3].s_center + four[3].half_width - eps).abs() < 1e-15);
    }

    #[test]
    fn grid_bounds_are_sound() {
        let x = image(144);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for spec in [PerturbationSpec::brightness(0.3), PerturbationSpec::contrast(0.4)] {
            for cell in spec.grid(&x, 3).unwrap() {
                for _ in 0..10_000 {
                    let s = cell.s_center + cell.half_width * (2.0 * rng.random::<f64>() - 1.0);
                    let d = l2(&spec.apply(&x, s).unwrap(), &cell.image);
                    assert!(d <= cell.input_radius * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn continuity_sweep() {
        let x = image(30);
        for spec in [PerturbationSpec::brightness(0.5), PerturbationSpec::contrast(0.5)] {
            let base = spec.apply(&x, spec.center() + 0.1).unwrap();
            let mut prev = f64::INFINITY;
            for k in 1..12 {
                let delta = 0.1 / 2f64.powi(k);
                let d = l2(&spec.apply(&x, spec.center() + 0.1 + delta).unwrap(), &base);
                assert!(d <= prev);
                prev = d;
            }
            assert!(prev < 1e-3);
        }
    }
}
