//! Robustness certificates for keypoint outputs.
//!
//! * `grid`: sound deterministic bound from a partition of the perturbation
//!   interval plus the input-to-output Lipschitz constant.
//! * `probabilistic`: per-neuron bias/variance conditions that guarantee the
//!   output stays within `δ` with probability `1 − α`.
//! * `falsify`: sampling search for a concrete violation.

mod campaign;

pub use campaign::{
    campaign, CampaignConfig, CampaignRecord, CampaignReport, CampaignSummary, LabeledImage, NamedNetwork,
    CAMPAIGN_CSV_HEADER,
};

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LipschitzOptions, LipschitzProfile, Network};
use crate::perturbation::PerturbationSpec;
use crate::usn::{deviations, UsnStats};

pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_PROBABILISTIC_SAMPLES: usize = 256;

/// Relative slack on the Lipschitz term of the grid bound, covering rounding.
const GRID_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Violated,
    Unknown,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Holds => "holds",
            Verdict::Violated => "violated",
            Verdict::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    GridLipschitz,
    Probabilistic,
    SamplingFalsify,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::GridLipschitz => "grid-lipschitz",
            Method::Probabilistic => "probabilistic",
            Method::SamplingFalsify => "sampling-falsify",
        }
    }
}

/// Every keypoint coordinate must stay within `delta` pixels (ℓ∞).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointCriterion {
    pub delta: f64,
}

impl Default for KeypointCriterion {
    fn default() -> Self {
        KeypointCriterion { delta: 1.0 }
    }
}

impl KeypointCriterion {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::config(format!("criterion radius must be positive, got {delta}")));
        }
        Ok(KeypointCriterion { delta })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronCheck {
    Bias,
    Variance,
}

/// The neuron whose bias or variance is closest to (or furthest past) its bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BindingNeuron {
    pub layer: usize,
    pub neuron: usize,
    pub check: NeuronCheck,
    pub value: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateResult {
    pub verdict: Verdict,
    pub method: Method,
    /// Slack of the binding inequality: `δ − bound` for grid and sampling,
    /// `1 − max(value / bound)` for the probabilistic test.
    pub margin: f64,
    /// `1 − α` for probabilistic results.
    pub confidence: Option<f64>,
    pub wall_time: f64,
    /// Perturbation parameter of a violating input.
    pub witness: Option<f64>,
    /// Largest ℓ∞ output deviation observed or bounded.
    pub max_deviation: f64,
    /// Per keypoint: certified (grid) or not violated (sampling).
    pub keypoints_ok: Vec<bool>,
    pub binding: Option<BindingNeuron>,
}

/// `(unbiased_bound, smooth_bound)` necessary conditions at one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NecessaryBounds {
    pub layer: usize,
    pub unbiased: f64,
    pub smooth: f64,
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Per-keypoint ℓ∞ deviation (coordinates are `[x0, y0, x1, y1, ...]`).
fn keypoint_devs(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.chunks(2).zip(b.chunks(2)).map(|(p, q)| linf(p, q)).collect()
}

/// A network paired with its Lipschitz profile.
#[derive(Clone, Debug)]
pub struct Certifier<'a> {
    net: &'a Network,
    profile: LipschitzProfile,
}

impl<'a> Certifier<'a> {
    pub fn new(net: &'a Network) -> Result<Self> {
        Ok(Certifier { net, profile: LipschitzProfile::compute(net, &LipschitzOptions::default())? })
    }

    pub fn with_profile(net: &'a Network, profile: LipschitzProfile) -> Result<Self> {
        if profile.num_linear() != net.num_linear() {
            return Err(Error::contract("Lipschitz profile does not belong to this network"));
        }
        Ok(Certifier { net, profile })
    }

    pub fn profile(&self) -> &LipschitzProfile {
        &self.profile
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    pub fn grid(
        &self,
        x0: &[f64],
        spec: &PerturbationSpec,
        criterion: &KeypointCriterion,
        n_cells: usize,
    ) -> Result<CertificateResult> {
        let start = Instant::now();
        let cells = spec.grid(x0, n_cells)?;
        let y0 = self.net.predict(x0)?;
        let c0 = self.profile.from_input() * (1.0 + GRID_SLACK);
        let mut worst = 0.0_f64;
        let mut per_kp = vec![0.0_f64; y0.len().div_ceil(2)];
        for cell in &cells {
            let yc = self.net.predict(&cell.image)?;
            let slack = c0 * cell.input_radius;
            for (w, d) in per_kp.iter_mut().zip(keypoint_devs(&yc, &y0)) {
                *w = w.max(d + slack);
            }
            worst = worst.max(linf(&yc, &y0) + slack);
        }
        let verdict = if worst <= criterion.delta { Verdict::Holds } else { Verdict::Unknown };
        Ok(CertificateResult {
            verdict,
            method: Method::GridLipschitz,
            margin: criterion.delta - worst,
            confidence: None,
            wall_time: start.elapsed().as_secs_f64(),
            witness: None,
            max_deviation: worst,
            keypoints_ok: per_kp.iter().map(|b| *b <= criterion.delta).collect(),
            binding: None,
        })
    }

    /// Grid certificate with local refinement: starts from `initial_cells`
    /// equal cells and bisects any cell whose bound exceeds `δ` for a keypoint
    /// still in play, down to width `2ε / max_cells`. A keypoint that fails on
    /// a cell of minimal width is dropped; the search ends once none remain.
    pub fn adaptive_grid(
        &self,
        x0: &[f64],
        spec: &PerturbationSpec,
        criterion: &KeypointCriterion,
        initial_cells: usize,
        max_cells: usize,
    ) -> Result<CertificateResult> {
        let start = Instant::now();
        if initial_cells == 0 || max_cells < initial_cells {
            return Err(Error::contract("need 1 <= initial_cells <= max_cells"));
        }
        spec.validate()?;
        let y0 = self.net.predict(x0)?;
        let c0 = self.profile.from_input() * (1.0 + GRID_SLACK);
        let n_kp = y0.len().div_ceil(2);
        let mut ok = vec![true; n_kp];
        let mut worst = 0.0_f64;
        let min_hw = spec.epsilon / max_cells as f64 * (1.0 + 1e-12);
        let hw0 = spec.epsilon / initial_cells as f64;
        let lo = spec.center() - spec.epsilon;
        let mut stack: Vec<(f64, f64)> =
            (0..initial_cells).rev().map(|k| (lo + (2 * k + 1) as f64 * hw0, hw0)).collect();
        while let Some((sc, hw)) = stack.pop() {
            if !ok.iter().any(|o| *o) {
                break;
            }
            let yc = self.net.predict(&spec.apply_unchecked(x0, sc))?;
            let slack = c0 * spec.input_radius(x0, hw);
            let bounds: Vec<f64> = keypoint_devs(&yc, &y0).iter().map(|d| d + slack).collect();
            let failing: Vec<usize> = (0..n_kp).filter(|&k| ok[k] && bounds[k] > criterion.delta).collect();
            if failing.is_empty() {
                worst = worst.max((0..n_kp).filter(|&k| ok[k]).map(|k| bounds[k]).fold(0.0, f64::max));
            } else if hw / 2.0 >= min_hw {
                stack.push((sc + hw / 2.0, hw / 2.0));
                stack.push((sc - hw / 2.0, hw / 2.0));
            } else {
                for k in failing {
                    ok[k] = false;
                    worst = worst.max(bounds[k]);
                }
            }
        }
        let verdict = if ok.iter().all(|o| *o) { Verdict::Holds } else { Verdict::Unknown };
        Ok(CertificateResult {
            verdict,
            method: Method::GridLipschitz,
            margin: criterion.delta - worst,
            confidence: None,
            wall_time: start.elapsed().as_secs_f64(),
            witness: None,
            max_deviation: worst,
            keypoints_ok: ok,
            binding: None,
        })
    }

    /// Bias and variance thresholds `(δ/(2C√d), αδ²/(4C²d²(L−i)))` for layer `i`.
    pub fn neuron_thresholds(&self, i: usize, criterion: &KeypointCriterion, alpha: f64) -> Result<(f64, f64)> {
        let l = self.net.num_linear();
        if i == 0 || i >= l {
            return Err(Error::contract(format!("layer {i} out of range 1..={}", l.saturating_sub(1))));
        }
        let c = self.profile.to_output(i)?;
        let d = self.net.preactivation_len(i)? as f64;
        let delta = criterion.delta;
        let span = (l - i) as f64;
        if c == 0.0 {
            return Ok((f64::INFINITY, f64::INFINITY));
        }
        Ok((delta / (2.0 * c * d.sqrt()), alpha * delta * delta / (4.0 * c * c * d * d * span)))
    }

    pub fn necessary_bounds(&self, i: usize, criterion: &KeypointCriterion, alpha: f64) -> Result<NecessaryBounds> {
        let l = self.net.num_linear();
        if i == 0 || i >= l {
            return Err(Error::contract(format!("layer {i} out of range 1..={}", l.saturating_sub(1))));
        }
        let c = self.profile.to_output(i)?;
        let d = self.net.preactivation_len(i)? as f64;
        let delta = criterion.delta;
        if c == 0.0 {
            return Ok(NecessaryBounds { layer: i, unbiased: f64::INFINITY, smooth: f64::INFINITY });
        }
        Ok(NecessaryBounds {
            layer: i,
            unbiased: delta * d.sqrt() / (2.0 * c),
            smooth: delta * delta / (4.0 * c * c) * (alpha / (d * (l - i) as f64) + 1.0),
        })
    }

    /// Per-layer deviation statistics from `m` sampled perturbations.
    pub fn sample_stats<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        spec: &PerturbationSpec,
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<UsnStats>> {
        let samples = spec.sample(x0, m, rng)?;
        (1..self.net.num_linear())
            .map(|i| UsnStats::from_deviations(i, &deviations(self.net, x0, &samples, i)?))
            .collect()
    }

    pub fn probabilistic<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        spec: &PerturbationSpec,
        criterion: &KeypointCriterion,
        alpha: f64,
        m: usize,
        rng: &mut R,
    ) -> Result<CertificateResult> {
        let start = Instant::now();
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::contract(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if m < 2 {
            return Err(Error::contract("probabilistic certification needs at least two samples"));
        }
        if self.net.num_linear() < 2 {
            return Err(Error::contract("probabilistic certification needs at least two linear layers"));
        }
        let stats = self.sample_stats(x0, spec, m, rng)?;
        let mut binding: Option<BindingNeuron> = None;
        let mut worst = 0.0_f64;
        let bessel = m as f64 / (m - 1) as f64;
        for s in &stats {
            let (bias_bound, var_bound) = self.neuron_thresholds(s.layer, criterion, alpha)?;
            let bias = s.per_neuron_unbiased();
            let var = s.per_neuron_variance();
            for j in 0..s.neurons() {
                for (check, value, bound) in
                    [(NeuronCheck::Bias, bias[j], bias_bound), (NeuronCheck::Variance, var[j] * bessel, var_bound)]
                {
                    let ratio = if value == 0.0 { 0.0 } else { value / bound };
                    if binding.is_none() || ratio > worst {
                        worst = ratio;
                        binding = Some(BindingNeuron { layer: s.layer, neuron: j, check, value, bound });
                    }
                }
            }
        }
        let verdict = if worst <= 1.0 { Verdict::Holds } else { Verdict::Unknown };
        Ok(CertificateResult {
            verdict,
            method: Method::Probabilistic,
            margin: 1.0 - worst,
            confidence: Some(1.0 - alpha),
            wall_time: start.elapsed().as_secs_f64(),
            witness: None,
            max_deviation: f64::NAN,
            keypoints_ok: Vec::new(),
            binding,
        })
    }

    pub fn falsify<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        spec: &PerturbationSpec,
        criterion: &KeypointCriterion,
        m: usize,
        rng: &mut R,
    ) -> Result<CertificateResult> {
        let start = Instant::now();
        if m == 0 {
            return Err(Error::contract("falsification needs at least one sample"));
        }
        spec.validate()?;
        let y0 = self.net.predict(x0)?;
        let c = spec.center();
        let mut params = vec![c - spec.epsilon, c + spec.epsilon];
        params.extend(spec.sample_params(m, rng));
        let mut worst = 0.0_f64;
        let mut kp_ok = vec![true; y0.len().div_ceil(2)];
        for s in params {
            let y = self.net.predict(&spec.apply_unchecked(x0, s))?;
            let dev = linf(&y, &y0);
            for (ok, d) in kp_ok.iter_mut().zip(keypoint_devs(&y, &y0)) {
                *ok &= d <= criterion.delta;
            }
            worst = worst.max(dev);
            if dev > criterion.delta {
                return Ok(CertificateResult {
                    verdict: Verdict::Violated,
                    method: Method::SamplingFalsify,
                    margin: criterion.delta - dev,
                    confidence: None,
                    wall_time: start.elapsed().as_secs_f64(),
                    witness: Some(s),
                    max_deviation: dev,
                    keypoints_ok: kp_ok,
                    binding: None,
                });
            }
        }
        Ok(CertificateResult {
            verdict: Verdict::Unknown,
            method: Method::SamplingFalsify,
            margin: criterion.delta - worst,
            confidence: None,
            wall_time: start.elapsed().as_secs_f64(),
            witness: None,
            max_deviation: worst,
            keypoints_ok: kp_ok,
            binding: None,
        })
    }
}

pub fn certify_grid(
    net: &Network,
    x0: &[f64],
    spec: &PerturbationSpec,
    criterion: &KeypointCriterion,
    n_cells: usize,
) -> Result<CertificateResult> {
    Certifier::new(net)?.grid(x0, spec, criterion, n_cells)
}

pub fn certify_probabilistic<R: Rng + ?Sized>(
    net: &Network,
    x0: &[f64],
    spec: &PerturbationSpec,
    criterion: &KeypointCriterion,
    alpha: f64,
    m: usize,
    rng: &mut R,
) -> Result<CertificateResult> {
    Certifier::new(net)?.probabilistic(x0, spec, criterion, alpha, m, rng)
}

pub fn usn_necessary_bounds(
    net: &Network,
    i: usize,
    criterion: &KeypointCriterion,
    alpha: f64,
) -> Result<NecessaryBounds> {
    Certifier::new(net)?.necessary_bounds(i, criterion, alpha)
}

pub fn falsify<R: Rng + ?Sized>(
    net: &Network,
    x0: &[f64],
    spec: &PerturbationSpec,
    criterion: &KeypointCriterion,
    m: usize,
    rng: &mut R,
) -> Result<CertificateResult> {
    Certifier::new(net)?.falsify(x0, spec, criterion, m, rng)
}
