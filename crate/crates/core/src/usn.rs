//! Unbiased and smooth neuron (USN) statistics of pre-activation deviations
//! `d_k = f^i(x_k) − f^i(x₀)` under sampled perturbations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ChannelMap, Network};

pub const DEFAULT_EPS_USN: f64 = 1e-8;

/// Streaming per-layer deviation statistics.
///
/// Per-neuron mean and centred second moment follow Welford's update and
/// merge exactly (up to rounding) across batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsnStats {
    pub layer: usize,
    pub count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    sum_abs: f64,
    sum_sq: f64,
}

impl UsnStats {
    pub fn zeroed(layer: usize, neurons: usize) -> Self {
        UsnStats { layer, count: 0, mean: vec![0.0; neurons], m2: vec![0.0; neurons], sum_abs: 0.0, sum_sq: 0.0 }
    }

    pub fn from_deviations(layer: usize, deviations: &[Vec<f64>]) -> Result<Self> {
        let d = deviations.first().map_or(0, Vec::len);
        let mut s = UsnStats::zeroed(layer, d);
        for dev in deviations {
            s.push(dev)?;
        }
        Ok(s)
    }

    pub fn neurons(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, dev: &[f64]) -> Result<()> {
        if dev.len() != self.mean.len() {
            return Err(Error::contract(format!(
                "deviation has {} entries, layer {} has {}",
                dev.len(),
                self.layer,
                self.mean.len()
            )));
        }
        self.count += 1;
        let n = self.count as f64;
        for ((mu, m2), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(dev) {
            let delta = x - *mu;
            *mu += delta / n;
            *m2 += delta * (x - *mu);
        }
        self.sum_abs += dev.iter().map(|v| v.abs()).sum::<f64>();
        self.sum_sq += dev.iter().map(|v| v * v).sum::<f64>();
        Ok(())
    }

    /// Sample-count-weighted merge.
    pub fn merge(&self, other: &UsnStats) -> Result<UsnStats> {
        if self.layer != other.layer || self.neurons() != other.neurons() {
            return Err(Error::contract(format!(
                "cannot merge stats of layer {} ({} neurons) with layer {} ({} neurons)",
                self.layer,
                self.neurons(),
                other.layer,
                other.neurons()
            )));
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mut out = UsnStats::zeroed(self.layer, self.neurons());
        out.count = self.count + other.count;
        for j in 0..self.neurons() {
            let delta = other.mean[j] - self.mean[j];
            out.mean[j] = (na * self.mean[j] + nb * other.mean[j]) / n;
            out.m2[j] = self.m2[j] + other.m2[j] + delta * delta * na * nb / n;
        }
        out.sum_abs = self.sum_abs + other.sum_abs;
        out.sum_sq = self.sum_sq + other.sum_sq;
        Ok(out)
    }

    pub fn reset(&mut self) {
        *self = UsnStats::zeroed(self.layer, self.neurons());
    }

    /// Mean ℓ₁ deviation; zero when empty.
    pub fn unbiased(&self) -> f64 {
        if self.count == 0 { 0.0 } else { self.sum_abs / self.count as f64 }
    }

    /// Mean squared ℓ₂ deviation; zero when empty.
    pub fn smooth(&self) -> f64 {
        if self.count == 0 { 0.0 } else { self.sum_sq / self.count as f64 }
    }

    pub fn mean_deviation(&self) -> &[f64] {
        &self.mean
    }

    /// `|mean_k d_kj|`.
    pub fn per_neuron_unbiased(&self) -> Vec<f64> {
        self.mean.iter().map(|m| m.abs()).collect()
    }

    /// Population variance of `d_kj` over samples.
    pub fn per_neuron_variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.neurons()];
        }
        let n = self.count as f64;
        self.m2.iter().map(|v| (v / n).max(0.0)).collect()
    }

    /// Variance plus squared mean, i.e. `mean_k d_kj²`.
    pub fn per_neuron_smooth(&self) -> Vec<f64> {
        self.per_neuron_variance().iter().zip(&self.mean).map(|(v, m)| v + m * m).collect()
    }

    pub fn importance(&self, eps_usn: f64) -> Result<Vec<f64>> {
        importance(&self.per_neuron_unbiased(), &self.per_neuron_smooth(), eps_usn, self.neurons())
    }
}

/// `f^i(x_k) − f^i(x₀)` for every sample.
pub fn deviations(net: &Network, x0: &[f64], samples: &[Vec<f64>], i: usize) -> Result<Vec<Vec<f64>>> {
    let base = net.preactivation(x0, i)?;
    samples
        .iter()
        .map(|x| Ok(net.preactivation(x, i)?.iter().zip(&base).map(|(a, b)| a - b).collect()))
        .collect()
}

/// Layer-level `(unbiased, smooth)` metrics.
pub fn layer_metrics(net: &Network, x0: &[f64], samples: &[Vec<f64>], i: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::contract("layer metrics need at least one sample"));
    }
    let devs = deviations(net, x0, samples, i)?;
    let m = devs.len() as f64;
    let unbiased = devs.iter().map(|d| d.iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>() / m;
    let smooth = devs.iter().map(|d| d.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / m;
    Ok((unbiased, smooth))
}

/// Per-neuron `(unbiased_j, smooth_j)`.
pub fn neuron_contributions(
    net: &Network,
    x0: &[f64],
    samples: &[Vec<f64>],
    i: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.len() < 2 {
        return Err(Error::contract("per-neuron statistics need at least two samples"));
    }
    let stats = UsnStats::from_deviations(i, &deviations(net, x0, samples, i)?)?;
    Ok((stats.per_neuron_unbiased(), stats.per_neuron_smooth()))
}

/// `smooth_j / ((unbiased_j² + eps) · d)`. A neuron with zero smooth metric scores 0.
pub fn importance(unbiased: &[f64], smooth: &[f64], eps_usn: f64, d: usize) -> Result<Vec<f64>> {
    if !(eps_usn >= 0.0) || d == 0 {
        return Err(Error::contract("importance needs eps_usn >= 0 and d >= 1"));
    }
    if unbiased.len() != smooth.len() {
        return Err(Error::contract("unbiased and smooth vectors differ in length"));
    }
    Ok(unbiased
        .iter()
        .zip(smooth)
        .map(|(u, s)| if *s == 0.0 { 0.0 } else { s / ((u * u + eps_usn) * d as f64) })
        .collect())
}

/// Mean importance of each channel's neurons.
pub fn channel_importance(importance: &[f64], map: &ChannelMap) -> Result<Vec<f64>> {
    if map.neurons() != importance.len() {
        return Err(Error::contract(format!(
            "channel map covers {} neurons, importance has {}",
            map.neurons(),
            importance.len()
        )));
    }
    Ok(map
        .groups()
        .iter()
        .map(|g| g.iter().map(|&j| importance[j]).sum::<f64>() / g.len() as f64)
        .collect())
}

pub fn accumulate(running: &UsnStats, batch: &UsnStats) -> Result<UsnStats> {
    running.merge(batch)
}
