//! Layer-to-output Lipschitz constants.
//!
//! ReLU is 1-Lipschitz, so the deviation at layer `i` is amplified by at most
//! the spectral norms of the later linear layers times the head constant.

use serde::{Deserialize, Serialize};

use super::{Network, PowerIteration, SoftArgmaxHead};
use crate::error::{Error, Result};

/// Lipschitz constant (ℓ₂ → ℓ₂) of the soft-argmax head, in image pixels.
///
/// Along any direction the Jacobian of the expected coordinate is a
/// covariance under the spatial softmax, bounded by the standard deviation of
/// the pixel grid (at most half its extent per axis) over the temperature.
pub fn soft_argmax_lipschitz(head: &SoftArgmaxHead) -> f64 {
    let wx = head.width.saturating_sub(1) as f64;
    let hy = head.height.saturating_sub(1) as f64;
    head.scale * (wx * wx + hy * hy).sqrt() / (2.0 * head.temperature)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzOptions {
    pub power: PowerIteration,
    /// Overrides the head constant.
    pub head_constant: Option<f64>,
    /// Also multiply by `‖W^i‖₂` of the starting layer (looser, kept for comparison).
    pub include_layer_factor: bool,
    /// Relative inflation of each power-iteration estimate, which converges from below.
    pub norm_inflation: f64,
}

impl Default for LipschitzOptions {
    fn default() -> Self {
        LipschitzOptions {
            power: PowerIteration::default(),
            head_constant: None,
            include_layer_factor: false,
            norm_inflation: 1e-6,
        }
    }
}

/// Per-layer spectral norms and the head constant of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProfile {
    /// `layer_norms[k - 1]` is the (inflated) `‖W^k‖₂`.
    pub layer_norms: Vec<f64>,
    pub head: f64,
    pub include_layer_factor: bool,
}

impl LipschitzProfile {
    pub fn compute(net: &Network, opts: &LipschitzOptions) -> Result<Self> {
        let mut layer_norms = Vec::with_capacity(net.num_linear());
        for k in 1..=net.num_linear() {
            layer_norms.push(net.layer_spectral_norm(k, &opts.power)? * (1.0 + opts.norm_inflation));
        }
        let head = match (opts.head_constant, net.head()) {
            (Some(c), _) => {
                if !(c >= 0.0 && c.is_finite()) {
                    return Err(Error::config("head Lipschitz constant must be finite and non-negative"));
                }
                c
            }
            (None, Some(h)) => soft_argmax_lipschitz(&h),
            (None, None) => 1.0,
        };
        Ok(LipschitzProfile { layer_norms, head, include_layer_factor: opts.include_layer_factor })
    }

    pub fn num_linear(&self) -> usize {
        self.layer_norms.len()
    }

    /// `C_i`: bounds `‖f^L(x) − f^L(x₀)‖₂` by `C_i ‖f^i(x) − f^i(x₀)‖₂`, for `0 ≤ i ≤ L`.
    ///
    /// `i = 0` measures the deviation at the input.
    pub fn to_output(&self, i: usize) -> Result<f64> {
        let l = self.num_linear();
        if i > l {
            return Err(Error::contract(format!("layer index {i} out of range 0..={l}")));
        }
        let mut c = self.head;
        for k in (i + 1)..=l {
            c *= self.layer_norms[k - 1];
        }
        if self.include_layer_factor && i >= 1 {
            c *= self.layer_norms[i - 1];
        }
        Ok(c)
    }

    /// `C_0`, the input-to-output constant.
    pub fn from_input(&self) -> f64 {
        self.to_output(0).expect("0 is always in range")
    }
}

/// `C_i` for `1 ≤ i ≤ L − 1` with default options.
pub fn lipschitz_to_output(net: &Network, i: usize) -> Result<f64> {
    let l = net.num_linear();
    if i == 0 || i + 1 > l {
        return Err(Error::contract(format!("layer index {i} out of range 1..={}", l.saturating_sub(1))));
    }
    LipschitzProfile::compute(net, &LipschitzOptions::default())?.to_output(i)
}
