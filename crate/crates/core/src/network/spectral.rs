//! Largest singular value of a linear map by power iteration on `AᵀA`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ops, ConvGeometry, LinearKind, Network};
use crate::error::{Error, Result};

/// A linear map that can be applied forwards and transposed.
pub trait LinearOperator {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    /// `y = A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// `x = Aᵀ y`.
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]);
}

/// Dense row-major matrix.
#[derive(Clone, Debug)]
pub struct MatrixOperator {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixOperator {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!("matrix data has {} entries, expected {}", data.len(), rows * cols)));
        }
        Ok(MatrixOperator { rows, cols, data })
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in d.iter().enumerate() {
            data[i * n + i] = *v;
        }
        MatrixOperator { rows: n, cols: n, data }
    }
}

impl LinearOperator for MatrixOperator {
    fn input_len(&self) -> usize {
        self.cols
    }
    fn output_len(&self) -> usize {
        self.rows
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = ops::dot(&self.data[r * self.cols..(r + 1) * self.cols], x);
        }
    }
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        x.iter_mut().for_each(|v| *v = 0.0);
        for (r, yr) in y.iter().enumerate() {
            for (xv, a) in x.iter_mut().zip(&self.data[r * self.cols..(r + 1) * self.cols]) {
                *xv += a * yr;
            }
        }
    }
}

/// The full linear map of a 2-D convolution, stride and zero padding included.
#[derive(Clone, Debug)]
pub struct ConvOperator {
    pub geometry: ConvGeometry,
    pub weight: Vec<f64>,
}

impl ConvOperator {
    pub fn new(geometry: ConvGeometry, weight: Vec<f64>) -> Result<Self> {
        if weight.len() != geometry.weight_len() {
            return Err(Error::contract("conv kernel size does not match geometry"));
        }
        Ok(ConvOperator { geometry, weight })
    }
}

impl LinearOperator for ConvOperator {
    fn input_len(&self) -> usize {
        self.geometry.input_len()
    }
    fn output_len(&self) -> usize {
        self.geometry.output_len()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mask = vec![true; self.geometry.out_channels];
        ops::apply(&LinearKind::Conv(self.geometry), &self.weight, &mask, x, y);
    }
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        let mask = vec![true; self.geometry.out_channels];
        ops::transpose(&LinearKind::Conv(self.geometry), &self.weight, &mask, y, x);
    }
}

/// Borrowed view of one linear layer of a network (masks respected, bias ignored).
pub(crate) struct LayerOperator<'a> {
    kind: LinearKind,
    weight: &'a [f64],
    mask: &'a [bool],
    in_len: usize,
    out_len: usize,
}

impl<'a> LayerOperator<'a> {
    pub(crate) fn new(net: &'a Network, i: usize) -> Self {
        let kind = net.linear_kind(i);
        let p = &net.all_params()[i - 1];
        let (in_len, out_len) = match kind {
            LinearKind::Dense { in_dim, out_dim } => (in_dim, out_dim),
            LinearKind::Conv(g) => (g.input_len(), g.output_len()),
        };
        LayerOperator { kind, weight: &p.weight, mask: &p.mask, in_len, out_len }
    }
}

impl LinearOperator for LayerOperator<'_> {
    fn input_len(&self) -> usize {
        self.in_len
    }
    fn output_len(&self) -> usize {
        self.out_len
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        ops::apply(&self.kind, self.weight, self.mask, x, y);
    }
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        ops::transpose(&self.kind, self.weight, self.mask, y, x);
    }
}

/// Power-iteration settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    /// Stop once the relative change of the estimate falls below this.
    pub tol: f64,
    pub max_iterations: usize,
    /// Seed of the random start vector.
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration { tol: 1e-8, max_iterations: 10_000, seed: 0x5eed }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralEstimate {
    pub sigma: f64,
    pub iterations: usize,
}

pub fn spectral_norm(op: &dyn LinearOperator, tol: f64) -> Result<f64> {
    Ok(spectral_norm_with(op, &PowerIteration { tol, ..PowerIteration::default() })?.sigma)
}

pub fn spectral_norm_with(op: &dyn LinearOperator, cfg: &PowerIteration) -> Result<SpectralEstimate> {
    if !(cfg.tol > 0.0) {
        return Err(Error::contract("power iteration tolerance must be positive"));
    }
    let (n, m) = (op.input_len(), op.output_len());
    if n == 0 || m == 0 {
        return Ok(SpectralEstimate { sigma: 0.0, iterations: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut av = vec![0.0; m];
    let mut w = vec![0.0; n];
    normalize(&mut v);
    let mut sigma = 0.0_f64;
    let mut last_change = f64::INFINITY;
    for it in 1..=cfg.max_iterations {
        op.apply(&v, &mut av);
        let est = norm(&av);
        if est == 0.0 {
            // v fell into the null space; either A = 0 or we restart.
            if sigma == 0.0 && it > 3 {
                return Ok(SpectralEstimate { sigma: 0.0, iterations: it });
            }
            v.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
            normalize(&mut v);
            continue;
        }
        op.apply_transpose(&av, &mut w);
        last_change = (est - sigma).abs() / est;
        sigma = est;
        if norm(&w) == 0.0 {
            return Ok(SpectralEstimate { sigma, iterations: it });
        }
        std::mem::swap(&mut v, &mut w);
        normalize(&mut v);
        if last_change <= cfg.tol && it > 1 {
            // ‖A v‖ with the refreshed v is at least as large as the current estimate.
            op.apply(&v, &mut av);
            sigma = sigma.max(norm(&av));
            return Ok(SpectralEstimate { sigma, iterations: it });
        }
    }
    Err(Error::NoConvergence { iterations: cfg.max_iterations, last_change })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl Network {
    /// `‖W^i‖₂` of linear layer `i`, masks applied.
    pub fn layer_spectral_norm(&self, i: usize, cfg: &PowerIteration) -> Result<f64> {
        self.params(i)?;
        Ok(spectral_norm_with(&LayerOperator::new(self, i), cfg)?.sigma)
    }
}
