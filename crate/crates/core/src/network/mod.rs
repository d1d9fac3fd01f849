//! Feedforward regression networks: dense and convolutional linear layers,
//! ReLU activations, and an optional soft-argmax keypoint head.
//!
//! Linear layers are numbered `1..=L` in the order they are applied. The
//! pre-activation output of linear layer `i` is the flattened vector
//! `f^i(x)` (channels x height x width for convolutions). Channel masks live
//! next to the parameters; a masked channel has zero filter weights, zero
//! bias, and zero incoming weights in the following linear layer.

mod backward;
mod checkpoint;
mod forward;
mod lipschitz;
mod ops;
mod prune;
mod spectral;

pub use backward::{Gradients, ParamGrad};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use forward::{soft_argmax, ForwardTrace};
pub use lipschitz::{lipschitz_to_output, soft_argmax_lipschitz, LipschitzOptions, LipschitzProfile};
pub use prune::ChannelMap;
pub use spectral::{
    spectral_norm, spectral_norm_with, ConvOperator, LinearOperator, MatrixOperator, PowerIteration,
    SpectralEstimate,
};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed)
}

/// Channel-major tensor shape `channels x height x width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape { channels, height, width }
    }

    /// A flat vector of `n` features.
    pub const fn flat(n: usize) -> Self {
        Shape { channels: n, height: 1, width: 1 }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn spatial(&self) -> usize {
        self.height * self.width
    }
}

/// One entry of the layer grammar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Spatial softmax over `keypoints` heatmaps of `height x width`
    /// followed by the expected pixel coordinate. Coordinates are mapped to
    /// image pixels by `scale * u + (scale - 1) / 2`.
    SoftArgmax {
        height: usize,
        width: usize,
        temperature: f64,
        #[serde(default = "unit_scale")]
        scale: f64,
    },
}

fn unit_scale() -> f64 {
    1.0
}

impl LayerSpec {
    pub fn is_linear(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

/// Architecture description: input shape plus ordered layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

/// Geometry of a 2-D convolution applied to a concrete input shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub const fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub const fn input_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub const fn output_len(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }
}

/// Soft-argmax head parameters resolved against the network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftArgmaxHead {
    pub keypoints: usize,
    pub height: usize,
    pub width: usize,
    pub temperature: f64,
    pub scale: f64,
}

/// Resolved view of a linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearKind {
    Dense { in_dim: usize, out_dim: usize },
    Conv(ConvGeometry),
}

/// Weights, biases and output-channel mask of one linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// Row-major: `[out][in]` for dense, `[out][in][ky][kx]` for conv.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// One entry per output channel; `false` means pruned.
    pub mask: Vec<bool>,
}

#[derive(Debug)]
pub struct Network {
    spec: NetworkSpec,
    in_shapes: Vec<Shape>,
    out_shapes: Vec<Shape>,
    /// Positions (into `spec.layers`) of the linear layers.
    linear: Vec<usize>,
    /// One entry per linear layer.
    params: Vec<Params>,
    seed_lineage: Vec<u64>,
    id: u64,
    generation: u64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            spec: self.spec.clone(),
            in_shapes: self.in_shapes.clone(),
            out_shapes: self.out_shapes.clone(),
            linear: self.linear.clone(),
            params: self.params.clone(),
            seed_lineage: self.seed_lineage.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

impl NetworkSpec {
    /// Checks the layer grammar and returns the (input, output) shape of every layer.
    pub fn resolve_shapes(&self) -> Result<Vec<(Shape, Shape)>> {
        if self.input.is_empty() {
            return Err(Error::config("input shape must be non-empty"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = self.input;
        let last = self.layers.len() - 1;
        for (pos, layer) in self.layers.iter().enumerate() {
            let out = match *layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    if in_dim == 0 || out_dim == 0 {
                        return Err(Error::config(format!("layer {pos}: dense dims must be positive")));
                    }
                    if in_dim != current.len() {
                        return Err(Error::config(format!(
                            "layer {pos}: dense in_dim {in_dim} does not match incoming size {}",
                            current.len()
                        )));
                    }
                    Shape::flat(out_dim)
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel_size, stride, padding } => {
                    if in_channels == 0 || out_channels == 0 || kernel_size == 0 || stride == 0 {
                        return Err(Error::config(format!(
                            "layer {pos}: conv channels, kernel and stride must be positive"
                        )));
                    }
                    if in_channels != current.channels {
                        return Err(Error::config(format!(
                            "layer {pos}: conv in_channels {in_channels} does not match incoming channels {}",
                            current.channels
                        )));
                    }
                    let (h, w) = (current.height + 2 * padding, current.width + 2 * padding);
                    if h < kernel_size || w < kernel_size {
                        return Err(Error::config(format!("layer {pos}: kernel larger than padded input")));
                    }
                    Shape::new(out_channels, (h - kernel_size) / stride + 1, (w - kernel_size) / stride + 1)
                }
                LayerSpec::Relu => {
                    let prev_linear = pos > 0 && self.layers[pos - 1].is_linear();
                    if !prev_linear {
                        return Err(Error::config(format!("layer {pos}: relu must follow a linear layer")));
                    }
                    if pos == last {
                        return Err(Error::config("the final layer cannot be an activation"));
                    }
                    current
                }
                LayerSpec::SoftArgmax { height, width, temperature, scale } => {
                    if pos != last {
                        return Err(Error::config("soft-argmax may only appear as the final layer"));
                    }
                    if pos == 0 || !self.layers[pos - 1].is_linear() {
                        return Err(Error::config("soft-argmax must directly follow a linear layer"));
                    }
                    if !(temperature > 0.0 && temperature.is_finite()) || !(scale > 0.0 && scale.is_finite()) {
                        return Err(Error::config("soft-argmax temperature and scale must be positive"));
                    }
                    let hw = height * width;
                    if hw == 0 || current.len() % hw != 0 {
                        return Err(Error::config(format!(
                            "soft-argmax grid {height}x{width} does not tile incoming size {}",
                            current.len()
                        )));
                    }
                    Shape::flat(2 * (current.len() / hw))
                }
            };
            shapes.push((current, out));
            current = out;
        }
        if pos_of_first_linear(&self.layers) != Some(0) {
            return Err(Error::config("the first layer must be dense or conv2d"));
        }
        Ok(shapes)
    }
}

fn pos_of_first_linear(layers: &[LayerSpec]) -> Option<usize> {
    layers.iter().position(LayerSpec::is_linear)
}

impl Network {
    fn assemble(spec: NetworkSpec, params: Vec<Params>, seed_lineage: Vec<u64>) -> Result<Self> {
        let shapes = spec.resolve_shapes()?;
        let linear: Vec<usize> =
            spec.layers.iter().enumerate().filter(|(_, l)| l.is_linear()).map(|(p, _)| p).collect();
        if params.len() != linear.len() {
            return Err(Error::config(format!(
                "expected parameters for {} linear layers, got {}",
                linear.len(),
                params.len()
            )));
        }
        let net = Network {
            in_shapes: shapes.iter().map(|s| s.0).collect(),
            out_shapes: shapes.iter().map(|s| s.1).collect(),
            spec,
            linear,
            params,
            seed_lineage,
            id: fresh_id(),
            generation: 0,
        };
        for i in 1..=net.num_linear() {
            let (w, b, c) = net.param_lens(i);
            let p = &net.params[i - 1];
            if p.weight.len() != w || p.bias.len() != b || p.mask.len() != c {
                return Err(Error::config(format!(
                    "linear layer {i}: parameter sizes ({}, {}, {}) do not match ({w}, {b}, {c})",
                    p.weight.len(),
                    p.bias.len(),
                    p.mask.len()
                )));
            }
            if p.mask.iter().all(|m| !m) {
                return Err(Error::config(format!("linear layer {i}: every channel is masked")));
            }
        }
        Ok(net)
    }

    /// All-zero parameters with every channel unmasked.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.resolve_shapes()?;
        let params = spec
            .layers
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| l.is_linear())
            .map(|(l, (inp, out))| {
                let (w, b, c) = lens_for(l, *inp, *out);
                Params { weight: vec![0.0; w], bias: vec![0.0; b], mask: vec![true; c] }
            })
            .collect();
        Self::assemble(spec, params, Vec::new())
    }

    /// He-normal weights, zero biases.
    pub fn random<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        for i in 1..=net.num_linear() {
            let fan_in = match net.linear_kind(i) {
                LinearKind::Dense { in_dim, .. } => in_dim,
                LinearKind::Conv(g) => g.in_channels * g.kernel * g.kernel,
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::numeric(e.to_string()))?;
            for w in &mut net.params[i - 1].weight {
                *w = normal.sample(rng);
            }
        }
        Ok(net)
    }

    /// He-normal initialisation from a seed, recorded in the seed lineage.
    pub fn seeded(spec: NetworkSpec, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::random(spec, &mut rng)?;
        net.seed_lineage.push(seed);
        Ok(net)
    }

    /// Builds a network from explicit parameters, one entry per linear layer.
    pub fn from_params(spec: NetworkSpec, params: Vec<Params>) -> Result<Self> {
        Self::assemble(spec, params, Vec::new())
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.spec.input
    }

    pub fn input_len(&self) -> usize {
        self.spec.input.len()
    }

    pub fn output_len(&self) -> usize {
        self.out_shapes.last().map_or(0, Shape::len)
    }

    /// Number of linear layers `L`.
    pub fn num_linear(&self) -> usize {
        self.linear.len()
    }

    pub fn seed_lineage(&self) -> &[u64] {
        &self.seed_lineage
    }

    pub fn push_seed(&mut self, seed: u64) {
        self.seed_lineage.push(seed);
    }

    /// Identity of this parameter state; changes whenever parameters are mutated.
    pub(crate) fn fingerprint(&self) -> (u64, u64) {
        (self.id, self.generation)
    }

    fn check_linear_index(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.num_linear() {
            return Err(Error::contract(format!(
                "linear layer index {i} out of range 1..={}",
                self.num_linear()
            )));
        }
        Ok(())
    }

    /// Position in `spec().layers` of linear layer `i` (1-based). Panics when out of range.
    pub(crate) fn position(&self, i: usize) -> usize {
        self.linear[i - 1]
    }

    pub fn linear_kind(&self, i: usize) -> LinearKind {
        let pos = self.position(i);
        let (inp, out) = (self.in_shapes[pos], self.out_shapes[pos]);
        match self.spec.layers[pos] {
            LayerSpec::Dense { in_dim, out_dim } => LinearKind::Dense { in_dim, out_dim },
            LayerSpec::Conv2d { in_channels, out_channels, kernel_size, stride, padding } => {
                LinearKind::Conv(ConvGeometry {
                    in_channels,
                    out_channels,
                    kernel: kernel_size,
                    stride,
                    padding,
                    in_h: inp.height,
                    in_w: inp.width,
                    out_h: out.height,
                    out_w: out.width,
                })
            }
            _ => unreachable!("linear index points at a non-linear layer"),
        }
    }

    fn param_lens(&self, i: usize) -> (usize, usize, usize) {
        let pos = self.position(i);
        lens_for(&self.spec.layers[pos], self.in_shapes[pos], self.out_shapes[pos])
    }

    /// Shape of the pre-activation output of linear layer `i`.
    pub fn preactivation_shape(&self, i: usize) -> Result<Shape> {
        self.check_linear_index(i)?;
        Ok(self.out_shapes[self.position(i)])
    }

    /// `d_i`, the number of pre-activation neurons of linear layer `i`.
    pub fn preactivation_len(&self, i: usize) -> Result<usize> {
        Ok(self.preactivation_shape(i)?.len())
    }

    /// Number of prunable output channels of linear layer `i`.
    pub fn channels(&self, i: usize) -> Result<usize> {
        Ok(self.preactivation_shape(i)?.channels)
    }

    pub fn params(&self, i: usize) -> Result<&Params> {
        self.check_linear_index(i)?;
        Ok(&self.params[i - 1])
    }

    /// Mutable parameter access. Any outstanding forward trace becomes stale.
    pub fn params_mut(&mut self, i: usize) -> Result<&mut Params> {
        self.check_linear_index(i)?;
        self.generation += 1;
        Ok(&mut self.params[i - 1])
    }

    pub(crate) fn all_params(&self) -> &[Params] {
        &self.params
    }

    pub(crate) fn all_params_mut(&mut self) -> &mut [Params] {
        self.generation += 1;
        &mut self.params
    }

    /// Whether a ReLU follows linear layer `i`.
    pub fn relu_after(&self, i: usize) -> bool {
        let pos = self.position(i);
        matches!(self.spec.layers.get(pos + 1), Some(LayerSpec::Relu))
    }

    pub fn head(&self) -> Option<SoftArgmaxHead> {
        let pos = self.spec.layers.len() - 1;
        match self.spec.layers[pos] {
            LayerSpec::SoftArgmax { height, width, temperature, scale } => Some(SoftArgmaxHead {
                keypoints: self.in_shapes[pos].len() / (height * width),
                height,
                width,
                temperature,
                scale,
            }),
            _ => None,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Number of unmasked channels per linear layer.
    pub fn alive_channels(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.mask.iter().filter(|m| **m).count()).collect()
    }

    /// Re-applies every mask: zeroes masked filters, biases and the matching
    /// incoming weights of the next linear layer.
    pub fn enforce_masks(&mut self) {
        for i in 1..=self.num_linear() {
            let mask = self.params[i - 1].mask.clone();
            for (c, keep) in mask.iter().enumerate() {
                if !keep {
                    self.zero_channel(i, c);
                }
            }
        }
        self.generation += 1;
    }
}

fn lens_for(layer: &LayerSpec, inp: Shape, out: Shape) -> (usize, usize, usize) {
    match *layer {
        LayerSpec::Dense { in_dim, out_dim } => (in_dim * out_dim, out_dim, out_dim),
        LayerSpec::Conv2d { in_channels, out_channels, kernel_size, .. } => {
            let _ = (inp, out);
            (out_channels * in_channels * kernel_size * kernel_size, out_channels, out_channels)
        }
        _ => (0, 0, 0),
    }
}
