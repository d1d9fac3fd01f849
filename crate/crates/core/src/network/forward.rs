use super::{ops, Network, SoftArgmaxHead};
use crate::error::{Error, Result};

/// Everything recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub(crate) fingerprint: (u64, u64),
    pub input: Vec<f64>,
    /// `preactivations[i - 1]` is `f^i(x)`, flattened channel-major.
    pub preactivations: Vec<Vec<f64>>,
    /// Network output; empty for a partial pass.
    pub output: Vec<f64>,
    /// Spatial softmax probabilities of the head, when present.
    pub(crate) head_probs: Option<Vec<f64>>,
}

impl ForwardTrace {
    /// Number of linear layers that were evaluated.
    pub fn depth(&self) -> usize {
        self.preactivations.len()
    }

    pub fn is_complete(&self) -> bool {
        !self.output.is_empty()
    }

    pub fn preactivation(&self, i: usize) -> Option<&[f64]> {
        i.checked_sub(1).and_then(|k| self.preactivations.get(k)).map(Vec::as_slice)
    }
}

/// Spatial soft-argmax over `keypoints` heatmaps of `height x width`.
///
/// Returns `[x_0, y_0, x_1, y_1, ...]` in pixel units of the heatmap grid.
pub fn soft_argmax(heatmaps: &[f64], height: usize, width: usize, temperature: f64) -> Result<Vec<f64>> {
    let (coords, _) = soft_argmax_with_probs(heatmaps, height, width, temperature)?;
    Ok(coords)
}

pub(crate) fn soft_argmax_with_probs(
    heatmaps: &[f64],
    height: usize,
    width: usize,
    temperature: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::contract("soft-argmax temperature must be positive and finite"));
    }
    let hw = height * width;
    if hw == 0 || heatmaps.len() % hw != 0 {
        return Err(Error::contract(format!(
            "heatmap length {} is not a multiple of {height}x{width}",
            heatmaps.len()
        )));
    }
    if heatmaps.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite heatmap value"));
    }
    let k = heatmaps.len() / hw;
    let mut coords = Vec::with_capacity(2 * k);
    let mut probs = vec![0.0; heatmaps.len()];
    for (map, p) in heatmaps.chunks(hw).zip(probs.chunks_mut(hw)) {
        let peak = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (pi, &z) in p.iter_mut().zip(map) {
            *pi = ((z - peak) / temperature).exp();
            total += *pi;
        }
        let (mut ux, mut uy) = (0.0, 0.0);
        for (idx, pi) in p.iter_mut().enumerate() {
            *pi /= total;
            ux += *pi * (idx % width) as f64;
            uy += *pi * (idx / width) as f64;
        }
        coords.push(ux);
        coords.push(uy);
    }
    Ok((coords, probs))
}

impl SoftArgmaxHead {
    /// Maps heatmap-grid coordinates to image pixels.
    pub(crate) fn to_pixels(&self, u: f64) -> f64 {
        self.scale * u + (self.scale - 1.0) / 2.0
    }
}

impl Network {
    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::config(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.input_len()
            )));
        }
        Ok(())
    }

    /// Runs linear layers `1..=depth`, recording their pre-activations.
    fn run(&self, x: &[f64], depth: usize) -> Vec<Vec<f64>> {
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(depth);
        for i in 1..=depth {
            let kind = self.linear_kind(i);
            let p = &self.all_params()[i - 1];
            let mut y = vec![0.0; self.out_shapes[self.position(i)].len()];
            {
                let act;
                let inp: &[f64] = if i == 1 {
                    x
                } else if self.relu_after(i - 1) {
                    act = relu(&pre[i - 2]);
                    &act
                } else {
                    &pre[i - 2]
                };
                ops::forward(&kind, &p.weight, &p.bias, &p.mask, inp, &mut y);
            }
            pre.push(y);
        }
        pre
    }

    /// Full forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let pre = self.run(x, self.num_linear());
        let last = pre.last().expect("network has at least one linear layer");
        let (output, head_probs) = match self.head() {
            Some(h) => {
                let (mut coords, probs) = soft_argmax_with_probs(last, h.height, h.width, h.temperature)?;
                coords.iter_mut().for_each(|c| *c = h.to_pixels(*c));
                (coords, Some(probs))
            }
            None => (last.clone(), None),
        };
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite network output"));
        }
        Ok(ForwardTrace { fingerprint: self.fingerprint(), input: x.to_vec(), preactivations: pre, output, head_probs })
    }

    /// Forward pass that stops after linear layer `depth`; the trace has no output.
    pub fn forward_partial(&self, x: &[f64], depth: usize) -> Result<ForwardTrace> {
        self.check_input(x)?;
        if depth == 0 || depth > self.num_linear() {
            return Err(Error::contract(format!("depth {depth} out of range 1..={}", self.num_linear())));
        }
        if depth == self.num_linear() {
            return self.forward(x);
        }
        let pre = self.run(x, depth);
        Ok(ForwardTrace {
            fingerprint: self.fingerprint(),
            input: x.to_vec(),
            preactivations: pre,
            output: Vec::new(),
            head_probs: None,
        })
    }

    /// Network output only.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.output)
    }

    /// `f^i(x)` only.
    pub fn preactivation(&self, x: &[f64], i: usize) -> Result<Vec<f64>> {
        let mut t = self.forward_partial(x, i)?;
        Ok(t.preactivations.swap_remove(i - 1))
    }
}

pub(crate) fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&a| a.max(0.0)).collect()
}
