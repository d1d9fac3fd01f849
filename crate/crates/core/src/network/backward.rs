use serde::{Deserialize, Serialize};

use super::forward::{relu, ForwardTrace};
use super::{ops, Network};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients, one entry per linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<ParamGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .all_params()
                .iter()
                .map(|p| ParamGrad { weight: vec![0.0; p.weight.len()], bias: vec![0.0; p.bias.len()] })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += s * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += s * y;
            }
        }
    }

    /// Flattened view in layer order, weights before biases.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl Network {
    /// Gradients of `<output_grad, output>` with respect to every parameter.
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &[f64]) -> Result<Gradients> {
        let mut g = Gradients::zeros_like(self);
        self.backward_into(trace, Some(output_grad), &[], &mut g)?;
        Ok(g)
    }

    /// Accumulates into `grads` the parameter gradient of
    /// `<output_grad, output> + Σ <g_i, f^i(x)>` for the injected `(i, g_i)` pairs.
    ///
    /// A partial trace may be used when `output_grad` is `None` and every
    /// injection targets a recorded layer.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        output_grad: Option<&[f64]>,
        injected: &[(usize, &[f64])],
        grads: &mut Gradients,
    ) -> Result<()> {
        if trace.fingerprint != self.fingerprint() {
            return Err(Error::contract("forward trace is stale: network changed since it was recorded"));
        }
        if grads.layers.len() != self.num_linear() {
            return Err(Error::contract("gradient buffer does not match the network"));
        }
        for &(i, g) in injected {
            if i == 0 || i > trace.depth() {
                return Err(Error::contract(format!("cannot inject at layer {i}; trace depth {}", trace.depth())));
            }
            if g.len() != trace.preactivations[i - 1].len() {
                return Err(Error::contract(format!("injected gradient for layer {i} has wrong length")));
            }
        }
        let top = match output_grad {
            Some(og) => {
                if !trace.is_complete() {
                    return Err(Error::contract("output gradient requires a complete trace"));
                }
                if og.len() != trace.output.len() {
                    return Err(Error::contract(format!(
                        "output gradient has {} values, output has {}",
                        og.len(),
                        trace.output.len()
                    )));
                }
                self.num_linear()
            }
            None => match injected.iter().map(|p| p.0).max() {
                Some(t) => t,
                None => return Ok(()),
            },
        };

        let mut g = vec![0.0; trace.preactivations[top - 1].len()];
        if let Some(og) = output_grad {
            self.head_backward(trace, og, &mut g);
        }
        for i in (1..=top).rev() {
            for &(j, inj) in injected {
                if j == i {
                    g.iter_mut().zip(inj).for_each(|(a, b)| *a += b);
                }
            }
            let kind = self.linear_kind(i);
            let p = &self.all_params()[i - 1];
            let per = g.len() / p.mask.len();
            for (c, chunk) in g.chunks_mut(per).enumerate() {
                if !p.mask[c] {
                    chunk.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let act;
            let inp: &[f64] = if i == 1 {
                &trace.input
            } else if self.relu_after(i - 1) {
                act = relu(&trace.preactivations[i - 2]);
                &act
            } else {
                &trace.preactivations[i - 2]
            };
            let pg = &mut grads.layers[i - 1];
            ops::weight_grad(&kind, &p.mask, inp, &g, &mut pg.weight, &mut pg.bias);
            if i > 1 {
                let mut gin = vec![0.0; inp.len()];
                ops::transpose(&kind, &p.weight, &p.mask, &g, &mut gin);
                if self.relu_after(i - 1) {
                    for (v, z) in gin.iter_mut().zip(&trace.preactivations[i - 2]) {
                        if *z <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                g = gin;
            }
        }
        Ok(())
    }

    /// Pulls an output gradient back to the last pre-activation.
    fn head_backward(&self, trace: &ForwardTrace, og: &[f64], g: &mut [f64]) {
        match (self.head(), &trace.head_probs) {
            (Some(h), Some(probs)) => {
                let hw = h.height * h.width;
                for (kp, (p, gk)) in probs.chunks(hw).zip(g.chunks_mut(hw)).enumerate() {
                    // Back to grid units: output = scale * u + const.
                    let ux = (trace.output[2 * kp] - (h.scale - 1.0) / 2.0) / h.scale;
                    let uy = (trace.output[2 * kp + 1] - (h.scale - 1.0) / 2.0) / h.scale;
                    let (gx, gy) = (og[2 * kp] * h.scale, og[2 * kp + 1] * h.scale);
                    for (idx, (pi, gi)) in p.iter().zip(gk.iter_mut()).enumerate() {
                        let dx = (idx % h.width) as f64 - ux;
                        let dy = (idx / h.width) as f64 - uy;
                        *gi = pi * (gx * dx + gy * dy) / h.temperature;
                    }
                }
            }
            _ => g.copy_from_slice(og),
        }
    }
}
