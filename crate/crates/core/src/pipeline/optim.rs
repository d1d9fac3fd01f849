use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, Network};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { learning_rate: f64, #[serde(default)] momentum: f64 },
    Adam {
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig::Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { learning_rate, .. } | OptimizerConfig::Adam { learning_rate, .. } => learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { learning_rate, momentum } => learning_rate > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { learning_rate, beta1, beta2, eps } => {
                learning_rate > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-2)
    }
}

/// First-order optimizer state for one network.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Gradients,
    second: Gradients,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, net: &Network) -> Result<Self> {
        config.validate()?;
        let z = Gradients::zeros_like(net);
        Ok(Optimizer { config, first: z.clone(), second: z, steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One descent step; masked channels are re-zeroed afterwards.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != self.first.layers.len() {
            return Err(Error::contract("gradient does not match optimizer state"));
        }
        if !grads.is_finite() {
            return Err(Error::numeric("non-finite gradient"));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let params = net.all_params_mut();
        for (l, p) in params.iter_mut().enumerate() {
            let g = &grads.layers[l];
            let m = &mut self.first.layers[l];
            let v = &mut self.second.layers[l];
            let slots = p
                .weight
                .iter_mut()
                .zip(&g.weight)
                .zip(m.weight.iter_mut().zip(v.weight.iter_mut()))
                .chain(p.bias.iter_mut().zip(&g.bias).zip(m.bias.iter_mut().zip(v.bias.iter_mut())));
            match self.config {
                OptimizerConfig::Sgd { learning_rate, momentum } => {
                    for ((w, &gi), (mi, _)) in slots {
                        *mi = momentum * *mi + gi;
                        *w -= learning_rate * *mi;
                    }
                }
                OptimizerConfig::Adam { learning_rate, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for ((w, &gi), (mi, vi)) in slots {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        net.enforce_masks();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, NetworkSpec, Shape};

    fn regression() -> (Network, Vec<(Vec<f64>, f64)>) {
        let spec = NetworkSpec { input: Shape::flat(2), layers: vec![LayerSpec::Dense { in_dim: 2, out_dim: 1 }] };
        let data = vec![(vec![1.0, 0.0], 2.0), (vec![0.0, 1.0], -1.0), (vec![1.0, 1.0], 1.0)];
        (Network::zeros(spec).unwrap(), data)
    }

    fn loss_and_grad(net: &Network, data: &[(Vec<f64>, f64)]) -> (f64, Gradients) {
        let mut g = Gradients::zeros_like(net);
        let mut loss = 0.0;
        for (x, y) in data {
            let tr = net.forward(x).unwrap();
            let r = tr.output[0] - y;
            loss += r * r;
            net.backward_into(&tr, Some(&[2.0 * r]), &[], &mut g).unwrap();
        }
        (loss, g)
    }

    #[test]
    fn both_optimizers_fit_a_linear_map() {
        for cfg in [OptimizerConfig::Sgd { learning_rate: 0.1, momentum: 0.5 }, OptimizerConfig::adam(0.05)] {
            let (mut net, data) = regression();
            let mut opt = Optimizer::new(cfg, &net).unwrap();
            for _ in 0..2000 {
                let (_, g) = loss_and_grad(&net, &data);
                opt.step(&mut net, &g).unwrap();
            }
            let (loss, _) = loss_and_grad(&net, &data);
            assert!(loss < 1e-6, "{cfg:?}: {loss}");
        }
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let (mut net, data) = regression();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), &net).unwrap();
        let (_, g) = loss_and_grad(&net, &data);
        opt.step(&mut net, &g).unwrap();
        for (w, gw) in net.params(1).unwrap().weight.iter().zip(&g.layers[0].weight) {
            let expected = if *gw == 0.0 { 0.0 } else { -0.01 * gw.signum() };
            assert!((w - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_settings_and_gradients() {
        let (mut net, _) = regression();
        assert!(Optimizer::new(OptimizerConfig::adam(-1.0), &net).is_err());
        let mut opt = Optimizer::new(OptimizerConfig::default(), &net).unwrap();
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].bias[0] = f64::NAN;
        assert!(matches!(opt.step(&mut net, &g), Err(Error::Numeric(_))));
    }
}
