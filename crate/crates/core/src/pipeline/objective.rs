//! Training objective: keypoint MSE plus per-layer unbiased, smooth and
//! Wasserstein regularisers computed from pooled perturbation deviations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ForwardTrace, Gradients, Network};
use crate::usn::{channel_importance, UsnStats, DEFAULT_EPS_USN};
use crate::wasserstein::{target_distribution, wasserstein_loss_against, GroundSpace};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub lambda_w: f64,
    pub eps_usn: f64,
    pub ground: GroundSpace,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_u: 1.0, lambda_s: 1.0, lambda_w: 10.0, eps_usn: DEFAULT_EPS_USN, ground: GroundSpace::default() }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_u, self.lambda_s, self.lambda_w];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(self.eps_usn > 0.0) {
            return Err(Error::config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// One clean training image, its target and perturbed copies.
#[derive(Clone, Debug)]
pub struct BatchItem<'a> {
    pub clean: &'a [f64],
    pub target: &'a [f64],
    pub perturbed: Vec<Vec<f64>>,
}

/// Regulariser values for one pruned layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTerms {
    pub layer: usize,
    pub unbiased: f64,
    pub smooth: f64,
    /// Zero when the Wasserstein term is disabled.
    pub wasserstein: f64,
}

#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub total: f64,
    pub task: f64,
    pub layers: Vec<LayerTerms>,
    /// Pooled deviation statistics of this batch, one per pruned layer.
    pub stats: Vec<UsnStats>,
    pub gradients: Gradients,
}

/// `task + Σ_i (λ_u U_i + λ_s S_i + λ_W W_i)` over the listed layers.
pub fn total_loss(task: f64, terms: &[LayerTerms], layers: &[usize], weights: &LossWeights) -> Result<f64> {
    let mut total = task;
    for &i in layers {
        let t = terms
            .iter()
            .find(|t| t.layer == i)
            .ok_or_else(|| Error::contract(format!("no statistics for pruned layer {i}")))?;
        total += weights.lambda_u * t.unbiased + weights.lambda_s * t.smooth + weights.lambda_w * t.wasserstein;
    }
    Ok(total)
}

fn check_layers(net: &Network, layers: &[usize]) -> Result<()> {
    for w in layers.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::contract("pruned layers must be strictly increasing"));
        }
    }
    for &i in layers {
        if i == 0 || i >= net.num_linear() {
            return Err(Error::contract(format!(
                "layer {i} cannot be regularised; valid range is 1..={}",
                net.num_linear().saturating_sub(1)
            )));
        }
    }
    Ok(())
}

/// Value and parameter gradient of the full objective on one batch.
///
/// The Wasserstein target is rebuilt from the batch's channel scores at ratio
/// `rho_target` and held fixed; the term is skipped when `rho_target` or
/// `λ_W` is zero.
pub fn evaluate_objective(
    net: &Network,
    batch: &[BatchItem<'_>],
    layers: &[usize],
    rho_target: f64,
    weights: &LossWeights,
) -> Result<ObjectiveValue> {
    weights.validate()?;
    check_layers(net, layers)?;
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if !(0.0..1.0).contains(&rho_target) {
        return Err(Error::contract(format!("target ratio must lie in [0, 1), got {rho_target}")));
    }
    let out_len = net.output_len();
    let depth = layers.last().copied().unwrap_or(0);
    let n_pert: usize = batch.iter().map(|b| b.perturbed.len()).sum();
    if !layers.is_empty() && n_pert == 0 {
        return Err(Error::contract("regularised layers need at least one perturbed sample"));
    }

    let clean: Vec<ForwardTrace> = batch.iter().map(|b| net.forward(b.clean)).collect::<Result<_>>()?;
    let pert: Vec<Vec<ForwardTrace>> = batch
        .iter()
        .map(|b| {
            if depth == 0 {
                return Ok(Vec::new());
            }
            b.perturbed.iter().map(|x| net.forward_partial(x, depth)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    // Task loss.
    let denom = (batch.len() * out_len) as f64;
    let mut task = 0.0;
    let mut out_grads = Vec::with_capacity(batch.len());
    for (b, tr) in batch.iter().zip(&clean) {
        if b.target.len() != out_len {
            return Err(Error::contract(format!("target has {} values, output has {out_len}", b.target.len())));
        }
        let r: Vec<f64> = tr.output.iter().zip(b.target).map(|(o, y)| o - y).collect();
        task += r.iter().map(|v| v * v).sum::<f64>() / denom;
        out_grads.push(r.iter().map(|v| 2.0 * v / denom).collect::<Vec<f64>>());
    }

    // Pooled statistics and per-neuron sensitivities dL/dμ_j (H) and dL/ds_j (G).
    let mut stats = Vec::with_capacity(layers.len());
    let mut terms = Vec::with_capacity(layers.len());
    let mut sens: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(layers.len());
    for &i in layers {
        let mut s = UsnStats::zeroed(i, net.preactivation_len(i)?);
        for (b, traces) in pert.iter().enumerate() {
            let base = &clean[b].preactivations[i - 1];
            for tr in traces {
                let d: Vec<f64> = tr.preactivations[i - 1].iter().zip(base).map(|(p, c)| p - c).collect();
                s.push(&d)?;
            }
        }
        if !(s.unbiased().is_finite() && s.smooth().is_finite()) {
            return Err(Error::numeric(format!("non-finite deviations at layer {i}")));
        }
        let d = s.neurons();
        let mut g_smooth = vec![0.0; d];
        let mut g_mean = vec![0.0; d];
        let mut w_value = 0.0;
        if weights.lambda_w > 0.0 && rho_target > 0.0 {
            let map = net.channel_map(i)?;
            let imp = s.importance(weights.eps_usn)?;
            if imp.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite importance at layer {i}")));
            }
            let scores = channel_importance(&imp, &map)?;
            let target = target_distribution(&scores, rho_target)?;
            let w = wasserstein_loss_against(&scores, &target, weights.ground)?;
            w_value = w.value;
            let mu = s.mean_deviation();
            let sm = s.per_neuron_smooth();
            for (c, members) in map.groups().iter().enumerate() {
                let per = w.gradient[c] / members.len() as f64;
                for &j in members {
                    if sm[j] == 0.0 {
                        continue;
                    }
                    let den = mu[j] * mu[j] + weights.eps_usn;
                    g_smooth[j] = weights.lambda_w * per / (den * d as f64);
                    g_mean[j] = -weights.lambda_w * per * sm[j] * 2.0 * mu[j] / (den * den * d as f64);
                }
            }
        }
        terms.push(LayerTerms { layer: i, unbiased: s.unbiased(), smooth: s.smooth(), wasserstein: w_value });
        stats.push(s);
        sens.push((g_smooth, g_mean));
    }
    let total = total_loss(task, &terms, layers, weights)?;

    // Backward: each perturbed sample gets +g at layer i, its clean image −Σ g.
    let n = n_pert as f64;
    let mut grads = Gradients::zeros_like(net);
    for (b, traces) in pert.iter().enumerate() {
        let mut clean_inj: Vec<Vec<f64>> = layers.iter().map(|&i| vec![0.0; clean[b].preactivations[i - 1].len()]).collect();
        for tr in traces {
            let mut inj: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
            for (li, &i) in layers.iter().enumerate() {
                let (gs, gm) = &sens[li];
                let base = &clean[b].preactivations[i - 1];
                let g: Vec<f64> = tr.preactivations[i - 1]
                    .iter()
                    .zip(base)
                    .enumerate()
                    .map(|(j, (p, c))| {
                        let dv = p - c;
                        let sign = if dv > 0.0 { 1.0 } else if dv < 0.0 { -1.0 } else { 0.0 };
                        (weights.lambda_u * sign + 2.0 * dv * (weights.lambda_s + gs[j]) + gm[j]) / n
                    })
                    .collect();
                clean_inj[li].iter_mut().zip(&g).for_each(|(a, v)| *a -= v);
                inj.push(g);
            }
            let pairs: Vec<(usize, &[f64])> = layers.iter().copied().zip(inj.iter().map(Vec::as_slice)).collect();
            net.backward_into(tr, None, &pairs, &mut grads)?;
        }
        let pairs: Vec<(usize, &[f64])> = layers.iter().copied().zip(clean_inj.iter().map(Vec::as_slice)).collect();
        net.backward_into(&clean[b], Some(&out_grads[b]), &pairs, &mut grads)?;
    }

    if !total.is_finite() || !grads.is_finite() {
        return Err(Error::numeric(format!("objective is not finite (total = {total})")));
    }
    Ok(ObjectiveValue { total, task, layers: terms, stats, gradients: grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, NetworkSpec, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv_net() -> Network {
        Network::seeded(
            NetworkSpec {
                input: Shape::new(1, 6, 6),
                layers: vec![
                    LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel_size: 3, stride: 1, padding: 1 },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d { in_channels: 4, out_channels: 3, kernel_size: 3, stride: 2, padding: 1 },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d { in_channels: 3, out_channels: 2, kernel_size: 1, stride: 1, padding: 0 },
                    LayerSpec::SoftArgmax { height: 3, width: 3, temperature: 1.0, scale: 2.0 },
                ],
            },
            3,
        )
        .unwrap()
    }

    struct Data {
        clean: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        pert: Vec<Vec<Vec<f64>>>,
    }

    fn data(rng: &mut ChaCha8Rng) -> Data {
        let mut d = Data { clean: vec![], targets: vec![], pert: vec![] };
        for _ in 0..3 {
            let x: Vec<f64> = (0..36).map(|_| rng.random::<f64>()).collect();
            d.pert.push(
                (0..3)
                    .map(|_| {
                        let a = rng.random_range(0.7..1.3);
                        let b = rng.random_range(-0.2..0.2);
                        x.iter().map(|v| a * v + b).collect()
                    })
                    .collect(),
            );
            d.targets.push((0..4).map(|_| rng.random_range(0.0..6.0)).collect());
            d.clean.push(x);
        }
        d
    }

    fn batch(d: &Data) -> Vec<BatchItem<'_>> {
        (0..d.clean.len())
            .map(|b| BatchItem { clean: &d.clean[b], target: &d.targets[b], perturbed: d.pert[b].clone() })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = data(&mut rng);
        let weights = LossWeights { lambda_u: 0.3, lambda_s: 0.7, lambda_w: 2.0, ..LossWeights::default() };
        let net = conv_net();
        let layers = [1, 2];
        let v = evaluate_objective(&net, &batch(&d), &layers, 0.25, &weights).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for l in 1..=3 {
            let len = net.params(l).unwrap().weight.len();
            for k in (0..len).step_by(5) {
                let eval = |delta: f64| {
                    let mut n = net.clone();
                    n.params_mut(l).unwrap().weight[k] += delta;
                    evaluate_objective(&n, &batch(&d), &layers, 0.25, &weights).unwrap().total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = v.gradients.layers[l - 1].weight[k];
                // Skip the rare kinks of |·| and of the transport coupling.
                let fd_small = (eval(h / 10.0) - eval(-h / 10.0)) / (h / 5.0);
                if (fd - fd_small).abs() > 1e-4 * (1.0 + fd.abs()) {
                    continue;
                }
                assert!((fd - an).abs() < 1e-5 * (1.0 + fd.abs()), "layer {l} w[{k}]: fd {fd} vs {an}");
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn terms_add_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = data(&mut rng);
        let w = LossWeights::default();
        let v = evaluate_objective(&conv_net(), &batch(&d), &[1, 2], 0.25, &w).unwrap();
        let manual = v.task
            + v.layers.iter().map(|t| w.lambda_u * t.unbiased + w.lambda_s * t.smooth + w.lambda_w * t.wasserstein).sum::<f64>();
        assert!((manual - v.total).abs() < 1e-12 * v.total.abs().max(1.0));
        assert!(v.layers.iter().all(|t| t.wasserstein > 0.0));
        // Pooled statistics agree with the layer metrics.
        for (s, t) in v.stats.iter().zip(&v.layers) {
            assert_eq!(s.count, 9);
            assert_eq!(s.unbiased(), t.unbiased);
        }
    }

    #[test]
    fn zero_weights_reduce_to_task_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = data(&mut rng);
        let w = LossWeights { lambda_u: 0.0, lambda_s: 0.0, lambda_w: 0.0, ..LossWeights::default() };
        let net = conv_net();
        let with = evaluate_objective(&net, &batch(&d), &[1, 2], 0.25, &w).unwrap();
        let without = evaluate_objective(&net, &batch(&d), &[], 0.0, &w).unwrap();
        assert_eq!(with.total, without.total);
        for (a, b) in with.gradients.iter().zip(without.gradients.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_layer_stats_is_contract_error() {
        let t = [LayerTerms { layer: 1, unbiased: 1.0, smooth: 1.0, wasserstein: 0.0 }];
        assert!(matches!(total_loss(0.0, &t, &[1, 2], &LossWeights::default()), Err(Error::Contract(_))));
        assert_eq!(total_loss(0.5, &t, &[1], &LossWeights::default()).unwrap(), 2.5);
    }

    #[test]
    fn rejects_output_layer_and_unsorted_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = data(&mut rng);
        let w = LossWeights::default();
        assert!(evaluate_objective(&conv_net(), &batch(&d), &[3], 0.2, &w).is_err());
        assert!(evaluate_objective(&conv_net(), &batch(&d), &[2, 1], 0.2, &w).is_err());
    }
}
