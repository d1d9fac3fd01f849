//! Importance-driven structured pruning steps.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::usn::{channel_importance, UsnStats};
use crate::wasserstein::percentile;

/// Which end of the importance ranking gets removed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneOrder {
    /// Remove the highest-importance (least stable) channels.
    #[default]
    MostUnstableFirst,
    /// Remove the lowest-scoring channels.
    LeastImportantFirst,
}

/// Channels to keep out of `channels` at ratio `rho`.
pub fn kept_count(channels: usize, rho: f64) -> usize {
    channels - ((rho * channels as f64 + 1e-9).floor() as usize).min(channels)
}

/// Masks produced by one pruning step, per pruned layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub layers: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
    /// Interpolated `(1 − ρ)` percentile of each layer's scores.
    pub thresholds: Vec<f64>,
    pub newly_pruned: Vec<usize>,
}

/// Decides which of the currently alive channels to remove so that exactly
/// `kept` stay alive. Ties are resolved so the lower index survives.
pub fn select_keep(scores: &[f64], alive: &[bool], kept: usize, order: PruneOrder) -> Vec<bool> {
    let mut keep = alive.to_vec();
    let n_alive = alive.iter().filter(|a| **a).count();
    if n_alive <= kept {
        return keep;
    }
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&c| alive[c]).collect();
    // Sort so the first entries are removed first.
    cand.sort_by(|&a, &b| {
        let by_score = match order {
            PruneOrder::MostUnstableFirst => scores[b].total_cmp(&scores[a]),
            PruneOrder::LeastImportantFirst => scores[a].total_cmp(&scores[b]),
        };
        by_score.then(b.cmp(&a))
    });
    for &c in cand.iter().take(n_alive - kept) {
        keep[c] = false;
    }
    keep
}

fn check_layers(net: &Network, layers: &[usize], rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::contract(format!("pruning ratio must lie in [0, 1], got {rho}")));
    }
    for &i in layers {
        let c = net.channels(i)?;
        if kept_count(c, rho) == 0 {
            return Err(Error::contract(format!("ratio {rho} would remove every channel of layer {i}")));
        }
    }
    Ok(())
}

/// Prunes every listed layer to `⌈(1 − ρ)·C⌉` channels using per-channel scores.
pub fn prune_step(
    net: &mut Network,
    layers: &[usize],
    scores: &[Vec<f64>],
    rho: f64,
    order: PruneOrder,
) -> Result<PruneOutcome> {
    check_layers(net, layers, rho)?;
    if scores.len() != layers.len() {
        return Err(Error::contract("one score vector per pruned layer is required"));
    }
    let mut out = PruneOutcome { layers: layers.to_vec(), masks: Vec::new(), thresholds: Vec::new(), newly_pruned: Vec::new() };
    for (&i, sc) in layers.iter().zip(scores) {
        let c = net.channels(i)?;
        if sc.len() != c {
            return Err(Error::contract(format!("layer {i}: {} scores for {c} channels", sc.len())));
        }
        let alive = net.params(i)?.mask.clone();
        let keep = select_keep(sc, &alive, kept_count(c, rho), order);
        let before = alive.iter().filter(|a| **a).count();
        net.prune_channels_in_place(i, &keep)?;
        let mask = net.params(i)?.mask.clone();
        out.newly_pruned.push(before - mask.iter().filter(|a| **a).count());
        out.masks.push(mask);
        out.thresholds.push(percentile(sc, (1.0 - rho) * 100.0));
    }
    Ok(out)
}

/// Same counts as [`prune_step`], channels chosen uniformly at random among the alive ones.
pub fn random_prune_baseline<R: Rng + ?Sized>(
    net: &mut Network,
    layers: &[usize],
    rho: f64,
    rng: &mut R,
) -> Result<PruneOutcome> {
    check_layers(net, layers, rho)?;
    let mut out = PruneOutcome { layers: layers.to_vec(), masks: Vec::new(), thresholds: Vec::new(), newly_pruned: Vec::new() };
    for &i in layers {
        let c = net.channels(i)?;
        let mut keep = net.params(i)?.mask.clone();
        let alive: Vec<usize> = (0..c).filter(|&k| keep[k]).collect();
        let kept = kept_count(c, rho);
        let remove = alive.len().saturating_sub(kept);
        if remove > 0 {
            for k in sample(rng, alive.len(), remove) {
                keep[alive[k]] = false;
            }
        }
        net.prune_channels_in_place(i, &keep)?;
        out.newly_pruned.push(remove);
        out.masks.push(net.params(i)?.mask.clone());
        out.thresholds.push(f64::NAN);
    }
    Ok(out)
}

/// Running USN statistics per pruned layer since the last reset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTracker {
    pub stats: Vec<UsnStats>,
}

impl ImportanceTracker {
    pub fn new(net: &Network, layers: &[usize]) -> Result<Self> {
        Ok(ImportanceTracker {
            stats: layers.iter().map(|&i| Ok(UsnStats::zeroed(i, net.preactivation_len(i)?))).collect::<Result<_>>()?,
        })
    }

    pub fn record(&mut self, batch: &[UsnStats]) -> Result<()> {
        if batch.len() != self.stats.len() {
            return Err(Error::contract("batch statistics do not match the tracked layers"));
        }
        for (run, b) in self.stats.iter_mut().zip(batch) {
            *run = run.merge(b)?;
        }
        Ok(())
    }

    /// Mean neuron importance per channel, for every tracked layer.
    pub fn channel_scores(&self, net: &Network, eps_usn: f64) -> Result<Vec<Vec<f64>>> {
        self.stats
            .iter()
            .map(|s| channel_importance(&s.importance(eps_usn)?, &net.channel_map(s.layer)?))
            .collect()
    }

    pub fn reset(&mut self) {
        self.stats.iter_mut().for_each(UsnStats::reset);
    }

    pub fn is_zero(&self) -> bool {
        self.stats.iter().all(|s| s.count == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, NetworkSpec, Shape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(c: usize) -> Network {
        Network::seeded(
            NetworkSpec {
                input: Shape::flat(3),
                layers: vec![
                    LayerSpec::Dense { in_dim: 3, out_dim: c },
                    LayerSpec::Relu,
                    LayerSpec::Dense { in_dim: c, out_dim: 2 },
                ],
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_ratio_keeps_everything() {
        let mut n = net(10);
        let out = prune_step(&mut n, &[1], &[vec![1.0; 10]], 0.0, PruneOrder::default()).unwrap();
        assert_eq!(out.masks[0], vec![true; 10]);
    }

    #[test]
    fn lowest_two_masked_in_least_important_order() {
        let mut n = net(10);
        let scores = vec![5.0, 0.1, 7.0, 3.0, 0.2, 9.0, 4.0, 6.0, 8.0, 2.0];
        let out = prune_step(&mut n, &[1], &[scores.clone()], 0.2, PruneOrder::LeastImportantFirst).unwrap();
        let masked: Vec<usize> = (0..10).filter(|&c| !out.masks[0][c]).collect();
        assert_eq!(masked, vec![1, 4]);
        let mut n = net(10);
        let out = prune_step(&mut n, &[1], &[scores], 0.2, PruneOrder::MostUnstableFirst).unwrap();
        let masked: Vec<usize> = (0..10).filter(|&c| !out.masks[0][c]).collect();
        assert_eq!(masked, vec![5, 8]);
    }

    #[test]
    fn kept_set_matches_sort_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let c = rng.random_range(2..20);
            let rho: f64 = rng.random_range(0.0..0.9);
            let scores: Vec<f64> = (0..c).map(|_| (rng.random_range(0..6) as f64) * 0.5).collect();
            let k = kept_count(c, rho);
            assert_eq!(k, ((1.0 - rho) * c as f64 - 1e-9).ceil() as usize);
            for order in [PruneOrder::MostUnstableFirst, PruneOrder::LeastImportantFirst] {
                let keep = select_keep(&scores, &vec![true; c], k, order);
                // Oracle: rank by (preference, index) and keep the first k.
                let mut idx: Vec<usize> = (0..c).collect();
                idx.sort_by(|&a, &b| {
                    let s = match order {
                        PruneOrder::MostUnstableFirst => scores[a].total_cmp(&scores[b]),
                        PruneOrder::LeastImportantFirst => scores[b].total_cmp(&scores[a]),
                    };
                    s.then(a.cmp(&b))
                });
                let mut oracle = vec![false; c];
                for &j in &idx[..k] {
                    oracle[j] = true;
                }
                assert_eq!(keep, oracle);
            }
        }
    }

    #[test]
    fn masks_are_cumulative() {
        let mut n = net(10);
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        prune_step(&mut n, &[1], &[a.clone()], 0.1, PruneOrder::default()).unwrap();
        let reversed: Vec<f64> = a.iter().rev().cloned().collect();
        let out = prune_step(&mut n, &[1], &[reversed], 0.3, PruneOrder::default()).unwrap();
        assert!(!out.masks[0][9]);
        assert_eq!(out.masks[0].iter().filter(|m| **m).count(), 7);
        assert_eq!(out.newly_pruned, vec![2]);
    }

    #[test]
    fn full_ratio_is_contract_error() {
        let mut n = net(4);
        assert!(matches!(prune_step(&mut n, &[1], &[vec![0.0; 4]], 1.0, PruneOrder::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn random_baseline_counts_and_variety() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut n = net(10);
        let out = random_prune_baseline(&mut n, &[1], 0.0, &mut rng).unwrap();
        assert_eq!(out.masks[0], vec![true; 10]);
        let mut masks = std::collections::HashSet::new();
        for seed in 0..20 {
            let mut n = net(6);
            let out = random_prune_baseline(&mut n, &[1], 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(out.masks[0].iter().filter(|m| **m).count(), kept_count(6, 0.5));
            masks.insert(out.masks[0].clone());
        }
        // C(6,3) = 20 equally likely masks; 20 draws all landing on one is ~20^-19.
        assert!(masks.len() > 1);
    }

    #[test]
    fn tracker_reset_is_exactly_zero() {
        let n = net(4);
        let mut t = ImportanceTracker::new(&n, &[1]).unwrap();
        t.record(&[UsnStats::from_deviations(1, &[vec![1.0, 2.0, 0.0, -1.0], vec![0.5, 0.0, 1.0, 1.0]]).unwrap()])
            .unwrap();
        assert!(!t.is_zero());
        t.reset();
        assert!(t.is_zero());
        assert!(t.channel_scores(&n, 1e-8).unwrap()[0].iter().all(|v| *v == 0.0));
    }
}
