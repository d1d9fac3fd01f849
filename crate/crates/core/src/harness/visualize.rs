//! Per-neuron deviation statistics, one CSV row per neuron.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::write_csv_rows;
use crate::certify::LabeledImage;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::perturbation::PerturbationSpec;
use crate::usn::{UsnStats, DEFAULT_EPS_USN};
use crate::wasserstein::percentile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronRow {
    pub run_id: String,
    pub arm: String,
    pub seed: u64,
    pub layer: usize,
    pub neuron: usize,
    pub channel: usize,
    pub alive: bool,
    /// Mean deviation (signed bias).
    pub mean: f64,
    pub variance: f64,
    /// `mean² + variance`.
    pub smooth: f64,
    pub importance: f64,
}

pub const NEURON_CSV_HEADER: [&str; 11] =
    ["run_id", "arm", "seed", "layer", "neuron", "channel", "alive", "mean", "variance", "smooth", "importance"];

/// Pooled deviation statistics of every hidden linear layer over `images`,
/// with `samples` copies per image under each perturbation.
pub fn layer_stats(
    net: &Network,
    images: &[LabeledImage],
    specs: &[PerturbationSpec],
    samples: usize,
    seed: u64,
) -> Result<Vec<UsnStats>> {
    let depth = net.num_linear().saturating_sub(1);
    if depth == 0 {
        return Err(Error::contract("network has no hidden linear layer"));
    }
    if samples == 0 || specs.is_empty() {
        return Err(Error::contract("need at least one perturbation and one sample"));
    }
    let mut stats: Vec<UsnStats> =
        (1..=depth).map(|i| Ok(UsnStats::zeroed(i, net.preactivation_len(i)?))).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for img in images {
        let clean = net.forward_partial(&img.image, depth)?;
        for spec in specs {
            for x in spec.sample(&img.image, samples, &mut rng)? {
                let tr = net.forward_partial(&x, depth)?;
                for (s, (p, c)) in stats.iter_mut().zip(tr.preactivations.iter().zip(&clean.preactivations)) {
                    let d: Vec<f64> = p.iter().zip(c).map(|(a, b)| a - b).collect();
                    s.push(&d)?;
                }
            }
        }
    }
    Ok(stats)
}

pub fn neuron_rows(net: &Network, stats: &[UsnStats], run_id: &str, arm: &str, seed: u64) -> Result<Vec<NeuronRow>> {
    let mut rows = Vec::new();
    for s in stats {
        let map = net.channel_map(s.layer)?;
        let mask = &net.params(s.layer)?.mask;
        let var = s.per_neuron_variance();
        let imp = s.importance(DEFAULT_EPS_USN)?;
        for (c, members) in map.groups().iter().enumerate() {
            for &j in members {
                let mean = s.mean_deviation()[j];
                rows.push(NeuronRow {
                    run_id: run_id.to_string(),
                    arm: arm.to_string(),
                    seed,
                    layer: s.layer,
                    neuron: j,
                    channel: c,
                    alive: mask[c],
                    mean,
                    variance: var[j],
                    smooth: var[j] + mean * mean,
                    importance: imp[j],
                });
            }
        }
    }
    rows.sort_by_key(|r| (r.layer, r.neuron));
    Ok(rows)
}

pub fn write_neuron_csv(path: &Path, rows: &[NeuronRow]) -> Result<()> {
    write_csv_rows(path, &NEURON_CSV_HEADER, rows)
}

/// Per layer, counts neurons of `base` and `other` whose smooth metric exceeds
/// the `q`-th percentile of `base` in that layer. Returns summed `(base, other)`.
pub fn smooth_exceedance(base: &[NeuronRow], other: &[NeuronRow], q: f64) -> (usize, usize) {
    let mut layers: Vec<usize> = base.iter().map(|r| r.layer).collect();
    layers.dedup();
    let (mut nb, mut no) = (0, 0);
    for l in layers {
        let vals: Vec<f64> = base.iter().filter(|r| r.layer == l).map(|r| r.smooth).collect();
        let tau = percentile(&vals, q);
        nb += vals.iter().filter(|v| **v > tau).count();
        no += other.iter().filter(|r| r.layer == l && r.smooth > tau).count();
    }
    (nb, no)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, NetworkSpec, Shape};
    use crate::usn::deviations;

    fn net() -> Network {
        Network::seeded(
            NetworkSpec {
                input: Shape::new(1, 4, 4),
                layers: vec![
                    LayerSpec::Conv2d { in_channels: 1, out_channels: 3, kernel_size: 3, stride: 1, padding: 1 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { in_dim: 48, out_dim: 5 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { in_dim: 5, out_dim: 2 },
                ],
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn rows_match_direct_deviations() {
        let n = net();
        let img = LabeledImage { id: 0, image: (0..16).map(|k| k as f64 / 16.0).collect(), keypoints: vec![] };
        let spec = PerturbationSpec::brightness(0.1);
        let stats = layer_stats(&n, std::slice::from_ref(&img), &[spec], 6, 3).unwrap();
        let samples = spec.sample(&img.image, 6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (i, s) in stats.iter().enumerate() {
            let devs = deviations(&n, &img.image, &samples, i + 1).unwrap();
            let direct = UsnStats::from_deviations(i + 1, &devs).unwrap();
            for (a, b) in s.per_neuron_smooth().iter().zip(direct.per_neuron_smooth()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let rows = neuron_rows(&n, &stats, "r", "a", 0).unwrap();
        assert_eq!(rows.len(), 48 + 5);
        assert!(rows.iter().filter(|r| r.layer == 1).all(|r| r.channel == r.neuron / 16));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.csv");
        write_neuron_csv(&p, &rows).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), rows.len() + 1);
    }

    #[test]
    fn exceedance_counts() {
        let row = |layer, smooth| NeuronRow {
            run_id: String::new(),
            arm: String::new(),
            seed: 0,
            layer,
            neuron: 0,
            channel: 0,
            alive: true,
            mean: 0.0,
            variance: smooth,
            smooth,
            importance: 0.0,
        };
        let base: Vec<NeuronRow> = (0..10).map(|k| row(1, k as f64)).collect();
        let other: Vec<NeuronRow> = (0..10).map(|k| row(1, k as f64 / 2.0)).collect();
        // 90th percentile of 0..9 is 8.1: base has one neuron above, other none.
        assert_eq!(smooth_exceedance(&base, &other, 90.0), (1, 0));
        assert_eq!(smooth_exceedance(&base, &base, 90.0), (1, 1));
    }
}
