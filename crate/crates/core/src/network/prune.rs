//! Channel masks and physical compaction.

use super::{LayerSpec, LinearKind, Network, NetworkSpec, Params};
use crate::error::{Error, Result};

/// Partition of a layer's pre-activation neurons into channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMap {
    groups: Vec<Vec<usize>>,
    neurons: usize,
}

impl ChannelMap {
    /// Validates that `groups` partitions `0..neurons` into non-empty sets.
    pub fn new(groups: Vec<Vec<usize>>, neurons: usize) -> Result<Self> {
        let mut seen = vec![false; neurons];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::contract("channel map contains an empty channel"));
            }
            for &j in g {
                if j >= neurons || seen[j] {
                    return Err(Error::contract(format!("channel map is not a partition (neuron {j})")));
                }
                seen[j] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::contract("channel map does not cover every neuron"));
        }
        Ok(ChannelMap { groups, neurons })
    }

    /// `channels` contiguous blocks of `per_channel` neurons (channel-major layout).
    pub fn contiguous(channels: usize, per_channel: usize) -> Self {
        ChannelMap {
            groups: (0..channels).map(|c| (c * per_channel..(c + 1) * per_channel).collect()).collect(),
            neurons: channels * per_channel,
        }
    }

    pub fn channels(&self) -> usize {
        self.groups.len()
    }

    pub fn neurons(&self) -> usize {
        self.neurons
    }

    pub fn members(&self, c: usize) -> &[usize] {
        &self.groups[c]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
}

impl Network {
    /// Channel map of the pre-activation of linear layer `i`.
    pub fn channel_map(&self, i: usize) -> Result<ChannelMap> {
        let s = self.preactivation_shape(i)?;
        Ok(ChannelMap::contiguous(s.channels, s.spatial()))
    }

    /// Zeroes channel `c` of layer `i` and the matching incoming weights of layer `i + 1`.
    pub(crate) fn zero_channel(&mut self, i: usize, c: usize) {
        let per_row = self.params[i - 1].weight.len() / self.params[i - 1].mask.len();
        let p = &mut self.params[i - 1];
        p.weight[c * per_row..(c + 1) * per_row].iter_mut().for_each(|w| *w = 0.0);
        p.bias[c] = 0.0;
        if i < self.num_linear() {
            let spatial = self.out_shapes[self.position(i)].spatial();
            match self.linear_kind(i + 1) {
                LinearKind::Dense { in_dim, out_dim } => {
                    let next = &mut self.params[i];
                    for o in 0..out_dim {
                        next.weight[o * in_dim + c * spatial..o * in_dim + (c + 1) * spatial]
                            .iter_mut()
                            .for_each(|w| *w = 0.0);
                    }
                }
                LinearKind::Conv(g) => {
                    let kk = g.kernel * g.kernel;
                    let next = &mut self.params[i];
                    for o in 0..g.out_channels {
                        let start = (o * g.in_channels + c) * kk;
                        next.weight[start..start + kk].iter_mut().for_each(|w| *w = 0.0);
                    }
                }
            }
        }
    }

    /// Masks every channel of layer `i` whose `keep` entry is false. Masks only
    /// ever shrink, so applying the same `keep` twice is the same as once.
    pub fn prune_channels_in_place(&mut self, i: usize, keep: &[bool]) -> Result<()> {
        let channels = self.channels(i)?;
        if keep.len() != channels {
            return Err(Error::contract(format!("keep has {} entries, layer {i} has {channels} channels", keep.len())));
        }
        if !keep.iter().any(|k| *k) {
            return Err(Error::contract("cannot prune every channel of a layer"));
        }
        let merged: Vec<bool> = self.params[i - 1].mask.iter().zip(keep).map(|(a, b)| *a && *b).collect();
        if !merged.iter().any(|k| *k) {
            return Err(Error::contract("pruning would leave the layer without live channels"));
        }
        self.params[i - 1].mask = merged;
        for c in 0..channels {
            if !self.params[i - 1].mask[c] {
                self.zero_channel(i, c);
            }
        }
        self.generation += 1;
        Ok(())
    }

    pub fn prune_channels(&self, i: usize, keep: &[bool]) -> Result<Network> {
        let mut out = self.clone();
        out.prune_channels_in_place(i, keep)?;
        Ok(out)
    }

    /// Physically removes masked channels, yielding a smaller network with
    /// identical outputs.
    pub fn compact(&self) -> Result<Network> {
        let l = self.num_linear();
        if self.params[l - 1].mask.iter().any(|m| !m) {
            return Err(Error::contract("the final linear layer cannot be compacted"));
        }
        let keep: Vec<Vec<usize>> = self
            .params
            .iter()
            .map(|p| p.mask.iter().enumerate().filter(|(_, m)| **m).map(|(c, _)| c).collect())
            .collect();
        let mut layers = self.spec.layers.clone();
        let mut params = Vec::with_capacity(l);
        for i in 1..=l {
            let pos = self.position(i);
            let p = &self.params[i - 1];
            let outs = &keep[i - 1];
            // Incoming channels that survive (all channels for the first layer).
            let ins: Vec<usize> = if i == 1 {
                (0..self.spec.input.channels).collect()
            } else {
                keep[i - 2].clone()
            };
            let (weight, bias) = match self.linear_kind(i) {
                LinearKind::Dense { in_dim, .. } => {
                    let spatial = if i == 1 {
                        self.spec.input.spatial()
                    } else {
                        self.out_shapes[self.position(i - 1)].spatial()
                    };
                    let mut w = Vec::with_capacity(outs.len() * ins.len() * spatial);
                    for &o in outs {
                        for &c in &ins {
                            w.extend_from_slice(&p.weight[o * in_dim + c * spatial..o * in_dim + (c + 1) * spatial]);
                        }
                    }
                    layers[pos] = LayerSpec::Dense { in_dim: ins.len() * spatial, out_dim: outs.len() };
                    (w, outs.iter().map(|&o| p.bias[o]).collect::<Vec<_>>())
                }
                LinearKind::Conv(g) => {
                    let kk = g.kernel * g.kernel;
                    let mut w = Vec::with_capacity(outs.len() * ins.len() * kk);
                    for &o in outs {
                        for &c in &ins {
                            let start = (o * g.in_channels + c) * kk;
                            w.extend_from_slice(&p.weight[start..start + kk]);
                        }
                    }
                    layers[pos] = LayerSpec::Conv2d {
                        in_channels: ins.len(),
                        out_channels: outs.len(),
                        kernel_size: g.kernel,
                        stride: g.stride,
                        padding: g.padding,
                    };
                    (w, outs.iter().map(|&o| p.bias[o]).collect::<Vec<_>>())
                }
            };
            params.push(Params { weight, bias, mask: vec![true; outs.len()] });
        }
        let spec = NetworkSpec { input: self.spec.input, layers };
        let mut net = Network::from_params(spec, params)?;
        net.seed_lineage = self.seed_lineage.clone();
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cnn() -> NetworkSpec {
        NetworkSpec {
            input: Shape::new(1, 6, 6),
            layers: vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel_size: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_channels: 4, out_channels: 3, kernel_size: 3, stride: 2, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: 27, out_dim: 8 },
                LayerSpec::SoftArgmax { height: 2, width: 2, temperature: 1.0, scale: 3.0 },
            ],
        }
    }

    fn random_net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::random(cnn(), &mut rng).unwrap();
        for i in 1..=3 {
            for b in &mut net.params_mut(i).unwrap().bias {
                *b = rng.random_range(-0.2..0.2);
            }
        }
        net
    }

    fn inputs(n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n).map(|_| (0..36).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
    }

    #[test]
    fn all_true_keep_is_noop() {
        let net = random_net(1);
        let pruned = net.prune_channels(1, &[true; 4]).unwrap();
        for x in inputs(100) {
            assert_eq!(net.predict(&x).unwrap(), pruned.predict(&x).unwrap());
        }
    }

    #[test]
    fn dead_channel_prune_is_noop() {
        let mut net = random_net(2);
        {
            let p = net.params_mut(2).unwrap();
            p.weight[36..72].iter_mut().for_each(|w| *w = 0.0);
            p.bias[1] = 0.0;
        }
        let pruned = net.prune_channels(2, &[true, false, true]).unwrap();
        for x in inputs(20) {
            let a = net.predict(&x).unwrap();
            let b = pruned.predict(&x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_equals_physically_rebuilt() {
        let net = random_net(3).prune_channels(1, &[true, false, true, false]).unwrap();
        let net = net.prune_channels(2, &[false, true, true]).unwrap();
        let small = net.compact().unwrap();
        assert_eq!(small.channels(1).unwrap(), 2);
        assert_eq!(small.channels(2).unwrap(), 2);
        assert!(small.num_parameters() < net.num_parameters());
        for x in inputs(50) {
            let a = net.predict(&x).unwrap();
            let b = small.predict(&x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn idempotent_and_cumulative() {
        let net = random_net(4);
        let keep = [true, false, true, true];
        let once = net.prune_channels(1, &keep).unwrap();
        let twice = once.prune_channels(1, &keep).unwrap();
        assert_eq!(once, twice);
        let more = once.prune_channels(1, &[true, true, false, true]).unwrap();
        assert_eq!(more.params(1).unwrap().mask, vec![true, false, false, true]);
    }

    #[test]
    fn all_false_is_contract_error() {
        let net = random_net(5);
        assert!(matches!(net.prune_channels(1, &[false; 4]), Err(Error::Contract(_))));
        assert!(matches!(net.prune_channels(1, &[true; 3]), Err(Error::Contract(_))));
        let partial = net.prune_channels(1, &[true, false, false, false]).unwrap();
        assert!(matches!(partial.prune_channels(1, &[false, true, true, true]), Err(Error::Contract(_))));
    }

    #[test]
    fn channel_map_validation() {
        assert!(ChannelMap::new(vec![vec![0, 1], vec![2]], 3).is_ok());
        assert!(ChannelMap::new(vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(ChannelMap::new(vec![vec![0], vec![2]], 3).is_err());
        assert!(ChannelMap::new(vec![vec![0, 1, 2], vec![]], 3).is_err());
        let m = random_net(6).channel_map(2).unwrap();
        assert_eq!(m.channels(), 3);
        assert_eq!(m.members(1), &(9..18).collect::<Vec<_>>()[..]);
    }
}
