use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{evaluate_objective, BatchItem, LossWeights};
use super::optim::{Optimizer, OptimizerConfig};
use super::pruning::{prune_step, random_prune_baseline, ImportanceTracker, PruneOrder};
use super::schedule::PruningSchedule;
use crate::certify::LabeledImage;
use crate::error::{Error, Result};
use crate::network::{LayerSpec, Network, NetworkSpec, Shape};
use crate::perturbation::PerturbationSpec;

/// Small keypoint regressor: four 3×3 conv blocks (the last three with
/// stride 2), a dense layer producing one heatmap per keypoint at a quarter of
/// the input resolution, and a soft-argmax head mapping back to input pixels.
pub fn cnn_small(height: usize, width: usize, keypoints: usize, temperature: f64) -> Result<NetworkSpec> {
    if height % 8 != 0 || width % 8 != 0 || height == 0 || width == 0 || keypoints == 0 {
        return Err(Error::config("image sides must be positive multiples of 8"));
    }
    let conv = |i, o, s| LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel_size: 3, stride: s, padding: 1 };
    let (hh, hw) = (height / 4, width / 4);
    Ok(NetworkSpec {
        input: Shape::new(1, height, width),
        layers: vec![
            conv(1, 8, 1),
            LayerSpec::Relu,
            conv(8, 16, 2),
            LayerSpec::Relu,
            conv(16, 16, 2),
            LayerSpec::Relu,
            conv(16, 16, 2),
            LayerSpec::Relu,
            LayerSpec::Dense { in_dim: 16 * (height / 8) * (width / 8), out_dim: keypoints * hh * hw },
            LayerSpec::SoftArgmax { height: hh, width: hw, temperature, scale: 4.0 },
        ],
    })
}

/// How channels are chosen at each pruning epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningMode {
    #[default]
    Usn,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Perturbed copies drawn per image and batch.
    pub samples_per_image: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: PruningSchedule,
    pub weights: LossWeights,
    pub prune_layers: Vec<usize>,
    pub order: PruneOrder,
    pub mode: PruningMode,
    /// Each perturbed copy uses one of these, chosen uniformly.
    pub perturbations: Vec<PerturbationSpec>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            samples_per_image: 2,
            optimizer: OptimizerConfig::default(),
            schedule: PruningSchedule::none(),
            weights: LossWeights::default(),
            prune_layers: vec![1, 2, 3, 4],
            order: PruneOrder::default(),
            mode: PruningMode::default(),
            perturbations: vec![PerturbationSpec::brightness(1.0 / 255.0), PerturbationSpec::contrast(0.01)],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !self.prune_layers.is_empty() && (self.samples_per_image == 0 || self.perturbations.is_empty()) {
            return Err(Error::config("regularised layers need perturbations and samples_per_image >= 1"));
        }
        if self.schedule.rho >= 1.0 {
            return Err(Error::config("final pruning ratio must be below 1"));
        }
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.weights.validate()?;
        for p in &self.perturbations {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub rho: f64,
    pub train_task: f64,
    pub train_total: f64,
    pub val_task: f64,
    /// Batch-averaged regulariser values, one per pruned layer.
    pub unbiased: Vec<f64>,
    pub smooth: Vec<f64>,
    pub wasserstein: Vec<f64>,
    pub alive: Vec<usize>,
    pub pruned: bool,
    /// Whether this epoch may supply the returned checkpoint.
    pub eligible: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest validation loss among eligible epochs.
    pub best: Network,
    pub best_epoch: usize,
    pub best_val: f64,
    pub last: Network,
    pub log: Vec<EpochLog>,
    /// Epoch at which the objective became non-finite, if it did.
    pub diverged_at: Option<usize>,
}

/// Clean keypoint MSE averaged over images and coordinates.
pub fn task_loss(net: &Network, images: &[LabeledImage]) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for img in images {
        let out = net.predict(&img.image)?;
        if out.len() != img.keypoints.len() {
            return Err(Error::contract("label length does not match network output"));
        }
        total += out.iter().zip(&img.keypoints).map(|(o, y)| (o - y).powi(2)).sum::<f64>() / out.len() as f64;
    }
    Ok(total / images.len() as f64)
}

/// Trains `net` with the regularised objective and scheduled pruning.
///
/// Pruning happens at the end of every epoch where the scheduled ratio
/// increases; importance accumulates between pruning steps. Only epochs whose
/// ratio has reached the final value compete for the returned checkpoint; if
/// none does, the last epoch is returned.
pub fn train(mut net: Network, train: &[LabeledImage], val: &[LabeledImage], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let layers = cfg.prune_layers.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prune_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    net.push_seed(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, &net)?;
    let mut tracker = ImportanceTracker::new(&net, &layers)?;
    let rho_target = cfg.schedule.rho;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Network, usize, f64)> = None;
    let mut last_good = net.clone();
    let mut diverged_at = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_task, mut sum_total, mut batches) = (0.0, 0.0, 0usize);
        let mut sums = vec![[0.0; 3]; layers.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&k| {
                    let img = &train[k];
                    let perturbed = if layers.is_empty() {
                        Vec::new()
                    } else {
                        (0..cfg.samples_per_image)
                            .map(|_| {
                                let spec = &cfg.perturbations[rng.random_range(0..cfg.perturbations.len())];
                                let s = spec.sample_params(1, &mut rng)[0];
                                spec.apply_unchecked(&img.image, s)
                            })
                            .collect()
                    };
                    BatchItem { clean: &img.image, target: &img.keypoints, perturbed }
                })
                .collect();
            let value = match evaluate_objective(&net, &batch, &layers, rho_target, &cfg.weights) {
                Ok(v) => v,
                Err(Error::Numeric(_)) => {
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if let Err(e) = opt.step(&mut net, &value.gradients) {
                match e {
                    Error::Numeric(_) => {
                        diverged_at = Some(epoch);
                        break 'epochs;
                    }
                    e => return Err(e),
                }
            }
            tracker.record(&value.stats)?;
            sum_task += value.task;
            sum_total += value.total;
            batches += 1;
            for (s, t) in sums.iter_mut().zip(&value.layers) {
                s[0] += t.unbiased;
                s[1] += t.smooth;
                s[2] += t.wasserstein;
            }
        }

        let rho = cfg.schedule.rho_at(epoch);
        let pruned = !layers.is_empty() && cfg.schedule.is_pruning_epoch(epoch);
        if pruned {
            match cfg.mode {
                PruningMode::Usn => {
                    let scores = tracker.channel_scores(&net, cfg.weights.eps_usn)?;
                    prune_step(&mut net, &layers, &scores, rho, cfg.order)?;
                }
                PruningMode::Random => {
                    random_prune_baseline(&mut net, &layers, rho, &mut prune_rng)?;
                }
            }
            tracker.reset();
        }

        let val_task = task_loss(&net, val)?;
        if !val_task.is_finite() {
            diverged_at = Some(epoch);
            break;
        }
        let eligible = rho >= cfg.schedule.rho;
        let nb = batches.max(1) as f64;
        log.push(EpochLog {
            epoch,
            rho,
            train_task: sum_task / nb,
            train_total: sum_total / nb,
            val_task,
            unbiased: sums.iter().map(|s| s[0] / nb).collect(),
            smooth: sums.iter().map(|s| s[1] / nb).collect(),
            wasserstein: sums.iter().map(|s| s[2] / nb).collect(),
            alive: net.alive_channels(),
            pruned,
            eligible,
        });
        if eligible && best.as_ref().is_none_or(|b| val_task < b.2) {
            best = Some((net.clone(), epoch, val_task));
        }
        last_good = net.clone();
    }

    let last_epoch = log.last().map_or(0, |l| l.epoch);
    let last_val = log.last().map_or(f64::INFINITY, |l| l.val_task);
    let (best, best_epoch, best_val) = best.unwrap_or_else(|| (last_good.clone(), last_epoch, last_val));
    Ok(TrainOutcome { best, best_epoch, best_val, last: last_good, log, diverged_at })
}
