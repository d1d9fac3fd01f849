use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ArmConfig, ExperimentConfig};
use super::report::{arm_rows, tables, write_runs, write_tables, ArmRow, RunRecord, Tables, TABLE_FILES};
use super::visualize::{layer_stats, neuron_rows, smooth_exceedance, write_neuron_csv, NeuronRow};
use crate::certify::{campaign, CampaignReport, NamedNetwork};
use crate::data::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::network::{LipschitzOptions, LipschitzProfile, Network};
use crate::pipeline::{cnn_small, train, EpochLog};

pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    generate_dataset(&d.scene, d.n_train, d.n_val, d.n_test, d.seed)
}

pub fn run_id(arm: &str, seed: u64) -> String {
    format!("{arm}-s{seed}")
}

/// A trained network with its metadata.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    /// Best checkpoint, masks applied but not compacted.
    pub net: Network,
    pub log: Vec<EpochLog>,
}

/// Trains one arm at one seed. All arms sharing a seed start from the same weights.
pub fn train_run(cfg: &ExperimentConfig, data: &Dataset, arm: &ArmConfig, seed: u64) -> Result<RunOutput> {
    let p = &data.params;
    let init = Network::seeded(cnn_small(p.height, p.width, p.keypoints, cfg.temperature)?, seed)?;
    let tc = arm.train_config(&cfg.train, seed);
    let out = train(init, &data.train, &data.val, &tc)?;
    let lipschitz = LipschitzProfile::compute(&out.best, &LipschitzOptions::default())?.from_input();
    let alive_parameters = out.best.compact()?.num_parameters();
    Ok(RunOutput {
        record: RunRecord {
            run_id: run_id(&arm.name, seed),
            arm: arm.name.clone(),
            rule: arm.rule().to_string(),
            rho: arm.rho,
            lambda_w: arm.lambda_w,
            seed,
            best_epoch: out.best_epoch,
            best_val: out.best_val,
            diverged_at: out.diverged_at,
            parameters: out.best.num_parameters(),
            alive_parameters,
            lipschitz,
        },
        net: out.best,
        log: out.log,
    })
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let layers = log.first().map_or(0, |l| l.unbiased.len());
    let linear = log.first().map_or(0, |l| l.alive.len());
    let mut header: Vec<String> =
        ["epoch", "rho", "train_task", "train_total", "val_task", "pruned", "eligible"].iter().map(|s| s.to_string()).collect();
    for k in 0..layers {
        header.extend([format!("unbiased_{k}"), format!("smooth_{k}"), format!("wasserstein_{k}")]);
    }
    header.extend((1..=linear).map(|i| format!("alive_{i}")));
    w.write_record(&header)?;
    for l in log {
        let mut row = vec![
            l.epoch.to_string(),
            l.rho.to_string(),
            l.train_task.to_string(),
            l.train_total.to_string(),
            l.val_task.to_string(),
            l.pruned.to_string(),
            l.eligible.to_string(),
        ];
        for k in 0..layers {
            row.extend([l.unbiased[k].to_string(), l.smooth[k].to_string(), l.wasserstein[k].to_string()]);
        }
        row.extend(l.alive.iter().map(|a| a.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Certifies compacted copies of the given runs on the test split.
pub fn certify_runs(cfg: &ExperimentConfig, data: &Dataset, runs: &[RunOutput]) -> Result<CampaignReport> {
    let compact: Vec<Network> = runs.iter().map(|r| r.net.compact()).collect::<Result<_>>()?;
    let named: Vec<NamedNetwork<'_>> =
        runs.iter().zip(&compact).map(|(r, n)| NamedNetwork { name: &r.record.run_id, net: n }).collect();
    campaign(&named, &data.test, &cfg.certify.specs, &cfg.certify.criterion, &cfg.certify.campaign)
}

pub fn run_neuron_rows(cfg: &ExperimentConfig, data: &Dataset, run: &RunOutput) -> Result<Vec<NeuronRow>> {
    let v = &cfg.visualize;
    let images = &data.test[..v.images.min(data.test.len())];
    let stats = layer_stats(&run.net, images, &cfg.certify.specs, v.samples_per_image, v.seed)?;
    let mut rows = neuron_rows(&run.net, &stats, &run.record.run_id, &run.record.arm, run.record.seed)?;
    // Only the regularised layers are reported.
    rows.retain(|r| cfg.train.prune_layers.contains(&r.layer));
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub run_id: String,
    pub arm: String,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
}

/// Ties every emitted file to the configuration and seeds that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub dataset_checksum: String,
    pub runs: Vec<ManifestRun>,
    pub reports: Vec<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub dataset: Dataset,
    pub runs: Vec<RunOutput>,
    pub campaign: CampaignReport,
    pub rows: Vec<ArmRow>,
    pub tables: Tables,
    pub neurons: Vec<NeuronRow>,
    pub manifest: Manifest,
}

impl ExperimentResult {
    pub fn run(&self, arm: &str, seed: u64) -> Option<&RunOutput> {
        self.runs.iter().find(|r| r.record.arm == arm && r.record.seed == seed)
    }

    /// Mean over seeds of a per-run campaign statistic, pooled over specs.
    pub fn seed_mean(&self, arm: &str, stat: impl Fn(&[&crate::certify::CampaignRecord]) -> f64) -> Result<f64> {
        let seeds: Vec<u64> = self.runs.iter().filter(|r| r.record.arm == arm).map(|r| r.record.seed).collect();
        if seeds.is_empty() {
            return Err(Error::config(format!("no runs for arm {arm:?}")));
        }
        let mut total = 0.0;
        for &s in &seeds {
            let id = run_id(arm, s);
            let recs: Vec<&crate::certify::CampaignRecord> = self.campaign.records.iter().filter(|r| r.net == id).collect();
            total += stat(&recs);
        }
        Ok(total / seeds.len() as f64)
    }

    /// Fraction of keypoints both correct and certified, seed-averaged.
    pub fn verified_accuracy(&self, arm: &str) -> Result<f64> {
        self.seed_mean(arm, |recs| {
            let kp: usize = recs.iter().map(|r| r.keypoints).sum();
            let ok: usize = recs.iter().map(|r| r.keypoints_correct_and_verified).sum();
            if kp == 0 { 0.0 } else { ok as f64 / kp as f64 }
        })
    }

    /// Mean certification time per image, seed-averaged.
    pub fn mean_time(&self, arm: &str) -> Result<f64> {
        self.seed_mean(arm, |recs| {
            if recs.is_empty() { 0.0 } else { recs.iter().map(|r| r.time).sum::<f64>() / recs.len() as f64 }
        })
    }

    /// Seed-mean count of neurons above the `q`-th percentile of `base`'s smooth
    /// metric, for `(base, other)`.
    pub fn smooth_exceedance(&self, base: &str, other: &str, q: f64) -> Result<(f64, f64)> {
        let seeds: Vec<u64> = self.runs.iter().filter(|r| r.record.arm == base).map(|r| r.record.seed).collect();
        if seeds.is_empty() {
            return Err(Error::config(format!("no runs for arm {base:?}")));
        }
        let (mut b, mut o) = (0.0, 0.0);
        for &s in &seeds {
            let rows_of = |arm: &str| -> Vec<NeuronRow> {
                self.neurons.iter().filter(|r| r.arm == arm && r.seed == s).cloned().collect()
            };
            let (nb, no) = smooth_exceedance(&rows_of(base), &rows_of(other), q);
            b += nb as f64;
            o += no as f64;
        }
        Ok((b / seeds.len() as f64, o / seeds.len() as f64))
    }
}

/// Full pipeline: data, every (arm, seed) run, certification campaign, tables
/// and per-neuron statistics. Files are written only when `out_dir` is given.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = load_or_generate(cfg)?;
    let jobs: Vec<(&ArmConfig, u64)> = cfg.seeds.iter().flat_map(|&s| cfg.arms.iter().map(move |a| (a, s))).collect();
    let runs: Vec<RunOutput> = jobs.par_iter().map(|(a, s)| train_run(cfg, &data, a, *s)).collect::<Result<_>>()?;
    let report = certify_runs(cfg, &data, &runs)?;
    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let rows = arm_rows(&report.records, &records);
    let t = tables(&rows);
    let neurons: Vec<NeuronRow> = runs
        .par_iter()
        .map(|r| run_neuron_rows(cfg, &data, r))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        dataset_checksum: data.checksum(),
        runs: runs
            .iter()
            .map(|r| ManifestRun {
                run_id: r.record.run_id.clone(),
                arm: r.record.arm.clone(),
                seed: r.record.seed,
                checkpoint: None,
                train_log: None,
            })
            .collect(),
        reports: Vec::new(),
    };

    if let Some(dir) = out_dir {
        let ckpt = dir.join("checkpoints");
        let logs = dir.join("logs");
        fs::create_dir_all(&ckpt)?;
        fs::create_dir_all(&logs)?;
        data.save(dir.join("dataset.json"))?;
        for (r, m) in runs.iter().zip(&mut manifest.runs) {
            let c = PathBuf::from("checkpoints").join(format!("{}.json", r.record.run_id));
            let l = PathBuf::from("logs").join(format!("{}.csv", r.record.run_id));
            let mut ck = r.net.to_checkpoint();
            ck.metadata.insert("run_id".into(), r.record.run_id.clone().into());
            ck.metadata.insert("arm".into(), r.record.arm.clone().into());
            ck.metadata.insert("seed".into(), r.record.seed.into());
            ck.metadata.insert("dataset_checksum".into(), manifest.dataset_checksum.clone().into());
            ck.save(&dir.join(&c))?;
            write_train_log(&dir.join(&l), &r.log)?;
            m.checkpoint = Some(c);
            m.train_log = Some(l);
        }
        write_runs(&dir.join("runs.csv"), &records)?;
        report.write_csv(&dir.join("campaign.csv"))?;
        report.write_summary_json(&dir.join("campaign_summary.json"))?;
        write_tables(dir, &t)?;
        write_neuron_csv(&dir.join("neurons.csv"), &neurons)?;
        manifest.reports = ["dataset.json", "runs.csv", "campaign.csv", "campaign_summary.json", "neurons.csv"]
            .iter()
            .chain(TABLE_FILES.iter())
            .map(PathBuf::from)
            .collect();
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    }

    Ok(ExperimentResult { dataset: data, runs, campaign: report, rows, tables: t, neurons, manifest })
}
