//! Batch certification over a test set: grid certificate first, sampling
//! falsification for whatever the grid cannot prove.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Certifier, KeypointCriterion, Verdict};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::perturbation::PerturbationSpec;

/// A test image with its ground-truth keypoints `[x0, y0, x1, y1, ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub id: usize,
    pub image: Vec<f64>,
    pub keypoints: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct NamedNetwork<'a> {
    pub name: &'a str,
    pub net: &'a Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    /// Initial grid cells; failing cells are bisected up to `max_cells` resolution.
    pub n_cells: usize,
    pub max_cells: usize,
    pub falsify_samples: usize,
    /// A keypoint is predicted correctly when every coordinate is within this many pixels.
    pub correct_tolerance: f64,
    pub seed: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig { n_cells: 64, max_cells: 1024, falsify_samples: 256, correct_tolerance: 2.0, seed: 0 }
    }
}

/// One row of the raw verdict log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignRecord {
    pub net: String,
    pub image_id: usize,
    pub spec: String,
    pub verdict: Verdict,
    pub method: String,
    pub margin: f64,
    pub time: f64,
    pub keypoints: usize,
    pub keypoints_correct: usize,
    pub keypoints_verified: usize,
    pub keypoints_correct_and_verified: usize,
}

/// Aggregate over one (network, perturbation) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub net: String,
    pub spec: String,
    pub images: usize,
    pub holds: usize,
    pub violated: usize,
    pub unknown: usize,
    pub accuracy: f64,
    pub mean_time: f64,
    pub keypoints: usize,
    pub keypoints_correct: usize,
    pub keypoints_verified: usize,
    pub keypoints_correct_and_verified: usize,
}

impl CampaignSummary {
    /// Groups records by `(net, spec)` in first-seen order.
    pub fn from_records(records: &[CampaignRecord]) -> Vec<CampaignSummary> {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, String), Vec<&CampaignRecord>> = BTreeMap::new();
        for r in records {
            let key = (r.net.clone(), r.spec.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|key| {
                let rs = &groups[&key];
                let count = |v: Verdict| rs.iter().filter(|r| r.verdict == v).count();
                let holds = count(Verdict::Holds);
                CampaignSummary {
                    images: rs.len(),
                    holds,
                    violated: count(Verdict::Violated),
                    unknown: count(Verdict::Unknown),
                    accuracy: holds as f64 / rs.len() as f64,
                    mean_time: rs.iter().map(|r| r.time).sum::<f64>() / rs.len() as f64,
                    keypoints: rs.iter().map(|r| r.keypoints).sum(),
                    keypoints_correct: rs.iter().map(|r| r.keypoints_correct).sum(),
                    keypoints_verified: rs.iter().map(|r| r.keypoints_verified).sum(),
                    keypoints_correct_and_verified: rs.iter().map(|r| r.keypoints_correct_and_verified).sum(),
                    net: key.0,
                    spec: key.1,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config: CampaignConfig,
    pub criterion: KeypointCriterion,
    pub records: Vec<CampaignRecord>,
    pub summaries: Vec<CampaignSummary>,
    /// Input-to-output Lipschitz constant per network.
    pub lipschitz: BTreeMap<String, f64>,
}

pub const CAMPAIGN_CSV_HEADER: [&str; 11] = [
    "net",
    "image_id",
    "spec",
    "verdict",
    "method",
    "margin",
    "time",
    "keypoints",
    "keypoints_correct",
    "keypoints_verified",
    "keypoints_correct_and_verified",
];

impl CampaignReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if self.records.is_empty() {
            w.write_record(CAMPAIGN_CSV_HEADER)?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<CampaignRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<Vec<CampaignRecord>, _>>()?)
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            config: &'a CampaignConfig,
            criterion: &'a KeypointCriterion,
            lipschitz: &'a BTreeMap<String, f64>,
            summaries: &'a [CampaignSummary],
        }
        let s = Summary {
            config: &self.config,
            criterion: &self.criterion,
            lipschitz: &self.lipschitz,
            summaries: &self.summaries,
        };
        fs::write(path, serde_json::to_vec_pretty(&s)?)?;
        Ok(())
    }
}

fn image_seed(base: u64, spec_idx: usize, image_id: usize) -> u64 {
    base ^ (spec_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (image_id as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

fn certify_one(
    cert: &Certifier<'_>,
    name: &str,
    spec_idx: usize,
    spec: &PerturbationSpec,
    img: &LabeledImage,
    criterion: &KeypointCriterion,
    cfg: &CampaignConfig,
) -> Result<CampaignRecord> {
    let start = Instant::now();
    let grid = cert.adaptive_grid(&img.image, spec, criterion, cfg.n_cells, cfg.max_cells.max(cfg.n_cells))?;
    let (verdict, method, margin) = if grid.verdict == Verdict::Holds {
        (grid.verdict, grid.method, grid.margin)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed ^ spec.seed, spec_idx, img.id));
        let f = cert.falsify(&img.image, spec, criterion, cfg.falsify_samples, &mut rng)?;
        if f.verdict == Verdict::Violated {
            (f.verdict, f.method, f.margin)
        } else {
            (Verdict::Unknown, grid.method, grid.margin)
        }
    };
    let time = start.elapsed().as_secs_f64();
    let pred = cert.network().predict(&img.image)?;
    if pred.len() != img.keypoints.len() {
        return Err(Error::config(format!(
            "image {} has {} keypoint coordinates, network predicts {}",
            img.id,
            img.keypoints.len(),
            pred.len()
        )));
    }
    let correct: Vec<bool> = pred
        .chunks(2)
        .zip(img.keypoints.chunks(2))
        .map(|(p, q)| p.iter().zip(q).all(|(a, b)| (a - b).abs() <= cfg.correct_tolerance))
        .collect();
    let verified = &grid.keypoints_ok;
    Ok(CampaignRecord {
        net: name.to_string(),
        image_id: img.id,
        spec: spec.label(),
        verdict,
        method: method.as_str().to_string(),
        margin,
        time,
        keypoints: correct.len(),
        keypoints_correct: correct.iter().filter(|c| **c).count(),
        keypoints_verified: verified.iter().filter(|v| **v).count(),
        keypoints_correct_and_verified: correct.iter().zip(verified).filter(|(c, v)| **c && **v).count(),
    })
}

/// Certifies every (network, perturbation, image) triple.
pub fn campaign(
    nets: &[NamedNetwork<'_>],
    test_set: &[LabeledImage],
    specs: &[PerturbationSpec],
    criterion: &KeypointCriterion,
    cfg: &CampaignConfig,
) -> Result<CampaignReport> {
    if test_set.is_empty() {
        return Err(Error::contract("campaign needs a non-empty test set"));
    }
    let mut records = Vec::new();
    let mut lipschitz = BTreeMap::new();
    for named in nets {
        let cert = Certifier::new(named.net)?;
        lipschitz.insert(named.name.to_string(), cert.profile().from_input());
        for (si, spec) in specs.iter().enumerate() {
            let rows: Vec<CampaignRecord> = test_set
                .par_iter()
                .map(|img| certify_one(&cert, named.name, si, spec, img, criterion, cfg))
                .collect::<Result<_>>()?;
            records.extend(rows);
        }
    }
    let summaries = CampaignSummary::from_records(&records);
    Ok(CampaignReport { config: cfg.clone(), criterion: *criterion, records, summaries, lipschitz })
}
