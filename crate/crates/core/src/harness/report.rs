//! Aggregate tables over campaign records, joined with run metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certify::{CampaignRecord, CampaignReport, Verdict};
use crate::error::Result;

/// One trained network of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub arm: String,
    pub rule: String,
    pub rho: f64,
    pub lambda_w: f64,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val: f64,
    pub diverged_at: Option<usize>,
    pub parameters: usize,
    pub alive_parameters: usize,
    pub lipschitz: f64,
}

pub const RUNS_CSV_HEADER: [&str; 12] = [
    "run_id",
    "arm",
    "rule",
    "rho",
    "lambda_w",
    "seed",
    "best_epoch",
    "best_val",
    "diverged_at",
    "parameters",
    "alive_parameters",
    "lipschitz",
];

/// Campaign outcome of one arm under one perturbation, pooled over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: String,
    pub rule: String,
    pub rho: f64,
    pub lambda_w: f64,
    pub spec: String,
    pub seeds: usize,
    pub images: usize,
    pub holds: usize,
    pub violated: usize,
    pub unknown: usize,
    pub holds_rate: f64,
    pub keypoints: usize,
    pub keypoints_correct: usize,
    pub keypoints_correct_and_verified: usize,
    /// Fraction of keypoints predicted within tolerance.
    pub task_accuracy: f64,
    /// Fraction of keypoints both predicted within tolerance and certified.
    pub verified_accuracy: f64,
    /// Mean certification wall time per image, seconds.
    pub mean_time: f64,
}

pub const ARM_ROW_HEADER: [&str; 17] = [
    "arm",
    "rule",
    "rho",
    "lambda_w",
    "spec",
    "seeds",
    "images",
    "holds",
    "violated",
    "unknown",
    "holds_rate",
    "keypoints",
    "keypoints_correct",
    "keypoints_correct_and_verified",
    "task_accuracy",
    "verified_accuracy",
    "mean_time",
];

pub const TABLE_FILES: [&str; 4] = ["table_rule.csv", "table_rho.csv", "table_lambda_w.csv", "accuracy_by_arm.csv"];

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 { 0.0 } else { a as f64 / b as f64 }
}

/// Groups records by (arm, spec). Networks without run metadata form their own
/// arm with rule `unknown`.
pub fn arm_rows(records: &[CampaignRecord], runs: &[RunRecord]) -> Vec<ArmRow> {
    let meta: BTreeMap<&str, &RunRecord> = runs.iter().map(|r| (r.run_id.as_str(), r)).collect();
    let mut groups: BTreeMap<(String, String), (ArmRow, Vec<String>, f64)> = BTreeMap::new();
    let mut order = Vec::new();
    for rec in records {
        let (arm, rule, rho, lambda_w) = match meta.get(rec.net.as_str()) {
            Some(r) => (r.arm.clone(), r.rule.clone(), r.rho, r.lambda_w),
            None => (rec.net.clone(), "unknown".to_string(), f64::NAN, f64::NAN),
        };
        let key = (arm.clone(), rec.spec.clone());
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            (
                ArmRow {
                    arm,
                    rule,
                    rho,
                    lambda_w,
                    spec: rec.spec.clone(),
                    seeds: 0,
                    images: 0,
                    holds: 0,
                    violated: 0,
                    unknown: 0,
                    holds_rate: 0.0,
                    keypoints: 0,
                    keypoints_correct: 0,
                    keypoints_correct_and_verified: 0,
                    task_accuracy: 0.0,
                    verified_accuracy: 0.0,
                    mean_time: 0.0,
                },
                Vec::new(),
                0.0,
            )
        });
        let (row, nets, time) = entry;
        if !nets.contains(&rec.net) {
            nets.push(rec.net.clone());
        }
        row.images += 1;
        match rec.verdict {
            Verdict::Holds => row.holds += 1,
            Verdict::Violated => row.violated += 1,
            Verdict::Unknown => row.unknown += 1,
        }
        row.keypoints += rec.keypoints;
        row.keypoints_correct += rec.keypoints_correct;
        row.keypoints_correct_and_verified += rec.keypoints_correct_and_verified;
        *time += rec.time;
    }
    order
        .into_iter()
        .map(|k| {
            let (mut row, nets, time) = groups.remove(&k).expect("group exists");
            row.seeds = nets.len();
            row.holds_rate = ratio(row.holds, row.images);
            row.task_accuracy = ratio(row.keypoints_correct, row.keypoints);
            row.verified_accuracy = ratio(row.keypoints_correct_and_verified, row.keypoints);
            row.mean_time = time / row.images as f64;
            row
        })
        .collect()
}

/// The four comparison tables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tables {
    /// Unpruned vs random vs USN pruning at the ratios where a random arm exists.
    pub rule: Vec<ArmRow>,
    /// USN pruning across ratios at the reference λ_W, plus the unpruned arm.
    pub rho: Vec<ArmRow>,
    /// USN-pruned arms across (ρ, λ_W).
    pub lambda_w: Vec<ArmRow>,
    pub by_arm: Vec<ArmRow>,
}

fn by_spec_then(rows: &mut [ArmRow]) {
    rows.sort_by(|a, b| {
        a.spec
            .cmp(&b.spec)
            .then(a.rho.total_cmp(&b.rho))
            .then(a.lambda_w.total_cmp(&b.lambda_w))
            .then(a.rule.cmp(&b.rule))
            .then(a.arm.cmp(&b.arm))
    });
}

pub fn tables(rows: &[ArmRow]) -> Tables {
    let random_pairs: Vec<(f64, f64)> = rows.iter().filter(|r| r.rule == "random").map(|r| (r.rho, r.lambda_w)).collect();
    let mut rule: Vec<ArmRow> = rows
        .iter()
        .filter(|r| r.rule == "none" || (matches!(r.rule.as_str(), "usn" | "random") && random_pairs.contains(&(r.rho, r.lambda_w))))
        .cloned()
        .collect();
    by_spec_then(&mut rule);

    let reference = rows.iter().filter(|r| r.rule == "usn").map(|r| r.lambda_w).fold(f64::NAN, f64::max);
    let mut rho: Vec<ArmRow> = rows
        .iter()
        .filter(|r| r.rule == "none" || (r.rule == "usn" && r.lambda_w == reference))
        .cloned()
        .collect();
    by_spec_then(&mut rho);

    let mut lambda_w: Vec<ArmRow> = rows.iter().filter(|r| r.rule == "usn").cloned().collect();
    by_spec_then(&mut lambda_w);

    Tables { rule, rho, lambda_w, by_arm: rows.to_vec() }
}

pub(crate) fn write_csv_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_runs(path: &Path, runs: &[RunRecord]) -> Result<()> {
    write_csv_rows(path, &RUNS_CSV_HEADER, runs)
}

pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<RunRecord>, _>>()?)
}

pub fn write_tables(dir: &Path, t: &Tables) -> Result<()> {
    for (name, rows) in TABLE_FILES.iter().zip([&t.rule, &t.rho, &t.lambda_w, &t.by_arm]) {
        write_csv_rows(&dir.join(name), &ARM_ROW_HEADER, rows)?;
    }
    Ok(())
}

/// Reads `campaign.csv` and `runs.csv` (both optional) from `input` and writes
/// the tables into `output`.
pub fn report_dir(input: &Path, output: &Path) -> Result<Tables> {
    let campaign = input.join("campaign.csv");
    let records = if campaign.exists() { CampaignReport::read_csv(&campaign)? } else { Vec::new() };
    let runs_path = input.join("runs.csv");
    let runs = if runs_path.exists() { read_runs(&runs_path)? } else { Vec::new() };
    fs::create_dir_all(output)?;
    let t = tables(&arm_rows(&records, &runs));
    write_tables(output, &t)?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(net: &str, spec: &str, verdict: Verdict, ok: usize) -> CampaignRecord {
        CampaignRecord {
            net: net.into(),
            image_id: 0,
            spec: spec.into(),
            verdict,
            method: "grid-lipschitz".into(),
            margin: 0.0,
            time: 0.5,
            keypoints: 4,
            keypoints_correct: 4,
            keypoints_verified: ok,
            keypoints_correct_and_verified: ok,
        }
    }

    fn run(id: &str, arm: &str, rule: &str, rho: f64, lw: f64, seed: u64) -> RunRecord {
        RunRecord {
            run_id: id.into(),
            arm: arm.into(),
            rule: rule.into(),
            rho,
            lambda_w: lw,
            seed,
            best_epoch: 1,
            best_val: 0.1,
            diverged_at: None,
            parameters: 10,
            alive_parameters: 8,
            lipschitz: 3.0,
        }
    }

    #[test]
    fn counts_match_raw_lines_and_tables_select_rows() {
        let runs = vec![
            run("none-s0", "none", "none", 0.0, 10.0, 0),
            run("usn-s0", "usn", "usn", 0.2, 10.0, 0),
            run("usn-s1", "usn", "usn", 0.2, 10.0, 1),
            run("usnw0-s0", "usnw0", "usn", 0.2, 0.0, 0),
            run("rnd-s0", "rnd", "random", 0.2, 10.0, 0),
        ];
        let mut records = Vec::new();
        for r in &runs {
            for (k, spec) in ["b", "c"].iter().enumerate() {
                records.push(rec(&r.run_id, spec, Verdict::Holds, 4));
                records.push(rec(&r.run_id, spec, if k == 0 { Verdict::Unknown } else { Verdict::Violated }, 1));
            }
        }
        let rows = arm_rows(&records, &runs);
        let total: usize = rows.iter().map(|r| r.holds + r.violated + r.unknown).sum();
        assert_eq!(total, records.len());
        let usn_b = rows.iter().find(|r| r.arm == "usn" && r.spec == "b").unwrap();
        assert_eq!((usn_b.seeds, usn_b.images, usn_b.holds), (2, 4, 2));
        assert_eq!(usn_b.verified_accuracy, 10.0 / 16.0);
        let t = tables(&rows);
        assert_eq!(t.rule.len(), 6);
        assert!(t.rule.iter().all(|r| r.arm != "usnw0"));
        assert_eq!(t.rho.len(), 4);
        assert_eq!(t.lambda_w.len(), 4);
        assert_eq!(t.by_arm.len(), 8);
    }

    #[test]
    fn empty_directory_gives_header_only_tables() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let t = report_dir(dir.path(), &out).unwrap();
        assert!(t.by_arm.is_empty());
        for name in TABLE_FILES {
            let text = fs::read_to_string(out.join(name)).unwrap();
            assert_eq!(text.trim_end(), ARM_ROW_HEADER.join(","));
        }
    }

    #[test]
    fn runs_roundtrip_with_missing_divergence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.csv");
        let mut r = vec![run("a", "a", "usn", 0.1, 0.0, 3)];
        r.push(RunRecord { diverged_at: Some(4), ..r[0].clone() });
        write_runs(&p, &r).unwrap();
        assert_eq!(read_runs(&p).unwrap(), r);
    }
}
