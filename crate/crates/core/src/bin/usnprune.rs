//! Command-line front end: dataset generation, training, pruning,
//! certification, reporting and per-neuron statistics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use usnprune::certify::{campaign, NamedNetwork};
use usnprune::data::Dataset;
use usnprune::harness::experiment::load_or_generate;
use usnprune::harness::report::{read_runs, write_runs};
use usnprune::harness::{
    layer_stats, neuron_rows, report_dir, run_experiment, run_id, train_run, write_neuron_csv, write_train_log,
    ExperimentConfig,
};
use usnprune::network::{Checkpoint, Network};
use usnprune::pipeline::{prune_step, random_prune_baseline, ImportanceTracker};
use usnprune::Error;

#[derive(Parser, Debug)]
#[command(name = "usnprune", version, about = "Robustness-aware channel pruning and certification")]
struct Cli {
    /// Experiment configuration (JSON, or TOML with a .toml extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; for `generate` it is the dataset seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset file; defaults to `<out-dir>/dataset.json`, generated from the config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic keypoint dataset to `<out-dir>/dataset.json`.
    Generate,
    /// Train one arm at one seed: checkpoint, epoch log and a row of runs.csv.
    Train {
        #[arg(long)]
        arm: String,
        #[command(flatten)]
        data: DataArg,
    },
    /// One-shot channel pruning of a checkpoint.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rho: f64,
        /// Remove random channels instead of the least stable ones.
        #[arg(long)]
        random: bool,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
    },
    /// Certify checkpoints on the test split: campaign.csv and campaign_summary.json.
    Certify {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArg,
    },
    /// Aggregate campaign.csv (and runs.csv) of a directory into comparison tables.
    Report {
        /// Directory holding the raw campaign; defaults to the output directory.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Per-neuron deviation statistics of checkpoints: neurons.csv.
    Visualize {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArg,
    },
    /// Every arm at every seed, end to end.
    Experiment,
}

/// Failures split by exit status.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Toml(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display()))),
    }
}

fn dataset(cfg: &ExperimentConfig, out_dir: &Path, arg: &DataArg) -> Result<Dataset, Failure> {
    let path = arg.dataset.clone().unwrap_or_else(|| out_dir.join("dataset.json"));
    if path.exists() {
        Ok(Dataset::load(&path)?)
    } else if arg.dataset.is_some() {
        Err(Failure::Usage(format!("dataset {} not found", path.display())))
    } else {
        Ok(load_or_generate(cfg)?)
    }
}

fn load_checkpoint(path: &Path) -> Result<(String, Network), Failure> {
    let ck = Checkpoint::load(path)?;
    let name = ck
        .metadata
        .get("run_id")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_else(|| path.file_stem().unwrap_or_default().to_string_lossy().into_owned());
    Ok((name, ck.into_network()?))
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let mut cfg = load_config(cli.config.as_deref())?;
    let out = cli.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(Error::from)?;

    match cli.command {
        Command::Generate => {
            if let Some(s) = cli.seed {
                cfg.dataset.seed = s;
            }
            let data = load_or_generate(&cfg)?;
            let path = out.join("dataset.json");
            data.save(&path)?;
            println!("{} ({} / {} / {} images, sha256 {})", path.display(), data.train.len(), data.val.len(), data.test.len(), data.checksum());
        }
        Command::Train { arm, data } => {
            let arm = cfg.arm(&arm)?.clone();
            let seed = cli.seed.unwrap_or(cfg.seeds[0]);
            let data = dataset(&cfg, out, &data)?;
            let run = train_run(&cfg, &data, &arm, seed)?;
            let id = run_id(&arm.name, seed);
            std::fs::create_dir_all(out.join("checkpoints")).map_err(Error::from)?;
            std::fs::create_dir_all(out.join("logs")).map_err(Error::from)?;
            let mut ck = run.net.to_checkpoint();
            ck.metadata.insert("run_id".into(), id.clone().into());
            ck.metadata.insert("arm".into(), arm.name.clone().into());
            ck.metadata.insert("seed".into(), seed.into());
            ck.metadata.insert("dataset_checksum".into(), data.checksum().into());
            let ck_path = out.join("checkpoints").join(format!("{id}.json"));
            ck.save(&ck_path)?;
            write_train_log(&out.join("logs").join(format!("{id}.csv")), &run.log)?;
            let runs_path = out.join("runs.csv");
            let mut runs = if runs_path.exists() { read_runs(&runs_path)? } else { Vec::new() };
            runs.retain(|r| r.run_id != id);
            runs.push(run.record.clone());
            write_runs(&runs_path, &runs)?;
            println!(
                "{}: best epoch {} (val {:.5}), {} of {} parameters alive",
                ck_path.display(),
                run.record.best_epoch,
                run.record.best_val,
                run.record.alive_parameters,
                run.record.parameters
            );
        }
        Command::Prune { checkpoint, rho, random, output, data } => {
            let (name, mut net) = load_checkpoint(&checkpoint)?;
            let layers = cfg.train.prune_layers.clone();
            let outcome = if random {
                let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
                random_prune_baseline(&mut net, &layers, rho, &mut rng)?
            } else {
                let data = dataset(&cfg, out, &data)?;
                let stats = layer_stats(
                    &net,
                    &data.train,
                    &cfg.train.perturbations,
                    cfg.train.samples_per_image,
                    cli.seed.unwrap_or(0),
                )?;
                let mut tracker = ImportanceTracker::new(&net, &layers)?;
                let picked: Vec<_> = layers.iter().map(|&i| stats[i - 1].clone()).collect();
                tracker.record(&picked)?;
                let scores = tracker.channel_scores(&net, cfg.train.weights.eps_usn)?;
                prune_step(&mut net, &layers, &scores, rho, cfg.train.order)?
            };
            let path = output.unwrap_or_else(|| out.join(format!("{name}-pruned.json")));
            let mut ck = net.to_checkpoint();
            ck.metadata.insert("run_id".into(), format!("{name}-pruned").into());
            ck.metadata.insert("rho".into(), rho.into());
            ck.save(&path)?;
            println!("{}: removed {:?} channels in layers {:?}", path.display(), outcome.newly_pruned, outcome.layers);
        }
        Command::Certify { checkpoint, data } => {
            let data = dataset(&cfg, out, &data)?;
            let loaded: Vec<(String, Network)> = checkpoint
                .iter()
                .map(|p| {
                    let (name, net) = load_checkpoint(p)?;
                    Ok((name, net.compact()?))
                })
                .collect::<Result<_, Failure>>()?;
            let named: Vec<NamedNetwork<'_>> = loaded.iter().map(|(n, net)| NamedNetwork { name: n, net }).collect();
            let c = &cfg.certify;
            let report = campaign(&named, &data.test, &c.specs, &c.criterion, &c.campaign)?;
            report.write_csv(&out.join("campaign.csv"))?;
            report.write_summary_json(&out.join("campaign_summary.json"))?;
            println!("{} records written to {}", report.records.len(), out.join("campaign.csv").display());
        }
        Command::Report { input } => {
            let input = input.unwrap_or_else(|| out.to_path_buf());
            if !input.is_dir() {
                return Err(Failure::Usage(format!("{} is not a directory", input.display())));
            }
            let t = report_dir(&input, out)?;
            println!("{} (arm, perturbation) rows written to {}", t.by_arm.len(), out.display());
        }
        Command::Visualize { checkpoint, data } => {
            let data = dataset(&cfg, out, &data)?;
            let v = &cfg.visualize;
            let images = &data.test[..v.images.min(data.test.len())];
            let mut rows = Vec::new();
            for p in &checkpoint {
                let (name, net) = load_checkpoint(p)?;
                let stats = layer_stats(&net, images, &cfg.certify.specs, v.samples_per_image, v.seed)?;
                let seed = Checkpoint::load(p)?.metadata.get("seed").and_then(|s| s.as_u64()).unwrap_or(0);
                let mut r = neuron_rows(&net, &stats, &name, &name, seed)?;
                r.retain(|row| cfg.train.prune_layers.contains(&row.layer));
                rows.extend(r);
            }
            write_neuron_csv(&out.join("neurons.csv"), &rows)?;
            println!("{} neuron rows written to {}", rows.len(), out.join("neurons.csv").display());
        }
        Command::Experiment => {
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            let res = run_experiment(&cfg, Some(out))?;
            for arm in &cfg.arms {
                println!(
                    "{:<20} verified accuracy {:.4}  mean time {:.4}s",
                    arm.name,
                    res.verified_accuracy(&arm.name)?,
                    res.mean_time(&arm.name)?
                );
            }
        }
    }
    Ok(())
}
