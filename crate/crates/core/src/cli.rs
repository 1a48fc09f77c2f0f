//! Command-line front end: `gen-data`, `train`, `eval`, `grad-check` and
//! `sweep`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::{gen_dataset, split_per_identity, Record};
use crate::diagnostics::{gradient_suite, GRAD_CHECK_COMPONENTS, GRAD_CHECK_TOLERANCE};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_records, GallerySplit, MetricsReport};
use crate::io::{
    atomic_write, epoch_log_to_string, load_checkpoint, load_dataset_spec, load_run_config, read_dataset,
    read_epoch_log, save_checkpoint, write_dataset, write_json, Checkpoint, RunConfig,
};
use crate::training::{train, EpochLog, TrainState};

#[derive(Debug, Parser)]
#[command(
    name = "minugraph",
    version,
    about = "Graph-neural fingerprint embeddings from minutia sets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic minutia dataset.
    GenData {
        /// Dataset spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint plus an epoch log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Run config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Epoch log path; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed gallery and probes and write verification/indexing metrics.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.001)]
        far: f64,
        /// Comma-separated k values; empty disables indexing.
        #[arg(long, default_value = "1,5,10")]
        topk: String,
        /// Gallery/probe impressions per identity, e.g. `3/1`.
        #[arg(long, default_value = "3/1")]
        gallery_split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of every layer type.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate the analytic gradient of one component.
        #[arg(long, value_name = "COMPONENT")]
        inject_fault: Option<String>,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// CSV table to write.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0.001)]
        far: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    /// Depth of both GCN blocks.
    Layers,
    /// Neighbor count of both graphs.
    Neighbors,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenData { spec, out, seed } => cmd_gen_data(&spec, &out, seed).map(|n| {
            println!("wrote {n} records to {}", out.display());
            0
        }),
        Command::Train {
            data,
            config,
            out,
            resume,
            log,
            seed,
        } => {
            let log = log.unwrap_or_else(|| default_log_path(&out));
            let state = cmd_train(&data, &config, &out, resume.as_deref(), &log, seed)?;
            println!(
                "trained {} epochs ({} steps); checkpoint {}",
                state.epoch,
                state.global_step,
                out.display()
            );
            Ok(0)
        }
        Command::Eval {
            data,
            checkpoint,
            far,
            topk,
            gallery_split,
            out,
        } => {
            let ks = parse_list::<usize>(&topk, "topk")?;
            let split: GallerySplit = gallery_split.parse()?;
            let m = cmd_eval(&data, &checkpoint, far, &ks, split, &out)?;
            println!(
                "TAR@FAR={}: {:.4}  EER: {:.4}  genuine {} impostor {}",
                m.tar_at_far.far, m.tar_at_far.tar, m.eer, m.score_counts.genuine, m.score_counts.impostor
            );
            for (k, acc) in &m.topk {
                println!("top-{k}: {acc:.4}");
            }
            Ok(0)
        }
        Command::GradCheck { seed, inject_fault } => cmd_gradcheck(seed, inject_fault.as_deref()),
        Command::Sweep {
            param,
            values,
            data,
            config,
            out,
            epochs,
            far,
        } => {
            let values = parse_list::<usize>(&values, "values")?;
            let table = cmd_sweep(param, &values, &data, &config, &out, epochs, far)?;
            print!("{table}");
            Ok(0)
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Validation(format!("--{what}: cannot parse {t:?}")))
        })
        .collect()
}

pub fn default_log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

/// Writes the dataset described by `spec`; returns the record count.
pub fn cmd_gen_data(spec: &Path, out: &Path, seed: Option<u64>) -> Result<usize> {
    let mut spec = load_dataset_spec(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let records = gen_dataset(&spec)?;
    write_dataset(out, &records)?;
    Ok(records.len())
}

/// The records a run config trains on.
pub fn training_records(records: &[Record], config: &RunConfig) -> Vec<Record> {
    match config.data.train_impressions {
        Some(n) => split_per_identity(records, n).0,
        None => records.to_vec(),
    }
}

/// Trains per `config`, writing a checkpoint and the epoch log after every
/// epoch. A failure leaves the last completed epoch's files in place.
pub fn cmd_train(
    data: &Path,
    config: &Path,
    out: &Path,
    resume: Option<&Path>,
    log_path: &Path,
    seed: Option<u64>,
) -> Result<TrainState> {
    let mut config = load_run_config(config)?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    let records = training_records(&read_dataset(data)?, &config);
    let (state, mut log) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config.model != config.model {
                return Err(Error::Validation(format!(
                    "{} was trained with a different model config",
                    path.display()
                )));
            }
            let state = ck.train_state()?;
            let log = if log_path.exists() {
                let mut entries = read_epoch_log(log_path)?;
                entries.retain(|e| e.epoch <= state.epoch);
                entries
            } else {
                Vec::new()
            };
            (state, log)
        }
        None => (TrainState::fresh(&config.model, &config.train)?, Vec::new()),
    };
    train_with_files(&records, &config, state, out, log_path, &mut log)
}

fn train_with_files(
    records: &[Record],
    config: &RunConfig,
    state: TrainState,
    out: &Path,
    log_path: &Path,
    log: &mut Vec<EpochLog>,
) -> Result<TrainState> {
    let state = train(records, &config.train, state, |entry, st| {
        log.push(entry.clone());
        save_checkpoint(out, &Checkpoint::from_state(config, st))?;
        atomic_write(log_path, epoch_log_to_string(log).as_bytes())
    })?;
    // zero remaining epochs still leave a checkpoint behind
    save_checkpoint(out, &Checkpoint::from_state(config, &state))?;
    atomic_write(log_path, epoch_log_to_string(log).as_bytes())?;
    Ok(state)
}

pub fn cmd_eval(
    data: &Path,
    checkpoint: &Path,
    far: f64,
    ks: &[usize],
    split: GallerySplit,
    out: &Path,
) -> Result<MetricsReport> {
    if !(far > 0.0 && far <= 1.0) {
        return Err(Error::Validation(format!("--far must be in (0, 1], got {far}")));
    }
    let params = load_checkpoint(checkpoint)?.params()?;
    let records = read_dataset(data)?;
    let report = evaluate_records(&records, &params, split, far, ks)?;
    write_json(out, &report)?;
    Ok(report)
}

/// Prints one line per component; returns exit code 0 when all pass and 2
/// otherwise.
pub fn cmd_gradcheck(seed: u64, fault: Option<&str>) -> Result<i32> {
    if let Some(f) = fault {
        if !GRAD_CHECK_COMPONENTS.contains(&f) {
            return Err(Error::Validation(format!(
                "unknown component {f:?}; expected one of {}",
                GRAD_CHECK_COMPONENTS.join(", ")
            )));
        }
    }
    let reports = gradient_suite(seed, fault)?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        println!(
            "{:<14} max relative error {:.3e} over {} coordinates  {status}",
            r.component, r.report.max_relative_error, r.report.coordinates
        );
    }
    if failed > 0 {
        eprintln!("{failed} component(s) exceed {GRAD_CHECK_TOLERANCE:e}");
        Ok(2)
    } else {
        Ok(0)
    }
}

/// Trains and evaluates one model per value with the same seed; writes and
/// returns a CSV table.
pub fn cmd_sweep(
    param: SweepParam,
    values: &[usize],
    data: &Path,
    config: &Path,
    out: &Path,
    epochs: Option<usize>,
    far: f64,
) -> Result<String> {
    if values.is_empty() {
        return Err(Error::Validation("--values is empty".into()));
    }
    let base = load_run_config(config)?;
    let records = read_dataset(data)?;
    // validate every variant before any training starts
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            match param {
                SweepParam::Layers => {
                    c.model.trm_layers = v;
                    c.model.cam_layers = v;
                }
                SweepParam::Neighbors => {
                    c.model.k_minutia = v;
                    c.model.k_fingerprint = v;
                }
            }
            if let Some(e) = epochs {
                c.train.epochs = e;
            }
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let mut table = String::from("param,value,tar_at_far,eer,top1\n");
    let name = match param {
        SweepParam::Layers => "layers",
        SweepParam::Neighbors => "neighbors",
    };
    for (&v, c) in values.iter().zip(&configs) {
        let train_recs = training_records(&records, c);
        let state = train(&train_recs, &c.train, TrainState::fresh(&c.model, &c.train)?, |_, _| {
            Ok(())
        })?;
        let gallery = c.data.train_impressions.unwrap_or(1);
        let split = GallerySplit {
            gallery,
            probes: usize::MAX - gallery,
        };
        let m = evaluate_records(&records, &state.params, split, far, &[1])?;
        writeln!(table, "{name},{v},{},{},{}", m.tar_at_far.tar, m.eer, m.topk[&1]).expect("writing to a string");
        log::info!("{name}={v}: tar {} eer {}", m.tar_at_far.tar, m.eer);
    }
    atomic_write(out, table.as_bytes())?;
    Ok(table)
}
