//! Run configuration and the on-disk formats: datasets (JSON lines),
//! checkpoints, metrics documents and epoch logs (JSON).
//!
//! Every file is written to a temporary sibling first and renamed into
//! place, so readers never observe a partial file.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, Record};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterSet};
use crate::numeric::{Matrix, RunningStats};
use crate::rng;
use crate::training::{EpochLog, OptimizerState, TrainConfig, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Impressions per identity used for training (first by impression id);
    /// `None` trains on everything.
    pub train_impressions: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_impressions: Some(3),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.train_impressions.is_some_and(|n| n < 2) {
            return Err(Error::Validation(
                "data.train_impressions must be at least 2 so identities have positives".into(),
            ));
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_json<T: DeserializeOwned>(text: &str, context: impl Into<String>) -> Result<T> {
    serde_json::from_str(text).map_err(|source| Error::Json {
        context: context.into(),
        source,
    })
}

fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("plain data serializes");
    out.push(b'\n');
    out
}

/// Config parse failures are the caller's fault, so they surface as
/// validation errors.
fn parse_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = parse_config(path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_dataset_spec(path: &Path) -> Result<DatasetSpec> {
    let spec: DatasetSpec = parse_config(path)?;
    spec.validate()?;
    Ok(spec)
}

pub fn dataset_to_string(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, records: &[Record]) -> Result<()> {
    atomic_write(path, dataset_to_string(records).as_bytes())
}

pub fn parse_dataset(text: &str, source: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_json(l, format!("{source} line {}", i + 1)))
        .collect()
}

pub fn read_dataset(path: &Path) -> Result<Vec<Record>> {
    parse_dataset(&read_text(path)?, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    /// `[rows, cols]`.
    pub shape: [usize; 2],
    /// Row-major.
    pub values: Vec<f64>,
}

impl NamedArray {
    fn new(name: &str, m: &Matrix) -> Self {
        NamedArray {
            name: name.to_string(),
            shape: [m.rows(), m.cols()],
            values: m.values().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_vec(self.shape[0], self.shape[1], self.values.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub weight_decay: f64,
    pub first_moment: Vec<NamedArray>,
    pub second_moment: Vec<NamedArray>,
}

/// Self-describing model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub parameters: Vec<NamedArray>,
    pub running_stats: Vec<NamedStats>,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn from_params(config: &RunConfig, params: &ParameterSet) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: RunConfig {
                model: params.config.clone(),
                ..config.clone()
            },
            parameters: params
                .named_tensors()
                .iter()
                .map(|(n, m)| NamedArray::new(n, m))
                .collect(),
            running_stats: params
                .named_stats()
                .iter()
                .map(|(n, s)| NamedStats {
                    name: n.clone(),
                    mean: s.mean.clone(),
                    var: s.var.clone(),
                })
                .collect(),
            epoch: 0,
            global_step: 0,
            optimizer: None,
        }
    }

    pub fn from_state(config: &RunConfig, state: &TrainState) -> Self {
        let names: Vec<String> = state.params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let named =
            |ms: &[Matrix]| -> Vec<NamedArray> { names.iter().zip(ms).map(|(n, m)| NamedArray::new(n, m)).collect() };
        Checkpoint {
            epoch: state.epoch,
            global_step: state.global_step,
            optimizer: Some(OptimizerSnapshot {
                step: state.optimizer.step,
                weight_decay: state.optimizer.weight_decay,
                first_moment: named(&state.optimizer.first_moment),
                second_moment: named(&state.optimizer.second_moment),
            }),
            ..Checkpoint::from_params(config, &state.params)
        }
    }

    /// Rebuilds the parameter set, checking names and shapes against the
    /// stored model config.
    pub fn params(&self) -> Result<ParameterSet> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        self.config.validate()?;
        let mut params = ParameterSet::init_with(&self.config.model, &mut rng::stream(0, 0));
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.parameters.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} parameter arrays, config implies {}",
                self.parameters.len(),
                names.len()
            )));
        }
        for ((slot, name), stored) in params.tensors_mut().into_iter().zip(&names).zip(&self.parameters) {
            if &stored.name != name {
                return Err(Error::Validation(format!(
                    "checkpoint array {} where {name} was expected",
                    stored.name
                )));
            }
            let m = stored.to_matrix()?;
            if m.shape() != slot.shape() {
                return Err(Error::Validation(format!(
                    "{name} has shape {:?}, config implies {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
        }
        let stat_names: Vec<String> = params.named_stats().into_iter().map(|(n, _)| n).collect();
        if stat_names.len() != self.running_stats.len() {
            return Err(Error::Validation(
                "checkpoint running statistics do not match the config".into(),
            ));
        }
        for ((slot, name), stored) in params.stats_mut().into_iter().zip(&stat_names).zip(&self.running_stats) {
            if &stored.name != name || stored.mean.len() != slot.channels() || stored.var.len() != slot.channels() {
                return Err(Error::Validation(format!(
                    "running statistics {} do not match {name}",
                    stored.name
                )));
            }
            *slot = RunningStats {
                mean: stored.mean.clone(),
                var: stored.var.clone(),
            };
        }
        Ok(params)
    }

    /// Parameters plus optimizer state for resuming.
    pub fn train_state(&self) -> Result<TrainState> {
        let params = self.params()?;
        let Some(opt) = &self.optimizer else {
            return Err(Error::Validation(
                "checkpoint carries no optimizer state to resume".into(),
            ));
        };
        let unnamed = |v: &[NamedArray]| v.iter().map(NamedArray::to_matrix).collect::<Result<Vec<_>>>();
        let optimizer = OptimizerState {
            step: opt.step,
            weight_decay: opt.weight_decay,
            first_moment: unnamed(&opt.first_moment)?,
            second_moment: unnamed(&opt.second_moment)?,
        };
        optimizer.validate(params.named_tensors().into_iter().map(|(_, m)| m))?;
        Ok(TrainState {
            params,
            optimizer,
            epoch: self.epoch,
            global_step: self.global_step,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        to_json_pretty(self)
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::InvalidInput(format!("{source}: not UTF-8: {e}")))?;
        // look at the version before the full schema so old files get a
        // version error rather than a field error
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header = parse_json(text, source)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: header.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        parse_json(text, source)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    atomic_write(path, &checkpoint.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, &to_json_pretty(value))
}

pub fn epoch_log_to_string(entries: &[EpochLog]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_json(l, format!("{} line {}", path.display(), i + 1)))
        .collect()
}
