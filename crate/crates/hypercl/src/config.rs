//! Experiment configuration: model/scenario/dataset vocabulary, training
//! hyperparameters, and the flat `key=value` config format with CLI-flag
//! overrides (flags win; unknown keys are hard errors).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Continual-learning protocol.
///
/// CL1 supplies the task id at test time (one head per task). CL2 shares a
/// single head across tasks with no id. CL3 is multi-head with no id; the
/// task is inferred from predictive entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Cl1,
    Cl2,
    Cl3,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cl1" => Ok(Scenario::Cl1),
            "cl2" => Ok(Scenario::Cl2),
            "cl3" => Ok(Scenario::Cl3),
            _ => Err(Error::config(format!("unknown scenario '{s}'"))),
        }
    }

    pub fn shared_head(&self) -> bool {
        matches!(self, Scenario::Cl2)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::Cl1 => "cl1",
            Scenario::Cl2 => "cl2",
            Scenario::Cl3 => "cl3",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Hnet,
    HnetIwr,
    LstmNet,
    LstmNetIwr,
    LstmNetGrow,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hnet" => Ok(ModelKind::Hnet),
            "hnet_iwr" => Ok(ModelKind::HnetIwr),
            "lstm_net" => Ok(ModelKind::LstmNet),
            "lstm_net_iwr" => Ok(ModelKind::LstmNetIwr),
            "lstm_net_grow" => Ok(ModelKind::LstmNetGrow),
            _ => Err(Error::config(format!("unknown model '{s}'"))),
        }
    }

    /// The regularizer each model trains with.
    pub fn regularizer(&self) -> RegKind {
        match self {
            ModelKind::Hnet | ModelKind::LstmNet => RegKind::Snapshot,
            ModelKind::HnetIwr | ModelKind::LstmNetIwr => RegKind::Iwr,
            ModelKind::LstmNetGrow => RegKind::None,
        }
    }

    pub fn is_grow(&self) -> bool {
        matches!(self, ModelKind::LstmNetGrow)
    }

    /// True for the feed-forward chunked generator (chunks independent).
    pub fn is_feedforward(&self) -> bool {
        matches!(self, ModelKind::Hnet | ModelKind::HnetIwr)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Hnet => "hnet",
            ModelKind::HnetIwr => "hnet_iwr",
            ModelKind::LstmNet => "lstm_net",
            ModelKind::LstmNetIwr => "lstm_net_iwr",
            ModelKind::LstmNetGrow => "lstm_net_grow",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegKind {
    Snapshot,
    Iwr,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    SplitMnist,
    PermutedMnist,
    Synth,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "split_mnist" => Ok(DatasetKind::SplitMnist),
            "permuted_mnist" => Ok(DatasetKind::PermutedMnist),
            "synth" => Ok(DatasetKind::Synth),
            _ => Err(Error::config(format!("unknown dataset '{s}'"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetKind::SplitMnist => "split_mnist",
            DatasetKind::PermutedMnist => "permuted_mnist",
            DatasetKind::Synth => "synth",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Adam,
    Sgd,
}

impl OptKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptKind::Adam),
            "sgd" => Ok(OptKind::Sgd),
            _ => Err(Error::config(format!("unknown optimizer '{s}'"))),
        }
    }
}

/// Per-run training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub regularizer: RegKind,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub chunk_size: usize,
    pub seed: u64,
    pub lr: f64,
    /// Learning rate for the current task embedding; falls back to `lr`.
    /// The embedding only shapes the current task's generated weights, so a
    /// faster rate buys plasticity without disturbing earlier tasks.
    pub emb_lr: Option<f64>,
    /// Cosine-decays all learning rates to zero over each task's steps.
    /// The schedule restarts with every task, matching the per-task
    /// optimizer reset.
    pub lr_decay: bool,
    pub optimizer: OptKind,
    pub d_e: usize,
    pub d_c: usize,
    pub d_h: usize,
    pub fisher_samples: usize,
    /// Enables standard LSTM gate biases (forget bias 1.0). Off by default;
    /// the generator equations carry no bias terms.
    pub lstm_biases: bool,
    /// Initializes each new task embedding from the previous task's learned
    /// embedding instead of a fresh random draw. Ignored for GROW (which
    /// keeps its own warm-start scheme for the per-task weights).
    pub emb_warm_start: bool,
    /// Carries optimizer moments across task boundaries instead of starting
    /// each task fresh. The second-moment estimates act as a preconditioner
    /// that took most of a task to warm up; keeping them speeds up fitting
    /// later tasks. Ignored for GROW, whose per-task weights need clean
    /// state.
    pub persist_optimizer: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::config("beta must be >= 0"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.chunk_size < 1 || self.batch_size < 1 {
            return Err(Error::config("chunk_size and batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// One experiment cell grid: (model, scenario, dataset) across seeds.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub scenario: Scenario,
    pub dataset: DatasetKind,
    pub seeds: Vec<u64>,
    pub beta: f64,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub chunk_size: usize,
    pub lr: f64,
    pub emb_lr: Option<f64>,
    pub lr_decay: bool,
    pub optimizer: OptKind,
    pub d_e: usize,
    pub d_c: usize,
    pub d_h: usize,
    pub hidden: Vec<usize>,
    pub n_tasks: Option<usize>,
    pub fisher_samples: usize,
    pub lstm_biases: bool,
    pub emb_warm_start: bool,
    pub persist_optimizer: bool,
    pub synth_dim: usize,
    pub synth_classes: usize,
    pub synth_separation: f64,
    pub synth_n_per_class: usize,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// Env var naming the dataset root (MNIST IDX files live under it).
pub const DATA_DIR_ENV: &str = "HYPERCL_DATA_DIR";

impl ExperimentConfig {
    pub fn effective_epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.dataset {
            DatasetKind::SplitMnist => 4,
            DatasetKind::PermutedMnist => 2,
            DatasetKind::Synth => 3,
        })
    }

    pub fn effective_n_tasks(&self) -> usize {
        self.n_tasks.unwrap_or(match self.dataset {
            DatasetKind::SplitMnist => 5,
            DatasetKind::PermutedMnist => 10,
            DatasetKind::Synth => 6,
        })
    }

    /// Dataset root: explicit config beats the env var.
    pub fn resolve_data_dir(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            model: self.model,
            regularizer: self.model.regularizer(),
            beta: self.beta,
            epochs: self.effective_epochs(),
            batch_size: self.batch_size,
            chunk_size: self.chunk_size,
            seed,
            lr: self.lr,
            emb_lr: self.emb_lr,
            lr_decay: self.lr_decay,
            optimizer: self.optimizer,
            d_e: self.d_e,
            d_c: self.d_c,
            d_h: self.d_h,
            fisher_samples: self.fisher_samples,
            lstm_biases: self.lstm_biases,
            emb_warm_start: self.emb_warm_start,
            persist_optimizer: self.persist_optimizer,
        }
    }

    /// Serializes the resolved config back to the flat format; a run is
    /// reproducible from this file alone.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("model", self.model.to_string());
        kv("scenario", self.scenario.to_string());
        kv("dataset", self.dataset.to_string());
        kv(
            "seeds",
            self.seeds
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("beta", format!("{:e}", self.beta));
        kv("epochs", self.effective_epochs().to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("chunk_size", self.chunk_size.to_string());
        kv("lr", format!("{:e}", self.lr));
        if let Some(e) = self.emb_lr {
            kv("emb_lr", format!("{e:e}"));
        }
        kv("lr_decay", self.lr_decay.to_string());
        kv(
            "optimizer",
            match self.optimizer {
                OptKind::Adam => "adam".into(),
                OptKind::Sgd => "sgd".into(),
            },
        );
        kv("d_e", self.d_e.to_string());
        kv("d_c", self.d_c.to_string());
        kv("d_h", self.d_h.to_string());
        kv(
            "hidden",
            self.hidden
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("n_tasks", self.effective_n_tasks().to_string());
        kv("fisher_samples", self.fisher_samples.to_string());
        kv("lstm_biases", self.lstm_biases.to_string());
        kv("emb_warm_start", self.emb_warm_start.to_string());
        kv("persist_optimizer", self.persist_optimizer.to_string());
        kv("synth_dim", self.synth_dim.to_string());
        kv("synth_classes", self.synth_classes.to_string());
        kv("synth_separation", format!("{:e}", self.synth_separation));
        kv("synth_n_per_class", self.synth_n_per_class.to_string());
        if let Some(d) = &self.data_dir {
            kv("data_dir", d.display().to_string());
        }
        kv("out", self.out_dir.display().to_string());
        s
    }
}

const KNOWN_KEYS: &[&str] = &[
    "model",
    "scenario",
    "dataset",
    "seeds",
    "beta",
    "epochs",
    "batch_size",
    "chunk_size",
    "lr",
    "emb_lr",
    "lr_decay",
    "optimizer",
    "d_e",
    "d_c",
    "d_h",
    "hidden",
    "n_tasks",
    "fisher_samples",
    "lstm_biases",
    "emb_warm_start",
    "persist_optimizer",
    "synth_dim",
    "synth_classes",
    "synth_separation",
    "synth_n_per_class",
    "data_dir",
    "out",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("key '{key}': cannot parse value '{v}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| parse_num(key, p.trim()))
        .collect::<Result<Vec<_>>>()
        .and_then(|list| {
            if list.is_empty() {
                Err(Error::config(format!("key '{key}': empty list")))
            } else {
                Ok(list)
            }
        })
}

/// Parses a config file plus flag overrides into an [`ExperimentConfig`].
///
/// Both sources use flat `key=value` pairs; overrides are applied last.
/// `model`, `scenario`, and `dataset` are required; everything else has
/// the documented defaults.
pub fn parse_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    for (k, v) in overrides {
        map.insert(k.clone(), v.clone());
    }

    for key in map.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::config(format!("unknown key '{key}'")));
        }
    }

    let require = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::config(format!("missing required key '{k}'")))
    };

    let model = ModelKind::parse(require("model")?)?;
    let scenario = Scenario::parse(require("scenario")?)?;
    let dataset = DatasetKind::parse(require("dataset")?)?;

    let config = ExperimentConfig {
        model,
        scenario,
        dataset,
        seeds: match map.get("seeds") {
            Some(v) => parse_list("seeds", v)?,
            None => vec![1],
        },
        beta: map.get("beta").map_or(Ok(0.01), |v| parse_num("beta", v))?,
        epochs: map
            .get("epochs")
            .map(|v| parse_num("epochs", v))
            .transpose()?,
        batch_size: map
            .get("batch_size")
            .map_or(Ok(128), |v| parse_num("batch_size", v))?,
        chunk_size: map
            .get("chunk_size")
            .map_or(Ok(2000), |v| parse_num("chunk_size", v))?,
        lr: map.get("lr").map_or(Ok(1e-3), |v| parse_num("lr", v))?,
        emb_lr: map
            .get("emb_lr")
            .map(|v| parse_num("emb_lr", v))
            .transpose()?,
        lr_decay: map
            .get("lr_decay")
            .map_or(Ok(false), |v| parse_num("lr_decay", v))?,
        optimizer: map
            .get("optimizer")
            .map_or(Ok(OptKind::Adam), |v| OptKind::parse(v))?,
        d_e: map.get("d_e").map_or(Ok(96), |v| parse_num("d_e", v))?,
        d_c: map.get("d_c").map_or(Ok(96), |v| parse_num("d_c", v))?,
        d_h: map.get("d_h").map_or(Ok(64), |v| parse_num("d_h", v))?,
        hidden: match map.get("hidden") {
            Some(v) => parse_list("hidden", v)?,
            None => vec![400, 400],
        },
        n_tasks: map
            .get("n_tasks")
            .map(|v| parse_num("n_tasks", v))
            .transpose()?,
        fisher_samples: map
            .get("fisher_samples")
            .map_or(Ok(2000), |v| parse_num("fisher_samples", v))?,
        lstm_biases: map
            .get("lstm_biases")
            .map_or(Ok(false), |v| parse_num("lstm_biases", v))?,
        emb_warm_start: map
            .get("emb_warm_start")
            .map_or(Ok(false), |v| parse_num("emb_warm_start", v))?,
        persist_optimizer: map
            .get("persist_optimizer")
            .map_or(Ok(false), |v| parse_num("persist_optimizer", v))?,
        synth_dim: map
            .get("synth_dim")
            .map_or(Ok(20), |v| parse_num("synth_dim", v))?,
        synth_classes: map
            .get("synth_classes")
            .map_or(Ok(5), |v| parse_num("synth_classes", v))?,
        synth_separation: map
            .get("synth_separation")
            .map_or(Ok(3.0), |v| parse_num("synth_separation", v))?,
        synth_n_per_class: map
            .get("synth_n_per_class")
            .map_or(Ok(500), |v| parse_num("synth_n_per_class", v))?,
        data_dir: map.get("data_dir").map(PathBuf::from),
        out_dir: map
            .get("out")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("out")),
    };

    if config.seeds.is_empty() {
        return Err(Error::config("seeds must be non-empty"));
    }
    config.train_config(config.seeds[0]).validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let f = write_tmp("model=lstm_net\nscenario=cl1\ndataset=split_mnist\n");
        let cfg = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg.beta, 0.01);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.effective_epochs(), 4);
        assert_eq!(cfg.effective_n_tasks(), 5);
        assert_eq!(cfg.hidden, vec![400, 400]);
        assert_eq!(cfg.d_e, 96);
        assert_eq!(cfg.d_h, 64);
        assert_eq!(cfg.seeds, vec![1]);
    }

    #[test]
    fn flag_overrides_beat_file_values() {
        let f = write_tmp("model=lstm_net\nscenario=cl1\ndataset=split_mnist\nbeta=0.01\n");
        let cfg = parse_config(
            Some(f.path()),
            &[("beta".to_string(), "0.1".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.beta, 0.1);
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let f = write_tmp("model=lstm_net\nscenario=cl1\ndataset=split_mnist\nbetaa=0.1\n");
        let err = parse_config(Some(f.path()), &[]).unwrap_err().to_string();
        assert!(err.contains("betaa"), "{err}");
    }

    #[test]
    fn missing_required_key_is_named() {
        let f = write_tmp("model=lstm_net\nscenario=cl1\n");
        let err = parse_config(Some(f.path()), &[]).unwrap_err().to_string();
        assert!(err.contains("dataset"), "{err}");
    }

    #[test]
    fn grow_model_disables_regularizer() {
        assert_eq!(ModelKind::LstmNetGrow.regularizer(), RegKind::None);
        assert_eq!(ModelKind::LstmNetIwr.regularizer(), RegKind::Iwr);
        assert_eq!(ModelKind::LstmNet.regularizer(), RegKind::Snapshot);
    }
}
