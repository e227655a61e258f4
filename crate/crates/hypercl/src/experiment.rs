//! Experiment orchestration: builds the task stream, trains a learner per
//! seed, evaluates after every task, and writes the run artifacts.
//!
//! Output layout under the configured `out` directory:
//!
//! ```text
//! out/
//!   summary.csv            mean and sample std across seeds
//!   seed_<s>/
//!     config.txt           resolved configuration, replayable
//!     train_log.tsv        per-epoch loss averages
//!     metrics.csv          accuracy matrix, one row per (stage, task)
//!     run_summary.csv      this seed's aggregate metrics
//!     model.ckpt           final checkpoint
//!     FAILED               present (with the error) only if the run died
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::save_learner;
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{load_mnist, permuted_tasks, split_tasks, synth_tasks, SynthSpec, TaskSet};
use crate::error::{Error, Result};
use crate::eval::{compression_ratio, evaluate_task, MetricsRecord};
use crate::trainer::{format_train_log, Learner};

/// The task sequence one seed trains on.
pub struct TaskStream {
    tasks: Vec<TaskSet>,
    pub input_dim: usize,
    pub n_classes: usize,
}

impl TaskStream {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn get(&self, t: usize) -> &TaskSet {
        &self.tasks[t]
    }
}

/// Materializes the dataset named by the config for one seed.
pub fn build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<TaskStream> {
    let n_tasks = cfg.effective_n_tasks();
    match cfg.dataset {
        DatasetKind::SplitMnist | DatasetKind::PermutedMnist => {
            let dir = cfg.resolve_data_dir().ok_or_else(|| {
                Error::config(format!(
                    "no dataset directory: set data_dir or the {} env var",
                    crate::config::DATA_DIR_ENV
                ))
            })?;
            let (train, test) = load_mnist(&dir)?;
            let (tasks, n_classes) = match cfg.dataset {
                DatasetKind::SplitMnist => (split_tasks(&train, &test), 2),
                _ => (permuted_tasks(&train, &test, n_tasks, 10, seed)?, 10),
            };
            Ok(TaskStream {
                tasks,
                input_dim: 784,
                n_classes,
            })
        }
        DatasetKind::Synth => {
            let spec = SynthSpec {
                n_tasks,
                dim: cfg.synth_dim,
                n_classes: cfg.synth_classes,
                per_class: cfg.synth_n_per_class,
                separation: cfg.synth_separation,
            };
            Ok(TaskStream {
                tasks: synth_tasks(spec, seed)?,
                input_dim: cfg.synth_dim,
                n_classes: cfg.synth_classes,
            })
        }
    }
}

/// Aggregate metrics of one finished seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub avg_accuracy: f64,
    pub avg_forgetting: f64,
    pub compression_ratio: f64,
    pub metrics: MetricsRecord,
}

fn metrics_csv(cfg: &ExperimentConfig, metrics: &MetricsRecord) -> String {
    let mut s = String::from("model,scenario,stage,eval_task,accuracy\n");
    for (stage, row) in metrics.acc.iter().enumerate() {
        for (task, acc) in row.iter().enumerate() {
            writeln!(
                s,
                "{},{},{stage},{task},{acc:.6}",
                cfg.model, cfg.scenario
            )
            .unwrap();
        }
    }
    s
}

fn run_summary_csv(cfg: &ExperimentConfig, r: &SeedResult) -> String {
    format!(
        "model,scenario,dataset,seed,avg_accuracy,avg_forgetting,compression_ratio\n\
         {},{},{},{},{:.6},{:.6},{:.6}\n",
        cfg.model, cfg.scenario, cfg.dataset, r.seed, r.avg_accuracy, r.avg_forgetting,
        r.compression_ratio
    )
}

/// Trains and evaluates one seed end to end, writing its run directory.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, run_dir: &Path) -> Result<SeedResult> {
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join("config.txt"), cfg.to_key_values())?;

    let stream = build_stream(cfg, seed)?;
    let mut learner = Learner::new(
        cfg.train_config(seed),
        cfg.scenario,
        stream.input_dim,
        &cfg.hidden,
        stream.n_classes,
        stream.n_tasks(),
    )?;

    let mut metrics = MetricsRecord::default();
    let mut log = Vec::new();
    for t in 0..stream.n_tasks() {
        log.extend(learner.train_task(t, stream.get(t))?);
        let mut row = Vec::with_capacity(t + 1);
        for past in 0..=t {
            row.push(evaluate_task(
                &learner,
                t + 1,
                past,
                &stream.get(past).test,
            )?);
        }
        metrics.push_stage(row);
        // keep artifacts current so long runs can be inspected mid-flight
        std::fs::write(run_dir.join("train_log.tsv"), format_train_log(&log))?;
        std::fs::write(run_dir.join("metrics.csv"), metrics_csv(cfg, &metrics))?;
    }

    let result = SeedResult {
        seed,
        avg_accuracy: metrics.average_accuracy(),
        avg_forgetting: metrics.average_forgetting(),
        compression_ratio: compression_ratio(&learner),
        metrics,
    };
    std::fs::write(run_dir.join("run_summary.csv"), run_summary_csv(cfg, &result))?;
    save_learner(&run_dir.join("model.ckpt"), &learner)?;
    Ok(result)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row of summary.csv.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub model: String,
    pub scenario: String,
    pub dataset: String,
    pub n_seeds: usize,
    pub avg_accuracy: (f64, f64),
    pub avg_forgetting: (f64, f64),
    pub compression_ratio: f64,
}

pub const SUMMARY_HEADER: &str = "model,scenario,dataset,n_seeds,avg_accuracy_mean,\
avg_accuracy_std,avg_forgetting_mean,avg_forgetting_std,compression_ratio";

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.model,
            r.scenario,
            r.dataset,
            r.n_seeds,
            r.avg_accuracy.0,
            r.avg_accuracy.1,
            r.avg_forgetting.0,
            r.avg_forgetting.1,
            r.compression_ratio
        )
        .unwrap();
    }
    s
}

fn summarize(cfg: &ExperimentConfig, results: &[SeedResult]) -> SummaryRow {
    let accs: Vec<f64> = results.iter().map(|r| r.avg_accuracy).collect();
    let fgs: Vec<f64> = results.iter().map(|r| r.avg_forgetting).collect();
    SummaryRow {
        model: cfg.model.to_string(),
        scenario: cfg.scenario.to_string(),
        dataset: cfg.dataset.to_string(),
        n_seeds: results.len(),
        avg_accuracy: mean_std(&accs),
        avg_forgetting: mean_std(&fgs),
        compression_ratio: results[0].compression_ratio,
    }
}

/// Runs every configured seed and writes `summary.csv`. A seed that dies
/// leaves a `FAILED` file with the error text in its run directory before
/// the error propagates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedResult>> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run_dir = cfg.out_dir.join(format!("seed_{seed}"));
        match run_seed(cfg, seed, &run_dir) {
            Ok(r) => results.push(r),
            Err(e) => {
                let _ = std::fs::create_dir_all(&run_dir);
                let _ = std::fs::write(run_dir.join("FAILED"), e.to_string());
                return Err(e);
            }
        }
    }
    let summary = summarize(cfg, &results);
    std::fs::write(
        cfg.out_dir.join("summary.csv"),
        format_summary(std::slice::from_ref(&summary)),
    )?;
    Ok(results)
}

fn parse_run_summary(path: &Path) -> Result<(String, String, String, u64, f64, f64, f64)> {
    let text = std::fs::read_to_string(path)?;
    let line = text
        .lines()
        .nth(1)
        .ok_or_else(|| Error::config(format!("{}: missing data row", path.display())))?;
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 7 {
        return Err(Error::config(format!(
            "{}: expected 7 fields, got {}",
            path.display(),
            fields.len()
        )));
    }
    let num = |i: usize| -> Result<f64> {
        fields[i]
            .parse()
            .map_err(|_| Error::config(format!("{}: bad number '{}'", path.display(), fields[i])))
    };
    Ok((
        fields[0].to_string(),
        fields[1].to_string(),
        fields[2].to_string(),
        fields[3]
            .parse()
            .map_err(|_| Error::config(format!("{}: bad seed", path.display())))?,
        num(4)?,
        num(5)?,
        num(6)?,
    ))
}

/// Rebuilds `summary.csv` from the per-seed `run_summary.csv` files under
/// `in_dir` and returns the summary text. Seeds are grouped by
/// (model, scenario, dataset).
pub fn report(in_dir: &Path) -> Result<String> {
    let mut per_seed: Vec<(String, String, String, u64, f64, f64, f64)> = Vec::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(in_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let rs = dir.join("run_summary.csv");
        if rs.exists() {
            per_seed.push(parse_run_summary(&rs)?);
        }
    }
    if per_seed.is_empty() {
        return Err(Error::config(format!(
            "no run_summary.csv files under {}",
            in_dir.display()
        )));
    }

    let mut groups: Vec<(String, String, String)> = Vec::new();
    for row in &per_seed {
        let key = (row.0.clone(), row.1.clone(), row.2.clone());
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    let mut rows = Vec::new();
    for (model, scenario, dataset) in groups {
        let members: Vec<_> = per_seed
            .iter()
            .filter(|r| r.0 == model && r.1 == scenario && r.2 == dataset)
            .collect();
        let accs: Vec<f64> = members.iter().map(|r| r.4).collect();
        let fgs: Vec<f64> = members.iter().map(|r| r.5).collect();
        rows.push(SummaryRow {
            model,
            scenario,
            dataset,
            n_seeds: members.len(),
            avg_accuracy: mean_std(&accs),
            avg_forgetting: mean_std(&fgs),
            compression_ratio: members[0].6,
        });
    }
    let text = format_summary(&rows);
    std::fs::write(in_dir.join("summary.csv"), &text)?;
    Ok(text)
}
