//! Evaluation protocols and continual-learning metrics.
//!
//! CL1 gets the task id at test time and reads the matching head. CL2 has a
//! single shared head and no id: each candidate task embedding generates its
//! own main network, and every sample is routed to the candidate whose
//! prediction it finds least surprising (minimum predictive entropy). CL3 is
//! the multi-head analogue: a sample is counted correct only when both the
//! inferred head and the class under that head are right.

use crate::config::Scenario;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hypernet::{generate_flat_plain, GenOpts};
use crate::layout::HeadSelector;
use crate::tape::Tape;
use crate::target::{batch_argmax, batch_entropies, forward};
use crate::tensor::Tensor;
use crate::trainer::Learner;

/// Index of the smallest entropy; ties go to the lowest task id.
pub fn infer_task(entropies: &[f64]) -> usize {
    let mut best = 0;
    for (i, &h) in entropies.iter().enumerate().skip(1) {
        if h < entropies[best] {
            best = i;
        }
    }
    best
}

/// Per-sample class predictions for CL2: pick the candidate network with
/// minimal entropy, answer with its argmax. `per_candidate` holds one
/// B x K logit block per candidate task.
pub fn cl2_predict(per_candidate: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = per_candidate[0].len() / k;
    let entropies: Vec<Vec<f64>> = per_candidate
        .iter()
        .map(|l| batch_entropies(l, k))
        .collect();
    let argmaxes: Vec<Vec<usize>> = per_candidate.iter().map(|l| batch_argmax(l, k)).collect();
    (0..n)
        .map(|i| {
            let hs: Vec<f64> = entropies.iter().map(|e| e[i]).collect();
            argmaxes[infer_task(&hs)][i]
        })
        .collect()
}

/// Per-sample (task, class) predictions for CL3: minimum-entropy head, then
/// that head's argmax.
pub fn cl3_predict(per_candidate: &[Vec<f64>], k: usize) -> Vec<(usize, usize)> {
    let n = per_candidate[0].len() / k;
    let entropies: Vec<Vec<f64>> = per_candidate
        .iter()
        .map(|l| batch_entropies(l, k))
        .collect();
    let argmaxes: Vec<Vec<usize>> = per_candidate.iter().map(|l| batch_argmax(l, k)).collect();
    (0..n)
        .map(|i| {
            let hs: Vec<f64> = entropies.iter().map(|e| e[i]).collect();
            let t = infer_task(&hs);
            (t, argmaxes[t][i])
        })
        .collect()
}

/// Flat logits (row-major B x K) of the generated network for `gen_task`,
/// read through `head`, with everything held constant.
pub fn plain_logits(
    learner: &Learner,
    gen_task: usize,
    head: HeadSelector,
    x: &Tensor,
) -> Result<Vec<f64>> {
    let flat = generate_flat_plain(
        &learner.state.params,
        learner.state.kind,
        learner.state.dims,
        &learner.layout,
        gen_task,
        &GenOpts::default(),
    )?;
    let mut tape = Tape::new();
    let theta: Vec<_> = learner
        .layout
        .unflatten(&flat)?
        .into_iter()
        .map(|t| tape.constant(t))
        .collect();
    let xv = tape.constant(x.clone());
    let logits = forward(&mut tape, xv, &theta, &learner.layout, head)?;
    Ok(tape.value(logits).data().to_vec())
}

/// Test accuracy on `eval_task` under the learner's scenario, with
/// `tasks_seen` tasks available as inference candidates.
pub fn evaluate_task(
    learner: &Learner,
    tasks_seen: usize,
    eval_task: usize,
    test: &Dataset,
) -> Result<f64> {
    if eval_task >= tasks_seen || tasks_seen > learner.state.n_tasks_seen {
        return Err(Error::contract(format!(
            "evaluate_task: task {eval_task} with {tasks_seen} seen \
             ({} trained)",
            learner.state.n_tasks_seen
        )));
    }
    if test.is_empty() {
        return Err(Error::contract("evaluate_task: empty test set"));
    }
    let (x, labels) = test.full()?;
    let k = learner.layout.spec.heads.n_classes();

    let correct = match learner.scenario {
        Scenario::Cl1 => {
            let logits = plain_logits(learner, eval_task, HeadSelector::Task(eval_task), &x)?;
            batch_argmax(&logits, k)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count()
        }
        Scenario::Cl2 => {
            let per_candidate: Vec<Vec<f64>> = (0..tasks_seen)
                .map(|t| plain_logits(learner, t, HeadSelector::Shared, &x))
                .collect::<Result<_>>()?;
            cl2_predict(&per_candidate, k)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count()
        }
        Scenario::Cl3 => {
            let per_candidate: Vec<Vec<f64>> = (0..tasks_seen)
                .map(|t| plain_logits(learner, t, HeadSelector::Task(t), &x))
                .collect::<Result<_>>()?;
            cl3_predict(&per_candidate, k)
                .iter()
                .zip(&labels)
                .filter(|((t, p), l)| *t == eval_task && p == *l)
                .count()
        }
    };
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy matrix over the task stream: `acc[s][t]` is the accuracy on
/// task `t` measured after training task `s` (defined for `t <= s`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRecord {
    pub acc: Vec<Vec<f64>>,
}

impl MetricsRecord {
    pub fn push_stage(&mut self, accuracies: Vec<f64>) {
        self.acc.push(accuracies);
    }

    pub fn n_stages(&self) -> usize {
        self.acc.len()
    }

    /// Mean final accuracy across all tasks after the last stage.
    pub fn average_accuracy(&self) -> f64 {
        let last = self.acc.last().expect("no stages recorded");
        last.iter().sum::<f64>() / last.len() as f64
    }

    /// Mean drop from each task's just-trained accuracy to its final
    /// accuracy; 0 for a single-task stream. Negative values mean backward
    /// transfer (tasks improved after training moved on).
    pub fn average_forgetting(&self) -> f64 {
        let n = self.acc.len();
        if n < 2 {
            return 0.0;
        }
        let last = &self.acc[n - 1];
        let mut total = 0.0;
        for t in 0..n - 1 {
            total += self.acc[t][t] - last[t];
        }
        total / (n - 1) as f64
    }
}

/// Hypernetwork scalars over generated main-network scalars: below 1 means
/// the generator is smaller than the network it emits.
pub fn compression_ratio(learner: &Learner) -> f64 {
    learner.state.hypernet_scalar_count() as f64 / learner.layout.total_params as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelKind, OptKind, TrainConfig};
    use crate::data::{synth_tasks, SynthSpec};

    #[test]
    fn task_inference_is_argmin_with_low_tie() {
        assert_eq!(infer_task(&[0.5, 0.2, 0.9]), 1);
        assert_eq!(infer_task(&[0.2, 0.2, 0.2]), 0);
        assert_eq!(infer_task(&[0.3, 0.1, 0.1]), 1);
        assert_eq!(infer_task(&[0.7]), 0);
    }

    #[test]
    fn cl2_routes_each_sample_independently() {
        // two samples, two candidates, k = 2
        // sample 0: candidate 0 confident class 1, candidate 1 uncertain
        // sample 1: candidate 0 uncertain, candidate 1 confident class 0
        let cand0 = vec![-4.0, 4.0, 0.1, 0.0];
        let cand1 = vec![0.0, 0.1, 5.0, -5.0];
        let preds = cl2_predict(&[cand0, cand1], 2);
        assert_eq!(preds, vec![1, 0]);
    }

    #[test]
    fn cl3_reports_head_and_class() {
        let cand0 = vec![3.0, -3.0];
        let cand1 = vec![0.2, 0.1];
        let preds = cl3_predict(&[cand0, cand1], 2);
        assert_eq!(preds, vec![(0, 0)]);
        // flip confidence to the second head
        let cand0 = vec![0.2, 0.1];
        let cand1 = vec![-3.0, 3.0];
        let preds = cl3_predict(&[cand0, cand1], 2);
        assert_eq!(preds, vec![(1, 1)]);
    }

    #[test]
    fn metrics_oracles() {
        let mut m = MetricsRecord::default();
        m.push_stage(vec![0.9]);
        m.push_stage(vec![0.8, 0.95]);
        m.push_stage(vec![0.7, 0.85, 0.99]);
        // final accuracies: (0.7 + 0.85 + 0.99) / 3
        assert!((m.average_accuracy() - 0.8466666666666666).abs() < 1e-12);
        // forgetting: ((0.9 - 0.7) + (0.95 - 0.85)) / 2 = 0.15
        assert!((m.average_forgetting() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn single_stage_has_no_forgetting() {
        let mut m = MetricsRecord::default();
        m.push_stage(vec![0.5, 0.6]);
        assert_eq!(m.average_forgetting(), 0.0);
    }

    #[test]
    fn backward_transfer_shows_as_negative_forgetting() {
        let mut m = MetricsRecord::default();
        m.push_stage(vec![0.5]);
        m.push_stage(vec![0.7, 0.8]);
        assert!((m.average_forgetting() + 0.2).abs() < 1e-12);
    }

    fn tiny_learner(scenario: Scenario) -> (Learner, Vec<crate::data::TaskSet>) {
        let cfg = TrainConfig {
            model: ModelKind::LstmNet,
            regularizer: ModelKind::LstmNet.regularizer(),
            beta: 0.01,
            epochs: 20,
            batch_size: 8,
            chunk_size: 16,
            seed: 1,
            lr: 1e-2,
            emb_lr: None,
            lr_decay: false,
            optimizer: OptKind::Adam,
            d_e: 4,
            d_c: 4,
            d_h: 6,
            fisher_samples: 40,
            lstm_biases: false,
            emb_warm_start: false,
            persist_optimizer: false,
        };
        let tasks = synth_tasks(
            SynthSpec {
                n_tasks: 2,
                dim: 4,
                n_classes: 2,
                per_class: 30,
                separation: 4.0,
            },
            5,
        )
        .unwrap();
        let learner = Learner::new(cfg, scenario, 4, &[6], 2, 2).unwrap();
        (learner, tasks)
    }

    #[test]
    fn trained_tiny_model_beats_chance_in_cl1() {
        let (mut learner, tasks) = tiny_learner(Scenario::Cl1);
        learner.train_task(0, &tasks[0]).unwrap();
        let acc = evaluate_task(&learner, 1, 0, &tasks[0].test).unwrap();
        assert!(acc > 0.6, "accuracy {acc}");
        // evaluation is read-only and repeatable
        let again = evaluate_task(&learner, 1, 0, &tasks[0].test).unwrap();
        assert_eq!(acc.to_bits(), again.to_bits());
    }

    #[test]
    fn cl2_and_cl3_run_end_to_end() {
        for scenario in [Scenario::Cl2, Scenario::Cl3] {
            let (mut learner, tasks) = tiny_learner(scenario);
            learner.train_task(0, &tasks[0]).unwrap();
            learner.train_task(1, &tasks[1]).unwrap();
            for t in 0..2 {
                let acc = evaluate_task(&learner, 2, t, &tasks[t].test).unwrap();
                assert!((0.0..=1.0).contains(&acc));
            }
        }
    }

    #[test]
    fn unseen_tasks_are_rejected() {
        let (mut learner, tasks) = tiny_learner(Scenario::Cl1);
        learner.train_task(0, &tasks[0]).unwrap();
        assert!(evaluate_task(&learner, 1, 1, &tasks[1].test).is_err());
        assert!(evaluate_task(&learner, 2, 1, &tasks[1].test).is_err());
    }

    #[test]
    fn default_split_configuration_compresses() {
        // 784 -> 400 -> 400 with five 2-way heads and the default generator
        // dimensions: the hypernetwork holds
        //   4*64*192 + 4*64^2 + 64*2000 + 240*96 + 5*96 = 217056
        // scalars against 478410 generated ones.
        let cfg = TrainConfig {
            model: ModelKind::LstmNet,
            regularizer: ModelKind::LstmNet.regularizer(),
            beta: 0.01,
            epochs: 1,
            batch_size: 128,
            chunk_size: 2000,
            seed: 1,
            lr: 1e-3,
            emb_lr: None,
            lr_decay: false,
            optimizer: OptKind::Adam,
            d_e: 96,
            d_c: 96,
            d_h: 64,
            fisher_samples: 2000,
            lstm_biases: false,
            emb_warm_start: false,
            persist_optimizer: false,
        };
        let mut learner =
            Learner::new(cfg, Scenario::Cl1, 784, &[400, 400], 2, 5).unwrap();
        for t in 0..5 {
            learner.state.begin_task(t).unwrap();
        }
        let ratio = compression_ratio(&learner);
        assert!((ratio - 217_056.0 / 478_410.0).abs() < 1e-12, "ratio {ratio}");
        assert!(ratio < 0.5);
    }
}
