//! The continual-learning training loop.
//!
//! A [`Learner`] owns one hypernetwork state and trains it task by task.
//! Each step builds the task loss on a tape, previews the optimizer's
//! one-step lookahead on the generator weights, evaluates the regularizer at
//! that shifted point, and routes the combined gradients: generator weights
//! and chunk embeddings follow the total loss, the current task embedding
//! follows the task loss alone, and frozen parameters never move.

use crate::config::{RegKind, Scenario, TrainConfig};
use crate::data::{epoch_order, TaskSet};
use crate::error::{Error, Result};
use crate::hypernet::{GenOpts, GenSource, HyperDims, HypernetState, ParamMap};
use crate::layout::{build_layout, HeadSelector, MainNetLayout};
use crate::optim::Optimizer;
use crate::regularize::{compute_fisher_diag, reg_param_names, regularizer_on_tape};
use crate::tape::Tape;
use crate::target::forward;

/// Loss averages for one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub task: usize,
    pub epoch: usize,
    pub task_loss: f64,
    pub reg_loss: f64,
    pub total_loss: f64,
}

/// Tab-separated log lines, one per epoch, with a header.
pub fn format_train_log(stats: &[EpochStat]) -> String {
    let mut s = String::from("task\tepoch\ttask_loss\treg_loss\ttotal_loss\n");
    for st in stats {
        s.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
            st.task, st.epoch, st.task_loss, st.reg_loss, st.total_loss
        ));
    }
    s
}

/// One hypernetwork-based continual learner: model state, target layout,
/// and the per-task training procedure.
#[derive(Debug, Clone)]
pub struct Learner {
    pub state: HypernetState,
    pub layout: MainNetLayout,
    pub cfg: TrainConfig,
    pub scenario: Scenario,
    /// Optimizer carried across tasks when `cfg.persist_optimizer` is set.
    pub(crate) opt: Option<Optimizer>,
}

impl Learner {
    pub fn new(
        cfg: TrainConfig,
        scenario: Scenario,
        input_dim: usize,
        hidden: &[usize],
        n_classes: usize,
        n_tasks: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let layout = build_layout(
            input_dim,
            hidden,
            n_classes,
            scenario,
            n_tasks,
            cfg.chunk_size,
        )?;
        let dims = HyperDims {
            d_e: cfg.d_e,
            d_c: cfg.d_c,
            d_h: cfg.d_h,
            chunk_size: cfg.chunk_size,
            lstm_biases: cfg.lstm_biases,
        };
        let state = HypernetState::new(cfg.model, dims, layout.n_chunks, cfg.seed);
        Ok(Learner {
            state,
            layout,
            cfg,
            scenario,
            opt: None,
        })
    }

    /// The head task `t` trains and evaluates against.
    pub fn head_for(&self, task: usize) -> HeadSelector {
        if self.scenario.shared_head() {
            HeadSelector::Shared
        } else {
            HeadSelector::Task(task)
        }
    }

    fn regularized(&self, task: usize) -> bool {
        task > 0 && self.cfg.beta > 0.0 && self.cfg.regularizer != RegKind::None
    }

    /// Task loss and its gradients for one batch, built on a fresh tape.
    fn task_loss_grads(
        &self,
        task: usize,
        x: &crate::tensor::Tensor,
        labels: &[usize],
    ) -> Result<(f64, crate::tape::Gradients)> {
        let mut tape = Tape::new();
        let src = GenSource {
            params: &self.state.params,
            trainable: Some(&self.state.trainable),
        };
        let theta = crate::hypernet::generate_main_params(
            &mut tape,
            src,
            self.state.kind,
            self.state.dims,
            &self.layout,
            task,
            &GenOpts::default(),
        )?;
        let xv = tape.constant(x.clone());
        let logits = forward(&mut tape, xv, &theta, &self.layout, self.head_for(task))?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        Ok((value, grads))
    }

    /// Regularizer value (unscaled) and gradients at the lookahead point.
    fn reg_loss_grads(
        &self,
        opt: &Optimizer,
        task: usize,
        task_grads: &crate::tape::Gradients,
    ) -> Result<(f64, crate::tape::Gradients)> {
        let snapshot = self
            .state
            .snapshot
            .as_ref()
            .ok_or_else(|| Error::contract("regularizer requires a snapshot"))?;

        // candidate = live + the optimizer's one-step response to the task
        // gradient, baked in as constants
        let mut candidate: ParamMap = self.state.params.clone();
        for name in reg_param_names(&self.state.params) {
            if !self.state.trainable.contains(&name) {
                continue;
            }
            let tensor = candidate.get_mut(&name).unwrap();
            let grad = task_grads.param_or_zeros(&name, tensor.numel());
            let delta = opt.preview_delta(&name, &grad);
            for (p, d) in tensor.data_mut().iter_mut().zip(&delta) {
                *p += d;
            }
        }

        let fishers = match self.cfg.regularizer {
            RegKind::Iwr => Some(self.state.fishers.as_slice()),
            _ => None,
        };
        let mut tape = Tape::new();
        let reg = regularizer_on_tape(
            &mut tape,
            &self.state.params,
            &candidate,
            snapshot,
            self.state.kind,
            self.state.dims,
            &self.layout,
            task,
            fishers,
        )?;
        let value = tape.value(reg).item();
        let grads = tape.backward(reg)?;
        Ok((value, grads))
    }

    /// Trains one task for `cfg.epochs` passes and returns per-epoch loss
    /// averages. Ends by snapshotting the generator (and, for IWR, storing
    /// the task's Fisher importance).
    pub fn train_task(&mut self, task: usize, data: &TaskSet) -> Result<Vec<EpochStat>> {
        self.state.begin_task(task)?;
        // GROW always starts fresh: its per-task weights must not inherit
        // moments keyed to other tensors
        let mut opt = if self.cfg.persist_optimizer && !self.cfg.model.is_grow() {
            self.opt
                .take()
                .unwrap_or_else(|| Optimizer::new(self.cfg.optimizer, self.cfg.lr))
        } else {
            Optimizer::new(self.cfg.optimizer, self.cfg.lr)
        };
        opt.set_lr_scale(1.0);
        let n = data.train.len();
        if n == 0 {
            return Err(Error::contract("train_task: empty training set"));
        }
        let emb_name = format!("emb.task.{task}");
        if let Some(emb_lr) = self.cfg.emb_lr {
            opt.set_lr(&emb_name, emb_lr);
        }
        if self.cfg.emb_warm_start && task > 0 && !self.cfg.model.is_grow() {
            let prev = self.state.params[&format!("emb.task.{}", task - 1)].clone();
            self.state.params.insert(emb_name.clone(), prev);
        }
        let mut stats = Vec::with_capacity(self.cfg.epochs);
        let total_steps = self.cfg.epochs * n.div_ceil(self.cfg.batch_size);
        let mut global_step = 0usize;

        for epoch in 0..self.cfg.epochs {
            let order = epoch_order(n, self.cfg.seed, task, epoch);
            let mut sums = (0.0, 0.0, 0.0);
            let mut steps = 0usize;

            for batch_idx in order.chunks(self.cfg.batch_size) {
                if self.cfg.lr_decay {
                    let frac = global_step as f64 / total_steps as f64;
                    opt.set_lr_scale(0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
                }
                global_step += 1;
                let (x, labels) = data.train.batch(batch_idx)?;
                let (task_loss, task_grads) = self.task_loss_grads(task, &x, &labels)?;

                let (reg_loss, reg_grads) = if self.regularized(task) {
                    let (value, grads) = self.reg_loss_grads(&opt, task, &task_grads)?;
                    (value, Some(grads))
                } else {
                    (0.0, None)
                };
                let total_loss = task_loss + self.cfg.beta * reg_loss;
                if !total_loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss diverged at task {task}, epoch {epoch}, step {steps} \
                         (task {task_loss}, reg {reg_loss})"
                    )));
                }

                let names: Vec<String> = self.state.trainable.iter().cloned().collect();
                for name in names {
                    let len = self.state.params[&name].numel();
                    let mut grad = task_grads.param_or_zeros(&name, len);
                    if let Some(rg) = &reg_grads {
                        // the task embedding follows the task loss only
                        if name != emb_name {
                            if let Some(g) = rg.param(&name) {
                                for (a, b) in grad.iter_mut().zip(g) {
                                    *a += self.cfg.beta * b;
                                }
                            }
                        }
                    }
                    if grad.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "gradient for '{name}' diverged at task {task}, step {steps}"
                        )));
                    }
                    opt.apply(&mut self.state.params, &name, &grad)?;
                }

                sums.0 += task_loss;
                sums.1 += reg_loss;
                sums.2 += total_loss;
                steps += 1;
            }

            stats.push(EpochStat {
                task,
                epoch,
                task_loss: sums.0 / steps as f64,
                reg_loss: sums.1 / steps as f64,
                total_loss: sums.2 / steps as f64,
            });
        }

        if self.cfg.regularizer == RegKind::Iwr {
            let n_fisher = self.cfg.fisher_samples.min(n);
            let subset = data.train.take(n_fisher);
            let (x, labels) = subset.full()?;
            let fi = compute_fisher_diag(
                &x,
                &labels,
                self.head_for(task),
                &self.state.params,
                self.state.kind,
                self.state.dims,
                &self.layout,
                task,
                n_fisher,
            )?;
            self.state.fishers.push(fi);
        }
        if self.cfg.regularizer != RegKind::None {
            self.state.capture_snapshot();
        }
        self.opt = Some(opt);
        Ok(stats)
    }
}
