//! Output-space regularization against forgetting, and the diagonal Fisher
//! importance estimator that weights it.
//!
//! The snapshot regularizer penalizes, for every finished task, the squared
//! distance between the main-network vector the frozen pre-task hypernetwork
//! generates and the one the shifted live hypernetwork generates. The
//! importance-weighted variant (IWR) scales each coordinate of that distance
//! by the task's Fisher importance, so only parameters that mattered for the
//! old task are pinned down.

use std::collections::BTreeSet;

use crate::config::ModelKind;
use crate::error::{Error, Result};
use crate::hypernet::{generate_flat, generate_flat_plain, GenOpts, GenSource, HyperDims, ParamMap};
use crate::layout::{HeadSelector, MainNetLayout};
use crate::tape::{Tape, Var};
use crate::target::forward;
use crate::tensor::Tensor;

/// Per-parameter importance of the flat main-network vector for one task.
///
/// Entries are non-negative and normalized to mean 1; `scale` records the
/// pre-normalization mean (0 marks a degenerate, all-zero estimate that was
/// replaced by uniform importance).
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub task: usize,
    pub values: Vec<f64>,
    pub scale: f64,
}

/// Rescales to mean 1 and returns the original mean.
pub fn normalize_mean_one(values: &mut [f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean > 0.0 {
        for v in values.iter_mut() {
            *v /= mean;
        }
    } else {
        values.fill(1.0);
    }
    mean
}

/// Parameter names the regularizer's gradient may flow into: generator
/// weights and chunk embeddings, never task embeddings.
pub fn reg_param_names(params: &ParamMap) -> BTreeSet<String> {
    params
        .keys()
        .filter(|k| k.starts_with("hn.") || k.starts_with("emb.chunk."))
        .cloned()
        .collect()
}

/// Builds the regularizer term on `tape` and returns its scalar Var.
///
/// * `candidate` holds the already-shifted parameters (live + lookahead
///   delta); they are registered as leaves under their original names so
///   gradients land in the caller's accumulator. The delta itself is baked
///   into the values, so no gradient flows through it.
/// * Old-task targets are generated from `snapshot` weights with the
///   candidate's un-shifted chunk embeddings substituted in via `live`,
///   and are plain constants on the tape.
/// * Old-task embeddings come from the snapshot on both sides.
/// * `fishers`, when given, must hold one importance vector per previous
///   task, in task order.
pub fn regularizer_on_tape(
    tape: &mut Tape,
    live: &ParamMap,
    candidate: &ParamMap,
    snapshot: &ParamMap,
    kind: ModelKind,
    dims: HyperDims,
    layout: &MainNetLayout,
    n_prev_tasks: usize,
    fishers: Option<&[FisherDiag]>,
) -> Result<Var> {
    if n_prev_tasks == 0 {
        return Err(Error::contract(
            "regularizer needs at least one previous task; skip the term for the first task",
        ));
    }
    if let Some(f) = fishers {
        if f.len() < n_prev_tasks {
            return Err(Error::contract(format!(
                "need {} Fisher diagonals, have {}",
                n_prev_tasks,
                f.len()
            )));
        }
    }

    // target generator: snapshot weights, current (un-shifted) chunk embeddings
    let mut target_params = snapshot.clone();
    for (k, v) in live {
        if k.starts_with("emb.chunk.") {
            target_params.insert(k.clone(), v.clone());
        }
    }

    let reg_set = reg_param_names(candidate);
    let src = GenSource {
        params: candidate,
        trainable: Some(&reg_set),
    };

    let mut terms = Vec::with_capacity(n_prev_tasks);
    for t in 0..n_prev_tasks {
        let emb_name = format!("emb.task.{t}");
        let old_emb = snapshot
            .get(&emb_name)
            .ok_or_else(|| Error::registry(format!("snapshot missing '{emb_name}'")))?;
        let opts = GenOpts {
            task_embedding_override: Some(old_emb.clone()),
        };
        let target = generate_flat_plain(&target_params, kind, dims, layout, t, &opts)?;
        let generated = generate_flat(tape, src, kind, dims, layout, t, &opts)?;
        let weights = match fishers {
            Some(f) => {
                let fi = &f[t];
                if fi.values.len() != layout.total_params {
                    return Err(Error::Shape {
                        op: "iwr fisher length",
                        lhs: vec![fi.values.len()],
                        rhs: vec![layout.total_params],
                    });
                }
                Some(fi.values.as_slice())
            }
            None => None,
        };
        terms.push(tape.weighted_squared_diff(generated, &target, weights)?);
    }

    let mut total = terms[0];
    for &term in &terms[1..] {
        total = tape.add(total, term)?;
    }
    Ok(tape.scale(total, 1.0 / n_prev_tasks as f64))
}

fn regularizer_value(
    candidate: &ParamMap,
    snapshot: &ParamMap,
    kind: ModelKind,
    dims: HyperDims,
    layout: &MainNetLayout,
    n_prev_tasks: usize,
    fishers: Option<&[FisherDiag]>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let var = regularizer_on_tape(
        &mut tape,
        candidate,
        candidate,
        snapshot,
        kind,
        dims,
        layout,
        n_prev_tasks,
        fishers,
    )?;
    Ok(tape.value(var).item())
}

/// Mean over previous tasks of the squared distance between old-task
/// main-network vectors generated by the snapshot and by the candidate.
pub fn snapshot_regularizer(
    candidate: &ParamMap,
    snapshot: &ParamMap,
    kind: ModelKind,
    dims: HyperDims,
    layout: &MainNetLayout,
    n_prev_tasks: usize,
) -> Result<f64> {
    regularizer_value(candidate, snapshot, kind, dims, layout, n_prev_tasks, None)
}

/// The snapshot penalty with each coordinate weighted by the old task's
/// Fisher importance.
pub fn iwr_regularizer(
    candidate: &ParamMap,
    snapshot: &ParamMap,
    kind: ModelKind,
    dims: HyperDims,
    layout: &MainNetLayout,
    n_prev_tasks: usize,
    fishers: &[FisherDiag],
) -> Result<f64> {
    regularizer_value(
        candidate,
        snapshot,
        kind,
        dims,
        layout,
        n_prev_tasks,
        Some(fishers),
    )
}

/// Empirical diagonal Fisher of the task loss w.r.t. the generated
/// main-network parameters, mean over `n_samples` ground-truth-labeled
/// samples, then normalized to mean 1.
///
/// `images` is N x input_dim, labels are class indices for `head`.
pub fn compute_fisher_diag(
    images: &Tensor,
    labels: &[usize],
    head: HeadSelector,
    params: &ParamMap,
    kind: ModelKind,
    dims: HyperDims,
    layout: &MainNetLayout,
    task: usize,
    n_samples: usize,
) -> Result<FisherDiag> {
    let (n, input_dim) = images.dims2()?;
    if labels.len() != n {
        return Err(Error::contract("compute_fisher_diag: labels/images mismatch"));
    }
    if n_samples > n {
        return Err(Error::contract(format!(
            "compute_fisher_diag: n_samples {n_samples} exceeds dataset size {n}"
        )));
    }

    let flat = generate_flat_plain(params, kind, dims, layout, task, &GenOpts::default())?;
    let theta = layout.unflatten(&flat)?;

    let mut acc = vec![0.0; layout.total_params];
    for s in 0..n_samples {
        let mut tape = Tape::new();
        let theta_vars: Vec<Var> = layout
            .entries
            .iter()
            .zip(&theta)
            .map(|(e, t)| tape.param(&e.name, t))
            .collect();
        let row = &images.data()[s * input_dim..(s + 1) * input_dim];
        let x = tape.constant(Tensor::matrix(1, input_dim, row.to_vec())?);
        let logits = forward(&mut tape, x, &theta_vars, layout, head)?;
        let loss = tape.softmax_cross_entropy(logits, &labels[s..s + 1])?;
        let grads = tape.backward(loss)?;
        for entry in &layout.entries {
            if let Some(g) = grads.param(&entry.name) {
                let base = entry.offset;
                for (i, gv) in g.iter().enumerate() {
                    acc[base + i] += gv * gv;
                }
            }
        }
    }
    for v in acc.iter_mut() {
        *v /= n_samples as f64;
    }
    let scale = normalize_mean_one(&mut acc);
    Ok(FisherDiag {
        task,
        values: acc,
        scale,
    })
}
