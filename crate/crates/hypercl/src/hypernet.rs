//! Weight generators: the chunked feed-forward hypernetwork (HNET), the
//! dependency-preserving LSTM hypernetwork (LSTM_NET), and its network-growth
//! variant (LSTM_NET_GROW).
//!
//! All three map a task embedding plus a bank of chunk embeddings to the flat
//! main-network parameter vector, one chunk per generator invocation. The
//! feed-forward generator emits chunks independently; the LSTM threads hidden
//! and cell state from chunk to chunk, so chunk j can depend on every chunk
//! before it. GROW keeps the recurrent weights shared and frozen after the
//! first task and grows fresh input/output weights per task.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelKind;
use crate::error::{Error, Result};
use crate::layout::MainNetLayout;
use crate::regularize::FisherDiag;
use crate::rng::stream_rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// All named parameter tensors of a hypernetwork (weights and embeddings).
/// BTreeMap so iteration order, and everything derived from it, is stable.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Hypernetwork dimensions.
///
/// `d_e`/`d_c` are task/chunk embedding sizes, `d_h` the LSTM hidden size.
/// The feed-forward generator's hidden widths are sized so its trainable
/// parameter count never exceeds the LSTM generator's at equal chunk size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperDims {
    pub d_e: usize,
    pub d_c: usize,
    pub d_h: usize,
    pub chunk_size: usize,
    pub lstm_biases: bool,
}

impl HyperDims {
    pub fn input_dim(&self) -> usize {
        self.d_e + self.d_c
    }

    /// First feed-forward hidden width: spends the LSTM's gate-weight budget
    /// (4 d_h (d_e + d_c) + 4 d_h^2) on the first two layers exactly.
    pub fn ff_h1(&self) -> usize {
        let budget = 4 * self.d_h * self.input_dim() + 4 * self.d_h * self.d_h;
        budget / (self.input_dim() + self.ff_h2())
    }

    /// Second feed-forward hidden width; matches d_h so the output
    /// projection is the same size in both generators.
    pub fn ff_h2(&self) -> usize {
        self.d_h
    }
}

const LSTM_GATES: [&str; 4] = ["i", "f", "o", "g"];

fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn embedding_init(rng: &mut impl Rng, dim: usize) -> Tensor {
    let normal = Normal::new(0.0, 0.1).unwrap();
    Tensor::row((0..dim).map(|_| normal.sample(rng)).collect())
}

/// Full mutable state of one hypernetwork-based continual learner.
#[derive(Debug, Clone)]
pub struct HypernetState {
    pub kind: ModelKind,
    pub dims: HyperDims,
    pub params: ParamMap,
    /// Names updated by the optimizer for the task currently training.
    pub trainable: BTreeSet<String>,
    /// Tasks for which an embedding (and GROW weights) exist.
    pub n_tasks_seen: usize,
    /// Parameters frozen at the end of the last finished task.
    pub snapshot: Option<ParamMap>,
    /// One Fisher importance vector per finished task (IWR models).
    pub fishers: Vec<FisherDiag>,
    pub seed: u64,
}

impl HypernetState {
    /// Initializes shared weights and the chunk-embedding bank. Task
    /// embeddings (and GROW per-task weights) are created by
    /// [`HypernetState::begin_task`].
    ///
    /// Every tensor gets its own named RNG stream, so initialization is
    /// independent of creation order.
    pub fn new(kind: ModelKind, dims: HyperDims, n_chunks: usize, seed: u64) -> Self {
        let mut params = ParamMap::new();
        let input_dim = dims.input_dim();

        if kind.is_feedforward() {
            let (h1, h2) = (dims.ff_h1(), dims.ff_h2());
            for (name, rows, cols) in [
                ("hn.l1", input_dim, h1),
                ("hn.l2", h1, h2),
                ("hn.l3", h2, dims.chunk_size),
            ] {
                let mut rng = stream_rng(seed, &format!("init.{name}"));
                params.insert(name.to_string(), uniform_init(&mut rng, rows, cols));
            }
        } else {
            for gate in LSTM_GATES {
                let name = format!("hn.u_{gate}");
                let mut rng = stream_rng(seed, &format!("init.{name}"));
                params.insert(name, uniform_init(&mut rng, dims.d_h, dims.d_h));
            }
            if !kind.is_grow() {
                insert_lstm_input_weights(&mut params, "hn", dims, seed);
            }
        }

        for j in 0..n_chunks {
            let mut rng = stream_rng(seed, &format!("init.emb.chunk.{j}"));
            params.insert(format!("emb.chunk.{j}"), embedding_init(&mut rng, dims.d_c));
        }

        HypernetState {
            kind,
            dims,
            params,
            trainable: BTreeSet::new(),
            n_tasks_seen: 0,
            snapshot: None,
            fishers: Vec::new(),
            seed,
        }
    }

    pub fn n_chunks(&self) -> usize {
        self.params
            .keys()
            .filter(|k| k.starts_with("emb.chunk."))
            .count()
    }

    fn task_emb_name(t: usize) -> String {
        format!("emb.task.{t}")
    }

    /// Starts task `t` (0-based): creates its embedding (and for GROW its
    /// per-task weights) and installs the trainable set.
    pub fn begin_task(&mut self, t: usize) -> Result<()> {
        if self.kind.is_grow() {
            return self.grow_begin_task(t);
        }
        if t != self.n_tasks_seen {
            return Err(Error::registry(format!(
                "begin_task({t}) out of order; {} tasks seen",
                self.n_tasks_seen
            )));
        }
        let emb = Self::task_emb_name(t);
        let mut rng = stream_rng(self.seed, &format!("init.{emb}"));
        self.params.insert(emb.clone(), embedding_init(&mut rng, self.dims.d_e));

        let mut trainable: BTreeSet<String> = self
            .params
            .keys()
            .filter(|k| k.starts_with("hn.") || k.starts_with("emb.chunk."))
            .cloned()
            .collect();
        trainable.insert(emb);
        self.trainable = trainable;
        self.n_tasks_seen = t + 1;
        Ok(())
    }

    /// GROW task start. Task 0 trains everything; later tasks get fresh
    /// copies of the previous task's input/output weights (warm start) while
    /// the recurrent weights and chunk embeddings stay frozen.
    pub fn grow_begin_task(&mut self, t: usize) -> Result<()> {
        if !self.kind.is_grow() {
            return Err(Error::contract("grow_begin_task on a non-GROW model"));
        }
        let prefix = format!("hn.t{t}");
        if self.params.contains_key(&format!("{prefix}.w_i")) {
            return Err(Error::registry(format!(
                "grow_begin_task({t}) called twice"
            )));
        }
        if t != self.n_tasks_seen {
            return Err(Error::registry(format!(
                "grow_begin_task({t}) out of order; {} tasks seen",
                self.n_tasks_seen
            )));
        }

        if t == 0 {
            insert_lstm_input_weights(&mut self.params, &prefix, self.dims, self.seed);
        } else {
            let prev = format!("hn.t{}", t - 1);
            for gate in LSTM_GATES {
                let src = self.params[&format!("{prev}.w_{gate}")].clone();
                self.params.insert(format!("{prefix}.w_{gate}"), src);
            }
            let src = self.params[&format!("{prev}.w_out")].clone();
            self.params.insert(format!("{prefix}.w_out"), src);
        }

        let emb = Self::task_emb_name(t);
        let mut rng = stream_rng(self.seed, &format!("init.{emb}"));
        self.params.insert(emb.clone(), embedding_init(&mut rng, self.dims.d_e));

        let mut trainable: BTreeSet<String> = self
            .params
            .keys()
            .filter(|k| k.starts_with(&format!("{prefix}.")))
            .cloned()
            .collect();
        trainable.insert(emb);
        if t == 0 {
            for gate in LSTM_GATES {
                trainable.insert(format!("hn.u_{gate}"));
            }
            for k in self.params.keys().filter(|k| k.starts_with("emb.chunk.")) {
                trainable.insert(k.clone());
            }
        }
        self.trainable = trainable;
        self.n_tasks_seen = t + 1;
        Ok(())
    }

    /// Freezes the current parameters as the regularization snapshot.
    pub fn capture_snapshot(&mut self) {
        self.snapshot = Some(self.params.clone());
    }

    /// Total scalar count of the hypernetwork (weights plus embeddings; for
    /// GROW this includes every stored per-task weight).
    pub fn hypernet_scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

fn insert_lstm_input_weights(params: &mut ParamMap, prefix: &str, dims: HyperDims, seed: u64) {
    let input_dim = dims.input_dim();
    for gate in LSTM_GATES {
        let name = format!("{prefix}.w_{gate}");
        let mut rng = stream_rng(seed, &format!("init.{name}"));
        params.insert(name, uniform_init(&mut rng, input_dim, dims.d_h));
        if dims.lstm_biases {
            let bname = format!("{prefix}.b_{gate}");
            let init = if gate == "f" { 1.0 } else { 0.0 };
            params.insert(bname, Tensor::row(vec![init; dims.d_h]));
        }
    }
    let name = format!("{prefix}.w_out");
    let mut rng = stream_rng(seed, &format!("init.{name}"));
    params.insert(name, uniform_init(&mut rng, dims.d_h, dims.chunk_size));
}

/// Where generation reads parameters from, and which of them are tape
/// leaves (gradient-carrying) vs constants.
#[derive(Clone, Copy)]
pub struct GenSource<'a> {
    pub params: &'a ParamMap,
    /// Names to register as trainable leaves; `None` means everything is
    /// constant (pure evaluation).
    pub trainable: Option<&'a BTreeSet<String>>,
}

impl<'a> GenSource<'a> {
    pub fn frozen(params: &'a ParamMap) -> Self {
        GenSource {
            params,
            trainable: None,
        }
    }

    fn stage(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let tensor = self
            .params
            .get(name)
            .ok_or_else(|| Error::registry(format!("missing parameter '{name}'")))?;
        Ok(match self.trainable {
            Some(set) if set.contains(name) => tape.param(name, tensor),
            _ => tape.constant(tensor.clone()),
        })
    }
}

/// LSTM gate weights staged on a tape.
pub struct LstmVars {
    pub w: [Var; 4],
    pub u: [Var; 4],
    pub b: Option<[Var; 4]>,
    pub w_out: Var,
}

/// One LSTM step: the four gates on concat(e, c_j) and the previous hidden
/// state, then the cell/hidden update and the chunk projection.
///
/// i, f, o = sigmoid(w . <e,c> + u . h_prev), g = tanh(w . <e,c> + u . h_prev),
/// s_j = f (.) s_prev + i (.) g, h_j = o (.) tanh(s_j), chunk = h_j . w_out
pub fn lstm_generate_chunk(
    tape: &mut Tape,
    e: Var,
    c: Var,
    h_prev: Var,
    s_prev: Var,
    p: &LstmVars,
) -> Result<(Var, Var, Var)> {
    let input = tape.concat_row(&[e, c])?;
    let mut pre = [None; 4];
    for k in 0..4 {
        let wx = tape.matmul(input, p.w[k])?;
        let uh = tape.matmul(h_prev, p.u[k])?;
        let mut z = tape.add(wx, uh)?;
        if let Some(b) = &p.b {
            z = tape.add_row_broadcast(z, b[k])?;
        }
        pre[k] = Some(z);
    }
    let gate_i = tape.sigmoid(pre[0].unwrap());
    let gate_f = tape.sigmoid(pre[1].unwrap());
    let gate_o = tape.sigmoid(pre[2].unwrap());
    let gate_g = tape.tanh(pre[3].unwrap());

    let fs = tape.hadamard(gate_f, s_prev)?;
    let ig = tape.hadamard(gate_i, gate_g)?;
    let s = tape.add(fs, ig)?;
    let ts = tape.tanh(s);
    let h = tape.hadamard(gate_o, ts)?;
    let chunk = tape.matmul(h, p.w_out)?;
    Ok((chunk, h, s))
}

/// One feed-forward chunk: MLP(concat(e, c_j)) with ReLU hidden layers.
/// Chunks are mutually independent given their embeddings.
pub fn hnet_generate_chunk(
    tape: &mut Tape,
    e: Var,
    c: Var,
    l1: Var,
    l2: Var,
    l3: Var,
) -> Result<Var> {
    let input = tape.concat_row(&[e, c])?;
    let z1 = tape.matmul(input, l1)?;
    let a1 = tape.relu(z1);
    let z2 = tape.matmul(a1, l2)?;
    let a2 = tape.relu(z2);
    tape.matmul(a2, l3)
}

fn lstm_weight_prefix(kind: ModelKind, task: usize) -> String {
    if kind.is_grow() {
        format!("hn.t{task}")
    } else {
        "hn".to_string()
    }
}

fn stage_lstm(
    tape: &mut Tape,
    src: GenSource,
    kind: ModelKind,
    dims: HyperDims,
    task: usize,
) -> Result<LstmVars> {
    let prefix = lstm_weight_prefix(kind, task);
    let mut w = [None; 4];
    let mut u = [None; 4];
    let mut b = [None; 4];
    for (k, gate) in LSTM_GATES.iter().enumerate() {
        w[k] = Some(src.stage(tape, &format!("{prefix}.w_{gate}"))?);
        u[k] = Some(src.stage(tape, &format!("hn.u_{gate}"))?);
        if dims.lstm_biases && !kind.is_grow() {
            b[k] = Some(src.stage(tape, &format!("{prefix}.b_{gate}"))?);
        }
    }
    let w_out = src.stage(tape, &format!("{prefix}.w_out"))?;
    Ok(LstmVars {
        w: w.map(Option::unwrap),
        u: u.map(Option::unwrap),
        b: if dims.lstm_biases && !kind.is_grow() {
            Some(b.map(Option::unwrap))
        } else {
            None
        },
        w_out,
    })
}

/// Options for one generation pass.
#[derive(Default, Clone)]
pub struct GenOpts {
    /// Replaces the task embedding value (regularizers pin old-task
    /// embeddings to their snapshot values).
    pub task_embedding_override: Option<Tensor>,
}

/// Generates the flat main-network parameter vector for `task` on `tape`.
///
/// LSTM/GROW generate chunks in order with (h, s) threaded from zero initial
/// state; HNET generates them independently. The concatenation is truncated
/// to `layout.total_params`.
pub fn generate_flat(
    tape: &mut Tape,
    src: GenSource,
    kind: ModelKind,
    dims: HyperDims,
    layout: &MainNetLayout,
    task: usize,
    opts: &GenOpts,
) -> Result<Var> {
    let emb_name = format!("emb.task.{task}");
    let e = match &opts.task_embedding_override {
        Some(t) => tape.constant(t.clone()),
        None => src.stage(tape, &emb_name)?,
    };
    let n_chunks = layout.n_chunks;
    let mut chunk_vars = Vec::with_capacity(n_chunks);

    if kind.is_feedforward() {
        let l1 = src.stage(tape, "hn.l1")?;
        let l2 = src.stage(tape, "hn.l2")?;
        let l3 = src.stage(tape, "hn.l3")?;
        for j in 0..n_chunks {
            let c = src.stage(tape, &format!("emb.chunk.{j}"))?;
            chunk_vars.push(hnet_generate_chunk(tape, e, c, l1, l2, l3)?);
        }
    } else {
        let vars = stage_lstm(tape, src, kind, dims, task)?;
        let mut h = tape.constant(Tensor::zeros(vec![1, dims.d_h]));
        let mut s = tape.constant(Tensor::zeros(vec![1, dims.d_h]));
        for j in 0..n_chunks {
            let c = src.stage(tape, &format!("emb.chunk.{j}"))?;
            let (chunk, h_next, s_next) = lstm_generate_chunk(tape, e, c, h, s, &vars)?;
            chunk_vars.push(chunk);
            h = h_next;
            s = s_next;
        }
    }

    let full = tape.concat_row(&chunk_vars)?;
    debug_assert_eq!(tape.value(full).numel(), n_chunks * layout.chunk_size);
    tape.slice_cols(full, 0, layout.total_params)
}

/// Generated flat vector split into the layout's structured tensors.
pub fn generate_main_params(
    tape: &mut Tape,
    src: GenSource,
    kind: ModelKind,
    dims: HyperDims,
    layout: &MainNetLayout,
    task: usize,
    opts: &GenOpts,
) -> Result<Vec<Var>> {
    let flat = generate_flat(tape, src, kind, dims, layout, task, opts)?;
    layout
        .entries
        .iter()
        .map(|entry| {
            let sl = tape.slice_cols(flat, entry.offset, entry.numel())?;
            tape.reshape(sl, entry.shape.clone())
        })
        .collect()
}

/// Pure evaluation: generates the flat vector with everything constant.
pub fn generate_flat_plain(
    params: &ParamMap,
    kind: ModelKind,
    dims: HyperDims,
    layout: &MainNetLayout,
    task: usize,
    opts: &GenOpts,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let flat = generate_flat(
        &mut tape,
        GenSource::frozen(params),
        kind,
        dims,
        layout,
        task,
        opts,
    )?;
    Ok(tape.value(flat).data().to_vec())
}
