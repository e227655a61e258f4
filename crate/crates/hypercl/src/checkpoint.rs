//! Versioned binary checkpoints.
//!
//! A checkpoint captures a whole [`Learner`] — generator parameters,
//! trainable set, snapshot, Fisher diagonals, hyperparameters, and the
//! target layout's defining spec — so a run can resume or be inspected
//! later. Floats are stored as raw IEEE bits, so a load reproduces the
//! saved state bitwise.

use std::path::Path;

use crate::config::{ModelKind, OptKind, Scenario, TrainConfig};
use crate::error::{Error, Result};
use crate::hypernet::{HyperDims, HypernetState, ParamMap};
use crate::layout::{build_layout, HeadLayout};
use crate::regularize::FisherDiag;
use crate::tensor::Tensor;
use crate::trainer::Learner;

const MAGIC: &[u8; 4] = b"HCPT";
const VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend(v.to_bits().to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.buf.push(v as u8);
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend(s.as_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn params(&mut self, p: &ParamMap) {
        self.u64(p.len() as u64);
        for (k, v) in p {
            self.str(k);
            self.tensor(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bad(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.bad("unexpected end of checkpoint"))?;
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(
            self.bytes(8)?.try_into().unwrap(),
        )))
    }
    fn bool(&mut self) -> Result<bool> {
        Ok(self.bytes(1)?[0] != 0)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        let raw = self.bytes(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.bad("invalid utf-8 string"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.usize()?;
        let shape: Vec<usize> = (0..rank)
            .map(|_| self.usize())
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| self.f64()).collect::<Result<_>>()?;
        Tensor::new(shape, data)
    }
    fn params(&mut self) -> Result<ParamMap> {
        let n = self.usize()?;
        let mut map = ParamMap::new();
        for _ in 0..n {
            let k = self.str()?;
            let v = self.tensor()?;
            map.insert(k, v);
        }
        Ok(map)
    }
}

/// Serializes a learner to `path`.
pub fn save_learner(path: &Path, learner: &Learner) -> Result<()> {
    let mut w = Writer::default();
    w.buf.extend(MAGIC);
    w.u32(VERSION);

    let cfg = &learner.cfg;
    w.str(&cfg.model.to_string());
    w.str(&learner.scenario.to_string());
    w.str(match cfg.regularizer {
        crate::config::RegKind::Snapshot => "snapshot",
        crate::config::RegKind::Iwr => "iwr",
        crate::config::RegKind::None => "none",
    });
    w.f64(cfg.beta);
    w.u64(cfg.epochs as u64);
    w.u64(cfg.batch_size as u64);
    w.u64(cfg.chunk_size as u64);
    w.u64(cfg.seed);
    w.f64(cfg.lr);
    w.bool(cfg.emb_lr.is_some());
    w.f64(cfg.emb_lr.unwrap_or(0.0));
    w.bool(cfg.lr_decay);
    w.str(match cfg.optimizer {
        OptKind::Adam => "adam",
        OptKind::Sgd => "sgd",
    });
    w.u64(cfg.d_e as u64);
    w.u64(cfg.d_c as u64);
    w.u64(cfg.d_h as u64);
    w.u64(cfg.fisher_samples as u64);
    w.bool(cfg.lstm_biases);
    w.bool(cfg.emb_warm_start);
    w.bool(cfg.persist_optimizer);

    // layout spec
    let spec = &learner.layout.spec;
    w.u64(spec.input_dim as u64);
    w.u64(spec.hidden.len() as u64);
    for &h in &spec.hidden {
        w.u64(h as u64);
    }
    w.u64(spec.heads.n_classes() as u64);
    w.u64(spec.heads.n_heads() as u64);

    // mutable state
    let st = &learner.state;
    w.u64(st.n_tasks_seen as u64);
    w.params(&st.params);
    w.u64(st.trainable.len() as u64);
    for name in &st.trainable {
        w.str(name);
    }
    w.bool(st.snapshot.is_some());
    if let Some(snap) = &st.snapshot {
        w.params(snap);
    }
    w.u64(st.fishers.len() as u64);
    for fi in &st.fishers {
        w.u64(fi.task as u64);
        w.f64(fi.scale);
        w.f64s(&fi.values);
    }

    std::fs::write(path, w.buf)?;
    Ok(())
}

/// Loads a learner saved by [`save_learner`].
pub fn load_learner(path: &Path) -> Result<Learner> {
    let raw = std::fs::read(path)?;
    let mut r = Reader { buf: &raw, pos: 0 };
    if r.bytes(4)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint file".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }

    let model = ModelKind::parse(&r.str()?)?;
    let scenario = Scenario::parse(&r.str()?)?;
    let reg = match r.str()?.as_str() {
        "snapshot" => crate::config::RegKind::Snapshot,
        "iwr" => crate::config::RegKind::Iwr,
        "none" => crate::config::RegKind::None,
        other => return Err(Error::config(format!("unknown regularizer '{other}'"))),
    };
    let cfg = TrainConfig {
        model,
        regularizer: reg,
        beta: r.f64()?,
        epochs: r.usize()?,
        batch_size: r.usize()?,
        chunk_size: r.usize()?,
        seed: r.u64()?,
        lr: r.f64()?,
        emb_lr: {
            let present = r.bool()?;
            let value = r.f64()?;
            present.then_some(value)
        },
        lr_decay: r.bool()?,
        optimizer: OptKind::parse(&r.str()?)?,
        d_e: r.usize()?,
        d_c: r.usize()?,
        d_h: r.usize()?,
        fisher_samples: r.usize()?,
        lstm_biases: r.bool()?,
        emb_warm_start: r.bool()?,
        persist_optimizer: r.bool()?,
    };

    let input_dim = r.usize()?;
    let n_hidden = r.usize()?;
    let hidden: Vec<usize> = (0..n_hidden).map(|_| r.usize()).collect::<Result<_>>()?;
    let n_classes = r.usize()?;
    let n_heads = r.usize()?;
    let layout = build_layout(
        input_dim,
        &hidden,
        n_classes,
        scenario,
        n_heads,
        cfg.chunk_size,
    )?;
    match (&layout.spec.heads, scenario.shared_head()) {
        (HeadLayout::Shared { .. }, true) | (HeadLayout::PerTask { .. }, false) => {}
        _ => {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: "scenario and head layout disagree".into(),
            })
        }
    }

    let n_tasks_seen = r.usize()?;
    let params = r.params()?;
    let n_trainable = r.usize()?;
    let mut trainable = std::collections::BTreeSet::new();
    for _ in 0..n_trainable {
        trainable.insert(r.str()?);
    }
    let snapshot = if r.bool()? { Some(r.params()?) } else { None };
    let n_fishers = r.usize()?;
    let mut fishers = Vec::with_capacity(n_fishers);
    for _ in 0..n_fishers {
        fishers.push(FisherDiag {
            task: r.usize()?,
            scale: r.f64()?,
            values: r.f64s()?,
        });
    }
    if r.pos != raw.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: "trailing bytes after checkpoint payload".into(),
        });
    }

    let dims = HyperDims {
        d_e: cfg.d_e,
        d_c: cfg.d_c,
        d_h: cfg.d_h,
        chunk_size: cfg.chunk_size,
        lstm_biases: cfg.lstm_biases,
    };
    let seed = cfg.seed;
    let state = HypernetState {
        kind: model,
        dims,
        params,
        trainable,
        n_tasks_seen,
        snapshot,
        fishers,
        seed,
    };
    Ok(Learner {
        state,
        layout,
        cfg,
        scenario,
        // optimizer moments are not checkpointed; a resumed run warms
        // them up again from the data
        opt: None,
    })
}
