//! Datasets and task streams: IDX (MNIST) parsing, Split and Permuted task
//! construction, and synthetic Gaussian-blob tasks for fast end-to-end runs.
//!
//! Images are stored as `f32` (a full permuted-MNIST stream is ten copies of
//! the training set); batches are materialized as `f64` tensors so all math
//! downstream stays in double precision.

use std::fs::File;
use std::io::Read as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

/// A labeled set of flat feature vectors.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    dim: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if dim == 0 || images.len() != labels.len() * dim {
            return Err(Error::contract(format!(
                "dataset: {} values is not {} samples x {} features",
                images.len(),
                labels.len(),
                dim
            )));
        }
        Ok(Dataset {
            images,
            labels,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Materializes the selected rows as a B x dim f64 tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    context: "dataset batch",
                    index: i,
                    bound: self.len(),
                });
            }
            data.extend(self.images[i * self.dim..(i + 1) * self.dim].iter().map(|&v| v as f64));
            labels.push(self.labels[i]);
        }
        let x = Tensor::matrix(indices.len(), self.dim, data)?;
        Ok((x, labels))
    }

    /// The whole set as one batch, in stored order.
    pub fn full(&self) -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Rows whose label is in `keep`, relabeled by position in `keep`.
    pub fn filter_relabel(&self, keep: &[usize]) -> Dataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            if let Some(pos) = keep.iter().position(|&k| k == self.labels[i]) {
                images.extend_from_slice(&self.images[i * self.dim..(i + 1) * self.dim]);
                labels.push(pos);
            }
        }
        Dataset {
            images,
            labels,
            dim: self.dim,
        }
    }

    /// A copy with feature columns rearranged by `perm` (output feature j
    /// reads input feature perm[j]).
    pub fn permute_features(&self, perm: &[usize]) -> Result<Dataset> {
        if perm.len() != self.dim {
            return Err(Error::contract("permutation length must equal feature dim"));
        }
        let mut images = Vec::with_capacity(self.images.len());
        for i in 0..self.len() {
            let row = &self.images[i * self.dim..(i + 1) * self.dim];
            images.extend(perm.iter().map(|&p| row[p]));
        }
        Ok(Dataset {
            images,
            labels: self.labels.clone(),
            dim: self.dim,
        })
    }

    /// First `n` samples (or all of them if the set is smaller).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
            dim: self.dim,
        }
    }
}

/// One task of a continual stream: its train/test split and label count.
#[derive(Debug, Clone)]
pub struct TaskSet {
    pub train: Dataset,
    pub test: Dataset,
    pub n_classes: usize,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    // gzip magic: files may be stored compressed
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        return Ok(out);
    }
    Ok(raw)
}

fn read_u32(buf: &[u8], offset: usize) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(offset..offset + 4)
        .ok_or(Error::Format {
            offset: offset as u64,
            message: "truncated header".into(),
        })?
        .try_into()
        .unwrap();
    Ok(u32::from_be_bytes(bytes))
}

/// Parses an IDX image file (magic 0x00000803) into row-major flat images
/// scaled to [0, 1]. Transparently decompresses gzip.
pub fn load_idx_images(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let buf = read_file(path)?;
    let magic = read_u32(&buf, 0)?;
    if magic != 0x0000_0803 {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, want 0x00000803"),
        });
    }
    let n = read_u32(&buf, 4)? as usize;
    let rows = read_u32(&buf, 8)? as usize;
    let cols = read_u32(&buf, 12)? as usize;
    let dim = rows * cols;
    let body = &buf[16..];
    if body.len() != n * dim {
        return Err(Error::Format {
            offset: 16,
            message: format!("expected {} pixels, file holds {}", n * dim, body.len()),
        });
    }
    let images = body.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((images, n, dim))
}

/// Parses an IDX label file (magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let buf = read_file(path)?;
    let magic = read_u32(&buf, 0)?;
    if magic != 0x0000_0801 {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, want 0x00000801"),
        });
    }
    let n = read_u32(&buf, 4)? as usize;
    let body = &buf[8..];
    if body.len() != n {
        return Err(Error::Format {
            offset: 8,
            message: format!("expected {n} labels, file holds {}", body.len()),
        });
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (imgs, n, dim) = load_idx_images(images)?;
    let labs = load_idx_labels(labels)?;
    if labs.len() != n {
        return Err(Error::contract(format!(
            "image/label count mismatch: {n} vs {}",
            labs.len()
        )));
    }
    Dataset::new(imgs, labs, dim)
}

fn first_existing(dir: &Path, names: &[&str]) -> Result<std::path::PathBuf> {
    for name in names {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::config(format!(
        "none of {names:?} found in {}",
        dir.display()
    )))
}

/// Loads MNIST train and test splits from a directory holding the four IDX
/// files (plain or gzipped, dotted or dashed names).
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx_pair(
        &first_existing(
            dir,
            &[
                "train-images-idx3-ubyte",
                "train-images.idx3-ubyte",
                "train-images-idx3-ubyte.gz",
            ],
        )?,
        &first_existing(
            dir,
            &[
                "train-labels-idx1-ubyte",
                "train-labels.idx1-ubyte",
                "train-labels-idx1-ubyte.gz",
            ],
        )?,
    )?;
    let test = load_idx_pair(
        &first_existing(
            dir,
            &[
                "t10k-images-idx3-ubyte",
                "t10k-images.idx3-ubyte",
                "t10k-images-idx3-ubyte.gz",
            ],
        )?,
        &first_existing(
            dir,
            &[
                "t10k-labels-idx1-ubyte",
                "t10k-labels.idx1-ubyte",
                "t10k-labels-idx1-ubyte.gz",
            ],
        )?,
    )?;
    Ok((train, test))
}

/// The standard Split pairing: five binary tasks over consecutive digits.
pub const SPLIT_PAIRS: [[usize; 2]; 5] = [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]];

/// Splits a 10-class dataset into binary tasks, one per digit pair,
/// relabeling each pair to {0, 1}.
pub fn split_tasks(train: &Dataset, test: &Dataset) -> Vec<TaskSet> {
    SPLIT_PAIRS
        .iter()
        .map(|pair| TaskSet {
            train: train.filter_relabel(pair),
            test: test.filter_relabel(pair),
            n_classes: 2,
        })
        .collect()
}

/// Builds `n_tasks` permuted variants of a dataset. Task 0 keeps the
/// identity permutation; later tasks each draw a fresh pixel permutation
/// from a seeded stream.
pub fn permuted_tasks(
    train: &Dataset,
    test: &Dataset,
    n_tasks: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<TaskSet>> {
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let (tr, te) = if t == 0 {
            (train.clone(), test.clone())
        } else {
            let mut perm: Vec<usize> = (0..train.dim()).collect();
            perm.shuffle(&mut stream_rng(seed, &format!("permute.{t}")));
            (train.permute_features(&perm)?, test.permute_features(&perm)?)
        };
        tasks.push(TaskSet {
            train: tr,
            test: te,
            n_classes,
        });
    }
    Ok(tasks)
}

/// Parameters of the synthetic Gaussian-blob stream.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub n_tasks: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub per_class: usize,
    /// Radius of the sphere the class means are drawn on; larger means
    /// easier tasks.
    pub separation: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_tasks: 6,
            dim: 20,
            n_classes: 5,
            per_class: 500,
            separation: 3.0,
        }
    }
}

/// Synthetic stream: per task, `n_classes` unit-variance Gaussian blobs with
/// means drawn uniformly on a sphere of radius `separation`. Each class
/// contributes `per_class` samples, split 80/20 into train/test, and samples
/// are interleaved across classes so any prefix is class-balanced.
pub fn synth_tasks(spec: SynthSpec, seed: u64) -> Result<Vec<TaskSet>> {
    if spec.n_classes < 2 || spec.per_class < 5 || spec.dim == 0 {
        return Err(Error::contract("synthetic spec too small"));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for t in 0..spec.n_tasks {
        let mut rng = stream_rng(seed, &format!("synth.{t}"));
        // class means on the sphere
        let means: Vec<Vec<f64>> = (0..spec.n_classes)
            .map(|_| {
                let raw: Vec<f64> = (0..spec.dim).map(|_| normal.sample(&mut rng)).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                raw.iter().map(|v| v / norm * spec.separation).collect()
            })
            .collect();

        let n_train = spec.per_class * 4 / 5;
        let sample = |mean: &[f64], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
            mean.iter()
                .map(|&m| (m + normal.sample(rng)) as f32)
                .collect()
        };

        let build = |count: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Dataset {
            let mut images = Vec::with_capacity(count * spec.n_classes * spec.dim);
            let mut labels = Vec::with_capacity(count * spec.n_classes);
            for i in 0..count {
                for (k, mean) in means.iter().enumerate() {
                    let _ = i;
                    images.extend(sample(mean, rng));
                    labels.push(k);
                }
            }
            Dataset::new(images, labels, spec.dim).unwrap()
        };
        let train = build(n_train, &mut rng);
        let test = build(spec.per_class - n_train, &mut rng);
        tasks.push(TaskSet {
            train,
            test,
            n_classes: spec.n_classes,
        });
    }
    Ok(tasks)
}

/// Shuffled sample indices for one training epoch, drawn from a stream
/// keyed by (task, epoch) so runs replay exactly.
pub fn epoch_order(n: usize, seed: u64, task: usize, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, &format!("epoch.{task}.{epoch}")));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_idx_images(path: &Path, n: usize, rows: usize, cols: usize, px: &[u8]) {
        let mut buf = Vec::new();
        buf.extend(0x0000_0803u32.to_be_bytes());
        buf.extend((n as u32).to_be_bytes());
        buf.extend((rows as u32).to_be_bytes());
        buf.extend((cols as u32).to_be_bytes());
        buf.extend_from_slice(px);
        std::fs::write(path, buf).unwrap();
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut buf = Vec::new();
        buf.extend(0x0000_0801u32.to_be_bytes());
        buf.extend((labels.len() as u32).to_be_bytes());
        buf.extend_from_slice(labels);
        std::fs::write(path, buf).unwrap();
    }

    #[test]
    fn idx_roundtrip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("imgs");
        let lab = dir.path().join("labs");
        write_idx_images(&img, 2, 2, 2, &[0, 255, 128, 0, 10, 20, 30, 40]);
        write_idx_labels(&lab, &[3, 7]);
        let (images, n, dim) = load_idx_images(&img).unwrap();
        assert_eq!((n, dim), (2, 4));
        assert_eq!(images[1], 1.0);
        assert!((images[2] - 128.0 / 255.0).abs() < 1e-7);
        assert_eq!(load_idx_labels(&lab).unwrap(), vec![3, 7]);
    }

    #[test]
    fn gzip_idx_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("labs");
        write_idx_labels(&plain, &[1, 2, 3]);
        let gz = dir.path().join("labs.gz");
        let raw = std::fs::read(&plain).unwrap();
        let mut enc =
            flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        std::fs::write(&gz, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx_labels(&gz).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, [0u8, 0, 8, 99, 0, 0, 0, 0]).unwrap();
        match load_idx_labels(&path) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_body_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short");
        let mut buf = Vec::new();
        buf.extend(0x0000_0801u32.to_be_bytes());
        buf.extend(5u32.to_be_bytes());
        buf.extend_from_slice(&[1, 2]); // claims 5, holds 2
        std::fs::write(&path, buf).unwrap();
        assert!(matches!(
            load_idx_labels(&path),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    fn toy_tencls() -> Dataset {
        // 20 samples, 2 features, labels 0..9 twice
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for rep in 0..2 {
            for d in 0..10usize {
                images.push(d as f32);
                images.push(rep as f32);
                labels.push(d);
            }
        }
        Dataset::new(images, labels, 2).unwrap()
    }

    #[test]
    fn split_pairs_and_relabeling() {
        let ds = toy_tencls();
        let tasks = split_tasks(&ds, &ds);
        assert_eq!(tasks.len(), 5);
        for (t, task) in tasks.iter().enumerate() {
            assert_eq!(task.train.len(), 4);
            assert_eq!(task.n_classes, 2);
            assert!(task.train.labels().iter().all(|&l| l < 2));
            // feature 0 still carries the original digit
            let (x, y) = task.train.full().unwrap();
            for (row, &lab) in x.data().chunks(2).zip(&y) {
                assert_eq!(row[0] as usize, 2 * t + lab);
            }
        }
    }

    #[test]
    fn permuted_task_zero_is_identity() {
        let ds = toy_tencls();
        let tasks = permuted_tasks(&ds, &ds, 3, 10, 99).unwrap();
        let (orig, _) = ds.full().unwrap();
        let (t0, _) = tasks[0].train.full().unwrap();
        assert_eq!(orig.data(), t0.data());
        // later tasks keep labels but may move features
        assert_eq!(tasks[2].train.labels(), ds.labels());
    }

    #[test]
    fn permutations_differ_across_tasks_and_preserve_multisets() {
        // use a wider feature dim so identity draws are implausible
        let mut images = Vec::new();
        for i in 0..6 {
            for j in 0..32 {
                images.push((i * 32 + j) as f32);
            }
        }
        let ds = Dataset::new(images, vec![0; 6], 32).unwrap();
        let tasks = permuted_tasks(&ds, &ds, 3, 10, 7).unwrap();
        let (a, _) = tasks[1].train.full().unwrap();
        let (b, _) = tasks[2].train.full().unwrap();
        assert_ne!(a.data(), b.data());
        let mut row: Vec<f64> = a.data()[..32].to_vec();
        row.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let expected: Vec<f64> = (0..32).map(f64::from).collect();
        assert_eq!(row, expected);
    }

    #[test]
    fn permuted_tasks_replay_with_the_same_seed() {
        let ds = toy_tencls();
        let a = permuted_tasks(&ds, &ds, 4, 10, 5).unwrap();
        let b = permuted_tasks(&ds, &ds, 4, 10, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                x.train.full().unwrap().0.data(),
                y.train.full().unwrap().0.data()
            );
        }
    }

    #[test]
    fn synth_shapes_and_determinism() {
        let spec = SynthSpec {
            n_tasks: 2,
            dim: 5,
            n_classes: 3,
            per_class: 10,
            separation: 3.0,
        };
        let a = synth_tasks(spec, 1).unwrap();
        let b = synth_tasks(spec, 1).unwrap();
        let c = synth_tasks(spec, 2).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].train.len(), 8 * 3);
        assert_eq!(a[0].test.len(), 2 * 3);
        assert_eq!(
            a[0].train.full().unwrap().0.data(),
            b[0].train.full().unwrap().0.data()
        );
        assert_ne!(
            a[0].train.full().unwrap().0.data(),
            c[0].train.full().unwrap().0.data()
        );
        // tasks differ from each other
        assert_ne!(
            a[0].train.full().unwrap().0.data(),
            a[1].train.full().unwrap().0.data()
        );
        // balanced labels, interleaved
        assert_eq!(&a[0].train.labels()[..6], &[0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn synth_means_sit_on_the_separation_sphere() {
        // With huge per-class counts the sample mean approaches the true
        // mean; instead check directly that class-conditional means of a
        // large sample have norm close to separation.
        let spec = SynthSpec {
            n_tasks: 1,
            dim: 8,
            n_classes: 2,
            per_class: 4000,
            separation: 3.0,
        };
        let tasks = synth_tasks(spec, 3).unwrap();
        let (x, y) = tasks[0].train.full().unwrap();
        for class in 0..2 {
            let mut mean = vec![0.0; 8];
            let mut count = 0.0;
            for (row, &lab) in x.data().chunks(8).zip(&y) {
                if lab == class {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                    count += 1.0;
                }
            }
            let norm = mean
                .iter()
                .map(|m| (m / count) * (m / count))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 3.0).abs() < 0.25, "norm {norm}");
        }
    }

    #[test]
    fn batch_materializes_f64_rows() {
        let ds = toy_tencls();
        let (x, y) = ds.batch(&[0, 11]).unwrap();
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(x.data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(y, vec![0, 1]);
        assert!(matches!(ds.batch(&[99]), Err(Error::Index { .. })));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 1, 0, 0);
        let b = epoch_order(10, 1, 0, 0);
        let c = epoch_order(10, 1, 0, 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }
}
