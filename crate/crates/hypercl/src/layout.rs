//! Flattening layout of the target classifier's parameters.
//!
//! The hypernetwork emits one flat vector per task; this module fixes the
//! deterministic order in which that vector maps onto the classifier's
//! weight and bias tensors, and how it splits into fixed-size chunks.

use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture of the target classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    /// Hidden layer widths, ReLU activations.
    pub hidden: Vec<usize>,
    pub heads: HeadLayout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadLayout {
    /// One output head per task (CL1/CL3).
    PerTask { n_tasks: usize, n_classes: usize },
    /// Single head shared by all tasks (CL2).
    Shared { n_classes: usize },
}

impl HeadLayout {
    pub fn n_heads(&self) -> usize {
        match self {
            HeadLayout::PerTask { n_tasks, .. } => *n_tasks,
            HeadLayout::Shared { .. } => 1,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            HeadLayout::PerTask { n_classes, .. } | HeadLayout::Shared { n_classes } => *n_classes,
        }
    }
}

/// Which head a forward pass reads its logits from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelector {
    Task(usize),
    Shared,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered description of the classifier's parameter tensors, their flat
/// offsets, and the chunking scheme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MainNetLayout {
    pub spec: ClassifierSpec,
    pub entries: Vec<LayoutEntry>,
    pub total_params: usize,
    pub chunk_size: usize,
    pub n_chunks: usize,
}

/// Builds the layout: per layer weight then bias, first layer to last,
/// then heads in task order. The final chunk's trailing overflow
/// (`n_chunks * chunk_size - total_params` entries) is discarded.
pub fn build_layout(
    input_dim: usize,
    hidden: &[usize],
    n_classes: usize,
    scenario: Scenario,
    n_tasks: usize,
    chunk_size: usize,
) -> Result<MainNetLayout> {
    if chunk_size < 1 {
        return Err(Error::contract("chunk_size must be >= 1"));
    }
    if input_dim == 0 || hidden.iter().any(|&w| w == 0) || n_classes == 0 || n_tasks == 0 {
        return Err(Error::contract("layer sizes and task count must be positive"));
    }
    let heads = if scenario.shared_head() {
        HeadLayout::Shared { n_classes }
    } else {
        HeadLayout::PerTask { n_tasks, n_classes }
    };
    let spec = ClassifierSpec {
        input_dim,
        hidden: hidden.to_vec(),
        heads,
    };
    Ok(layout_for(spec, chunk_size))
}

fn layout_for(spec: ClassifierSpec, chunk_size: usize) -> MainNetLayout {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, shape: Vec<usize>, offset: &mut usize| {
        let numel: usize = shape.iter().product();
        entries.push(LayoutEntry {
            name,
            shape,
            offset: *offset,
        });
        *offset += numel;
    };

    let mut in_dim = spec.input_dim;
    for (l, &width) in spec.hidden.iter().enumerate() {
        push(format!("layer{l}.w"), vec![in_dim, width], &mut offset);
        push(format!("layer{l}.b"), vec![1, width], &mut offset);
        in_dim = width;
    }
    let k = spec.heads.n_classes();
    for h in 0..spec.heads.n_heads() {
        push(format!("head{h}.w"), vec![in_dim, k], &mut offset);
        push(format!("head{h}.b"), vec![1, k], &mut offset);
    }

    let total_params = offset;
    let n_chunks = total_params.div_ceil(chunk_size);
    MainNetLayout {
        spec,
        entries,
        total_params,
        chunk_size,
        n_chunks,
    }
}

impl MainNetLayout {
    pub fn n_layers(&self) -> usize {
        self.spec.hidden.len()
    }

    /// Entry indices for the l-th hidden layer.
    pub fn layer_entries(&self, l: usize) -> (usize, usize) {
        (2 * l, 2 * l + 1)
    }

    /// Entry indices for a head; errors on unknown heads.
    pub fn head_entries(&self, head: HeadSelector) -> Result<(usize, usize)> {
        let h = match (head, &self.spec.heads) {
            (HeadSelector::Shared, HeadLayout::Shared { .. }) => 0,
            (HeadSelector::Task(t), HeadLayout::PerTask { n_tasks, .. }) if t < *n_tasks => t,
            (sel, _) => {
                return Err(Error::registry(format!(
                    "unknown head {sel:?} for layout {:?}",
                    self.spec.heads
                )))
            }
        };
        let base = 2 * self.n_layers() + 2 * h;
        Ok((base, base + 1))
    }

    /// Splits a flat vector of `total_params` values into layout tensors.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Vec<Tensor>> {
        if flat.len() != self.total_params {
            return Err(Error::Shape {
                op: "unflatten",
                lhs: vec![flat.len()],
                rhs: vec![self.total_params],
            });
        }
        self.entries
            .iter()
            .map(|e| Tensor::new(e.shape.clone(), flat[e.offset..e.offset + e.numel()].to_vec()))
            .collect()
    }

    /// Concatenates layout tensors back into the flat vector.
    pub fn flatten(&self, tensors: &[Tensor]) -> Result<Vec<f64>> {
        if tensors.len() != self.entries.len() {
            return Err(Error::contract("flatten: wrong tensor count"));
        }
        let mut flat = Vec::with_capacity(self.total_params);
        for (e, t) in self.entries.iter().zip(tensors) {
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Shape {
                    op: "flatten",
                    lhs: t.shape().to_vec(),
                    rhs: e.shape.clone(),
                });
            }
            flat.extend_from_slice(t.data());
        }
        Ok(flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_mnist_cl1_total_params() {
        // 784 -> 400 -> 400 plus five 2-unit heads:
        // 314000 + 160400 + 5 * 802 = 478410
        let layout = build_layout(784, &[400, 400], 2, Scenario::Cl1, 5, 2000).unwrap();
        assert_eq!(layout.total_params, 478_410);
        assert_eq!(layout.n_chunks, 240);
        assert_eq!(layout.entries.len(), 4 + 10);
    }

    #[test]
    fn single_chunk_when_chunk_size_covers_everything() {
        let layout = build_layout(4, &[3], 2, Scenario::Cl2, 3, 10_000).unwrap();
        assert_eq!(layout.n_chunks, 1);
        assert!(matches!(layout.spec.heads, HeadLayout::Shared { n_classes: 2 }));
    }

    #[test]
    fn ceiling_arithmetic_with_overflow() {
        // total 10, chunk 4 => 3 chunks, final chunk discards 2 outputs
        let layout = build_layout(2, &[2], 2, Scenario::Cl2, 1, 4).unwrap();
        assert_eq!(layout.total_params, 2 * 2 + 2 + 2 * 2 + 2);
        let layout = build_layout(1, &[2], 2, Scenario::Cl2, 1, 4).unwrap();
        // 1*2 + 2 + 2*2 + 2 = 10
        assert_eq!(layout.total_params, 10);
        assert_eq!(layout.n_chunks, 3);
        assert_eq!(layout.n_chunks * layout.chunk_size - layout.total_params, 2);
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let layout = build_layout(3, &[4, 2], 3, Scenario::Cl3, 2, 7).unwrap();
        let flat: Vec<f64> = (0..layout.total_params).map(|i| i as f64 * 0.5).collect();
        let tensors = layout.unflatten(&flat).unwrap();
        assert_eq!(layout.flatten(&tensors).unwrap(), flat);
    }

    #[test]
    fn head_resolution() {
        let layout = build_layout(3, &[4], 2, Scenario::Cl1, 3, 7).unwrap();
        assert!(layout.head_entries(HeadSelector::Task(2)).is_ok());
        assert!(layout.head_entries(HeadSelector::Task(3)).is_err());
        assert!(layout.head_entries(HeadSelector::Shared).is_err());
    }
}
