//! Datasets: sparse count/expression matrices, labels with condition codes,
//! toy data synthesis, filtering, normalization, and stratified splitting.

mod io;
mod normalize;
mod split;
mod toy;

pub use io::{load_dataset, load_labels, load_matrix_market, save_dataset, save_labels,
    save_matrix_market};
pub use normalize::{filter_dataset, normalize_cells, FilterStats, MIN_CELLS_PER_GENE,
    MIN_COUNTS_PER_CELL, TARGET_COUNTS};
pub use split::{class_partition, split_dataset};
pub use toy::{make_toy_dataset, ToyConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sparse cells x genes matrix, CSR over cells. Explicit zeros are never
/// stored and all stored values are non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    n_genes: usize,
    indptr: Vec<usize>,   // len n_cells + 1
    gene_idx: Vec<u32>,   // sorted within each row
    values: Vec<f64>,
}

impl ExpressionMatrix {
    pub fn from_triplets(
        n_cells: usize,
        n_genes: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        for &(r, c, v) in &triplets {
            if r >= n_cells || c >= n_genes {
                return Err(Error::Config(format!(
                    "entry ({r},{c}) outside {n_cells}x{n_genes} matrix"
                )));
            }
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!(
                    "expression value {v} at ({r},{c}) must be finite and >= 0"
                )));
            }
        }
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::Config(format!(
                    "duplicate entry at ({},{})",
                    w[0].0, w[0].1
                )));
            }
        }
        let mut indptr = Vec::with_capacity(n_cells + 1);
        let mut gene_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut row = 0;
        for (r, c, v) in triplets {
            if v == 0.0 {
                continue; // explicit zeros are dropped
            }
            while row < r {
                indptr.push(gene_idx.len());
                row += 1;
            }
            gene_idx.push(c as u32);
            values.push(v);
        }
        while row < n_cells {
            indptr.push(gene_idx.len());
            row += 1;
        }
        Ok(ExpressionMatrix {
            n_genes,
            indptr,
            gene_idx,
            values,
        })
    }

    /// Dense rows -> sparse, dropping exact zeros.
    pub fn from_dense(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2();
        let mut triplets = Vec::new();
        for r in 0..rows {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v != 0.0 {
                    triplets.push((r, c, v));
                }
            }
        }
        Self::from_triplets(rows, cols, triplets)
    }

    pub fn n_cells(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn zero_fraction(&self) -> f64 {
        let total = self.n_cells() * self.n_genes;
        1.0 - self.nnz() as f64 / total as f64
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.gene_idx[a..b], &self.values[a..b])
    }

    pub fn row_total(&self, i: usize) -> f64 {
        self.row(i).1.iter().sum()
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_cells()).flat_map(move |r| {
            let (genes, vals) = self.row(r);
            genes
                .iter()
                .zip(vals)
                .map(move |(&g, &v)| (r, g as usize, v))
        })
    }

    /// Dense [idx.len(), n_genes] tensor of the selected rows.
    pub fn dense_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = vec![0.0; idx.len() * self.n_genes];
        for (out_r, &r) in idx.iter().enumerate() {
            let (genes, vals) = self.row(r);
            let base = out_r * self.n_genes;
            for (&g, &v) in genes.iter().zip(vals) {
                data[base + g as usize] = v;
            }
        }
        Tensor::matrix(idx.len(), self.n_genes, data).expect("dense rows")
    }

    /// New matrix keeping the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> ExpressionMatrix {
        let mut indptr = Vec::with_capacity(idx.len() + 1);
        let mut gene_idx = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for &r in idx {
            let (genes, vals) = self.row(r);
            gene_idx.extend_from_slice(genes);
            values.extend_from_slice(vals);
            indptr.push(gene_idx.len());
        }
        ExpressionMatrix {
            n_genes: self.n_genes,
            indptr,
            gene_idx,
            values,
        }
    }

    /// New matrix keeping only `keep_genes` (sorted), reindexed densely.
    pub fn select_genes(&self, keep_genes: &[usize]) -> ExpressionMatrix {
        let mut remap = vec![u32::MAX; self.n_genes];
        for (new, &old) in keep_genes.iter().enumerate() {
            remap[old] = new as u32;
        }
        let mut indptr = Vec::with_capacity(self.indptr.len());
        let mut gene_idx = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..self.n_cells() {
            let (genes, vals) = self.row(r);
            for (&g, &v) in genes.iter().zip(vals) {
                let ng = remap[g as usize];
                if ng != u32::MAX {
                    gene_idx.push(ng);
                    values.push(v);
                }
            }
            indptr.push(gene_idx.len());
        }
        ExpressionMatrix {
            n_genes: keep_genes.len(),
            indptr,
            gene_idx,
            values,
        }
    }

    /// Apply `f` to every stored value (sparsity pattern unchanged).
    pub(crate) fn map_rows<F: FnMut(usize, &mut [f64])>(&mut self, mut f: F) {
        for r in 0..self.indptr.len() - 1 {
            let (a, b) = (self.indptr[r], self.indptr[r + 1]);
            f(r, &mut self.values[a..b]);
        }
    }
}

/// Vocabulary sizes for the class label and any extra condition fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInfo {
    pub n_classes: usize,
    pub extra_vocab: Vec<usize>,
}

/// Expression matrix plus per-cell class ids and optional extra condition
/// codes (one column per extra field).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub matrix: ExpressionMatrix,
    pub classes: Vec<usize>,
    pub extra_conds: Vec<Vec<usize>>, // extra_conds[field][cell]
    pub cond_info: ConditionInfo,
}

impl LabeledDataset {
    pub fn new(
        matrix: ExpressionMatrix,
        classes: Vec<usize>,
        extra_conds: Vec<Vec<usize>>,
        cond_info: ConditionInfo,
    ) -> Result<Self> {
        if classes.len() != matrix.n_cells() {
            return Err(Error::Config(format!(
                "{} labels for {} cells",
                classes.len(),
                matrix.n_cells()
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= cond_info.n_classes) {
            return Err(Error::Config(format!(
                "class id {bad} out of range ({} classes)",
                cond_info.n_classes
            )));
        }
        if extra_conds.len() != cond_info.extra_vocab.len() {
            return Err(Error::Config(format!(
                "{} condition columns for {} vocabularies",
                extra_conds.len(),
                cond_info.extra_vocab.len()
            )));
        }
        for (f, col) in extra_conds.iter().enumerate() {
            if col.len() != matrix.n_cells() {
                return Err(Error::Config(format!(
                    "condition column {f} has {} entries for {} cells",
                    col.len(),
                    matrix.n_cells()
                )));
            }
            if let Some(&bad) = col.iter().find(|&&c| c >= cond_info.extra_vocab[f]) {
                return Err(Error::Config(format!(
                    "condition code {bad} out of range in column {f}"
                )));
            }
        }
        Ok(LabeledDataset {
            matrix,
            classes,
            extra_conds,
            cond_info,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.matrix.n_cells()
    }

    pub fn n_genes(&self) -> usize {
        self.matrix.n_genes()
    }

    pub fn n_classes(&self) -> usize {
        self.cond_info.n_classes
    }

    /// Extra condition codes of one cell, in field order.
    pub fn extra_of(&self, cell: usize) -> Vec<usize> {
        self.extra_conds.iter().map(|col| col[cell]).collect()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            matrix: self.matrix.select_rows(idx),
            classes: idx.iter().map(|&i| self.classes[i]).collect(),
            extra_conds: self
                .extra_conds
                .iter()
                .map(|col| idx.iter().map(|&i| col[i]).collect())
                .collect(),
            cond_info: self.cond_info.clone(),
        }
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.cond_info.n_classes];
        for &c in &self.classes {
            sizes[c] += 1;
        }
        sizes
    }
}
