//! Count filtering and per-cell normalization.

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Cells with fewer total counts than this are dropped.
pub const MIN_COUNTS_PER_CELL: f64 = 10.0;
/// Genes expressed in fewer cells than this are dropped.
pub const MIN_CELLS_PER_GENE: usize = 3;
/// Per-cell count total after normalization, before log1p.
pub const TARGET_COUNTS: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterStats {
    pub cells_removed: usize,
    pub genes_removed: usize,
}

/// Quality-control pass applied to raw counts before normalization: drops
/// low-count cells, then genes expressed in too few of the remaining cells.
pub fn filter_dataset(ds: &LabeledDataset) -> Result<(LabeledDataset, FilterStats)> {
    let keep_cells: Vec<usize> = (0..ds.n_cells())
        .filter(|&i| ds.matrix.row_total(i) >= MIN_COUNTS_PER_CELL)
        .collect();
    if keep_cells.is_empty() {
        return Err(Error::Config(
            "filtering removed every cell (all below the count threshold)".into(),
        ));
    }
    let cells_removed = ds.n_cells() - keep_cells.len();
    let ds = ds.select(&keep_cells);

    let mut cells_per_gene = vec![0usize; ds.n_genes()];
    for (_, g, _) in ds.matrix.iter_entries() {
        cells_per_gene[g] += 1;
    }
    let keep_genes: Vec<usize> = (0..ds.n_genes())
        .filter(|&g| cells_per_gene[g] >= MIN_CELLS_PER_GENE)
        .collect();
    if keep_genes.is_empty() {
        return Err(Error::Config(
            "filtering removed every gene (none expressed in enough cells)".into(),
        ));
    }
    let genes_removed = ds.n_genes() - keep_genes.len();
    let filtered = LabeledDataset {
        matrix: ds.matrix.select_genes(&keep_genes),
        classes: ds.classes,
        extra_conds: ds.extra_conds,
        cond_info: ds.cond_info,
    };
    Ok((
        filtered,
        FilterStats {
            cells_removed,
            genes_removed,
        },
    ))
}

/// Scale each cell to `TARGET_COUNTS` total, then ln(1+v). Stored zeros stay
/// zero (the sparsity pattern is untouched); a zero-total cell is an error.
pub fn normalize_cells(ds: &LabeledDataset) -> Result<LabeledDataset> {
    let mut out = ds.clone();
    let mut bad_cell = None;
    out.matrix.map_rows(|cell, vals| {
        let total: f64 = vals.iter().sum();
        if total <= 0.0 {
            if bad_cell.is_none() {
                bad_cell = Some(cell);
            }
            return;
        }
        let scale = TARGET_COUNTS / total;
        for v in vals.iter_mut() {
            *v = (*v * scale).ln_1p();
        }
    });
    if let Some(cell) = bad_cell {
        return Err(Error::Config(format!(
            "cell {cell} has zero total counts and cannot be normalized"
        )));
    }
    Ok(out)
}
