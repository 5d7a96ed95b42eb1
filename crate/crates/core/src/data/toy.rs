//! Seeded toy count data: class-specific marker genes over a Poisson
//! background, geometric class imbalance, and independent zeroing to hit a
//! target sparsity.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use super::{ConditionInfo, ExpressionMatrix, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

/// Expression rate of a marker gene relative to background genes.
const MARKER_BOOST: f64 = 50.0;
/// Log-normal sigma of per-cell library size jitter.
const LIBRARY_SIGMA: f64 = 0.25;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub n_cells: usize,
    pub n_genes: usize,
    pub n_classes: usize,
    pub markers_per_class: usize,
    /// Largest-to-smallest class size ratio (rho >= 1).
    pub imbalance_ratio: f64,
    pub zero_fraction: f64,
    /// Mean library size (total counts per cell before zeroing).
    pub library_size: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_cells: 5000,
            n_genes: 2000,
            n_classes: 10,
            markers_per_class: 20,
            imbalance_ratio: 70.0,
            zero_fraction: 0.9,
            library_size: 2500.0,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_cells == 0 || self.n_genes == 0 {
            return Err(Error::Config("toy data dimensions must be positive".into()));
        }
        if self.markers_per_class == 0 {
            return Err(Error::Config("markers_per_class must be positive".into()));
        }
        if self.n_genes < 10 * self.markers_per_class {
            return Err(Error::Config(format!(
                "n_genes {} must be at least 10x markers_per_class {}",
                self.n_genes, self.markers_per_class
            )));
        }
        if self.n_genes < self.n_classes * self.markers_per_class {
            return Err(Error::Config(
                "not enough genes for disjoint marker blocks".into(),
            ));
        }
        if self.imbalance_ratio < 1.0 {
            return Err(Error::Config(format!(
                "imbalance_ratio {} must be >= 1",
                self.imbalance_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.zero_fraction) {
            return Err(Error::Config(format!(
                "zero_fraction {} must be in [0,1)",
                self.zero_fraction
            )));
        }
        if self.library_size <= 0.0 {
            return Err(Error::Config("library_size must be positive".into()));
        }
        Ok(())
    }

    /// Class sizes interpolated geometrically between n_max and n_max/rho,
    /// summing exactly to n_cells (largest-remainder rounding, min 1).
    pub fn class_sizes(&self) -> Result<Vec<usize>> {
        let c = self.n_classes;
        let weights: Vec<f64> = (0..c)
            .map(|i| {
                if c == 1 {
                    1.0
                } else {
                    self.imbalance_ratio.powf(-(i as f64) / (c as f64 - 1.0))
                }
            })
            .collect();
        let wsum: f64 = weights.iter().sum();
        let raw: Vec<f64> = weights
            .iter()
            .map(|w| self.n_cells as f64 * w / wsum)
            .collect();
        let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let assigned: usize = sizes.iter().sum();
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for i in 0..self.n_cells - assigned {
            sizes[order[i % c]] += 1;
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "class sizes {sizes:?} include an empty class; increase n_cells or reduce imbalance_ratio"
            )));
        }
        Ok(sizes)
    }
}

/// Generate labeled toy counts. Class `c` over-expresses the marker block
/// `[c*m, (c+1)*m)`; each cell's counts are Poisson draws against a jittered
/// library size, then entries are independently zeroed to reach the target
/// zero fraction (error if the natural zeros already exceed it).
pub fn make_toy_dataset(cfg: &ToyConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let tree = SeedTree::new(cfg.seed);
    let sizes = cfg.class_sizes()?;

    // per-class gene rate profiles, each summing to 1
    let m = cfg.markers_per_class;
    let background = 1.0;
    let profile_total =
        (cfg.n_genes - m) as f64 * background + m as f64 * background * MARKER_BOOST;
    let marker_p = background * MARKER_BOOST / profile_total;
    let back_p = background / profile_total;

    let mut counts_rng = tree.stream("toy/counts");
    let lib_dist = LogNormal::new(cfg.library_size.ln(), LIBRARY_SIGMA)
        .map_err(|e| Error::Config(format!("library size distribution: {e}")))?;

    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut classes = Vec::with_capacity(cfg.n_cells);
    let mut cell = 0;
    for (class, &size) in sizes.iter().enumerate() {
        let marker_lo = class * m;
        let marker_hi = marker_lo + m;
        for _ in 0..size {
            let lib = lib_dist.sample(&mut counts_rng);
            let marker_pois = Poisson::new(lib * marker_p)
                .map_err(|e| Error::Config(format!("poisson rate {}: {e}", lib * marker_p)))?;
            let back_pois = Poisson::new(lib * back_p)
                .map_err(|e| Error::Config(format!("poisson rate {}: {e}", lib * back_p)))?;
            for gene in 0..cfg.n_genes {
                let draw = if gene >= marker_lo && gene < marker_hi {
                    marker_pois.sample(&mut counts_rng)
                } else {
                    back_pois.sample(&mut counts_rng)
                };
                if draw > 0.0 {
                    triplets.push((cell, gene, draw));
                }
            }
            classes.push(class);
            cell += 1;
        }
    }

    // independent zeroing to the target sparsity
    let total_entries = cfg.n_cells * cfg.n_genes;
    let wanted_nonzero =
        ((1.0 - cfg.zero_fraction) * total_entries as f64).round() as usize;
    if triplets.len() < wanted_nonzero {
        return Err(Error::Config(format!(
            "zero fraction {} infeasible: counts are already {:.4} zero",
            cfg.zero_fraction,
            1.0 - triplets.len() as f64 / total_entries as f64
        )));
    }
    let keep_prob = wanted_nonzero as f64 / triplets.len() as f64;
    let mut drop_rng = tree.stream("toy/dropout");
    triplets.retain(|_| drop_rng.gen_bool(keep_prob));

    // shuffle cell order so class blocks are not contiguous
    let mut order: Vec<usize> = (0..cfg.n_cells).collect();
    order.shuffle(&mut tree.stream("toy/order"));
    let mut new_pos = vec![0usize; cfg.n_cells];
    for (new, &old) in order.iter().enumerate() {
        new_pos[old] = new;
    }
    for t in triplets.iter_mut() {
        t.0 = new_pos[t.0];
    }
    let mut shuffled_classes = vec![0usize; cfg.n_cells];
    for (old, &c) in classes.iter().enumerate() {
        shuffled_classes[new_pos[old]] = c;
    }

    let matrix = ExpressionMatrix::from_triplets(cfg.n_cells, cfg.n_genes, triplets)?;
    LabeledDataset::new(
        matrix,
        shuffled_classes,
        Vec::new(),
        ConditionInfo {
            n_classes: cfg.n_classes,
            extra_vocab: Vec::new(),
        },
    )
}
