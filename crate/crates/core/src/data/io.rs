//! Matrix Market coordinate files and the labels CSV.
//!
//! Matrix file: `%%MatrixMarket matrix coordinate real general` banner,
//! optional `%` comments, a `rows cols nnz` size line, then 1-based
//! `row col value` entries (cells are rows). Labels CSV: header
//! `cell_id,class_id[,cond_0,...]`, one row per cell, UTF-8, LF endings.
//! Float values are written in shortest round-trip form, so save -> load
//! -> save is byte-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ConditionInfo, ExpressionMatrix, LabeledDataset};
use crate::error::{Error, Result};

pub const MM_BANNER: &str = "%%MatrixMarket matrix coordinate real general";

pub fn save_matrix_market<P: AsRef<Path>>(path: P, m: &ExpressionMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MM_BANNER}")?;
    writeln!(w, "{} {} {}", m.n_cells(), m.n_genes(), m.nnz())?;
    for (r, c, v) in m.iter_entries() {
        writeln!(w, "{} {} {}", r + 1, c + 1, v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_matrix_market<P: AsRef<Path>>(path: P) -> Result<ExpressionMatrix> {
    let display = path.as_ref().display().to_string();
    let err = |line: usize, detail: String| Error::Parse {
        path: display.clone(),
        line,
        detail,
    };
    let f = File::open(path.as_ref())
        .map_err(|e| Error::Artifact(format!("cannot open {display}: {e}")))?;
    let reader = BufReader::new(f);
    let mut lines = reader.lines().enumerate();

    let (_, banner) = lines
        .next()
        .ok_or_else(|| err(1, "empty file".into()))?;
    let banner = banner?;
    if banner.trim() != MM_BANNER {
        return Err(err(1, format!("bad banner {banner:?}, expected {MM_BANNER:?}")));
    }

    let mut size: Option<(usize, usize, usize)> = None;
    let mut size_line = 0;
    for (idx, line) in &mut lines {
        let line = line?;
        let lineno = idx + 1;
        if line.starts_with('%') || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(err(lineno, format!("size line needs 3 fields, got {}", parts.len())));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| err(lineno, format!("bad {what} {s:?}")))
        };
        size = Some((
            parse(parts[0], "row count")?,
            parse(parts[1], "column count")?,
            parse(parts[2], "entry count")?,
        ));
        size_line = lineno;
        break;
    }
    let (n_cells, n_genes, nnz) =
        size.ok_or_else(|| err(size_line.max(1), "missing size line".into()))?;

    let mut triplets = Vec::with_capacity(nnz);
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        if line.starts_with('%') || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(err(lineno, format!("entry needs 3 fields, got {}", parts.len())));
        }
        let r: usize = parts[0]
            .parse()
            .map_err(|_| err(lineno, format!("bad row index {:?}", parts[0])))?;
        let c: usize = parts[1]
            .parse()
            .map_err(|_| err(lineno, format!("bad column index {:?}", parts[1])))?;
        let v: f64 = parts[2]
            .parse()
            .map_err(|_| err(lineno, format!("bad value {:?}", parts[2])))?;
        if r == 0 || c == 0 || r > n_cells || c > n_genes {
            return Err(err(
                lineno,
                format!("index ({r},{c}) outside 1..={n_cells} x 1..={n_genes}"),
            ));
        }
        if v < 0.0 || !v.is_finite() {
            return Err(err(lineno, format!("value {v} must be finite and >= 0")));
        }
        triplets.push((r - 1, c - 1, v));
    }
    if triplets.len() != nnz {
        return Err(Error::Parse {
            path: display,
            line: size_line,
            detail: format!("size line promises {nnz} entries, file has {}", triplets.len()),
        });
    }
    ExpressionMatrix::from_triplets(n_cells, n_genes, triplets)
}

pub fn save_labels<P: AsRef<Path>>(path: P, ds: &LabeledDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = String::from("cell_id,class_id");
    for f in 0..ds.extra_conds.len() {
        header.push_str(&format!(",cond_{f}"));
    }
    writeln!(w, "{header}")?;
    for i in 0..ds.n_cells() {
        let mut line = format!("cell_{i},{}", ds.classes[i]);
        for col in &ds.extra_conds {
            line.push_str(&format!(",{}", col[i]));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads class ids and condition columns. Vocabulary sizes are inferred as
/// max+1 unless `info` pins them.
pub fn load_labels<P: AsRef<Path>>(
    path: P,
    info: Option<ConditionInfo>,
) -> Result<(Vec<usize>, Vec<Vec<usize>>, ConditionInfo)> {
    let display = path.as_ref().display().to_string();
    let err = |line: usize, detail: String| Error::Parse {
        path: display.clone(),
        line,
        detail,
    };
    let f = File::open(path.as_ref())
        .map_err(|e| Error::Artifact(format!("cannot open {display}: {e}")))?;
    let mut lines = BufReader::new(f).lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let header = header?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 2 || cols[0] != "cell_id" || cols[1] != "class_id" {
        return Err(err(1, format!("bad header {header:?}")));
    }
    let n_extra = cols.len() - 2;
    for (f_, col) in cols[2..].iter().enumerate() {
        if *col != format!("cond_{f_}") {
            return Err(err(1, format!("bad condition column name {col:?}")));
        }
    }
    let mut classes = Vec::new();
    let mut extra: Vec<Vec<usize>> = vec![Vec::new(); n_extra];
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.trim_end().split(',').collect();
        if parts.len() != cols.len() {
            return Err(err(
                lineno,
                format!("{} fields, header has {}", parts.len(), cols.len()),
            ));
        }
        let class: usize = parts[1]
            .parse()
            .map_err(|_| err(lineno, format!("bad class id {:?}", parts[1])))?;
        classes.push(class);
        for f_ in 0..n_extra {
            let v: usize = parts[2 + f_]
                .parse()
                .map_err(|_| err(lineno, format!("bad condition code {:?}", parts[2 + f_])))?;
            extra[f_].push(v);
        }
    }
    let info = match info {
        Some(i) => i,
        None => ConditionInfo {
            n_classes: classes.iter().max().map_or(0, |m| m + 1),
            extra_vocab: extra
                .iter()
                .map(|col| col.iter().max().map_or(0, |m| m + 1))
                .collect(),
        },
    };
    Ok((classes, extra, info))
}

pub fn save_dataset<P: AsRef<Path>>(matrix_path: P, labels_path: P, ds: &LabeledDataset) -> Result<()> {
    save_matrix_market(matrix_path, &ds.matrix)?;
    save_labels(labels_path, ds)
}

pub fn load_dataset<P: AsRef<Path>>(
    matrix_path: P,
    labels_path: P,
    info: Option<ConditionInfo>,
) -> Result<LabeledDataset> {
    let matrix = load_matrix_market(&matrix_path)?;
    let (classes, extra, info) = load_labels(&labels_path, info)?;
    if classes.len() != matrix.n_cells() {
        return Err(Error::Config(format!(
            "labels file has {} cells, matrix has {}",
            classes.len(),
            matrix.n_cells()
        )));
    }
    LabeledDataset::new(matrix, classes, extra, info)
}
