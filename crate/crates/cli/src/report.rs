//! `report`: merge every per-trial metrics CSV in the metrics directory into
//! one aggregate (mean/std per axis tuple), sorted by the axis columns.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use ldtl_core::eval::mean_std;
use ldtl_core::{Error, Result};

struct ParsedFile {
    axes: Vec<Vec<String>>, // per row
    accuracy: Vec<f64>,
}

fn parse_err(path: &Path, line: usize, detail: String) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        detail,
    }
}

/// A metrics file is `axis...,trial,accuracy` with at least one axis column.
fn parse_metrics(path: &Path, expected_header: &mut Option<String>) -> Result<ParsedFile> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty metrics file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "trial" || cols[cols.len() - 1] != "accuracy" {
        return Err(parse_err(
            path,
            1,
            format!("header {header:?} must end in `trial,accuracy` after at least one axis column"),
        ));
    }
    match expected_header {
        Some(h) if h != header => {
            return Err(parse_err(
                path,
                1,
                format!("header {header:?} does not match {h:?} from the other metrics files"),
            ));
        }
        Some(_) => {}
        None => *expected_header = Some(header.to_string()),
    }

    let n_cols = cols.len();
    let mut axes = Vec::new();
    let mut accuracy = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_cols {
            return Err(parse_err(
                path,
                idx + 1,
                format!("{} fields, header has {n_cols}", fields.len()),
            ));
        }
        fields[n_cols - 2].parse::<usize>().map_err(|_| {
            parse_err(path, idx + 1, format!("bad trial index {:?}", fields[n_cols - 2]))
        })?;
        let acc: f64 = fields[n_cols - 1].parse().map_err(|_| {
            parse_err(path, idx + 1, format!("bad accuracy {:?}", fields[n_cols - 1]))
        })?;
        axes.push(fields[..n_cols - 2].iter().map(|s| s.to_string()).collect());
        accuracy.push(acc);
    }
    Ok(ParsedFile { axes, accuracy })
}

/// Numbers sort numerically, everything else lexicographically; applied
/// column by column.
fn axis_cmp(a: &[String], b: &[String]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let ord = match (x.parse::<f64>(), y.parse::<f64>()) {
            (Ok(nx), Ok(ny)) => nx.partial_cmp(&ny).unwrap_or(Ordering::Equal),
            _ => x.cmp(y),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    Ordering::Equal
}

pub fn report(metrics_dir: &Path, out_path: &Path) -> Result<usize> {
    let mut files: Vec<PathBuf> = fs::read_dir(metrics_dir)
        .map_err(|e| {
            Error::Artifact(format!(
                "cannot read metrics directory {}: {e}; run `eval` first",
                metrics_dir.display()
            ))
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no metrics CSVs in {}",
            metrics_dir.display()
        )));
    }

    let mut header: Option<String> = None;
    let mut groups: Vec<(Vec<String>, Vec<f64>)> = Vec::new();
    for file in &files {
        let parsed = parse_metrics(file, &mut header)?;
        for (axes, acc) in parsed.axes.into_iter().zip(parsed.accuracy) {
            match groups.iter_mut().find(|(k, _)| *k == axes) {
                Some((_, accs)) => accs.push(acc),
                None => groups.push((axes, vec![acc])),
            }
        }
    }
    groups.sort_by(|(a, _), (b, _)| axis_cmp(a, b));

    let header = header.expect("at least one file parsed");
    let axis_cols: Vec<&str> = header.split(',').collect();
    let axis_header = axis_cols[..axis_cols.len() - 2].join(",");
    let mut out = format!("{axis_header},mean,std\n");
    for (axes, accs) in &groups {
        let (mean, std) = mean_std(accs);
        out.push_str(&format!("{},{mean:.6},{std:.6}\n", axes.join(",")));
    }
    fs::write(out_path, out)?;
    Ok(groups.len())
}
