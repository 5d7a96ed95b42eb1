//! Subcommand bodies. Each stage reads the artifacts of the previous ones,
//! writes its own under the output directory, and never touches upstream
//! files again, so a rerun of any stage is byte-reproducible.

use std::fs;
use std::path::Path;

use ldtl_core::data::{
    filter_dataset, load_dataset, make_toy_dataset, normalize_cells, save_dataset, split_dataset,
    LabeledDataset,
};
use ldtl_core::distill::{distill_run, synthesize};
use ldtl_core::eval::{ablation_grid, evaluate_synthetic, GridReport, MetricsReport, SyntheticSet};
use ldtl_core::foundation::{load_foundation, save_foundation, train_autoencoder};
use ldtl_core::generator::{load_generator, save_generator, train_generator};
use ldtl_core::Result;

use crate::config::{require, Paths, RunConfig};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let raw = make_toy_dataset(&cfg.data)?;
    ensure_parent(&paths.raw_matrix())?;
    save_dataset(paths.raw_matrix(), paths.raw_labels(), &raw)?;

    let (kept, stats) = filter_dataset(&raw)?;
    let norm = normalize_cells(&kept)?;
    let (train, test) = split_dataset(&norm, cfg.train_fraction, cfg.split_seed())?;
    save_dataset(paths.train_matrix(), paths.train_labels(), &train)?;
    save_dataset(paths.test_matrix(), paths.test_labels(), &test)?;

    println!(
        "gen-data: {} cells x {} genes ({:.1}% zeros), filtered {} cells / {} genes, split {}/{}",
        raw.n_cells(),
        raw.n_genes(),
        100.0 * raw.matrix.zero_fraction(),
        stats.cells_removed,
        stats.genes_removed,
        train.n_cells(),
        test.n_cells(),
    );
    Ok(())
}

fn load_train(paths: &Paths) -> Result<LabeledDataset> {
    require(&paths.train_matrix(), "gen-data")?;
    require(&paths.train_labels(), "gen-data")?;
    load_dataset(paths.train_matrix(), paths.train_labels(), None)
}

fn load_test(paths: &Paths) -> Result<LabeledDataset> {
    require(&paths.test_matrix(), "gen-data")?;
    require(&paths.test_labels(), "gen-data")?;
    load_dataset(paths.test_matrix(), paths.test_labels(), None)
}

pub fn train_ae(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let train = load_train(paths)?;
    let (enc, dec) = train_autoencoder(&train, &cfg.autoencoder)?;
    ensure_parent(&paths.foundation())?;
    save_foundation(paths.foundation(), &enc, &dec)?;
    println!(
        "train-ae: {} -> {} latent, checkpoint {}",
        enc.d_in(),
        enc.latent_dim(),
        paths.foundation().display()
    );
    Ok(())
}

pub fn train_scdg(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let train = load_train(paths)?;
    require(&paths.foundation(), "train-ae")?;
    let (enc, _dec) = load_foundation(paths.foundation())?;
    let (den, cond) = train_generator(&enc, &train, &cfg.scdg)?;
    ensure_parent(&paths.generator())?;
    save_generator(paths.generator(), &den, &cond, &cfg.scdg.schedule()?)?;
    println!(
        "train-scdg: t_max {}, checkpoint {}",
        den.t_max,
        paths.generator().display()
    );
    Ok(())
}

pub fn distill(cfg: &RunConfig, paths: &Paths) -> Result<()> {
    let train = load_train(paths)?;
    require(&paths.foundation(), "train-ae")?;
    let (enc, dec) = load_foundation(paths.foundation())?;
    require(&paths.generator(), "train-scdg")?;
    let (den, cond, _schedule) = load_generator(paths.generator())?;

    let (codes, trace) = distill_run(&train, &enc, &dec, &den, &cond, &cfg.distill)?;
    let t_gen = cfg.distill.resolved_t_gen(den.t_max);
    let synth = synthesize(&den, &cond, &dec, &codes, t_gen, cfg.distill.decoder_only)?;

    let matrix = ldtl_core::data::ExpressionMatrix::from_dense(&synth)?;
    let ds = LabeledDataset::new(
        matrix,
        codes.classes.clone(),
        codes.extras.clone(),
        train.cond_info.clone(),
    )?;
    ensure_parent(&paths.synthetic_matrix())?;
    save_dataset(paths.synthetic_matrix(), paths.synthetic_labels(), &ds)?;
    trace.write_csv(paths.trace())?;

    let last = trace.rows.len().saturating_sub(1);
    println!(
        "distill: {} rows, matching loss {:.4} -> {:.4}, set {}",
        ds.n_cells(),
        trace.total_loss(0),
        trace.total_loss(last),
        paths.synthetic_matrix().display()
    );
    Ok(())
}

/// Common per-trial CSV schema for everything under metrics/: the distill
/// axes plus the eval model, so `report` can merge single-run and grid files.
pub const METRIC_HEADER: &str = "spc,generator,frozen,head_layers,model,trial,accuracy";

fn metric_rows(axes: &str, model: &str, rep: &MetricsReport) -> String {
    let mut out = String::new();
    for (i, a) in rep.trials.iter().enumerate() {
        out.push_str(&format!("{axes},{model},{i},{a:.6}\n"));
    }
    out
}

pub fn eval(cfg: &RunConfig, paths: &Paths, threads: usize) -> Result<()> {
    let test = load_test(paths)?;
    require(&paths.foundation(), "train-ae")?;
    let (enc, dec) = load_foundation(paths.foundation())?;
    require(&paths.synthetic_matrix(), "distill")?;
    require(&paths.synthetic_labels(), "distill")?;
    let synth = load_dataset(
        paths.synthetic_matrix(),
        paths.synthetic_labels(),
        Some(test.cond_info.clone()),
    )?;
    let all: Vec<usize> = (0..synth.n_cells()).collect();
    let set = SyntheticSet {
        data: synth.matrix.dense_rows(&all),
        labels: synth.classes.clone(),
    };

    let eval_cfg = cfg.eval.to_config(threads, cfg.eval_seed());
    let model = &cfg.eval.model;
    let enc_opt = model.needs_encoder().then_some(&enc);
    let rep = evaluate_synthetic(&set, &test, enc_opt, model, &eval_cfg)?;

    let d = &cfg.distill;
    let axes = format!(
        "{},{},{},{}",
        d.spc,
        if d.decoder_only { "decoder-only" } else { "scdg" },
        d.freeze_foundation,
        d.head_layers
    );
    fs::create_dir_all(paths.metrics_dir())?;
    let mut csv = String::from(METRIC_HEADER);
    csv.push('\n');
    csv.push_str(&metric_rows(&axes, rep.model.as_str(), &rep));
    fs::write(paths.eval_metrics(), csv)?;
    println!(
        "eval: {} accuracy {:.4} +/- {:.4} over {} trials, {}",
        rep.model,
        rep.mean,
        rep.std,
        rep.trials.len(),
        paths.eval_metrics().display()
    );

    if let Some(grid) = &cfg.grid {
        let train = load_train(paths)?;
        require(&paths.generator(), "train-scdg")?;
        let (den, cond, _schedule) = load_generator(paths.generator())?;
        let report = ablation_grid(
            &train,
            &test,
            &enc,
            &dec,
            &den,
            &cond,
            &grid.spec(),
            &cfg.distill,
            &eval_cfg,
            &grid.seeds,
        )?;
        write_grid(&report, paths)?;
        println!(
            "eval: grid {} cells -> {} and {}",
            report.rows.len(),
            paths.grid_metrics().display(),
            paths.grid_aggregate().display()
        );
    }
    Ok(())
}

fn write_grid(report: &GridReport, paths: &Paths) -> Result<()> {
    let mut csv = String::from(METRIC_HEADER);
    csv.push('\n');
    for row in &report.rows {
        if let Ok(rep) = &row.outcome {
            let axes = format!(
                "{},{},{},{}",
                row.spc, row.generator, row.frozen, row.head_layers
            );
            csv.push_str(&metric_rows(&axes, rep.model.as_str(), rep));
        }
    }
    fs::write(paths.grid_metrics(), csv)?;
    fs::write(paths.grid_aggregate(), report.aggregate_csv())?;
    Ok(())
}
