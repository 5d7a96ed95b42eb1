//! Evaluation-protocol contracts: determinism of the trial loop, chance-level
//! and ordering behavior on a separable toy set, the data-level baseline's
//! negativity evidence, and the grid runner's skip semantics.

use std::sync::OnceLock;

use ldtl_core::data::{make_toy_dataset, normalize_cells, split_dataset, LabeledDataset, ToyConfig};
use ldtl_core::distill::{DistillConfig, MatchMode};
use ldtl_core::eval::{
    ablation_grid, baseline_data_level, baseline_random_real, evaluate_synthetic, mean_std,
    EvalConfig, EvalModelSpec, GeneratorKind, GridSpec, SyntheticSet,
};
use ldtl_core::foundation::{train_autoencoder, AEConfig, Decoder, Encoder};
use ldtl_core::generator::{train_generator, ConditionEmbedder, Denoiser, GeneratorConfig};
use ldtl_core::rng::SeedTree;
use ldtl_core::tensor::Tensor;
use ldtl_core::Error;

struct Fixture {
    train: LabeledDataset,
    test: LabeledDataset,
    enc: Encoder,
    dec: Decoder,
    den: Denoiser,
    cond: ConditionEmbedder,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let toy = ToyConfig {
            n_cells: 300,
            n_genes: 80,
            n_classes: 3,
            markers_per_class: 8,
            imbalance_ratio: 1.5,
            zero_fraction: 0.3,
            library_size: 2000.0,
            seed: 5,
        };
        let norm = normalize_cells(&make_toy_dataset(&toy).unwrap()).unwrap();
        let (train, test) = split_dataset(&norm, 0.75, 11).unwrap();
        let ae = AEConfig {
            epochs: 25,
            batch_size: 64,
            lr: 0.03,
            seed: 3,
        };
        let (enc, dec) = train_autoencoder(&train, &ae).unwrap();
        let gen = GeneratorConfig {
            t_max: 50,
            beta_min: 1e-4,
            beta_max: 0.1,
            epochs: 10,
            batch_size: 64,
            lr: 0.05,
            t_gen: None,
            seed: 17,
        };
        let (den, cond) = train_generator(&enc, &train, &gen).unwrap();
        Fixture {
            train,
            test,
            enc,
            dec,
            den,
            cond,
        }
    })
}

fn full_train_set(train: &LabeledDataset) -> SyntheticSet {
    let all: Vec<usize> = (0..train.n_cells()).collect();
    SyntheticSet {
        data: train.matrix.dense_rows(&all),
        labels: train.classes.clone(),
    }
}

fn quick_eval(n_trials: usize, epochs: usize, seed: u64) -> EvalConfig {
    EvalConfig {
        n_trials,
        epochs,
        lr: 0.1,
        batch_size: 4096, // full batch on these fixtures
        threads: 1,
        seed,
    }
}

fn head_model() -> EvalModelSpec {
    EvalModelSpec::HeadOnFeatures {
        layers: 1,
        hidden: 64,
    }
}

// ---- statistics ------------------------------------------------------------

#[test]
fn mean_std_matches_hand_computed_values() {
    let (m, s) = mean_std(&[0.5, 0.7]);
    assert!((m - 0.6).abs() < 1e-15, "{m}");
    assert!((s - 0.1).abs() < 1e-15, "{s}"); // population std, not sample
    let (m1, s1) = mean_std(&[0.42]);
    assert_eq!(m1, 0.42);
    assert_eq!(s1, 0.0);
    let (m4, s4) = mean_std(&[1.0, 1.0, 1.0, 1.0]);
    assert_eq!((m4, s4), (1.0, 0.0));
}

// ---- random-real baseline ----------------------------------------------------

#[test]
fn random_real_baseline_is_stratified_and_deterministic() {
    let f = fixture();
    let spc = 3;
    let a = baseline_random_real(&f.train, spc, 7).unwrap();
    let b = baseline_random_real(&f.train, spc, 7).unwrap();
    assert_eq!(a.data.as_slice(), b.data.as_slice());
    assert_eq!(a.labels, b.labels);

    let c = f.train.n_classes();
    assert_eq!(a.n_rows(), c * spc);
    for class in 0..c {
        assert_eq!(a.labels.iter().filter(|&&y| y == class).count(), spc);
    }

    // every sampled row is an actual train cell of the labeled class
    let (_, d) = a.data.dims2();
    for (i, &y) in a.labels.iter().enumerate() {
        let row = &a.data.as_slice()[i * d..(i + 1) * d];
        let hit = (0..f.train.n_cells()).any(|j| {
            f.train.classes[j] == y && f.train.matrix.dense_rows(&[j]).as_slice() == row
        });
        assert!(hit, "row {i} not found among class {y} train cells");
    }

    let other = baseline_random_real(&f.train, spc, 8).unwrap();
    assert_ne!(
        a.data.as_slice(),
        other.data.as_slice(),
        "different seeds drew identical sets"
    );
}

// ---- validation ------------------------------------------------------------

#[test]
fn evaluate_rejects_bad_inputs_as_validation_errors() {
    let f = fixture();
    let set = baseline_random_real(&f.train, 2, 0).unwrap();
    let cfg = quick_eval(2, 3, 0);

    let empty = SyntheticSet {
        data: Tensor::zeros(vec![0, f.train.n_genes()]),
        labels: vec![],
    };
    let e = evaluate_synthetic(&empty, &f.test, Some(&f.enc), &head_model(), &cfg).unwrap_err();
    assert!(e.is_validation(), "{e}");

    let mismatch = SyntheticSet {
        data: set.data.clone(),
        labels: set.labels[..set.labels.len() - 1].to_vec(),
    };
    let e = evaluate_synthetic(&mismatch, &f.test, Some(&f.enc), &head_model(), &cfg).unwrap_err();
    assert!(e.is_validation(), "{e}");

    let mut bad = set.clone();
    bad.data.as_mut_slice()[0] = f64::NAN;
    let e = evaluate_synthetic(&bad, &f.test, Some(&f.enc), &head_model(), &cfg).unwrap_err();
    assert!(e.is_validation(), "{e}");

    // feature-space model without an encoder
    let e = evaluate_synthetic(&set, &f.test, None, &head_model(), &cfg).unwrap_err();
    assert!(matches!(e, Error::Config(ref m) if m.contains("encoder")), "{e}");

    // a class present in test but absent from the synthetic set
    let only0 = SyntheticSet {
        data: set.data.clone(),
        labels: vec![0; set.n_rows()],
    };
    let e = evaluate_synthetic(&only0, &f.test, Some(&f.enc), &head_model(), &cfg).unwrap_err();
    assert!(matches!(e, Error::Config(ref m) if m.contains("class")), "{e}");

    for bad_cfg in [
        EvalConfig { n_trials: 0, ..cfg.clone() },
        EvalConfig { epochs: 0, ..cfg.clone() },
        EvalConfig { lr: 0.0, ..cfg.clone() },
        EvalConfig { batch_size: 0, ..cfg.clone() },
        EvalConfig { threads: 0, ..cfg.clone() },
    ] {
        let e = evaluate_synthetic(&set, &f.test, Some(&f.enc), &head_model(), &bad_cfg)
            .unwrap_err();
        assert!(e.is_validation(), "{e}");
    }

    for bad_model in [
        EvalModelSpec::HeadOnFeatures { layers: 0, hidden: 8 },
        EvalModelSpec::HeadOnFeatures { layers: 4, hidden: 8 },
        EvalModelSpec::HeadOnFeatures { layers: 2, hidden: 0 },
        EvalModelSpec::MlpRaw { hidden: 0 },
        EvalModelSpec::AttentionPooled { width: 0 },
    ] {
        let e = evaluate_synthetic(&set, &f.test, Some(&f.enc), &bad_model, &cfg).unwrap_err();
        assert!(e.is_validation(), "{e}");
    }
}

// ---- determinism -----------------------------------------------------------

#[test]
fn reports_are_byte_identical_across_reruns_and_thread_counts() {
    let f = fixture();
    let set = baseline_random_real(&f.train, 2, 1).unwrap();
    let cfg = quick_eval(4, 10, 9);

    let a = evaluate_synthetic(&set, &f.test, Some(&f.enc), &head_model(), &cfg).unwrap();
    let b = evaluate_synthetic(&set, &f.test, Some(&f.enc), &head_model(), &cfg).unwrap();
    assert_eq!(a.per_trial_csv(), b.per_trial_csv());
    assert_eq!(a.aggregate_csv(), b.aggregate_csv());
    assert_eq!(a.trials, b.trials);

    let threaded = EvalConfig { threads: 2, ..cfg };
    let c = evaluate_synthetic(&set, &f.test, Some(&f.enc), &head_model(), &threaded).unwrap();
    assert_eq!(a.trials, c.trials, "trial results depend on thread count");
}

// ---- accuracy behavior -------------------------------------------------------

#[test]
fn noise_synthetic_scores_near_chance() {
    let f = fixture();
    let c = f.train.n_classes();
    let mut rng = SeedTree::new(99).stream("noise");
    let labels: Vec<usize> = (0..3 * c).map(|i| i % c).collect();
    let set = SyntheticSet {
        data: Tensor::randn(vec![labels.len(), f.train.n_genes()], 0.5, &mut rng),
        labels,
    };
    let cfg = quick_eval(4, 30, 2);
    let rep = evaluate_synthetic(&set, &f.test, None, &EvalModelSpec::LogisticRaw, &cfg).unwrap();
    let chance = 1.0 / c as f64;
    assert!(
        (rep.mean - chance).abs() < 0.18,
        "noise-trained model scored {} (chance {chance})",
        rep.mean
    );
}

#[test]
fn full_train_set_beats_random_real_at_spc_one() {
    let f = fixture();
    let cfg = quick_eval(5, 40, 4);
    let full = evaluate_synthetic(
        &full_train_set(&f.train),
        &f.test,
        Some(&f.enc),
        &head_model(),
        &cfg,
    )
    .unwrap();
    let rand1 = baseline_random_real(&f.train, 1, 4).unwrap();
    let rr = evaluate_synthetic(&rand1, &f.test, Some(&f.enc), &head_model(), &cfg).unwrap();

    for &t in full.trials.iter().chain(rr.trials.iter()) {
        assert!((0.0..=1.0).contains(&t), "accuracy {t} out of range");
    }
    assert!(
        full.mean >= rr.mean - 0.02,
        "full train {} below random-real {}",
        full.mean,
        rr.mean
    );
    assert!(
        full.mean > 1.0 / 3.0 + 0.2,
        "full-train accuracy {} barely above chance",
        full.mean
    );
}

#[test]
fn every_model_architecture_trains_and_scores() {
    let f = fixture();
    let set = baseline_random_real(&f.train, 5, 3).unwrap();
    let cfg = quick_eval(2, 25, 6);
    let chance = 1.0 / f.train.n_classes() as f64;

    for (model, needs_enc, floor) in [
        (head_model(), true, chance + 0.1),
        (EvalModelSpec::HeadOnFeatures { layers: 2, hidden: 16 }, true, chance),
        (EvalModelSpec::HeadOnFeatures { layers: 3, hidden: 16 }, true, chance),
        (EvalModelSpec::LogisticRaw, false, chance + 0.1),
        (EvalModelSpec::MlpRaw { hidden: 16 }, false, chance + 0.1),
        (EvalModelSpec::AttentionPooled { width: 8 }, false, 0.0),
    ] {
        let enc = needs_enc.then_some(&f.enc);
        let rep = evaluate_synthetic(&set, &f.test, enc, &model, &cfg).unwrap();
        assert_eq!(rep.trials.len(), cfg.n_trials);
        assert_eq!(rep.model, model.tag());
        for &t in &rep.trials {
            assert!((0.0..=1.0).contains(&t), "{}: accuracy {t}", rep.model);
        }
        assert!(
            rep.mean >= floor,
            "{} scored {} below floor {floor}",
            rep.model,
            rep.mean
        );
    }
}

#[test]
fn minibatch_path_matches_protocol_and_stays_deterministic() {
    let f = fixture();
    let set = full_train_set(&f.train); // large enough to force batching
    let cfg = EvalConfig {
        batch_size: 64,
        ..quick_eval(2, 3, 12)
    };
    let a = evaluate_synthetic(&set, &f.test, None, &EvalModelSpec::LogisticRaw, &cfg).unwrap();
    let b = evaluate_synthetic(&set, &f.test, None, &EvalModelSpec::LogisticRaw, &cfg).unwrap();
    assert_eq!(a.trials, b.trials);
    assert!(a.mean > 0.4, "minibatch training failed to learn: {}", a.mean);
}

// ---- data-level baseline -------------------------------------------------------

fn data_cfg(steps: usize, seed: u64) -> DistillConfig {
    DistillConfig {
        steps,
        class_epochs: 2,
        spc: 2,
        mode: MatchMode::Dm,
        lr_z: 0.5,
        lr_head: 0.1,
        batch_per_class: 16,
        seed,
        ..DistillConfig::default()
    }
}

#[test]
fn data_level_with_zero_steps_returns_the_random_real_init() {
    let f = fixture();
    let cfg = data_cfg(0, 21);
    let out = baseline_data_level(&f.train, &f.enc, MatchMode::Dm, &cfg).unwrap();
    let init = baseline_random_real(&f.train, cfg.spc, cfg.seed).unwrap();
    assert_eq!(out.set.data.as_slice(), init.data.as_slice());
    assert_eq!(out.set.labels, init.labels);
    assert!(out.trace.rows.is_empty());
    assert_eq!(out.neg_rate, 0.0);
}

#[test]
fn data_level_updates_reduce_loss_and_leave_the_count_manifold() {
    let f = fixture();
    let cfg = data_cfg(25, 21);
    let out = baseline_data_level(&f.train, &f.enc, MatchMode::Dm, &cfg).unwrap();

    assert_eq!(out.trace.rows.len(), cfg.steps);
    let first = out.trace.total_loss(0);
    let last = out.trace.total_loss(cfg.steps - 1);
    assert!(
        last < first,
        "data-level matching loss did not decrease: {first} -> {last}"
    );

    // raw expression updates go negative and must be clamped
    assert!(
        out.neg_rate > 0.0,
        "no negative entries were produced; clamping evidence missing"
    );
    assert!(
        out.set.data.as_slice().iter().all(|&v| v >= 0.0),
        "clamp failed: negative entries in the returned set"
    );
}

#[test]
fn data_level_rejects_the_unfrozen_ablation() {
    let f = fixture();
    let mut cfg = data_cfg(2, 0);
    cfg.freeze_foundation = false;
    let e = baseline_data_level(&f.train, &f.enc, MatchMode::Dm, &cfg).unwrap_err();
    assert!(matches!(e, Error::Config(ref m) if m.contains("unfrozen")), "{e}");
}

#[test]
fn data_level_is_deterministic() {
    let f = fixture();
    let cfg = data_cfg(3, 33);
    let a = baseline_data_level(&f.train, &f.enc, MatchMode::Dm, &cfg).unwrap();
    let b = baseline_data_level(&f.train, &f.enc, MatchMode::Dm, &cfg).unwrap();
    assert_eq!(a.set.data.as_slice(), b.set.data.as_slice());
    assert_eq!(a.neg_rate, b.neg_rate);
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
}

// ---- ablation grid -------------------------------------------------------------

#[test]
fn grid_skips_invalid_cells_and_reports_the_rest() {
    let f = fixture();
    let grid = GridSpec {
        spc: vec![1, 1000], // 1000 exceeds every class size -> skipped
        generators: vec![GeneratorKind::DecoderOnly],
        frozen: vec![true],
        head_layers: vec![1],
    };
    let distill_cfg = DistillConfig {
        steps: 2,
        class_epochs: 1,
        batch_per_class: 8,
        ..DistillConfig::default()
    };
    let eval_cfg = quick_eval(2, 5, 0);
    let report = ablation_grid(
        &f.train,
        &f.test,
        &f.enc,
        &f.dec,
        &f.den,
        &f.cond,
        &grid,
        &distill_cfg,
        &eval_cfg,
        &[0],
    )
    .unwrap();

    assert_eq!(report.rows.len(), 2);
    let ok = &report.rows[0];
    assert_eq!(ok.spc, 1);
    let rep = ok.outcome.as_ref().expect("spc=1 cell should run");
    assert_eq!(rep.trials.len(), eval_cfg.n_trials);

    let skipped = &report.rows[1];
    assert_eq!(skipped.spc, 1000);
    let reason = skipped.outcome.as_ref().unwrap_err();
    assert!(reason.contains("class"), "unhelpful skip reason: {reason}");

    let agg = report.aggregate_csv();
    assert!(agg.starts_with("spc,generator,frozen,head_layers,mean,std,status\n"));
    assert!(agg.contains(",ok\n"), "{agg}");
    assert!(agg.contains("skipped: "), "{agg}");
    for line in agg.lines().filter(|l| l.contains("skipped")) {
        assert_eq!(line.matches(',').count(), 6, "comma-safe reason: {line}");
    }

    let per_trial = report.per_trial_csv();
    assert_eq!(
        per_trial.lines().count(),
        1 + eval_cfg.n_trials,
        "{per_trial}"
    );
    assert!(per_trial.starts_with("spc,generator,frozen,head_layers,trial,accuracy\n"));
}

#[test]
fn grid_requires_at_least_one_seed() {
    let f = fixture();
    let e = ablation_grid(
        &f.train,
        &f.test,
        &f.enc,
        &f.dec,
        &f.den,
        &f.cond,
        &GridSpec::default(),
        &DistillConfig::default(),
        &quick_eval(1, 1, 0),
        &[],
    )
    .unwrap_err();
    assert!(e.is_validation(), "{e}");
}

// ---- config parsing ------------------------------------------------------------

#[test]
fn model_specs_parse_from_toml_tables() {
    let head: EvalModelSpec =
        toml::from_str("arch = \"linear-head-on-F\"\nlayers = 2\nhidden = 32").unwrap();
    assert_eq!(head, EvalModelSpec::HeadOnFeatures { layers: 2, hidden: 32 });

    let logistic: EvalModelSpec = toml::from_str("arch = \"logistic-on-raw\"").unwrap();
    assert_eq!(logistic, EvalModelSpec::LogisticRaw);

    let mlp: EvalModelSpec = toml::from_str("arch = \"mlp-on-raw\"").unwrap();
    assert_eq!(mlp, EvalModelSpec::MlpRaw { hidden: 64 });

    let attn: EvalModelSpec = toml::from_str("arch = \"attention-pooled\"\nwidth = 16").unwrap();
    assert_eq!(attn, EvalModelSpec::AttentionPooled { width: 16 });

    assert!(toml::from_str::<EvalModelSpec>("arch = \"resnet\"").is_err());

    let cfg: EvalConfig = toml::from_str("n_trials = 3\nepochs = 7").unwrap();
    assert_eq!(cfg.n_trials, 3);
    assert_eq!(cfg.epochs, 7);
    assert_eq!(cfg.lr, EvalConfig::default().lr);
    assert!(toml::from_str::<EvalConfig>("trails = 3").is_err());

    let grid: GridSpec = toml::from_str("spc = [1, 5]\nfrozen = [true]").unwrap();
    assert_eq!(grid.spc, vec![1, 5]);
    assert_eq!(grid.generators, GridSpec::default().generators);
}
