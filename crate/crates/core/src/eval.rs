//! Evaluation protocol: train freshly initialized classifiers on a synthetic
//! set, score them on the held-out original split, and report mean/std over
//! trials. Also hosts the comparison baselines (random-real, data-level
//! matching) and the ablation grid runner.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::distill::{
    class_feature_means, dc_loss_graph, distill_run, dm_loss_graph, head_cross_entropy_grad,
    head_grad_value, sample_per_class, synthesize, unflatten_head_grad, DistillConfig,
    DistillTrace, MatchMode, TaskHead, TraceRow,
};
use crate::foundation::{Decoder, Encoder};
use crate::generator::{ConditionEmbedder, Denoiser};
use crate::nn::{Activation, MlpSpec};
use crate::rng::SeedTree;
use crate::tensor::{Graph, ParamSet, Tensor};
use crate::{Error, Result};

// ---------------------------------------------------------------- synthetic set

/// A data-level synthetic training set: dense expression rows in the
/// normalized space plus one label per row.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub data: Tensor,
    pub labels: Vec<usize>,
}

impl SyntheticSet {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, _) = self.data.dims2();
        if rows == 0 {
            return Err(Error::Config("synthetic set is empty".into()));
        }
        if rows != self.labels.len() {
            return Err(Error::Config(format!(
                "synthetic set has {rows} rows but {} labels",
                self.labels.len()
            )));
        }
        if self.data.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("synthetic set contains non-finite values".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- config

/// Protocol knobs. The upstream protocol fixes trials (10) and epochs (1000)
/// but leaves the optimizer settings unstated; lr/batch_size defaults were
/// tuned on the toy corpus and are deliberately exposed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_trials: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Trial-level parallelism; trials own seed substreams, so the report
    /// does not depend on this.
    pub threads: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_trials: 10,
            epochs: 1000,
            lr: 0.1,
            batch_size: 256,
            threads: 1,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::Config("n_trials must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("eval epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "eval lr {} must be positive and finite",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("eval batch_size must be >= 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- model zoo

/// Architectures for the cross-model transfer protocol. `HeadOnFeatures` is
/// the in-distribution model (a task head over the frozen encoder); the raw
/// models never see the encoder and stand in for the external tool families.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch")]
pub enum EvalModelSpec {
    #[serde(rename = "linear-head-on-F")]
    HeadOnFeatures {
        #[serde(default = "one")]
        layers: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
    #[serde(rename = "logistic-on-raw")]
    LogisticRaw,
    #[serde(rename = "mlp-on-raw")]
    MlpRaw {
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
    /// Per-cell softmax attention over gene positions gating the input,
    /// then a linear readout: a one-head attention-pooling classifier.
    #[serde(rename = "attention-pooled")]
    AttentionPooled {
        #[serde(default = "default_attn_width")]
        width: usize,
    },
}

fn one() -> usize {
    1
}
fn default_hidden() -> usize {
    64
}
fn default_attn_width() -> usize {
    32
}

impl Default for EvalModelSpec {
    fn default() -> Self {
        EvalModelSpec::HeadOnFeatures {
            layers: 1,
            hidden: default_hidden(),
        }
    }
}

impl EvalModelSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            EvalModelSpec::HeadOnFeatures { .. } => "linear-head-on-F",
            EvalModelSpec::LogisticRaw => "logistic-on-raw",
            EvalModelSpec::MlpRaw { .. } => "mlp-on-raw",
            EvalModelSpec::AttentionPooled { .. } => "attention-pooled",
        }
    }

    pub fn needs_encoder(&self) -> bool {
        matches!(self, EvalModelSpec::HeadOnFeatures { .. })
    }

    /// Resolve into a concrete net for input width `d` and `c` classes.
    fn net(&self, d: usize, c: usize) -> Result<NetKind> {
        match *self {
            EvalModelSpec::HeadOnFeatures { layers, hidden } => {
                if !(1..=3).contains(&layers) {
                    return Err(Error::Config(format!(
                        "linear-head-on-F supports 1..=3 layers, got {layers}"
                    )));
                }
                if layers > 1 && hidden == 0 {
                    return Err(Error::Config("head hidden width must be >= 1".into()));
                }
                let mut dims = vec![d];
                dims.extend(std::iter::repeat(hidden).take(layers - 1));
                dims.push(c);
                Ok(NetKind::Mlp(MlpSpec::new(
                    "clf",
                    &dims,
                    Activation::Relu,
                    Activation::Identity,
                )))
            }
            EvalModelSpec::LogisticRaw => Ok(NetKind::Mlp(MlpSpec::new(
                "clf",
                &[d, c],
                Activation::Identity,
                Activation::Identity,
            ))),
            EvalModelSpec::MlpRaw { hidden } => {
                if hidden == 0 {
                    return Err(Error::Config("mlp-on-raw hidden width must be >= 1".into()));
                }
                Ok(NetKind::Mlp(MlpSpec::new(
                    "clf",
                    &[d, hidden, c],
                    Activation::Relu,
                    Activation::Identity,
                )))
            }
            EvalModelSpec::AttentionPooled { width } => {
                if width == 0 {
                    return Err(Error::Config("attention width must be >= 1".into()));
                }
                Ok(NetKind::Attention { d, width, c })
            }
        }
    }
}

enum NetKind {
    Mlp(MlpSpec),
    Attention { d: usize, width: usize, c: usize },
}

impl NetKind {
    fn init(&self, rng: &mut crate::rng::Stream) -> ParamSet {
        let mut params = ParamSet::new();
        match self {
            NetKind::Mlp(spec) => spec.init_into(&mut params, rng),
            NetKind::Attention { d, width, c } => {
                let std_q = (2.0 / *d as f64).sqrt();
                let std_k = (1.0 / *width as f64).sqrt();
                let std_o = (1.0 / *d as f64).sqrt();
                params.insert("clf/wq", Tensor::randn(vec![*d, *width], std_q, rng));
                params.insert("clf/bq", Tensor::zeros(vec![1, *width]));
                params.insert("clf/wk", Tensor::randn(vec![*width, *d], std_k, rng));
                params.insert("clf/bk", Tensor::zeros(vec![1, *d]));
                params.insert("clf/wo", Tensor::randn(vec![*d, *c], std_o, rng));
                params.insert("clf/bo", Tensor::zeros(vec![1, *c]));
            }
        }
        params
    }

    fn logits(
        &self,
        g: &mut Graph,
        bound: &crate::tensor::BoundParams,
        x: crate::tensor::Var,
    ) -> Result<crate::tensor::Var> {
        match self {
            NetKind::Mlp(spec) => spec.apply(g, bound, x),
            NetKind::Attention { .. } => {
                let q = g.matmul(x, bound.var("clf/wq"))?;
                let q = g.add_row(q, bound.var("clf/bq"))?;
                let q = g.relu(q)?;
                let s = g.matmul(q, bound.var("clf/wk"))?;
                let s = g.add_row(s, bound.var("clf/bk"))?;
                let a = g.softmax(s)?;
                let gated = g.mul(a, x)?;
                let o = g.matmul(gated, bound.var("clf/wo"))?;
                g.add_row(o, bound.var("clf/bo"))
            }
        }
    }
}

// ---------------------------------------------------------------- training

fn rows_of(x: &Tensor, idx: &[usize]) -> Tensor {
    let (_, d) = x.dims2();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&x.as_slice()[i * d..(i + 1) * d]);
    }
    Tensor::matrix(idx.len(), d, out).expect("gather preserves width")
}

fn sgd_batch(
    net: &NetKind,
    params: &mut ParamSet,
    x: &Tensor,
    labels: &[usize],
    lr: f64,
) -> Result<()> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let bound = g.bind(params);
    let logits = net.logits(&mut g, &bound, xv)?;
    let loss = g.cross_entropy_mean(logits, labels)?;
    let grads = g.backward(loss)?;
    params.sgd_step(&bound.grads(&grads), lr)?;
    Ok(())
}

fn train_trial(
    net: &NetKind,
    x: &Tensor,
    labels: &[usize],
    cfg: &EvalConfig,
    tree: SeedTree,
) -> Result<ParamSet> {
    let mut init_rng = tree.stream("init");
    let mut params = net.init(&mut init_rng);
    let n = labels.len();
    if cfg.batch_size >= n {
        for _ in 0..cfg.epochs {
            sgd_batch(net, &mut params, x, labels, cfg.lr)?;
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        let mut order_rng = tree.stream("order");
        for _ in 0..cfg.epochs {
            order.shuffle(&mut order_rng);
            for chunk in order.chunks(cfg.batch_size) {
                let xb = rows_of(x, chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                sgd_batch(net, &mut params, &xb, &yb, cfg.lr)?;
            }
        }
    }
    Ok(params)
}

fn argmax_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let (n, c) = logits.dims2();
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.as_slice()[i * c..(i + 1) * c];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        hits += usize::from(pred == y);
    }
    hits as f64 / n.max(1) as f64
}

fn score(net: &NetKind, params: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let bound = g.bind_frozen(params);
    let logits = net.logits(&mut g, &bound, xv)?;
    let lt = g.tensor(logits);
    Ok(argmax_accuracy(&lt, labels))
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub model: String,
    pub trials: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over the trial list.
    pub std: f64,
    pub config: EvalConfig,
}

impl MetricsReport {
    pub fn new(model: String, trials: Vec<f64>, config: EvalConfig) -> Self {
        let (mean, std) = mean_std(&trials);
        MetricsReport {
            model,
            trials,
            mean,
            std,
            config,
        }
    }

    pub fn per_trial_csv(&self) -> String {
        let mut out = String::from("model,trial,accuracy\n");
        for (i, a) in self.trials.iter().enumerate() {
            out.push_str(&format!("{},{},{:.6}\n", self.model, i, a));
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        format!(
            "model,mean,std\n{},{:.6},{:.6}\n",
            self.model, self.mean, self.std
        )
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------- evaluate

/// Train `cfg.n_trials` fresh models on the synthetic set and score each on
/// the test split. `enc` is required by feature-space models and ignored by
/// the raw ones. Trials are independent and indexed, so the report is
/// identical no matter how many threads run them.
pub fn evaluate_synthetic(
    s: &SyntheticSet,
    test: &LabeledDataset,
    enc: Option<&Encoder>,
    model: &EvalModelSpec,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    s.validate()?;

    let (_, d_in) = s.data.dims2();
    if d_in != test.n_genes() {
        return Err(Error::Config(format!(
            "synthetic set has {d_in} genes, test split has {}",
            test.n_genes()
        )));
    }
    let n_classes = test
        .n_classes()
        .max(s.labels.iter().map(|&y| y + 1).max().unwrap_or(0));
    let mut present = vec![false; n_classes];
    for &y in &s.labels {
        present[y] = true;
    }
    if let Some(missing) = test.classes.iter().find(|&&y| !present[y]) {
        return Err(Error::Config(format!(
            "class {missing} appears in the test split but not in the synthetic set"
        )));
    }

    let all_test: Vec<usize> = (0..test.n_cells()).collect();
    let (x_train, x_test, d) = if model.needs_encoder() {
        let e = enc.ok_or_else(|| {
            Error::Config(format!("model {} requires the encoder", model.tag()))
        })?;
        if e.d_in() != d_in {
            return Err(Error::Config(format!(
                "encoder expects {} genes, synthetic set has {d_in}",
                e.d_in()
            )));
        }
        (
            e.encode(&s.data)?,
            e.encode_cells(test, &all_test)?,
            e.latent_dim(),
        )
    } else {
        (
            s.data.clone(),
            test.matrix.dense_rows(&all_test),
            d_in,
        )
    };

    let net = model.net(d, n_classes)?;
    let tree = SeedTree::new(cfg.seed);
    let run_trial = |i: usize| -> Result<f64> {
        let trial_tree = tree.child(&format!("trial{i}"));
        let params = train_trial(&net, &x_train, &s.labels, cfg, trial_tree)?;
        score(&net, &params, &x_test, &test.classes)
    };

    let trials: Vec<f64> = if cfg.threads <= 1 {
        (0..cfg.n_trials).map(run_trial).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Artifact(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..cfg.n_trials)
                .into_par_iter()
                .map(run_trial)
                .collect::<Result<_>>()
        })?
    };

    Ok(MetricsReport::new(model.tag().to_string(), trials, cfg.clone()))
}

// ---------------------------------------------------------------- baselines

/// The comparison floor: the sampled cells themselves, no distillation.
pub fn baseline_random_real(
    train: &LabeledDataset,
    spc: usize,
    seed: u64,
) -> Result<SyntheticSet> {
    let mut rng = SeedTree::new(seed).stream("random-real");
    let picked = sample_per_class(train, spc, &mut rng)?;
    let flat: Vec<usize> = picked.iter().flatten().copied().collect();
    let data = train.matrix.dense_rows(&flat);
    let labels: Vec<usize> = flat.iter().map(|&i| train.classes[i]).collect();
    Ok(SyntheticSet { data, labels })
}

/// What `baseline_data_level` returns alongside the set: the per-step trace
/// and the fraction of entries that went negative before clamping (evidence
/// that data-level updates leave the count manifold).
#[derive(Debug, Clone)]
pub struct DataLevelOutcome {
    pub set: SyntheticSet,
    pub trace: DistillTrace,
    pub neg_rate: f64,
}

/// Data-level matching baseline: the same matching losses as the latent
/// pipeline, but gradients update the expression values directly, clamped
/// at zero after every step. No generator in the loop; the foundation stays
/// frozen (the ablation flag is rejected here).
pub fn baseline_data_level(
    train: &LabeledDataset,
    enc: &Encoder,
    mode: MatchMode,
    cfg: &DistillConfig,
) -> Result<DataLevelOutcome> {
    let mut cfg = cfg.clone();
    cfg.mode = mode;
    cfg.validate()?;
    if !cfg.freeze_foundation {
        return Err(Error::Config(
            "data-level baseline has no unfrozen-foundation mode".into(),
        ));
    }
    if !enc.params.frozen {
        return Err(Error::Config(
            "data-level baseline requires a frozen encoder".into(),
        ));
    }
    if train.n_genes() != enc.d_in() {
        return Err(Error::Config(format!(
            "encoder expects {} genes, dataset has {}",
            enc.d_in(),
            train.n_genes()
        )));
    }

    let init = baseline_random_real(train, cfg.spc, cfg.seed)?;
    let labels = init.labels.clone();
    let mut s = init.data;
    let n_classes = train.n_classes();
    let parts = crate::data::class_partition(train);
    let tree = SeedTree::new(cfg.seed);

    let orig_means = if cfg.mode.has_dm() {
        let all: Vec<usize> = (0..train.n_cells()).collect();
        let feats = enc.encode_cells(train, &all)?;
        class_feature_means(&feats, &train.classes, n_classes)?
    } else {
        Tensor::zeros(vec![n_classes, enc.latent_dim()])
    };

    let mut velocity = vec![0.0; s.len()];
    let mut trace = DistillTrace::default();
    let mut neg = 0usize;
    let mut total = 0usize;

    for step in 0..cfg.steps {
        let t0 = std::time::Instant::now();
        let step_tree = tree.child(&format!("step{step}"));

        let mut batch_rng = step_tree.stream("batch");
        let mut batch_idx = Vec::new();
        let mut batch_labels = Vec::new();
        for (c, part) in parts.iter().enumerate() {
            let take = cfg.batch_per_class.min(part.len());
            let mut pool = part.clone();
            pool.shuffle(&mut batch_rng);
            pool.truncate(take);
            batch_labels.extend(std::iter::repeat(c).take(take));
            batch_idx.extend(pool);
        }
        let batch_feats = enc.encode_cells(train, &batch_idx)?;
        let mut head_rng = step_tree.stream("head");
        let head0 = TaskHead::new(
            enc.latent_dim(),
            n_classes,
            cfg.head_layers,
            cfg.head_hidden,
            &mut head_rng,
        )?;

        let mut g = Graph::new();
        let mut s0 = s.clone();
        s0.requires_grad = true;
        let sv = g.leaf(&s0);
        let benc = g.bind_frozen(&enc.params);
        let feats = enc.apply(&mut g, &benc, sv)?;
        let synth_feats = g.tensor(feats);

        let mut loss_parts = Vec::new();
        let mut dm_node = None;
        if cfg.mode.has_dm() {
            let om = g.constant(&orig_means);
            let l = dm_loss_graph(&mut g, feats, &labels, om, cfg.dm_squared)?;
            dm_node = Some(l);
            loss_parts.push(l);
        }

        let mut student = head0.clone();
        let mut expert = head0;
        let mut dc_nodes = Vec::new();
        for _ in 0..cfg.class_epochs {
            let expert_grad = head_grad_value(&expert, &batch_feats, &batch_labels)?;
            let student_grad = if cfg.mode.has_dc() {
                let gs = head_cross_entropy_grad(&mut g, &student, feats, &labels)?;
                let ge = g.constant(&expert_grad);
                dc_nodes.push(dc_loss_graph(&mut g, gs, ge)?);
                g.tensor(gs)
            } else {
                head_grad_value(&student, &synth_feats, &labels)?
            };
            student.params.sgd_step(
                &unflatten_head_grad(&student, student_grad.as_slice())?,
                cfg.lr_head,
            )?;
            expert.params.sgd_step(
                &unflatten_head_grad(&expert, expert_grad.as_slice())?,
                cfg.lr_head,
            )?;
        }
        if cfg.mode.has_dc() {
            let mut acc = dc_nodes[0];
            for &n in &dc_nodes[1..] {
                acc = g.add(acc, n)?;
            }
            loss_parts.push(acc);
        }
        let dc_node = cfg.mode.has_dc().then(|| *loss_parts.last().unwrap());

        let mut loss = loss_parts[0];
        for &p in &loss_parts[1..] {
            loss = g.add(loss, p)?;
        }
        let loss_dm = dm_node.map(|v| g.scalar_value(v));
        let loss_dc = dc_node.map(|v| g.scalar_value(v));
        for (name, v) in [("dm", loss_dm), ("dc", loss_dc)] {
            if let Some(x) = v {
                if !x.is_finite() {
                    return Err(Error::Training {
                        step,
                        detail: format!("{name} matching loss is {x}"),
                    });
                }
            }
        }
        let grads = g.backward(loss)?;
        let grad_s = grads.get_or_zero(sv);

        for ((x, v), &gv) in s
            .as_mut_slice()
            .iter_mut()
            .zip(velocity.iter_mut())
            .zip(grad_s.as_slice())
        {
            *v = cfg.momentum * *v + gv;
            *x -= cfg.lr_z * *v;
            total += 1;
            if *x < 0.0 {
                neg += 1;
                *x = 0.0;
            }
        }
        if s.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                step,
                detail: "synthetic values became non-finite; lower lr_z".into(),
            });
        }

        let student_acc = student.accuracy(&synth_feats, &labels)?;
        let expert_acc = expert.accuracy(&batch_feats, &batch_labels)?;
        trace.rows.push(TraceRow {
            step,
            loss_dm,
            loss_dc,
            student_acc,
            expert_acc,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }

    let neg_rate = if total == 0 { 0.0 } else { neg as f64 / total as f64 };
    Ok(DataLevelOutcome {
        set: SyntheticSet { data: s, labels },
        trace,
        neg_rate,
    })
}

// ---------------------------------------------------------------- ablation grid

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Scdg,
    DecoderOnly,
}

impl std::fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GeneratorKind::Scdg => "scdg",
            GeneratorKind::DecoderOnly => "decoder-only",
        })
    }
}

/// Axes of the ablation grid; the full cross product is run cell by cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub spc: Vec<usize>,
    pub generators: Vec<GeneratorKind>,
    pub frozen: Vec<bool>,
    pub head_layers: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            spc: vec![1, 2, 5, 10],
            generators: vec![GeneratorKind::Scdg, GeneratorKind::DecoderOnly],
            frozen: vec![true, false],
            head_layers: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridRow {
    pub spc: usize,
    pub generator: GeneratorKind,
    pub frozen: bool,
    pub head_layers: usize,
    /// Ok: pooled trials over the seed list. Err: skip reason.
    pub outcome: std::result::Result<MetricsReport, String>,
}

impl GridRow {
    fn axes(&self) -> String {
        format!(
            "{},{},{},{}",
            self.spc, self.generator, self.frozen, self.head_layers
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
}

impl GridReport {
    pub fn per_trial_csv(&self) -> String {
        let mut out = String::from("spc,generator,frozen,head_layers,trial,accuracy\n");
        for row in &self.rows {
            if let Ok(rep) = &row.outcome {
                for (i, a) in rep.trials.iter().enumerate() {
                    out.push_str(&format!("{},{},{:.6}\n", row.axes(), i, a));
                }
            }
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("spc,generator,frozen,head_layers,mean,std,status\n");
        for row in &self.rows {
            match &row.outcome {
                Ok(rep) => out.push_str(&format!(
                    "{},{:.6},{:.6},ok\n",
                    row.axes(),
                    rep.mean,
                    rep.std
                )),
                Err(reason) => out.push_str(&format!(
                    "{},,,skipped: {}\n",
                    row.axes(),
                    reason.replace(',', ";")
                )),
            }
        }
        out
    }
}

/// Run every grid cell with the same seed list: distill, synthesize,
/// evaluate with the standard linear head. Cells that fail validation
/// (e.g. SPC larger than a class) are marked skipped with the reason;
/// runtime failures abort the grid.
#[allow(clippy::too_many_arguments)]
pub fn ablation_grid(
    train: &LabeledDataset,
    test: &LabeledDataset,
    enc: &Encoder,
    dec: &Decoder,
    den: &Denoiser,
    cond: &ConditionEmbedder,
    grid: &GridSpec,
    distill_cfg: &DistillConfig,
    eval_cfg: &EvalConfig,
    seeds: &[u64],
) -> Result<GridReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation grid needs at least one seed".into()));
    }
    let model = EvalModelSpec::HeadOnFeatures {
        layers: 1,
        hidden: default_hidden(),
    };
    let mut report = GridReport::default();
    for &spc in &grid.spc {
        for &generator in &grid.generators {
            for &frozen in &grid.frozen {
                for &head_layers in &grid.head_layers {
                    let mut trials = Vec::new();
                    let mut skip: Option<String> = None;
                    for &seed in seeds {
                        let mut dc = distill_cfg.clone();
                        dc.spc = spc;
                        dc.decoder_only = generator == GeneratorKind::DecoderOnly;
                        dc.freeze_foundation = frozen;
                        dc.head_layers = head_layers;
                        dc.seed = seed;
                        let run = distill_run(train, enc, dec, den, cond, &dc).and_then(
                            |(lat, _)| {
                                let t_gen = dc.resolved_t_gen(den.t_max);
                                let data =
                                    synthesize(den, cond, dec, &lat, t_gen, dc.decoder_only)?;
                                let set = SyntheticSet {
                                    data,
                                    labels: lat.classes.clone(),
                                };
                                let mut ec = eval_cfg.clone();
                                ec.seed = seed;
                                evaluate_synthetic(&set, test, Some(enc), &model, &ec)
                            },
                        );
                        match run {
                            Ok(rep) => trials.extend(rep.trials),
                            Err(e) if e.is_validation() => {
                                skip = Some(e.to_string());
                                break;
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    let outcome = match skip {
                        Some(reason) => Err(reason),
                        None => Ok(MetricsReport::new(
                            model.tag().to_string(),
                            trials,
                            eval_cfg.clone(),
                        )),
                    };
                    report.rows.push(GridRow {
                        spc,
                        generator,
                        frozen,
                        head_layers,
                        outcome,
                    });
                }
            }
        }
    }
    Ok(report)
}
