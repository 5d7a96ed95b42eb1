//! Latent-code distillation: a small set of per-class latent codes is pushed
//! through the frozen generator and optimized so the synthetic cells match
//! the original dataset under distribution- and/or gradient-matching losses.
//! Only the codes receive gradient updates; the networks stay fixed (the
//! unfrozen-encoder variant exists as an ablation and is expected to match
//! worse).

use std::rc::Rc;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{class_partition, LabeledDataset};
use crate::foundation::{Decoder, Encoder};
use crate::generator::{generate_graph, ConditionEmbedder, Denoiser};
use crate::nn::{Activation, MlpSpec};
use crate::rng::{SeedTree, Stream};
use crate::tensor::{Graph, ParamSet, Tensor, Var};
use crate::{Error, Result};

// ---------------------------------------------------------------- latent codes

/// The distilled object: one latent row per synthetic cell, grouped by class
/// (class c owns rows c*spc .. (c+1)*spc), plus the condition codes the
/// generator needs and the index of the source cell each row started from.
#[derive(Debug, Clone)]
pub struct LatentCodes {
    pub codes: Tensor,            // (C*spc) x latent_dim
    pub classes: Vec<usize>,      // per-row class id
    pub extras: Vec<Vec<usize>>,  // extras[field][row]
    pub provenance: Vec<usize>,   // source cell index at initialization
    pub spc: usize,
}

impl LatentCodes {
    pub fn n_rows(&self) -> usize {
        self.classes.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len() / self.spc.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, _) = self.codes.dims2();
        if rows != self.classes.len() || rows != self.provenance.len() {
            return Err(Error::Config(format!(
                "latent codes row mismatch: {} codes, {} classes, {} provenance",
                rows,
                self.classes.len(),
                self.provenance.len()
            )));
        }
        if self.spc == 0 || rows % self.spc != 0 {
            return Err(Error::Config(format!(
                "latent codes: {} rows not divisible by spc {}",
                rows, self.spc
            )));
        }
        for (c, chunk) in self.classes.chunks(self.spc).enumerate() {
            if chunk.iter().any(|&k| k != c) {
                return Err(Error::Config(format!(
                    "latent codes rows not grouped by class near class {c}"
                )));
            }
        }
        if self.codes.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("latent codes contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Per-class sample of `spc` distinct cell indices, classes in id order.
pub fn sample_per_class(
    train: &LabeledDataset,
    spc: usize,
    rng: &mut Stream,
) -> Result<Vec<Vec<usize>>> {
    if spc == 0 {
        return Err(Error::Config("spc must be >= 1".into()));
    }
    let parts = class_partition(train);
    let mut picked = Vec::with_capacity(parts.len());
    for (c, part) in parts.iter().enumerate() {
        if part.len() < spc {
            return Err(Error::Config(format!(
                "class {c} has {} cells, fewer than spc {spc}",
                part.len()
            )));
        }
        let mut pool = part.clone();
        pool.shuffle(rng);
        pool.truncate(spc);
        picked.push(pool);
    }
    Ok(picked)
}

/// Z^0: encode `spc` randomly chosen cells per class.
pub fn init_latents(
    train: &LabeledDataset,
    enc: &Encoder,
    spc: usize,
    seed: u64,
) -> Result<LatentCodes> {
    let mut rng = SeedTree::new(seed).stream("init-latents");
    let picked = sample_per_class(train, spc, &mut rng)?;
    let flat: Vec<usize> = picked.iter().flatten().copied().collect();
    let codes = enc.encode_cells(train, &flat)?;
    let classes: Vec<usize> = flat.iter().map(|&i| train.classes[i]).collect();
    let extras: Vec<Vec<usize>> = train
        .extra_conds
        .iter()
        .map(|field| flat.iter().map(|&i| field[i]).collect())
        .collect();
    let out = LatentCodes {
        codes,
        classes,
        extras,
        provenance: flat,
        spc,
    };
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------- task head

/// Classification head attached to the frozen feature space: 1 to 3 dense
/// layers ending in C logits. Parameters are named head/w0, head/b0, ...
#[derive(Debug, Clone)]
pub struct TaskHead {
    spec: MlpSpec,
    pub params: ParamSet,
}

impl TaskHead {
    pub fn new(
        feat_dim: usize,
        n_classes: usize,
        layers: usize,
        hidden: usize,
        rng: &mut Stream,
    ) -> Result<Self> {
        if !(1..=3).contains(&layers) {
            return Err(Error::Config(format!(
                "task head supports 1..=3 layers, got {layers}"
            )));
        }
        if layers > 1 && hidden == 0 {
            return Err(Error::Config("task head hidden width must be >= 1".into()));
        }
        let mut dims = vec![feat_dim];
        dims.extend(std::iter::repeat(hidden).take(layers - 1));
        dims.push(n_classes);
        let spec = MlpSpec::new("head", &dims, Activation::Relu, Activation::Identity);
        let mut params = ParamSet::new();
        spec.init_into(&mut params, rng);
        Ok(TaskHead { spec, params })
    }

    pub fn feat_dim(&self) -> usize {
        self.spec.dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.spec.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.spec.dims.len() - 1
    }

    /// Total parameter count, i.e. the width of the flattened gradient.
    pub fn param_count(&self) -> usize {
        self.spec
            .dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn logits(&self, g: &mut Graph, bound: &crate::tensor::BoundParams, x: Var) -> Result<Var> {
        self.spec.apply(g, bound, x)
    }

    pub fn logits_plain(&self, feats: &Tensor) -> Result<Tensor> {
        self.spec.apply_plain(&self.params, feats)
    }

    /// Argmax accuracy on plain features.
    pub fn accuracy(&self, feats: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.logits_plain(feats)?;
        let (n, c) = logits.dims2();
        if n != labels.len() {
            return Err(Error::Shape {
                op: "accuracy",
                detail: format!("{n} rows vs {} labels", labels.len()),
            });
        }
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
        Ok(hits as f64 / n.max(1) as f64)
    }
}

// ---------------------------------------------------------------- head gradient

/// Cross-entropy gradient of a task head w.r.t. its own parameters,
/// expressed as graph operations on `feats` so the result stays
/// differentiable in the features (and through them in the latent codes).
/// Head parameters enter as constants. Output is a single 1 x P row laid
/// out layer by layer: w0 row-major, b0, w1, b1, ...
///
/// For the linear head this is (1/n) * sum_i (softmax(f_i W + b) - onehot(y_i))
/// outer f_i. Deeper heads backpropagate through relu with the activation
/// mask fixed at its forward value, which is the exact gradient everywhere
/// off the relu kinks.
pub fn head_cross_entropy_grad(
    g: &mut Graph,
    head: &TaskHead,
    feats: Var,
    labels: &[usize],
) -> Result<Var> {
    let dims = &head.spec.dims;
    let n_layers = dims.len() - 1;
    let n = feats.rows();
    let c = *dims.last().unwrap();
    if feats.cols() != dims[0] {
        return Err(Error::Shape {
            op: "head_cross_entropy_grad",
            detail: format!("features have width {}, head expects {}", feats.cols(), dims[0]),
        });
    }
    if labels.len() != n {
        return Err(Error::Shape {
            op: "head_cross_entropy_grad",
            detail: format!("{n} feature rows vs {} labels", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {c} classes"
        )));
    }

    // forward, keeping layer inputs and relu masks
    let mut ws = Vec::with_capacity(n_layers);
    let mut inputs = vec![feats];
    let mut masks: Vec<Tensor> = Vec::new();
    let mut h = feats;
    for l in 0..n_layers {
        let w = g.constant(head.params.get(&format!("head/w{l}")));
        let b = g.constant(head.params.get(&format!("head/b{l}")));
        ws.push(w);
        let lin = g.matmul(h, w)?;
        let z = g.add_row(lin, b)?;
        if l + 1 < n_layers {
            let mask: Vec<f64> = g.value(z).iter().map(|&v| f64::from(v > 0.0)).collect();
            masks.push(Tensor::matrix(z.rows(), z.cols(), mask)?);
            h = g.relu(z)?;
            inputs.push(h);
        } else {
            h = z;
        }
    }

    // residual softmax(logits) - onehot
    let mut one = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        one[i * c + y] = 1.0;
    }
    let onehot = g.constant(&Tensor::matrix(n, c, one)?);
    let p = g.softmax(h)?;
    let mut delta = g.sub(p, onehot)?;

    // manual backward through the layers, last to first
    let inv_n = 1.0 / n as f64;
    let mut grads_rev: Vec<(Var, Var)> = Vec::with_capacity(n_layers);
    for l in (0..n_layers).rev() {
        let raw = g.matmul_flags(inputs[l], delta, true, false)?;
        let gw = g.scale(raw, inv_n)?;
        let gb = g.mean_rows(delta)?;
        grads_rev.push((gw, gb));
        if l > 0 {
            let back = g.matmul_flags(delta, ws[l], false, true)?;
            let mask = g.constant(&masks[l - 1]);
            delta = g.mul(back, mask)?;
        }
    }

    let mut parts = Vec::with_capacity(2 * n_layers);
    for (gw, gb) in grads_rev.into_iter().rev() {
        let flat = g.reshape(gw, 1, gw.rows() * gw.cols())?;
        parts.push(flat);
        parts.push(gb);
    }
    g.concat_cols(&parts)
}

/// Plain-tensor evaluation of `head_cross_entropy_grad`.
pub fn head_grad_value(head: &TaskHead, feats: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let fv = g.constant(feats);
    let gv = head_cross_entropy_grad(&mut g, head, fv, labels)?;
    Ok(g.tensor(gv))
}

/// Split a flattened head gradient back into named parameter tensors
/// (inverse of the layout produced by `head_cross_entropy_grad`).
pub fn unflatten_head_grad(head: &TaskHead, flat: &[f64]) -> Result<IndexMap<String, Tensor>> {
    let dims = &head.spec.dims;
    let mut out = IndexMap::new();
    let mut off = 0;
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let wlen = fan_in * fan_out;
        out.insert(
            format!("head/w{l}"),
            Tensor::matrix(fan_in, fan_out, flat[off..off + wlen].to_vec())?,
        );
        off += wlen;
        out.insert(
            format!("head/b{l}"),
            Tensor::matrix(1, fan_out, flat[off..off + fan_out].to_vec())?,
        );
        off += fan_out;
    }
    if off != flat.len() {
        return Err(Error::Shape {
            op: "unflatten_head_grad",
            detail: format!("flat gradient has {} values, head has {off}", flat.len()),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- dc loss

/// 1 - cosine similarity between two flattened gradients. Division is
/// expressed as exp(-log(.)) so the whole expression stays inside the
/// graph's op set. Zero-norm inputs are rejected: the cosine is undefined.
pub fn dc_loss_graph(g: &mut Graph, gs: Var, ge: Var) -> Result<Var> {
    if gs.rows() != ge.rows() || gs.cols() != ge.cols() {
        return Err(Error::Shape {
            op: "dc_loss",
            detail: format!(
                "[{},{}] vs [{},{}]",
                gs.rows(),
                gs.cols(),
                ge.rows(),
                ge.cols()
            ),
        });
    }
    let prod = g.mul(gs, ge)?;
    let dot = g.sum(prod)?;
    let ns = g.l2_norm(gs)?;
    let ne = g.l2_norm(ge)?;
    for (v, side) in [(ns, "student"), (ne, "expert")] {
        if g.scalar_value(v) == 0.0 {
            return Err(Error::Numeric {
                node: v.id(),
                op: "dc_loss",
                detail: format!("{side} gradient has zero norm; cosine undefined"),
            });
        }
    }
    let denom = g.mul(ns, ne)?;
    let logd = g.log(denom)?;
    let neg = g.scale(logd, -1.0)?;
    let inv = g.exp(neg)?;
    let cos = g.mul(dot, inv)?;
    let ncos = g.scale(cos, -1.0)?;
    let one = g.constant(&Tensor::scalar(1.0));
    g.add(one, ncos)
}

/// Plain-tensor dc loss (same graph expression under the hood).
pub fn dc_loss(gs: &Tensor, ge: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(gs);
    let b = g.constant(ge);
    let l = dc_loss_graph(&mut g, a, b)?;
    Ok(g.scalar_value(l))
}

// ---------------------------------------------------------------- dm loss

/// Per-class column means, one row per class id; errors on an empty class.
pub fn class_feature_means(
    feats: &Tensor,
    labels: &[usize],
    n_classes: usize,
) -> Result<Tensor> {
    let (n, k) = feats.dims2();
    if labels.len() != n {
        return Err(Error::Shape {
            op: "class_feature_means",
            detail: format!("{n} rows vs {} labels", labels.len()),
        });
    }
    let mut sums = vec![0.0; n_classes * k];
    let mut counts = vec![0usize; n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::Config(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        counts[y] += 1;
        for (s, v) in sums[y * k..(y + 1) * k].iter_mut().zip(feats.row(i)) {
            *s += v;
        }
    }
    for (c, &cnt) in counts.iter().enumerate() {
        if cnt == 0 {
            return Err(Error::Config(format!("class {c} has no cells")));
        }
        let inv = 1.0 / cnt as f64;
        for s in sums[c * k..(c + 1) * k].iter_mut() {
            *s *= inv;
        }
    }
    Tensor::matrix(n_classes, k, sums)
}

/// Sum over classes of the (optionally squared) Euclidean norm between the
/// synthetic per-class feature mean and the original one. `orig_means` is a
/// C x k constant; every class must appear among `labels`.
pub fn dm_loss_graph(
    g: &mut Graph,
    synth_feats: Var,
    labels: &[usize],
    orig_means: Var,
    squared: bool,
) -> Result<Var> {
    let n_classes = orig_means.rows();
    if labels.len() != synth_feats.rows() {
        return Err(Error::Shape {
            op: "dm_loss",
            detail: format!(
                "{} feature rows vs {} labels",
                synth_feats.rows(),
                labels.len()
            ),
        });
    }
    if synth_feats.cols() != orig_means.cols() {
        return Err(Error::Shape {
            op: "dm_loss",
            detail: format!(
                "feature width {} vs mean width {}",
                synth_feats.cols(),
                orig_means.cols()
            ),
        });
    }
    let mut total: Option<Var> = None;
    for c in 0..n_classes {
        let ids: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == c)
            .map(|(i, _)| i)
            .collect();
        if ids.is_empty() {
            return Err(Error::Config(format!("class {c} missing from synthetic set")));
        }
        let rows = g.embed_lookup(synth_feats, &ids)?;
        let sm = g.mean_rows(rows)?;
        let om = g.slice_rows(orig_means, c, 1)?;
        let diff = g.sub(sm, om)?;
        let mut nrm = g.l2_norm(diff)?;
        if squared {
            nrm = g.mul(nrm, nrm)?;
        }
        total = Some(match total {
            Some(t) => g.add(t, nrm)?,
            None => nrm,
        });
    }
    total.ok_or_else(|| Error::Config("dm_loss with zero classes".into()))
}

/// Plain-tensor dm loss on already-extracted features (the feature extractor
/// can thus be anything, including the identity).
pub fn dm_loss_features(
    orig_feats: &Tensor,
    orig_labels: &[usize],
    synth_feats: &Tensor,
    synth_labels: &[usize],
    n_classes: usize,
    squared: bool,
) -> Result<f64> {
    let means = class_feature_means(orig_feats, orig_labels, n_classes)?;
    let mut g = Graph::new();
    let sf = g.constant(synth_feats);
    let om = g.constant(&means);
    let l = dm_loss_graph(&mut g, sf, synth_labels, om, squared)?;
    Ok(g.scalar_value(l))
}

/// Distribution-matching loss with the encoder as feature extractor.
/// `orig_parts[c]` holds the original cells of class c as dense rows.
pub fn dm_loss(
    enc: &Encoder,
    orig_parts: &[Tensor],
    synth: &Tensor,
    synth_labels: &[usize],
    squared: bool,
) -> Result<f64> {
    let n_classes = orig_parts.len();
    let mut orig_feats = Vec::new();
    let mut orig_labels = Vec::new();
    for (c, part) in orig_parts.iter().enumerate() {
        let (rows, _) = part.dims2();
        if rows == 0 {
            return Err(Error::Config(format!("class {c} has no original cells")));
        }
        orig_feats.push(enc.encode(part)?);
        orig_labels.extend(std::iter::repeat(c).take(rows));
    }
    let k = enc.latent_dim();
    let mut data = Vec::new();
    for f in &orig_feats {
        data.extend_from_slice(f.as_slice());
    }
    let of = Tensor::matrix(orig_labels.len(), k, data)?;
    let sf = enc.encode(synth)?;
    dm_loss_features(&of, &orig_labels, &sf, synth_labels, n_classes, squared)
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchMode {
    #[serde(rename = "dc")]
    Dc,
    #[serde(rename = "dm")]
    Dm,
    #[serde(rename = "dc+dm")]
    DcDm,
}

impl MatchMode {
    pub fn has_dc(self) -> bool {
        matches!(self, MatchMode::Dc | MatchMode::DcDm)
    }

    pub fn has_dm(self) -> bool {
        matches!(self, MatchMode::Dm | MatchMode::DcDm)
    }
}

impl std::fmt::Display for MatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatchMode::Dc => "dc",
            MatchMode::Dm => "dm",
            MatchMode::DcDm => "dc+dm",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// K: outer distillation steps. 0 is a no-op that returns Z^0.
    pub steps: usize,
    /// N: classification epochs (head SGD steps) per distillation step.
    pub class_epochs: usize,
    pub spc: usize,
    pub mode: MatchMode,
    /// Learning rate on the latent codes.
    pub lr_z: f64,
    /// Learning rate on the task heads.
    pub lr_head: f64,
    /// Encoder learning rate when the foundation is unfrozen.
    pub lr_foundation: f64,
    /// Generation step; None picks the generator's default (t_max / 2).
    pub t_gen: Option<usize>,
    pub freeze_foundation: bool,
    /// Original cells sampled per class per step for the expert side.
    pub batch_per_class: usize,
    pub head_layers: usize,
    pub head_hidden: usize,
    /// Square the per-class norms in the DM loss.
    pub dm_squared: bool,
    /// Momentum on the latent updates (0 = plain SGD).
    pub momentum: f64,
    /// Skip the denoiser and decode the codes directly (generator ablation).
    pub decoder_only: bool,
    /// Run the generator under gradient checkpointing.
    pub checkpoint_generator: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 50,
            class_epochs: 10,
            spc: 1,
            mode: MatchMode::DcDm,
            lr_z: 2.0,
            lr_head: 0.1,
            lr_foundation: 0.05,
            t_gen: None,
            freeze_foundation: true,
            batch_per_class: 32,
            head_layers: 1,
            head_hidden: 64,
            dm_squared: false,
            momentum: 0.0,
            decoder_only: false,
            checkpoint_generator: true,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_epochs == 0 {
            return Err(Error::Config("class_epochs must be >= 1".into()));
        }
        if self.spc == 0 {
            return Err(Error::Config("spc must be >= 1".into()));
        }
        if self.lr_z <= 0.0 || !self.lr_z.is_finite() {
            return Err(Error::Config(format!("lr_z must be > 0, got {}", self.lr_z)));
        }
        if self.lr_head <= 0.0 || !self.lr_head.is_finite() {
            return Err(Error::Config(format!(
                "lr_head must be > 0, got {}",
                self.lr_head
            )));
        }
        if self.lr_foundation <= 0.0 || !self.lr_foundation.is_finite() {
            return Err(Error::Config(format!(
                "lr_foundation must be > 0, got {}",
                self.lr_foundation
            )));
        }
        if self.batch_per_class == 0 {
            return Err(Error::Config("batch_per_class must be >= 1".into()));
        }
        if !(1..=3).contains(&self.head_layers) {
            return Err(Error::Config(format!(
                "head_layers must be in 1..=3, got {}",
                self.head_layers
            )));
        }
        if self.head_layers > 1 && self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.t_gen == Some(0) {
            return Err(Error::Config("t_gen must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolved_t_gen(&self, t_max: usize) -> usize {
        self.t_gen.unwrap_or((t_max / 2).max(1))
    }
}

// ---------------------------------------------------------------- trace

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss_dm: Option<f64>,
    pub loss_dc: Option<f64>,
    pub student_acc: f64,
    pub expert_acc: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillTrace {
    pub rows: Vec<TraceRow>,
}

impl DistillTrace {
    /// Total matching loss (dm + dc, whichever are present) at a step.
    pub fn total_loss(&self, i: usize) -> f64 {
        let r = &self.rows[i];
        r.loss_dm.unwrap_or(0.0) + r.loss_dc.unwrap_or(0.0)
    }

    /// Wall time is kept out of the CSV so reruns stay byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_dm,loss_dc,student_acc,expert_acc\n");
        for r in &self.rows {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                r.step,
                fmt(r.loss_dm),
                fmt(r.loss_dc),
                r.student_acc,
                r.expert_acc
            ));
        }
        out
    }

    pub fn write_csv<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

// ---------------------------------------------------------------- synthesis

/// Decode latent codes into a synthetic expression table (plain tensors).
pub fn synthesize(
    den: &Denoiser,
    cond: &ConditionEmbedder,
    dec: &Decoder,
    codes: &LatentCodes,
    t_gen: usize,
    decoder_only: bool,
) -> Result<Tensor> {
    if decoder_only {
        return dec.decode(&codes.codes);
    }
    crate::generator::generate(
        den,
        cond,
        dec,
        &codes.codes,
        t_gen,
        &codes.classes,
        &codes.extras,
    )
}

// ---------------------------------------------------------------- main loop

struct StepOutcome {
    loss_dm: Option<f64>,
    loss_dc: Option<f64>,
    grad_z: Tensor,
    student: TaskHead,
    expert: TaskHead,
    synth_feats: Tensor,
}

/// One distillation step: build the matching graph, interleave the
/// classification loop with the gradient-direction accumulation, backprop
/// the total matching loss to the codes. In the unfrozen ablation the
/// student's classification updates fine-tune `enc_work` end to end.
#[allow(clippy::too_many_arguments)]
fn distill_step(
    step: usize,
    latents: &LatentCodes,
    enc_work: &mut Encoder,
    dec: &Decoder,
    den: &Denoiser,
    cond: &ConditionEmbedder,
    orig_means: &Tensor,
    batch_feats: &Tensor,
    batch_labels: &[usize],
    head0: &TaskHead,
    t_gen: usize,
    cfg: &DistillConfig,
) -> Result<StepOutcome> {
    let mut g = Graph::new();

    let mut z0 = latents.codes.clone();
    z0.requires_grad = true;
    let zv = g.leaf(&z0);

    // synthetic cells through the generator, optionally checkpointed
    let synth = if cfg.checkpoint_generator {
        let den = Rc::new(den.clone());
        let cond = Rc::new(cond.clone());
        let dec = Rc::new(dec.clone());
        let classes = latents.classes.clone();
        let extras = latents.extras.clone();
        let decoder_only = cfg.decoder_only;
        g.checkpointed_apply(&[zv], move |sub, ins| {
            let z = ins[0];
            if decoder_only {
                let bdec = sub.bind_frozen(&dec.params);
                dec.apply(sub, &bdec, z)
            } else {
                let bden = sub.bind_frozen(&den.params);
                let bcond = sub.bind_frozen(&cond.params);
                let bdec = sub.bind_frozen(&dec.params);
                generate_graph(
                    sub, &den, &bden, &cond, &bcond, &dec, &bdec, z, t_gen, &classes, &extras,
                )
            }
        })?
    } else if cfg.decoder_only {
        let bdec = g.bind_frozen(&dec.params);
        dec.apply(&mut g, &bdec, zv)?
    } else {
        let bden = g.bind_frozen(&den.params);
        let bcond = g.bind_frozen(&cond.params);
        let bdec = g.bind_frozen(&dec.params);
        generate_graph(
            &mut g,
            den,
            &bden,
            cond,
            &bcond,
            dec,
            &bdec,
            zv,
            t_gen,
            &latents.classes,
            &latents.extras,
        )?
    };

    // matching features come from the step-start encoder state; binding
    // copies the values, so later encoder updates don't touch this graph
    let benc = g.bind_frozen(&enc_work.params);
    let feats = enc_work.apply(&mut g, &benc, synth)?;
    let synth_data = g.tensor(synth);
    let synth_feats_t = g.tensor(feats);

    let mut loss_parts: Vec<Var> = Vec::new();
    let mut dm_node = None;
    if cfg.mode.has_dm() {
        let om = g.constant(orig_means);
        let l = dm_loss_graph(&mut g, feats, &latents.classes, om, cfg.dm_squared)?;
        dm_node = Some(l);
        loss_parts.push(l);
    }

    // classification loop: student head on the synthetic set, expert head on
    // the original batch, both grown from one shared initialization; the
    // gradient-direction terms are taken at each head state *before* its
    // update, so Eq.-matching compares like with like
    let mut student = head0.clone();
    let mut expert = head0.clone();
    let mut dc_nodes: Vec<Var> = Vec::new();
    for _ in 0..cfg.class_epochs {
        let mut student_grad: Option<Tensor> = None;
        let expert_grad = head_grad_value(&expert, batch_feats, batch_labels)?;
        if cfg.mode.has_dc() {
            let gs = head_cross_entropy_grad(&mut g, &student, feats, &latents.classes)?;
            let ge = g.constant(&expert_grad);
            dc_nodes.push(dc_loss_graph(&mut g, gs, ge)?);
            student_grad = Some(g.tensor(gs));
        }
        if cfg.freeze_foundation {
            let gs_t = match student_grad {
                Some(t) => t,
                None => head_grad_value(&student, &synth_feats_t, &latents.classes)?,
            };
            student
                .params
                .sgd_step(&unflatten_head_grad(&student, gs_t.as_slice())?, cfg.lr_head)?;
        } else {
            // the synthetic pathway trains end to end through the encoder
            class_step(enc_work, &mut student, &synth_data, &latents.classes, cfg)?;
        }
        // the expert always learns on cached original-side features, so its
        // update never reaches the encoder
        expert
            .params
            .sgd_step(&unflatten_head_grad(&expert, expert_grad.as_slice())?, cfg.lr_head)?;
    }

    let mut dc_node = None;
    if cfg.mode.has_dc() {
        let mut acc = dc_nodes[0];
        for &n in &dc_nodes[1..] {
            acc = g.add(acc, n)?;
        }
        dc_node = Some(acc);
        loss_parts.push(acc);
    }

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
    let grad_z = grads.get_or_zero(zv);
    Ok(StepOutcome {
        loss_dm,
        loss_dc,
        grad_z,
        student,
        expert,
        synth_feats: synth_feats_t,
    })
}

/// Algorithm loop: init codes from real cells, then for each step generate,
/// match, and take one gradient step on the codes. Returns the final codes
/// and a per-step trace. With `freeze_foundation` (the default) every
/// network is fixed and only the codes move; the unfrozen ablation lets the
/// student's classification updates fine-tune a private copy of the encoder,
/// which walks the synthetic features away from the fixed original-side
/// targets and wrecks matching.
pub fn distill_run(
    train: &LabeledDataset,
    enc: &Encoder,
    dec: &Decoder,
    den: &Denoiser,
    cond: &ConditionEmbedder,
    cfg: &DistillConfig,
) -> Result<(LatentCodes, DistillTrace)> {
    cfg.validate()?;
    if !den.params.frozen || !cond.params.frozen {
        return Err(Error::Config(
            "generator networks must be frozen before distillation".into(),
        ));
    }
    if cfg.freeze_foundation && (!enc.params.frozen || !dec.params.frozen) {
        return Err(Error::Config(
            "freeze_foundation=true requires a frozen autoencoder".into(),
        ));
    }
    let t_gen = cfg.resolved_t_gen(den.t_max);
    if t_gen > den.t_max {
        return Err(Error::Config(format!(
            "t_gen {} exceeds generator t_max {}",
            t_gen, den.t_max
        )));
    }
    if latent_dims_differ(enc, dec, den) {
        return Err(Error::Config("latent widths of E, D, U differ".into()));
    }

    let tree = SeedTree::new(cfg.seed);
    let mut latents = init_latents(train, enc, cfg.spc, tree.child("init").master())?;
    let n_classes = train.n_classes();
    let parts = class_partition(train);

    let mut enc_work = enc.clone();
    if !cfg.freeze_foundation {
        enc_work.params.frozen = false;
    }

    // The DM target: per-class feature means over the whole original set.
    // Original-side features always live in the *initial* encoder's space
    // (the feature extractor is the frozen foundation model, computed once
    // up front); the unfrozen ablation drifts only the synthetic pathway
    // away from these fixed targets.
    let orig_means = if cfg.mode.has_dm() {
        let all_cells: Vec<usize> = (0..train.n_cells()).collect();
        let feats = enc.encode_cells(train, &all_cells)?;
        class_feature_means(&feats, &train.classes, n_classes)?
    } else {
        Tensor::zeros(vec![n_classes, enc.latent_dim()])
    };

    let mut velocity = vec![0.0; latents.codes.len()];
    let mut trace = DistillTrace::default();

    for step in 0..cfg.steps {
        let t0 = std::time::Instant::now();
        let step_tree = tree.child(&format!("step{step}"));

        // per-class original batch (same indices in every mode/seed pairing)
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

        let diverged = |e: Error| match e {
            Error::Numeric { node, op, detail } => Error::Training {
                step,
                detail: format!(
                    "numeric failure at node {node} ({op}): {detail}; lower the learning rate"
                ),
            },
            other => other,
        };

        let out = distill_step(
            step,
            &latents,
            &mut enc_work,
            dec,
            den,
            cond,
            &orig_means,
            &batch_feats,
            &batch_labels,
            &head0,
            t_gen,
            cfg,
        )
        .map_err(diverged)?;

        let StepOutcome {
            loss_dm,
            loss_dc,
            grad_z,
            student,
            expert,
            synth_feats,
        } = out;

        // latent update (SGD with optional momentum)
        let gz = grad_z.as_slice();
        let mut codes = latents.codes.clone();
        for ((z, v), &gv) in codes
            .as_mut_slice()
            .iter_mut()
            .zip(velocity.iter_mut())
            .zip(gz)
        {
            *v = cfg.momentum * *v + gv;
            *z -= cfg.lr_z * *v;
        }
        if codes.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Training {
                step,
                detail: "latent codes became non-finite; lower lr_z".into(),
            });
        }
        codes.requires_grad = false;
        latents.codes = codes;

        let student_acc = student.accuracy(&synth_feats, &latents.classes)?;
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

    latents.validate()?;
    Ok((latents, trace))
}

fn latent_dims_differ(enc: &Encoder, dec: &Decoder, den: &Denoiser) -> bool {
    enc.latent_dim() != dec.latent_dim() || enc.latent_dim() != den.latent_dim()
}

/// One joint SGD step of encoder + head on a cross-entropy objective
/// (unfrozen-foundation ablation only).
fn class_step(
    enc: &mut Encoder,
    head: &mut TaskHead,
    x: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<()> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let benc = g.bind(&enc.params);
    let bhead = g.bind(&head.params);
    let feats = enc.apply(&mut g, &benc, xv)?;
    let logits = head.logits(&mut g, &bhead, feats)?;
    let loss = g.cross_entropy_mean(logits, labels)?;
    let grads = g.backward(loss)?;
    enc.params.sgd_step(&benc.grads(&grads), cfg.lr_foundation)?;
    head.params.sgd_step(&bhead.grads(&grads), cfg.lr_head)?;
    Ok(())
}
