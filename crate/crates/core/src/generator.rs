//! Single-step conditional diffusion generator over the 128-dim latent
//! space: a linear noise schedule with closed-form forward diffusion, a
//! conditional denoiser trained to predict the clean latent directly (one
//! application per sample, never a chain), and generation as
//! decode(denoise(Z, t, cond)).

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ConditionInfo, LabeledDataset};
use crate::error::{Error, Result};
use crate::foundation::{Decoder, Encoder, LATENT_DIM};
use crate::nn::{Activation, MlpSpec};
use crate::rng::{SeedTree, Stream};
use crate::tensor::{
    load_checkpoint, save_checkpoint, BoundParams, Graph, ParamSet, Tensor, Var,
};

pub const TIME_EMB_DIM: usize = 32;
pub const COND_EMB_DIM: usize = 32;
const DENOISER_HIDDEN: usize = 256;

// ---------------------------------------------------------------- schedule

/// Linear beta schedule with precomputed alpha / alpha-bar tables,
/// 1-indexed by timestep t in 1..=t_max.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_min: f64,
    beta_max: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// beta_t = beta_min + (t-1)/(T-1) * (beta_max - beta_min), with both
    /// endpoints pinned exactly. T = 1 is permitted as a degenerate
    /// single-level schedule (beta = [beta_min]).
    pub fn linear(t_max: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "schedule needs 0 < beta_min < beta_max < 1, got {beta_min} and {beta_max}"
            )));
        }
        let mut beta = Vec::with_capacity(t_max);
        for t in 1..=t_max {
            beta.push(if t == 1 {
                beta_min
            } else if t == t_max {
                beta_max
            } else {
                beta_min + (t - 1) as f64 / (t_max - 1) as f64 * (beta_max - beta_min)
            });
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule {
            beta_min,
            beta_max,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::Config(format!(
                "timestep {t} outside 1..={}",
                self.t_max()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Z_t = sqrt(abar_t) Z0 + sqrt(1 - abar_t) eps with one fresh standard
    /// normal eps, one timestep per row. Returns (Z_t, eps).
    pub fn forward_diffuse_rows(
        &self,
        z0: &Tensor,
        ts: &[usize],
        rng: &mut Stream,
    ) -> Result<(Tensor, Tensor)> {
        let (n, k) = z0.dims2();
        if ts.len() != n {
            return Err(Error::Shape {
                op: "forward_diffuse",
                detail: format!("{} timesteps for {n} rows", ts.len()),
            });
        }
        for &t in ts {
            self.check_t(t)?;
        }
        let eps = Tensor::randn(vec![n, k], 1.0, rng);
        let mut zt = vec![0.0; n * k];
        for r in 0..n {
            let ab = self.alpha_bar(ts[r]);
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            let (z0r, er) = (z0.row(r), eps.row(r));
            for c in 0..k {
                zt[r * k + c] = sa * z0r[c] + sb * er[c];
            }
        }
        Ok((Tensor::matrix(n, k, zt)?, eps))
    }

    /// Single shared timestep for every row.
    pub fn forward_diffuse(
        &self,
        z0: &Tensor,
        t: usize,
        rng: &mut Stream,
    ) -> Result<(Tensor, Tensor)> {
        let ts = vec![t; z0.dims2().0];
        self.forward_diffuse_rows(z0, &ts, rng)
    }

    /// Algebraic inverse of the reparameterization:
    /// Z0 = (Z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
    pub fn eps_to_z0(&self, zt: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if zt.shape() != eps.shape() {
            return Err(Error::Shape {
                op: "eps_to_z0",
                detail: format!("Z_t {:?} vs eps {:?}", zt.shape(), eps.shape()),
            });
        }
        let ab = self.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = zt
            .as_slice()
            .iter()
            .zip(eps.as_slice())
            .map(|(z, e)| (z - sb * e) / sa)
            .collect();
        Tensor::new(zt.shape().to_vec(), data)
    }
}

// ---------------------------------------------------------------- networks

/// 32-dim sinusoidal features of t/t_max: 16 geometrically spaced
/// frequencies, sin/cos interleaved. Parameter-free and deterministic.
pub fn time_embedding(t: usize, t_max: usize) -> Vec<f64> {
    let s = t as f64 / t_max as f64;
    let pairs = TIME_EMB_DIM / 2;
    let mut out = Vec::with_capacity(TIME_EMB_DIM);
    for k in 0..pairs {
        let omega = PI * 1000f64.powf(k as f64 / (pairs - 1) as f64);
        out.push((s * omega).sin());
        out.push((s * omega).cos());
    }
    out
}

/// U: concat(latent, time embedding, condition embedding) -> clean-latent
/// prediction, 192 -> 256 -> 256 -> 128.
#[derive(Debug, Clone)]
pub struct Denoiser {
    spec: MlpSpec,
    pub params: ParamSet,
    pub t_max: usize,
}

impl Denoiser {
    pub fn new(t_max: usize, rng: &mut Stream) -> Self {
        let spec = MlpSpec::new(
            "den",
            &[
                LATENT_DIM + TIME_EMB_DIM + COND_EMB_DIM,
                DENOISER_HIDDEN,
                DENOISER_HIDDEN,
                LATENT_DIM,
            ],
            Activation::Relu,
            Activation::Identity,
        );
        let mut params = ParamSet::new();
        spec.init_into(&mut params, rng);
        Denoiser {
            spec,
            params,
            t_max,
        }
    }

    pub fn from_params(params: ParamSet, t_max: usize) -> Result<Self> {
        let mut dims = Vec::new();
        for l in 0.. {
            let name = format!("den/w{l}");
            if !params.names().any(|n| n == name) {
                break;
            }
            let t = params.get(&name);
            if t.shape().len() != 2 {
                return Err(Error::Artifact(format!("parameter {name:?} is not a matrix")));
            }
            let (rows, cols) = t.dims2();
            if l == 0 {
                dims.push(rows);
            } else if *dims.last().unwrap() != rows {
                return Err(Error::Artifact(format!(
                    "denoiser layer {l} width {rows} does not chain"
                )));
            }
            dims.push(cols);
        }
        if dims.len() < 2 {
            return Err(Error::Artifact("checkpoint has no denoiser layers".into()));
        }
        let spec = MlpSpec::new("den", &dims, Activation::Relu, Activation::Identity);
        Ok(Denoiser {
            spec,
            params,
            t_max,
        })
    }

    pub fn latent_dim(&self) -> usize {
        *self.spec.dims.last().unwrap()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        g.bind(&self.params)
    }

    /// One denoiser application: z is n x latent, one timestep per row,
    /// cond_emb is n x COND_EMB_DIM.
    pub fn apply(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        z: Var,
        ts: &[usize],
        cond_emb: Var,
    ) -> Result<Var> {
        let n = z.rows();
        if ts.len() != n {
            return Err(Error::Shape {
                op: "denoise",
                detail: format!("{} timesteps for {n} rows", ts.len()),
            });
        }
        let mut te = Vec::with_capacity(n * TIME_EMB_DIM);
        for &t in ts {
            if t == 0 || t > self.t_max {
                return Err(Error::Config(format!(
                    "timestep {t} outside 1..={}",
                    self.t_max
                )));
            }
            te.extend(time_embedding(t, self.t_max));
        }
        let tv = g.constant(&Tensor::matrix(n, TIME_EMB_DIM, te)?);
        let inp = g.concat_cols(&[z, tv, cond_emb])?;
        self.spec.apply(g, bound, inp)
    }
}

/// Learned per-vocabulary embedding tables, summed: class table plus one
/// table per extra condition field.
#[derive(Debug, Clone)]
pub struct ConditionEmbedder {
    pub params: ParamSet,
    pub info: ConditionInfo,
}

impl ConditionEmbedder {
    pub fn new(info: ConditionInfo, rng: &mut Stream) -> Self {
        let mut params = ParamSet::new();
        params.insert(
            "cond/class",
            Tensor::randn(vec![info.n_classes, COND_EMB_DIM], 1.0, rng),
        );
        for (f, &vocab) in info.extra_vocab.iter().enumerate() {
            params.insert(
                &format!("cond/extra{f}"),
                Tensor::randn(vec![vocab, COND_EMB_DIM], 1.0, rng),
            );
        }
        ConditionEmbedder { params, info }
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        if !params.names().any(|n| n == "cond/class") {
            return Err(Error::Artifact("checkpoint missing cond/class table".into()));
        }
        let n_classes = params.get("cond/class").dims2().0;
        let mut extra_vocab = Vec::new();
        for f in 0.. {
            let name = format!("cond/extra{f}");
            if !params.names().any(|n| n == name) {
                break;
            }
            extra_vocab.push(params.get(&name).dims2().0);
        }
        Ok(ConditionEmbedder {
            params,
            info: ConditionInfo {
                n_classes,
                extra_vocab,
            },
        })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        g.bind(&self.params)
    }

    /// n x COND_EMB_DIM rows for the given per-row condition codes.
    /// Unknown ids are a hard error.
    pub fn embed(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        classes: &[usize],
        extras: &[Vec<usize>],
    ) -> Result<Var> {
        if extras.len() != self.info.extra_vocab.len() {
            return Err(Error::Shape {
                op: "embed",
                detail: format!(
                    "{} extra condition columns, embedder has {}",
                    extras.len(),
                    self.info.extra_vocab.len()
                ),
            });
        }
        let table = bound.var("cond/class");
        let mut emb = g.embed_lookup(table, classes)?;
        for (f, col) in extras.iter().enumerate() {
            let t = bound.var(&format!("cond/extra{f}"));
            let e = g.embed_lookup(t, col)?;
            emb = g.add(emb, e)?;
        }
        Ok(emb)
    }
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Timestep used at generation time; defaults to t_max / 2.
    pub t_gen: Option<usize>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            t_max: 1000,
            beta_min: 1e-4,
            beta_max: 0.1,
            epochs: 20,
            batch_size: 128,
            lr: 0.05,
            t_gen: None,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("generator batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "generator lr {} must be positive and finite",
                self.lr
            )));
        }
        let t_gen = self.resolved_t_gen();
        if t_gen == 0 || t_gen > self.t_max {
            return Err(Error::Config(format!(
                "t_gen {t_gen} outside 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }

    pub fn resolved_t_gen(&self) -> usize {
        self.t_gen.unwrap_or((self.t_max / 2).max(1))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_max, self.beta_min, self.beta_max)
    }
}

/// Train the denoiser and condition embedder: each step encodes a batch,
/// draws one uniform timestep per sample, forms Z_t in closed form, and
/// takes an SGD step on mean squared error to the clean latents. Both
/// returned nets are frozen.
pub fn train_generator(
    enc: &Encoder,
    train: &LabeledDataset,
    cfg: &GeneratorConfig,
) -> Result<(Denoiser, ConditionEmbedder)> {
    cfg.validate()?;
    if !enc.params.frozen {
        return Err(Error::Config(
            "encoder must be frozen before generator training".into(),
        ));
    }
    let schedule = cfg.schedule()?;
    let tree = SeedTree::new(cfg.seed);
    let mut init_rng = tree.stream("gen/init");
    let mut den = Denoiser::new(cfg.t_max, &mut init_rng);
    let mut cond = ConditionEmbedder::new(train.cond_info.clone(), &mut init_rng);

    let all: Vec<usize> = (0..train.n_cells()).collect();
    let z0_all = enc.encode(&train.matrix.dense_rows(&all))?;

    let mut shuffle_rng = tree.stream("gen/shuffle");
    let mut t_rng = tree.stream("gen/t");
    let mut noise_rng = tree.stream("gen/noise");
    let mut order = all;
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let z0 = z0_all.select_rows(batch);
            let ts: Vec<usize> = batch
                .iter()
                .map(|_| t_rng.gen_range(1..=cfg.t_max))
                .collect();
            let (zt, _) = schedule.forward_diffuse_rows(&z0, &ts, &mut noise_rng)?;
            let classes: Vec<usize> = batch.iter().map(|&i| train.classes[i]).collect();
            let extras: Vec<Vec<usize>> = train
                .extra_conds
                .iter()
                .map(|col| batch.iter().map(|&i| col[i]).collect())
                .collect();

            let diverged = |e: Error| match e {
                Error::Numeric { .. } => Error::Training {
                    step,
                    detail: format!("generator diverged ({e}); lower the learning rate"),
                },
                other => other,
            };
            let mut g = Graph::new();
            let bd = g.bind(&den.params);
            let bc = g.bind(&cond.params);
            let ztv = g.constant(&zt);
            let z0v = g.constant(&z0);
            let loss = (|| {
                let cemb = cond.embed(&mut g, &bc, &classes, &extras)?;
                let pred = den.apply(&mut g, &bd, ztv, &ts, cemb)?;
                let diff = g.sub(pred, z0v)?;
                let sq = g.mul(diff, diff)?;
                g.mean(sq)
            })()
            .map_err(diverged)?;
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: format!("generator loss {lv}; lower the learning rate"),
                });
            }
            let grads = g.backward(loss).map_err(diverged)?;
            den.params.sgd_step(&bd.grads(&grads), cfg.lr)?;
            cond.params.sgd_step(&bc.grads(&grads), cfg.lr)?;
            step += 1;
        }
    }
    den.params.frozen = true;
    cond.params.frozen = true;
    Ok((den, cond))
}

/// Mean squared denoising error of the trained nets over a dataset, with
/// fresh seeded noise: the quantity train_generator minimizes.
pub fn denoise_loss(
    den: &Denoiser,
    cond: &ConditionEmbedder,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    classes: &[usize],
    extras: &[Vec<usize>],
    seed: u64,
) -> Result<f64> {
    let tree = SeedTree::new(seed);
    let mut t_rng = tree.stream("loss/t");
    let mut noise_rng = tree.stream("loss/noise");
    let n = z0.dims2().0;
    let ts: Vec<usize> = (0..n)
        .map(|_| t_rng.gen_range(1..=schedule.t_max()))
        .collect();
    let (zt, _) = schedule.forward_diffuse_rows(z0, &ts, &mut noise_rng)?;
    let mut g = Graph::new();
    let bd = g.bind_frozen(&den.params);
    let bc = g.bind_frozen(&cond.params);
    let ztv = g.constant(&zt);
    let z0v = g.constant(z0);
    let cemb = cond.embed(&mut g, &bc, classes, extras)?;
    let pred = den.apply(&mut g, &bd, ztv, &ts, cemb)?;
    let diff = g.sub(pred, z0v)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.mean(sq)?;
    Ok(g.scalar_value(loss))
}

// ---------------------------------------------------------------- generate

/// Graph-level generation: decode(denoise(z, t_gen, cond-embedding)).
/// Differentiable with respect to z; every output is >= 0 (decoder range).
#[allow(clippy::too_many_arguments)]
pub fn generate_graph(
    g: &mut Graph,
    den: &Denoiser,
    den_bound: &BoundParams,
    cond: &ConditionEmbedder,
    cond_bound: &BoundParams,
    dec: &Decoder,
    dec_bound: &BoundParams,
    z: Var,
    t_gen: usize,
    classes: &[usize],
    extras: &[Vec<usize>],
) -> Result<Var> {
    let cemb = cond.embed(g, cond_bound, classes, extras)?;
    let ts = vec![t_gen; z.rows()];
    let z0hat = den.apply(g, den_bound, z, &ts, cemb)?;
    dec.apply(g, dec_bound, z0hat)
}

/// Plain-tensor generation outside any gradient context.
pub fn generate(
    den: &Denoiser,
    cond: &ConditionEmbedder,
    dec: &Decoder,
    z: &Tensor,
    t_gen: usize,
    classes: &[usize],
    extras: &[Vec<usize>],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bd = g.bind_frozen(&den.params);
    let bc = g.bind_frozen(&cond.params);
    let bdec = g.bind_frozen(&dec.params);
    let zv = g.constant(z);
    let out = generate_graph(&mut g, den, &bd, cond, &bc, dec, &bdec, zv, t_gen, classes, extras)?;
    Ok(g.tensor(out))
}

// ---------------------------------------------------------------- artifacts

const SCHEDULE_RECORD: &str = "schedule";

/// One checkpoint file: a schedule header record (t_max, beta_min,
/// beta_max) followed by denoiser and condition-table parameters.
pub fn save_generator<P: AsRef<std::path::Path>>(
    path: P,
    den: &Denoiser,
    cond: &ConditionEmbedder,
    schedule: &NoiseSchedule,
) -> Result<()> {
    let header = Tensor::new(
        vec![3],
        vec![
            schedule.t_max() as f64,
            schedule.beta_min,
            schedule.beta_max,
        ],
    )?;
    let mut records: Vec<(&str, &Tensor)> = vec![(SCHEDULE_RECORD, &header)];
    for (name, t) in den.params.iter() {
        records.push((name, t));
    }
    for (name, t) in cond.params.iter() {
        records.push((name, t));
    }
    save_checkpoint(path, &records)
}

pub fn load_generator<P: AsRef<std::path::Path>>(
    path: P,
) -> Result<(Denoiser, ConditionEmbedder, NoiseSchedule)> {
    let map = load_checkpoint(path)?;
    let header = map
        .get(SCHEDULE_RECORD)
        .ok_or_else(|| Error::Artifact("generator checkpoint missing schedule record".into()))?;
    if header.len() != 3 {
        return Err(Error::Artifact(format!(
            "schedule record has {} values, expected 3",
            header.len()
        )));
    }
    let (t_max, beta_min, beta_max) = (
        header.as_slice()[0] as usize,
        header.as_slice()[1],
        header.as_slice()[2],
    );
    let schedule = NoiseSchedule::linear(t_max, beta_min, beta_max)?;
    let mut den_params = ParamSet::new();
    let mut cond_params = ParamSet::new();
    for (name, t) in map {
        if name == SCHEDULE_RECORD {
            continue;
        }
        if name.starts_with("den/") {
            den_params.insert(&name, t);
        } else if name.starts_with("cond/") {
            cond_params.insert(&name, t);
        } else {
            return Err(Error::Artifact(format!(
                "unexpected record {name:?} in generator checkpoint"
            )));
        }
    }
    den_params.frozen = true;
    cond_params.frozen = true;
    Ok((
        Denoiser::from_params(den_params, t_max)?,
        ConditionEmbedder::from_params(cond_params)?,
        schedule,
    ))
}
