//! The encoder/decoder pair that provides the 128-dim latent space. Both
//! nets are trained jointly as an autoencoder on normalized expression,
//! then frozen; the frozen encoder doubles as the feature extractor for
//! matching and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Activation, MlpSpec};
use crate::rng::{SeedTree, Stream};
use crate::tensor::{load_checkpoint, save_checkpoint, BoundParams, Graph, ParamSet, Tensor, Var};

pub const HIDDEN_WIDTH: usize = 512;
pub const LATENT_DIM: usize = 128;

/// Rows fed through the nets at once during plain inference.
const INFER_CHUNK: usize = 1024;

/// E: data -> latent, d -> 512 -> 128, relu hidden.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: MlpSpec,
    pub params: ParamSet,
}

/// D: latent -> data, 128 -> 512 -> d, relu hidden, softplus output
/// (every decoded value is >= 0).
#[derive(Debug, Clone)]
pub struct Decoder {
    spec: MlpSpec,
    pub params: ParamSet,
}

impl Encoder {
    pub fn new(d_in: usize, rng: &mut Stream) -> Self {
        let spec = MlpSpec::new(
            "enc",
            &[d_in, HIDDEN_WIDTH, LATENT_DIM],
            Activation::Relu,
            Activation::Identity,
        );
        let mut params = ParamSet::new();
        spec.init_into(&mut params, rng);
        Encoder { spec, params }
    }

    /// Rebuild from checkpointed parameters (widths inferred from shapes).
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let dims = infer_two_layer_dims(&params, "enc")?;
        let spec = MlpSpec::new("enc", &dims, Activation::Relu, Activation::Identity);
        Ok(Encoder { spec, params })
    }

    pub fn d_in(&self) -> usize {
        self.spec.dims[0]
    }

    pub fn latent_dim(&self) -> usize {
        *self.spec.dims.last().unwrap()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        g.bind(&self.params)
    }

    pub fn apply(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
        self.spec.apply(g, bound, x)
    }

    /// Encode dense rows outside any gradient context.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        apply_chunked(&self.spec, &self.params, x, self.d_in(), self.latent_dim())
    }

    /// Encode selected cells of a dataset, densifying in bounded chunks so
    /// the full matrix never has to exist in memory at once.
    pub fn encode_cells(&self, ds: &LabeledDataset, idx: &[usize]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(idx.len() * self.latent_dim());
        for chunk in idx.chunks(512) {
            let dense = ds.matrix.dense_rows(chunk);
            let z = self.encode(&dense)?;
            out.extend_from_slice(z.as_slice());
        }
        Tensor::matrix(idx.len(), self.latent_dim(), out)
    }
}

impl Decoder {
    pub fn new(d_out: usize, rng: &mut Stream) -> Self {
        let spec = MlpSpec::new(
            "dec",
            &[LATENT_DIM, HIDDEN_WIDTH, d_out],
            Activation::Relu,
            Activation::Softplus,
        );
        let mut params = ParamSet::new();
        spec.init_into(&mut params, rng);
        Decoder { spec, params }
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let dims = infer_two_layer_dims(&params, "dec")?;
        let spec = MlpSpec::new("dec", &dims, Activation::Relu, Activation::Softplus);
        Ok(Decoder { spec, params })
    }

    pub fn d_out(&self) -> usize {
        *self.spec.dims.last().unwrap()
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.dims[0]
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        g.bind(&self.params)
    }

    pub fn apply(&self, g: &mut Graph, bound: &BoundParams, z: Var) -> Result<Var> {
        self.spec.apply(g, bound, z)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        apply_chunked(&self.spec, &self.params, z, self.latent_dim(), self.d_out())
    }
}

fn infer_two_layer_dims(params: &ParamSet, prefix: &str) -> Result<Vec<usize>> {
    let grab = |name: String| -> Result<(usize, usize)> {
        if !params.names().any(|n| n == name) {
            return Err(Error::Artifact(format!("checkpoint missing parameter {name:?}")));
        }
        let t = params.get(&name);
        if t.shape().len() != 2 {
            return Err(Error::Artifact(format!("parameter {name:?} is not a matrix")));
        }
        Ok(t.dims2())
    };
    let (d0, h0) = grab(format!("{prefix}/w0"))?;
    let (h1, d1) = grab(format!("{prefix}/w1"))?;
    if h0 != h1 {
        return Err(Error::Artifact(format!(
            "inconsistent {prefix} layer widths {h0} vs {h1}"
        )));
    }
    Ok(vec![d0, h0, d1])
}

fn apply_chunked(
    spec: &MlpSpec,
    params: &ParamSet,
    x: &Tensor,
    want_in: usize,
    out_width: usize,
) -> Result<Tensor> {
    let (n, d) = x.dims2();
    if d != want_in {
        return Err(Error::Shape {
            op: "apply",
            detail: format!("input width {d}, network expects {want_in}"),
        });
    }
    let mut out = Vec::with_capacity(n * out_width);
    let data = x.as_slice();
    let mut start = 0;
    while start < n {
        let len = INFER_CHUNK.min(n - start);
        let chunk = Tensor::matrix(len, d, data[start * d..(start + len) * d].to_vec())?;
        let mut g = Graph::new();
        let xv = g.constant(&chunk);
        let bound = g.bind_frozen(params);
        let h = spec.apply(&mut g, &bound, xv)?;
        out.extend_from_slice(g.value(h));
        start += len;
    }
    Tensor::matrix(n, out_width, out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AEConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AEConfig {
    fn default() -> Self {
        AEConfig {
            epochs: 30,
            batch_size: 128,
            lr: 0.03,
            seed: 0,
        }
    }
}

impl AEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("autoencoder batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "autoencoder lr {} must be positive and finite",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Joint SGD on mean-squared reconstruction error over minibatches of
/// normalized expression. Returns both nets frozen. `epochs = 0` returns
/// the freshly initialized (still frozen) pair.
pub fn train_autoencoder(train: &LabeledDataset, cfg: &AEConfig) -> Result<(Encoder, Decoder)> {
    cfg.validate()?;
    let tree = SeedTree::new(cfg.seed);
    let mut init_rng = tree.stream("ae/init");
    let mut enc = Encoder::new(train.n_genes(), &mut init_rng);
    let mut dec = Decoder::new(train.n_genes(), &mut init_rng);

    let mut shuffle_rng = tree.stream("ae/shuffle");
    let mut order: Vec<usize> = (0..train.n_cells()).collect();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = train.matrix.dense_rows(batch);
            let diverged = |e: Error| match e {
                Error::Numeric { .. } => Error::Training {
                    step,
                    detail: format!("autoencoder diverged ({e}); lower the learning rate"),
                },
                other => other,
            };
            let mut g = Graph::new();
            let be = g.bind(&enc.params);
            let bd = g.bind(&dec.params);
            let xv = g.constant(&x);
            let loss = (|| {
                let z = enc.apply(&mut g, &be, xv)?;
                let xhat = dec.apply(&mut g, &bd, z)?;
                let diff = g.sub(xhat, xv)?;
                let sq = g.mul(diff, diff)?;
                g.mean(sq)
            })()
            .map_err(diverged)?;
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: format!("autoencoder loss {lv}; lower the learning rate"),
                });
            }
            let grads = g.backward(loss).map_err(diverged)?;
            enc.params.sgd_step(&be.grads(&grads), cfg.lr)?;
            dec.params.sgd_step(&bd.grads(&grads), cfg.lr)?;
            step += 1;
        }
    }
    enc.params.frozen = true;
    dec.params.frozen = true;
    Ok((enc, dec))
}

/// Mean over all entries of (decode(encode(x)) - x)^2.
pub fn reconstruction_mse(enc: &Encoder, dec: &Decoder, x: &Tensor) -> Result<f64> {
    let xhat = dec.decode(&enc.encode(x)?)?;
    let n = x.len();
    let sum: f64 = xhat
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n as f64)
}

pub fn save_foundation<P: AsRef<std::path::Path>>(
    path: P,
    enc: &Encoder,
    dec: &Decoder,
) -> Result<()> {
    let mut records: Vec<(&str, &Tensor)> = Vec::new();
    for (name, t) in enc.params.iter() {
        records.push((name, t));
    }
    for (name, t) in dec.params.iter() {
        records.push((name, t));
    }
    save_checkpoint(path, &records)
}

/// Load a frozen pair from one checkpoint file.
pub fn load_foundation<P: AsRef<std::path::Path>>(path: P) -> Result<(Encoder, Decoder)> {
    let map = load_checkpoint(path)?;
    let mut enc_params = ParamSet::new();
    let mut dec_params = ParamSet::new();
    for (name, t) in map {
        if name.starts_with("enc/") {
            enc_params.insert(&name, t);
        } else if name.starts_with("dec/") {
            dec_params.insert(&name, t);
        } else {
            return Err(Error::Artifact(format!(
                "unexpected record {name:?} in foundation checkpoint"
            )));
        }
    }
    enc_params.frozen = true;
    dec_params.frozen = true;
    let enc = Encoder::from_params(enc_params)?;
    let dec = Decoder::from_params(dec_params)?;
    if enc.latent_dim() != dec.latent_dim() {
        return Err(Error::Artifact(format!(
            "encoder latent {} does not match decoder latent {}",
            enc.latent_dim(),
            dec.latent_dim()
        )));
    }
    Ok((enc, dec))
}
