//! Small building blocks shared by the networks in this crate: MLP
//! parameter initialization and graph-side application.

use crate::error::Result;
use crate::rng::Stream;
use crate::tensor::{BoundParams, Graph, ParamSet, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
}

/// Fully connected stack `dims[0] -> dims[1] -> ... -> dims.last()`.
/// Parameters live in a `ParamSet` under `{prefix}/w{i}` and `{prefix}/b{i}`.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(prefix: &str, dims: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        MlpSpec {
            prefix: prefix.to_string(),
            dims: dims.to_vec(),
            hidden,
            output,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn weight_name(&self, layer: usize) -> String {
        format!("{}/w{layer}", self.prefix)
    }

    fn bias_name(&self, layer: usize) -> String {
        format!("{}/b{layer}", self.prefix)
    }

    /// He-style init: W_l ~ N(0, sqrt(2/fan_in)) before a relu, else
    /// N(0, sqrt(1/fan_in)); biases zero.
    pub fn init_into(&self, params: &mut ParamSet, rng: &mut Stream) {
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let act = if l + 1 < self.n_layers() {
                self.hidden
            } else {
                self.output
            };
            let gain: f64 = if act == Activation::Relu { 2.0 } else { 1.0 };
            let std = (gain / fan_in as f64).sqrt();
            params.insert(
                &self.weight_name(l),
                crate::tensor::Tensor::randn(vec![fan_in, fan_out], std, rng),
            );
            params.insert(
                &self.bias_name(l),
                crate::tensor::Tensor::zeros(vec![1, fan_out]),
            );
        }
    }

    /// Forward pass as graph nodes: x W + b with the configured activations.
    pub fn apply(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.n_layers() {
            let w = bound.var(&self.weight_name(l));
            let b = bound.var(&self.bias_name(l));
            let z = g.matmul(h, w)?;
            let z = g.add_row(z, b)?;
            let act = if l + 1 < self.n_layers() {
                self.hidden
            } else {
                self.output
            };
            h = match act {
                Activation::Identity => z,
                Activation::Relu => g.relu(z)?,
                Activation::Softplus => g.softplus(z)?,
            };
        }
        Ok(h)
    }

    /// Forward pass outside any graph (inference only).
    pub fn apply_plain(&self, params: &ParamSet, x: &crate::tensor::Tensor) -> Result<crate::tensor::Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let bound = g.bind_frozen(params);
        let out = self.apply(&mut g, &bound, xv)?;
        Ok(g.tensor(out))
    }
}
