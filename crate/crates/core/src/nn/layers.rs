//! Named parameters and the layers built from them.

use std::sync::Arc;

use rand::Rng;

use super::init::orthogonal;
use super::tape::{GraphBatch, Gradients, Tape, Var};
use super::{Activation, AttentionKind, NnError};
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter and return its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Record every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.input(p.value.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add the gradients of `bound` parameters. Returns the names of
    /// parameters the loss did not reach; their gradient contribution is 0.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) -> Vec<String> {
        let mut disconnected = Vec::new();
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            match grads.get(v) {
                Some(g) => p.grad.axpy(1.0, g),
                None => disconnected.push(p.name.clone()),
            }
        }
        disconnected
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// All parameter values concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    ///
    /// # Panics
    /// If `values` has the wrong length.
    pub fn assign(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_scalars(), "parameter vector length");
        let mut at = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
    }
}

pub(crate) fn activate(tape: &mut Tape, x: Var, f: Activation) -> Result<Var> {
    match f {
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
    }
}

/// `x · W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), orthogonal(d_in, d_out, gain, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, d_out)));
        Dense { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add_row(y, bound.var(b)),
            None => Ok(y),
        }
    }
}

/// `f(concat[M H, D⁻¹M H] · W)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConvLayer {
    pub weight: usize,
    pub activation: Activation,
}

impl GraphConvLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let gain = std::f64::consts::SQRT_2;
        let weight = store.add(format!("{name}.weight"), orthogonal(2 * d_in, d_out, gain, rng));
        GraphConvLayer { weight, activation }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, h: Var, graph: &Arc<GraphBatch>) -> Result<Var> {
        let mh = tape.propagate(h, graph, false)?;
        let dmh = tape.propagate(h, graph, true)?;
        let cat = tape.concat_cols(&[mh, dmh])?;
        let z = tape.matmul(cat, bound.var(self.weight))?;
        activate(tape, z, self.activation)
    }
}

/// Multi-head masked attention. Each head `h` uses columns
/// `h·d_h..(h+1)·d_h` of the query, key and value matrices; head outputs are
/// concatenated and projected back to `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionLayer {
    pub heads: usize,
    pub dim: usize,
    pub query: usize,
    pub key: usize,
    pub value: usize,
    pub output: Dense,
    pub kind: AttentionKind,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        kind: AttentionKind,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::InvalidArchitecture(format!(
                "attention width {dim} is not divisible into {heads} heads"
            )));
        }
        let query = store.add(format!("{name}.query"), orthogonal(dim, dim, 1.0, rng));
        let key = store.add(format!("{name}.key"), orthogonal(dim, dim, 1.0, rng));
        let value = store.add(format!("{name}.value"), orthogonal(dim, dim, 1.0, rng));
        let output = Dense::new(store, &format!("{name}.output"), dim, dim, 1.0, true, rng);
        Ok(AttentionLayer {
            heads,
            dim,
            query,
            key,
            value,
            output,
            kind,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Output and the per-head attention nodes (for weight inspection).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, h: Var, graph: &Arc<GraphBatch>) -> Result<(Var, Vec<Var>)> {
        let q = tape.matmul(h, bound.var(self.query))?;
        let k = tape.matmul(h, bound.var(self.key))?;
        let v = tape.matmul(h, bound.var(self.value))?;
        let dh = self.head_dim();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, head * dh, dh)?,
                    tape.slice_cols(k, head * dh, dh)?,
                    tape.slice_cols(v, head * dh, dh)?,
                )
            };
            outs.push(tape.attention(qh, kh, vh, graph, self.kind)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((self.output.forward(tape, bound, cat)?, outs))
    }
}
