//! Named parameter storage, per-parameter gradients, and the SGD-with-momentum optimizer.

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors. Order is insertion order and
/// is the order gradients are reduced and checkpoints are written in.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn assign(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != t.shape() {
            return dim_err(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.tensors[id.0].shape(),
                t.shape()
            ));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf_ref(t)).collect())
    }

    /// Registers every parameter as a constant (inference without gradients).
    pub fn bind_frozen(&self, tape: &mut Tape<'_>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Collects the gradients from the last backward pass; unreached parameters get zeros.
    pub fn grads(&self, tape: &Tape<'_>, store: &ParamStore) -> Grads {
        Grads(
            self.0
                .iter()
                .zip(&store.tensors)
                .map(|(&v, t)| match tape.grad(v) {
                    Some(g) => Tensor::new(t.shape().to_vec(), g.to_vec()).expect("grad shape"),
                    None => Tensor::zeros(t.shape()),
                })
                .collect(),
        )
    }
}

/// One gradient tensor per parameter, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Tensor>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.0 {
            t.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// In-place momentum step: `v ← μ·v + g; p ← p − lr·v`.
pub fn sgd_momentum_step(
    param: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.len() != velocity.len() || param.len() != grad.len() {
        return dim_err(format!(
            "param {} / velocity {} / grad {} lengths differ",
            param.len(),
            velocity.len(),
            grad.len()
        ));
    }
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// SGD with momentum over a whole [`ParamStore`], with an optional learning rate per parameter.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    lrs: Vec<f64>,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "need lr >= 0 and 0 <= momentum < 1, got lr={lr} momentum={momentum}"
            )));
        }
        Ok(Self {
            lrs: vec![lr; store.len()],
            momentum,
            velocity: store.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        })
    }

    pub fn set_lr(&mut self, id: ParamId, lr: f64) {
        self.lrs[id.0] = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.0.len() != store.len() {
            return dim_err(format!("{} grads for {} params", grads.0.len(), store.len()));
        }
        for (i, (p, g)) in store.tensors.iter_mut().zip(&grads.0).enumerate() {
            if p.shape() != g.shape() {
                return dim_err(format!(
                    "grad shape {:?} for param {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            sgd_momentum_step(p.data_mut(), &mut self.velocity[i], g.data(), self.lrs[i], self.momentum)?;
        }
        Ok(())
    }
}
