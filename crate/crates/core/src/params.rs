//! Named parameter storage and its binding onto an autodiff tape.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Order of insertion is the
/// serialisation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }
}

/// Builds parameters with a shared prefix and RNG.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Glorot-uniform matrix scaled by `gain`.
    pub fn xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, gain: f64) -> ParamId {
        let a = gain * (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect();
        self.store.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(rows, cols))
    }

    pub fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| std * self.rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        self.store.add(name, Tensor::from_vec(rows, cols, data))
    }
}

/// A parameter store bound to one tape; each parameter becomes a leaf on first use.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    vars: RefCell<Vec<Option<Var>>>,
    trainable: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Ctx {
            tape,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            trainable: true,
        }
    }

    /// Parameters enter the tape as constants; no gradients are tracked.
    pub fn frozen(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Ctx {
            trainable: false,
            ..Self::new(tape, store)
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradient per parameter, zero for parameters that were never used.
    pub fn param_grads(&self, grads: &Grads) -> Vec<Tensor> {
        let vars = self.vars.borrow();
        self.store
            .tensors()
            .iter()
            .zip(vars.iter())
            .map(|(t, v)| {
                v.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.rows, t.cols))
            })
            .collect()
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, fan_in: usize, fan_out: usize, bias: bool, gain: f64) -> Self {
        let w = init.xavier(format!("{name}.w"), fan_in, fan_out, gain);
        let b = bias.then(|| init.zeros(format!("{name}.b"), 1, fan_out));
        Linear { w, b }
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: Var) -> Var {
        let y = ctx.tape.matmul(x, ctx.p(self.w));
        match self.b {
            Some(b) => ctx.tape.add_row(y, ctx.p(b)),
            None => y,
        }
    }
}
