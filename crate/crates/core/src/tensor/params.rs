use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{Dims, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters are constants in every graph built over the store.
    pub trainable: bool,
    /// Whether decoupled weight decay applies. Off for biases, norm gains and
    /// the special tokens.
    pub decay: bool,
}

/// Owner of all learnable tensors of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub const fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, trainable: true, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn dims(&self, id: ParamId) -> Dims {
        self.params[id.0].value.dims()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Overwrite a parameter's value in place; shapes must match.
    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.params[id.0].value.shape(), value.shape(), "shape change for {}", self.params[id.0].name);
        self.params[id.0].value = value;
    }

    /// Overwrite a parameter's value, allowing its shape to change.
    pub fn reset(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = value;
    }
}

/// Gradient buffers keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub(crate) fn buffer(&mut self, id: ParamId, len: usize) -> &mut Vec<f64> {
        self.grads.entry(id).or_insert_with(|| vec![0.0; len])
    }

    /// `self += scale * other`, element-wise.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in other.iter() {
            let buf = self.buffer(id, g.len());
            for (b, x) in buf.iter_mut().zip(g) {
                *b += scale * x;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Element-wise mean of several gradient maps, reduced in the given order.
    pub fn mean_of(parts: &[Gradients]) -> Gradients {
        let mut out = Gradients::new();
        if parts.is_empty() {
            return out;
        }
        for p in parts {
            out.add_scaled(p, 1.0);
        }
        out.scale(1.0 / parts.len() as f64);
        out
    }

    /// Largest absolute element-wise difference; a parameter missing on one
    /// side counts as all zeros.
    pub fn max_abs_diff(&self, other: &Gradients) -> f64 {
        let mut worst: f64 = 0.0;
        for (id, g) in self.iter() {
            match other.get(id) {
                Some(h) => {
                    for (a, b) in g.iter().zip(h) {
                        worst = worst.max((a - b).abs());
                    }
                }
                None => worst = g.iter().fold(worst, |w, a| w.max(a.abs())),
            }
        }
        for (id, h) in other.iter() {
            if self.get(id).is_none() {
                worst = h.iter().fold(worst, |w, a| w.max(a.abs()));
            }
        }
        worst
    }
}
