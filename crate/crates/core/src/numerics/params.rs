use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, shaped parameter matrices. Vectors are stored as `n x 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    data: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.data.push(vec![0.0; rows * cols]);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        self.shapes[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn set(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let slot = &mut self.data[id.0];
        if slot.len() != values.len() {
            return Err(Error::dim("ParamStore::set", slot.len(), values.len()));
        }
        slot.copy_from_slice(values);
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn init_uniform<R: Rng>(&mut self, id: ParamId, range: f64, rng: &mut R) {
        for v in &mut self.data[id.0] {
            *v = rng.gen_range(-range..=range);
        }
    }

    /// True when both stores hold the same names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.shapes == other.shapes
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    /// `self += scale * grads`, parameter by parameter.
    pub fn axpy(&mut self, scale: f64, grads: &Gradients) {
        for (p, g) in self.data.iter_mut().zip(&grads.data) {
            if let Some(g) = g {
                for (pv, gv) in p.iter_mut().zip(g) {
                    *pv += scale * gv;
                }
            }
        }
    }
}

/// Gradients aligned with a [`ParamStore`]. Parameters the loss never touched
/// have no buffer and read back as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    data: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            data: vec![None; store.len()],
            sizes: store.data.iter().map(Vec::len).collect(),
        }
    }

    /// Gradient for `id`, materialising zeros for untouched parameters.
    pub fn get(&self, id: ParamId) -> std::borrow::Cow<'_, [f64]> {
        match &self.data[id.0] {
            Some(g) => std::borrow::Cow::Borrowed(g),
            None => std::borrow::Cow::Owned(vec![0.0; self.sizes[id.0]]),
        }
    }

    pub fn touched(&self, id: ParamId) -> bool {
        self.data[id.0].is_some()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let size = self.sizes[id.0];
        self.data[id.0].get_or_insert_with(|| vec![0.0; size])
    }

    pub(crate) fn accumulate_owned(&mut self, id: ParamId, grad: Vec<f64>) {
        match &mut self.data[id.0] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(&grad) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    /// Drops the gradient of one parameter.
    pub fn clear(&mut self, id: ParamId) {
        self.data[id.0] = None;
    }

    /// Adds `other` into `self` in parameter order.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.data.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.data[i] {
                    Some(existing) => {
                        for (a, b) in existing.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.data.iter_mut().flatten() {
            for v in g {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.data
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().flatten().all(|v| v.is_finite())
    }
}
