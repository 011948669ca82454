use super::{Gradients, Graph, Tensor, Var};

/// Named, ordered collection of trainable arrays owned by one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// FNV-1a hash over the raw bits of every value, for change detection.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for x in v.iter() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// A [`ParamSet`] registered as leaves of a [`Graph`].
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub(super) fn new(graph: &'g Graph, params: &ParamSet, trainable: bool) -> Self {
        let vars = params
            .values
            .iter()
            .map(|v| graph.leaf(v.clone(), trainable))
            .collect();
        Self { vars }
    }

    /// Wraps already-registered variables in parameter order.
    pub fn from_vars(vars: Vec<Var<'g>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, i: usize) -> Var<'g> {
        self.vars[i]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Gradient accumulator matching a [`ParamSet`] layout.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    pub grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params.values.iter().map(|v| Tensor::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &Gradients) {
        for (acc, &v) in self.grads.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                *acc += g;
            }
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}
