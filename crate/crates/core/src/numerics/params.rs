use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::{Graph, NodeId, ParamId, Tensor};

/// One named trainable tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Name-addressed parameter container. Shapes are fixed after registration;
/// gradients are accumulated externally (from tape passes) and consumed by
/// the optimizer.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "param {name}: shape/value mismatch"
        );
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = self.entries.len();
        let n = value.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            value,
            grad: vec![0.0; n],
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Gaussian init scaled by `std`.
    pub fn add_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let value = (0..n).map(|_| gaussian(rng) * std).collect();
        self.add(name, shape, value)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn add_ones(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![1.0; n])
    }

    pub fn id(&self, name: &str) -> ParamId {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id]
    }

    pub fn get(&self, name: &str) -> &ParamEntry {
        &self.entries[self.id(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamEntry {
        let id = self.id(name);
        &mut self.entries[id]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for e in &mut self.entries {
            for g in &mut e.grad {
                *g *= c;
            }
        }
    }

    /// Scale gradients down so their global L2 norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm: f64 = self
            .entries
            .iter()
            .map(|e| e.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// Add tape-exported gradients into the store.
    pub fn accumulate(&mut self, grads: &[(ParamId, &[f64])]) -> Result<()> {
        for (pid, g) in grads {
            let e = &mut self.entries[*pid];
            if g.len() != e.grad.len() {
                return Err(Error::ShapeMismatch {
                    expected: e.shape.clone(),
                    got: vec![g.len()],
                    context: format!("gradient for {}", e.name),
                });
            }
            for (dst, src) in e.grad.iter_mut().zip(*g) {
                *dst += src;
            }
        }
        Ok(())
    }

    /// Push this parameter onto a graph as a differentiable leaf.
    pub fn node(&self, g: &mut Graph, name: &str) -> NodeId {
        let id = self.id(name);
        let e = &self.entries[id];
        g.param_leaf(id, Tensor::new(e.shape.clone(), e.value.clone()))
    }

    /// Push as a constant (no gradient tracking): the frozen-model path.
    pub fn node_frozen(&self, g: &mut Graph, name: &str) -> NodeId {
        let e = &self.entries[self.id(name)];
        g.constant(Tensor::new(e.shape.clone(), e.value.clone()))
    }
}

/// Box-Muller standard normal draw; two uniforms per sample keeps the
/// consumption pattern stable across call sites.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
