use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Named trainable tensors addressed by slot index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    /// Uniform initialisation in `±1/sqrt(fan_in)`.
    pub fn push_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn set(&mut self, id: usize, value: Tensor) {
        self.values[id] = value;
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.values.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// `self += alpha * delta`, slot by slot.
    pub fn axpy(&mut self, alpha: f64, delta: &[Tensor]) {
        for (p, d) in self.values.iter_mut().zip(delta) {
            p.axpy(alpha, d);
        }
    }

    /// Differences `self - other`, slot by slot.
    pub fn diff(&self, other: &ParamStore) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.zip_map(b, |x, y| x - y))
            .collect()
    }

    /// Binds every slot as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| graph.param(i, t.clone()))
            .collect()
    }
}

impl ParamStore {
    /// All values concatenated slot by slot.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.values)
    }

    /// A copy of this store holding `flat` (laid out as [`ParamStore::to_flat`]).
    pub fn with_flat(&self, flat: &[f64]) -> ParamStore {
        ParamStore {
            names: self.names.clone(),
            values: unflatten(&self.shapes(), flat),
        }
    }
}

pub fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    let mut out = Vec::with_capacity(tensors.iter().map(Tensor::len).sum());
    for t in tensors {
        out.extend_from_slice(t.data());
    }
    out
}

pub fn unflatten(shapes: &[Vec<usize>], flat: &[f64]) -> Vec<Tensor> {
    let mut pos = 0;
    let out = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), flat[pos..pos + n].to_vec());
            pos += n;
            t
        })
        .collect();
    assert_eq!(pos, flat.len(), "flat vector length mismatch");
    out
}

/// Euclidean norm over a list of gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}
