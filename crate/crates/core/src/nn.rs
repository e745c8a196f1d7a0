//! Parameter storage, initialisation and the Adam optimiser.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named dense parameter tensors addressed by insertion index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    /// Glorot-uniform weight matrix.
    pub fn add_weight(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> usize {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let w = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit));
        self.add(name, w)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_ones(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.add(name, Array2::ones((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &Array2<f64> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Array2<f64> {
        &mut self.values[id]
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect()
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| Tensor {
                name: name.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrite values from serialized tensors; names and shapes must match.
    pub fn load_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != self.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.len()
            )));
        }
        for (id, t) in tensors.iter().enumerate() {
            let v = &self.values[id];
            if t.name != self.names[id] || (t.rows, t.cols) != v.dim() || t.data.len() != v.len() {
                return Err(Error::Incompatible(format!(
                    "tensor {} ({}×{}) does not match model tensor {} {:?}",
                    t.name, t.rows, t.cols, self.names[id], v.dim()
                )));
            }
            self.values[id] = Array2::from_shape_vec((t.rows, t.cols), t.data.clone())
                .expect("shape checked above");
        }
        Ok(())
    }
}

/// Serialized parameter tensor, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Array2<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (id, g) in grads.iter().enumerate() {
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let p = params.value_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::default();
        store.add("x", Array2::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let g = store.value(0).mapv(|x| 2.0 * (x - 1.0));
            opt.step(&mut store, &[g]);
        }
        assert!(store.value(0).iter().all(|&x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn tensors_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::default();
        store.add_weight("w", 3, 4, &mut rng);
        store.add_zeros("b", 1, 4);
        let tensors = store.to_tensors();
        let mut other = store.clone();
        other.value_mut(0).fill(0.0);
        other.load_tensors(&tensors).unwrap();
        assert_eq!(other, store);
        let mut wrong = ParamStore::default();
        wrong.add_zeros("w", 4, 3);
        wrong.add_zeros("b", 1, 4);
        assert!(wrong.load_tensors(&tensors).is_err());
    }
}
