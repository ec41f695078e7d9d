//! Named parameters with matching gradient accumulators.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AcpError, Result};
use crate::nn::matrix::Matrix;

/// One named parameter and its gradient slot.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub value: Matrix,
    pub grad: Matrix,
}

/// Parameter store: insertion order is the program's creation order, so a
/// fixed seed reproduces initialization exactly.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub rng_seed: u64,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Tensor>,
    order: Vec<String>,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            params: BTreeMap::new(),
            order: Vec::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Matrix) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(AcpError::Contract(format!("duplicate parameter {name:?}")));
        }
        let grad = Matrix::zeros(value.rows, value.cols);
        self.params.insert(name.to_string(), Tensor { value, grad });
        self.order.push(name.to_string());
        Ok(())
    }

    /// Add a parameter initialized uniformly on (-a, a) with
    /// a = sqrt(6 / (fan_in + fan_out)).
    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.random_range(-a..a))
            .collect();
        self.insert(name, Matrix::new(rows, cols, data)?)
    }

    /// Add a zero-initialized parameter (used for biases).
    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, Matrix::zeros(rows, cols))
    }

    /// Add a parameter with explicit values.
    pub fn add_matrix(&mut self, name: &str, value: Matrix) -> Result<()> {
        self.insert(name, value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Total number of scalar parameter coordinates.
    pub fn n_coords(&self) -> usize {
        self.params.values().map(|t| t.value.len()).sum()
    }

    pub fn value(&self, name: &str) -> &Matrix {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name:?}")).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Matrix {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Matrix {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name:?}")).grad
    }

    /// Accumulate into a parameter's gradient slot.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Matrix) -> Result<()> {
        let tensor = self
            .params
            .get_mut(name)
            .ok_or_else(|| AcpError::Contract(format!("unknown parameter {name:?}")))?;
        if tensor.grad.shape() != delta.shape() {
            return Err(AcpError::Shape {
                op: "accumulate_grad",
                detail: format!(
                    "{name:?}: grad {:?} vs delta {:?}",
                    tensor.grad.shape(),
                    delta.shape()
                ),
            });
        }
        for (g, d) in tensor.grad.data.iter_mut().zip(&delta.data) {
            *g += d;
        }
        tensor.grad.check_finite("accumulate_grad")
    }

    pub fn zero_grads(&mut self) {
        for tensor in self.params.values_mut() {
            tensor.grad.data.fill(0.0);
        }
    }

    /// Scale every gradient in place (for mean reductions over a batch).
    pub fn scale_grads(&mut self, s: f64) {
        for tensor in self.params.values_mut() {
            for g in tensor.grad.data.iter_mut() {
                *g *= s;
            }
        }
    }

    /// Snapshot of the gradients, keyed by name.
    pub fn grads_snapshot(&self) -> BTreeMap<String, Matrix> {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), t.grad.clone()))
            .collect()
    }

    /// Export parameter values in creation order (for checkpoints).
    pub fn export(&self) -> Vec<(String, Matrix)> {
        self.order
            .iter()
            .map(|n| (n.clone(), self.params[n].value.clone()))
            .collect()
    }

    /// Replace parameter values from a checkpoint; shapes must match.
    pub fn import(&mut self, tensors: &[(String, Matrix)]) -> Result<()> {
        for (name, value) in tensors {
            let tensor = self
                .params
                .get_mut(name)
                .ok_or_else(|| AcpError::Contract(format!("checkpoint has unknown parameter {name:?}")))?;
            if tensor.value.shape() != value.shape() {
                return Err(AcpError::Shape {
                    op: "import",
                    detail: format!("{name:?}: {:?} vs {:?}", tensor.value.shape(), value.shape()),
                });
            }
            tensor.value = value.clone();
        }
        Ok(())
    }

    /// Order-independent checksum over the raw bits of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for name in &self.order {
            for &v in &self.params[name].value.data {
                acc ^= v.to_bits();
                acc = acc.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_reproducible_from_seed() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        a.add_uniform("w", 3, 4).unwrap();
        b.add_uniform("w", 3, 4).unwrap();
        assert_eq!(a.value("w"), b.value("w"));
        let mut c = ParamStore::new(8);
        c.add_uniform("w", 3, 4).unwrap();
        assert_ne!(a.value("w"), c.value("w"));
    }

    #[test]
    fn uniform_bound_respected() {
        let mut s = ParamStore::new(1);
        s.add_uniform("w", 10, 30).unwrap();
        let a = (6.0f64 / 40.0).sqrt();
        assert!(s.value("w").data.iter().all(|v| v.abs() < a));
    }

    #[test]
    fn grads_accumulate_and_zero() {
        let mut s = ParamStore::new(1);
        s.add_zeros("w", 2, 2).unwrap();
        let d = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        s.accumulate_grad("w", &d).unwrap();
        s.accumulate_grad("w", &d).unwrap();
        assert_eq!(s.grad("w").data, vec![2.0, 4.0, 6.0, 8.0]);
        s.zero_grads();
        assert_eq!(s.grad("w").data, vec![0.0; 4]);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParamStore::new(1);
        s.add_zeros("w", 1, 1).unwrap();
        assert!(s.add_zeros("w", 1, 1).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::new(3);
        s.add_uniform("w", 2, 2).unwrap();
        let before = s.checksum();
        assert_eq!(before, s.checksum());
        s.value_mut("w").data[0] += 1.0;
        assert_ne!(before, s.checksum());
    }
}
