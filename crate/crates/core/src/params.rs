//! Named parameter collections with a flat-vector view.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Every learnable tensor of a model, addressed by a stable name.
///
/// Insertion order defines the flat layout: tensor `i` occupies
/// `offset(i)..offset(i) + len(i)` of [`ModelParams::flatten`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    offsets: Vec<usize>,
    total: usize,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.tensors.len());
        self.offsets.push(self.total);
        self.total += tensor.len();
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    /// Number of named tensors.
    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.total
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// A copy of `self` with values taken from `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ModelParams> {
        let mut out = self.clone();
        out.set_flat(flat)?;
        Ok(out)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total {
            return Err(Error::Shape(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                self.total
            )));
        }
        for (t, &off) in self.tensors.iter_mut().zip(&self.offsets) {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
        }
        Ok(())
    }

    /// Applies `f(flat_index, value)` to every scalar in flat order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        for (t, &off) in self.tensors.iter_mut().zip(&self.offsets) {
            for (j, v) in t.data.iter_mut().enumerate() {
                f(off + j, v);
            }
        }
    }

    /// Name of the tensor containing flat coordinate `i`.
    pub fn name_of_flat(&self, i: usize) -> &str {
        let t = self.offsets.partition_point(|&o| o <= i) - 1;
        &self.names[t]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Normal(0, std) truncated to two standard deviations.
pub fn truncated_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Standard deviation that keeps activations at unit scale through a
/// linear map with `fan_in` inputs.
pub fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParams::new();
        p.insert("a", truncated_normal(&mut rng, 2, 3, 1.0));
        p.insert("b", truncated_normal(&mut rng, 1, 4, 1.0));
        p
    }

    #[test]
    fn flat_round_trip() {
        let p = sample();
        let flat = p.flatten();
        assert_eq!(flat.len(), 10);
        assert_eq!(p.unflatten(&flat).unwrap(), p);
        assert_eq!(p.name_of_flat(0), "a");
        assert_eq!(p.name_of_flat(5), "a");
        assert_eq!(p.name_of_flat(6), "b");
        assert_eq!(p.name_of_flat(9), "b");
    }

    #[test]
    fn wrong_length_rejected() {
        let p = sample();
        assert!(p.unflatten(&[0.0; 9]).is_err());
    }

    #[test]
    fn zero_vector_gives_zero_params() {
        let p = sample().unflatten(&[0.0; 10]).unwrap();
        assert!(p.iter().all(|(_, t)| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn truncation_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = truncated_normal(&mut rng, 100, 100, 0.02);
        assert!(t.data.iter().all(|v| v.abs() <= 0.04));
    }
}
