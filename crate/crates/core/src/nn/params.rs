use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor2;
use rand::Rng as _;

/// Handle to one named parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors with a deterministic flat index over all scalars.
///
/// The flat index enumerates tensors in registration order and each tensor
/// row-major, so `flat_get(i)` and the named view always alias the same value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    names: Vec<String>,
    tensors: Vec<Tensor2>,
    offsets: Vec<usize>,
}

impl PredictorParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor2) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.offsets.push(self.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` tensor.
    pub fn register_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.register(name, Tensor2::from_vec(rows, cols, data).expect("sized"))
    }

    pub fn register_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.register(name, Tensor2::zeros(rows, cols))
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor2::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor2)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor2] {
        &self.tensors
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let t = self.offsets.partition_point(|&o| o <= flat) - 1;
        (t, flat - self.offsets[t])
    }

    pub fn flat_get(&self, flat: usize) -> f64 {
        let (t, i) = self.locate(flat);
        self.tensors[t].data()[i]
    }

    pub fn flat_set(&mut self, flat: usize, v: f64) {
        let (t, i) = self.locate(flat);
        self.tensors[t].data_mut()[i] = v;
    }

    /// Name and in-tensor offset of a flat index.
    pub fn describe_flat(&self, flat: usize) -> (String, usize) {
        let (t, i) = self.locate(flat);
        (self.names[t].clone(), i)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn for_each_flat_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut k = 0;
        for t in &mut self.tensors {
            for v in t.data_mut() {
                f(k, v);
                k += 1;
            }
        }
    }

    /// Same names, same shapes, same order.
    pub fn same_layout(&self, other: &PredictorParams) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Lists every naming or shape difference against `other`.
    pub fn layout_mismatches(&self, other: &PredictorParams) -> Vec<String> {
        let mut out = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            match other.find(name) {
                None => out.push(format!("parameter {name} missing")),
                Some(j) => {
                    let (a, b) = (self.tensors[i].shape(), other.tensors[j.0].shape());
                    if a != b {
                        out.push(format!(
                            "parameter {name}: expected {}x{}, found {}x{}",
                            a.0, a.1, b.0, b.1
                        ));
                    }
                }
            }
        }
        for name in &other.names {
            if self.find(name).is_none() {
                out.push(format!("unexpected parameter {name}"));
            }
        }
        out
    }

    pub fn replace_values(&mut self, other: &PredictorParams) -> Result<()> {
        let mism = self.layout_mismatches(other);
        if !mism.is_empty() {
            return Err(Error::CheckpointMismatch(mism));
        }
        for (i, name) in self.names.iter().enumerate() {
            let j = other.find(name).expect("checked");
            self.tensors[i] = other.tensors[j.0].clone();
        }
        Ok(())
    }

    /// Zero tensors with the same layout.
    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor2::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }
}

/// Per-parameter gradient buffers mirroring a [`PredictorParams`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor2>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.tensors[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.tensors[id.0]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor2::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_and_named_views_alias() {
        let mut p = PredictorParams::new();
        let a = p.register(
            "a",
            Tensor2::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let b = p.register("b", Tensor2::from_vec(1, 3, vec![5.0, 6.0, 7.0]).unwrap());
        assert_eq!(p.len(), 7);
        assert_eq!(p.flat_get(3), 4.0);
        assert_eq!(p.flat_get(4), 5.0);
        p.flat_set(6, -1.0);
        assert_eq!(p.get(b).data()[2], -1.0);
        p.get_mut(a).data_mut()[0] = 9.0;
        assert_eq!(p.flat_get(0), 9.0);
        assert_eq!(p.to_flat(), vec![9.0, 2.0, 3.0, 4.0, 5.0, 6.0, -1.0]);
        assert_eq!(p.describe_flat(5), ("b".to_string(), 1));
    }

    #[test]
    fn mismatch_listing() {
        let mut p = PredictorParams::new();
        p.register_zeros("w", 2, 2);
        p.register_zeros("x", 1, 1);
        let mut q = PredictorParams::new();
        q.register_zeros("w", 2, 3);
        q.register_zeros("y", 1, 1);
        let m = p.layout_mismatches(&q);
        assert_eq!(m.len(), 3, "{m:?}");
    }
}
