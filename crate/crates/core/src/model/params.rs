use std::io::{Read, Write};

use rand::Rng;

use crate::diff::{io, DiffError, Tensor};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    /// Appends a tensor drawn uniformly from `±sqrt(1/fan_in)`; returns its position.
    pub fn init<R: Rng>(&mut self, rng: &mut R, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("shape matches data"))
    }

    pub fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    /// Replaces a tensor of the same shape; returns false if the name is
    /// unknown or the shape differs.
    pub fn set(&mut self, name: &str, t: Tensor) -> bool {
        match self.position(name) {
            Some(i) if self.tensors[i].shape() == t.shape() => {
                self.tensors[i] = t;
                true
            }
            _ => false,
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<(), DiffError> {
        let pairs: Vec<(String, Tensor)> = self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect();
        io::write_params(out, &pairs)
    }

    pub fn read<R: Read>(input: R) -> Result<Self, DiffError> {
        let (names, tensors) = io::read_params(input)?.into_iter().unzip();
        Ok(Self { names, tensors })
    }
}
