use serde::{Deserialize, Serialize};

use crate::error::{GeodinError, Result};

/// Labelled inputs. `seed` identifies the generator stream the samples came
/// from and keys any further randomised transform of the set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub seed: u64,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, seed: u64) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(GeodinError::Shape(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let dim = inputs.first().map_or(0, Vec::len);
        if let Some(i) = inputs.iter().position(|x| x.len() != dim) {
            return Err(GeodinError::Shape(format!(
                "input {i} has dimension {} but input 0 has {dim}",
                inputs[i].len()
            )));
        }
        Ok(Dataset { inputs, labels, seed })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            seed: self.seed,
        }
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut out = self.clone();
        out.inputs.extend(other.inputs.iter().cloned());
        out.labels.extend(&other.labels);
        out
    }
}
