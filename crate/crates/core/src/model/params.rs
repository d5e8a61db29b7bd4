use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Denoiser,
    Backbone,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    groups: Vec<Group>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Scalar count, optionally restricted to one group.
    pub fn count(&self, group: Option<Group>) -> usize {
        self.tensors
            .iter()
            .zip(&self.groups)
            .filter(|(_, g)| group.map_or(true, |want| **g == want))
            .map(|(t, _)| t.len())
            .sum()
    }

    pub(crate) fn push(&mut self, name: String, group: Group, t: Tensor) -> usize {
        self.names.push(name);
        self.groups.push(group);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Graph leaves in parameter order; groups for which `trainable`
    /// returns false become constants.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: &dyn Fn(Group) -> bool) -> Vec<Var<'g>> {
        self.tensors
            .iter()
            .zip(&self.groups)
            .map(|(t, grp)| {
                if trainable(*grp) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Seeded initializers.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = if bound == 0.0 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
        };
        Tensor::new(shape.to_vec(), data)
    }

    /// Glorot-uniform for a `[fan_in, fan_out]` matrix.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(&[fan_in, fan_out], bound)
    }
}
