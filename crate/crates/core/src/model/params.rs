use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{DiffArray, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Uniform in ±√(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    /// Uniform with unit variance.
    UnitUniform,
    Const(f64),
}

impl ParamStore {
    pub(crate) fn add(&mut self, rng: &mut ChaCha8Rng, name: String, shape: &[usize], init: Init) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
            Init::UnitUniform => {
                let a = 3f64.sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
            Init::Const(c) => vec![c; n],
        };
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    /// Pushes every parameter onto `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let a = DiffArray::new(p.shape.clone(), p.data.clone()).expect("parameter shapes are valid");
                if trainable {
                    tape.leaf(a)
                } else {
                    tape.constant(a)
                }
            })
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles of a [`ParamStore`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    /// Copies gradients from `tape` into one buffer per parameter (zeros if absent).
    pub fn gradients(&self, tape: &Tape, store: &ParamStore) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(store.iter())
            .map(|(v, p)| {
                tape.grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.data.len()])
            })
            .collect()
    }
}
