use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::NetError;
use crate::autodiff::{tsr, Gradients, Tape, Tensor, Var};

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<(), NetError> {
        if self.index.contains_key(name) {
            return Err(NetError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape) -> Bound<'s, 't> {
        Bound {
            store: self,
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Writes `<name>.tsr` for every parameter.
    pub fn save_dir(&self, dir: &Path) -> Result<(), NetError> {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            let p = dir.join(format!("{n}.tsr"));
            tsr::save(&p, t).map_err(|e| NetError::Checkpoint(format!("{}: {e}", p.display())))?;
        }
        Ok(())
    }

    /// Replaces every parameter with `<name>.tsr` from `dir`; shapes must match.
    pub fn load_dir(&mut self, dir: &Path) -> Result<(), NetError> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let p = dir.join(format!("{n}.tsr"));
            let loaded = tsr::load(&p).map_err(|e| NetError::Checkpoint(format!("{}: {e}", p.display())))?;
            if loaded.shape() != t.shape() {
                return Err(NetError::Checkpoint(format!(
                    "{}: shape {:?} does not match the configured {:?}",
                    p.display(),
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(())
    }
}

/// A [`ParamStore`] bound to one tape.
pub struct Bound<'s, 't> {
    store: &'s ParamStore,
    vars: Vec<Var<'t>>,
}

impl<'s, 't> Bound<'s, 't> {
    pub fn get(&self, name: &str) -> Result<Var<'t>, NetError> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    /// Substitutes a parameter's var, e.g. to differentiate through it separately.
    pub fn replace(&mut self, name: &str, var: Var<'t>) -> Result<(), NetError> {
        let i = *self
            .store
            .index
            .get(name)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))?;
        self.vars[i] = var;
        Ok(())
    }

    /// Gradients aligned with the store's parameter order (zeros where unused).
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| g.get_or_zeros(*v)).collect()
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is finite and nonnegative");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("shape matches buffer")
    }
}
