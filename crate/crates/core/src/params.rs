//! Named parameter storage and per-step binding to graph leaves.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    /// Whether weight decay applies (false for biases, norm gains, mask embedding).
    pub decay: bool,
}

/// Ordered set of named parameters. Insertion order is the canonical
/// iteration order for optimizer state, checkpoints and EMA.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], value: Vec<f64>, decay: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Contract(format!(
                "parameter {name}: shape {shape:?} does not hold {} values",
                value.len()
            )));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
            decay,
        });
        Ok(())
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

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copy of the parameters whose names start with one of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamSet {
        let mut out = ParamSet::new();
        for p in self.params.iter().filter(|p| prefixes.iter().any(|x| p.name.starts_with(x))) {
            out.insert(&p.name, &p.shape, p.value.clone(), p.decay)
                .expect("names are unique in the source set");
        }
        out
    }
}

/// Hands out graph leaves for the parameters of a [`ParamSet`] during one
/// forward pass. Each name maps to a single leaf, so reuse (tied weights,
/// several mask clones) accumulates into one gradient.
pub struct Binder<'a> {
    params: &'a ParamSet,
    track: bool,
    leaves: RefCell<HashMap<usize, Tensor>>,
}

impl<'a> Binder<'a> {
    /// Leaves collect gradients when `track` is set.
    pub fn new(params: &'a ParamSet, track: bool) -> Self {
        Self {
            params,
            track,
            leaves: RefCell::new(HashMap::new()),
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn tracks_gradients(&self) -> bool {
        self.track
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let idx = self
            .params
            .position(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        let mut leaves = self.leaves.borrow_mut();
        if let Some(t) = leaves.get(&idx) {
            return Ok(t.clone());
        }
        let p = &self.params.params[idx];
        let t = if self.track {
            Tensor::param(&p.shape, p.value.clone())?
        } else {
            Tensor::new(&p.shape, p.value.clone())?
        };
        leaves.insert(idx, t.clone());
        Ok(t)
    }

    /// Gradients aligned with the parameter order; unused parameters get zeros.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        let leaves = self.leaves.borrow();
        self.params
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                leaves
                    .get(&i)
                    .and_then(Tensor::grad)
                    .unwrap_or_else(|| vec![0.0; p.value.len()])
            })
            .collect()
    }

    /// Leaves handed out so far, in parameter order.
    pub fn bound_leaves(&self) -> Vec<(String, Tensor)> {
        let leaves = self.leaves.borrow();
        let mut out: Vec<_> = leaves
            .iter()
            .map(|(&i, t)| (i, self.params.params[i].name.clone(), t.clone()))
            .collect();
        out.sort_by_key(|(i, _, _)| *i);
        out.into_iter().map(|(_, n, t)| (n, t)).collect()
    }
}

/// Parameter initialization helpers.
pub struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
        (0..n).map(|_| dist.sample(self.rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_reuses_leaves() {
        let mut ps = ParamSet::new();
        ps.insert("w", &[2], vec![1.0, 2.0], true).unwrap();
        ps.insert("b", &[1], vec![0.0], false).unwrap();
        let binder = Binder::new(&ps, true);
        let a = binder.get("w").unwrap();
        let b = binder.get("w").unwrap();
        a.add(&b).unwrap().sum().backward().unwrap();
        let grads = binder.grads();
        assert_eq!(grads[0], vec![2.0, 2.0]);
        assert_eq!(grads[1], vec![0.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("w", &[1], vec![0.0], true).unwrap();
        assert!(ps.insert("w", &[1], vec![0.0], true).is_err());
        assert!(ps.insert("x", &[2], vec![0.0], true).is_err());
    }

    #[test]
    fn subset_keeps_order() {
        let mut ps = ParamSet::new();
        for n in ["prenet.a", "encoder.b", "decoder.c", "encoder.d"] {
            ps.insert(n, &[1], vec![1.0], true).unwrap();
        }
        let sub = ps.subset(&["prenet.", "encoder."]);
        let names: Vec<_> = sub.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["prenet.a", "encoder.b", "encoder.d"]);
    }
}
