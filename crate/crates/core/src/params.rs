//! Named parameter storage shared by all four networks.

use std::collections::HashMap;

use metacodec_autodiff::{Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One convolution layer: weights `[k, k, c_in, c_out]` and bias `[c_out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvSpec {
    pub fn new(name: impl Into<String>, kernel: usize, c_in: usize, c_out: usize) -> Self {
        ConvSpec { name: name.into(), kernel, c_in, c_out }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// He-uniform weights, zero biases.
    pub fn init_convs(&mut self, specs: &[ConvSpec], rng: &mut ChaCha8Rng) {
        for spec in specs {
            let fan_in = (spec.kernel * spec.kernel * spec.c_in) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let shape = [spec.kernel, spec.kernel, spec.c_in, spec.c_out];
            let w = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.random_range(-bound..bound));
            self.insert(spec.weight_name(), w);
            self.insert(spec.bias_name(), ArrayD::zeros(IxDyn(&[spec.c_out])));
        }
    }

    pub fn insert(&mut self, name: String, value: Tensor) {
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Mutable references to the named tensors, in the order given.
    pub fn tensors_mut(&mut self, names: &[String]) -> Vec<&mut Tensor> {
        let wanted: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut slots: Vec<Option<&mut Tensor>> = (0..names.len()).map(|_| None).collect();
        for (name, t) in self.entries.iter_mut() {
            if let Some(&i) = wanted.get(name.as_str()) {
                slots[i] = Some(t);
            }
        }
        slots.into_iter().zip(names).map(|(s, n)| s.unwrap_or_else(|| panic!("unknown parameter {n}"))).collect()
    }

    /// Graph leaves for every parameter; `trainable` decides whether
    /// gradients can be taken with respect to them.
    pub fn vars(&self, trainable: bool) -> Params {
        let map = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable { Var::param(t.clone()) } else { Var::constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        Params { map }
    }

    /// Trainable leaves only for names matching `pred`; everything else constant.
    pub fn vars_where(&self, pred: impl Fn(&str) -> bool) -> Params {
        let map = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if pred(n) { Var::param(t.clone()) } else { Var::constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        Params { map }
    }
}

/// Parameter handles used by the forward passes.
#[derive(Debug, Clone)]
pub struct Params {
    map: HashMap<String, Var>,
}

impl Params {
    pub fn get(&self, name: &str) -> &Var {
        self.map.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Var> {
        self.map.get(name)
    }

    /// A copy with `name` replaced by `value`.
    pub fn with(&self, name: &str, value: Var) -> Params {
        let mut map = self.map.clone();
        assert!(map.contains_key(name), "unknown parameter {name}");
        map.insert(name.to_string(), value);
        Params { map }
    }

    pub fn set(&mut self, name: &str, value: Var) {
        assert!(self.map.contains_key(name), "unknown parameter {name}");
        self.map.insert(name.to_string(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_shaped() {
        let specs = [ConvSpec::new("a", 3, 2, 4), ConvSpec::new("b", 1, 4, 1)];
        let mut s1 = ParamStore::new();
        s1.init_convs(&specs, &mut seeded_rng(7));
        let mut s2 = ParamStore::new();
        s2.init_convs(&specs, &mut seeded_rng(7));
        assert_eq!(s1, s2);
        assert_eq!(s1.get("a.w").unwrap().shape(), &[3, 3, 2, 4]);
        assert_eq!(s1.get("b.b").unwrap().shape(), &[1]);
        assert_eq!(s1.numel(), 72 + 4 + 4 + 1);
        assert_eq!(s1.names().collect::<Vec<_>>(), ["a.w", "a.b", "b.w", "b.b"]);
    }

    #[test]
    fn tensors_mut_follows_requested_order() {
        let mut s = ParamStore::new();
        s.insert("x".into(), ArrayD::zeros(IxDyn(&[1])));
        s.insert("y".into(), ArrayD::zeros(IxDyn(&[2])));
        let ts = s.tensors_mut(&["y".into(), "x".into()]);
        assert_eq!(ts[0].len(), 2);
        assert_eq!(ts[1].len(), 1);
    }
}
