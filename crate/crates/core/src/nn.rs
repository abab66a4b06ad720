//! Named parameter storage and the glue that binds parameters onto a [`Graph`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use emoavse_tensor::ndarray::{ArrayD, IxDyn};
use emoavse_tensor::{Graph, Scalar, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::util::{hash_str, mix_seed};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    /// Frozen parameters are bound as constants and never updated.
    pub frozen: bool,
}

/// Parameters keyed by dotted path (`enc.conv1.w`), iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    map: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>, frozen: bool) {
        self.map.insert(name.into(), Param { value, frozen });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Number of trainable scalars: the trainable-parameter registry size.
    pub fn trainable_count(&self) -> usize {
        self.map.values().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.map.values().filter(|p| p.frozen).map(|p| p.value.len()).sum()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.map.iter().filter(|(_, p)| !p.frozen).map(|(n, _)| n.as_str()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            map: self
                .map
                .iter()
                .map(|(n, p)| (n.clone(), Param { value: p.value.mapv(|v| U::lit(v.as_f64())), frozen: p.frozen }))
                .collect(),
        }
    }

    /// Uniform initialisation in ±`bound`, seeded from `seed` and the name so
    /// that adding a parameter never perturbs the others.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], bound: f64, seed: u64, frozen: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, hash_str(name)));
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
        self.insert(name, ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches"), frozen);
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize], frozen: bool) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)), frozen);
    }

    /// Convolution weight `[out, in, k...]` (He-uniform, scaled by `gain`) and bias `[out]`.
    pub fn init_conv(&mut self, name: &str, cout: usize, cin: usize, kernel: &[usize], gain: f64, seed: u64, frozen: bool) {
        let fan_in = cin * kernel.iter().product::<usize>();
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        self.init_uniform(&format!("{name}.w"), &shape, gain * (6.0 / fan_in as f64).sqrt(), seed, frozen);
        self.init_zeros(&format!("{name}.b"), &[cout], frozen);
    }

    /// Transposed-convolution weight `[in, out, k...]` and bias `[out]`.
    pub fn init_conv_transpose(&mut self, name: &str, cin: usize, cout: usize, kernel: &[usize], gain: f64, seed: u64, frozen: bool) {
        let fan_in = cin * kernel.iter().product::<usize>();
        let mut shape = vec![cin, cout];
        shape.extend_from_slice(kernel);
        self.init_uniform(&format!("{name}.w"), &shape, gain * (6.0 / fan_in as f64).sqrt(), seed, frozen);
        self.init_zeros(&format!("{name}.b"), &[cout], frozen);
    }
}

/// Binds parameters onto a graph on first use and remembers which leaf
/// variable each trainable parameter became.
pub struct Binder<'a, T: Scalar> {
    pub graph: &'a Graph<T>,
    pub params: &'a ParamSet<T>,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(graph: &'a Graph<T>, params: &'a ParamSet<T>) -> Self {
        Self { graph, params, bound: RefCell::new(BTreeMap::new()) }
    }

    /// The variable for parameter `name`. Panics if it was never initialised,
    /// which is a construction bug rather than an input error.
    pub fn var(&self, name: &str) -> Var {
        if let Some(&v) = self.bound.borrow().get(name) {
            return v;
        }
        let p = self.params.get(name).unwrap_or_else(|| panic!("parameter {name} not initialised"));
        let v = if p.frozen {
            self.graph.constant(p.value.clone())
        } else {
            self.graph.param(p.value.clone())
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Trainable parameters that were used, with their leaf variables.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.bound
            .borrow()
            .iter()
            .filter(|(n, _)| !self.params.get(n).is_some_and(|p| p.frozen))
            .map(|(n, &v)| (n.clone(), v))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_stable_per_name() {
        let mut a = ParamSet::<f32>::new();
        a.init_conv("x", 4, 2, &[3], 1.0, 9, false);
        let mut b = ParamSet::<f32>::new();
        b.init_conv("other", 8, 8, &[3], 1.0, 9, false);
        b.init_conv("x", 4, 2, &[3], 1.0, 9, false);
        assert_eq!(a.get("x.w"), b.get("x.w"));
        assert_eq!(a.trainable_count(), 4 * 2 * 3 + 4);
        let bound = (6.0f32 / 6.0).sqrt();
        assert!(a.get("x.w").unwrap().value.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut ps = ParamSet::<f64>::new();
        ps.init_zeros("a", &[2], true);
        ps.init_zeros("b", &[2], false);
        let g = Graph::new();
        let binder = Binder::new(&g, &ps);
        let a = binder.var("a");
        let b = binder.var("b");
        assert_eq!(binder.var("b"), b);
        assert!(!g.requires_grad(a));
        assert!(g.requires_grad(b));
        let names: Vec<_> = binder.trainable_vars().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["b"]);
        assert_eq!(ps.frozen_count(), 2);
    }
}
