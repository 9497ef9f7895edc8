use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered, named parameter collection. Names are stable across training
/// stages so weights can be transferred by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// He-normal with the given fan-in.
    He(usize),
    Const(f32),
}

impl ParamStore {
    pub(crate) fn register(&mut self, name: String, shape: Vec<usize>, init: Init, seed: u64) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Const(v) => vec![v; n],
            Init::He(fan_in) => {
                let mut r = rng::stream(seed, &[rng::tag("init"), rng::tag(&name)]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                (0..n).map(|_| normal.sample(&mut r) as f32).collect()
            }
        };
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, shape, data });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub(crate) fn data(&self, id: usize) -> &[f32] {
        &self.params[id].data
    }

    pub(crate) fn data_mut(&mut self, id: usize) -> &mut [f32] {
        &mut self.params[id].data
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Zeroed buffers with the same layout, for gradient accumulation.
    pub fn zeros_like(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub(crate) Vec<Vec<f32>>);

impl Grads {
    pub(crate) fn pair_mut(&mut self, a: usize, b: usize) -> (&mut [f32], &mut [f32]) {
        assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.0.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        } else {
            let (lo, hi) = self.0.split_at_mut(a);
            (&mut hi[0], &mut lo[b])
        }
    }

    pub fn buffers(&self) -> &[Vec<f32>] {
        &self.0
    }

    pub fn scale(&mut self, s: f32) {
        self.0.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }
}
