use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Named parameter tensors. Iteration order is the lexical order of names,
/// which keeps serialization and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    /// Copies all of `other` into this store, replacing entries with equal names.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// The subset of parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Binds this store into a graph, either trainable or frozen.
    pub fn bind(&self, trainable: bool) -> Bind<'_> {
        Bind {
            store: self,
            trainable,
        }
    }
}

impl From<BTreeMap<String, Tensor>> for ParamStore {
    fn from(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }
}

/// A parameter store viewed from inside a graph.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl Bind<'_> {
    pub fn var(&self, g: &mut Graph, name: &str) -> Var {
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        g.param(name, t, self.trainable)
    }
}

/// Weights drawn from `N(0, std²)`, biases zero.
#[derive(Clone, Copy, Debug)]
pub struct GaussianInit {
    pub std: f64,
}

impl GaussianInit {
    pub fn sample<R: Rng>(&self, shape: &[usize], rng: &mut R) -> Tensor {
        let normal = Normal::new(0.0, self.std).expect("init std must be positive and finite");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor::from_vec(shape, data).expect("init shape")
    }
}

/// Square-kernel convolution layer; parameters `{name}.w` and `{name}.b`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, init: GaussianInit, rng: &mut R) {
        store.insert(
            format!("{}.w", self.name),
            init.sample(&[self.cout, self.cin, self.k, self.k], rng),
        );
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Var {
        let w = p.var(g, &format!("{}.w", self.name));
        let b = p.var(g, &format!("{}.b", self.name));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn out_size(&self, size: usize) -> usize {
        crate::graph::conv_out_size(size, self.k, self.stride, self.pad)
    }
}

/// Fully connected layer; parameters `{name}.w` (`[out, in]`) and `{name}.b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fin: usize, fout: usize) -> Self {
        Self {
            name: name.into(),
            fin,
            fout,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, init: GaussianInit, rng: &mut R) {
        store.insert(
            format!("{}.w", self.name),
            init.sample(&[self.fout, self.fin], rng),
        );
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.fout]));
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Var {
        let w = p.var(g, &format!("{}.w", self.name));
        let b = p.var(g, &format!("{}.b", self.name));
        g.linear(x, w, Some(b))
    }
}
