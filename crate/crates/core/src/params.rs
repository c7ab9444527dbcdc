//! Named parameter registry split into shared and per-domain namespaces.
//!
//! Every parameter name starts with `shared/` or `domain/<name>/`. The prefix
//! alone decides which training runs may touch it.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Gradients, Graph, Scalar, Tensor, Var};

pub const SHARED: &str = "shared/";
pub const DOMAIN: &str = "domain/";

/// Which namespace a parameter belongs to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Namespace<'a> {
    Shared,
    Domain(&'a str),
}

impl<'a> Namespace<'a> {
    pub fn of(name: &'a str) -> Result<Self> {
        if name.starts_with(SHARED) {
            return Ok(Namespace::Shared);
        }
        name.strip_prefix(DOMAIN)
            .and_then(|rest| rest.split_once('/'))
            .map(|(d, _)| Namespace::Domain(d))
            .ok_or_else(|| Error::contract(format!("parameter `{name}` has no namespace")))
    }
}

pub fn shared_name(path: &str) -> String {
    format!("{SHARED}{path}")
}

pub fn domain_name(domain: &str, path: &str) -> String {
    format!("{DOMAIN}{domain}/{path}")
}

/// Name with its namespace prefix removed.
pub fn relative_name(name: &str) -> &str {
    if let Some(rest) = name.strip_prefix(SHARED) {
        return rest;
    }
    name.strip_prefix(DOMAIN)
        .and_then(|rest| rest.split_once('/'))
        .map_or(name, |(_, p)| p)
}

/// Initializers for freshly registered parameters.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanIn(usize),
    /// He normal for ReLU layers.
    Kaiming(usize),
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Init {
    /// Values for `shape`, drawn from a stream keyed by `(seed, key)`.
    pub fn sample<T: Scalar>(self, shape: &[usize], seed: u64, key: &str) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(key.as_bytes()));
        let data: Vec<f64> = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::FanIn(fan_in) => {
                let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Kaiming(fan_in) => {
                let dist = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        Tensor::from_f64(shape, &data).expect("init shape")
    }
}

/// Parameter values plus non-trainable running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    /// Registers `name`. Domain-namespaced parameters are drawn from a stream
    /// keyed by their relative name, so every domain starts from the same draw.
    pub fn init(&mut self, name: String, shape: &[usize], init: Init, seed: u64) -> Result<()> {
        Namespace::of(&name)?;
        let key = match Namespace::of(&name)? {
            Namespace::Shared => name.as_str(),
            Namespace::Domain(_) => relative_name(&name),
        };
        let t = init.sample(shape, seed, key);
        self.insert(name, t)
    }

    pub fn insert(&mut self, name: String, t: Tensor<T>) -> Result<()> {
        Namespace::of(&name)?;
        if self.params.contains_key(&name) {
            return Err(Error::contract(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::shape("set parameter", slot.shape(), t.shape()));
        }
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_buffer(&mut self, name: String, t: Tensor<T>) {
        self.buffers.insert(name, t);
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown buffer `{name}`")))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    /// Number of scalar values whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.count_where(|_| true)
    }

    pub fn shared_count(&self) -> usize {
        self.count_where(|n| n.starts_with(SHARED))
    }

    pub fn domain_count(&self, domain: &str) -> usize {
        let prefix = format!("{DOMAIN}{domain}/");
        self.count_where(|n| n.starts_with(&prefix))
    }

    /// Applies a momentum update to a running mean/variance buffer pair.
    pub fn update_running_stats(&mut self, prefix: &str, stats: &BatchStats<T>, momentum: T) -> Result<()> {
        for (suffix, fresh) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{prefix}.{suffix}");
            let buf = self
                .buffers
                .get_mut(&name)
                .ok_or_else(|| Error::contract(format!("unknown buffer `{name}`")))?;
            for (r, &f) in buf.data_mut().iter_mut().zip(fresh) {
                *r = (T::one() - momentum) * *r + momentum * f;
            }
        }
        Ok(())
    }

    /// Converts every value to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Which parameters receive gradients during a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Only `domain/<name>/`; everything else enters the graph as a constant.
    DomainOnly(String),
    Nothing,
}

/// One forward pass over a [`ParamStore`].
///
/// Parameters are bound into the graph on first use, so a pass over domain
/// `a` never touches the parameters of any other domain.
pub struct Session<'s, T> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    bound: HashMap<String, Var>,
    trainable: Trainable,
    batch_stats: bool,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'s, T: Scalar> Session<'s, T> {
    /// `batch_stats` selects training-mode batch normalization.
    pub fn new(store: &'s ParamStore<T>, trainable: Trainable, batch_stats: bool) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            trainable,
            batch_stats,
            bn_updates: Vec::new(),
        }
    }

    /// Like [`Session::new`] but appends to an existing graph.
    pub fn with_graph(graph: Graph<T>, store: &'s ParamStore<T>, trainable: Trainable, batch_stats: bool) -> Self {
        Session {
            graph,
            ..Self::new(store, trainable, batch_stats)
        }
    }

    pub fn into_graph(self) -> Graph<T> {
        self.graph
    }

    /// Makes later reads of `name` return `v` instead of the stored value.
    pub fn bind(&mut self, name: &str, v: Var) -> Result<()> {
        let stored = self.store.get(name)?.shape();
        if stored != self.graph.shape(v) {
            return Err(Error::shape("bind", stored, self.graph.shape(v)));
        }
        self.bound.insert(name.to_string(), v);
        Ok(())
    }

    /// Gradient-free evaluation with running normalization statistics.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::new(store, Trainable::Nothing, false)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn uses_batch_stats(&self) -> bool {
        self.batch_stats
    }

    fn is_trainable(&self, name: &str) -> bool {
        match &self.trainable {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::DomainOnly(d) => Namespace::of(name).ok() == Some(Namespace::Domain(d)),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.is_trainable(name) {
            self.graph.parameter(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of every parameter this pass has read.
    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }

    pub(crate) fn record_batch_stats(&mut self, prefix: String, stats: BatchStats<T>) {
        self.bn_updates.push((prefix, stats));
    }

    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradients of every trainable bound parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter(|(_, &v)| self.graph.requires_grad(v))
            .map(|(n, &v)| (n.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}
