//! Named parameter storage and per-graph binding.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autograd::{Array, Gradients, Graph, Var};

/// Flat, name-ordered collection of weight arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Arc<Array>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Array>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Array>)> {
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
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Copy every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (name, value) in &other.tensors {
            self.tensors
                .insert(format!("{prefix}{name}"), Arc::clone(value));
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn sub_store(&self, prefix: &str) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), Arc::clone(v))))
            .collect();
        ParamStore { tensors }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in &self.tensors {
            hasher.update(name.as_bytes());
            for d in value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for x in value.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub(crate) fn init_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        self.insert(name, Array::from_shape_vec(IxDyn(shape), data).unwrap());
    }

    pub(crate) fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Array::zeros(IxDyn(shape)));
    }

    /// Conv weight `[out, in, k, k]` with fan-in scaling, plus zero bias.
    pub(crate) fn init_conv<R: Rng>(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
        rng: &mut R,
    ) {
        let std = gain / ((cin * k * k) as f64).sqrt();
        self.init_normal(&format!("{prefix}.weight"), &[cout, cin, k, k], std, rng);
        self.init_zeros(&format!("{prefix}.bias"), &[cout]);
    }

    /// Linear weight `[in, out]` with fan-in scaling, plus zero bias.
    pub(crate) fn init_linear<R: Rng>(
        &mut self,
        prefix: &str,
        din: usize,
        dout: usize,
        gain: f64,
        rng: &mut R,
    ) {
        let std = gain / (din as f64).sqrt();
        self.init_normal(&format!("{prefix}.weight"), &[din, dout], std, rng);
        self.init_zeros(&format!("{prefix}.bias"), &[dout]);
    }
}

/// A [`ParamStore`] bound to one [`Graph`]. Leaves are created lazily and
/// cached, so a parameter used twice in a forward pass is one node.
pub struct Params<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g> Params<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore, trainable: bool) -> Self {
        Self {
            graph,
            store,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.get(name).is_some()
    }

    pub fn get(&self, name: &str) -> Var<'g> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        let var = self.graph.leaf_shared(Arc::clone(value), self.trainable);
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Gradients for every parameter touched in this graph.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Array> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}
