//! Named parameter storage and graph binding.
//!
//! Parameters live in a [`ParamStore`] between steps (BTreeMap so every walk
//! is in deterministic name order). Each forward pass binds them into a fresh
//! [`crate::Graph`] as leaves; a [`TrainMask`] decides which leaves get
//! gradients.

use std::collections::{BTreeMap, BTreeSet};

use crate::graph::{Arr, Graph, NodeId};
use crate::{AutogradError, Result};

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; panics on duplicate names, which always mean a
    /// model wiring bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        assert!(
            self.params.insert(name.clone(), value).is_none(),
            "duplicate parameter '{name}'"
        );
    }

    pub fn get(&self, name: &str) -> Result<&Arr> {
        self.params
            .get(name)
            .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Arr> {
        self.params
            .get_mut(name)
            .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Arr) -> Result<()> {
        let slot = self.get_mut(name)?;
        assert_eq!(slot.shape(), value.shape(), "shape change for '{name}'");
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Name-ordered iteration; the order is part of the determinism contract.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn total_elems(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn elems_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, a)| a.len())
            .sum()
    }
}

/// The set of parameter names that receive gradients and optimizer updates.
#[derive(Debug, Clone, Default)]
pub struct TrainMask {
    names: BTreeSet<String>,
}

impl TrainMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all(store: &ParamStore) -> Self {
        Self::from_predicate(store, |_| true)
    }

    pub fn from_predicate(store: &ParamStore, pred: impl Fn(&str) -> bool) -> Self {
        TrainMask {
            names: store
                .names()
                .filter(|n| pred(n))
                .cloned()
                .collect(),
        }
    }

    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        TrainMask {
            names: names.into_iter().collect(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.names.iter()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>) {
        self.names.insert(name.into());
    }

    pub fn trainable_elems(&self, store: &ParamStore) -> usize {
        self.names
            .iter()
            .filter_map(|n| store.get(n).ok())
            .map(|a| a.len())
            .sum()
    }
}

#[derive(Clone, Copy)]
pub enum BindMode<'a> {
    /// All parameters are constants; the graph records no gradient structure.
    Infer,
    /// Parameters named by the mask become differentiable leaves.
    Train(&'a TrainMask),
}

/// Snapshot of a [`ParamStore`] bound into one graph: name -> leaf node.
pub struct Binder {
    nodes: BTreeMap<String, NodeId>,
}

impl Binder {
    pub fn bind(g: &mut Graph, store: &ParamStore, mode: BindMode<'_>) -> Binder {
        Self::bind_filtered(g, store, mode, |_| true)
    }

    /// Binds only parameters whose name passes `pred`; useful to keep
    /// sampling graphs free of trainer-only parameters.
    pub fn bind_filtered(
        g: &mut Graph,
        store: &ParamStore,
        mode: BindMode<'_>,
        pred: impl Fn(&str) -> bool,
    ) -> Binder {
        let mut nodes = BTreeMap::new();
        for (name, value) in store.iter() {
            if !pred(name) {
                continue;
            }
            let requires = match mode {
                BindMode::Infer => false,
                BindMode::Train(mask) => mask.contains(name),
            };
            nodes.insert(name.clone(), g.leaf(value.clone(), requires));
        }
        Binder { nodes }
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.nodes.keys()
    }

    /// Gradients of all mask-selected leaves after a backward pass, keyed by
    /// parameter name. Parameters the loss never touched get zero gradients.
    pub fn grads(&self, g: &Graph, store: &ParamStore, mask: &TrainMask) -> Result<BTreeMap<String, Arr>> {
        let mut out = BTreeMap::new();
        for name in mask.names() {
            let node = self.node(name)?;
            let grad = match g.grad(node) {
                Some(gr) => gr.clone(),
                None => Arr::zeros(store.get(name)?.raw_dim()),
            };
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }
}
