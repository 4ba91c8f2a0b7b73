use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, TensorRef};

/// Trainable parameter: values plus shape. Gradients live on the graph,
/// never here; the optimizer folds them back in between steps.
#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

/// Name -> parameter registry. Sorted iteration keeps optimizer updates,
/// checkpoints and logs deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: Vec<f64>, rows: usize, cols: usize) {
        assert_eq!(data.len(), rows * cols, "param {name}: data length mismatch");
        assert!(
            self.params.insert(name.to_string(), Param { data, rows, cols }).is_none(),
            "param {name} registered twice"
        );
    }

    /// Xavier-uniform init over (rows + cols) fan.
    pub fn insert_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, data, rows, cols);
    }

    pub fn insert_uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, data, rows, cols);
    }

    pub fn insert_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) {
        self.insert(name, vec![v; rows * cols], rows, cols);
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
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

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }
}

/// Graph-side view of a `ParamStore`: every parameter cloned onto the tape
/// as a differentiable leaf, addressable by name.
pub struct Bound {
    ids: BTreeMap<String, TensorRef>,
}

impl Bound {
    pub fn new(graph: &mut Graph, store: &ParamStore) -> Self {
        let mut ids = BTreeMap::new();
        for (name, p) in store.iter() {
            let t = graph.parameter(name, p.data.clone(), p.rows, p.cols);
            ids.insert(name.clone(), t);
        }
        Bound { ids }
    }

    pub fn id(&self, name: &str) -> TensorRef {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorRef)> {
        self.ids.iter()
    }
}
