//! Minimal f64 neural-network toolkit: autodiff tape, parameter store,
//! Adam, and layer helpers shared by the encoder and the score network.

mod adam;
mod tape;

pub use adam::Adam;
pub use tape::{GradMap, NodeId, Tape};

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::seeds::derive_seed;
use crate::{Error, Result};

/// Named f64 parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.params.insert(name.to_string(), value).is_none(),
            "parameter {name} registered twice"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }

    /// Flat view for checkpoint serialization: (name, shape, data).
    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.params
            .iter()
            .map(|(n, v)| (n.clone(), v.shape().to_vec(), v.iter().copied().collect()))
            .collect()
    }

    pub fn import(entries: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut store = Self::new();
        for (name, shape, data) in entries {
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Shape(format!("parameter {name}: {e}")))?;
            store.params.insert(name, arr);
        }
        Ok(store)
    }

    /// In-place signed perturbation of one scalar entry (finite differences).
    pub fn nudge(&mut self, name: &str, index: usize, delta: f64) {
        self.get_mut(name).as_slice_mut().expect("contiguous")[index] += delta;
    }
}

fn init_rng(seed: u64, name: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(seed, &["param-init", name]))
}

/// Registers parameters with shape-aware fan-in initialization. Each tensor
/// draws from a stream keyed by (seed, name), so registration order never
/// changes the values.
pub struct ParamInit<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, seed }
    }

    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) {
        let mut rng = init_rng(self.seed, name);
        let v = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound));
        self.store.insert(name, v);
    }

    /// Dense layer: `{name}.w` of (d_in, d_out) and `{name}.b` of (d_out).
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) {
        let bound = (1.0 / d_in as f64).sqrt();
        self.uniform(&format!("{name}.w"), &[d_in, d_out], bound);
        self.store
            .insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[d_out])));
    }

    pub fn conv1d(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        let bound = (1.0 / (c_in * k) as f64).sqrt();
        self.uniform(&format!("{name}.w"), &[c_out, c_in, k], bound);
        self.store
            .insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out])));
    }

    pub fn conv2d(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        let bound = (1.0 / (c_in * k * k) as f64).sqrt();
        self.uniform(&format!("{name}.w"), &[c_out, c_in, k, k], bound);
        self.store
            .insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out])));
    }

    /// Normalization affine: `{name}.g` ones and `{name}.b` zeros, both (n).
    pub fn norm(&mut self, name: &str, n: usize) {
        self.store
            .insert(&format!("{name}.g"), ArrayD::from_elem(IxDyn(&[n]), 1.0));
        self.store
            .insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[n])));
    }
}

/// A forward pass: a tape plus the parameters feeding it. In train mode the
/// parameter leaves collect gradients; in eval mode they are constants.
pub struct Forward<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    train: bool,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a ParamStore, train: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            train,
        }
    }

    /// Leaf node for a named parameter.
    pub fn p(&mut self, name: &str) -> NodeId {
        let v = self.params.get(name).clone();
        if self.train {
            self.tape.param(name, v)
        } else {
            self.tape.constant(v)
        }
    }

    pub fn linear(&mut self, name: &str, x: NodeId) -> NodeId {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let y = self.tape.matmul(x, w);
        self.tape.add_bias_cols(y, b)
    }

    pub fn conv1d(&mut self, name: &str, x: NodeId, pad: usize) -> NodeId {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.tape.conv1d(x, w, b, pad)
    }

    pub fn conv2d(&mut self, name: &str, x: NodeId, pad: usize, stride: usize) -> NodeId {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.tape.conv2d(x, w, b, pad, stride)
    }

    pub fn layer_norm(&mut self, name: &str, x: NodeId) -> NodeId {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        self.tape.layer_norm_rows(x, g, b, 1e-5)
    }

    pub fn group_norm(&mut self, name: &str, x: NodeId, groups: usize) -> NodeId {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        self.tape.group_norm(x, g, b, groups, 1e-5)
    }
}

/// Transformer sinusoidal position embedding of a scalar position.
pub fn sinusoidal_embedding(pos: f64, dim: usize) -> ndarray::Array1<f64> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = ndarray::Array1::zeros(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// Accumulates gradient maps across a batch (sums entries).
pub fn accumulate_grads(total: &mut GradMap, part: GradMap) {
    for (name, g) in part {
        match total.get_mut(&name) {
            Some(t) => *t += &g,
            None => {
                total.insert(name, g);
            }
        }
    }
}

/// Scales every gradient in place (e.g. by 1/batch).
pub fn scale_grads(grads: &mut GradMap, k: f64) {
    for g in grads.values_mut() {
        g.mapv_inplace(|x| x * k);
    }
}

/// Relative-error comparison of an analytic gradient map against central
/// finite differences on `n_probes` randomly chosen parameter entries.
/// Returns the worst relative error encountered.
pub fn finite_difference_check(
    loss_fn: &mut dyn FnMut(&ParamStore) -> f64,
    params: &ParamStore,
    grads: &GradMap,
    n_probes: usize,
    step: f64,
    seed: u64,
) -> f64 {
    let names: Vec<&String> = params.names().collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let name = names[rng.random_range(0..names.len())];
        let len = params.get(name).len();
        let idx = rng.random_range(0..len);

        let mut plus = params.clone();
        plus.nudge(name, idx, step);
        let mut minus = params.clone();
        minus.nudge(name, idx, -step);
        let fd = (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * step);
        let an = grads
            .get(name.as_str())
            .map(|g| g.as_slice().expect("contiguous")[idx])
            .unwrap_or(0.0);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
