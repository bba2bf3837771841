//! Neural-network plumbing for the toy detector: the autodiff tape, a
//! central parameter store, linear layers, and the Adam optimizer.

pub mod tape;

pub use tape::{Gradients, Tape, Var};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which learning-rate tier a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Main,
}

/// Handle to a parameter in the [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Flat registry of all trainable parameters, addressed by [`ParamId`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Array2<f64>) -> ParamId {
        self.names.push(name.to_string());
        self.groups.push(group);
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }
}

/// Forward context: a tape plus the lazy binding of parameters to leaves,
/// so each parameter appears exactly once per tape no matter how many
/// components reference it.
pub struct Fwd<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Fwd<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(var) = self.bound[id.0] {
            return var;
        }
        let var = self.tape.leaf(self.store.value(id).clone());
        self.bound[id.0] = Some(var);
        var
    }

    /// Gradient of every bound parameter, in store order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Array2<f64>)> {
        let mut out = Vec::new();
        for (idx, bound) in self.bound.iter().enumerate() {
            if let Some(var) = bound {
                if let Some(g) = grads.get(*var) {
                    out.push((ParamId(idx), g.clone()));
                }
            }
        }
        out
    }
}

/// Uniform Glorot-style initialization.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Dense layer `x W + b` with parameters held in the store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
    ) -> Self {
        let weight = store.add(&format!("{name}.w"), group, glorot(rng, input, output));
        let bias = store.add(&format!("{name}.b"), group, Array2::zeros((1, output)));
        Self { weight, bias }
    }

    /// Zero-initialized variant, for output projections that must start as
    /// the identity contribution of a residual block.
    pub fn new_zeroed(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
    ) -> Self {
        let weight = store.add(&format!("{name}.w"), group, Array2::zeros((input, output)));
        let bias = store.add(&format!("{name}.b"), group, Array2::zeros((1, output)));
        Self { weight, bias }
    }

    pub fn forward(&self, fwd: &mut Fwd, x: Var) -> Var {
        let w = fwd.param(self.weight);
        let b = fwd.param(self.bias);
        let xw = fwd.tape.matmul(x, w);
        fwd.tape.add_row(xw, b)
    }
}

/// Two-layer MLP with ReLU.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), group, input, hidden),
            output: Linear::new(store, rng, &format!("{name}.out"), group, hidden, output),
        }
    }

    pub fn forward(&self, fwd: &mut Fwd, x: Var) -> Var {
        let h = self.hidden.forward(fwd, x);
        let h = fwd.tape.relu(h);
        self.output.forward(fwd, h)
    }
}

/// Adam with decoupled weight decay and two learning-rate tiers (backbone
/// vs the rest). Decay applies to every parameter the step touches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr_backbone: f64,
    pub lr_main: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr_backbone: f64, lr_main: f64) -> Self {
        Self::with_decay(store, lr_backbone, lr_main, 0.0)
    }

    pub fn with_decay(
        store: &ParamStore,
        lr_backbone: f64,
        lr_main: f64,
        weight_decay: f64,
    ) -> Self {
        Self {
            lr_backbone,
            lr_main,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: (0..store.len())
                .map(|i| Array2::zeros(store.value(ParamId(i)).dim()))
                .collect(),
            v: (0..store.len())
                .map(|i| Array2::zeros(store.value(ParamId(i)).dim()))
                .collect(),
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array2<f64>)]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (id, grad) in grads {
            let idx = id.0;
            let lr = match store.group(*id) {
                ParamGroup::Backbone => self.lr_backbone,
                ParamGroup::Main => self.lr_main,
            };
            self.m[idx] = &self.m[idx] * self.beta1 + grad * (1.0 - self.beta1);
            self.v[idx] =
                &self.v[idx] * self.beta2 + &grad.mapv(|g| g * g) * (1.0 - self.beta2);
            let update = ndarray::Zip::from(&self.m[idx])
                .and(&self.v[idx])
                .map_collect(|&m, &v| lr * (m / bc1) / ((v / bc2).sqrt() + self.eps));
            let value = store.value_mut(*id);
            if self.weight_decay > 0.0 {
                value.mapv_inplace(|w| w * (1.0 - lr * self.weight_decay));
            }
            *value -= &update;
        }
    }
}
