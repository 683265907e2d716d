//! Parameter storage and the small set of layers the models are built from.
//!
//! Every parameter lives in a [`ParamStore`] under a hierarchical dotted name
//! and carries a frozen flag. Layers hold [`ParamId`]s and know how to run
//! their forward pass on a [`Tape`].

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zero,
    Const(f64),
    Normal(f64),
    Uniform(f64, f64),
}

/// Box-Muller; two uniforms -> one normal. Deterministic given the rng.
fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Bitwise snapshot of a named subset of parameters.
#[derive(Clone)]
pub struct Snapshot {
    pub names: Vec<String>,
    pub values: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add_param(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        frozen: bool,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zero => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => (0..n).map(|_| sample_normal(rng) * std).collect(),
            Init::Uniform(lo, hi) => (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect(),
        };
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).unwrap();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            frozen,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Mutable access for the optimizer; refuses frozen parameters.
    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        let e = &mut self.entries[id.0];
        assert!(!e.frozen, "attempted update of frozen parameter {}", e.name);
        &mut e.value
    }

    /// Unconditional restore (checkpoint loading); shape-checked.
    pub fn load_value(&mut self, id: ParamId, value: ArrayD<f64>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter {} shape {:?} does not match stored {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn set_elem(&mut self, id: ParamId, flat: usize, v: f64) {
        let e = &mut self.entries[id.0];
        e.value.as_slice_mut().unwrap()[flat] = v;
    }

    pub fn num_scalars(&self, pred: impl Fn(&ParamEntry) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| pred(e))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn snapshot_matching(&self, pred: impl Fn(&ParamEntry) -> bool) -> Snapshot {
        let mut names = Vec::new();
        let mut values = Vec::new();
        for e in &self.entries {
            if pred(e) {
                names.push(e.name.clone());
                values.push(e.value.clone());
            }
        }
        Snapshot { names, values }
    }

    /// Bitwise comparison of the snapshotted parameters against the store.
    pub fn matches_snapshot(&self, snap: &Snapshot) -> Result<bool> {
        for (name, value) in snap.names.iter().zip(&snap.values) {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Audit(format!("snapshot names unknown parameter {name}")))?;
            let cur = &self.entry(id).value;
            if cur.shape() != value.shape() {
                return Err(Error::Audit(format!(
                    "snapshot shape mismatch for {name}: {:?} vs {:?}",
                    value.shape(),
                    cur.shape()
                )));
            }
            let a = cur.as_slice().unwrap();
            let b = value.as_slice().unwrap();
            if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

// ---- layers ----

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        frozen: bool,
    ) -> Self {
        let w = store.add_param(&format!("{name}.w"), &[din, dout], init, frozen, rng);
        let b = store.add_param(&format!("{name}.b"), &[dout], Init::Zero, frozen, rng);
        Linear { w, b }
    }

    /// Xavier-style default: std = 1/sqrt(fan_in).
    pub fn xavier(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        frozen: bool,
    ) -> Self {
        let std = (1.0 / din as f64).sqrt();
        Self::new(store, rng, name, din, dout, Init::Normal(std), frozen)
    }

    pub fn zeros(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        frozen: bool,
    ) -> Self {
        Self::new(store, rng, name, din, dout, Init::Zero, frozen)
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        let y = t.matmul(x, w);
        t.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub k: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ksize: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        init: Init,
        frozen: bool,
    ) -> Self {
        let k = store.add_param(
            &format!("{name}.k"),
            &[ksize, ksize, cin, cout],
            init,
            frozen,
            rng,
        );
        let b = store.add_param(&format!("{name}.b"), &[cout], Init::Zero, frozen, rng);
        Conv2d {
            k,
            b,
            stride,
            pad: (ksize - 1) / 2,
        }
    }

    /// He init for conv layers followed by a rectifier.
    #[allow(clippy::too_many_arguments)]
    pub fn he(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ksize: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        frozen: bool,
    ) -> Self {
        let fan_in = (ksize * ksize * cin) as f64;
        let std = (2.0 / fan_in).sqrt();
        Self::new(
            store,
            rng,
            name,
            ksize,
            cin,
            cout,
            stride,
            Init::Normal(std),
            frozen,
        )
    }

    pub fn with_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let k = t.param(store, self.k);
        let b = t.param(store, self.b);
        let y = t.conv2d(x, k, self.stride, self.pad);
        t.add_chan(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, frozen: bool) -> Self {
        let gamma = store.add_param(&format!("{name}.gamma"), &[d], Init::Const(1.0), frozen, rng);
        let beta = store.add_param(&format!("{name}.beta"), &[d], Init::Zero, frozen, rng);
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = t.param(store, self.gamma);
        let b = t.param(store, self.beta);
        t.layer_norm(x, g, b, self.eps)
    }
}

/// Multi-head attention over row-token matrices. Queries may come from a
/// different stream than keys/values (cross-attention).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        dim: usize,
        heads: usize,
        frozen: bool,
    ) -> Self {
        assert!(dim % heads == 0, "attention dim not divisible by heads");
        MultiHeadAttention {
            wq: Linear::xavier(store, rng, &format!("{name}.wq"), q_dim, dim, frozen),
            wk: Linear::xavier(store, rng, &format!("{name}.wk"), kv_dim, dim, frozen),
            wv: Linear::xavier(store, rng, &format!("{name}.wv"), kv_dim, dim, frozen),
            wo: Linear::xavier(store, rng, &format!("{name}.wo"), dim, dim, frozen),
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let q = self.wq.forward(t, store, q_in);
        let k = self.wk.forward(t, store, kv_in);
        let v = self.wv.forward(t, store, kv_in);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let kt = t.transpose(kh);
            let scores = t.matmul(qh, kt);
            let scores = t.scale(scores, scale);
            let probs = t.softmax_rows(scores, key_mask);
            heads_out.push(t.matmul(probs, vh));
        }
        let cat = t.concat_cols(&heads_out);
        self.wo.forward(t, store, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        expansion: usize,
        frozen: bool,
    ) -> Self {
        FeedForward {
            fc1: Linear::xavier(store, rng, &format!("{name}.fc1"), dim, dim * expansion, frozen),
            fc2: Linear::xavier(store, rng, &format!("{name}.fc2"), dim * expansion, dim, frozen),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(t, store, x);
        let h = t.gelu(h);
        self.fc2.forward(t, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab: usize,
        dim: usize,
        std: f64,
        frozen: bool,
    ) -> Self {
        Embedding {
            table: store.add_param(
                &format!("{name}.table"),
                &[vocab, dim],
                Init::Normal(std),
                frozen,
                rng,
            ),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, ids: &[usize]) -> Var {
        let table = t.param(store, self.table);
        t.embedding(table, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn seeded_store_is_reproducible() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            store.add_param("a", &[4, 4], Init::Normal(0.3), true, &mut rng);
            store.add_param("b", &[8], Init::Uniform(-1.0, 1.0), false, &mut rng);
            store
        };
        let s1 = build();
        let s2 = build();
        let snap = s1.snapshot_matching(|_| true);
        assert!(s2.matches_snapshot(&snap).unwrap());
    }

    #[test]
    fn snapshot_detects_perturbation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let id = store.add_param("w", &[3], Init::Normal(1.0), true, &mut rng);
        let snap = store.snapshot_matching(|e| e.frozen);
        let orig = store.entry(id).value[[0]];
        store.entries[id.0].value[[0]] = orig + 1e-12;
        assert!(!store.matches_snapshot(&snap).unwrap());
    }

    #[test]
    #[should_panic(expected = "frozen")]
    fn value_mut_refuses_frozen() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let id = store.add_param("w", &[3], Init::Zero, true, &mut rng);
        store.value_mut(id);
    }

    #[test]
    fn attention_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = MultiHeadAttention::new(&mut store, &mut rng, "attn", 16, 12, 16, 4, false);
        let mut t = crate::autodiff::Tape::new();
        let q = t.leaf(ArrayD::from_elem(IxDyn(&[5, 16]), 0.1));
        let kv = t.leaf(ArrayD::from_elem(IxDyn(&[7, 12]), 0.2));
        let y = attn.forward(&mut t, &store, q, kv, None);
        assert_eq!(t.shape(y), &[5, 16]);
    }
}
