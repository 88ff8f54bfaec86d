//! Parameters and layer building blocks shared by the networks.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical names
//! (`prediction.encoder.s0.c0.w`, `prior.lstm.l0.b`, …) so checkpoints,
//! optimizer state and parameter-group bookkeeping all speak the same
//! language. At the start of each forward pass the store is bound onto a
//! fresh [`Tape`] and layers hold the resulting [`Var`] handles.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Tape, Var};

/// Named parameter tensors in deterministic (sorted) order.
#[derive(Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        let prev = self.map.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.map.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Scalar count restricted to names starting with `prefix`.
    pub fn scalar_count_prefix(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Order-independent content checksum (name, shape and values).
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a over a canonical byte walk
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, value) in &self.map {
            eat(name.as_bytes());
            for &d in value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &x in value.iter() {
                eat(&x.to_le_bytes());
            }
        }
        h
    }

    /// Bind every parameter as a gradient-collecting leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Bind as constants (inference; no gradient bookkeeping).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for every parameter of one bind.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// A second map of the same tape handles.
    pub fn clone_handles(&self) -> BoundParams {
        BoundParams {
            vars: self.vars.clone(),
        }
    }
}

/// Uniform Kaiming-style init on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha20Rng) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    crate::rng::uniform(shape, -bound, bound, rng)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// 3×3 (or 1×1) convolution with bias.
pub struct Conv2d {
    pub w: Var,
    pub b: Var,
    pub pad: usize,
}

impl Conv2d {
    /// Register parameters for a conv layer under `name` (`{name}.w/.b`).
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut ChaCha20Rng,
    ) {
        let fan_in = in_ch * kernel * kernel;
        store.insert(
            &format!("{name}.w"),
            init_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        store.insert(&format!("{name}.b"), zeros(&[out_ch]));
    }

    pub fn bind(params: &BoundParams, name: &str, pad: usize) -> Self {
        Conv2d {
            w: params.var(&format!("{name}.w")),
            b: params.var(&format!("{name}.b")),
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let y = tape.conv2d(x, self.w, self.pad);
        tape.add_channel_bias(y, self.b)
    }
}

/// Fully connected layer with bias.
pub struct Dense {
    pub w: Var,
    pub b: Var,
}

impl Dense {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha20Rng,
    ) {
        store.insert(
            &format!("{name}.w"),
            init_uniform(&[in_dim, out_dim], in_dim, rng),
        );
        store.insert(&format!("{name}.b"), zeros(&[out_dim]));
    }

    pub fn bind(params: &BoundParams, name: &str) -> Self {
        Dense {
            w: params.var(&format!("{name}.w")),
            b: params.var(&format!("{name}.b")),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let y = tape.matmul(x, self.w);
        tape.add_row_bias(y, self.b)
    }
}

/// Convolutional LSTM cell: the four gates are one convolution over the
/// channel-concatenated `[x, h]`, split along channels in i/f/g/o order.
pub struct ConvLstm {
    pub w: Var,
    pub b: Var,
    pub hidden: usize,
    pub pad: usize,
}

impl ConvLstm {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut ChaCha20Rng,
    ) {
        let fan_in = (in_ch + hidden) * kernel * kernel;
        store.insert(
            &format!("{name}.w"),
            init_uniform(&[4 * hidden, in_ch + hidden, kernel, kernel], fan_in, rng),
        );
        // forget-gate bias starts at 1 so early training keeps cell memory
        let mut bias = zeros(&[4 * hidden]);
        bias.slice_axis_mut(
            ndarray::Axis(0),
            ndarray::Slice::from(hidden..2 * hidden),
        )
        .fill(1.0);
        store.insert(&format!("{name}.b"), bias);
    }

    pub fn bind(params: &BoundParams, name: &str, hidden: usize, kernel: usize) -> Self {
        ConvLstm {
            w: params.var(&format!("{name}.w")),
            b: params.var(&format!("{name}.b")),
            hidden,
            pad: kernel / 2,
        }
    }

    /// One step. `x (n,c,h,w)`, state `(h, c)` both `(n,hidden,h,w)`.
    pub fn step(&self, tape: &mut Tape, x: Var, state: (Var, Var)) -> (Var, Var) {
        let (h_prev, c_prev) = state;
        let xh = tape.concat_channels(&[x, h_prev]);
        let gates = tape.conv2d(xh, self.w, self.pad);
        let gates = tape.add_channel_bias(gates, self.b);
        let hid = self.hidden;
        let i = tape.slice_axis(gates, 1, 0, hid);
        let f = tape.slice_axis(gates, 1, hid, 2 * hid);
        let g = tape.slice_axis(gates, 1, 2 * hid, 3 * hid);
        let o = tape.slice_axis(gates, 1, 3 * hid, 4 * hid);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c_prev);
        let ig = tape.mul(i, g);
        let c_new = tape.add(fc, ig);
        let ct = tape.tanh(c_new);
        let h_new = tape.mul(o, ct);
        (h_new, c_new)
    }
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    pub t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, grad_clip: Option<f64>) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from `grads` (same keys as `params`).
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f64>>) {
        let clip_scale = match self.grad_clip {
            Some(max_norm) => {
                let sq: f64 = grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
                let norm = sq.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("optimizer: unknown parameter {name}"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|pi, mi, vi, &gi| {
                    let gi = gi * clip_scale;
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    /// Moment tensors for checkpointing, in `(name, m, v)` sorted order.
    pub fn moments(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>, &ArrayD<f64>)> {
        self.m.iter().map(|(k, m)| (k, m, &self.v[k]))
    }

    pub fn restore_moments(&mut self, t: u64, moments: Vec<(String, ArrayD<f64>, ArrayD<f64>)>) {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (name, m, v) in moments {
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
    }
}
