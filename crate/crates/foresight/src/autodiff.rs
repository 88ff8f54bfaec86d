//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every tensor lives in a [`Tape`] as an f64 array of dynamic rank. Ops push
//! a node holding the result plus a one-shot backward closure that captures
//! (cheaply, via `ArcArray`) whatever forward values it needs. Calling
//! [`Tape::backward`] walks the tape in reverse and accumulates gradients
//! into every node built with [`Tape::leaf`].
//!
//! The tape is rebuilt per training step / rollout; parameters live outside
//! it (see [`crate::nn::ParamStore`]) and are re-bound as leaves each time.

use ndarray::{concatenate, ArcArray, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn, Slice};

type Shared = ArcArray<f64, IxDyn>;
type BackFn = Box<dyn FnOnce(&ArrayD<f64>) -> Vec<(Var, ArrayD<f64>)>>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

struct Node {
    value: Shared,
    grad: Option<ArrayD<f64>>,
    needs_grad: bool,
    back: Option<BackFn>,
}

/// Gradient tape. See module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, needs_grad: bool, back: Option<BackFn>) -> Var {
        // every stored value is standard layout so spatial ops can take slices
        let value = to_standard_owned(value);
        self.nodes.push(Node {
            value: value.into_shared(),
            grad: None,
            needs_grad,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a tensor that does not require gradients.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, false, None)
    }

    /// Insert a tensor whose gradient is accumulated and kept by `backward`.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, true, None)
    }

    /// Shared view of a node's forward value (O(1) clone).
    pub fn value(&self, v: Var) -> Shared {
        self.nodes[v.0].value.clone()
    }

    /// Forward value of a 0-d node as a scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        *self.nodes[v.0]
            .value
            .first()
            .expect("scalar() on empty tensor")
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of a leaf after `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Backpropagate from a 0-d root. Leaf gradients are retained;
    /// intermediate gradients are freed as soon as they are consumed.
    pub fn backward(&mut self, root: Var) {
        assert!(
            self.nodes[root.0].value.ndim() == 0,
            "backward root must be a scalar node"
        );
        self.nodes[root.0].grad = Some(ArrayD::ones(IxDyn(&[])));
        for i in (0..=root.0).rev() {
            let Some(back) = self.nodes[i].back.take() else {
                continue;
            };
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (parent, contrib) in back(&g) {
                debug_assert!(parent.0 < i, "tape must be topologically ordered");
                match &mut self.nodes[parent.0].grad {
                    Some(pg) => *pg += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let out = (&av + &bv).to_owned();
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let mut out = Vec::new();
                if na {
                    out.push((a, g.clone()));
                }
                if nb {
                    out.push((b, g.clone()));
                }
                out
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let out = (&av - &bv).to_owned();
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let mut out = Vec::new();
                if na {
                    out.push((a, g.clone()));
                }
                if nb {
                    out.push((b, -g));
                }
                out
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let out = (&av * &bv).to_owned();
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let mut out = Vec::new();
                if na {
                    out.push((a, g * &bv));
                }
                if nb {
                    out.push((b, g * &av));
                }
                out
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "div: shape mismatch");
        let out = (&av / &bv).to_owned();
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let mut out = Vec::new();
                if na {
                    out.push((a, g / &bv));
                }
                if nb {
                    out.push((b, -(g * &av) / (&bv * &bv)));
                }
                out
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x * c);
        let needs = self.needs(a);
        let back: Option<BackFn> =
            needs.then(|| Box::new(move |g: &ArrayD<f64>| vec![(a, g * c)]) as BackFn);
        self.push(out, needs, back)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x + c);
        let needs = self.needs(a);
        let back: Option<BackFn> =
            needs.then(|| Box::new(move |g: &ArrayD<f64>| vec![(a, g.clone())]) as BackFn);
        self.push(out, needs, back)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let needs = self.needs(a);
        let shared = out.clone().into_shared();
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let dy = &shared.mapv(|y| y * (1.0 - y)) * g;
                vec![(a, dy)]
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(f64::tanh);
        let needs = self.needs(a);
        let shared = out.clone().into_shared();
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let dy = &shared.mapv(|y| 1.0 - y * y) * g;
                vec![(a, dy)]
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.max(0.0));
        let needs = self.needs(a);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let dx = ndarray::Zip::from(g)
                    .and(&av)
                    .map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 });
                vec![(a, dx)]
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(f64::exp);
        let needs = self.needs(a);
        let shared = out.clone().into_shared();
        let back: Option<BackFn> = needs
            .then(|| Box::new(move |g: &ArrayD<f64>| vec![(a, (&shared * g).to_owned())]) as BackFn);
        self.push(out, needs, back)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(f64::ln);
        let needs = self.needs(a);
        let back: Option<BackFn> =
            needs.then(|| Box::new(move |g: &ArrayD<f64>| vec![(a, g / &av)]) as BackFn);
        self.push(out, needs, back)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(f64::abs);
        let needs = self.needs(a);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let dx = ndarray::Zip::from(g)
                    .and(&av)
                    .map_collect(|&gi, &xi| gi * xi.signum());
                vec![(a, dx)]
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x * x);
        let needs = self.needs(a);
        let back: Option<BackFn> =
            needs.then(|| Box::new(move |g: &ArrayD<f64>| vec![(a, 2.0 * (g * &av))]) as BackFn);
        self.push(out, needs, back)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.clamp(lo, hi));
        let needs = self.needs(a);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let dx = ndarray::Zip::from(g)
                    .and(&av)
                    .map_collect(|&gi, &xi| if xi > lo && xi < hi { gi } else { 0.0 });
                vec![(a, dx)]
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    // ---- reductions / shape ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = ArrayD::from_elem(IxDyn(&[]), av.sum());
        let needs = self.needs(a);
        let shape = av.shape().to_vec();
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let gv = *g.first().unwrap();
                vec![(a, ArrayD::from_elem(IxDyn(&shape), gv))]
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(
            av.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let out = to_standard(&av)
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let needs = self.needs(a);
        let orig = av.shape().to_vec();
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let gg = to_standard_owned(g.clone())
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape grad");
                vec![(a, gg)]
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Slice `[lo, hi)` along `axis`; gradient zero-pads back.
    pub fn slice_axis(&mut self, a: Var, axis: usize, lo: usize, hi: usize) -> Var {
        let av = self.value(a);
        let out = av
            .slice_axis(Axis(axis), Slice::from(lo..hi))
            .to_owned()
            .into_dyn();
        let needs = self.needs(a);
        let full = av.shape().to_vec();
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let mut dx = ArrayD::zeros(IxDyn(&full));
                dx.slice_axis_mut(Axis(axis), Slice::from(lo..hi))
                    .assign(g);
                vec![(a, dx)]
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Concatenate along the channel axis of NCHW tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let vals: Vec<Shared> = xs.iter().map(|&v| self.value(v)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_channels");
        let needs = xs.iter().any(|&v| self.needs(v));
        let widths: Vec<usize> = vals.iter().map(|v| v.shape()[1]).collect();
        let sources: Vec<(Var, bool)> = xs.iter().map(|&v| (v, self.needs(v))).collect();
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let mut out = Vec::new();
                let mut at = 0usize;
                for (&w, &(v, ng)) in widths.iter().zip(sources.iter()) {
                    if ng {
                        let gs = g
                            .slice_axis(Axis(1), Slice::from(at..at + w))
                            .to_owned()
                            .into_dyn();
                        out.push((v, gs));
                    }
                    at += w;
                }
                out
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    // ---- linear algebra ----

    /// `a (m,k) · b (k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let a2 = as_ix2(&av);
        let b2 = as_ix2(&bv);
        let out = a2.dot(&b2).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let g2 = as_ix2_ref(g);
                let mut out = Vec::new();
                if na {
                    out.push((a, g2.dot(&as_ix2(&bv).t()).into_dyn()));
                }
                if nb {
                    out.push((b, as_ix2(&av).t().dot(&g2).into_dyn()));
                }
                out
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Row-broadcast bias: `x (n,f) + b (f)`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let out = (&xv + &bv).to_owned();
        let needs = self.needs(x) || self.needs(b);
        let (nx, nb) = (self.needs(x), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let mut out = Vec::new();
                if nx {
                    out.push((x, g.clone()));
                }
                if nb {
                    out.push((b, g.sum_axis(Axis(0))));
                }
                out
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// Channel-broadcast bias: `x (n,c,h,w) + b (c)`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let c = bv.len();
        assert_eq!(xv.shape()[1], c, "add_channel_bias: channel mismatch");
        let b4 = bv
            .to_owned()
            .into_shape_with_order(IxDyn(&[1, c, 1, 1]))
            .unwrap();
        let out = (&xv + &b4).to_owned();
        let needs = self.needs(x) || self.needs(b);
        let (nx, nb) = (self.needs(x), self.needs(b));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let mut out = Vec::new();
                if nx {
                    out.push((x, g.clone()));
                }
                if nb {
                    let db = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    out.push((b, db));
                }
                out
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    // ---- spatial ops (NCHW) ----

    /// 2-D convolution, stride 1, zero padding `pad`, via im2col + GEMM.
    /// `x (n,c,h,w)`, `w (o,c,kh,kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let x4 = as_ix4(&xv);
        let w4 = as_ix4(&wv);
        let (o, c, kh, kw) = w4.dim();
        assert_eq!(x4.dim().1, c, "conv2d: channel mismatch");
        let (cols, ho, wo) = im2col(&x4, kh, kw, pad);
        let n = x4.dim().0;
        let w_mat = w4
            .to_owned()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap();
        let y_mat = w_mat.dot(&cols); // (o, n*ho*wo)
        let out = y_mat
            .into_shape_with_order((o, n, ho, wo))
            .unwrap()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        drop(cols);
        let needs = self.needs(x) || self.needs(w);
        let (nx, nw) = (self.needs(x), self.needs(w));
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let g4 = as_ix4_ref(g);
                let (n, o, ho, wo) = g4.dim();
                let g_mat = g4
                    .to_owned()
                    .permuted_axes([1, 0, 2, 3])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((o, n * ho * wo))
                    .unwrap();
                let mut out = Vec::new();
                if nw {
                    // recompute im2col instead of caching it: the caches for a
                    // whole unrolled sequence would dwarf the activations
                    let x4 = as_ix4(&xv);
                    let (cols, _, _) = im2col(&x4, kh, kw, pad);
                    let dw = g_mat.dot(&cols.t());
                    out.push((
                        w,
                        dw.into_shape_with_order(IxDyn(&[o, c, kh, kw])).unwrap(),
                    ));
                }
                if nx {
                    let w_mat = as_ix4(&wv)
                        .to_owned()
                        .into_shape_with_order((o, c * kh * kw))
                        .unwrap();
                    let dcols = w_mat.t().dot(&g_mat);
                    let x4 = as_ix4(&xv);
                    let (nn, _, h, ww2) = x4.dim();
                    let dx = col2im(&dcols, nn, c, h, ww2, kh, kw, pad, ho, wo);
                    out.push((x, dx.into_dyn()));
                }
                out
            }) as BackFn
        });
        self.push(out, needs, back)
    }

    /// 2×2 max pooling, stride 2. Spatial dims must be even.
    pub fn maxpool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let x4 = as_ix4(&xv);
        let (n, c, h, w) = x4.dim();
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "maxpool2: odd spatial dims {h}x{w}"
        );
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((n, c, ho, wo));
        let mut arg = vec![0u32; n * c * ho * wo];
        {
            let xs = x4.as_slice().expect("contiguous input");
            let os = out.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for i in 0..ho {
                        for j in 0..wo {
                            let idx = [
                                base + (2 * i) * w + 2 * j,
                                base + (2 * i) * w + 2 * j + 1,
                                base + (2 * i + 1) * w + 2 * j,
                                base + (2 * i + 1) * w + 2 * j + 1,
                            ];
                            let mut best = idx[0];
                            for &k in &idx[1..] {
                                if xs[k] > xs[best] {
                                    best = k;
                                }
                            }
                            let oi = ((ni * c + ci) * ho + i) * wo + j;
                            os[oi] = xs[best];
                            arg[oi] = best as u32;
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        let in_len = n * c * h * w;
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let gs = g.as_slice().expect("contiguous grad");
                let mut dx = vec![0.0f64; in_len];
                for (oi, &src) in arg.iter().enumerate() {
                    dx[src as usize] += gs[oi];
                }
                let dx = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap();
                vec![(x, dx)]
            }) as BackFn
        });
        self.push(out.into_dyn(), needs, back)
    }

    /// 2×2 average pooling, stride 2. Spatial dims must be even.
    pub fn avgpool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let x4 = as_ix4(&xv);
        let (n, c, h, w) = x4.dim();
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "avgpool2: odd spatial dims {h}x{w}"
        );
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((n, c, ho, wo));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        out[(ni, ci, i, j)] = 0.25
                            * (x4[(ni, ci, 2 * i, 2 * j)]
                                + x4[(ni, ci, 2 * i, 2 * j + 1)]
                                + x4[(ni, ci, 2 * i + 1, 2 * j)]
                                + x4[(ni, ci, 2 * i + 1, 2 * j + 1)]);
                    }
                }
            }
        }
        let needs = self.needs(x);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let g4 = as_ix4_ref(g);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let v = 0.25 * g4[(ni, ci, i, j)];
                                dx[(ni, ci, 2 * i, 2 * j)] = v;
                                dx[(ni, ci, 2 * i, 2 * j + 1)] = v;
                                dx[(ni, ci, 2 * i + 1, 2 * j)] = v;
                                dx[(ni, ci, 2 * i + 1, 2 * j + 1)] = v;
                            }
                        }
                    }
                }
                vec![(x, dx.into_dyn())]
            }) as BackFn
        });
        self.push(out.into_dyn(), needs, back)
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let x4 = as_ix4(&xv);
        let (n, c, h, w) = x4.dim();
        let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = x4[(ni, ci, i, j)];
                        out[(ni, ci, 2 * i, 2 * j)] = v;
                        out[(ni, ci, 2 * i, 2 * j + 1)] = v;
                        out[(ni, ci, 2 * i + 1, 2 * j)] = v;
                        out[(ni, ci, 2 * i + 1, 2 * j + 1)] = v;
                    }
                }
            }
        }
        let needs = self.needs(x);
        let back: Option<BackFn> = needs.then(|| {
            Box::new(move |g: &ArrayD<f64>| {
                let g4 = as_ix4_ref(g);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dx[(ni, ci, i, j)] = g4[(ni, ci, 2 * i, 2 * j)]
                                    + g4[(ni, ci, 2 * i, 2 * j + 1)]
                                    + g4[(ni, ci, 2 * i + 1, 2 * j)]
                                    + g4[(ni, ci, 2 * i + 1, 2 * j + 1)];
                            }
                        }
                    }
                }
                vec![(x, dx.into_dyn())]
            }) as BackFn
        });
        self.push(out.into_dyn(), needs, back)
    }
}

fn to_standard(a: &Shared) -> ArrayD<f64> {
    a.as_standard_layout().to_owned()
}

fn to_standard_owned(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn as_ix2(a: &Shared) -> Array2<f64> {
    a.to_owned().into_dimensionality::<Ix2>().expect("rank-2")
}

fn as_ix2_ref(a: &ArrayD<f64>) -> Array2<f64> {
    a.clone().into_dimensionality::<Ix2>().expect("rank-2")
}

fn as_ix4(a: &Shared) -> Array4<f64> {
    a.to_owned().into_dimensionality::<Ix4>().expect("rank-4")
}

fn as_ix4_ref(a: &ArrayD<f64>) -> Array4<f64> {
    a.clone().into_dimensionality::<Ix4>().expect("rank-4")
}

/// Unfold `x (n,c,h,w)` into `(c*kh*kw, n*ho*wo)` patches, stride 1.
fn im2col(x: &Array4<f64>, kh: usize, kw: usize, pad: usize) -> (Array2<f64>, usize, usize) {
    let (n, c, h, w) = x.dim();
    let ho = h + 2 * pad + 1 - kh;
    let wo = w + 2 * pad + 1 - kw;
    let mut cols = Array2::<f64>::zeros((c * kh * kw, n * ho * wo));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().unwrap();
    let row_len = n * ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * row_len;
                for ni in 0..n {
                    for oi in 0..ho {
                        let si = (oi + ki) as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let dst = row + (ni * ho + oi) * wo;
                        let src = ((ni * c + ci) * h + si as usize) * w;
                        // columns j where sj = j + kj - pad lies in [0, w)
                        let j_lo = pad.saturating_sub(kj);
                        let j_hi = (w + pad - kj).min(wo);
                        if j_lo >= j_hi {
                            continue;
                        }
                        let s_lo = j_lo + kj - pad;
                        let len = j_hi - j_lo;
                        cs[dst + j_lo..dst + j_lo + len]
                            .copy_from_slice(&xs[src + s_lo..src + s_lo + len]);
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Fold `(c*kh*kw, n*ho*wo)` patch gradients back onto the input, adding overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    let cs = cols.as_slice().expect("contiguous cols");
    let xs = x.as_slice_mut().unwrap();
    let row_len = n * ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * row_len;
                for ni in 0..n {
                    for oi in 0..ho {
                        let si = (oi + ki) as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let src = row + (ni * ho + oi) * wo;
                        let dst = ((ni * c + ci) * h + si as usize) * w;
                        let j_lo = pad.saturating_sub(kj);
                        let j_hi = (w + pad - kj).min(wo);
                        if j_lo >= j_hi {
                            continue;
                        }
                        let s_lo = j_lo + kj - pad;
                        for t in 0..(j_hi - j_lo) {
                            xs[dst + s_lo + t] += cs[src + j_lo + t];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Direct (slow) convolution used as an oracle in tests.
#[cfg(test)]
pub(crate) fn conv2d_reference(x: &Array4<f64>, w: &Array4<f64>, pad: usize) -> Array4<f64> {
    let (n, c, h, ww) = x.dim();
    let (o, _, kh, kw) = w.dim();
    let ho = h + 2 * pad + 1 - kh;
    let wo = ww + 2 * pad + 1 - kw;
    let mut y = Array4::<f64>::zeros((n, o, ho, wo));
    for ni in 0..n {
        for oi in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let si = i as isize + ki as isize - pad as isize;
                                let sj = j as isize + kj as isize - pad as isize;
                                if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < ww {
                                    acc += x[(ni, ci, si as usize, sj as usize)]
                                        * w[(oi, ci, ki, kj)];
                                }
                            }
                        }
                    }
                    y[(ni, oi, i, j)] = acc;
                }
            }
        }
    }
    y
}

/// One- or two-sided numerical gradient helper used across the test suite:
/// central finite difference of `f` at `x0[idx]`.
#[cfg(test)]
pub(crate) fn central_diff<F: FnMut(&ArrayD<f64>) -> f64>(
    f: &mut F,
    x0: &ArrayD<f64>,
    idx: usize,
    eps: f64,
) -> f64 {
    let mut hi = x0.clone();
    hi.as_slice_mut().unwrap()[idx] += eps;
    let mut lo = x0.clone();
    lo.as_slice_mut().unwrap()[idx] -= eps;
    (f(&hi) - f(&lo)) / (2.0 * eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha20Rng) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Array::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Check tape gradients of a scalar-valued graph against central
    /// differences for every element of the chosen input.
    fn check_grad<F>(build: F, shape: &[usize], seed: u64, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x0 = randn(shape, &mut rng);

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        assert_eq!(tape.shape(y), Vec::<usize>::new(), "graph must be scalar");
        tape.backward(y);
        let analytic = tape.grad(x).unwrap().clone();

        let mut eval = |xv: &ArrayD<f64>| {
            let mut t = Tape::new();
            let xi = t.constant(xv.clone());
            let yi = build(&mut t, xi);
            t.scalar(yi)
        };
        for idx in 0..x0.len() {
            let num = central_diff(&mut eval, &x0, idx, 1e-5);
            let ana = analytic.as_slice().unwrap()[idx];
            let denom = ana.abs().max(num.abs()).max(1e-8);
            assert!(
                ((ana - num) / denom).abs() < tol,
                "grad mismatch at {idx}: analytic {ana} vs numeric {num}"
            );
        }
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        check_grad(
            |t, x| {
                let y = t.sigmoid(x);
                let z = t.tanh(y);
                let w = t.square(z);
                t.sum_all(w)
            },
            &[3, 4],
            1,
            1e-6,
        );
        check_grad(
            |t, x| {
                let e = t.exp(x);
                let l = t.ln(e);
                let a = t.abs(l);
                t.mean_all(a)
            },
            &[5],
            2,
            1e-6,
        );
        check_grad(
            |t, x| {
                let c = t.clamp(x, -0.5, 0.5);
                let s = t.scale(c, 3.0);
                let s = t.add_scalar(s, 1.0);
                let sq = t.square(s);
                t.sum_all(sq)
            },
            &[7],
            3,
            1e-5,
        );
    }

    #[test]
    fn binary_op_grads_match_finite_differences() {
        // gradient w.r.t. one operand while the other is a constant
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let other = randn(&[4, 3], &mut rng);
        for op in 0..4usize {
            let o = other.clone();
            check_grad(
                move |t, x| {
                    let c = t.constant(o.clone());
                    let y = match op {
                        0 => t.add(x, c),
                        1 => t.sub(x, c),
                        2 => t.mul(x, c),
                        _ => {
                            let pos = t.exp(c); // keep denominator away from 0
                            t.div(x, pos)
                        }
                    };
                    let sq = t.square(y);
                    t.sum_all(sq)
                },
                &[4, 3],
                8 + op as u64,
                1e-5,
            );
        }
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let b0 = randn(&[4, 2], &mut rng);
        check_grad(
            move |t, x| {
                let b = t.constant(b0.clone());
                let y = t.matmul(x, b);
                let sq = t.square(y);
                t.sum_all(sq)
            },
            &[3, 4],
            12,
            1e-6,
        );
    }

    #[test]
    fn conv2d_matches_reference_and_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let x0 = randn(&[2, 3, 5, 6], &mut rng);
        let w0 = randn(&[4, 3, 3, 3], &mut rng);

        // forward against the direct convolution
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let w = tape.constant(w0.clone());
        let y = tape.conv2d(x, w, 1);
        let direct = conv2d_reference(
            &x0.clone().into_dimensionality().unwrap(),
            &w0.clone().into_dimensionality().unwrap(),
            1,
        );
        let got = tape.value(y);
        for (a, b) in got.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // gradient w.r.t. weights
        let x1 = x0.clone();
        check_grad(
            move |t, wv| {
                let xc = t.constant(x1.clone());
                let y = t.conv2d(xc, wv, 1);
                let sq = t.square(y);
                t.sum_all(sq)
            },
            &[4, 3, 3, 3],
            22,
            1e-5,
        );
        // gradient w.r.t. input, including zero padding boundaries
        let w1 = w0.clone();
        check_grad(
            move |t, xv| {
                let wc = t.constant(w1.clone());
                let y = t.conv2d(xv, wc, 1);
                let sq = t.square(y);
                t.sum_all(sq)
            },
            &[2, 3, 5, 6],
            23,
            1e-5,
        );
        // 1x1 kernel, no padding
        check_grad(
            move |t, xv| {
                let wc = t.constant(randn(&[2, 3, 1, 1], &mut ChaCha20Rng::seed_from_u64(5)));
                let y = t.conv2d(xv, wc, 0);
                let sq = t.square(y);
                t.sum_all(sq)
            },
            &[1, 3, 4, 4],
            24,
            1e-5,
        );
    }

    #[test]
    fn pool_upsample_concat_slice_grads() {
        check_grad(
            |t, x| {
                let p = t.maxpool2(x);
                let sq = t.square(p);
                t.sum_all(sq)
            },
            &[1, 2, 4, 6],
            31,
            1e-5,
        );
        check_grad(
            |t, x| {
                let u = t.upsample2(x);
                let sq = t.square(u);
                t.sum_all(sq)
            },
            &[2, 2, 3, 3],
            32,
            1e-6,
        );
        check_grad(
            |t, x| {
                let a = t.slice_axis(x, 1, 0, 2);
                let b = t.slice_axis(x, 1, 2, 3);
                let sb = t.square(b);
                let cat = t.concat_channels(&[a, sb]);
                let sq = t.square(cat);
                t.sum_all(sq)
            },
            &[2, 3, 2, 2],
            33,
            1e-5,
        );
    }

    #[test]
    fn bias_grads() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let x0 = randn(&[3, 4], &mut rng);
        check_grad(
            move |t, b| {
                let x = t.constant(x0.clone());
                let y = t.add_row_bias(x, b);
                let sq = t.square(y);
                t.sum_all(sq)
            },
            &[4],
            42,
            1e-6,
        );
        let x1 = randn(&[2, 3, 2, 2], &mut rng);
        check_grad(
            move |t, b| {
                let x = t.constant(x1.clone());
                let y = t.add_channel_bias(x, b);
                let sq = t.square(y);
                t.sum_all(sq)
            },
            &[3],
            43,
            1e-6,
        );
    }

    #[test]
    fn grad_accumulates_across_multiple_uses() {
        // f(x) = sum(x*x) + sum(x) -> df/dx = 2x + 1
        let x0 = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let sq = tape.mul(x, x);
        let s1 = tape.sum_all(sq);
        let s2 = tape.sum_all(x);
        let y = tape.add(s1, s2);
        tape.backward(y);
        let g = tape.grad(x).unwrap();
        for (gi, xi) in g.iter().zip(x0.iter()) {
            assert!((gi - (2.0 * xi + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[2])));
        let y = tape.sum_all(x);
        tape.backward(y);
        assert!(tape.grad(x).is_none());
    }
}
