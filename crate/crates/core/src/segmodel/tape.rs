//! Reverse-mode differentiation over the handful of operations an
//! encoder–decoder segmenter is built from.
//!
//! A [`Tape`] borrows the parameter store, records every intermediate value
//! during the forward pass, and replays the operations backwards to produce a
//! flat gradient aligned with [`ParamStore::values`]. Frozen blocks never
//! receive gradient, and nodes that depend on neither a trainable block nor a
//! trainable ancestor are skipped entirely.

const NEG_SLOPE: f64 = 0.01;

use crate::grid::Tensor;

use super::params::ParamStore;

pub type Var = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: usize,
        b: Option<usize>,
        k: usize,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    Upsample(Var),
    Concat(Var, Var),
    Add(Var, Var),
    /// 1×1 projection whose output channels each own a `(weight, bias)` pair.
    Head {
        x: Var,
        rows: Vec<(usize, usize)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn trainable(&self, block: usize) -> bool {
        !self.store.is_frozen(block)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Same-padded convolution with a `k×k` kernel (`k` odd).
    pub fn conv(&mut self, x: Var, w: usize, b: Option<usize>, cout: usize, k: usize) -> Var {
        let out = conv_forward(
            &self.nodes[x].value,
            self.store.slice(w),
            b.map(|b| self.store.slice(b)),
            cout,
            k,
        );
        let needs = self.nodes[x].needs_grad
            || self.trainable(w)
            || b.is_some_and(|b| self.trainable(b));
        self.push(out, Op::Conv { x, w, b, k }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.nodes[x].value.clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v *= NEG_SLOPE;
            }
        }
        let needs = self.nodes[x].needs_grad;
        self.push(out, Op::Relu(x), needs)
    }

    /// 2×2 max pooling with stride 2.
    pub fn maxpool(&mut self, x: Var) -> Var {
        let src = &self.nodes[x].value;
        let (h, w) = (src.height / 2, src.width / 2);
        let mut out = Tensor::zeros(src.channels, h, w);
        let mut arg = vec![0u32; src.channels * h * w];
        for c in 0..src.channels {
            let plane = src.plane(c);
            for y in 0..h {
                for xx in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (2 * y + dy) * src.width + 2 * xx + dx;
                            if plane[i] > best {
                                best = plane[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = c * h * w + y * w + xx;
                    out.data[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
        let needs = self.nodes[x].needs_grad;
        self.push(out, Op::MaxPool { x, arg }, needs)
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample(&mut self, x: Var) -> Var {
        let src = &self.nodes[x].value;
        let (h, w) = (src.height * 2, src.width * 2);
        let mut out = Tensor::zeros(src.channels, h, w);
        for c in 0..src.channels {
            let plane = src.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = plane[(y / 2) * src.width + xx / 2];
                }
            }
        }
        let needs = self.nodes[x].needs_grad;
        self.push(out, Op::Upsample(x), needs)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((ta.height, ta.width), (tb.height, tb.width));
        let mut data = Vec::with_capacity(ta.data.len() + tb.data.len());
        data.extend_from_slice(&ta.data);
        data.extend_from_slice(&tb.data);
        let out = Tensor {
            channels: ta.channels + tb.channels,
            height: ta.height,
            width: ta.width,
            data,
        };
        let needs = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(out, Op::Concat(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.nodes[a].value.clone();
        out.add_assign(&self.nodes[b].value);
        let needs = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn head(&mut self, x: Var, rows: Vec<(usize, usize)>) -> Var {
        let src = &self.nodes[x].value;
        let n = src.plane_len();
        let mut out = Tensor::zeros(rows.len(), src.height, src.width);
        for (o, &(w, b)) in rows.iter().enumerate() {
            let wv = self.store.slice(w);
            let bias = self.store.slice(b)[0];
            let dst = &mut out.data[o * n..(o + 1) * n];
            dst.fill(bias);
            for (i, &wi) in wv.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(src.plane(i)) {
                    *d += wi * s;
                }
            }
        }
        let needs = self.nodes[x].needs_grad
            || rows
                .iter()
                .any(|&(w, b)| self.trainable(w) || self.trainable(b));
        self.push(out, Op::Head { x, rows }, needs)
    }

    /// Propagate the given output gradients back to the parameters.
    /// Returns a vector aligned with the parameter store; frozen blocks stay
    /// zero.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Vec<f64> {
        let mut param_grad = vec![0.0; self.store.len()];
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert!(g.same_shape(&self.nodes[v].value), "seed shape mismatch");
            accumulate(&mut grads[v], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Relu(x) => {
                    if self.nodes[*x].needs_grad {
                        let mut g = gout;
                        for (gv, ov) in g.data.iter_mut().zip(&node.value.data) {
                            if *ov <= 0.0 {
                                *gv *= NEG_SLOPE;
                            }
                        }
                        accumulate(&mut grads[*x], g);
                    }
                }
                Op::MaxPool { x, arg } => {
                    if self.nodes[*x].needs_grad {
                        let src = &self.nodes[*x].value;
                        let mut g = Tensor::zeros(src.channels, src.height, src.width);
                        let n_out = gout.plane_len();
                        let n_in = src.plane_len();
                        for c in 0..src.channels {
                            for p in 0..n_out {
                                let o = c * n_out + p;
                                g.data[c * n_in + arg[o] as usize] += gout.data[o];
                            }
                        }
                        accumulate(&mut grads[*x], g);
                    }
                }
                Op::Upsample(x) => {
                    if self.nodes[*x].needs_grad {
                        let src = &self.nodes[*x].value;
                        let mut g = Tensor::zeros(src.channels, src.height, src.width);
                        for c in 0..src.channels {
                            let go = gout.plane(c);
                            let dst = g.plane_mut(c);
                            for y in 0..gout.height {
                                for xx in 0..gout.width {
                                    dst[(y / 2) * src.width + xx / 2] += go[y * gout.width + xx];
                                }
                            }
                        }
                        accumulate(&mut grads[*x], g);
                    }
                }
                Op::Concat(a, b) => {
                    let ca = self.nodes[*a].value.channels;
                    let n = gout.plane_len();
                    if self.nodes[*a].needs_grad {
                        let g = Tensor {
                            channels: ca,
                            height: gout.height,
                            width: gout.width,
                            data: gout.data[..ca * n].to_vec(),
                        };
                        accumulate(&mut grads[*a], g);
                    }
                    if self.nodes[*b].needs_grad {
                        let g = Tensor {
                            channels: gout.channels - ca,
                            height: gout.height,
                            width: gout.width,
                            data: gout.data[ca * n..].to_vec(),
                        };
                        accumulate(&mut grads[*b], g);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], gout.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], gout);
                    }
                }
                Op::Conv { x, w, b, k } => {
                    let src = &self.nodes[*x].value;
                    let wv = self.store.slice(*w);
                    let want_x = self.nodes[*x].needs_grad;
                    let want_w = self.trainable(*w);
                    let mut gx = want_x.then(|| Tensor::zeros(src.channels, src.height, src.width));
                    let mut gw = want_w.then(|| vec![0.0; wv.len()]);
                    conv_backward(src, wv, &gout, *k, gx.as_mut(), gw.as_deref_mut());
                    if let Some(gw) = gw {
                        let off = self.store.blocks()[*w].offset;
                        for (d, s) in param_grad[off..off + gw.len()].iter_mut().zip(&gw) {
                            *d += s;
                        }
                    }
                    if let Some(b) = b {
                        if self.trainable(*b) {
                            let off = self.store.blocks()[*b].offset;
                            for o in 0..gout.channels {
                                param_grad[off + o] += gout.plane(o).iter().sum::<f64>();
                            }
                        }
                    }
                    if let Some(gx) = gx {
                        accumulate(&mut grads[*x], gx);
                    }
                }
                Op::Head { x, rows } => {
                    let src = &self.nodes[*x].value;
                    let want_x = self.nodes[*x].needs_grad;
                    let mut gx = want_x.then(|| Tensor::zeros(src.channels, src.height, src.width));
                    for (o, &(w, b)) in rows.iter().enumerate() {
                        let go = gout.plane(o);
                        if self.trainable(w) {
                            let off = self.store.blocks()[w].offset;
                            for i in 0..src.channels {
                                param_grad[off + i] +=
                                    go.iter().zip(src.plane(i)).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                        if self.trainable(b) {
                            let off = self.store.blocks()[b].offset;
                            param_grad[off] += go.iter().sum::<f64>();
                        }
                        if let Some(gx) = gx.as_mut() {
                            let wv = self.store.slice(w);
                            for (i, &wi) in wv.iter().enumerate() {
                                if wi == 0.0 {
                                    continue;
                                }
                                for (d, s) in gx.plane_mut(i).iter_mut().zip(go) {
                                    *d += wi * s;
                                }
                            }
                        }
                    }
                    if let Some(gx) = gx {
                        accumulate(&mut grads[*x], gx);
                    }
                }
            }
        }
        param_grad
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Valid output range along one axis for kernel offset `d`.
#[inline]
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn conv_forward(x: &Tensor, w: &[f64], b: Option<&[f64]>, cout: usize, k: usize) -> Tensor {
    let (cin, h, wd) = (x.channels, x.height, x.width);
    debug_assert_eq!(w.len(), cout * cin * k * k);
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(cout, h, wd);
    let n = h * wd;
    for o in 0..cout {
        let dst = &mut out.data[o * n..(o + 1) * n];
        if let Some(b) = b {
            dst.fill(b[o]);
        }
        for i in 0..cin {
            let src = x.plane(i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let wv = w[((o * cin + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(wd, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let srow = &src[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
                        let drow = &mut dst[y * wd + x0..y * wd + x1];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    x: &Tensor,
    w: &[f64],
    gout: &Tensor,
    k: usize,
    mut gx: Option<&mut Tensor>,
    mut gw: Option<&mut [f64]>,
) {
    let (cin, h, wd) = (x.channels, x.height, x.width);
    let cout = gout.channels;
    let pad = (k / 2) as isize;
    for o in 0..cout {
        let go = gout.plane(o);
        for i in 0..cin {
            let src = x.plane(i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(wd, dx);
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = sy * wd + (x0 as isize + dx) as usize;
                        let s1 = sy * wd + (x1 as isize + dx) as usize;
                        let grow = &go[y * wd + x0..y * wd + x1];
                        if gw.is_some() {
                            acc += grow.iter().zip(&src[s0..s1]).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            if wv != 0.0 {
                                let n = h * wd;
                                let drow = &mut gx.data[i * n + s0..i * n + s1];
                                for (d, g) in drow.iter_mut().zip(grow) {
                                    *d += wv * g;
                                }
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}
