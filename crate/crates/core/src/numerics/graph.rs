//! Tape-style reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so backward is a single reverse sweep. Parameters are
//! borrowed from a [`ParamStore`] and materialised once per graph, so a
//! parameter used by several consumers accumulates all of their gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Gradient rule for a custom op: `(out_grad, parent_values, out_value)`
/// to one optional gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[&[T]], &[T]) -> Vec<Option<Vec<T>>>>;

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        d: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Bilinear {
        fmap: Var,
        points: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    SliceCols {
        x: Var,
        cols: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        total: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        width: usize,
    },
    Reshape(Var),
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Sum(Var),
    Im2Col {
        x: Var,
        geo: ConvGeometry,
    },
    GroupWeightedSum {
        w: Var,
        s: Var,
        k: usize,
        c: usize,
    },
    RowMatVec {
        x: Var,
        w: Var,
        a: usize,
        b: usize,
    },
    Custom {
        parents: Vec<Var>,
        backward: BackwardFn<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Geometry of a 2-d convolution over an `[H, W, C]` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.kernel * self.kernel * self.c
    }
}

/// Recorded computation. Confined to one thread while alive.
pub struct Graph<'p, T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Result of [`Graph::backward`]: gradients of leaves and parameters.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Graph that records values only; nothing will need gradients.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::with_params(store)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
            .expect("graph constructed without a parameter store")
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad: needs && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf input. `requires_grad` decides whether backward reports its gradient.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("constant", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = self.store().get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(id),
            t.requires_grad(),
        );
        self.param_vars.insert(id, v);
        v
    }

    /// Registry id behind a parameter node, if `v` is one.
    pub fn param_id(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    /// Parameter gradients from a finished backward pass.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Vec<T>)> {
        let mut out: Vec<(ParamId, Vec<T>)> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn custom(
        &mut self,
        parents: Vec<Var>,
        shape: Vec<usize>,
        value: Vec<T>,
        backward: BackwardFn<T>,
    ) -> Var {
        let needs = parents.iter().any(|&p| self.needs(p));
        self.push(shape, value, Op::Custom { parents, backward }, needs)
    }

    /// Reverse sweep from a scalar. Every recorded op is visited at most
    /// once, newest first.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC * B^T  (or dC * B when B was stored transposed)
                    T::gemm(m, n, k, g, false, val(*b), !*trans_b, ga, T::one());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        T::gemm(n, m, k, g, true, val(*a), false, gb, T::one());
                    } else {
                        T::gemm(k, m, n, val(*a), true, g, false, gb, T::one());
                    }
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if let Some(gx) = self.slot(grads, *x) {
                    T::gemm(rows, dout, din, g, false, val(*w), true, gx, T::one());
                }
                if let Some(gw) = self.slot(grads, *w) {
                    T::gemm(din, rows, dout, val(*x), true, g, false, gw, T::one());
                }
                if let Some(bv) = b {
                    if let Some(gb) = self.slot(grads, *bv) {
                        for r in 0..rows {
                            for (acc, &d) in gb.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                                *acc = *acc + d;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &d)| *x = *x - d);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &d), &o) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *x = *x + d * o;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, &d), &o) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *x = *x + d * o;
                    }
                }
            }
            Op::AddRow(x, r) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gr) = self.slot(grads, *r) {
                    let d = gr.len();
                    for row in g.chunks(d) {
                        add_into(gr, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &d)| *a = *a + *c * d);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, &d), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if xv > T::zero() {
                            *a = *a + d;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, &d), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *a = *a + d * y * (T::one() - y);
                    }
                }
            }
            Op::Abs(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, &d), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if xv > T::zero() {
                            *a = *a + d;
                        } else if xv < T::zero() {
                            *a = *a - d;
                        }
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                if let Some(gx) = self.slot(grads, *x) {
                    super::ops::softmax_backward(&node.value, g, gx, *outer, *n, *inner);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                if let Some(gg) = self.slot(grads, *gain) {
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for row_g in g.chunks(d) {
                        add_into(gb, row_g);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    super::ops::layer_norm_backward(g, xhat, rstd, val(*gain), gx, d);
                }
            }
            Op::Bilinear {
                fmap,
                points,
                h,
                w,
                c,
            } => {
                let gf = if self.needs(*fmap) {
                    Some(self.take_slot(grads, *fmap))
                } else {
                    None
                };
                let gp = if self.needs(*points) {
                    Some(self.take_slot(grads, *points))
                } else {
                    None
                };
                let (mut gf, mut gp) = (gf, gp);
                super::ops::bilinear_backward(
                    val(*fmap),
                    val(*points),
                    g,
                    (*h, *w, *c),
                    gf.as_deref_mut(),
                    gp.as_deref_mut(),
                );
                if let Some(gf) = gf {
                    grads[fmap.0] = Some(gf);
                }
                if let Some(gp) = gp {
                    grads[points.0] = Some(gp);
                }
            }
            Op::SliceCols {
                x,
                cols,
                start,
                len,
            } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, row) in g.chunks(*len).enumerate() {
                        let dst = &mut gx[r * cols + start..r * cols + start + len];
                        add_into(dst, row);
                    }
                }
            }
            Op::ConcatCols { parts, total } => {
                let rows = g.len() / total.max(&1);
                let mut off = 0;
                for &(p, width) in parts {
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * width..(r + 1) * width],
                                &g[r * total + off..r * total + off + width],
                            );
                        }
                    }
                    off += width;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.slot(grads, p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, idx, width } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(
                            &mut gx[src * width..(src + 1) * width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                }
            }
            Op::Transpose { x, rows, cols } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            gx[i * cols + j] = gx[i * cols + j] + g[j * rows + i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a = *a + g[0]);
                }
            }
            Op::Im2Col { x, geo } => {
                if let Some(gx) = self.slot(grads, *x) {
                    super::ops::im2col_backward(g, gx, geo);
                }
            }
            Op::GroupWeightedSum { w, s, k, c } => {
                let (k, c) = (*k, *c);
                if let Some(gw) = self.slot(grads, *w) {
                    let sv = val(*s);
                    for (qk, a) in gw.iter_mut().enumerate() {
                        let q = qk / k;
                        let srow = &sv[qk * c..(qk + 1) * c];
                        let grow = &g[q * c..(q + 1) * c];
                        *a = *a + dot(srow, grow);
                    }
                }
                if let Some(gs) = self.slot(grads, *s) {
                    let wv = val(*w);
                    for (qk, &wq) in wv.iter().enumerate() {
                        let q = qk / k;
                        let grow = &g[q * c..(q + 1) * c];
                        for (a, &d) in gs[qk * c..(qk + 1) * c].iter_mut().zip(grow) {
                            *a = *a + wq * d;
                        }
                    }
                }
            }
            Op::RowMatVec { x, w, a, b } => {
                let (a, b) = (*a, *b);
                let rows = g.len() / b;
                if let Some(gx) = self.slot(grads, *x) {
                    let wv = val(*w);
                    for r in 0..rows {
                        let grow = &g[r * b..(r + 1) * b];
                        let wm = &wv[r * a * b..(r + 1) * a * b];
                        for i in 0..a {
                            gx[r * a + i] = gx[r * a + i] + dot(&wm[i * b..(i + 1) * b], grow);
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    let xv = val(*x);
                    for r in 0..rows {
                        let grow = &g[r * b..(r + 1) * b];
                        for i in 0..a {
                            let xi = xv[r * a + i];
                            let dst = &mut gw[(r * a + i) * b..(r * a + i + 1) * b];
                            for (acc, &d) in dst.iter_mut().zip(grow) {
                                *acc = *acc + xi * d;
                            }
                        }
                    }
                }
            }
            Op::Custom { parents, backward } => {
                let pv: Vec<&[T]> = parents.iter().map(|p| val(*p)).collect();
                let pg = backward(g, &pv, &node.value);
                for (p, d) in parents.iter().zip(pg) {
                    if let (Some(d), Some(gp)) = (d, self.slot(grads, *p)) {
                        if d.len() != gp.len() {
                            return Err(Error::dim("custom backward", &[gp.len()], &[d.len()]));
                        }
                        add_into(gp, &d);
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient buffer for `v`, allocated on first touch; `None` when `v`
    /// does not take part in differentiation.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.needs(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn take_slot(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Vec<T> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len])
    }
}

pub(crate) fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
