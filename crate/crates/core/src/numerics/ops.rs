//! Forward rules for the recorded operations.

use crate::error::{Error, Result};
use crate::numerics::graph::{dot, ConvGeometry, Graph, Op, Var};
use crate::numerics::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p, T: Real> Graph<'p, T> {
    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            T::zero(),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b: false,
            },
            needs,
        ))
    }

    /// `[m, k] x [n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            true,
            &mut out,
            T::zero(),
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b: true,
            },
            needs,
        ))
    }

    /// `x W + b` for `x: [n, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, din) = self.dims2(x, "linear")?;
        let (din2, dout) = self.dims2(w, "linear")?;
        if din != din2 {
            return Err(Error::dim("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim("linear bias", self.shape(b), &[dout]));
            }
            let bv = self.value(b);
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            rows,
            din,
            dout,
            self.value(x),
            false,
            self.value(w),
            false,
            &mut out,
            T::one(),
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            vec![rows, dout],
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            needs,
        ))
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>)> {
        self.same_shape(a, b, op)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.zip_op(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(s, v, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.zip_op(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(s, v, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.zip_op(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(s, v, Op::Mul(a, b), needs))
    }

    /// Adds a `[d]` row to every row of `x: [n, d]`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(r) != [d] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(r)));
        }
        let rv = self.value(r).to_vec();
        let out: Vec<T> = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(&rv).map(|(&a, &b)| a + b))
            .collect();
        let needs = self.needs(x) || self.needs(r);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddRow(x, r), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v + c).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::AddScalar(x), needs)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::contract(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).to_vec();
        softmax_forward(&mut out, outer, n, inner);
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::Softmax { x, outer, n, inner }, needs))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.softmax(x, axis)
    }

    /// Per-row normalization over the last axis, then `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let rows = xv.len() / d;
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = T::lit(rs);
            for j in 0..d {
                let h = T::lit((row[j].f64() - mean) * rs);
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Samples `fmap: [H, W, C]` at normalized `points: [P, 2]` given as
    /// `(x, y)`, with `(0, 0)` the top-left cell centre and `(1, 1)` the
    /// bottom-right one. Reads outside the map are zero.
    pub fn bilinear_sample(&mut self, fmap: Var, points: Var) -> Result<Var> {
        let (h, w, c) = match self.shape(fmap) {
            [h, w, c] if *h > 0 && *w > 0 => (*h, *w, *c),
            s => return Err(Error::dim("bilinear_sample", s, &[0, 0, 0])),
        };
        let (p, two) = self.dims2(points, "bilinear_sample")?;
        if two != 2 {
            return Err(Error::dim("bilinear_sample", self.shape(points), &[p, 2]));
        }
        let fv = self.value(fmap);
        let pv = self.value(points);
        let mut out = vec![T::zero(); p * c];
        for i in 0..p {
            let taps = bilinear_taps(pv[2 * i], pv[2 * i + 1], h, w);
            let dst = &mut out[i * c..(i + 1) * c];
            for (y, x, wt) in taps.iter().flatten().copied() {
                let src = &fv[(y * w + x) * c..(y * w + x + 1) * c];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o = *o + wt * s;
                }
            }
        }
        let needs = self.needs(fmap) || self.needs(points);
        Ok(self.push(
            vec![p, c],
            out,
            Op::Bilinear {
                fmap,
                points,
                h,
                w,
                c,
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if start + len > cols {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![rows, len],
            out,
            Op::SliceCols {
                x,
                cols,
                start,
                len,
            },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|(_, c)| c).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![rows, total],
            out,
            Op::ConcatCols {
                parts: widths,
                total,
            },
            needs,
        ))
    }

    /// Stacks tensors along the first axis; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += self.shape(p)[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(shape, out, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Selects (possibly repeated) rows along the first axis.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape
            .first()
            .ok_or_else(|| Error::contract("gather_rows on a scalar"))?;
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&xv[i * width..(i + 1) * width]);
        }
        let mut oshape = vec![idx.len()];
        oshape.extend_from_slice(&shape[1..]);
        let needs = self.needs(x);
        Ok(self.push(
            oshape,
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                width,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = xv[i * cols + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![cols, rows],
            out,
            Op::Transpose { x, rows, cols },
            needs,
        ))
    }

    /// Sum of all elements, accumulated in 64-bit.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|v| v.f64()).sum();
        let needs = self.needs(x);
        self.push(vec![], vec![T::lit(s)], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::lit(1.0 / n as f64))
    }

    /// Unfolds `[H, W, C]` into `[H_out * W_out, k * k * C]` patches with zero padding.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (h, w, c) = match self.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::dim("im2col", s, &[0, 0, 0])),
        };
        if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::contract("im2col geometry"));
        }
        let geo = ConvGeometry {
            h,
            w,
            c,
            kernel,
            stride,
            pad,
        };
        let (oh, ow, patch) = (geo.out_h(), geo.out_w(), geo.patch());
        let xv = self.value(x);
        let mut out = vec![T::zero(); oh * ow * patch];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * patch;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((iy as usize) * w + ix as usize) * c;
                        let dst = base + (ky * kernel + kx) * c;
                        out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![oh * ow, patch], out, Op::Im2Col { x, geo }, needs))
    }

    /// `out[q, :] = sum_k w[q, k] * s[q * K + k, :]`.
    pub fn group_weighted_sum(&mut self, w: Var, s: Var) -> Result<Var> {
        let (n, k) = self.dims2(w, "group_weighted_sum")?;
        let (sr, c) = self.dims2(s, "group_weighted_sum")?;
        if sr != n * k {
            return Err(Error::dim(
                "group_weighted_sum",
                self.shape(w),
                self.shape(s),
            ));
        }
        let wv = self.value(w);
        let sv = self.value(s);
        let mut out = vec![T::zero(); n * c];
        for q in 0..n {
            let dst = &mut out[q * c..(q + 1) * c];
            for j in 0..k {
                let wt = wv[q * k + j];
                for (o, &v) in dst
                    .iter_mut()
                    .zip(&sv[(q * k + j) * c..(q * k + j + 1) * c])
                {
                    *o = *o + wt * v;
                }
            }
        }
        let needs = self.needs(w) || self.needs(s);
        Ok(self.push(vec![n, c], out, Op::GroupWeightedSum { w, s, k, c }, needs))
    }

    /// Per-row matrix-vector product: row `r` of `x: [n, a]` times the
    /// `[a, b]` matrix stored in row `r` of `w: [n, a * b]`.
    pub fn row_matvec(&mut self, x: Var, w: Var, b: usize) -> Result<Var> {
        let (n, a) = self.dims2(x, "row_matvec")?;
        let (n2, ab) = self.dims2(w, "row_matvec")?;
        if n != n2 || ab != a * b {
            return Err(Error::dim("row_matvec", self.shape(x), self.shape(w)));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![T::zero(); n * b];
        for r in 0..n {
            let dst = &mut out[r * b..(r + 1) * b];
            for i in 0..a {
                let xi = xv[r * a + i];
                let wrow = &wv[(r * a + i) * b..(r * a + i + 1) * b];
                for (o, &wv) in dst.iter_mut().zip(wrow) {
                    *o = *o + xi * wv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(vec![n, b], out, Op::RowMatVec { x, w, a, b }, needs))
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Up to four `(row, col, weight)` taps; out-of-range taps are `None`.
pub fn bilinear_taps<T: Real>(nx: T, ny: T, h: usize, w: usize) -> [Option<(usize, usize, T)>; 4] {
    let px = nx * T::lit((w - 1) as f64);
    let py = ny * T::lit((h - 1) as f64);
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let one = T::one();
    let x0 = x0.to_i64().unwrap_or(i64::MIN / 2);
    let y0 = y0.to_i64().unwrap_or(i64::MIN / 2);
    let tap = |y: i64, x: i64, wt: T| {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            Some((y as usize, x as usize, wt))
        } else {
            None
        }
    };
    [
        tap(y0, x0, (one - fx) * (one - fy)),
        tap(y0, x0 + 1, fx * (one - fy)),
        tap(y0 + 1, x0, (one - fx) * fy),
        tap(y0 + 1, x0 + 1, fx * fy),
    ]
}

pub(crate) fn bilinear_backward<T: Real>(
    fmap: &[T],
    points: &[T],
    g: &[T],
    (h, w, c): (usize, usize, usize),
    mut gf: Option<&mut [T]>,
    mut gp: Option<&mut [T]>,
) {
    let sx = T::lit((w - 1) as f64);
    let sy = T::lit((h - 1) as f64);
    let p = points.len() / 2;
    let zero_row = vec![T::zero(); c];
    for i in 0..p {
        let grow = &g[i * c..(i + 1) * c];
        let (nx, ny) = (points[2 * i], points[2 * i + 1]);
        if let Some(gf) = gf.as_deref_mut() {
            for (y, x, wt) in bilinear_taps(nx, ny, h, w).iter().flatten().copied() {
                let dst = &mut gf[(y * w + x) * c..(y * w + x + 1) * c];
                for (a, &d) in dst.iter_mut().zip(grow) {
                    *a = *a + wt * d;
                }
            }
        }
        if let Some(gp) = gp.as_deref_mut() {
            let px = nx * sx;
            let py = ny * sy;
            let x0 = px.floor();
            let y0 = py.floor();
            let fx = px - x0;
            let fy = py - y0;
            let (x0, y0) = (
                x0.to_i64().unwrap_or(i64::MIN / 2),
                y0.to_i64().unwrap_or(i64::MIN / 2),
            );
            let cell = |y: i64, x: i64| -> &[T] {
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    let o = ((y as usize) * w + x as usize) * c;
                    &fmap[o..o + c]
                } else {
                    &zero_row
                }
            };
            let (v00, v01, v10, v11) = (
                cell(y0, x0),
                cell(y0, x0 + 1),
                cell(y0 + 1, x0),
                cell(y0 + 1, x0 + 1),
            );
            let one = T::one();
            let mut dx = T::zero();
            let mut dy = T::zero();
            for j in 0..c {
                let ddx = (one - fy) * (v01[j] - v00[j]) + fy * (v11[j] - v10[j]);
                let ddy = (one - fx) * (v10[j] - v00[j]) + fx * (v11[j] - v01[j]);
                dx = dx + grow[j] * ddx;
                dy = dy + grow[j] * ddy;
            }
            gp[2 * i] = gp[2 * i] + dx * sx;
            gp[2 * i + 1] = gp[2 * i + 1] + dy * sy;
        }
    }
}

pub(crate) fn softmax_forward<T: Real>(buf: &mut [T], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let mut mx = T::neg_infinity();
            for k in 0..n {
                mx = mx.max(buf[at(k)]);
            }
            let mut s = 0.0f64;
            for k in 0..n {
                let e = (buf[at(k)] - mx).exp();
                buf[at(k)] = e;
                s += e.f64();
            }
            let inv = T::lit(1.0 / s);
            for k in 0..n {
                buf[at(k)] = buf[at(k)] * inv;
            }
        }
    }
}

pub(crate) fn softmax_backward<T: Real>(
    y: &[T],
    g: &[T],
    gx: &mut [T],
    outer: usize,
    n: usize,
    inner: usize,
) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let s: T = (0..n)
                .map(|k| g[at(k)] * y[at(k)])
                .fold(T::zero(), |a, b| a + b);
            for k in 0..n {
                gx[at(k)] = gx[at(k)] + y[at(k)] * (g[at(k)] - s);
            }
        }
    }
}

pub(crate) fn layer_norm_backward<T: Real>(
    g: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    gx: &mut [T],
    d: usize,
) {
    let dn = T::lit(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, &rs) in rstd.iter().enumerate() {
        let gr = &g[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dxhat[j] = gr[j] * gain[j];
        }
        let s1: T = dxhat.iter().fold(T::zero(), |a, &b| a + b);
        let s2 = dot(&dxhat, hr);
        for j in 0..d {
            gx[r * d + j] = gx[r * d + j] + rs / dn * (dn * dxhat[j] - s1 - hr[j] * s2);
        }
    }
}

pub(crate) fn im2col_backward<T: Real>(g: &[T], gx: &mut [T], geo: &ConvGeometry) {
    let (oh, ow, patch) = (geo.out_h(), geo.out_w(), geo.patch());
    let (h, w, c, k) = (geo.h, geo.w, geo.c, geo.kernel);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * patch;
            for ky in 0..k {
                let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * w + ix as usize) * c;
                    let src = base + (ky * k + kx) * c;
                    for j in 0..c {
                        gx[dst + j] = gx[dst + j] + g[src + j];
                    }
                }
            }
        }
    }
}
