//! Dense multi-head attention and (temporal) deformable attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numerics::{Graph, Init, ParamStore, Real, Var};

/// Normalized `(x, y)` anchors, one per query, clamped to `[0, 1]^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePoints {
    points: Vec<[f64; 2]>,
}

impl ReferencePoints {
    pub fn new(points: impl IntoIterator<Item = [f64; 2]>) -> Self {
        Self {
            points: points
                .into_iter()
                .map(|[x, y]| [x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)])
                .collect(),
        }
    }

    /// Cell centres of an `h x w` map in row-major order.
    pub fn grid(h: usize, w: usize) -> Self {
        let norm = |i: usize, n: usize| {
            if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.5
            }
        };
        Self::new((0..h).flat_map(|y| (0..w).map(move |x| [norm(x, w), norm(y, h)])))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// Pixel positions on an `h x w` frame.
    pub fn rescaled(&self, h: usize, w: usize) -> Vec<[f64; 2]> {
        self.points
            .iter()
            .map(|&p| rescale_reference(p, h, w))
            .collect()
    }

    /// `[n, 2]` constant node.
    pub fn to_var<T: Real>(&self, g: &mut Graph<'_, T>) -> Var {
        let data = self.points.iter().flat_map(|p| p.map(T::lit)).collect();
        g.constant(vec![self.points.len(), 2], data)
            .expect("reference point shape")
    }
}

/// Maps a normalized point to pixel coordinates with the align-corners
/// convention: `(0, 0)` is the first cell centre, `(1, 1)` the last.
pub fn rescale_reference(p: [f64; 2], h: usize, w: usize) -> [f64; 2] {
    [
        p[0] * w.saturating_sub(1) as f64,
        p[1] * h.saturating_sub(1) as f64,
    ]
}

/// Standard scaled dot-product attention with `heads` heads.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub d: usize,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let mut sub = init.sub(name);
        Ok(Self {
            d,
            heads,
            query: Linear::new(&mut sub, "query", d, d)?,
            key: Linear::new(&mut sub, "key", d, d)?,
            value: Linear::new(&mut sub, "value", d, d)?,
            out: Linear::new(&mut sub, "out", d, d)?,
        })
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }

    /// `query: [n_q, d]`, `key` and `value: [n_k, d]`. Positional terms are
    /// the caller's business.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, query, key, value)?.0)
    }

    /// Also returns the `[n_q, n_k]` attention matrix of every head.
    pub fn forward_with_weights<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<(Var, Vec<Var>)> {
        if g.shape(key).first() == Some(&0) {
            return Err(Error::contract("attention over zero keys"));
        }
        for v in [query, key, value] {
            if g.shape(v).len() != 2 || g.shape(v)[1] != self.d {
                return Err(Error::dim("multi_head_attn", g.shape(v), &[0, self.d]));
            }
        }
        if g.shape(key)[0] != g.shape(value)[0] {
            return Err(Error::dim("multi_head_attn", g.shape(key), g.shape(value)));
        }
        let q = self.query.forward(g, query)?;
        let k = self.key.forward(g, key)?;
        let v = self.value.forward(g, value)?;
        let cv = self.head_width();
        let scale = T::lit(1.0 / (cv as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let qm = g.slice_cols(q, m * cv, cv)?;
            let km = g.slice_cols(k, m * cv, cv)?;
            let vm = g.slice_cols(v, m * cv, cv)?;
            let logits = g.matmul_nt(qm, km)?;
            let logits = g.scale(logits, scale);
            let a = g.softmax_rows(logits)?;
            heads.push(g.matmul(a, vm)?);
            weights.push(a);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        Ok((self.out.forward(g, cat)?, weights))
    }
}

/// Deformable attention over `frames` feature maps. With `frames == 1` this
/// is single-frame deformable attention; otherwise the `frames * points`
/// weight logits of every head share one softmax.
#[derive(Debug, Clone, Copy)]
pub struct DeformableAttention {
    pub d: usize,
    pub heads: usize,
    pub points: usize,
    pub frames: usize,
    pub value: Linear,
    /// `d -> frames * heads * points * 2`, laid out `(frame, head, point, xy)`.
    pub offsets: Linear,
    /// `d -> heads * frames * points`, laid out `(head, frame, point)`.
    pub weights: Linear,
    pub out: Linear,
}

/// Normalized radius of the first sampling point at initialization.
const OFFSET_INIT_RADIUS: f64 = 0.05;

impl DeformableAttention {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d: usize,
        heads: usize,
        points: usize,
        frames: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        if points == 0 || frames == 0 {
            return Err(Error::contract(
                "deformable attention needs K >= 1 and L >= 1",
            ));
        }
        let mut sub = init.sub(name);
        let value = Linear::new(&mut sub, "value", d, d)?;
        let width = frames * heads * points * 2;
        let mut off = sub.sub("offsets");
        let bias = (0..width)
            .map(|i| {
                let xy = i % 2;
                let k = (i / 2) % points;
                let m = (i / (2 * points)) % heads;
                let theta = 2.0 * std::f64::consts::PI * m as f64 / heads as f64;
                let r = OFFSET_INIT_RADIUS * (k + 1) as f64;
                T::lit(if xy == 0 {
                    r * theta.cos()
                } else {
                    r * theta.sin()
                })
            })
            .collect();
        let offsets = Linear {
            weight: off.zeros("weight", &[d, width])?,
            bias: off.values("bias", &[width], bias)?,
            din: d,
            dout: width,
        };
        let weights = Linear::zeroed(&mut sub, "weights", d, heads * frames * points)?;
        let out = Linear::new(&mut sub, "out", d, d)?;
        Ok(Self {
            d,
            heads,
            points,
            frames,
            value,
            offsets,
            weights,
            out,
        })
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }

    /// Sets the offset projection (weights and bias) to zero so every
    /// sample lands on the reference point.
    pub fn zero_offsets<T: Real>(&self, store: &mut ParamStore<T>) {
        store
            .get_mut(self.offsets.weight)
            .data_mut()
            .fill(T::zero());
        store.get_mut(self.offsets.bias).data_mut().fill(T::zero());
    }

    /// `query: [n_q, d]`, `refs: [n_q, 2]` normalized, one `[H_l, W_l, d]`
    /// map per frame.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        refs: Var,
        fmaps: &[Var],
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, query, refs, fmaps)?.0)
    }

    /// Also returns the normalized weights as `[n_q * M, L * K]`, row
    /// `q * M + m`, column `l * K + k`.
    pub fn forward_with_weights<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        refs: Var,
        fmaps: &[Var],
    ) -> Result<(Var, Var)> {
        let (lf, mh, kp) = (self.frames, self.heads, self.points);
        if fmaps.len() != lf {
            return Err(Error::contract(format!(
                "deformable attention built for {lf} frames, got {}",
                fmaps.len()
            )));
        }
        let nq = match g.shape(query) {
            [n, d] if *d == self.d => *n,
            s => return Err(Error::dim("deform_attn query", s, &[0, self.d])),
        };
        if g.shape(refs) != [nq, 2] {
            return Err(Error::dim("deform_attn refs", g.shape(refs), &[nq, 2]));
        }
        let mut extents = Vec::with_capacity(lf);
        for &f in fmaps {
            match g.shape(f) {
                [h, w, c] if *c == self.d => extents.push((*h, *w)),
                s => return Err(Error::dim("deform_attn fmap", s, &[0, 0, self.d])),
            }
        }
        let cv = self.head_width();

        let offsets = self.offsets.forward(g, query)?;
        let logits = self.weights.forward(g, query)?;
        let logits = g.reshape(logits, &[nq * mh, lf * kp])?;
        let attn = g.softmax_rows(logits)?;
        let attn = g.reshape(attn, &[nq, mh * lf * kp])?;

        let rep: Vec<usize> = (0..nq)
            .flat_map(|q| std::iter::repeat(q).take(kp))
            .collect();
        let refs_rep = g.gather_rows(refs, &rep)?;

        let mut head_out = vec![None; mh];
        for (l, (&fmap, &(h, w))) in fmaps.iter().zip(&extents).enumerate() {
            let flat = g.reshape(fmap, &[h * w, self.d])?;
            let values = self.value.forward(g, flat)?;
            for (m, slot) in head_out.iter_mut().enumerate() {
                let vm = g.slice_cols(values, m * cv, cv)?;
                let vm = g.reshape(vm, &[h, w, cv])?;
                let off = g.slice_cols(offsets, (l * mh + m) * kp * 2, kp * 2)?;
                let off = g.reshape(off, &[nq * kp, 2])?;
                let loc = g.add(refs_rep, off)?;
                let sampled = g.bilinear_sample(vm, loc)?;
                let a = g.slice_cols(attn, (m * lf + l) * kp, kp)?;
                let part = g.group_weighted_sum(a, sampled)?;
                *slot = Some(match *slot {
                    Some(acc) => g.add(acc, part)?,
                    None => part,
                });
            }
        }
        let heads: Vec<Var> = head_out.into_iter().flatten().collect();
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let out = self.out.forward(g, cat)?;
        let weights = g.reshape(attn, &[nq * mh, lf * kp])?;
        Ok((out, weights))
    }
}
