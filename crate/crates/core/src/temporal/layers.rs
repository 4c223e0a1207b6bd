use rand::Rng;

use crate::attention::{DeformableAttention, MultiHeadAttention, ReferencePoints};
use crate::error::{Error, Result};
use crate::matching::BoxCxcywh;
use crate::nn::{FfnBlock, LayerNorm, Linear};
use crate::numerics::{Graph, Init, Real, Var};
use crate::spatial::Queries;

/// Side of the sampling grid used to pool one RoI.
pub const ROI_GRID: usize = 7;

/// Extents below this are pooled at the box centre only.
pub const DEGENERATE_EXTENT: f64 = 1e-4;

/// Temporal query encoder layer: self-attention over the current queries,
/// dense cross-attention into the references, FFN.
#[derive(Debug, Clone, Copy)]
pub struct TqeLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FfnBlock,
}

impl TqeLayer {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(Self {
            self_attn: MultiHeadAttention::new(&mut sub, "self_attn", d, heads)?,
            norm1: LayerNorm::new(&mut sub, "norm1", d)?,
            cross_attn: MultiHeadAttention::new(&mut sub, "cross_attn", d, heads)?,
            norm2: LayerNorm::new(&mut sub, "norm2", d)?,
            ffn: FfnBlock::new(&mut sub, "ffn", d, hidden)?,
        })
    }

    /// Returns the updated current embeddings `[n_c, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        cur: Queries,
        refs: Queries,
    ) -> Result<Var> {
        if refs.len(g) == 0 {
            return Err(Error::contract(
                "temporal query encoder needs at least one reference query",
            ));
        }
        let qk = cur.with_pos(g)?;
        let sa = self.self_attn.forward(g, qk, qk, cur.embed)?;
        let t = g.add(cur.embed, sa)?;
        let t = self.norm1.forward(g, t)?;
        let q = g.add(t, cur.pos)?;
        let k = refs.with_pos(g)?;
        let ca = self.cross_attn.forward(g, q, k, refs.embed)?;
        let t = g.add(t, ca)?;
        let t = self.norm2.forward(g, t)?;
        self.ffn.forward(g, t)
    }
}

/// Temporal deformable encoder layer: every cell of the current map
/// attends to sampled locations in all `L` frame memories.
#[derive(Debug, Clone, Copy)]
pub struct TdteLayer {
    pub attn: DeformableAttention,
    pub norm: LayerNorm,
    pub ffn: FfnBlock,
}

impl TdteLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d: usize,
        heads: usize,
        points: usize,
        frames: usize,
        hidden: usize,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(Self {
            attn: DeformableAttention::new(&mut sub, "attn", d, heads, points, frames)?,
            norm: LayerNorm::new(&mut sub, "norm", d)?,
            ffn: FfnBlock::new(&mut sub, "ffn", d, hidden)?,
        })
    }

    /// `memories[0]` is the current frame; `pos` is its flattened
    /// positional encoding. Returns the enhanced current memory.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        memories: &[Var],
        pos: Var,
    ) -> Result<Var> {
        let (h, w, d) = match g.shape(memories[0]) {
            [h, w, d] => (*h, *w, *d),
            s => return Err(Error::dim("tdte memory", s, &[0, 0, 0])),
        };
        let x = g.reshape(memories[0], &[h * w, d])?;
        let q = g.add(x, pos)?;
        let refs = ReferencePoints::grid(h, w).to_var(g);
        let a = self.attn.forward(g, q, refs, memories)?;
        let s = g.add(x, a)?;
        let s = self.norm.forward(g, s)?;
        let s = self.ffn.forward(g, s)?;
        g.reshape(s, &[h, w, d])
    }
}

/// Temporal deformable decoder layer: deformable cross-attention from the
/// temporal queries into one memory, then FFN.
#[derive(Debug, Clone, Copy)]
pub struct TdtdLayer {
    pub cross_attn: DeformableAttention,
    pub norm: LayerNorm,
    pub ffn: FfnBlock,
}

impl TdtdLayer {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d: usize,
        heads: usize,
        points: usize,
        hidden: usize,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(Self {
            cross_attn: DeformableAttention::new(&mut sub, "cross_attn", d, heads, points, 1)?,
            norm: LayerNorm::new(&mut sub, "norm", d)?,
            ffn: FfnBlock::new(&mut sub, "ffn", d, hidden)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, q: Queries, memory: Var) -> Result<Var> {
        let qc = q.with_pos(g)?;
        let refs = q.refs(g);
        let ca = self.cross_attn.forward(g, qc, refs, &[memory])?;
        let t = g.add(q.embed, ca)?;
        let t = self.norm.forward(g, t)?;
        self.ffn.forward(g, t)
    }
}

/// Normalized sampling locations pooled for one box, clamped to the map.
pub fn roi_points(b: BoxCxcywh) -> Vec<[f64; 2]> {
    let n = ROI_GRID;
    if b[2] < DEGENERATE_EXTENT || b[3] < DEGENERATE_EXTENT {
        return vec![[b[0].clamp(0.0, 1.0), b[1].clamp(0.0, 1.0)]; n * n];
    }
    let mut pts = Vec::with_capacity(n * n);
    for i in 0..n {
        let y = b[1] + b[3] * ((i as f64 + 0.5) / n as f64 - 0.5);
        for j in 0..n {
            let x = b[0] + b[2] * ((j as f64 + 0.5) / n as f64 - 0.5);
            pts.push([x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)]);
        }
    }
    pts
}

/// Pools one `d`-vector per box from `memory: [H, W, d]` by averaging a
/// 7x7 grid of bilinear samples over the box. Box coordinates are routing
/// inputs and receive no gradient.
pub fn roi_extract<T: Real>(g: &mut Graph<'_, T>, memory: Var, boxes: &[BoxCxcywh]) -> Result<Var> {
    let d = match g.shape(memory) {
        [_, _, d] => *d,
        s => return Err(Error::dim("roi_extract", s, &[0, 0, 0])),
    };
    if boxes.is_empty() {
        return g.constant(vec![0, d], Vec::new());
    }
    let per = ROI_GRID * ROI_GRID;
    let pts: Vec<T> = boxes
        .iter()
        .flat_map(|&b| roi_points(b))
        .flat_map(|[x, y]| [T::lit(x), T::lit(y)])
        .collect();
    let p = g.constant(vec![boxes.len() * per, 2], pts)?;
    let s = g.bilinear_sample(memory, p)?;
    let w = g.constant(
        vec![boxes.len(), per],
        vec![T::lit(1.0 / per as f64); boxes.len() * per],
    )?;
    g.group_weighted_sum(w, s)
}

/// [`roi_extract`] for boxes living in different frames: `frame_of[i]`
/// picks the memory of box `i`. Output rows follow the input order.
pub fn roi_extract_frames<T: Real>(
    g: &mut Graph<'_, T>,
    memories: &[Var],
    frame_of: &[usize],
    boxes: &[BoxCxcywh],
) -> Result<Var> {
    if frame_of.len() != boxes.len() {
        return Err(Error::contract("one frame index per box required"));
    }
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(boxes.len());
    for (f, &mem) in memories.iter().enumerate() {
        let rows: Vec<usize> = (0..boxes.len()).filter(|&i| frame_of[i] == f).collect();
        if rows.is_empty() {
            continue;
        }
        let bs: Vec<BoxCxcywh> = rows.iter().map(|&i| boxes[i]).collect();
        parts.push(roi_extract(g, mem, &bs)?);
        order.extend(rows);
    }
    if order.len() != boxes.len() {
        return Err(Error::contract("box refers to a missing frame"));
    }
    let cat = g.concat_rows(&parts)?;
    let mut inv = vec![0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        inv[i] = pos;
    }
    g.gather_rows(cat, &inv)
}

/// Query and RoI fusion: self-attention over the queries, then every query
/// generates the weights of two pointwise transforms (`d -> d_h`, relu,
/// `d_h -> d`) that are applied to its own RoI vector.
#[derive(Debug, Clone, Copy)]
pub struct QrfLayer {
    pub d: usize,
    pub hidden: usize,
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    /// `d -> d * d_h + d_h * d` dynamic parameters.
    pub generate: Linear,
    pub norm2: LayerNorm,
}

impl QrfLayer {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::contract("dynamic transform width must be positive"));
        }
        let mut sub = init.sub(name);
        let self_attn = MultiHeadAttention::new(&mut sub, "self_attn", d, heads)?;
        let norm1 = LayerNorm::new(&mut sub, "norm1", d)?;
        let generate = Linear::new(&mut sub, "generate", d, 2 * d * hidden)?;
        // The generator of the second transform starts at zero so the RoI
        // branch adds nothing until it has been trained.
        for row in sub
            .store
            .get_mut(generate.weight)
            .data_mut()
            .chunks_mut(2 * d * hidden)
        {
            row[d * hidden..].fill(T::zero());
        }
        Ok(Self {
            d,
            hidden,
            self_attn,
            norm1,
            generate,
            norm2: LayerNorm::new(&mut sub, "norm2", d)?,
        })
    }

    /// `q` pairs row-wise with `roi: [k, d]`; returns the fused embeddings.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, q: Queries, roi: Var) -> Result<Var> {
        let k = q.len(g);
        if g.shape(roi) != [k, self.d] {
            return Err(Error::contract(format!(
                "{k} queries paired with RoI features of shape {:?}",
                g.shape(roi)
            )));
        }
        let qk = q.with_pos(g)?;
        let sa = self.self_attn.forward(g, qk, qk, q.embed)?;
        let s = g.add(q.embed, sa)?;
        let s = self.norm1.forward(g, s)?;
        let params = self.generate.forward(g, s)?;
        let (d, dh) = (self.d, self.hidden);
        let w1 = g.slice_cols(params, 0, d * dh)?;
        let w2 = g.slice_cols(params, d * dh, dh * d)?;
        let h = g.row_matvec(roi, w1, dh)?;
        let h = g.relu(h);
        let o = g.row_matvec(h, w2, d)?;
        let t = g.add(s, o)?;
        self.norm2.forward(g, t)
    }
}
