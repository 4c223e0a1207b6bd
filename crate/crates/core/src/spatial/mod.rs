//! Single-frame detector: backbone, spatial encoder, spatial decoder and
//! the prediction heads shared with the temporal stack.

mod backbone;
mod position;

pub use backbone::{upsample, Backbone, BackboneFeatures, LEVEL_STRIDES};
pub use position::{axis_encoding, sine_positional_encoding};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{DeformableAttention, MultiHeadAttention, ReferencePoints};
use crate::error::Result;
use crate::nn::{FfnBlock, LayerNorm, Linear, Mlp};
use crate::numerics::{Graph, Init, ParamId, Real, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialConfig {
    pub d: usize,
    pub heads: usize,
    pub points: usize,
    pub queries: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub classes: usize,
    pub ffn_hidden: usize,
    pub fusion: bool,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            points: 4,
            queries: 60,
            encoder_layers: 2,
            decoder_layers: 2,
            classes: 4,
            ffn_hidden: 128,
            fusion: true,
        }
    }
}

/// Object queries inside a graph. Reference points are kept as logits so
/// the box head can add them back before its sigmoid.
#[derive(Debug, Clone, Copy)]
pub struct Queries {
    pub embed: Var,
    pub pos: Var,
    pub ref_logits: Var,
}

impl Queries {
    pub fn len<T: Real>(&self, g: &Graph<'_, T>) -> usize {
        g.shape(self.embed)[0]
    }

    /// Normalized reference points `[n, 2]`.
    pub fn refs<T: Real>(&self, g: &mut Graph<'_, T>) -> Var {
        g.sigmoid(self.ref_logits)
    }

    pub fn with_embed(self, embed: Var) -> Self {
        Self { embed, ..self }
    }

    pub fn gather<T: Real>(&self, g: &mut Graph<'_, T>, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            embed: g.gather_rows(self.embed, idx)?,
            pos: g.gather_rows(self.pos, idx)?,
            ref_logits: g.gather_rows(self.ref_logits, idx)?,
        })
    }

    pub fn concat<T: Real>(g: &mut Graph<'_, T>, parts: &[Queries]) -> Result<Self> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let e: Vec<Var> = parts.iter().map(|q| q.embed).collect();
        let p: Vec<Var> = parts.iter().map(|q| q.pos).collect();
        let r: Vec<Var> = parts.iter().map(|q| q.ref_logits).collect();
        Ok(Self {
            embed: g.concat_rows(&e)?,
            pos: g.concat_rows(&p)?,
            ref_logits: g.concat_rows(&r)?,
        })
    }

    /// `embed + pos`, the attention input.
    pub fn with_pos<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        g.add(self.embed, self.pos)
    }
}

/// Class logits `[n, classes]` and sigmoid boxes `[n, 4]` (cx, cy, w, h).
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub logits: Var,
    pub boxes: Var,
}

/// Class head and 3-layer box head.
#[derive(Debug, Clone)]
pub struct Heads {
    pub class: Linear,
    pub boxes: Mlp,
}

/// Class-bias initialisation giving every class a prior probability of 0.01.
pub const PRIOR_PROB: f64 = 0.01;

impl Heads {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d: usize,
        classes: usize,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        let class = Linear::new(&mut sub, "class", d, classes)?;
        let bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        sub.store.get_mut(class.bias).data_mut().fill(T::lit(bias));
        let boxes = Mlp::new(&mut sub, "box", &[d, d, d, 4])?;
        // Start from the reference point with a modest extent.
        let last = *boxes.last();
        sub.store.get_mut(last.weight).data_mut().fill(T::zero());
        let wh = T::lit(crate::nn::inverse_sigmoid(0.2));
        sub.store.get_mut(last.bias).data_mut()[2..].fill(wh);
        Ok(Self { class, boxes })
    }

    /// `box = sigmoid(mlp(e) + [ref_logit_x, ref_logit_y, 0, 0])`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        embed: Var,
        ref_logits: Var,
    ) -> Result<Prediction> {
        let logits = self.class.forward(g, embed)?;
        let raw = self.boxes.forward(g, embed)?;
        let n = g.shape(embed)[0];
        let zeros = g.constant(vec![n, 2], vec![T::zero(); n * 2])?;
        let anchor = g.concat_cols(&[ref_logits, zeros])?;
        let raw = g.add(raw, anchor)?;
        Ok(Prediction {
            logits,
            boxes: g.sigmoid(raw),
        })
    }

    pub fn class_scores<T: Real>(&self, g: &mut Graph<'_, T>, embed: Var) -> Result<Var> {
        let l = self.class.forward(g, embed)?;
        Ok(g.sigmoid(l))
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: DeformableAttention,
    pub norm: LayerNorm,
    pub ffn: FfnBlock,
}

impl EncoderLayer {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        cfg: &SpatialConfig,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(Self {
            attn: DeformableAttention::new(&mut sub, "attn", cfg.d, cfg.heads, cfg.points, 1)?,
            norm: LayerNorm::new(&mut sub, "norm", cfg.d)?,
            ffn: FfnBlock::new(&mut sub, "ffn", cfg.d, cfg.ffn_hidden)?,
        })
    }

    /// `x: [H*W, d]` flattened map, `pos` likewise, `refs` the cell grid.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        pos: Var,
        refs: Var,
        extent: (usize, usize),
    ) -> Result<Var> {
        let q = g.add(x, pos)?;
        let map = g.reshape(x, &[extent.0, extent.1, self.attn.d])?;
        let a = self.attn.forward(g, q, refs, &[map])?;
        let s = g.add(x, a)?;
        let s = self.norm.forward(g, s)?;
        self.ffn.forward(g, s)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: DeformableAttention,
    pub norm2: LayerNorm,
    pub ffn: FfnBlock,
}

impl DecoderLayer {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        cfg: &SpatialConfig,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(Self {
            self_attn: MultiHeadAttention::new(&mut sub, "self_attn", cfg.d, cfg.heads)?,
            norm1: LayerNorm::new(&mut sub, "norm1", cfg.d)?,
            cross_attn: DeformableAttention::new(
                &mut sub,
                "cross_attn",
                cfg.d,
                cfg.heads,
                cfg.points,
                1,
            )?,
            norm2: LayerNorm::new(&mut sub, "norm2", cfg.d)?,
            ffn: FfnBlock::new(&mut sub, "ffn", cfg.d, cfg.ffn_hidden)?,
        })
    }

    /// Self-attention, deformable cross-attention into `memory`, FFN.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, q: Queries, memory: Var) -> Result<Var> {
        let qk = q.with_pos(g)?;
        let sa = self.self_attn.forward(g, qk, qk, q.embed)?;
        let t = g.add(q.embed, sa)?;
        let t = self.norm1.forward(g, t)?;
        let qc = g.add(t, q.pos)?;
        let refs = q.refs(g);
        let ca = self.cross_attn.forward(g, qc, refs, &[memory])?;
        let t2 = g.add(t, ca)?;
        let t2 = self.norm2.forward(g, t2)?;
        self.ffn.forward(g, t2)
    }
}

/// Everything the single-frame detector produces for one frame.
#[derive(Debug, Clone)]
pub struct SpatialOutput {
    /// Encoder output `[H', W', d]`.
    pub memory: Var,
    /// Sine encoding of the memory grid, `[H' * W', d]`.
    pub pos: Var,
    pub extent: (usize, usize),
    /// Decoder queries after the last layer.
    pub queries: Queries,
    /// Head outputs after every decoder layer, last one final.
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone)]
pub struct SpatialDetector {
    pub cfg: SpatialConfig,
    pub backbone: Backbone,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub query_embed: ParamId,
    pub query_pos: ParamId,
    pub ref_proj: Linear,
    pub heads: Heads,
}

impl SpatialDetector {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        cfg: &SpatialConfig,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        let backbone = Backbone::new(&mut sub, "backbone", cfg.d, cfg.fusion)?;
        let encoder = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(&mut sub, &format!("encoder.{i}"), cfg))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(&mut sub, &format!("decoder.{i}"), cfg))
            .collect::<Result<_>>()?;
        let query_embed = sub.normal("query_embed", &[cfg.queries, cfg.d], 1.0)?;
        let query_pos = sub.normal("query_pos", &[cfg.queries, cfg.d], 1.0)?;
        let ref_proj = Linear::new(&mut sub, "ref_proj", cfg.d, 2)?;
        let heads = Heads::new(&mut sub, "heads", cfg.d, cfg.classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            encoder,
            decoder,
            query_embed,
            query_pos,
            ref_proj,
            heads,
        })
    }

    /// Backbone plus spatial encoder; returns memory `[H', W', d]`, the
    /// flattened positional encoding and the extent.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        image: Var,
    ) -> Result<(Var, Var, (usize, usize))> {
        let feats = self.backbone.forward(g, image)?;
        let (h, w) = (g.shape(feats.fused)[0], g.shape(feats.fused)[1]);
        let d = self.cfg.d;
        let pe = sine_positional_encoding::<T>(h, w, d)?;
        let pos = g.constant(vec![h * w, d], pe.into_data())?;
        let refs = ReferencePoints::grid(h, w).to_var(g);
        let mut x = g.reshape(feats.fused, &[h * w, d])?;
        for layer in &self.encoder {
            x = layer.forward(g, x, pos, refs, (h, w))?;
        }
        let memory = g.reshape(x, &[h, w, d])?;
        Ok((memory, pos, (h, w)))
    }

    /// Learned initial queries.
    pub fn initial_queries<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Queries> {
        let embed = g.param(self.query_embed);
        let pos = g.param(self.query_pos);
        let ref_logits = self.ref_proj.forward(g, pos)?;
        Ok(Queries {
            embed,
            pos,
            ref_logits,
        })
    }

    /// Runs the decoder, returning the queries after every layer.
    pub fn decode<T: Real>(&self, g: &mut Graph<'_, T>, memory: Var) -> Result<Vec<Queries>> {
        let mut q = self.initial_queries(g)?;
        let mut out = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let e = layer.forward(g, q, memory)?;
            q = q.with_embed(e);
            out.push(q);
        }
        Ok(out)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<SpatialOutput> {
        let (memory, pos, extent) = self.encode(g, image)?;
        let layers = self.decode(g, memory)?;
        let predictions = layers
            .iter()
            .map(|q| self.heads.forward(g, q.embed, q.ref_logits))
            .collect::<Result<Vec<_>>>()?;
        let queries = match layers.last() {
            Some(q) => *q,
            None => self.initial_queries(g)?,
        };
        let predictions = if predictions.is_empty() {
            vec![self.heads.forward(g, queries.embed, queries.ref_logits)?]
        } else {
            predictions
        };
        Ok(SpatialOutput {
            memory,
            pos,
            extent,
            queries,
            predictions,
        })
    }
}

#[cfg(test)]
mod tests;
