//! Temporal stacks on top of the frozen single-frame detector: query
//! filtering, temporal query encoding, memory fusion (TDTE) or query/RoI
//! fusion (QRF), and the temporal deformable decoder.

mod layers;
mod select;

pub use layers::{
    roi_extract, roi_extract_frames, roi_points, QrfLayer, TdtdLayer, TdteLayer, TqeLayer,
    DEGENERATE_EXTENT, ROI_GRID,
};
pub use select::{qfh_select, query_scores, top_k};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::BoxCxcywh;
use crate::nn::Linear;
use crate::numerics::{Graph, Init, ParamStore, Real, Var};
use crate::spatial::{axis_encoding, Heads, Prediction, Queries, SpatialConfig, SpatialOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[serde(rename = "transvod")]
    TransVod,
    #[serde(rename = "transvod_pp")]
    TransVodPp,
    Lite,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::TransVod, Variant::TransVodPp, Variant::Lite];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TransVod => "transvod",
            Variant::TransVodPp => "transvod_pp",
            Variant::Lite => "lite",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub variant: Variant,
    /// Number of TQE + TDTD stages (`J`).
    pub stages: usize,
    /// Per-stage top-k counts. For `transvod` one entry per TQE layer,
    /// applied to the reference pool.
    pub k_schedule: Vec<usize>,
    pub tdte_layers: usize,
    pub tqe_layers: usize,
    pub tdtd_layers: usize,
    pub n_ref: usize,
    /// Window size `T_w` (lite).
    pub window: usize,
    /// Add a sine encoding of the in-window slot to lite queries.
    pub frame_embed: bool,
}

impl TemporalConfig {
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::TransVod => Self {
                variant,
                stages: 1,
                k_schedule: vec![80, 50, 20],
                tdte_layers: 1,
                tqe_layers: 3,
                tdtd_layers: 1,
                n_ref: 4,
                window: 1,
                frame_embed: false,
            },
            Variant::TransVodPp => Self {
                variant,
                stages: 3,
                k_schedule: vec![80, 50, 20],
                tdte_layers: 0,
                tqe_layers: 1,
                tdtd_layers: 1,
                n_ref: 4,
                window: 1,
                frame_embed: false,
            },
            Variant::Lite => Self {
                variant,
                stages: 3,
                k_schedule: vec![80, 50, 30],
                tdte_layers: 0,
                tqe_layers: 1,
                tdtd_layers: 1,
                n_ref: 0,
                window: 12,
                frame_embed: false,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k_schedule.windows(2).any(|w| w[1] > w[0]) {
            return bad(format!(
                "k_schedule {:?} must be non-increasing",
                self.k_schedule
            ));
        }
        if self.k_schedule.contains(&0) {
            return bad("k_schedule entries must be positive".into());
        }
        match self.variant {
            Variant::TransVod => {
                if self.stages != 1 {
                    return bad("transvod uses exactly one stage".into());
                }
                if self.k_schedule.len() != self.tqe_layers {
                    return bad(format!(
                        "transvod needs one k per TQE layer ({} vs {})",
                        self.k_schedule.len(),
                        self.tqe_layers
                    ));
                }
            }
            Variant::TransVodPp | Variant::Lite => {
                if self.stages != 3 {
                    return bad(format!("{} uses three stages", self.variant));
                }
                if self.k_schedule.len() != self.stages {
                    return bad("k_schedule needs one entry per stage".into());
                }
                if self.tdte_layers != 0 {
                    return bad(format!("{} has no TDTE", self.variant));
                }
            }
        }
        match self.variant {
            Variant::Lite if self.window == 0 => bad("window must be at least 1".into()),
            Variant::TransVod | Variant::TransVodPp if self.n_ref == 0 => {
                bad("at least one reference frame is required".into())
            }
            _ => Ok(()),
        }
    }

    /// Frames consumed by one call of [`TemporalModel::forward`].
    pub fn frames_per_call(&self) -> usize {
        match self.variant {
            Variant::Lite => self.window,
            _ => 1 + self.n_ref,
        }
    }

    /// Frames that receive detections per call.
    pub fn predicted_frames(&self) -> usize {
        match self.variant {
            Variant::Lite => self.window,
            _ => 1,
        }
    }
}

/// What the temporal stack needs from the spatial detector for one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput {
    pub memory: Var,
    /// Flattened positional encoding of `memory`.
    pub pos: Var,
    pub queries: Queries,
    /// Final-layer spatial prediction for `queries`.
    pub prediction: Prediction,
}

impl From<&SpatialOutput> for FrameInput {
    fn from(s: &SpatialOutput) -> Self {
        Self {
            memory: s.memory,
            pos: s.pos,
            queries: s.queries,
            prediction: *s
                .predictions
                .last()
                .expect("spatial output has a prediction"),
        }
    }
}

/// Learnable class head scoring queries before stage `j > 1` (lite),
/// supervised by a focal term against the previous stage's matching.
#[derive(Debug, Clone, Copy)]
pub struct QfhRecord {
    /// Window slot.
    pub frame: usize,
    /// Stage (0-based) whose predictions provide the targets.
    pub source_stage: usize,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct TemporalOutput {
    /// Per predicted frame, per stage detections; the last stage is final.
    pub frames: Vec<Vec<Prediction>>,
    /// Retained query count per stage (per frame for lite).
    pub retained: Vec<usize>,
    pub qfh: Vec<QfhRecord>,
}

impl TemporalOutput {
    pub fn final_prediction(&self, frame: usize) -> Prediction {
        *self.frames[frame].last().expect("at least one stage")
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub qrf: Option<QrfLayer>,
    pub tqe: Vec<TqeLayer>,
    pub tdtd: Vec<TdtdLayer>,
}

#[derive(Debug, Clone)]
pub struct TemporalModel {
    pub cfg: TemporalConfig,
    pub d: usize,
    pub classes: usize,
    pub tdte: Vec<TdteLayer>,
    pub stages: Vec<Stage>,
    /// Shared prediction heads for every stage.
    pub heads: Heads,
    /// Lite query filter heads for stages `1..J`.
    pub qfh: Vec<Linear>,
}

impl TemporalModel {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        spatial: &SpatialConfig,
        cfg: &TemporalConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, heads, points, hidden) =
            (spatial.d, spatial.heads, spatial.points, spatial.ffn_hidden);
        let mut sub = init.sub(name);
        let tdte = (0..cfg.tdte_layers)
            .map(|i| {
                TdteLayer::new(
                    &mut sub,
                    &format!("tdte.{i}"),
                    d,
                    heads,
                    points,
                    1 + cfg.n_ref,
                    hidden,
                )
            })
            .collect::<Result<_>>()?;
        let mut stages = Vec::with_capacity(cfg.stages);
        for j in 0..cfg.stages {
            let mut st = sub.sub(&format!("stage.{j}"));
            let qrf = match cfg.variant {
                Variant::TransVodPp => {
                    Some(QrfLayer::new(&mut st, "qrf", d, heads, (d / 4).max(1))?)
                }
                _ => None,
            };
            let tqe = (0..cfg.tqe_layers)
                .map(|i| TqeLayer::new(&mut st, &format!("tqe.{i}"), d, heads, hidden))
                .collect::<Result<_>>()?;
            let tdtd = (0..cfg.tdtd_layers)
                .map(|i| TdtdLayer::new(&mut st, &format!("tdtd.{i}"), d, heads, points, hidden))
                .collect::<Result<_>>()?;
            stages.push(Stage { qrf, tqe, tdtd });
        }
        let heads_ = Heads::new(&mut sub, "heads", d, spatial.classes)?;
        let qfh = match cfg.variant {
            Variant::Lite => (1..cfg.stages)
                .map(|j| Linear::new(&mut sub, &format!("qfh.{j}"), d, spatial.classes))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        Ok(Self {
            cfg: cfg.clone(),
            d,
            classes: spatial.classes,
            tdte,
            stages,
            heads: heads_,
            qfh,
        })
    }

    /// Copies the spatial prediction heads into the temporal heads (and the
    /// spatial class head into every lite filter head), so an empty temporal
    /// stack reproduces the single-frame detector.
    pub fn sync_heads<T: Real>(&self, store: &mut ParamStore<T>, spatial: &Heads) -> Result<()> {
        let mut pairs = vec![(spatial.class, self.heads.class)];
        pairs.extend(
            spatial
                .boxes
                .layers
                .iter()
                .copied()
                .zip(self.heads.boxes.layers.iter().copied()),
        );
        pairs.extend(self.qfh.iter().map(|&q| (spatial.class, q)));
        for (src, dst) in pairs {
            for (s, t) in [(src.weight, dst.weight), (src.bias, dst.bias)] {
                let data = store.get(s).data().to_vec();
                let target = store.get_mut(t);
                if target.numel() != data.len() {
                    return Err(Error::dim(
                        "sync_heads",
                        store.get(s).shape(),
                        store.get(t).shape(),
                    ));
                }
                store.get_mut(t).data_mut().copy_from_slice(&data);
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        frames: &[FrameInput],
    ) -> Result<TemporalOutput> {
        let want = self.cfg.frames_per_call();
        if frames.len() != want {
            return Err(Error::contract(format!(
                "{} expects {want} frames per call, got {}",
                self.cfg.variant,
                frames.len()
            )));
        }
        match self.cfg.variant {
            Variant::TransVod => self.forward_transvod(g, frames),
            Variant::TransVodPp => self.forward_pp(g, frames),
            Variant::Lite => self.forward_lite(g, frames),
        }
    }

    fn decode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        stage: &Stage,
        mut q: Queries,
        memory: Var,
    ) -> Result<Queries> {
        for layer in &stage.tdtd {
            let e = layer.forward(g, q, memory)?;
            q = q.with_embed(e);
        }
        Ok(q)
    }

    fn scores<T: Real>(&self, g: &Graph<'_, T>, logits: Var) -> Vec<f64> {
        query_scores(g.value(logits), self.classes)
    }

    /// Current frame first, then the references. The TQE layers walk the
    /// reference pool coarse to fine; TDTE fuses the memories; one TDTD.
    fn forward_transvod<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        frames: &[FrameInput],
    ) -> Result<TemporalOutput> {
        let cur_in = frames[0];
        let pool = Queries::concat(
            g,
            &frames[1..].iter().map(|f| f.queries).collect::<Vec<_>>(),
        )?;
        let logits: Vec<Var> = frames[1..].iter().map(|f| f.prediction.logits).collect();
        let mut pool_scores = Vec::new();
        for &l in &logits {
            pool_scores.extend(self.scores(g, l));
        }
        let stage = &self.stages[0];
        let mut cur = cur_in.queries;
        let mut retained = Vec::new();
        for (layer, &k) in stage.tqe.iter().zip(&self.cfg.k_schedule) {
            let idx = top_k(&pool_scores, k.min(pool_scores.len()))?;
            retained.push(idx.len());
            let refs = pool.gather(g, &idx)?;
            let e = layer.forward(g, cur, refs)?;
            cur = cur.with_embed(e);
        }
        let mut memory = cur_in.memory;
        if !self.tdte.is_empty() {
            let mut mems: Vec<Var> = frames.iter().map(|f| f.memory).collect();
            for layer in &self.tdte {
                memory = layer.forward(g, &mems, cur_in.pos)?;
                mems[0] = memory;
            }
        }
        let cur = self.decode(g, stage, cur, memory)?;
        let pred = self.heads.forward(g, cur.embed, cur.ref_logits)?;
        retained.push(cur.len(g));
        Ok(TemporalOutput {
            frames: vec![vec![pred]],
            retained,
            qfh: Vec::new(),
        })
    }

    /// Per stage: filter current and reference queries, fuse each with its
    /// RoI feature, encode the current queries against the references and
    /// decode into the current memory.
    fn forward_pp<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        frames: &[FrameInput],
    ) -> Result<TemporalOutput> {
        let mems: Vec<Var> = frames.iter().map(|f| f.memory).collect();
        let mut cur = frames[0].queries;
        let mut cur_scores = self.scores(g, frames[0].prediction.logits);
        let mut cur_boxes = read_boxes(g, frames[0].prediction.boxes);

        let mut refs = Queries::concat(
            g,
            &frames[1..].iter().map(|f| f.queries).collect::<Vec<_>>(),
        )?;
        let (mut ref_scores, mut ref_boxes, mut ref_frame) = (Vec::new(), Vec::new(), Vec::new());
        for (f, fr) in frames.iter().enumerate().skip(1) {
            let s = self.scores(g, fr.prediction.logits);
            ref_frame.extend(std::iter::repeat(f).take(s.len()));
            ref_scores.extend(s);
            ref_boxes.extend(read_boxes(g, fr.prediction.boxes));
        }

        let mut out = Vec::with_capacity(self.stages.len());
        let mut retained = Vec::with_capacity(self.stages.len());
        for (stage, &k) in self.stages.iter().zip(&self.cfg.k_schedule) {
            let idx = top_k(&cur_scores, k.min(cur_scores.len()))?;
            cur = cur.gather(g, &idx)?;
            cur_boxes = idx.iter().map(|&i| cur_boxes[i]).collect();
            let ridx = top_k(&ref_scores, k.min(ref_scores.len()))?;
            refs = refs.gather(g, &ridx)?;
            ref_scores = ridx.iter().map(|&i| ref_scores[i]).collect();
            ref_boxes = ridx.iter().map(|&i| ref_boxes[i]).collect();
            ref_frame = ridx.iter().map(|&i| ref_frame[i]).collect();

            if let Some(qrf) = &stage.qrf {
                let roi = roi_extract(g, mems[0], &cur_boxes)?;
                cur = cur.with_embed(qrf.forward(g, cur, roi)?);
                let roi = roi_extract_frames(g, &mems, &ref_frame, &ref_boxes)?;
                refs = refs.with_embed(qrf.forward(g, refs, roi)?);
            }
            for layer in &stage.tqe {
                cur = cur.with_embed(layer.forward(g, cur, refs)?);
            }
            cur = self.decode(g, stage, cur, mems[0])?;
            let pred = self.heads.forward(g, cur.embed, cur.ref_logits)?;
            cur_scores = self.scores(g, pred.logits);
            cur_boxes = read_boxes(g, pred.boxes);
            retained.push(idx.len());
            out.push(pred);
        }
        Ok(TemporalOutput {
            frames: vec![out],
            retained,
            qfh: Vec::new(),
        })
    }

    /// All window frames at once. Each stage keeps the top-k queries of
    /// every frame; each frame's survivors attend to the whole pool and are
    /// decoded into their own memory.
    fn forward_lite<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        frames: &[FrameInput],
    ) -> Result<TemporalOutput> {
        let tw = frames.len();
        let mut cur: Vec<Queries> = frames.iter().map(|f| f.queries).collect();
        if self.cfg.frame_embed {
            for (slot, q) in cur.iter_mut().enumerate() {
                let n = q.len(g);
                let enc = axis_encoding(slot as f64, self.d);
                let data: Vec<T> = (0..n)
                    .flat_map(|_| enc.iter().map(|&v| T::lit(v)))
                    .collect();
                let e = g.constant(vec![n, self.d], data)?;
                q.pos = g.add(q.pos, e)?;
            }
        }
        let mut scores: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| self.scores(g, f.prediction.logits))
            .collect();
        let mut out: Vec<Vec<Prediction>> = vec![Vec::with_capacity(self.stages.len()); tw];
        let mut qfh = Vec::new();
        let mut retained = Vec::with_capacity(self.stages.len());
        for (j, (stage, &k)) in self.stages.iter().zip(&self.cfg.k_schedule).enumerate() {
            if j > 0 {
                let head = self.qfh[j - 1];
                for (f, q) in cur.iter().enumerate() {
                    let logits = head.forward(g, q.embed)?;
                    scores[f] = self.scores(g, logits);
                    qfh.push(QfhRecord {
                        frame: f,
                        source_stage: j - 1,
                        logits,
                    });
                }
            }
            let mut kept = 0;
            for f in 0..tw {
                let idx = top_k(&scores[f], k.min(scores[f].len()))?;
                kept = idx.len();
                cur[f] = cur[f].gather(g, &idx)?;
            }
            let pool = Queries::concat(g, &cur)?;
            for q in cur.iter_mut() {
                for layer in &stage.tqe {
                    *q = q.with_embed(layer.forward(g, *q, pool)?);
                }
            }
            for (f, q) in cur.iter_mut().enumerate() {
                *q = self.decode(g, stage, *q, frames[f].memory)?;
                out[f].push(self.heads.forward(g, q.embed, q.ref_logits)?);
            }
            retained.push(kept);
        }
        Ok(TemporalOutput {
            frames: out,
            retained,
            qfh,
        })
    }
}

/// Box rows of a `[n, 4]` node as `f64`.
pub fn read_boxes<T: Real>(g: &Graph<'_, T>, boxes: Var) -> Vec<BoxCxcywh> {
    g.value(boxes)
        .chunks(4)
        .map(|b| [b[0].f64(), b[1].f64(), b[2].f64(), b[3].f64()])
        .collect()
}

#[cfg(test)]
mod tests;
