//! The full detector (spatial plus temporal), cached spatial outputs and
//! clip-level inference for every variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Clip;
use crate::error::{Error, Result};
use crate::eval::{
    detections_from_logits, evaluate, frame_gts, Detection, EvalImage, EvalReport, Subset,
};
use crate::numerics::{Graph, Init, ParamStore, Real, Tensor, Var};
use crate::schedule::{
    bilateral_sample_within, measure_fps, plan_video, FpsReport, PlanMode, WindowPlan,
};
use crate::spatial::{Prediction, Queries, SpatialConfig, SpatialDetector, SpatialOutput};
use crate::temporal::{FrameInput, TemporalConfig, TemporalModel, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spatial: SpatialConfig,
    pub temporal: TemporalConfig,
}

impl ModelConfig {
    /// Clamps every top-k count to what the model can supply.
    pub fn clamped(mut self) -> Self {
        let q = self.spatial.queries;
        let pool = match self.temporal.variant {
            Variant::TransVod => q * self.temporal.n_ref,
            _ => q,
        };
        for k in &mut self.temporal.k_schedule {
            *k = (*k).min(pool);
        }
        self
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub spatial: SpatialDetector,
    pub temporal: TemporalModel,
}

impl Model {
    /// Builds the model and its parameters from `seed`. Spatial parameters
    /// are drawn before temporal ones, so the spatial weights of a seed do not
    /// depend on the variant.
    pub fn new<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let cfg = cfg.clone().clamped();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spatial = {
            let mut init = Init::new(&mut store, &mut rng);
            SpatialDetector::new(&mut init, "spatial", &cfg.spatial)?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e3d_0000_0000_0001);
        let temporal = {
            let mut init = Init::new(&mut store, &mut rng);
            TemporalModel::new(&mut init, "temporal", &cfg.spatial, &cfg.temporal)?
        };
        temporal.sync_heads(&mut store, &spatial.heads)?;
        Ok((
            Self {
                cfg,
                spatial,
                temporal,
            },
            store,
        ))
    }

    pub fn classes(&self) -> usize {
        self.cfg.spatial.classes
    }

    pub fn image_var<T: Real>(&self, g: &mut Graph<'_, T>, clip: &Clip, t: usize) -> Result<Var> {
        let img = clip.image_tensor::<T>(t);
        g.constant(img.shape().to_vec(), img.into_data())
    }

    pub fn spatial_forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        clip: &Clip,
        t: usize,
    ) -> Result<SpatialOutput> {
        let x = self.image_var(g, clip, t)?;
        self.spatial.forward(g, x)
    }
}

/// Spatial outputs of one frame, detached from any graph.
#[derive(Debug, Clone)]
pub struct CachedFrame<T: Real> {
    pub memory: Tensor<T>,
    pub pos: Tensor<T>,
    pub embed: Tensor<T>,
    pub query_pos: Tensor<T>,
    pub ref_logits: Tensor<T>,
    pub logits: Tensor<T>,
    pub boxes: Tensor<T>,
}

impl<T: Real> CachedFrame<T> {
    pub fn from_output(g: &Graph<'_, T>, s: &SpatialOutput) -> Self {
        let p = s
            .predictions
            .last()
            .expect("spatial output has a prediction");
        Self {
            memory: g.tensor(s.memory),
            pos: g.tensor(s.pos),
            embed: g.tensor(s.queries.embed),
            query_pos: g.tensor(s.queries.pos),
            ref_logits: g.tensor(s.queries.ref_logits),
            logits: g.tensor(p.logits),
            boxes: g.tensor(p.boxes),
        }
    }

    /// Re-enters the cached values as graph constants.
    pub fn input(&self, g: &mut Graph<'_, T>) -> Result<FrameInput> {
        let mut c = |t: &Tensor<T>| g.constant(t.shape().to_vec(), t.data().to_vec());
        Ok(FrameInput {
            memory: c(&self.memory)?,
            pos: c(&self.pos)?,
            queries: Queries {
                embed: c(&self.embed)?,
                pos: c(&self.query_pos)?,
                ref_logits: c(&self.ref_logits)?,
            },
            prediction: Prediction {
                logits: c(&self.logits)?,
                boxes: c(&self.boxes)?,
            },
        })
    }

    pub fn output(&self) -> FrameOutput {
        FrameOutput {
            logits: self.logits.data().iter().map(|v| v.f64()).collect(),
            boxes: self.boxes.data().iter().map(|v| v.f64()).collect(),
        }
    }
}

/// Runs the spatial detector on every frame of a clip.
pub fn cache_clip<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    clip: &Clip,
) -> Result<Vec<CachedFrame<T>>> {
    (0..clip.len())
        .map(|t| {
            let mut g = Graph::inference(store);
            let s = model.spatial_forward(&mut g, clip, t)?;
            Ok(CachedFrame::from_output(&g, &s))
        })
        .collect()
}

/// Final class logits `[n, classes]` and boxes `[n, 4]` for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutput {
    pub logits: Vec<f64>,
    pub boxes: Vec<f64>,
}

impl FrameOutput {
    pub fn read<T: Real>(g: &Graph<'_, T>, p: &Prediction) -> Self {
        Self {
            logits: g.value(p.logits).iter().map(|v| v.f64()).collect(),
            boxes: g.value(p.boxes).iter().map(|v| v.f64()).collect(),
        }
    }

    pub fn detections(&self, classes: usize, max_dets: usize) -> Vec<Detection> {
        detections_from_logits(&self.logits, &self.boxes, classes, max_dets)
    }
}

/// How reference frames and windows are chosen at inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    /// Bilateral sampling half-span for reference frames.
    pub ref_span: usize,
    pub i_w: usize,
    pub mode: PlanMode,
    pub seed: u64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            ref_span: 4,
            i_w: 1,
            mode: PlanMode::Shuffled,
            seed: 0,
        }
    }
}

/// Reproducible per-frame seed for reference sampling.
pub fn frame_seed(seed: u64, clip_id: &str, t: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in clip_id.bytes().chain(t.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Reference frames of frame `t` for the two-frame-set variants.
pub fn reference_frames(
    n: usize,
    t: usize,
    n_ref: usize,
    span: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    bilateral_sample_within(t, n, n_ref, Some(span), seed)
}

/// Temporal predictions for a set of cached frames (current first, or a
/// lite window in slot order); one output per predicted frame.
pub fn temporal_outputs<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    frames: &[&CachedFrame<T>],
) -> Result<Vec<FrameOutput>> {
    let mut g = Graph::inference(store);
    let inputs = frames
        .iter()
        .map(|f| f.input(&mut g))
        .collect::<Result<Vec<_>>>()?;
    let out = model.temporal.forward(&mut g, &inputs)?;
    Ok((0..out.frames.len())
        .map(|f| FrameOutput::read(&g, &out.final_prediction(f)))
        .collect())
}

/// Window plan used by lite inference on an `n`-frame clip.
pub fn lite_plan(
    model: &Model,
    n: usize,
    opts: &InferenceOptions,
    clip_seed: u64,
) -> Result<WindowPlan> {
    plan_video(n, model.cfg.temporal.window, opts.i_w, opts.mode, clip_seed)
}

/// Per-frame outputs for a whole clip. `temporal = false` gives the
/// single-frame baseline from the same spatial weights.
pub fn infer_clip<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    clip: &Clip,
    cache: &[CachedFrame<T>],
    temporal: bool,
    opts: &InferenceOptions,
) -> Result<Vec<FrameOutput>> {
    if cache.len() != clip.len() {
        return Err(Error::contract(format!(
            "{} cached frames for a {}-frame clip",
            cache.len(),
            clip.len()
        )));
    }
    if !temporal {
        return Ok(cache.iter().map(CachedFrame::output).collect());
    }
    let n = clip.len();
    let tc = &model.cfg.temporal;
    match tc.variant {
        Variant::TransVod | Variant::TransVodPp => (0..n)
            .map(|t| {
                let refs = reference_frames(
                    n,
                    t,
                    tc.n_ref,
                    opts.ref_span,
                    frame_seed(opts.seed, &clip.clip_id, t),
                )?;
                let mut frames = vec![&cache[t]];
                frames.extend(refs.iter().map(|&r| &cache[r]));
                Ok(temporal_outputs(model, store, &frames)?.remove(0))
            })
            .collect(),
        Variant::Lite => {
            let plan = lite_plan(
                model,
                n,
                opts,
                frame_seed(opts.seed, &clip.clip_id, usize::MAX),
            )?;
            let per_window = plan
                .windows
                .iter()
                .map(|w| {
                    let frames: Vec<&CachedFrame<T>> =
                        w.iter().map(|&x| &cache[plan.frame_of(x)]).collect();
                    temporal_outputs(model, store, &frames)
                })
                .collect::<Result<Vec<_>>>()?;
            crate::schedule::reassemble(&plan, &per_window)
        }
    }
}

/// Detections kept per frame for evaluation.
pub const MAX_DETECTIONS: usize = 100;

/// Evaluates the model on `clips`, either through the temporal stack or as
/// the single-frame baseline.
pub fn evaluate_clips<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    clips: &[Clip],
    temporal: bool,
    subset: Subset,
    opts: &InferenceOptions,
) -> Result<EvalReport> {
    let caches = clips
        .iter()
        .map(|c| cache_clip(model, store, c))
        .collect::<Result<Vec<_>>>()?;
    evaluate_cached(model, store, clips, &caches, temporal, subset, opts)
}

/// [`evaluate_clips`] on precomputed spatial outputs.
pub fn evaluate_cached<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    clips: &[Clip],
    caches: &[Vec<CachedFrame<T>>],
    temporal: bool,
    subset: Subset,
    opts: &InferenceOptions,
) -> Result<EvalReport> {
    let first = clips
        .first()
        .ok_or_else(|| Error::contract("no clips to evaluate"))?;
    let mut images = Vec::new();
    for (clip, cache) in clips.iter().zip(caches) {
        let outs = infer_clip(model, store, clip, cache, temporal, opts)?;
        for (frame, out) in clip.frames.iter().zip(&outs) {
            if let Some(gts) = frame_gts(frame, subset) {
                images.push(EvalImage {
                    detections: out.detections(model.classes(), MAX_DETECTIONS),
                    gts,
                });
            }
        }
    }
    evaluate(&images, &first.classes, first.width, first.height)
}

/// Detections of one frame, as written by `infer` and read by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameDetections {
    pub index: usize,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipDetections {
    pub clip_id: String,
    pub frames: Vec<FrameDetections>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub clips: Vec<ClipDetections>,
}

/// Per-frame detections for every clip.
pub fn predict_clips<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    clips: &[Clip],
    temporal: bool,
    opts: &InferenceOptions,
) -> Result<PredictionFile> {
    let mut out = Vec::with_capacity(clips.len());
    for clip in clips {
        let cache = cache_clip(model, store, clip)?;
        let outs = infer_clip(model, store, clip, &cache, temporal, opts)?;
        out.push(ClipDetections {
            clip_id: clip.clip_id.clone(),
            frames: clip
                .frames
                .iter()
                .zip(&outs)
                .map(|(f, o)| FrameDetections {
                    index: f.index,
                    detections: o.detections(model.classes(), MAX_DETECTIONS),
                })
                .collect(),
        });
    }
    Ok(PredictionFile { clips: out })
}

/// Scores a prediction file against annotated clips. Every annotated frame
/// must have an entry; frames of clips not in `clips` are an error.
pub fn evaluate_predictions(
    pred: &PredictionFile,
    clips: &[Clip],
    subset: Subset,
) -> Result<EvalReport> {
    let first = clips
        .first()
        .ok_or_else(|| Error::contract("no clips to evaluate"))?;
    let mut by_clip = std::collections::HashMap::new();
    for c in &pred.clips {
        if by_clip.insert(c.clip_id.as_str(), c).is_some() {
            return Err(Error::contract(format!(
                "clip {} appears twice in the predictions",
                c.clip_id
            )));
        }
    }
    let mut images = Vec::new();
    for clip in clips {
        let p = by_clip
            .remove(clip.clip_id.as_str())
            .ok_or_else(|| Error::contract(format!("no predictions for clip {}", clip.clip_id)))?;
        let frames: std::collections::HashMap<usize, &FrameDetections> =
            p.frames.iter().map(|f| (f.index, f)).collect();
        for frame in &clip.frames {
            let dets = frames.get(&frame.index).ok_or_else(|| {
                Error::contract(format!(
                    "no predictions for frame {} of {}",
                    frame.index, clip.clip_id
                ))
            })?;
            if let Some(gts) = frame_gts(frame, subset) {
                images.push(EvalImage {
                    detections: dets.detections.clone(),
                    gts,
                });
            }
        }
    }
    if let Some(extra) = by_clip.keys().next() {
        return Err(Error::contract(format!(
            "predictions for unknown clip {extra}"
        )));
    }
    evaluate(&images, &first.classes, first.width, first.height)
}

/// Lite inference of one window straight from pixels: spatial pass of each
/// frame followed by one temporal pass, all in a single graph.
pub fn lite_window<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    clip: &Clip,
    frames: &[usize],
) -> Result<Vec<FrameOutput>> {
    if model.cfg.temporal.variant != Variant::Lite {
        return Err(Error::contract("window inference needs the lite variant"));
    }
    let mut g = Graph::inference(store);
    let inputs = frames
        .iter()
        .map(|&t| Ok(FrameInput::from(&model.spatial_forward(&mut g, clip, t)?)))
        .collect::<Result<Vec<_>>>()?;
    let out = model.temporal.forward(&mut g, &inputs)?;
    Ok((0..out.frames.len())
        .map(|f| FrameOutput::read(&g, &out.final_prediction(f)))
        .collect())
}

/// Lite throughput at each window size on `clip`, with the model's weights
/// reused across sizes (no lite parameter depends on `T_w`).
pub fn bench_lite<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    clip: &Clip,
    windows: &[usize],
    opts: &InferenceOptions,
    warmup: usize,
    repeats: usize,
) -> Result<Vec<FpsReport>> {
    let mut rows = Vec::with_capacity(windows.len());
    for &t_w in windows {
        let mut m = model.clone();
        m.cfg.temporal.window = t_w;
        m.temporal.cfg.window = t_w;
        let plan = lite_plan(
            &m,
            clip.len(),
            opts,
            frame_seed(opts.seed, &clip.clip_id, usize::MAX),
        )?;
        let report = measure_fps(&plan, warmup, repeats, |w| {
            let frames: Vec<usize> = w.iter().map(|&x| plan.frame_of(x)).collect();
            lite_window(&m, store, clip, &frames).map(|_| ())
        })?;
        rows.push(report);
    }
    Ok(rows)
}
