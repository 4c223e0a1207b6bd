//! Two-stage training: the spatial detector alone on single frames, then
//! the temporal stack on cached spatial outputs with the spatial weights
//! frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Clip;
use crate::error::{Error, Result};
use crate::matching::{
    detection_loss, focal_loss, stage_assignment, Focal, GroundTruth, LossConfig, LossWeights,
};
use crate::model::{cache_clip, reference_frames, CachedFrame, Model, ModelConfig};
use crate::numerics::{AdamW, AdamWConfig, Graph, ParamStore, Real, Var};
use crate::schedule::{plan_video, PlanMode};
use crate::temporal::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate of the transformer parts and heads.
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables.
    pub clip_norm: f64,
    pub epochs_spatial: usize,
    pub epochs_temporal: usize,
    /// Optional caps on optimizer steps per stage; `0` means no cap.
    pub max_steps_spatial: usize,
    pub max_steps_temporal: usize,
    /// Samples per optimizer step (frames in stage 1, temporal calls in stage 2).
    pub batch: usize,
    /// Fraction of each stage after which the learning rate drops tenfold.
    pub lr_drop: f64,
    /// Reference frames are drawn within this many frames of the current one.
    pub ref_span: usize,
    /// Leave occluded boxes out of the single-frame loss.
    pub visible_only_spatial: bool,
    pub weights: LossWeights,
    pub focal: Focal,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_backbone: 1e-3,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            epochs_spatial: 7,
            epochs_temporal: 7,
            max_steps_spatial: 0,
            max_steps_temporal: 0,
            batch: 4,
            lr_drop: 0.8,
            ref_span: 4,
            visible_only_spatial: true,
            weights: LossWeights::default(),
            focal: Focal::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0
            && self.lr_backbone >= 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0)
        {
            return bad("learning rates must be positive and decay/clip non-negative");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lr_drop) {
            return bad("lr_drop must lie in [0, 1]");
        }
        if self.ref_span == 0 {
            return bad("ref_span must be at least 1");
        }
        self.weights.validate()
    }

    fn loss(&self) -> LossConfig {
        LossConfig {
            weights: self.weights,
            focal: self.focal,
        }
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..AdamWConfig::default()
        }
    }
}

/// One optimizer step's outcome, passed to progress callbacks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    /// 1 for the spatial stage, 2 for the temporal stage.
    pub stage: u8,
    pub step: usize,
    pub total_steps: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub spatial_losses: Vec<f64>,
    pub temporal_losses: Vec<f64>,
    /// SHA-256 of the spatial parameters when stage 2 starts and ends.
    pub spatial_hash_start: String,
    pub spatial_hash_end: String,
}

/// SHA-256 over the names and little-endian bytes of every parameter whose
/// name starts with `prefix`.
pub fn params_hash<T: Real>(store: &ParamStore<T>, prefix: &str) -> String {
    let mut h = Sha256::new();
    for (_, name, t) in store.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.f64().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Copies every parameter under `prefix` from `src` into `dst` by name.
pub fn transplant<T: Real>(
    dst: &mut ParamStore<T>,
    src: &ParamStore<T>,
    prefix: &str,
) -> Result<()> {
    for (_, name, t) in src.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
        let id = dst.id(name).ok_or_else(|| {
            Error::contract(format!("parameter {name} missing from the target model"))
        })?;
        let d = dst.get_mut(id);
        if d.shape() != t.shape() {
            return Err(Error::dim("transplant", d.shape(), t.shape()));
        }
        d.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

fn ground_truth(clip: &Clip, t: usize, visible_only: bool) -> Vec<GroundTruth> {
    clip.frames[t]
        .objects
        .iter()
        .filter(|o| !(visible_only && o.occluded))
        .map(|o| GroundTruth {
            class_id: o.class_id,
            bbox: o.bbox,
        })
        .collect()
}

fn lr_factor(step: usize, total: usize, drop: f64) -> f64 {
    if (step as f64) >= drop * total as f64 {
        0.1
    } else {
        1.0
    }
}

fn backward_into<T: Real>(
    g: Graph<'_, T>,
    loss: Var,
) -> Result<Vec<(crate::numerics::ParamId, Vec<T>)>> {
    let grads = g.backward(loss)?;
    Ok(g.param_grads(&grads))
}

fn stage_steps(epochs: usize, per_epoch: usize, cap: usize) -> usize {
    let n = epochs * per_epoch;
    if cap > 0 {
        n.min(cap)
    } else {
        n
    }
}

/// Stage 1: single-frame set loss over every decoder layer. Returns the
/// loss of each optimizer step.
pub fn train_spatial<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    clips: &[Clip],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let frames: Vec<(usize, usize)> = clips
        .iter()
        .enumerate()
        .flat_map(|(c, clip)| (0..clip.len()).map(move |t| (c, t)))
        .collect();
    if frames.is_empty() {
        return Err(Error::contract("no training frames"));
    }
    store.set_trainable("spatial.", true);
    store.set_trainable("temporal.", false);
    let per_epoch = frames.len().div_ceil(cfg.batch);
    let total = stage_steps(cfg.epochs_spatial, per_epoch, cfg.max_steps_spatial);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5be0_cd19_137e_2179);
    let mut opt = AdamW::new(store, cfg.optimizer());
    let loss_cfg = cfg.loss();
    let mut order = Vec::new();
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let mut step_loss = 0.0;
        for _ in 0..cfg.batch {
            if order.is_empty() {
                order = frames.clone();
                order.shuffle(&mut rng);
            }
            let (c, t) = order.pop().expect("refilled above");
            let gts = ground_truth(&clips[c], t, cfg.visible_only_spatial);
            let mut g = Graph::with_params(&*store);
            let out = model.spatial_forward(&mut g, &clips[c], t)?;
            let (loss, parts) = detection_loss(&mut g, &out.predictions, &gts, &loss_cfg)?;
            let loss = g.scale(loss, T::lit(1.0 / cfg.batch as f64));
            step_loss += parts.total / cfg.batch as f64;
            let grads = backward_into(g, loss)?;
            store.accumulate(grads)?;
        }
        let f = lr_factor(step, total, cfg.lr_drop);
        let bb = cfg.lr_backbone / cfg.lr;
        opt.step(store, |name| {
            if name.starts_with("spatial.backbone") {
                f * bb
            } else {
                f
            }
        });
        losses.push(step_loss);
        on_step(&StepLog {
            stage: 1,
            step: step + 1,
            total_steps: total,
            loss: step_loss,
        });
    }
    Ok(losses)
}

/// Loss of one temporal forward pass on cached frames. `targets[f]` are the
/// ground truths of predicted frame `f`.
pub fn temporal_loss<T: Real>(
    model: &Model,
    g: &mut Graph<'_, T>,
    frames: &[&CachedFrame<T>],
    targets: &[Vec<GroundTruth>],
    cfg: &LossConfig,
) -> Result<(Var, f64)> {
    let inputs = frames
        .iter()
        .map(|f| f.input(g))
        .collect::<Result<Vec<_>>>()?;
    let out = model.temporal.forward(g, &inputs)?;
    if out.frames.len() != targets.len() {
        return Err(Error::contract(
            "one target set per predicted frame is required",
        ));
    }
    let norm = T::lit(1.0 / targets.len() as f64);
    let mut total: Option<Var> = None;
    let mut add = |g: &mut Graph<'_, T>, v: Var| -> Result<()> {
        total = Some(match total {
            Some(a) => g.add(a, v)?,
            None => v,
        });
        Ok(())
    };
    for (f, gts) in targets.iter().enumerate() {
        let (l, _) = detection_loss(g, &out.frames[f], gts, cfg)?;
        add(g, l)?;
    }
    for rec in &out.qfh {
        let gts = &targets[rec.frame];
        let src = &out.frames[rec.frame][rec.source_stage];
        let n = g.shape(src.logits)[0];
        let assign = stage_assignment(g, src, gts, cfg)?;
        let cls: Vec<Option<usize>> = assign
            .target_of(n)
            .iter()
            .map(|t| t.map(|j| gts[j].class_id))
            .collect();
        let l = focal_loss(g, rec.logits, &cls, cfg.focal)?;
        let l = g.scale(l, T::lit(cfg.weights.cls / gts.len().max(1) as f64));
        add(g, l)?;
    }
    let total = total.expect("at least one predicted frame");
    let total = g.scale(total, norm);
    let value = g.item(total).f64();
    Ok((total, value))
}

/// One stage-2 training sample: frame indices into a clip, current first
/// (or a lite window in slot order), and the frames that get predictions.
#[derive(Debug, Clone)]
struct Sample {
    clip: usize,
    frames: Vec<usize>,
    predicted: Vec<usize>,
}

fn epoch_samples(
    model: &Model,
    clips: &[Clip],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    let tc = &model.cfg.temporal;
    let mut out = Vec::new();
    for (c, clip) in clips.iter().enumerate() {
        let n = clip.len();
        match tc.variant {
            Variant::TransVod | Variant::TransVodPp => {
                for t in 0..n {
                    let mut frames = vec![t];
                    frames.extend(reference_frames(n, t, tc.n_ref, cfg.ref_span, rng.gen())?);
                    out.push(Sample {
                        clip: c,
                        frames,
                        predicted: vec![t],
                    });
                }
            }
            Variant::Lite => {
                let plan = plan_video(n, tc.window, 1, PlanMode::Shuffled, rng.gen())?;
                for w in &plan.windows {
                    let frames: Vec<usize> = w.iter().map(|&x| plan.frame_of(x)).collect();
                    out.push(Sample {
                        clip: c,
                        predicted: frames.clone(),
                        frames,
                    });
                }
            }
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Stage 2: freezes the spatial detector, caches its outputs on every
/// training frame and trains the temporal stack.
pub fn train_temporal<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    clips: &[Clip],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    store.set_trainable("spatial.", false);
    store.set_trainable("temporal.", true);
    model.temporal.sync_heads(store, &model.spatial.heads)?;
    let cache = clips
        .iter()
        .map(|c| cache_clip(model, store, c))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1f83_d9ab_fb41_bd6b);
    let per_epoch = epoch_samples(model, clips, cfg, &mut rng.clone())?
        .len()
        .div_ceil(cfg.batch);
    let total = stage_steps(cfg.epochs_temporal, per_epoch, cfg.max_steps_temporal);
    let mut opt = AdamW::new(store, cfg.optimizer());
    let loss_cfg = cfg.loss();
    let mut queue: Vec<Sample> = Vec::new();
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let mut value = 0.0;
        for _ in 0..cfg.batch {
            if queue.is_empty() {
                queue = epoch_samples(model, clips, cfg, &mut rng)?;
                queue.reverse();
            }
            let s = queue.pop().expect("refilled above");
            let frames: Vec<&CachedFrame<T>> =
                s.frames.iter().map(|&t| &cache[s.clip][t]).collect();
            let targets: Vec<Vec<GroundTruth>> = s
                .predicted
                .iter()
                .map(|&t| ground_truth(&clips[s.clip], t, false))
                .collect();
            let mut g = Graph::with_params(&*store);
            let (loss, v) = temporal_loss(model, &mut g, &frames, &targets, &loss_cfg)?;
            let loss = g.scale(loss, T::lit(1.0 / cfg.batch as f64));
            value += v / cfg.batch as f64;
            let grads = backward_into(g, loss)?;
            store.accumulate(grads)?;
        }
        let f = lr_factor(step, total, cfg.lr_drop);
        opt.step(store, |_| f);
        losses.push(value);
        on_step(&StepLog {
            stage: 2,
            step: step + 1,
            total_steps: total,
            loss: value,
        });
    }
    Ok(losses)
}

/// Builds a model from `seed`, then runs both stages.
pub fn train_two_stage(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    clips: &[Clip],
    mut on_step: impl FnMut(&StepLog),
) -> Result<(Model, ParamStore<f32>, TrainReport)> {
    let (model, mut store) = Model::new::<f32>(model_cfg, cfg.seed)?;
    let spatial_losses = train_spatial(&model, &mut store, clips, cfg, &mut on_step)?;
    let spatial_hash_start = params_hash(&store, "spatial.");
    let temporal_losses = train_temporal(&model, &mut store, clips, cfg, &mut on_step)?;
    let spatial_hash_end = params_hash(&store, "spatial.");
    Ok((
        model,
        store,
        TrainReport {
            spatial_losses,
            temporal_losses,
            spatial_hash_start,
            spatial_hash_end,
        },
    ))
}
