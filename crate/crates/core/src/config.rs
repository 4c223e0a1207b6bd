//! Run configuration as UTF-8 `key = value` lines with `#` comments and
//! comma-separated lists.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{InferenceOptions, ModelConfig};
use crate::spatial::SpatialConfig;
use crate::temporal::{TemporalConfig, Variant};
use crate::train::TrainConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "STVOD_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferenceOptions,
    /// Dataset root holding `train/` and `test/`.
    pub data: PathBuf,
}

impl RunConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            model: ModelConfig {
                spatial: SpatialConfig::default(),
                temporal: TemporalConfig::for_variant(variant),
            },
            train: TrainConfig::default(),
            infer: InferenceOptions::default(),
            data: PathBuf::from("data"),
        }
    }

    pub fn variant(&self) -> Variant {
        self.model.temporal.variant
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.infer.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.model.spatial;
        if s.d == 0 || s.heads == 0 || s.d % s.heads != 0 || s.d % 4 != 0 {
            return Err(Error::Config(format!(
                "d = {} must be a positive multiple of 4 and of heads = {}",
                s.d, s.heads
            )));
        }
        if s.points == 0 || s.queries == 0 || s.classes == 0 || s.ffn_hidden == 0 {
            return Err(Error::Config(
                "points, queries, classes and ffn_hidden must be positive".into(),
            ));
        }
        if self.infer.i_w == 0 || self.infer.ref_span == 0 {
            return Err(Error::Config("i_w and ref_span must be at least 1".into()));
        }
        self.model.temporal.validate()?;
        self.train.validate()
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (s, t, tr, inf) = (
            &self.model.spatial,
            &self.model.temporal,
            &self.train,
            &self.infer,
        );
        let list = |v: &[usize]| {
            v.iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        vec![
            ("variant", t.variant.to_string()),
            ("d", s.d.to_string()),
            ("heads", s.heads.to_string()),
            ("points", s.points.to_string()),
            ("queries", s.queries.to_string()),
            ("encoder_layers", s.encoder_layers.to_string()),
            ("decoder_layers", s.decoder_layers.to_string()),
            ("classes", s.classes.to_string()),
            ("ffn_hidden", s.ffn_hidden.to_string()),
            ("fusion", s.fusion.to_string()),
            ("stages", t.stages.to_string()),
            ("k_schedule", list(&t.k_schedule)),
            ("tdte_layers", t.tdte_layers.to_string()),
            ("tqe_layers", t.tqe_layers.to_string()),
            ("tdtd_layers", t.tdtd_layers.to_string()),
            ("n_ref", t.n_ref.to_string()),
            ("t_w", t.window.to_string()),
            ("frame_embed", t.frame_embed.to_string()),
            ("lambda_cls", tr.weights.cls.to_string()),
            ("lambda_l1", tr.weights.l1.to_string()),
            ("lambda_giou", tr.weights.giou.to_string()),
            ("focal_alpha", tr.focal.alpha.to_string()),
            ("focal_gamma", tr.focal.gamma.to_string()),
            ("lr", tr.lr.to_string()),
            ("lr_backbone", tr.lr_backbone.to_string()),
            ("weight_decay", tr.weight_decay.to_string()),
            ("clip_norm", tr.clip_norm.to_string()),
            ("epochs_spatial", tr.epochs_spatial.to_string()),
            ("epochs_temporal", tr.epochs_temporal.to_string()),
            ("max_steps_spatial", tr.max_steps_spatial.to_string()),
            ("max_steps_temporal", tr.max_steps_temporal.to_string()),
            ("batch", tr.batch.to_string()),
            ("lr_drop", tr.lr_drop.to_string()),
            ("ref_span", tr.ref_span.to_string()),
            ("visible_only_spatial", tr.visible_only_spatial.to_string()),
            ("seed", tr.seed.to_string()),
            ("data", self.data.display().to_string()),
            ("i_w", inf.i_w.to_string()),
            ("plan_mode", inf.mode.to_string()),
        ]
    }

    /// Sets one key; the error message explains what was expected.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
            v.split(',').map(|x| num(x.trim())).collect()
        }
        let (s, t, tr) = (
            &mut self.model.spatial,
            &mut self.model.temporal,
            &mut self.train,
        );
        match key {
            "variant" => {
                let v: Variant = num(value)?;
                if v != t.variant {
                    *t = TemporalConfig::for_variant(v);
                }
            }
            "d" => s.d = num(value)?,
            "heads" => s.heads = num(value)?,
            "points" => s.points = num(value)?,
            "queries" => s.queries = num(value)?,
            "encoder_layers" => s.encoder_layers = num(value)?,
            "decoder_layers" => s.decoder_layers = num(value)?,
            "classes" => s.classes = num(value)?,
            "ffn_hidden" => s.ffn_hidden = num(value)?,
            "fusion" => s.fusion = num(value)?,
            "stages" => t.stages = num(value)?,
            "k_schedule" => t.k_schedule = list(value)?,
            "tdte_layers" => t.tdte_layers = num(value)?,
            "tqe_layers" => t.tqe_layers = num(value)?,
            "tdtd_layers" => t.tdtd_layers = num(value)?,
            "n_ref" => t.n_ref = num(value)?,
            "t_w" => t.window = num(value)?,
            "frame_embed" => t.frame_embed = num(value)?,
            "lambda_cls" => tr.weights.cls = num(value)?,
            "lambda_l1" => tr.weights.l1 = num(value)?,
            "lambda_giou" => tr.weights.giou = num(value)?,
            "focal_alpha" => tr.focal.alpha = num(value)?,
            "focal_gamma" => tr.focal.gamma = num(value)?,
            "lr" => tr.lr = num(value)?,
            "lr_backbone" => tr.lr_backbone = num(value)?,
            "weight_decay" => tr.weight_decay = num(value)?,
            "clip_norm" => tr.clip_norm = num(value)?,
            "epochs_spatial" => tr.epochs_spatial = num(value)?,
            "epochs_temporal" => tr.epochs_temporal = num(value)?,
            "max_steps_spatial" => tr.max_steps_spatial = num(value)?,
            "max_steps_temporal" => tr.max_steps_temporal = num(value)?,
            "batch" => tr.batch = num(value)?,
            "lr_drop" => tr.lr_drop = num(value)?,
            "ref_span" => {
                tr.ref_span = num(value)?;
                self.infer.ref_span = tr.ref_span;
            }
            "visible_only_spatial" => tr.visible_only_spatial = num(value)?,
            "seed" => {
                let seed = num(value)?;
                self.set_seed(seed);
            }
            "data" => self.data = PathBuf::from(value),
            "i_w" => self.infer.i_w = num(value)?,
            "plan_mode" => self.infer.mode = num(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses a configuration file body. The variant line, wherever it is,
    /// is applied first so the other keys override its defaults.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                offset: start,
                msg: format!("expected `key = value`, got {body:?}"),
            })?;
            lines.push((start, k.trim(), v.trim()));
        }
        let mut cfg = Self::for_variant(Variant::TransVod);
        lines.sort_by_key(|&(_, k, _)| k != "variant");
        let mut seen = std::collections::HashSet::new();
        for (start, k, v) in lines {
            let fail = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                offset: start,
                msg,
            };
            if !seen.insert(k) {
                return Err(fail(format!("duplicate key `{k}`")));
            }
            cfg.set(k, v).map_err(|m| fail(format!("{k}: {m}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Applies `STVOD_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
            self.set_seed(seed);
        }
        Ok(())
    }
}

/// Every key with its default (for the transvod variant) and meaning.
pub const KEY_DOCS: &[(&str, &str)] = &[
    (
        "variant",
        "transvod | transvod_pp | lite; resets the temporal keys to that variant's defaults",
    ),
    ("d", "model width"),
    ("heads", "attention heads"),
    ("points", "deformable sampling points per head and level"),
    ("queries", "object queries per frame"),
    ("encoder_layers", "spatial encoder layers"),
    ("decoder_layers", "spatial decoder layers"),
    ("classes", "class count of the dataset"),
    ("ffn_hidden", "feed-forward hidden width"),
    ("fusion", "fuse the three backbone levels into one memory"),
    ("stages", "temporal stages J"),
    ("k_schedule", "per-stage top-k counts, non-increasing"),
    ("tdte_layers", "temporal deformable encoder layers"),
    ("tqe_layers", "temporal query encoder layers per stage"),
    (
        "tdtd_layers",
        "temporal deformable decoder layers per stage",
    ),
    ("n_ref", "reference frames per current frame"),
    ("t_w", "lite window size"),
    (
        "frame_embed",
        "add an in-window slot encoding to lite queries",
    ),
    ("lambda_cls", "focal classification weight"),
    ("lambda_l1", "L1 box weight"),
    ("lambda_giou", "GIoU box weight"),
    ("focal_alpha", "focal loss alpha"),
    ("focal_gamma", "focal loss gamma"),
    ("lr", "learning rate of transformers and heads"),
    ("lr_backbone", "learning rate of the backbone"),
    ("weight_decay", "decoupled weight decay"),
    ("clip_norm", "global gradient-norm clip, 0 disables"),
    ("epochs_spatial", "stage-1 epochs"),
    ("epochs_temporal", "stage-2 epochs"),
    ("max_steps_spatial", "cap on stage-1 steps, 0 for none"),
    ("max_steps_temporal", "cap on stage-2 steps, 0 for none"),
    ("batch", "samples per optimizer step"),
    (
        "lr_drop",
        "fraction of each stage after which the learning rate drops tenfold",
    ),
    (
        "ref_span",
        "reference frames come from within this many frames",
    ),
    (
        "visible_only_spatial",
        "drop occluded boxes from the single-frame loss",
    ),
    ("seed", "master seed (overridden by STVOD_SEED)"),
    ("data", "dataset root with train/ and test/"),
    ("i_w", "sequential window interval"),
    ("plan_mode", "sequential | shuffled"),
];
