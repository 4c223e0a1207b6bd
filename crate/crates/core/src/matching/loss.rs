use serde::{Deserialize, Serialize};

use super::boxes::{giou_parts, BoxCxcywh};
use super::hungarian::{hungarian_match, MatchAssignment};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};
use crate::spatial::Prediction;

/// Weights of the three set-prediction terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.cls, self.l1, self.giou].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::contract(format!(
                "loss weights must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            cls: self.cls * c,
            l1: self.l1 * c,
            giou: self.giou * c,
        }
    }
}

/// Sigmoid focal-loss shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Focal {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for Focal {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BoxCxcywh,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Focal loss of one logit against a binary target, and its derivative.
pub fn focal_term(x: f64, positive: bool, f: Focal) -> (f64, f64) {
    let p = sigmoid(x);
    if positive {
        let log_p = -softplus(-x);
        let m = (1.0 - p).powf(f.gamma);
        (
            -f.alpha * m * log_p,
            f.alpha * m * (f.gamma * p * log_p - (1.0 - p)),
        )
    } else {
        let log_q = -softplus(x);
        let m = p.powf(f.gamma);
        (
            -(1.0 - f.alpha) * m * log_q,
            (1.0 - f.alpha) * m * (p - f.gamma * (1.0 - p) * log_q),
        )
    }
}

/// Sum of focal terms over `logits: [n, classes]`, where row `i` is a
/// positive for `targets[i]` and negative for every other class.
pub fn focal_loss<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Var,
    targets: &[Option<usize>],
    f: Focal,
) -> Result<Var> {
    let (n, c) = match g.shape(logits) {
        [n, c] => (*n, *c),
        s => return Err(Error::dim("focal_loss", s, &[targets.len(), 0])),
    };
    if targets.len() != n || targets.iter().flatten().any(|&t| t >= c) {
        return Err(Error::contract("focal_loss targets do not fit the logits"));
    }
    let xv = g.value(logits);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n * c);
    for i in 0..n {
        for j in 0..c {
            let (l, d) = focal_term(xv[i * c + j].f64(), targets[i] == Some(j), f);
            total += l;
            grad.push(T::lit(d));
        }
    }
    Ok(g.custom(
        vec![logits],
        vec![],
        vec![T::lit(total)],
        Box::new(move |go, _, _| vec![Some(grad.iter().map(|&d| d * go[0]).collect())]),
    ))
}

/// Per-row `1 - giou(boxes[i], gts[i])` as a `[n]` node.
pub fn giou_loss<T: Real>(g: &mut Graph<'_, T>, boxes: Var, gts: &[BoxCxcywh]) -> Result<Var> {
    if g.shape(boxes) != [gts.len(), 4] {
        return Err(Error::dim("giou_loss", g.shape(boxes), &[gts.len(), 4]));
    }
    let bv = g.value(boxes);
    let mut vals = Vec::with_capacity(gts.len());
    let mut grad = Vec::with_capacity(gts.len() * 4);
    for (i, gt) in gts.iter().enumerate() {
        let b: BoxCxcywh = std::array::from_fn(|k| bv[i * 4 + k].f64());
        if !(b[2] > 0.0 && b[3] > 0.0 && gt[2] > 0.0 && gt[3] > 0.0) {
            return Err(Error::contract(format!(
                "giou_loss on degenerate box {b:?} / {gt:?}"
            )));
        }
        let (v, d) = giou_parts(b, *gt);
        vals.push(T::lit(1.0 - v));
        grad.extend(d.iter().map(|&x| T::lit(-x)));
    }
    Ok(g.custom(
        vec![boxes],
        vec![gts.len()],
        vals,
        Box::new(move |go, _, _| {
            vec![Some(
                grad.iter()
                    .enumerate()
                    .map(|(i, &d)| d * go[i / 4])
                    .collect(),
            )]
        }),
    ))
}

/// Focal-style classification matching cost for probability `p`.
pub fn class_cost(p: f64, f: Focal) -> f64 {
    let pos = f.alpha * (1.0 - p).powf(f.gamma) * -(p + 1e-8).ln();
    let neg = (1.0 - f.alpha) * p.powf(f.gamma) * -(1.0 - p + 1e-8).ln();
    pos - neg
}

/// `cost[i, j] = w.cls * cls + w.l1 * |b_i - g_j|_1 + w.giou * (1 - giou)`,
/// row-major `[n_pred, n_gt]`.
pub fn match_cost(
    logits: &[f64],
    boxes: &[f64],
    classes: usize,
    gts: &[GroundTruth],
    w: LossWeights,
    f: Focal,
) -> Result<Vec<f64>> {
    let n = boxes.len() / 4;
    if logits.len() != n * classes {
        return Err(Error::dim("match_cost", &[logits.len()], &[n, classes]));
    }
    let mut cost = Vec::with_capacity(n * gts.len());
    for i in 0..n {
        let b: BoxCxcywh = std::array::from_fn(|k| boxes[i * 4 + k]);
        for gt in gts {
            let p = sigmoid(logits[i * classes + gt.class_id]);
            let l1: f64 = (0..4).map(|k| (b[k] - gt.bbox[k]).abs()).sum();
            let gi = super::boxes::giou(b, gt.bbox)?;
            cost.push(w.cls * class_cost(p, f) + w.l1 * l1 + w.giou * (1.0 - gi));
        }
    }
    Ok(cost)
}

/// Unweighted per-stage sums, each divided by the ground-truth count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub stages: Vec<StageLoss>,
}

/// Options of [`detection_loss`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal: Focal,
}

/// Hungarian-matched set loss summed over stages. Each stage is matched
/// independently; unmatched predictions are negatives for every class.
pub fn detection_loss<T: Real>(
    g: &mut Graph<'_, T>,
    stages: &[Prediction],
    gts: &[GroundTruth],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if stages.is_empty() {
        return Err(Error::contract("detection_loss needs at least one stage"));
    }
    cfg.weights.validate()?;
    let norm = T::lit(1.0 / gts.len().max(1) as f64);
    let mut total: Option<Var> = None;
    let mut breakdown = LossBreakdown::default();
    for p in stages {
        let n = g.shape(p.logits)[0];
        let assign = stage_assignment(g, p, gts, cfg)?;
        let targets: Vec<Option<usize>> = assign
            .target_of(n)
            .iter()
            .map(|t| t.map(|j| gts[j].class_id))
            .collect();
        let cls = focal_loss(g, p.logits, &targets, cfg.focal)?;
        let cls = g.scale(cls, norm);
        let mut stage = StageLoss {
            cls: g.item(cls).f64(),
            ..Default::default()
        };
        let mut terms = vec![g.scale(cls, T::lit(cfg.weights.cls))];
        if !assign.pairs.is_empty() {
            let pidx: Vec<usize> = assign.pairs.iter().map(|&(p, _)| p).collect();
            let gboxes: Vec<BoxCxcywh> = assign.pairs.iter().map(|&(_, t)| gts[t].bbox).collect();
            let matched = g.gather_rows(p.boxes, &pidx)?;
            let target = g.constant(
                vec![gboxes.len(), 4],
                gboxes.iter().flatten().map(|&v| T::lit(v)).collect(),
            )?;
            let diff = g.sub(matched, target)?;
            let diff = g.abs(diff);
            let l1 = g.sum(diff);
            let l1 = g.scale(l1, norm);
            let gi = giou_loss(g, matched, &gboxes)?;
            let gi = g.sum(gi);
            let gi = g.scale(gi, norm);
            stage.l1 = g.item(l1).f64();
            stage.giou = g.item(gi).f64();
            terms.push(g.scale(l1, T::lit(cfg.weights.l1)));
            terms.push(g.scale(gi, T::lit(cfg.weights.giou)));
        }
        for t in terms {
            total = Some(match total {
                Some(acc) => g.add(acc, t)?,
                None => t,
            });
        }
        breakdown.stages.push(stage);
    }
    let total = total.expect("at least one stage");
    breakdown.total = g.item(total).f64();
    Ok((total, breakdown))
}

/// Hungarian assignment for one stage's current values.
pub fn stage_assignment<T: Real>(
    g: &Graph<'_, T>,
    p: &Prediction,
    gts: &[GroundTruth],
    cfg: &LossConfig,
) -> Result<MatchAssignment> {
    let (n, classes) = (g.shape(p.logits)[0], g.shape(p.logits)[1]);
    if gts.iter().any(|t| t.class_id >= classes) {
        return Err(Error::contract(
            "ground-truth class outside the head's vocabulary",
        ));
    }
    let logits: Vec<f64> = g.value(p.logits).iter().map(|v| v.f64()).collect();
    let boxes: Vec<f64> = g.value(p.boxes).iter().map(|v| v.f64()).collect();
    let cost = match_cost(&logits, &boxes, classes, gts, cfg.weights, cfg.focal)?;
    hungarian_match(&cost, n, gts.len())
}
