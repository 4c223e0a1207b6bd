//! Detection metrics: IoU, 101-point interpolated average precision, mAP at
//! 0.5 and 0.5:0.95, and COCO-style size buckets.

use serde::{Deserialize, Serialize};

use crate::dataset::{AreaBucket, Frame};
use crate::error::{Error, Result};
use crate::matching::{iou, BoxCxcywh};
use crate::numerics::Tensor;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BoxCxcywh,
}

/// A ground-truth box; ignored boxes neither count as positives nor turn
/// the detections that hit them into false positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalGt {
    pub class_id: usize,
    pub bbox: BoxCxcywh,
    pub ignore: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalImage {
    pub detections: Vec<Detection>,
    pub gts: Vec<EvalGt>,
}

pub fn iou_matrix(preds: &[BoxCxcywh], gts: &[BoxCxcywh]) -> Tensor<f64> {
    Tensor::from_fn(vec![preds.len(), gts.len()], |i| {
        iou(preds[i / gts.len()], gts[i % gts.len()])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    /// Occluded boxes are ignored.
    Visible,
    /// Frames holding at least one occluded box; visible boxes are ignored.
    Occluded,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Subset::All),
            "visible" => Ok(Subset::Visible),
            "occluded" => Ok(Subset::Occluded),
            _ => Err(Error::Config(format!("unknown subset {s:?}"))),
        }
    }
}

/// Ground truth of one frame under a subset, or `None` when the frame is
/// not part of it.
pub fn frame_gts(frame: &Frame, subset: Subset) -> Option<Vec<EvalGt>> {
    if subset == Subset::Occluded && !frame.objects.iter().any(|o| o.occluded) {
        return None;
    }
    Some(
        frame
            .objects
            .iter()
            .map(|o| EvalGt {
                class_id: o.class_id,
                bbox: o.bbox,
                ignore: match subset {
                    Subset::All => false,
                    Subset::Visible => o.occluded,
                    Subset::Occluded => !o.occluded,
                },
            })
            .collect(),
    )
}

/// Turns per-query class logits `[n, classes]` and boxes `[n, 4]` into the
/// `max_dets` highest-scoring (query, class) pairs.
pub fn detections_from_logits(
    logits: &[f64],
    boxes: &[f64],
    classes: usize,
    max_dets: usize,
) -> Vec<Detection> {
    let mut all: Vec<Detection> = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let q = i / classes;
            Detection {
                class_id: i % classes,
                score: 1.0 / (1.0 + (-x).exp()),
                bbox: [
                    boxes[4 * q],
                    boxes[4 * q + 1],
                    boxes[4 * q + 2],
                    boxes[4 * q + 3],
                ],
            }
        })
        .collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(max_dets);
    all
}

/// Pixel-area window `[lo, hi)` of a size bucket.
fn bucket_range(b: Option<AreaBucket>) -> (f64, f64) {
    match b {
        None => (0.0, f64::INFINITY),
        Some(AreaBucket::Small) => (0.0, 32.0 * 32.0),
        Some(AreaBucket::Medium) => (32.0 * 32.0, 96.0 * 96.0),
        Some(AreaBucket::Large) => (96.0 * 96.0, f64::INFINITY),
    }
}

/// One class's view of one image.
struct ClassImage {
    /// `(score, box, outside the area range)`.
    dets: Vec<(f64, BoxCxcywh, bool)>,
    gts: Vec<(BoxCxcywh, bool)>,
}

/// Greedy matching at one threshold. Returns, per detection in descending
/// score order, `Some(true)` for a hit, `Some(false)` for a miss and `None`
/// for an ignored detection, plus the number of positives.
fn match_class(images: &[ClassImage], thr: f64) -> (Vec<Option<bool>>, usize) {
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.dets.len()).map(move |d| (i, d)))
        .collect();
    order.sort_by(|a, b| images[b.0].dets[b.1].0.total_cmp(&images[a.0].dets[a.1].0));
    let npos = images
        .iter()
        .map(|im| im.gts.iter().filter(|g| !g.1).count())
        .sum();
    let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let outcome = order
        .iter()
        .map(|&(i, d)| {
            let (_, bbox, outside) = images[i].dets[d];
            let gts = &images[i].gts;
            let mut best: Option<(usize, f64)> = None;
            for (g, &(gb, ignore)) in gts.iter().enumerate() {
                if ignore || taken[i][g] {
                    continue;
                }
                let v = iou(bbox, gb);
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[i][g] = true;
                return Some(true);
            }
            let hits_ignored = gts
                .iter()
                .any(|&(gb, ignore)| ignore && iou(bbox, gb) >= thr);
            if hits_ignored || outside {
                None
            } else {
                Some(false)
            }
        })
        .collect();
    (outcome, npos)
}

/// 101-point interpolated area under the precision-recall curve.
fn interpolated_ap(outcome: &[Option<bool>], npos: usize) -> f64 {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for o in outcome.iter().flatten() {
        if *o {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / 101.0
}

/// AP of one class: `dets[i]` are `(score, box)` pairs and `gts[i]` the boxes
/// of image `i`. `None` when there are no ground-truth boxes.
pub fn average_precision(
    dets: &[Vec<(f64, BoxCxcywh)>],
    gts: &[Vec<BoxCxcywh>],
    thr: f64,
) -> Option<f64> {
    let images: Vec<ClassImage> = dets
        .iter()
        .zip(gts)
        .map(|(d, g)| ClassImage {
            dets: d.iter().map(|&(s, b)| (s, b, false)).collect(),
            gts: g.iter().map(|&b| (b, false)).collect(),
        })
        .collect();
    class_ap(&images, thr)
}

fn class_ap(images: &[ClassImage], thr: f64) -> Option<f64> {
    let (outcome, npos) = match_class(images, thr);
    (npos > 0).then(|| interpolated_ap(&outcome, npos))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub gts: usize,
    pub detections: usize,
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP50")]
    pub map50: Option<f64>,
    #[serde(rename = "mAP50_95")]
    pub map50_95: Option<f64>,
    #[serde(rename = "mAP_S")]
    pub map_s: Option<f64>,
    #[serde(rename = "mAP_M")]
    pub map_m: Option<f64>,
    #[serde(rename = "mAP_L")]
    pub map_l: Option<f64>,
    pub per_class: Vec<ClassReport>,
    pub images: usize,
    pub detections: usize,
    pub gts: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-class AP at each threshold, restricted to an area bucket.
fn class_table(
    images: &[EvalImage],
    classes: usize,
    width: usize,
    height: usize,
    bucket: Option<AreaBucket>,
    thrs: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let (lo, hi) = bucket_range(bucket);
    let px = |b: &BoxCxcywh| b[2] * width as f64 * b[3] * height as f64;
    let out_of_range = |b: &BoxCxcywh| {
        let a = px(b);
        a < lo || a >= hi
    };
    (0..classes)
        .map(|c| {
            let per_image: Vec<ClassImage> = images
                .iter()
                .map(|im| ClassImage {
                    dets: im
                        .detections
                        .iter()
                        .filter(|d| d.class_id == c)
                        .map(|d| (d.score, d.bbox, out_of_range(&d.bbox)))
                        .collect(),
                    gts: im
                        .gts
                        .iter()
                        .filter(|g| g.class_id == c)
                        .map(|g| (g.bbox, g.ignore || out_of_range(&g.bbox)))
                        .collect(),
                })
                .collect();
            thrs.iter().map(|&t| class_ap(&per_image, t)).collect()
        })
        .collect()
}

/// Mean over classes with at least one positive of the per-class mean over
/// thresholds.
fn summarize(table: &[Option<Vec<f64>>], pick: impl Fn(&[f64]) -> f64) -> Option<f64> {
    mean(table.iter().flatten().map(|aps| pick(aps)))
}

fn mean_all(aps: &[f64]) -> f64 {
    aps.iter().sum::<f64>() / aps.len() as f64
}

pub fn evaluate(
    images: &[EvalImage],
    classes: &[String],
    width: usize,
    height: usize,
) -> Result<EvalReport> {
    for im in images {
        let bad = im
            .detections
            .iter()
            .map(|d| d.class_id)
            .chain(im.gts.iter().map(|g| g.class_id))
            .find(|&c| c >= classes.len());
        if let Some(c) = bad {
            return Err(Error::contract(format!(
                "class id {c} outside a {}-class vocabulary",
                classes.len()
            )));
        }
        if let Some(d) = im.detections.iter().find(|d| !d.score.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite detection score {}",
                d.score
            )));
        }
    }
    let thrs = coco_thresholds();
    let n = classes.len();
    let full = class_table(images, n, width, height, None, &thrs);
    let bucket = |b| {
        summarize(
            &class_table(images, n, width, height, Some(b), &thrs),
            mean_all,
        )
    };
    let per_class = full
        .iter()
        .enumerate()
        .map(|(c, aps)| ClassReport {
            class_id: c,
            name: classes[c].clone(),
            gts: images
                .iter()
                .flat_map(|im| &im.gts)
                .filter(|g| g.class_id == c && !g.ignore)
                .count(),
            detections: images
                .iter()
                .flat_map(|im| &im.detections)
                .filter(|d| d.class_id == c)
                .count(),
            ap50: aps.as_ref().map(|a| a[0]),
            ap50_95: aps.as_ref().map(|a| mean_all(a)),
        })
        .collect();
    Ok(EvalReport {
        map50: summarize(&full, |a| a[0]),
        map50_95: summarize(&full, mean_all),
        map_s: bucket(AreaBucket::Small),
        map_m: bucket(AreaBucket::Medium),
        map_l: bucket(AreaBucket::Large),
        per_class,
        images: images.len(),
        detections: images.iter().map(|im| im.detections.len()).sum(),
        gts: images
            .iter()
            .flat_map(|im| &im.gts)
            .filter(|g| !g.ignore)
            .count(),
    })
}

#[cfg(test)]
mod tests;
