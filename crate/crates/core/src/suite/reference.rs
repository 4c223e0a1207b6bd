//! Deliberately naive scalar re-implementations used as oracles. Nothing
//! here shares code with the production paths it checks.

use crate::eval::{Detection, EvalImage};
use crate::matching::BoxCxcywh;

/// Minimum over all injections of ground truths into predictions, by
/// exhaustive recursion. `cost` is `[n_pred, n_gt]` row-major.
pub fn assignment_min(cost: &[f64], n_pred: usize, n_gt: usize) -> f64 {
    fn rec(cost: &[f64], n_pred: usize, n_gt: usize, t: usize, used: &mut [bool]) -> f64 {
        if t == n_gt {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for p in 0..n_pred {
            if !used[p] {
                used[p] = true;
                best = best.min(cost[p * n_gt + t] + rec(cost, n_pred, n_gt, t + 1, used));
                used[p] = false;
            }
        }
        best
    }
    rec(cost, n_pred, n_gt, 0, &mut vec![false; n_pred])
}

/// Align-corners bilinear read of an `[h, w, c]` map with zero padding.
pub fn bilinear(map: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64) -> Vec<f64> {
    let px = x * (w - 1) as f64;
    let py = y * (h - 1) as f64;
    let (x0, y0) = (px.floor(), py.floor());
    let mut out = vec![0.0; c];
    for (dy, dx) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
        let (xi, yi) = (x0 + dx, y0 + dy);
        let wt = (1.0 - (px - xi).abs()) * (1.0 - (py - yi).abs());
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            continue;
        }
        let base = (yi as usize * w + xi as usize) * c;
        for ch in 0..c {
            out[ch] += wt * map[base + ch];
        }
    }
    out
}

/// Row vector times a `[din, dout]` weight plus bias.
pub fn affine(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let dout = bias.len();
    (0..dout)
        .map(|j| {
            bias[j]
                + x.iter()
                    .enumerate()
                    .map(|(i, v)| v * weight[i * dout + j])
                    .sum::<f64>()
        })
        .collect()
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    if a1 <= b0 || b1 <= a0 {
        0.0
    } else {
        a1.min(b1) - a0.max(b0)
    }
}

pub fn iou(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    let ix = overlap(
        a[0] - a[2] / 2.0,
        a[0] + a[2] / 2.0,
        b[0] - b[2] / 2.0,
        b[0] + b[2] / 2.0,
    );
    let iy = overlap(
        a[1] - a[3] / 2.0,
        a[1] + a[3] / 2.0,
        b[1] - b[3] / 2.0,
        b[1] + b[3] / 2.0,
    );
    let i = ix * iy;
    i / (a[2] * a[3] + b[2] * b[3] - i)
}

/// AP of one class at one threshold; `lo..hi` is the pixel-area range.
fn ap(images: &[EvalImage], class: usize, thr: f64, lo: f64, hi: f64, px: f64) -> Option<f64> {
    let inside = |b: &BoxCxcywh| {
        let a = b[2] * b[3] * px;
        a >= lo && a < hi
    };
    let mut npos = 0;
    for im in images {
        for g in &im.gts {
            if g.class_id == class && !g.ignore && inside(&g.bbox) {
                npos += 1;
            }
        }
    }
    if npos == 0 {
        return None;
    }
    // Repeated selection of the highest remaining score.
    let mut pool: Vec<(usize, Detection)> = Vec::new();
    for (i, im) in images.iter().enumerate() {
        for d in &im.detections {
            if d.class_id == class {
                pool.push((i, *d));
            }
        }
    }
    let mut used: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    while !pool.is_empty() {
        let mut k = 0;
        for j in 1..pool.len() {
            if pool[j].1.score > pool[k].1.score {
                k = j;
            }
        }
        let (i, d) = pool.remove(k);
        let mut best = None;
        let mut best_iou = -1.0;
        let mut ignored_hit = false;
        for (gi, g) in images[i].gts.iter().enumerate() {
            if g.class_id != class {
                continue;
            }
            let v = iou(d.bbox, g.bbox);
            let counts = !g.ignore && inside(&g.bbox);
            if counts && !used[i][gi] && v >= thr && v > best_iou {
                best = Some(gi);
                best_iou = v;
            }
            if !counts && v >= thr {
                ignored_hit = true;
            }
        }
        match best {
            Some(gi) => {
                used[i][gi] = true;
                tp += 1.0;
            }
            None if ignored_hit || !inside(&d.bbox) => continue,
            None => fp += 1.0,
        }
        points.push((tp / npos as f64, tp / (tp + fp)));
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let mut p: f64 = 0.0;
        for &(rec, prec) in &points {
            if rec >= r {
                p = p.max(prec);
            }
        }
        sum += p;
    }
    Some(sum / 101.0)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// `[mAP50, mAP50_95, S, M, L]` for images of `px` pixels.
pub fn map_metrics(images: &[EvalImage], classes: usize, px: f64) -> [Option<f64>; 5] {
    let thrs: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let over = |lo: f64, hi: f64, only50: bool| {
        let mut per_class = Vec::new();
        for c in 0..classes {
            let aps: Vec<Option<f64>> =
                thrs.iter().map(|&t| ap(images, c, t, lo, hi, px)).collect();
            if aps[0].is_some() {
                let v: Vec<f64> = aps.into_iter().flatten().collect();
                per_class.push(if only50 { v[0] } else { mean(&v).unwrap() });
            }
        }
        mean(&per_class)
    };
    let inf = f64::INFINITY;
    [
        over(0.0, inf, true),
        over(0.0, inf, false),
        over(0.0, 1024.0, false),
        over(1024.0, 9216.0, false),
        over(9216.0, inf, false),
    ]
}
