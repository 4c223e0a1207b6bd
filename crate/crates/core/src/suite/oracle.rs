//! Randomized comparisons of production code against the scalar references
//! and structural invariants: assignment optimality, detection metrics,
//! attention normalization, zero-offset collapse and window planning.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::reference;
use crate::attention::{DeformableAttention, MultiHeadAttention, ReferencePoints};
use crate::error::Result;
use crate::eval::{average_precision, evaluate, Detection, EvalGt, EvalImage, EvalReport};
use crate::matching::hungarian_match;
use crate::numerics::{Graph, Init, ParamStore, Var};
use crate::schedule::{plan_video, reassemble, PlanMode};

#[derive(Debug, Clone, Serialize)]
pub struct OracleRow {
    pub name: String,
    pub cases: usize,
    /// Largest deviation seen (0 for purely structural checks).
    pub worst: f64,
    pub tolerance: f64,
    /// Cases that violated the check.
    pub failures: usize,
    pub pass: bool,
}

impl OracleRow {
    fn new(name: &str, cases: usize, worst: f64, tolerance: f64, failures: usize) -> Self {
        Self {
            name: name.to_string(),
            cases,
            worst,
            tolerance,
            failures,
            pass: failures == 0 && worst <= tolerance,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub rows: Vec<OracleRow>,
    pub seconds: f64,
    pub pass: bool,
}

/// Assignment cost against exhaustive search on `cases` matrices with
/// `n_gt <= n_pred <= 6`. Every third case uses small integer costs so ties
/// are common; only the cost is compared, never the assignment.
pub fn hungarian_oracle(cases: usize, seed: u64) -> Result<OracleRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut failures) = (0.0f64, 0);
    for case in 0..cases {
        let n_gt = rng.gen_range(1..=6);
        let n_pred = if case % 2 == 0 {
            n_gt
        } else {
            rng.gen_range(n_gt..=6)
        };
        let cost: Vec<f64> = (0..n_pred * n_gt)
            .map(|_| {
                if case % 3 == 0 {
                    rng.gen_range(0..4) as f64
                } else {
                    rng.gen_range(-5.0..5.0)
                }
            })
            .collect();
        let m = hungarian_match(&cost, n_pred, n_gt)?;
        let mut used = vec![false; n_pred];
        let mut covered = vec![false; n_gt];
        let mut valid = m.pairs.len() == n_gt;
        let mut total = 0.0;
        for &(p, t) in &m.pairs {
            valid &= p < n_pred && t < n_gt && !used[p] && !covered[t];
            if valid {
                used[p] = true;
                covered[t] = true;
                total += cost[p * n_gt + t];
            }
        }
        let best = reference::assignment_min(&cost, n_pred, n_gt);
        let diff = (total - best).abs();
        worst = worst.max(diff);
        // Summation order differs between the two, so allow rounding.
        if !valid || diff > 1e-9 {
            failures += 1;
        }
    }
    Ok(OracleRow::new(
        "hungarian_vs_brute_force",
        cases,
        worst,
        1e-9,
        failures,
    ))
}

/// Random images with jittered true positives, class confusions, ignored
/// boxes and clutter.
pub fn random_eval_case(rng: &mut ChaCha8Rng, classes: usize) -> Vec<EvalImage> {
    let n_images = rng.gen_range(1..6);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let w = rng.gen_range(0.05..0.6);
        let h = rng.gen_range(0.05..0.6);
        [
            rng.gen_range(w / 2.0..1.0 - w / 2.0),
            rng.gen_range(h / 2.0..1.0 - h / 2.0),
            w,
            h,
        ]
    };
    (0..n_images)
        .map(|_| {
            let gts: Vec<EvalGt> = (0..rng.gen_range(0..5))
                .map(|_| EvalGt {
                    class_id: rng.gen_range(0..classes),
                    bbox: rand_box(rng),
                    ignore: rng.gen_bool(0.15),
                })
                .collect();
            let mut detections = Vec::new();
            for g in &gts {
                for _ in 0..rng.gen_range(0..3) {
                    let j = |rng: &mut ChaCha8Rng, s: f64| rng.gen_range(-0.15..0.15) * s;
                    let b = g.bbox;
                    let bbox = [
                        b[0] + j(rng, b[2]),
                        b[1] + j(rng, b[3]),
                        b[2] * (1.0 + j(rng, 1.0)),
                        b[3] * (1.0 + j(rng, 1.0)),
                    ];
                    let class_id = if rng.gen_bool(0.85) {
                        g.class_id
                    } else {
                        rng.gen_range(0..classes)
                    };
                    detections.push(Detection {
                        class_id,
                        score: rng.gen(),
                        bbox,
                    });
                }
            }
            for _ in 0..rng.gen_range(0..4) {
                detections.push(Detection {
                    class_id: rng.gen_range(0..classes),
                    score: rng.gen(),
                    bbox: rand_box(rng),
                });
            }
            EvalImage { detections, gts }
        })
        .collect()
}

pub fn report_metrics(r: &EvalReport) -> [Option<f64>; 5] {
    [r.map50, r.map50_95, r.map_s, r.map_m, r.map_l]
}

/// Largest metric difference, or infinity when one side is undefined and
/// the other is not.
pub fn metric_distance(a: [Option<f64>; 5], b: [Option<f64>; 5]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => (x - y).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

/// `evaluate` against the scalar reference on 256 x 256 images, plus the
/// hand-built precision/recall case.
pub fn map_oracle(cases: usize, seed: u64) -> Result<Vec<OracleRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 256;
    let (mut worst, mut failures) = (0.0f64, 0);
    for _ in 0..cases {
        let classes = rng.gen_range(1..4);
        let images = random_eval_case(&mut rng, classes);
        let names: Vec<String> = (0..classes).map(|c| format!("c{c}")).collect();
        let r = evaluate(&images, &names, size, size)?;
        let d = metric_distance(
            report_metrics(&r),
            reference::map_metrics(&images, classes, (size * size) as f64),
        );
        worst = worst.max(d);
        failures += (d > 1e-6) as usize;
    }
    let random = OracleRow::new("map_vs_scalar_reference", cases, worst, 1e-6, failures);

    // Two positives; detections at .9 (hit), .8 (miss), .7 (hit): recall
    // 1/2 at precision 1, then recall 1 at precision 2/3.
    let g = vec![vec![[0.2, 0.2, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]]];
    let d = vec![vec![
        (0.9, [0.2, 0.2, 0.2, 0.2]),
        (0.8, [0.5, 0.2, 0.1, 0.1]),
        (0.7, [0.7, 0.7, 0.2, 0.2]),
    ]];
    let hand = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    let diff = average_precision(&d, &g, 0.5).map_or(f64::INFINITY, |ap| (ap - hand).abs());
    // Exact up to the rounding of the 101-term sum.
    let exact = OracleRow::new(
        "map_hand_built_pr_curve",
        1,
        diff,
        1e-15,
        (diff > 1e-15) as usize,
    );
    Ok(vec![random, exact])
}

fn fill_uniform(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, a: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-a..a);
        }
    }
}

fn row_sum_deviation(weights: &[f64], width: usize) -> f64 {
    weights
        .chunks(width)
        .map(|row| {
            let negative = row.iter().any(|&a| a < 0.0);
            if negative {
                f64::INFINITY
            } else {
                (row.iter().sum::<f64>() - 1.0).abs()
            }
        })
        .fold(0.0, f64::max)
}

struct AttentionCase {
    heads: usize,
    d: usize,
    points: usize,
    frames: usize,
    n_q: usize,
    extents: Vec<(usize, usize)>,
}

fn random_attention_case(rng: &mut ChaCha8Rng) -> AttentionCase {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let frames = rng.gen_range(1..=4);
    AttentionCase {
        heads,
        d: heads * rng.gen_range(1..=4),
        points: rng.gen_range(1..=4),
        frames,
        n_q: rng.gen_range(1..=5),
        extents: (0..frames)
            .map(|_| (rng.gen_range(2..=6), rng.gen_range(2..=6)))
            .collect(),
    }
}

/// Normalization of every attention kind over `configs` random shapes and
/// weights, and the zero-offset collapse against a scalar reference.
pub fn attention_oracle(configs: usize, seed: u64) -> Result<Vec<OracleRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = 1e-6;
    let (mut mha_worst, mut single_worst, mut joint_worst, mut collapse_worst) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut single_cases, mut joint_cases) = (0, 0);
    for _ in 0..configs {
        let c = random_attention_case(&mut rng);
        let mut store = ParamStore::<f64>::new();
        let (mha, attn) = {
            let mut init = Init::new(&mut store, &mut rng);
            (
                MultiHeadAttention::new(&mut init, "mha", c.d, c.heads)?,
                DeformableAttention::new(&mut init, "deform", c.d, c.heads, c.points, c.frames)?,
            )
        };
        fill_uniform(&mut store, &mut rng, 1.0);

        let query: Vec<f64> = (0..c.n_q * c.d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let refs: Vec<[f64; 2]> = (0..c.n_q).map(|_| [rng.gen(), rng.gen()]).collect();
        let maps: Vec<Vec<f64>> = c
            .extents
            .iter()
            .map(|&(h, w)| (0..h * w * c.d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let n_k = rng.gen_range(1..=6);
        let keys: Vec<f64> = (0..n_k * c.d).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let run = |store: &ParamStore<f64>| -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
            let mut g = Graph::inference(store);
            let q = g.constant(vec![c.n_q, c.d], query.clone())?;
            let r = ReferencePoints::new(refs.iter().copied()).to_var(&mut g);
            let fm = maps
                .iter()
                .zip(&c.extents)
                .map(|(m, &(h, w))| g.constant(vec![h, w, c.d], m.clone()))
                .collect::<Result<Vec<Var>>>()?;
            let (out, w) = attn.forward_with_weights(&mut g, q, r, &fm)?;
            let k = g.constant(vec![n_k, c.d], keys.clone())?;
            let (_, mw) = mha.forward_with_weights(&mut g, q, k, k)?;
            let mw = mw.iter().map(|&a| g.value(a).to_vec()).collect();
            Ok((g.value(out).to_vec(), g.value(w).to_vec(), mw))
        };

        let (_, w, mw) = run(&store)?;
        for head in &mw {
            mha_worst = mha_worst.max(row_sum_deviation(head, n_k));
        }
        let dev = row_sum_deviation(&w, c.frames * c.points);
        if c.frames == 1 {
            single_cases += 1;
            single_worst = single_worst.max(dev);
        } else {
            joint_cases += 1;
            joint_worst = joint_worst.max(dev);
        }

        // Zero offsets and weight logits: every sample lands on the
        // reference point with weight 1 / (L K).
        attn.zero_offsets(&mut store);
        store.get_mut(attn.weights.weight).data_mut().fill(0.0);
        store.get_mut(attn.weights.bias).data_mut().fill(0.0);
        let (out, w, _) = run(&store)?;
        let uniform = 1.0 / (c.frames * c.points) as f64;
        let spread = w.iter().map(|&a| (a - uniform).abs()).fold(0.0, f64::max);
        let (vw, vb) = (
            store.get(attn.value.weight).data(),
            store.get(attn.value.bias).data(),
        );
        let (ow, ob) = (
            store.get(attn.out.weight).data(),
            store.get(attn.out.bias).data(),
        );
        let mut expect = Vec::with_capacity(c.n_q * c.d);
        for p in &refs {
            let mut mix = vec![0.0; c.d];
            for (m, &(h, wd)) in maps.iter().zip(&c.extents) {
                let projected: Vec<f64> = m
                    .chunks(c.d)
                    .flat_map(|px| reference::affine(px, vw, vb))
                    .collect();
                for (acc, v) in mix
                    .iter_mut()
                    .zip(reference::bilinear(&projected, h, wd, c.d, p[0], p[1]))
                {
                    *acc += v / c.frames as f64;
                }
            }
            expect.extend(reference::affine(&mix, ow, ob));
        }
        let diff = out
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        collapse_worst = collapse_worst.max(diff.max(spread));
    }
    let count = |worst: f64| (worst > tol) as usize;
    Ok(vec![
        OracleRow::new(
            "mha_rows_sum_to_one",
            configs,
            mha_worst,
            tol,
            count(mha_worst),
        ),
        OracleRow::new(
            "deform_attn_sum_over_points",
            single_cases,
            single_worst,
            tol,
            count(single_worst),
        ),
        OracleRow::new(
            "temp_deform_attn_joint_sum",
            joint_cases,
            joint_worst,
            tol,
            count(joint_worst),
        ),
        OracleRow::new(
            "zero_offset_collapse",
            configs,
            collapse_worst,
            tol,
            count(collapse_worst),
        ),
    ])
}

/// Partition and reassembly checks over `cases` random `(N, T_w, I_w, seed)`
/// in both plan modes, written independently of the planner's own checks.
pub fn scheduler_fuzz(cases: usize, seed: u64) -> Result<Vec<OracleRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut partition_fail, mut formula_fail, mut inverse_fail, mut replay_fail) = (0, 0, 0, 0);
    for _ in 0..cases {
        let n = rng.gen_range(1..=200);
        let t_w = rng.gen_range(1..=16);
        let i_w = rng.gen_range(1..=6);
        let plan_seed: u64 = rng.gen();
        let n_hat = (n + t_w - 1) / t_w * t_w;
        for mode in [PlanMode::Sequential, PlanMode::Shuffled] {
            let plan = plan_video(n, t_w, i_w, mode, plan_seed)?;
            let mut slots: Vec<usize> = plan.windows.iter().flatten().copied().collect();
            slots.sort_unstable();
            let tiles = slots == (1..=n_hat).collect::<Vec<_>>()
                && plan.windows.iter().all(|w| w.len() == t_w);
            partition_fail += !tiles as usize;

            if mode == PlanMode::Sequential {
                // Part one: window i * I_w + (j - 1) is {S, S + I_w, ...}
                // with S = T_w I_w i + j.
                let k = n_hat / (t_w * i_w);
                let mut ok = plan.windows.len() >= k * i_w;
                for i in 0..k {
                    for j in 1..=i_w {
                        let s = t_w * i_w * i + j;
                        let want: Vec<usize> = (0..t_w).map(|m| s + m * i_w).collect();
                        ok &= plan.windows.get(i * i_w + j - 1) == Some(&want);
                    }
                }
                formula_fail += !ok as usize;
            } else {
                replay_fail += (plan_video(n, t_w, i_w, mode, plan_seed)? != plan) as usize;
            }

            let outputs: Vec<Vec<usize>> = plan.windows.clone();
            let back = reassemble(&plan, &outputs)?;
            inverse_fail += (back != (1..=n).collect::<Vec<_>>()) as usize;
        }
    }
    Ok(vec![
        OracleRow::new(
            "plans_partition_expanded_video",
            2 * cases,
            0.0,
            0.0,
            partition_fail,
        ),
        OracleRow::new("sequential_index_formula", cases, 0.0, 0.0, formula_fail),
        OracleRow::new(
            "shuffled_plan_replays_per_seed",
            cases,
            0.0,
            0.0,
            replay_fail,
        ),
        OracleRow::new("reassemble_inverts_plan", 2 * cases, 0.0, 0.0, inverse_fail),
    ])
}

/// Every oracle at its acceptance size.
pub fn run_oracles(seed: u64) -> Result<OracleReport> {
    let start = Instant::now();
    let mut rows = vec![hungarian_oracle(500, seed)?];
    rows.extend(map_oracle(50, seed.wrapping_add(1))?);
    rows.extend(attention_oracle(100, seed.wrapping_add(2))?);
    rows.extend(scheduler_fuzz(1000, seed.wrapping_add(3))?);
    let pass = rows.iter().all(|r| r.pass);
    Ok(OracleReport {
        rows,
        seconds: start.elapsed().as_secs_f64(),
        pass,
    })
}
