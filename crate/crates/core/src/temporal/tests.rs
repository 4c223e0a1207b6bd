use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::Tensor;
use crate::spatial::SpatialDetector;

fn small_spatial() -> SpatialConfig {
    SpatialConfig {
        d: 16,
        heads: 2,
        points: 2,
        queries: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        classes: 3,
        ffn_hidden: 32,
        fusion: true,
    }
}

fn build(tcfg: &TemporalConfig, seed: u64) -> (ParamStore<f64>, SpatialDetector, TemporalModel) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init::new(&mut store, &mut rng);
    let scfg = small_spatial();
    let spatial = SpatialDetector::new(&mut init, "spatial", &scfg).unwrap();
    let temporal = TemporalModel::new(&mut init, "temporal", &scfg, tcfg).unwrap();
    temporal.sync_heads(&mut store, &spatial.heads).unwrap();
    (store, spatial, temporal)
}

fn image(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![32, 32, 3], |_| rng.gen_range(0.0..1.0))
}

fn frames(g: &mut Graph<'_, f64>, spatial: &SpatialDetector, seeds: &[u64]) -> Vec<FrameInput> {
    seeds
        .iter()
        .map(|&s| {
            let x = g.leaf(&image(s), false);
            FrameInput::from(&spatial.forward(g, x).unwrap())
        })
        .collect()
}

fn rand_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(-a..a)))
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, a: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-a..a);
        }
    }
}

/// Fixed non-uniform weighting so every output coordinate matters.
fn weighted_sum<T: Real>(g: &mut Graph<'_, T>, x: Var) -> crate::Result<Var> {
    let n = g.value(x).len();
    let w: Vec<T> = (0..n)
        .map(|i| T::lit(0.3 + 0.7 * ((i * 7) % 11) as f64 / 11.0))
        .collect();
    let w = g.constant(g.shape(x).to_vec(), w)?;
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn queries(embed: Var, pos: Var, refs: Var) -> Queries {
    Queries {
        embed,
        pos,
        ref_logits: refs,
    }
}

#[test]
fn top_k_examples() {
    assert_eq!(top_k(&[0.9, 0.1, 0.5], 2).unwrap(), vec![0, 2]);
    assert_eq!(top_k(&[0.2, 0.7, 0.4], 3).unwrap(), vec![1, 2, 0]);
    assert_eq!(top_k(&[0.5, 0.5, 0.5], 2).unwrap(), vec![0, 1]);
    assert!(matches!(top_k(&[0.1, 0.2], 3), Err(Error::Contract(_))));
    assert!(top_k(&[], 0).unwrap().is_empty());
}

fn sort_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    // Descending score, then ascending index; a plain bubble pass keeps it
    // independent of the library sort.
    for i in 0..pairs.len() {
        for j in 0..pairs.len() - 1 - i {
            let (a, b) = (pairs[j], pairs[j + 1]);
            if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                pairs.swap(j, j + 1);
            }
        }
    }
    pairs.into_iter().take(k).map(|p| p.1).collect()
}

#[test]
fn top_k_matches_sort_oracle_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let n = rng.gen_range(1..60);
        let k = rng.gen_range(0..=n);
        // Quantized scores produce plenty of ties.
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if case % 2 == 0 {
                    rng.gen_range(0..5) as f64 / 4.0
                } else {
                    rng.gen()
                }
            })
            .collect();
        assert_eq!(top_k(&scores, k).unwrap(), sort_oracle(&scores, k));
    }
    let scores: Vec<f64> = (0..200).map(|_| rng.gen()).collect();
    assert_eq!(top_k(&scores, 80).unwrap(), sort_oracle(&scores, 80));
}

#[test]
fn qfh_select_uses_class_head_scores() {
    let (store, spatial, _) = build(&TemporalConfig::for_variant(Variant::TransVod), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::inference(&store);
    let q = g.leaf(&rand_tensor::<f64>(&mut rng, &[10, 16], 2.0), false);
    let (sel, idx) = qfh_select(&mut g, q, 4, &spatial.heads.class).unwrap();
    // Manual scoring: max over classes of sigmoid(x W + b).
    let w = store.get(spatial.heads.class.weight).data();
    let b = store.get(spatial.heads.class.bias).data();
    let qv = g.value(q).to_vec();
    let scores: Vec<f64> = (0..10)
        .map(|i| {
            (0..3)
                .map(|c| {
                    let l = b[c] + (0..16).map(|k| qv[i * 16 + k] * w[k * 3 + c]).sum::<f64>();
                    1.0 / (1.0 + (-l).exp())
                })
                .fold(f64::MIN, f64::max)
        })
        .collect();
    assert_eq!(idx, sort_oracle(&scores, 4));
    for (r, &i) in idx.iter().enumerate() {
        assert_eq!(
            &g.value(sel)[r * 16..(r + 1) * 16],
            &qv[i * 16..(i + 1) * 16]
        );
    }
    let (_, all) = qfh_select(&mut g, q, 10, &spatial.heads.class).unwrap();
    let mut sorted = all.clone();
    sorted.sort();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    assert!(qfh_select(&mut g, q, 11, &spatial.heads.class).is_err());
}

fn tqe_fixture(seed: u64) -> (ParamStore<f64>, TqeLayer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = TqeLayer::new(&mut Init::new(&mut store, &mut rng), "tqe", 8, 2, 16).unwrap();
    (store, layer)
}

#[test]
fn tqe_shapes_and_zeroed_cross_branch() {
    let (mut store, layer) = tqe_fixture(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e = rand_tensor::<f64>(&mut rng, &[5, 8], 1.0);
    let p = rand_tensor::<f64>(&mut rng, &[5, 8], 1.0);
    let r = rand_tensor::<f64>(&mut rng, &[5, 2], 1.0);
    {
        let mut g = Graph::inference(&store);
        let (ev, pv, rv) = (g.leaf(&e, false), g.leaf(&p, false), g.leaf(&r, false));
        let cur = queries(ev, pv, rv);
        let out = layer.forward(&mut g, cur, cur).unwrap();
        assert_eq!(g.shape(out), [5, 8]);
        let e3 = g.leaf(&rand_tensor::<f64>(&mut rng, &[3, 8], 1.0), false);
        let p3 = g.leaf(&rand_tensor::<f64>(&mut rng, &[3, 8], 1.0), false);
        let refs = queries(e3, p3, rv);
        let o = layer.forward(&mut g, cur, refs).unwrap();
        assert_eq!(g.shape(o), [5, 8]);
        let none = g.constant(vec![0, 8], vec![]).unwrap();
        let empty = queries(none, none, rv);
        assert!(matches!(
            layer.forward(&mut g, cur, empty),
            Err(Error::Contract(_))
        ));
    }
    store
        .get_mut(layer.cross_attn.out.weight)
        .data_mut()
        .fill(0.0);
    store
        .get_mut(layer.cross_attn.out.bias)
        .data_mut()
        .fill(0.0);
    let mut g = Graph::inference(&store);
    let (ev, pv, rv) = (g.leaf(&e, false), g.leaf(&p, false), g.leaf(&r, false));
    let cur = queries(ev, pv, rv);
    let out = layer.forward(&mut g, cur, cur).unwrap();
    let qk = g.add(ev, pv).unwrap();
    let sa = layer.self_attn.forward(&mut g, qk, qk, ev).unwrap();
    let t = g.add(ev, sa).unwrap();
    let t = layer.norm1.forward(&mut g, t).unwrap();
    let t = layer.norm2.forward(&mut g, t).unwrap();
    let expect = layer.ffn.forward(&mut g, t).unwrap();
    for (a, b) in g.value(out).iter().zip(g.value(expect)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn tdte_single_frame_and_joint_normalization() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (one, three) = {
        let mut init = Init::new(&mut store, &mut rng);
        (
            TdteLayer::new(&mut init, "one", 8, 2, 2, 1, 16).unwrap(),
            TdteLayer::new(&mut init, "three", 8, 2, 3, 3, 16).unwrap(),
        )
    };
    randomize(&mut store, &mut rng, 0.3);
    let mut g = Graph::inference(&store);
    let maps: Vec<Var> = (0..3)
        .map(|_| g.leaf(&rand_tensor::<f64>(&mut rng, &[3, 5, 8], 1.0), false))
        .collect();
    let pos = g.leaf(&rand_tensor::<f64>(&mut rng, &[15, 8], 0.5), false);
    let a = one.forward(&mut g, &maps[..1], pos).unwrap();
    assert_eq!(g.shape(a), [3, 5, 8]);
    let b = three.forward(&mut g, &maps, pos).unwrap();
    assert_eq!(g.shape(b), [3, 5, 8]);
    // Joint weights over L*K sum to one for every cell and head.
    let x = g.reshape(maps[0], &[15, 8]).unwrap();
    let q = g.add(x, pos).unwrap();
    let refs = crate::attention::ReferencePoints::grid(3, 5).to_var(&mut g);
    let (_, w) = three
        .attn
        .forward_with_weights(&mut g, q, refs, &maps)
        .unwrap();
    assert_eq!(g.shape(w), [30, 9]);
    for row in g.value(w).chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

/// Dense independent oracle: 7x7 grid of explicit bilinear reads.
fn roi_oracle(map: &[f64], h: usize, w: usize, c: usize, b: BoxCxcywh) -> Vec<f64> {
    let mut acc = vec![0.0; c];
    let degenerate = b[2] < 1e-4 || b[3] < 1e-4;
    for i in 0..7 {
        for j in 0..7 {
            let (mut x, mut y) = (b[0], b[1]);
            if !degenerate {
                x += b[2] * ((2 * j + 1) as f64 / 14.0 - 0.5);
                y += b[3] * ((2 * i + 1) as f64 / 14.0 - 0.5);
            }
            let px = x.clamp(0.0, 1.0) * (w - 1) as f64;
            let py = y.clamp(0.0, 1.0) * (h - 1) as f64;
            for yy in 0..h {
                for xx in 0..w {
                    let wt = (1.0 - (px - xx as f64).abs()).max(0.0)
                        * (1.0 - (py - yy as f64).abs()).max(0.0);
                    for ch in 0..c {
                        acc[ch] += wt * map[(yy * w + xx) * c + ch] / 49.0;
                    }
                }
            }
        }
    }
    acc
}

#[test]
fn roi_extract_examples_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::<f64>::new();
    let constant = g
        .constant(vec![4, 6, 3], [0.5, -1.0, 2.0].repeat(24))
        .unwrap();
    let boxes = [
        [0.5, 0.5, 0.3, 0.2],
        [0.1, 0.9, 0.6, 0.7],
        [0.4, 0.4, 0.0, 0.2],
    ];
    let r = roi_extract(&mut g, constant, &boxes).unwrap();
    for row in g.value(r).chunks(3) {
        for (a, b) in row.iter().zip([0.5, -1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    let map = rand_tensor::<f64>(&mut rng, &[5, 7, 4], 1.0);
    let m = g.leaf(&map, false);
    let boxes: Vec<BoxCxcywh> = (0..20)
        .map(|i| {
            if i == 0 {
                [0.3, 0.6, 5e-5, 0.4]
            } else {
                [
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.01..0.9),
                    rng.gen_range(0.01..0.9),
                ]
            }
        })
        .collect();
    let r = roi_extract(&mut g, m, &boxes).unwrap();
    for (i, &b) in boxes.iter().enumerate() {
        let want = roi_oracle(map.data(), 5, 7, 4, b);
        for (a, e) in g.value(r)[i * 4..(i + 1) * 4].iter().zip(&want) {
            assert!((a - e).abs() < 1e-5);
        }
    }
    // Degenerate box: centre sample only.
    let centre = roi_oracle(map.data(), 5, 7, 4, [0.3, 0.6, 0.0, 0.0]);
    for (a, e) in g.value(r)[..4].iter().zip(&centre) {
        assert!((a - e).abs() < 1e-12);
    }

    // Multi-frame pooling keeps the input order.
    let other = g.leaf(&rand_tensor::<f64>(&mut rng, &[5, 7, 4], 1.0), false);
    let frame_of = [1, 0, 1, 0];
    let multi = roi_extract_frames(&mut g, &[m, other], &frame_of, &boxes[..4]).unwrap();
    for (i, &f) in frame_of.iter().enumerate() {
        let single = roi_extract(&mut g, [m, other][f], &boxes[i..i + 1]).unwrap();
        assert_eq!(&g.value(multi)[i * 4..(i + 1) * 4], g.value(single));
    }
}

fn qrf_fixture(seed: u64, hidden: usize) -> (ParamStore<f64>, QrfLayer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = QrfLayer::new(&mut Init::new(&mut store, &mut rng), "qrf", 8, 2, hidden).unwrap();
    (store, layer)
}

#[test]
fn qrf_shapes_zeroed_branch_and_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let e = rand_tensor::<f64>(&mut rng, &[4, 8], 1.0);
    let p = rand_tensor::<f64>(&mut rng, &[4, 8], 1.0);
    let roi = rand_tensor::<f64>(&mut rng, &[4, 8], 1.0);
    for hidden in [1, 2, 5] {
        let (store, layer) = qrf_fixture(9, hidden);
        let mut g = Graph::inference(&store);
        let (ev, pv, rv) = (g.leaf(&e, false), g.leaf(&p, false), g.leaf(&roi, false));
        let q = queries(ev, pv, pv);
        let o = layer.forward(&mut g, q, rv).unwrap();
        assert_eq!(g.shape(o), [4, 8]);
        let short = g.slice_rows(rv, 0, 3).unwrap();
        assert!(matches!(
            layer.forward(&mut g, q, short),
            Err(Error::Contract(_))
        ));
    }
    let (mut store, layer) = qrf_fixture(9, 2);
    store.get_mut(layer.generate.weight).data_mut().fill(0.0);
    store.get_mut(layer.generate.bias).data_mut().fill(0.0);
    let mut g = Graph::inference(&store);
    let (ev, pv, rv) = (g.leaf(&e, false), g.leaf(&p, false), g.leaf(&roi, false));
    let q = queries(ev, pv, pv);
    let out = layer.forward(&mut g, q, rv).unwrap();
    let qk = g.add(ev, pv).unwrap();
    let sa = layer.self_attn.forward(&mut g, qk, qk, ev).unwrap();
    let s = g.add(ev, sa).unwrap();
    let s = layer.norm1.forward(&mut g, s).unwrap();
    let expect = layer.norm2.forward(&mut g, s).unwrap();
    assert_eq!(g.value(out), g.value(expect));
}

#[test]
fn qrf_responds_to_query_and_roi() {
    let (mut store, layer) = qrf_fixture(10, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // The second generator starts at zero, which would hide the RoI branch.
    randomize(&mut store, &mut rng, 0.1);
    let e = rand_tensor::<f64>(&mut rng, &[3, 8], 1.0);
    let p = rand_tensor::<f64>(&mut rng, &[3, 8], 1.0);
    let roi = rand_tensor::<f64>(&mut rng, &[3, 8], 1.0);
    let run = |e: &Tensor<f64>, roi: &Tensor<f64>| {
        let mut g = Graph::inference(&store);
        let (ev, pv, rv) = (g.leaf(e, false), g.leaf(&p, false), g.leaf(roi, false));
        let q = queries(ev, pv, pv);
        let o = layer.forward(&mut g, q, rv).unwrap();
        let s = weighted_sum(&mut g, o).unwrap();
        g.item(s)
    };
    let base = run(&e, &roi);
    let mut e2 = e.clone();
    e2.data_mut()[5] += 1e-4;
    let mut r2 = roi.clone();
    r2.data_mut()[5] += 1e-4;
    assert!((run(&e2, &roi) - base).abs() > 1e-9);
    assert!((run(&e, &r2) - base).abs() > 1e-9);
}

fn variant_cfg(variant: Variant) -> TemporalConfig {
    let mut c = TemporalConfig::for_variant(variant);
    match variant {
        Variant::TransVod => c.k_schedule = vec![12, 6, 3],
        Variant::TransVodPp => c.k_schedule = vec![6, 4, 2],
        Variant::Lite => {
            c.k_schedule = vec![6, 4, 3];
            c.window = 3;
        }
    }
    c
}

#[test]
fn default_configs() {
    let t = TemporalConfig::for_variant(Variant::TransVod);
    assert_eq!(
        (t.stages, t.tqe_layers, t.tdte_layers, t.tdtd_layers),
        (1, 3, 1, 1)
    );
    assert_eq!(t.k_schedule, vec![80, 50, 20]);
    let p = TemporalConfig::for_variant(Variant::TransVodPp);
    assert_eq!((p.stages, p.k_schedule.clone()), (3, vec![80, 50, 20]));
    let l = TemporalConfig::for_variant(Variant::Lite);
    assert_eq!((l.stages, l.k_schedule.clone()), (3, vec![80, 50, 30]));
    for v in Variant::ALL {
        TemporalConfig::for_variant(v).validate().unwrap();
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    let mut bad = p.clone();
    bad.k_schedule = vec![20, 50, 80];
    assert!(bad.validate().is_err());
    let mut bad = t;
    bad.stages = 3;
    assert!(bad.validate().is_err());
    let mut bad = l;
    bad.stages = 2;
    bad.k_schedule = vec![80, 50];
    assert!(bad.validate().is_err());
}

#[test]
fn variant_shapes_and_retained_counts() {
    for variant in Variant::ALL {
        let cfg = variant_cfg(variant);
        let (store, spatial, temporal) = build(&cfg, 12);
        let mut g = Graph::inference(&store);
        let seeds: Vec<u64> = (0..cfg.frames_per_call() as u64).collect();
        let fr = frames(&mut g, &spatial, &seeds);
        let out = temporal.forward(&mut g, &fr).unwrap();
        assert_eq!(out.frames.len(), cfg.predicted_frames());
        match variant {
            Variant::TransVod => {
                assert_eq!(out.retained, vec![12, 6, 3, 8]);
                assert_eq!(g.shape(out.final_prediction(0).boxes), [8, 4]);
            }
            _ => {
                // Stage 1 keeps min(k, 8) queries; later stages follow k exactly.
                let want: Vec<usize> = cfg.k_schedule.iter().map(|&k| k.min(8)).collect();
                assert_eq!(out.retained, want);
                assert!(out.retained.windows(2).all(|w| w[1] <= w[0]));
                for f in 0..cfg.predicted_frames() {
                    assert_eq!(out.frames[f].len(), 3);
                    for (p, &k) in out.frames[f].iter().zip(&want) {
                        assert_eq!(g.shape(p.logits), [k, 3]);
                        assert_eq!(g.shape(p.boxes), [k, 4]);
                    }
                }
            }
        }
        assert_eq!(
            out.qfh.len(),
            if variant == Variant::Lite { 2 * 3 } else { 0 }
        );
        let too_few = &fr[..fr.len() - 1];
        assert!(matches!(
            temporal.forward(&mut g, too_few),
            Err(Error::Contract(_))
        ));
    }
}

#[test]
fn lite_single_frame_window() {
    let mut cfg = variant_cfg(Variant::Lite);
    cfg.window = 1;
    let (store, spatial, temporal) = build(&cfg, 13);
    let mut g = Graph::inference(&store);
    let fr = frames(&mut g, &spatial, &[3]);
    let out = temporal.forward(&mut g, &fr).unwrap();
    assert_eq!(out.frames.len(), 1);
    let p = out.final_prediction(0);
    assert_eq!(g.shape(p.logits), [3, 3]);
    assert_eq!(g.shape(p.boxes), [3, 4]);
}

#[test]
fn empty_transvod_stack_is_the_single_frame_detector() {
    let mut cfg = TemporalConfig::for_variant(Variant::TransVod);
    cfg.tqe_layers = 0;
    cfg.tdte_layers = 0;
    cfg.tdtd_layers = 0;
    cfg.k_schedule.clear();
    let (store, spatial, temporal) = build(&cfg, 14);
    let mut g = Graph::inference(&store);
    let fr = frames(&mut g, &spatial, &[1, 2, 3, 4, 5]);
    let out = temporal.forward(&mut g, &fr).unwrap();
    let p = out.final_prediction(0);
    assert_eq!(g.value(p.logits), g.value(fr[0].prediction.logits));
    assert_eq!(g.value(p.boxes), g.value(fr[0].prediction.boxes));
}

#[test]
fn stages_share_one_prediction_head() {
    for variant in [Variant::TransVodPp, Variant::Lite] {
        let (store, _, temporal) = build(&variant_cfg(variant), 15);
        let names: Vec<&str> = store
            .iter()
            .map(|(_, n, _)| n)
            .filter(|n| n.starts_with("temporal.") && n.contains("heads."))
            .collect();
        // One class linear and a three-layer box MLP, weight + bias each.
        assert_eq!(names.len(), 8, "{names:?}");
        assert!(names.iter().all(|n| n.starts_with("temporal.heads.")));
        let mut g = Graph::inference(&store);
        let c = g.param(temporal.heads.class.weight);
        assert_eq!(g.param(store.id("temporal.heads.class.weight").unwrap()), c);
    }
}

#[test]
fn lite_is_frame_permutation_equivariant() {
    let cfg = variant_cfg(Variant::Lite);
    let (store, spatial, temporal) = build(&cfg, 16);
    let mut g = Graph::inference(&store);
    let fr = frames(&mut g, &spatial, &[7, 8, 9]);
    let a = temporal.forward(&mut g, &fr).unwrap();
    let perm = [2, 0, 1];
    let pf: Vec<FrameInput> = perm.iter().map(|&i| fr[i]).collect();
    let b = temporal.forward(&mut g, &pf).unwrap();
    for (slot, &orig) in perm.iter().enumerate() {
        let (pa, pb) = (a.final_prediction(orig), b.final_prediction(slot));
        for (x, y) in g.value(pa.logits).iter().zip(g.value(pb.logits)) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in g.value(pa.boxes).iter().zip(g.value(pb.boxes)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    let mut cfg = cfg;
    cfg.frame_embed = true;
    let (store, spatial, temporal) = build(&cfg, 16);
    let mut g = Graph::inference(&store);
    let fr = frames(&mut g, &spatial, &[7, 8, 9]);
    let a = temporal.forward(&mut g, &fr).unwrap();
    let pf: Vec<FrameInput> = perm.iter().map(|&i| fr[i]).collect();
    let b = temporal.forward(&mut g, &pf).unwrap();
    let (pa, pb) = (a.final_prediction(0), b.final_prediction(1));
    let diff: f64 = g
        .value(pa.logits)
        .iter()
        .zip(g.value(pb.logits))
        .map(|(x, y)| (x - y).abs())
        .sum();
    assert!(diff > 1e-9);
}

#[test]
fn zeroed_qrf_keeps_shapes() {
    let cfg = variant_cfg(Variant::TransVodPp);
    let (mut store, spatial, temporal) = build(&cfg, 17);
    for st in &temporal.stages {
        let q = st.qrf.unwrap();
        store.get_mut(q.generate.weight).data_mut().fill(0.0);
        store.get_mut(q.generate.bias).data_mut().fill(0.0);
    }
    let mut g = Graph::inference(&store);
    let fr = frames(&mut g, &spatial, &[1, 2, 3, 4, 5]);
    let out = temporal.forward(&mut g, &fr).unwrap();
    let shapes: Vec<Vec<usize>> = out.frames[0]
        .iter()
        .map(|p| g.shape(p.boxes).to_vec())
        .collect();
    assert_eq!(shapes, vec![vec![6, 4], vec![4, 4], vec![2, 4]]);
}

#[test]
fn forward_is_deterministic() {
    for variant in Variant::ALL {
        let cfg = variant_cfg(variant);
        let run = || {
            let (store, spatial, temporal) = build(&cfg, 18);
            let mut g = Graph::inference(&store);
            let seeds: Vec<u64> = (0..cfg.frames_per_call() as u64).collect();
            let fr = frames(&mut g, &spatial, &seeds);
            let out = temporal.forward(&mut g, &fr).unwrap();
            let p = out.final_prediction(0);
            (g.value(p.logits).to_vec(), g.value(p.boxes).to_vec())
        };
        assert_eq!(run(), run());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn top_k_is_a_sorted_prefix(scores in proptest::collection::vec(0u8..6, 1..40), frac in 0.0f64..=1.0) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let k = ((s.len() as f64) * frac).floor() as usize;
        let idx = top_k(&s, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        for w in idx.windows(2) {
            prop_assert!(s[w[0]] > s[w[1]] || (s[w[0]] == s[w[1]] && w[0] < w[1]));
        }
        let worst = idx.last().map(|&i| s[i]).unwrap_or(f64::INFINITY);
        for i in (0..s.len()).filter(|i| !idx.contains(i)) {
            prop_assert!(s[i] <= worst);
        }
    }
}
