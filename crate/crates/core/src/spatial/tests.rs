use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{ParamStore, Tensor};

fn small_cfg() -> SpatialConfig {
    SpatialConfig {
        d: 16,
        heads: 2,
        points: 2,
        queries: 6,
        encoder_layers: 1,
        decoder_layers: 2,
        classes: 3,
        ffn_hidden: 32,
        fusion: true,
    }
}

fn build(cfg: &SpatialConfig, seed: u64) -> (ParamStore<f64>, SpatialDetector) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let det = SpatialDetector::new(&mut Init::new(&mut store, &mut rng), "spatial", cfg).unwrap();
    (store, det)
}

fn image(rng: &mut ChaCha8Rng, size: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![size, size, 3], |_| rng.gen_range(-0.5..0.5))
}

#[test]
fn stride_arithmetic_and_fusion_switch() {
    let cfg = small_cfg();
    let (store, det) = build(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = image(&mut rng, 64);
    let mut g = Graph::inference(&store);
    let x = g.leaf(&img, false);
    let f = det.backbone.forward(&mut g, x).unwrap();
    let extents: Vec<&[usize]> = f.levels.iter().map(|&l| g.shape(l)).collect();
    assert_eq!(extents, vec![&[8, 8, 16][..], &[4, 4, 16], &[2, 2, 16]]);
    assert_eq!(g.shape(f.fused), &[8, 8, 16]);

    let mut plain = det.backbone.clone();
    plain.fusion = false;
    let f2 = plain.forward(&mut g, x).unwrap();
    assert_eq!(g.value(f2.fused), g.value(f2.levels[0]));
    assert_ne!(g.value(f.fused), g.value(f.levels[0]));
}

#[test]
fn zero_image_gives_constant_map() {
    let (store, det) = build(&small_cfg(), 3);
    let mut g = Graph::inference(&store);
    let x = g.leaf(&Tensor::zeros(vec![64, 64, 3]), false);
    let f = det.backbone.forward(&mut g, x).unwrap();
    let v = g.value(f.fused);
    let first = &v[..16];
    for cell in v.chunks(16) {
        for (a, b) in cell.iter().zip(first) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn upsample_reproduces_corners() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let u = upsample(&mut g, x, 3, 3).unwrap();
    assert_eq!(g.value(u), &[1.0, 1.5, 2.0, 2.0, 2.5, 3.0, 3.0, 3.5, 4.0]);
}

#[test]
fn positional_encoding_examples() {
    let a = sine_positional_encoding::<f64>(5, 7, 16).unwrap();
    let b = sine_positional_encoding::<f64>(5, 7, 16).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.data()[0], 0.0);
    assert!(sine_positional_encoding::<f64>(2, 2, 6).is_err());
}

#[test]
fn positional_column_shift_moves_only_x_phase() {
    let (h, w, d) = (4, 6, 16);
    let pe = sine_positional_encoding::<f64>(h, w, d).unwrap();
    let at = |y: usize, x: usize| &pe.data()[(y * w + x) * d..(y * w + x + 1) * d];
    for y in 0..h {
        for x in 0..w - 1 {
            assert_eq!(&at(y, x)[..d / 2], &at(y, x + 1)[..d / 2]);
            let phase = (x + 1) as f64 / (w - 1) as f64 * std::f64::consts::TAU;
            let expect: Vec<f64> = (0..d / 2)
                .map(|c| {
                    let a = phase / 10_000f64.powf((2 * (c / 2)) as f64 / (d / 2) as f64);
                    if c % 2 == 0 {
                        a.sin()
                    } else {
                        a.cos()
                    }
                })
                .collect();
            for (p, e) in at(y, x + 1)[d / 2..].iter().zip(&expect) {
                assert!((p - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn empty_encoder_is_identity_and_shapes_hold() {
    let mut cfg = small_cfg();
    cfg.encoder_layers = 0;
    let (store, det) = build(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = image(&mut rng, 64);
    let mut g = Graph::inference(&store);
    let x = g.leaf(&img, false);
    let fused = det.backbone.forward(&mut g, x).unwrap().fused;
    let (memory, _, extent) = det.encode(&mut g, x).unwrap();
    assert_eq!(g.value(memory), g.value(fused));
    assert_eq!(extent, (8, 8));

    let (store, det) = build(&small_cfg(), 4);
    let mut g = Graph::inference(&store);
    let x = g.leaf(&img, false);
    let (memory, _, _) = det.encode(&mut g, x).unwrap();
    assert_eq!(g.shape(memory), &[8, 8, 16]);
    assert!(g.value(memory).iter().all(|v| v.is_finite()));
}

#[test]
fn decoder_preserves_query_count_and_duplicates() {
    let cfg = small_cfg();
    let (mut store, det) = build(&cfg, 6);
    for id in [det.query_embed, det.query_pos] {
        let t = store.get_mut(id).data_mut();
        let row: Vec<f64> = t[..cfg.d].to_vec();
        t[cfg.d..2 * cfg.d].copy_from_slice(&row);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = image(&mut rng, 64);
    let mut g = Graph::inference(&store);
    let x = g.leaf(&img, false);
    let out = det.forward(&mut g, x).unwrap();
    assert_eq!(out.predictions.len(), cfg.decoder_layers);
    for p in &out.predictions {
        assert_eq!(g.shape(p.logits), &[cfg.queries, cfg.classes]);
        let b = g.value(p.boxes);
        assert!(b.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(&b[..4], &b[4..8]);
    }
    let e = g.value(out.queries.embed);
    assert_eq!(&e[..cfg.d], &e[cfg.d..2 * cfg.d]);
}

#[test]
fn zeroed_cross_attention_leaves_self_attention_path() {
    let mut cfg = small_cfg();
    cfg.decoder_layers = 1;
    let (mut store, det) = build(&cfg, 8);
    let layer = det.decoder[0].clone();
    for id in [layer.cross_attn.out.weight, layer.cross_attn.out.bias] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = image(&mut rng, 64);
    let mut g = Graph::inference(&store);
    let x = g.leaf(&img, false);
    let (memory, _, _) = det.encode(&mut g, x).unwrap();
    let got = det.decode(&mut g, memory).unwrap()[0].embed;

    let q = det.initial_queries(&mut g).unwrap();
    let qk = q.with_pos(&mut g).unwrap();
    let sa = layer.self_attn.forward(&mut g, qk, qk, q.embed).unwrap();
    let t = g.add(q.embed, sa).unwrap();
    let t = layer.norm1.forward(&mut g, t).unwrap();
    let t = layer.norm2.forward(&mut g, t).unwrap();
    let expect = layer.ffn.forward(&mut g, t).unwrap();
    assert_eq!(g.value(got), g.value(expect));
}

#[test]
fn forward_is_deterministic() {
    let (store, det) = build(&small_cfg(), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = image(&mut rng, 64);
    let run = || {
        let mut g = Graph::inference(&store);
        let x = g.leaf(&img, false);
        let out = det.forward(&mut g, x).unwrap();
        let p = *out.predictions.last().unwrap();
        (g.value(p.logits).to_vec(), g.value(p.boxes).to_vec())
    };
    assert_eq!(run(), run());
}
