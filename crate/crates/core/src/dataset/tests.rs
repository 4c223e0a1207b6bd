use std::fs;
use std::path::Path;

use super::*;
use crate::error::Error;

fn small_cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        train_clips: 3,
        test_clips: 2,
        frames: 10,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn same_seed_is_byte_identical() {
    let a = generate_synthetic(&small_cfg(7)).unwrap();
    let b = generate_synthetic(&small_cfg(7)).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&small_cfg(8)).unwrap();
    assert_ne!(a.0[0].frames[0].image, c.0[0].frames[0].image);
}

#[test]
fn clean_config_shows_every_object() {
    let cfg = SynthConfig {
        occluder_prob: 0.0,
        blur: (0, 0),
        ..small_cfg(3)
    };
    let (train, test) = generate_synthetic(&cfg).unwrap();
    let s = cfg.size;
    for clip in train.iter().chain(&test) {
        let seed_tracks = clip.frames[0].objects.len();
        assert!((1..=4).contains(&seed_tracks));
        for f in &clip.frames {
            for o in &f.objects {
                assert!(!o.occluded);
                // The square of the shape's box contains some foreground pixel.
                let (cx, cy) = (o.bbox[0] * s as f64, o.bbox[1] * s as f64);
                let (hw, hh) = (o.bbox[2] * s as f64 / 2.0, o.bbox[3] * s as f64 / 2.0);
                let lit = (cy - hh) as usize..(cy + hh) as usize;
                let found = lit.clone().any(|y| {
                    ((cx - hw) as usize..(cx + hw) as usize).any(|x| {
                        let i = (y * s + x) * 3;
                        f.image[i..i + 3].iter().map(|&v| v as u32).sum::<u32>() > 3 * 90
                    })
                });
                assert!(
                    found,
                    "{} frame {} has an invisible object",
                    clip.clip_id, f.index
                );
            }
        }
    }
}

#[test]
fn occluded_shapes_leave_no_pixels_but_keep_boxes() {
    let cfg = SynthConfig {
        occluder_prob: 1.0,
        max_objects: 1,
        blur: (0, 0),
        ..small_cfg(11)
    };
    let (train, _) = generate_synthetic(&cfg).unwrap();
    let mut seen = 0;
    for clip in &train {
        for f in &clip.frames {
            let o = &f.objects[0];
            assert!(o.bbox.iter().all(|&v| v > 0.0 && v < 1.0));
            if o.occluded {
                seen += 1;
                assert!(f.image.iter().all(|&v| v < 90), "hidden shape was drawn");
            }
        }
    }
    assert!(seen >= 2 * train.len());
}

#[test]
fn trajectory_replay() {
    let cfg = small_cfg(5);
    let (train, test) = generate_synthetic(&cfg).unwrap();
    let s = cfg.size as f64;
    let seeds = clip_seeds(&cfg);
    for (clip, &seed) in train.iter().chain(&test).zip(&seeds) {
        let tracks = clip_tracks(&cfg, seed);
        assert_eq!(tracks.len(), clip.frames[0].objects.len());
        for (k, tr) in tracks.iter().enumerate() {
            let (lo, hi) = (tr.radius, s - tr.radius);
            let reach = cfg.speed.1 + cfg.walk;
            for t in 1..clip.len() {
                let prev = clip.frames[t - 1].objects[k].bbox;
                let cur = clip.frames[t].objects[k].bbox;
                let near_wall = (0..2).any(|a| {
                    let (p, q) = (prev[a] * s, cur[a] * s);
                    p.min(q) < lo + reach || p.max(q) > hi - reach
                });
                if near_wall {
                    continue;
                }
                for a in 0..2 {
                    let moved = (cur[a] - prev[a]) * s;
                    // Box edges snap to whole pixels, half a pixel per side.
                    assert!((moved - tr.velocities[t][a]).abs() <= 1.0);
                    assert!(moved.abs() <= cfg.speed.1 + cfg.walk + 1.0);
                }
            }
            // Away from walls the underlying velocity only drifts by the walk.
            for t in 2..clip.len() {
                let quiet = (t - 2..=t).all(|u| {
                    let c = tr.centres[u];
                    (0..2).all(|a| c[a] >= lo + reach && c[a] <= hi - reach)
                });
                if quiet {
                    for a in 0..2 {
                        let d = tr.velocities[t][a] - tr.velocities[t - 1][a];
                        assert!(d.abs() <= 2.0 * cfg.walk + 1e-9);
                    }
                }
            }
        }
    }
}

/// Pixels whose centres fall inside the normalized box.
fn raster_box(b: [f64; 4], size: usize) -> (usize, usize, usize, usize) {
    let s = size as f64;
    let (x0, x1) = ((b[0] - b[2] / 2.0) * s, (b[0] + b[2] / 2.0) * s);
    let (y0, y1) = ((b[1] - b[3] / 2.0) * s, (b[1] + b[3] / 2.0) * s);
    let first = |v: f64| (v - 0.5).ceil().max(0.0) as usize;
    let last = |v: f64| ((v - 0.5).floor() as usize).min(size - 1);
    (first(x0), last(x1), first(y0), last(y1))
}

fn span_iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let len = |lo: usize, hi: usize| (hi + 1).saturating_sub(lo) as f64;
    let inter = len(a.0.max(b.0), a.1.min(b.1)) * len(a.2.max(b.2), a.3.min(b.3));
    let area = |r: (usize, usize, usize, usize)| len(r.0, r.1) * len(r.2, r.3);
    inter / (area(a) + area(b) - inter)
}

#[test]
fn boxes_match_the_unblurred_mask() {
    let cfg = SynthConfig {
        train_clips: 12,
        test_clips: 0,
        ..small_cfg(9)
    };
    let (train, _) = generate_synthetic(&cfg).unwrap();
    let seeds = clip_seeds(&cfg);
    let n = cfg.size;
    let mut worst = 1.0f64;
    for (clip, &seed) in train.iter().zip(&seeds) {
        for (k, tr) in clip_tracks(&cfg, seed).iter().enumerate() {
            let shape = cfg.shapes[tr.class_id];
            for t in 0..clip.len() {
                let c = tr.centres[t];
                let mut tight: Option<(usize, usize, usize, usize)> = None;
                for y in 0..n {
                    for x in 0..n {
                        if inside(
                            shape,
                            tr.radius,
                            x as f64 + 0.5 - c[0],
                            y as f64 + 0.5 - c[1],
                        ) {
                            let r = tight.get_or_insert((x, x, y, y));
                            *r = (r.0.min(x), r.1.max(x), r.2.min(y), r.3.max(y));
                        }
                    }
                }
                let iou = span_iou(
                    raster_box(clip.frames[t].objects[k].bbox, n),
                    tight.unwrap(),
                );
                worst = worst.min(iou);
            }
        }
    }
    assert!(worst >= 0.9, "worst mask IoU {worst}");
}

#[test]
fn flip_is_an_involution() {
    let (train, _) = generate_synthetic(&small_cfg(2)).unwrap();
    let c = &train[0];
    let f = c.flipped();
    assert_ne!(&f, c);
    assert_eq!(&f.flipped(), c);
    let (w, t) = (c.width, 0);
    assert_eq!(
        f.frames[t].image[0..3],
        c.frames[t].image[(w - 1) * 3..w * 3]
    );
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        SynthConfig {
            size: 48,
            ..SynthConfig::default()
        },
        SynthConfig {
            shapes: vec![],
            ..SynthConfig::default()
        },
        SynthConfig {
            min_objects: 0,
            ..SynthConfig::default()
        },
        SynthConfig {
            occluder_prob: 1.5,
            ..SynthConfig::default()
        },
    ] {
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }
}

fn three_frame_clip() -> Clip {
    let cfg = SynthConfig {
        train_clips: 1,
        test_clips: 0,
        frames: 3,
        ..small_cfg(4)
    };
    generate_synthetic(&cfg).unwrap().0.remove(0)
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clip = three_frame_clip();
    save_clip(&clip, dir.path()).unwrap();
    assert!(dir.path().join("frame_000002.ppm").is_file());
    assert_eq!(load_clip(dir.path()).unwrap(), clip);

    let split = generate_synthetic(&small_cfg(6)).unwrap().0;
    save_split(&split, dir.path().join("train").as_path()).unwrap();
    assert_eq!(load_split(&dir.path().join("train")).unwrap(), split);
}

#[test]
fn ppm_header_comments_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ppm");
    let mut bytes = b"P6\n# made by hand\n2 1\n# depth\n255\n".to_vec();
    bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
    fs::write(&p, bytes).unwrap();
    assert_eq!(read_ppm(&p).unwrap(), (2, 1, vec![1, 2, 3, 4, 5, 6]));
}

fn expect_parse(r: crate::Result<impl std::fmt::Debug>, file: &Path) -> usize {
    match r {
        Err(Error::Parse { path, offset, .. }) => {
            assert_eq!(path, file);
            offset
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn truncated_ppm_names_the_offset() {
    let dir = tempfile::tempdir().unwrap();
    let clip = three_frame_clip();
    save_clip(&clip, dir.path()).unwrap();
    let p = dir.path().join("frame_000001.ppm");
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 100]).unwrap();
    let offset = expect_parse(load_clip(dir.path()), &p);
    assert_eq!(offset, bytes.len() - 100);
    let err = load_clip(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains(&format!("byte offset {offset}")));

    fs::write(&p, b"P5\n1 1\n255\n\0").unwrap();
    assert_eq!(expect_parse(read_ppm(&p), &p), 0);
    fs::write(&p, b"P6\n1 x\n255\n").unwrap();
    assert_eq!(expect_parse(read_ppm(&p), &p), 5);
}

#[test]
fn zero_width_box_is_rejected_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut clip = three_frame_clip();
    clip.frames[1].objects[0].bbox[2] = 0.0;
    save_clip(&clip, dir.path()).unwrap();
    let ann = dir.path().join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&ann).unwrap();
    let offset = expect_parse(load_clip(dir.path()), &ann);
    let k = clip.frames[0].objects.len();
    assert_eq!(offset, text.match_indices("\"bbox\"").nth(k).unwrap().0);
}

#[test]
fn schema_violations_are_parse_errors() {
    let p = Path::new("a.json");
    let ok = r#"{"clip_id":"c","width":32,"height":32,"classes":["disc"],"frames":[{"index":0,"objects":[{"class_id":0,"bbox":[0.5,0.5,0.2,0.2],"occluded":false}]}]}"#;
    assert!(parse_annotations(p, ok).is_ok());
    let extra = ok.replace("\"occluded\":false", "\"occluded\":false,\"score\":1");
    expect_parse(parse_annotations(p, &extra), p);
    let bad_class = ok.replace("\"class_id\":0", "\"class_id\":1");
    expect_parse(parse_annotations(p, &bad_class), p);
    let outside = ok.replace("0.5,0.5,0.2", "1.5,0.5,0.2");
    expect_parse(parse_annotations(p, &outside), p);
    let skipped = ok.replace("\"index\":0", "\"index\":3");
    expect_parse(parse_annotations(p, &skipped), p);
    // Offsets of syntax errors point at the failing byte.
    let broken = &ok[..40];
    let off = expect_parse(parse_annotations(p, broken), p);
    assert!(off <= broken.len());
}
