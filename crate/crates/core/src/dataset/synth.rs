use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Clip, Frame, Object, Shape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_clips: usize,
    pub test_clips: usize,
    pub frames: usize,
    /// Square image side in pixels, a multiple of 32.
    pub size: usize,
    pub shapes: Vec<Shape>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape radius range in pixels.
    pub radius: (f64, f64),
    /// Speed range in pixels per frame.
    pub speed: (f64, f64),
    /// Per-axis bound of the per-frame random walk, pixels.
    pub walk: f64,
    /// Probability that a shape is hidden once during the clip.
    pub occluder_prob: f64,
    /// Hidden run length range in frames (inclusive).
    pub occlusion_frames: (usize, usize),
    /// Motion-blur kernel length range in pixels (inclusive); 0 or 1 is sharp.
    pub blur: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_clips: 60,
            test_clips: 20,
            frames: 24,
            size: 64,
            shapes: Shape::ALL.to_vec(),
            min_objects: 1,
            max_objects: 4,
            radius: (5.0, 12.0),
            speed: (0.5, 2.5),
            walk: 0.3,
            occluder_prob: 0.5,
            occlusion_frames: (2, 5),
            blur: (1, 4),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.size == 0 || self.size % 32 != 0 {
            return bad("image size must be a positive multiple of 32");
        }
        if self.shapes.is_empty() {
            return bad("at least one shape class is required");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        if !(self.radius.0 >= 2.0
            && self.radius.0 <= self.radius.1
            && 2.0 * self.radius.1 < self.size as f64)
        {
            return bad("radius range must start at 2 pixels and fit in the image");
        }
        if !(self.speed.0 >= 0.0 && self.speed.0 <= self.speed.1) || self.walk < 0.0 {
            return bad("speed range and walk must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) {
            return bad("occluder probability must lie in [0, 1]");
        }
        if self.occlusion_frames.0 == 0 || self.occlusion_frames.0 > self.occlusion_frames.1 {
            return bad("occlusion length range must satisfy 1 <= min <= max");
        }
        if self.blur.0 > self.blur.1 {
            return bad("blur range must satisfy min <= max");
        }
        if self.frames == 0 {
            return bad("clips need at least one frame");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.shapes.iter().map(|s| s.name().to_string()).collect()
    }
}

/// One shape's state over a clip, in pixels.
#[derive(Debug, Clone)]
pub struct Track {
    pub class_id: usize,
    pub radius: f64,
    pub color: [f64; 3],
    /// Centre per frame.
    pub centres: Vec<[f64; 2]>,
    /// Velocity used to move into each frame (zero for frame 0).
    pub velocities: Vec<[f64; 2]>,
    pub hidden: Vec<bool>,
}

/// Deterministic trajectories for one clip.
pub fn simulate_tracks(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Track> {
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let size = cfg.size as f64;
    (0..n_obj)
        .map(|_| {
            let class_id = rng.gen_range(0..cfg.shapes.len());
            let radius = rng.gen_range(cfg.radius.0..=cfg.radius.1);
            let hue = rng.gen_range(0.0..1.0);
            let color = hue_to_rgb(hue);
            let (lo, hi) = (radius, size - radius);
            let mut p = [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let speed = rng.gen_range(cfg.speed.0..=cfg.speed.1);
            let mut v = [speed * theta.cos(), speed * theta.sin()];
            let mut centres = vec![p];
            let mut velocities = vec![[0.0, 0.0]];
            for _ in 1..cfg.frames {
                let step = [
                    v[0] + rng.gen_range(-cfg.walk..=cfg.walk),
                    v[1] + rng.gen_range(-cfg.walk..=cfg.walk),
                ];
                for a in 0..2 {
                    p[a] += step[a];
                    if p[a] < lo {
                        p[a] = 2.0 * lo - p[a];
                        v[a] = v[a].abs();
                    } else if p[a] > hi {
                        p[a] = 2.0 * hi - p[a];
                        v[a] = -v[a].abs();
                    }
                    p[a] = p[a].clamp(lo, hi);
                }
                centres.push(p);
                velocities.push(step);
            }
            let mut hidden = vec![false; cfg.frames];
            if rng.gen_bool(cfg.occluder_prob) {
                let len = rng
                    .gen_range(cfg.occlusion_frames.0..=cfg.occlusion_frames.1)
                    .min(cfg.frames);
                let start = rng.gen_range(0..=cfg.frames - len);
                hidden[start..start + len].fill(true);
            }
            Track {
                class_id,
                radius,
                color,
                centres,
                velocities,
                hidden,
            }
        })
        .collect()
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - k.min(4.0 - k).clamp(0.0, 1.0)
    };
    // Bright, saturated colours well away from the dark background.
    [
        0.35 + 0.65 * f(5.0),
        0.35 + 0.65 * f(3.0),
        0.35 + 0.65 * f(1.0),
    ]
}

/// Pixel-centre membership test for a shape centred at the origin.
pub fn inside(shape: Shape, r: f64, dx: f64, dy: f64) -> bool {
    match shape {
        Shape::Disc => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r && dy.abs() <= r,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        Shape::Triangle => {
            // Apex up, base at dy = r, spanning the full bounding square.
            dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0
        }
    }
}

/// Renders one frame. Each visible shape's coverage is averaged over
/// `blur` positions spread along its velocity.
fn render(
    cfg: &SynthConfig,
    tracks: &[Track],
    t: usize,
    background: &[f64],
    blur: usize,
) -> Vec<u8> {
    let s = cfg.size;
    let mut img = background.to_vec();
    for tr in tracks {
        if tr.hidden[t] {
            continue;
        }
        let c = tr.centres[t];
        let v = tr.velocities[t];
        let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let dir = if speed > 1e-9 {
            [v[0] / speed, v[1] / speed]
        } else {
            [0.0, 0.0]
        };
        let taps = blur.max(1);
        let shape = cfg.shapes[tr.class_id];
        let reach = tr.radius + taps as f64;
        let (x0, x1) = (
            (c[0] - reach).floor().max(0.0) as usize,
            ((c[0] + reach).ceil() as usize).min(s),
        );
        let (y0, y1) = (
            (c[1] - reach).floor().max(0.0) as usize,
            ((c[1] + reach).ceil() as usize).min(s),
        );
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut cov = 0.0;
                for k in 0..taps {
                    let o = k as f64 - (taps - 1) as f64 / 2.0;
                    if inside(
                        shape,
                        tr.radius,
                        px - c[0] + o * dir[0],
                        py - c[1] + o * dir[1],
                    ) {
                        cov += 1.0;
                    }
                }
                let cov = cov / taps as f64;
                if cov > 0.0 {
                    let i = (y * s + x) * 3;
                    for ch in 0..3 {
                        img[i + ch] = img[i + ch] * (1.0 - cov) + tr.color[ch] * cov;
                    }
                }
            }
        }
    }
    img.iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Normalized amodal box: the tight pixel extent of the unblurred shape
/// mask, drawn or not. Pixel edges are multiples of `1/size`, so boxes are
/// exact in binary and survive mirroring bit for bit.
pub fn track_box(cfg: &SynthConfig, tr: &Track, t: usize) -> [f64; 4] {
    let s = cfg.size;
    let c = tr.centres[t];
    let r = tr.radius;
    let shape = cfg.shapes[tr.class_id];
    let (mut x0, mut x1, mut y0, mut y1) = (s, 0, s, 0);
    let lo = |v: f64| (v - r - 1.0).floor().max(0.0) as usize;
    let hi = |v: f64| ((v + r + 1.0).ceil() as usize).min(s);
    for y in lo(c[1])..hi(c[1]) {
        for x in lo(c[0])..hi(c[0]) {
            if inside(shape, r, x as f64 + 0.5 - c[0], y as f64 + 0.5 - c[1]) {
                (x0, x1, y0, y1) = (x0.min(x), x1.max(x + 1), y0.min(y), y1.max(y + 1));
            }
        }
    }
    let n = s as f64;
    let (x0, x1, y0, y1) = (x0 as f64, x1 as f64, y0 as f64, y1 as f64);
    [
        (x0 + x1) / 2.0 / n,
        (y0 + y1) / 2.0 / n,
        (x1 - x0) / n,
        (y1 - y0) / n,
    ]
}

/// RNG for one aspect of a clip; separate streams keep motion independent
/// of rendering.
fn clip_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trajectories of the clip generated from `seed`.
pub fn clip_tracks(cfg: &SynthConfig, seed: u64) -> Vec<Track> {
    simulate_tracks(cfg, &mut clip_rng(seed, 1))
}

fn generate_clip(cfg: &SynthConfig, clip_id: String, seed: u64) -> Clip {
    let mut rng = clip_rng(seed, 0);
    let s = cfg.size;
    let base: [f64; 3] = [
        rng.gen_range(0.0..0.25),
        rng.gen_range(0.0..0.25),
        rng.gen_range(0.0..0.25),
    ];
    let background: Vec<f64> = (0..s * s * 3)
        .map(|i| (base[i % 3] + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0))
        .collect();
    let tracks = clip_tracks(cfg, seed);
    let frames = (0..cfg.frames)
        .map(|t| {
            let blur = rng.gen_range(cfg.blur.0..=cfg.blur.1);
            let image = render(cfg, &tracks, t, &background, blur);
            let objects = tracks
                .iter()
                .map(|tr| Object {
                    class_id: tr.class_id,
                    bbox: track_box(cfg, tr, t),
                    occluded: tr.hidden[t],
                })
                .collect();
            Frame {
                index: t,
                image,
                objects,
            }
        })
        .collect();
    Clip {
        clip_id,
        width: s,
        height: s,
        classes: cfg.class_names(),
        frames,
    }
}

/// Per-clip seeds: train clips first, then test clips.
pub fn clip_seeds(cfg: &SynthConfig) -> Vec<u64> {
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.train_clips + cfg.test_clips)
        .map(|_| master.gen())
        .collect()
}

/// Train and test clips; a pure function of the configuration.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Vec<Clip>, Vec<Clip>)> {
    cfg.validate()?;
    let seeds = clip_seeds(cfg);
    let (tr, te) = seeds.split_at(cfg.train_clips);
    let train = tr
        .iter()
        .enumerate()
        .map(|(i, &s)| generate_clip(cfg, format!("train_{i:04}"), s))
        .collect();
    let test = te
        .iter()
        .enumerate()
        .map(|(i, &s)| generate_clip(cfg, format!("test_{i:04}"), s))
        .collect();
    Ok((train, test))
}
