//! Window planning for clip-level inference, output reassembly, reference
//! sampling for training, and throughput measurement.
//!
//! Plan indices are 1-based frame slots of the expanded video; slot `x`
//! shows real frame `min(x, N) - 1` (0-based), so padding repeats the last
//! frame.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Sequential,
    Shuffled,
}

impl std::str::FromStr for PlanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(PlanMode::Sequential),
            "shuffled" => Ok(PlanMode::Shuffled),
            _ => Err(Error::Config(format!("unknown plan mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for PlanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlanMode::Sequential => "sequential",
            PlanMode::Shuffled => "shuffled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    /// Real frame count.
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T_w")]
    pub t_w: usize,
    #[serde(rename = "I_w")]
    pub i_w: usize,
    pub mode: PlanMode,
    pub seed: Option<u64>,
    pub windows: Vec<Vec<usize>>,
}

impl WindowPlan {
    /// Expanded frame count.
    pub fn n_hat(&self) -> usize {
        self.windows.len() * self.t_w
    }

    /// Real 0-based frame shown in 1-based slot `x`.
    pub fn frame_of(&self, x: usize) -> usize {
        x.min(self.n).saturating_sub(1)
    }

    /// Checks that the windows tile `1..=n_hat` exactly, each of size `T_w`.
    pub fn check_partition(&self) -> Result<()> {
        let n_hat = self.n_hat();
        let mut seen = vec![false; n_hat + 1];
        for w in &self.windows {
            if w.len() != self.t_w {
                return Err(Error::contract(format!(
                    "window of size {} in a T_w={} plan",
                    w.len(),
                    self.t_w
                )));
            }
            for &x in w {
                if x == 0 || x > n_hat || seen[x] {
                    return Err(Error::contract(format!(
                        "slot {x} missing, repeated or out of range"
                    )));
                }
                seen[x] = true;
            }
        }
        if n_hat < self.n {
            return Err(Error::contract("plan does not cover every real frame"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.check_partition()?;
        Ok(p)
    }
}

/// Expanded size `N̂ = ceil(N / T_w) * T_w` and the padded 1-based slots.
pub fn expand_video(n: usize, t_w: usize) -> Result<(usize, Vec<usize>)> {
    if n == 0 || t_w == 0 {
        return Err(Error::contract("expand_video needs N >= 1 and T_w >= 1"));
    }
    let n_hat = n.div_ceil(t_w) * t_w;
    Ok((n_hat, (n + 1..=n_hat).collect()))
}

fn check_sizes(n_hat: usize, t_w: usize, i_w: usize) -> Result<()> {
    if t_w == 0 || i_w == 0 {
        return Err(Error::contract("T_w and I_w must be at least 1"));
    }
    if n_hat == 0 || n_hat % t_w != 0 {
        return Err(Error::contract(format!(
            "expanded length {n_hat} is not a positive multiple of T_w={t_w}"
        )));
    }
    Ok(())
}

/// Strided windows: for `i < K = floor(N̂ / (T_w I_w))` and `j` in
/// `1..=I_w`, the window starting at `S = T_w I_w i + j` takes every
/// `I_w`-th frame. The tail after `T_w I_w K` is cut into consecutive
/// windows, or shuffled first when `tail_seed` is given.
pub fn plan_sequential_with(
    n_hat: usize,
    t_w: usize,
    i_w: usize,
    tail_seed: Option<u64>,
) -> Result<WindowPlan> {
    check_sizes(n_hat, t_w, i_w)?;
    let block = t_w * i_w;
    let k = n_hat / block;
    let mut windows = Vec::with_capacity(n_hat / t_w);
    for i in 0..k {
        for j in 1..=i_w {
            let s = block * i + j;
            windows.push((0..t_w).map(|m| s + m * i_w).collect());
        }
    }
    let mut tail: Vec<usize> = (block * k + 1..=n_hat).collect();
    if let Some(seed) = tail_seed {
        tail.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    windows.extend(tail.chunks(t_w).map(<[usize]>::to_vec));
    Ok(WindowPlan {
        n: n_hat,
        t_w,
        i_w,
        mode: PlanMode::Sequential,
        seed: tail_seed,
        windows,
    })
}

pub fn plan_sequential(n_hat: usize, t_w: usize, i_w: usize) -> Result<WindowPlan> {
    plan_sequential_with(n_hat, t_w, i_w, None)
}

/// A seeded uniform permutation of `1..=N̂` cut into groups of `T_w`.
pub fn plan_shuffled(n_hat: usize, t_w: usize, seed: u64) -> Result<WindowPlan> {
    check_sizes(n_hat, t_w, 1)?;
    let mut perm: Vec<usize> = (1..=n_hat).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(WindowPlan {
        n: n_hat,
        t_w,
        i_w: 1,
        mode: PlanMode::Shuffled,
        seed: Some(seed),
        windows: perm.chunks(t_w).map(<[usize]>::to_vec).collect(),
    })
}

/// Expands an `n`-frame video and plans it.
pub fn plan_video(
    n: usize,
    t_w: usize,
    i_w: usize,
    mode: PlanMode,
    seed: u64,
) -> Result<WindowPlan> {
    let (n_hat, _) = expand_video(n, t_w)?;
    let mut plan = match mode {
        PlanMode::Sequential => plan_sequential(n_hat, t_w, i_w)?,
        PlanMode::Shuffled => plan_shuffled(n_hat, t_w, seed)?,
    };
    plan.n = n;
    Ok(plan)
}

/// Maps per-window outputs (one per slot, in window order) back to the `N`
/// real frames, dropping padded slots.
pub fn reassemble<O: Clone>(plan: &WindowPlan, outputs: &[Vec<O>]) -> Result<Vec<O>> {
    if outputs.len() != plan.windows.len() {
        return Err(Error::contract(format!(
            "{} window outputs for a {}-window plan",
            outputs.len(),
            plan.windows.len()
        )));
    }
    let mut frames: Vec<Option<O>> = vec![None; plan.n];
    for (w, out) in plan.windows.iter().zip(outputs) {
        if out.len() != w.len() {
            return Err(Error::contract(
                "window output length differs from window size",
            ));
        }
        for (&x, o) in w.iter().zip(out) {
            if x <= plan.n {
                frames[x - 1] = Some(o.clone());
            }
        }
    }
    frames
        .into_iter()
        .enumerate()
        .map(|(i, o)| o.ok_or_else(|| Error::contract(format!("no output for frame {}", i + 1))))
        .collect()
}

/// Reference frames (0-based) for `current` in an `n`-frame clip:
/// `ceil(N_ref/2)` before and `floor(N_ref/2)` after, uniformly without
/// replacement, shortfalls taken from the other side. `span` limits the
/// distance to the current frame. When fewer than `N_ref` distinct frames
/// exist the available ones repeat cyclically; a one-frame clip uses the
/// current frame itself.
pub fn bilateral_sample_within(
    current: usize,
    n: usize,
    n_ref: usize,
    span: Option<usize>,
    seed: u64,
) -> Result<Vec<usize>> {
    if n_ref == 0 {
        return Err(Error::contract("N_ref must be at least 1"));
    }
    if current >= n {
        return Err(Error::contract(format!(
            "frame {current} outside a {n}-frame clip"
        )));
    }
    if n == 1 {
        return Ok(vec![current; n_ref]);
    }
    let span = span.unwrap_or(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut before: Vec<usize> = (current.saturating_sub(span)..current).collect();
    let mut after: Vec<usize> = (current + 1..n.min(current + span + 1)).collect();
    let want_before = n_ref.div_ceil(2);
    let want_after = n_ref / 2;
    let nb = want_before.min(before.len()) + want_after.saturating_sub(after.len());
    let nb = nb.min(before.len());
    let na = (n_ref - nb).min(after.len());
    let pick = |v: &mut Vec<usize>, k: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let (chosen, _) = v.partial_shuffle(rng, k);
        let mut c = chosen.to_vec();
        c.sort_unstable();
        c
    };
    let mut out = pick(&mut before, nb, &mut rng);
    out.extend(pick(&mut after, na, &mut rng));
    let distinct = out.len();
    for i in distinct..n_ref {
        out.push(out[i % distinct]);
    }
    Ok(out)
}

pub fn bilateral_sample(current: usize, n: usize, n_ref: usize, seed: u64) -> Result<Vec<usize>> {
    bilateral_sample_within(current, n, n_ref, None, seed)
}

#[derive(Debug, Clone, Serialize)]
pub struct FpsReport {
    pub t_w: usize,
    /// Real frames processed per repeat (padding excluded).
    pub frames: usize,
    pub windows: usize,
    /// Median over repeats.
    pub fps: f64,
    pub fps_runs: Vec<f64>,
    pub window_latency_median_ms: f64,
    pub window_latency_max_ms: f64,
}

/// Runs `run_window` over every window of `plan`, `repeats` times after
/// `warmup` untimed windows, and reports the median frames per second
/// counting real frames only.
pub fn measure_fps(
    plan: &WindowPlan,
    warmup: usize,
    repeats: usize,
    mut run_window: impl FnMut(&[usize]) -> Result<()>,
) -> Result<FpsReport> {
    if warmup == 0 || repeats == 0 {
        return Err(Error::contract(
            "measure_fps needs warmup >= 1 and repeats >= 1",
        ));
    }
    for w in plan.windows.iter().cycle().take(warmup) {
        run_window(w)?;
    }
    let mut runs = Vec::with_capacity(repeats);
    let mut lat = Vec::new();
    for _ in 0..repeats {
        let start = Instant::now();
        for w in &plan.windows {
            let t = Instant::now();
            run_window(w)?;
            lat.push(t.elapsed().as_secs_f64() * 1e3);
        }
        runs.push(plan.n as f64 / start.elapsed().as_secs_f64().max(1e-12));
    }
    Ok(FpsReport {
        t_w: plan.t_w,
        frames: plan.n,
        windows: plan.windows.len(),
        fps: median(&runs),
        fps_runs: runs,
        window_latency_median_ms: median(&lat),
        window_latency_max_ms: lat.iter().copied().fold(0.0, f64::max),
    })
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};
    use rand::Rng;

    #[test]
    fn expand_examples() {
        assert_eq!(expand_video(10, 4).unwrap(), (12, vec![11, 12]));
        assert_eq!(expand_video(12, 4).unwrap(), (12, vec![]));
        assert_eq!(expand_video(1, 8).unwrap().1.len(), 7);
        assert!(expand_video(0, 4).is_err());
    }

    #[test]
    fn sequential_examples() {
        let p = plan_sequential(12, 4, 1).unwrap();
        assert_eq!(
            p.windows,
            vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![9, 10, 11, 12]]
        );
        let p = plan_sequential(16, 4, 2).unwrap();
        assert_eq!(p.windows[0], vec![1, 3, 5, 7]);
        assert_eq!(p.windows[1], vec![2, 4, 6, 8]);
        assert_eq!(p.windows[2], vec![9, 11, 13, 15]);
        // K = 0: everything is tail.
        let p = plan_sequential(8, 4, 3).unwrap();
        assert_eq!(p.windows, vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]]);
        p.check_partition().unwrap();
        let p = plan_sequential(20, 2, 3).unwrap();
        assert_eq!(p.windows[..3], [vec![1, 4], vec![2, 5], vec![3, 6]]);
        assert_eq!(p.windows.last().unwrap(), &vec![19, 20]);
        assert!(plan_sequential(10, 4, 1).is_err());
        let r = plan_sequential_with(20, 2, 3, Some(5)).unwrap();
        r.check_partition().unwrap();
        assert_eq!(r.windows[..6], p.windows[..6]);
    }

    #[test]
    fn shuffled_examples() {
        let a = plan_shuffled(24, 4, 9).unwrap();
        assert_eq!(a, plan_shuffled(24, 4, 9).unwrap());
        assert_ne!(a.windows, plan_shuffled(24, 4, 10).unwrap().windows);
        let one = plan_shuffled(6, 6, 3).unwrap();
        let mut w = one.windows[0].clone();
        w.sort_unstable();
        assert_eq!(w, (1..=6).collect::<Vec<_>>());
    }

    #[test]
    fn reassemble_examples() {
        let p = plan_video(12, 4, 1, PlanMode::Sequential, 0).unwrap();
        let outs: Vec<Vec<usize>> = p.windows.clone();
        assert_eq!(reassemble(&p, &outs).unwrap(), (1..=12).collect::<Vec<_>>());
        let p = plan_video(10, 4, 1, PlanMode::Sequential, 0).unwrap();
        assert_eq!(
            reassemble(&p, &p.windows).unwrap(),
            (1..=10).collect::<Vec<_>>()
        );
        assert!(reassemble(&p, &p.windows[..2]).is_err());
        assert_eq!(p.frame_of(11), 9);
    }

    #[test]
    fn plan_json_round_trip() {
        let p = plan_video(10, 4, 2, PlanMode::Shuffled, 7).unwrap();
        let s = p.to_json().unwrap();
        for key in [
            "\"N\"",
            "\"T_w\"",
            "\"I_w\"",
            "\"mode\"",
            "\"seed\"",
            "\"windows\"",
        ] {
            assert!(s.contains(key), "{s}");
        }
        assert_eq!(WindowPlan::from_json(&s).unwrap(), p);
    }

    #[test]
    fn bilateral_examples() {
        let r = bilateral_sample(14, 29, 4, 1).unwrap();
        assert_eq!(r.iter().filter(|&&i| i < 14).count(), 2);
        assert_eq!(r.iter().filter(|&&i| i > 14).count(), 2);
        let r = bilateral_sample(0, 29, 4, 1).unwrap();
        assert!(r.iter().all(|&i| i > 0));
        let r = bilateral_sample(28, 29, 3, 1).unwrap();
        assert!(r.iter().all(|&i| i < 28));
        assert_eq!(bilateral_sample(0, 1, 3, 1).unwrap(), vec![0, 0, 0]);
        let r = bilateral_sample_within(10, 29, 4, Some(3), 2).unwrap();
        assert!(r.iter().all(|&i| (7..=13).contains(&i) && i != 10));
        assert_eq!(bilateral_sample(1, 3, 4, 0).unwrap().len(), 4);
        assert!(bilateral_sample(5, 5, 2, 0).is_err());
    }

    #[test]
    fn bilateral_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..1000 {
            let n = rng.gen_range(2..40);
            let cur = rng.gen_range(0..n);
            let n_ref = rng.gen_range(1..n);
            let r = bilateral_sample(cur, n, n_ref, seed).unwrap();
            assert_eq!(r.len(), n_ref);
            assert!(r.iter().all(|&i| i < n && i != cur));
            let mut s = r.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), n_ref);
            let before = r.iter().filter(|&&i| i < cur).count();
            if cur >= n_ref.div_ceil(2) && n - 1 - cur >= n_ref / 2 {
                assert_eq!(before, n_ref.div_ceil(2));
            }
        }
    }

    #[test]
    fn fps_counts_real_frames() {
        let p = plan_video(10, 4, 1, PlanMode::Sequential, 0).unwrap();
        let mut calls = 0;
        let r = measure_fps(&p, 1, 3, |_| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(r.frames, 10);
        assert_eq!(calls, 1 + 3 * 3);
        assert_eq!(r.fps_runs.len(), 3);
        assert!(measure_fps(&p, 0, 1, |_| Ok(())).is_err());
    }

    proptest! {
        #[test]
        fn plans_partition(n in 1usize..200, t_w in 1usize..16, i_w in 1usize..6, seed in any::<u64>()) {
            for mode in [PlanMode::Sequential, PlanMode::Shuffled] {
                let p = plan_video(n, t_w, i_w, mode, seed).unwrap();
                p.check_partition().unwrap();
                prop_assert_eq!(p.n_hat(), n.div_ceil(t_w) * t_w);
                let labels = reassemble(&p, &p.windows).unwrap();
                prop_assert_eq!(labels, (1..=n).collect::<Vec<_>>());
            }
        }
    }
}
