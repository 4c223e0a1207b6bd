//! Frames per second of lite inference as the window grows.

use stvod::dataset::{generate_synthetic, SynthConfig};
use stvod::model::{bench_lite, InferenceOptions, Model, ModelConfig};
use stvod::spatial::SpatialConfig;
use stvod::temporal::{TemporalConfig, Variant};

fn main() -> stvod::error::Result<()> {
    let (_, test) = generate_synthetic(&SynthConfig {
        train_clips: 0,
        test_clips: 1,
        ..SynthConfig::default()
    })?;
    let mc = ModelConfig {
        spatial: SpatialConfig::default(),
        temporal: TemporalConfig::for_variant(Variant::Lite),
    }
    .clamped();
    let (model, store) = Model::new::<f32>(&mc, 0)?;
    let rows = bench_lite(
        &model,
        &store,
        &test[0],
        &[1, 2, 4, 8, 12],
        &InferenceOptions::default(),
        1,
        3,
    )?;
    for r in rows {
        println!(
            "T_w={:>2}: {:>3} windows, {:6.1} fps, median window {:6.1} ms",
            r.t_w, r.windows, r.fps, r.window_latency_median_ms
        );
    }
    Ok(())
}
