//! Short two-stage training of one variant at reduced width, then the
//! single-frame baseline and the temporal model side by side. Pass the
//! variant name as the first argument (default transvod).

use stvod::dataset::{generate_synthetic, SynthConfig};
use stvod::eval::Subset;
use stvod::model::{evaluate_clips, InferenceOptions, ModelConfig};
use stvod::spatial::SpatialConfig;
use stvod::temporal::{TemporalConfig, Variant};
use stvod::train::{train_two_stage, TrainConfig};

fn main() -> stvod::error::Result<()> {
    let variant: Variant = std::env::args()
        .nth(1)
        .as_deref()
        .unwrap_or("transvod")
        .parse()?;
    let (train, test) = generate_synthetic(&SynthConfig {
        train_clips: 12,
        test_clips: 4,
        seed: 5,
        ..SynthConfig::default()
    })?;
    let mut temporal = TemporalConfig::for_variant(variant);
    temporal.window = temporal.window.min(6);
    let mc = ModelConfig {
        spatial: SpatialConfig {
            d: 32,
            queries: 20,
            ffn_hidden: 64,
            ..SpatialConfig::default()
        },
        temporal,
    }
    .clamped();
    let tc = TrainConfig {
        max_steps_spatial: 300,
        max_steps_temporal: 100,
        seed: 5,
        ..TrainConfig::default()
    };
    let (model, store, report) = train_two_stage(&mc, &tc, &train, |s| {
        if s.step % 50 == 0 {
            println!(
                "stage {} step {}/{}: loss {:.3}",
                s.stage, s.step, s.total_steps, s.loss
            );
        }
    })?;
    println!(
        "spatial weights frozen in stage 2: {}",
        report.spatial_hash_start == report.spatial_hash_end
    );
    let opts = InferenceOptions::default();
    for subset in [Subset::All, Subset::Occluded] {
        let base = evaluate_clips(&model, &store, &test, false, subset, &opts)?;
        let temp = evaluate_clips(&model, &store, &test, true, subset, &opts)?;
        println!(
            "{subset:?}: single-frame mAP50 {:.3}, {variant} mAP50 {:.3}",
            base.map50.unwrap_or(0.0),
            temp.map50.unwrap_or(0.0)
        );
    }
    Ok(())
}
