//! Saves freshly initialized weights, loads them into a model built from a
//! different seed and confirms the detections are bit-identical.

use stvod::checkpoint::{load_into, save};
use stvod::dataset::{generate_synthetic, SynthConfig};
use stvod::model::{predict_clips, InferenceOptions, Model, ModelConfig};
use stvod::spatial::SpatialConfig;
use stvod::temporal::{TemporalConfig, Variant};

fn main() -> stvod::error::Result<()> {
    let (_, clips) = generate_synthetic(&SynthConfig {
        train_clips: 0,
        test_clips: 1,
        frames: 6,
        ..SynthConfig::default()
    })?;
    let mc = ModelConfig {
        spatial: SpatialConfig::default(),
        temporal: TemporalConfig::for_variant(Variant::TransVodPp),
    }
    .clamped();
    let (model, store) = Model::new::<f32>(&mc, 1)?;
    let path = std::env::temp_dir().join("stvod-example.tvod");
    save(&store, &path)?;
    let (_, mut other) = Model::new::<f32>(&mc, 2)?;
    load_into(&mut other, &path)?;
    let opts = InferenceOptions::default();
    let a = predict_clips(&model, &store, &clips, true, &opts)?;
    let b = predict_clips(&model, &other, &clips, true, &opts)?;
    println!(
        "{} bytes, {} tensors",
        std::fs::metadata(&path)?.len(),
        store.len()
    );
    println!("detections identical after reload: {}", a == b);
    std::fs::remove_file(&path)?;
    Ok(())
}
