//! COCO-style mAP on a hand-made set of detections.

use stvod::eval::{evaluate, Detection, EvalGt, EvalImage};

fn gt(class_id: usize, bbox: [f64; 4]) -> EvalGt {
    EvalGt {
        class_id,
        bbox,
        ignore: false,
    }
}

fn det(class_id: usize, score: f64, bbox: [f64; 4]) -> Detection {
    Detection {
        class_id,
        score,
        bbox,
    }
}

fn main() -> stvod::error::Result<()> {
    let images = vec![
        EvalImage {
            gts: vec![gt(0, [0.3, 0.3, 0.2, 0.2]), gt(1, [0.7, 0.6, 0.3, 0.2])],
            detections: vec![
                det(0, 0.9, [0.31, 0.3, 0.2, 0.2]),
                det(1, 0.8, [0.7, 0.62, 0.3, 0.2]),
                det(0, 0.4, [0.8, 0.8, 0.1, 0.1]),
            ],
        },
        EvalImage {
            gts: vec![gt(0, [0.5, 0.5, 0.4, 0.4])],
            detections: vec![det(0, 0.6, [0.45, 0.5, 0.4, 0.35])],
        },
    ];
    let classes = vec!["disc".to_string(), "square".to_string()];
    let report = evaluate(&images, &classes, 64, 64)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
