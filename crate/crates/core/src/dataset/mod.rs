//! Synthetic moving-shapes videos and their on-disk format.

mod io;
mod synth;

pub use io::{
    load_clip, load_split, parse_annotations, read_ppm, save_clip, save_split, write_ppm,
    ANNOTATIONS_FILE,
};
pub use synth::{
    clip_seeds, clip_tracks, generate_synthetic, inside, simulate_tracks, track_box, SynthConfig,
    Track,
};

use serde::{Deserialize, Serialize};

use crate::matching::BoxCxcywh;
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Ring];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Ring => "ring",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaBucket {
    Small,
    Medium,
    Large,
}

impl AreaBucket {
    /// COCO thresholds on pixel area: below 32^2, below 96^2, the rest.
    pub fn of_area(pixels: f64) -> Self {
        if pixels < 32.0 * 32.0 {
            AreaBucket::Small
        } else if pixels < 96.0 * 96.0 {
            AreaBucket::Medium
        } else {
            AreaBucket::Large
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub class_id: usize,
    /// Normalized `(cx, cy, w, h)`.
    pub bbox: BoxCxcywh,
    /// Hidden in the image; the box is amodal.
    pub occluded: bool,
}

impl Object {
    pub fn area_bucket(&self, width: usize, height: usize) -> AreaBucket {
        AreaBucket::of_area(self.bbox[2] * width as f64 * self.bbox[3] * height as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// Interleaved RGB bytes, row-major.
    pub image: Vec<u8>,
    pub objects: Vec<Object>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub clip_id: String,
    pub width: usize,
    pub height: usize,
    pub classes: Vec<String>,
    pub frames: Vec<Frame>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Network input `[H, W, 3]` for frame `t`, scaled to roughly `[-1, 1]`.
    pub fn image_tensor<T: Real>(&self, t: usize) -> Tensor<T> {
        let img = &self.frames[t].image;
        Tensor::from_fn(vec![self.height, self.width, 3], |i| {
            T::lit(img[i] as f64 / 127.5 - 1.0)
        })
    }

    /// Horizontally mirrored copy (images and boxes).
    pub fn flipped(&self) -> Clip {
        let (w, h) = (self.width, self.height);
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let mut image = vec![0; f.image.len()];
                for y in 0..h {
                    for x in 0..w {
                        let src = (y * w + x) * 3;
                        let dst = (y * w + (w - 1 - x)) * 3;
                        image[dst..dst + 3].copy_from_slice(&f.image[src..src + 3]);
                    }
                }
                let objects = f
                    .objects
                    .iter()
                    .map(|o| Object {
                        bbox: [1.0 - o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]],
                        ..o.clone()
                    })
                    .collect();
                Frame {
                    index: f.index,
                    image,
                    objects,
                }
            })
            .collect();
        Clip {
            frames,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests;
