use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm};
use crate::numerics::{Graph, Init, Real, Var};

/// Toy convolutional backbone: a stride-4 stem, then three stride-2
/// stages giving maps at strides 8, 16 and 32, each with `d` channels.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: [Conv2d; 2],
    pub stages: [Conv2d; 3],
    pub norms: [LayerNorm; 3],
    pub d: usize,
    pub fusion: bool,
}

/// Per-level maps and the fused stride-8 map.
#[derive(Debug, Clone)]
pub struct BackboneFeatures {
    pub levels: Vec<Var>,
    pub fused: Var,
}

pub const LEVEL_STRIDES: [usize; 3] = [8, 16, 32];

impl Backbone {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d: usize,
        fusion: bool,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        let c1 = (d / 4).max(8);
        let c2 = (d / 2).max(8);
        Ok(Self {
            stem: [
                Conv2d::new(&mut sub, "stem0", 3, c1, 3, 2)?,
                Conv2d::new(&mut sub, "stem1", c1, c2, 3, 2)?,
            ],
            stages: [
                Conv2d::new(&mut sub, "stage0", c2, d, 3, 2)?,
                Conv2d::new(&mut sub, "stage1", d, d, 3, 2)?,
                Conv2d::new(&mut sub, "stage2", d, d, 3, 2)?,
            ],
            norms: [
                LayerNorm::new(&mut sub, "norm0", d)?,
                LayerNorm::new(&mut sub, "norm1", d)?,
                LayerNorm::new(&mut sub, "norm2", d)?,
            ],
            d,
            fusion,
        })
    }

    /// `image: [H, W, 3]` with `H` and `W` multiples of 32.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<BackboneFeatures> {
        match g.shape(image) {
            [h, w, 3] if h % 32 == 0 && w % 32 == 0 && *h > 0 && *w > 0 => {}
            s => return Err(Error::dim("backbone input", s, &[32, 32, 3])),
        }
        let mut x = image;
        for conv in &self.stem {
            x = conv.forward(g, x)?;
            x = g.relu(x);
        }
        let mut levels = Vec::with_capacity(3);
        for (conv, norm) in self.stages.iter().zip(&self.norms) {
            x = conv.forward(g, x)?;
            x = g.relu(x);
            let (h, w) = (g.shape(x)[0], g.shape(x)[1]);
            let flat = g.reshape(x, &[h * w, self.d])?;
            let flat = norm.forward(g, flat)?;
            x = g.reshape(flat, &[h, w, self.d])?;
            levels.push(x);
        }
        let fused = if self.fusion {
            let (h, w) = (g.shape(levels[0])[0], g.shape(levels[0])[1]);
            let mut acc = levels[0];
            for &lvl in &levels[1..] {
                let up = upsample(g, lvl, h, w)?;
                acc = g.add(acc, up)?;
            }
            acc
        } else {
            levels[0]
        };
        Ok(BackboneFeatures { levels, fused })
    }
}

/// Bilinear resize of `[h0, w0, c]` to `[h, w, c]` (align-corners).
pub fn upsample<T: Real>(g: &mut Graph<'_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(x)[2];
    let norm = |i: usize, n: usize| {
        if n > 1 {
            i as f64 / (n - 1) as f64
        } else {
            0.5
        }
    };
    let pts: Vec<T> = (0..h)
        .flat_map(|y| (0..w).flat_map(move |xx| [T::lit(norm(xx, w)), T::lit(norm(y, h))]))
        .collect();
    let p = g.constant(vec![h * w, 2], pts)?;
    let s = g.bilinear_sample(x, p)?;
    g.reshape(s, &[h, w, c])
}
