use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

const TEMPERATURE: f64 = 10_000.0;

/// Position of index `i` along an axis of length `n`, scaled to `[0, 2*pi]`.
fn phase(i: usize, n: usize) -> f64 {
    if n > 1 {
        i as f64 / (n - 1) as f64 * std::f64::consts::TAU
    } else {
        0.0
    }
}

/// One axis of the encoding: `d_half` channels alternating sin/cos.
pub fn axis_encoding(pos: f64, d_half: usize) -> Vec<f64> {
    (0..d_half)
        .map(|c| {
            let freq = TEMPERATURE.powf((2 * (c / 2)) as f64 / d_half as f64);
            let a = pos / freq;
            if c % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// 2-d sine encoding `[H, W, d]`: the first `d/2` channels encode the row,
/// the rest the column. `(0, 0)` has phase zero on both axes.
pub fn sine_positional_encoding<T: Real>(h: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::contract(format!(
            "positional width {d} not divisible by 4"
        )));
    }
    let half = d / 2;
    let rows: Vec<Vec<f64>> = (0..h).map(|y| axis_encoding(phase(y, h), half)).collect();
    let cols: Vec<Vec<f64>> = (0..w).map(|x| axis_encoding(phase(x, w), half)).collect();
    let mut data = Vec::with_capacity(h * w * d);
    for row in &rows {
        for col in &cols {
            data.extend(row.iter().chain(col).map(|&v| T::lit(v)));
        }
    }
    Tensor::new(vec![h, w, d], data)
}
