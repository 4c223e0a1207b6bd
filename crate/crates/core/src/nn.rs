//! Parameterised building blocks shared by the detector stages.

use rand::Rng;

use crate::numerics::{Graph, Init, ParamId, Real, Var};
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(Self {
            weight: sub.xavier("weight", din, dout)?,
            bias: sub.zeros("bias", &[dout])?,
            din,
            dout,
        })
    }

    /// Zero weights and bias.
    pub fn zeroed<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(Self {
            weight: sub.zeros("weight", &[din, dout])?,
            bias: sub.zeros("bias", &[dout])?,
            din,
            dout,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, name: &str, d: usize) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(Self {
            gain: sub.fill("gain", &[d], 1.0)?,
            bias: sub.zeros("bias", &[d])?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer position-wise feed-forward block, `d -> hidden -> d`.
#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(Self {
            fc1: Linear::new(&mut sub, "fc1", d, hidden)?,
            fc2: Linear::new(&mut sub, "fc2", hidden, d)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

/// `LayerNorm(x + FFN(x))`.
#[derive(Debug, Clone, Copy)]
pub struct FfnBlock {
    pub ffn: Ffn,
    pub norm: LayerNorm,
}

impl FfnBlock {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(Self {
            ffn: Ffn::new(&mut sub, "ffn", d, hidden)?,
            norm: LayerNorm::new(&mut sub, "norm", d)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let f = self.ffn.forward(g, x)?;
        let s = g.add(x, f)?;
        self.norm.forward(g, s)
    }
}

/// Numerically safe logit of a probability.
pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-5, 1.0 - 1e-5);
    (p / (1.0 - p)).ln()
}

/// 2-d convolution on `[H, W, C]` maps via im2col and one matmul.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub lin: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            lin: Linear::new(init, name, kernel * kernel * cin, cout)?,
            kernel,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (h, w) = match g.shape(x) {
            [h, w, _] => (*h, *w),
            s => return Err(crate::Error::dim("conv2d", s, &[0, 0, 0])),
        };
        let cols = g.im2col(x, self.kernel, self.stride, self.pad)?;
        let y = self.lin.forward(g, cols)?;
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        g.reshape(y, &[oh, ow, self.lin.dout])
    }
}

/// Stack of linear layers with relu between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        dims: &[usize],
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut sub, &i.to_string(), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has layers")
    }
}
