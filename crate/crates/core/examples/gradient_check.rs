//! Checks recorded gradients of a small composite function against central
//! differences. The 64-bit check is self-contained; the 32-bit one compares
//! the f32 engine's gradients with differences taken in f64, since pure f32
//! differences are dominated by rounding noise.

use stvod::error::Result;
use stvod::numerics::{grad_check_mixed, grad_check_probe, Graph, Probe, Real, Tensor, Var};

struct Composite;

impl Probe for Composite {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, x: &[Var]) -> Result<Var> {
        let h = g.matmul(x[0], x[1])?;
        let h = g.sigmoid(h);
        let p = g.softmax_rows(h)?;
        let s = g.mul(p, h)?;
        Ok(g.sum(s))
    }
}

fn inputs<T: Real>() -> Vec<Tensor<T>> {
    let a = Tensor::from_fn(vec![3, 4], |i| T::lit(((i * 7 % 11) as f64 - 5.0) / 4.0));
    let b = Tensor::from_fn(vec![4, 5], |i| T::lit(((i * 5 % 13) as f64 - 6.0) / 5.0));
    vec![a, b]
}

fn main() -> Result<()> {
    let e64 = grad_check_probe(&Composite, None, &inputs::<f64>(), 1e-6, None)?;
    let e32 = grad_check_mixed(&Composite, None, &inputs::<f32>(), 1e-6, None)?;
    println!("max relative error, f64: {e64:.2e}");
    println!("max relative error, f32 engine: {e32:.2e}");
    Ok(())
}
