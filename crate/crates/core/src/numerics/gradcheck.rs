//! Central finite-difference validation of recorded gradients.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};

/// Scalar-valued function under test. Receives one [`Var`] per input tensor.
pub trait CheckFn<T: Real>: Fn(&mut Graph<'_, T>, &[Var]) -> Result<Var> {}
impl<T: Real, F: Fn(&mut Graph<'_, T>, &[Var]) -> Result<Var>> CheckFn<T> for F {}

/// A scalar function that can be evaluated at any precision, so one
/// definition serves the 32-bit and the 64-bit checks.
pub trait Probe {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, inputs: &[Var]) -> Result<Var>;
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

fn eval<T: Real>(
    f: &impl CheckFn<T>,
    store: Option<&ParamStore<T>>,
    inputs: &[Tensor<T>],
) -> Result<f64> {
    let mut g = match store {
        Some(s) => Graph::inference(s),
        None => Graph::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t, false)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok(g.item(out).f64())
}

/// Maximum over all input coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<T: Real>(f: impl CheckFn<T>, inputs: &[Tensor<T>], eps: f64) -> Result<f64> {
    let (gi, _) = analytic(&f, None, inputs)?;
    sweep(&f, None, inputs, &gi, &[], eps, None)
}

/// Same as [`grad_check`] but also perturbs every trainable parameter of
/// `store`. `max_coords` caps how many coordinates per tensor are probed
/// (evenly strided) to bound runtime.
pub fn grad_check_with_params<T: Real>(
    store: &ParamStore<T>,
    f: impl CheckFn<T>,
    inputs: &[Tensor<T>],
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64> {
    let (gi, gp) = analytic(&f, Some(store), inputs)?;
    sweep(&f, Some(store), inputs, &gi, &gp, eps, max_coords)
}

/// Checks the gradients recorded by the 32-bit engine against central
/// differences of the same probe evaluated in 64-bit. Differencing in
/// 32-bit has an absolute noise floor near `1e-7 / eps`, which swamps
/// small gradient coordinates; this isolates the backward pass itself.
pub fn grad_check_mixed(
    probe: &impl Probe,
    store: Option<&ParamStore<f32>>,
    inputs: &[Tensor<f32>],
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64> {
    let f32_fn = |g: &mut Graph<'_, f32>, x: &[Var]| probe.eval(g, x);
    let f64_fn = |g: &mut Graph<'_, f64>, x: &[Var]| probe.eval(g, x);
    let (gi, gp) = analytic(&f32_fn, store, inputs)?;
    let store64 = store.map(|s| s.cast::<f64>());
    let inputs64: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    sweep(
        &f64_fn,
        store64.as_ref(),
        &inputs64,
        &gi,
        &gp,
        eps,
        max_coords,
    )
}

/// [`grad_check_with_params`] for a [`Probe`] at a single precision.
pub fn grad_check_probe<T: Real>(
    probe: &impl Probe,
    store: Option<&ParamStore<T>>,
    inputs: &[Tensor<T>],
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64> {
    let f = |g: &mut Graph<'_, T>, x: &[Var]| probe.eval(g, x);
    let (gi, gp) = analytic(&f, store, inputs)?;
    sweep(&f, store, inputs, &gi, &gp, eps, max_coords)
}

fn probe_coords(n: usize, max_coords: Option<usize>) -> Vec<usize> {
    match max_coords {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

type ParamGrads = Vec<(String, Vec<f64>)>;

fn analytic<T: Real>(
    f: &impl CheckFn<T>,
    store: Option<&ParamStore<T>>,
    inputs: &[Tensor<T>],
) -> Result<(Vec<Vec<f64>>, ParamGrads)> {
    let mut g = match store {
        Some(s) => Graph::with_params(s),
        None => Graph::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t, true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let gi = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| match grads.get(*v) {
            Some(a) => a.iter().map(|x| x.f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    let gp = match store {
        Some(s) => g
            .param_grads(&grads)
            .into_iter()
            .map(|(id, v)| (s.name(id).to_string(), v.iter().map(|x| x.f64()).collect()))
            .collect(),
        None => Vec::new(),
    };
    Ok((gi, gp))
}

fn sweep<U: Real>(
    f: &impl CheckFn<U>,
    store: Option<&ParamStore<U>>,
    inputs: &[Tensor<U>],
    input_grads: &[Vec<f64>],
    param_grads: &[(String, Vec<f64>)],
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::contract("grad_check eps must be positive"));
    }
    // Scalar check up front so a bad probe fails even with no coordinates.
    eval(f, store, inputs)?;
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (ti, analytic) in input_grads.iter().enumerate() {
        for j in probe_coords(inputs[ti].numel(), max_coords) {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = U::lit(orig.f64() + eps);
            let up = eval(f, store, &work)?;
            work[ti].data_mut()[j] = U::lit(orig.f64() - eps);
            let down = eval(f, store, &work)?;
            work[ti].data_mut()[j] = orig;
            let n = (up - down) / (2.0 * eps);
            let e = rel_err(analytic[j], n);
            if e > 1e-6 {
                log_coord(&format!("input{ti}"), j, analytic[j], n);
            }
            worst = worst.max(e);
        }
    }

    if let Some(store) = store {
        let mut perturbed = store.clone();
        for (id, name, t) in store.iter() {
            if !t.requires_grad() {
                continue;
            }
            let zeros;
            let analytic = match param_grads.iter().find(|(n, _)| n == name) {
                Some((_, g)) => g,
                None => {
                    zeros = vec![0.0; t.numel()];
                    &zeros
                }
            };
            for j in probe_coords(t.numel(), max_coords) {
                let orig = t.data()[j];
                perturbed.get_mut(id).data_mut()[j] = U::lit(orig.f64() + eps);
                let up = eval(f, Some(&perturbed), inputs)?;
                perturbed.get_mut(id).data_mut()[j] = U::lit(orig.f64() - eps);
                let down = eval(f, Some(&perturbed), inputs)?;
                perturbed.get_mut(id).data_mut()[j] = orig;
                let n = (up - down) / (2.0 * eps);
                let e = rel_err(analytic[j], n);
                if e > 1e-6 {
                    log_coord(name, j, analytic[j], n);
                }
                worst = worst.max(e);
            }
        }
    }
    Ok(worst)
}

fn log_coord(name: &str, j: usize, a: f64, n: f64) {
    if std::env::var_os("STVOD_GRADCHECK_VERBOSE").is_some() {
        eprintln!("gradcheck: {name}[{j}] analytic {a:e} numeric {n:e}");
    }
}
