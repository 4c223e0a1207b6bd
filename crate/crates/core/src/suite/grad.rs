//! Finite-difference checks of every differentiable op and layer. Each case
//! runs twice: 32-bit gradients against 64-bit central differences, and a
//! pure 64-bit recomputation.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{DeformableAttention, MultiHeadAttention};
use crate::error::Result;
use crate::matching::{
    detection_loss, focal_loss, giou_loss, BoxCxcywh, Focal, GroundTruth, LossConfig,
};
use crate::numerics::{
    grad_check_mixed, grad_check_probe, Graph, Init, ParamStore, Probe, Real, Tensor, Var,
};
use crate::spatial::{Heads, Prediction, Queries};
use crate::temporal::{roi_extract, QrfLayer, TdtdLayer, TdteLayer, TqeLayer};

pub const TOL32: f64 = 1e-3;
pub const TOL64: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradRow {
    pub module: &'static str,
    pub name: String,
    pub err32: f64,
    pub err64: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
    pub seconds: f64,
    pub pass: bool,
}

/// `sum(x * w)` with fixed, distinct weights so no coordinate cancels.
fn weighted_sum<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let n = g.value(x).len();
    let w: Vec<T> = (0..n)
        .map(|i| T::lit(0.3 + 0.7 * ((i * 7) % 11) as f64 / 11.0))
        .collect();
    let w = g.constant(g.shape(x).to_vec(), w)?;
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-a..a))
}

/// Uniform magnitudes in `[0.1, 1)` with random signs, away from kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, a: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-a..a);
        }
    }
}

/// Softmax is shift invariant, so attention key biases have an exactly zero
/// gradient; checking them only measures rounding noise.
fn freeze_key_bias(store: &mut ParamStore<f64>, attn: &[MultiHeadAttention]) {
    for a in attn {
        store.get_mut(a.key.bias).set_requires_grad(false);
    }
}

struct Runner {
    rows: Vec<GradRow>,
}

impl Runner {
    #[allow(clippy::too_many_arguments)]
    fn check<P: Probe>(
        &mut self,
        module: &'static str,
        name: &str,
        probe: &P,
        store: Option<&ParamStore<f64>>,
        inputs: &[Tensor<f64>],
        eps32: f64,
        eps64: f64,
        max_coords: Option<usize>,
    ) -> Result<()> {
        let s32 = store.map(|s| s.cast::<f32>());
        let i32: Vec<Tensor<f32>> = inputs.iter().map(Tensor::cast).collect();
        let err32 = grad_check_mixed(probe, s32.as_ref(), &i32, eps32, max_coords)?;
        let err64 = grad_check_probe(probe, store, inputs, eps64, max_coords)?;
        self.rows.push(GradRow {
            module,
            name: name.to_string(),
            err32,
            err64,
            pass: err32 < TOL32 && err64 < TOL64,
        });
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Matmul,
    MatmulNt,
    Linear,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    AddScalar,
    Relu,
    Sigmoid,
    Abs,
    Softmax0,
    Softmax1,
    SoftmaxRows,
    LayerNorm,
    Bilinear,
    SliceCols,
    SliceRows,
    ConcatCols,
    ConcatRows,
    GatherRows,
    Reshape,
    Transpose,
    Sum,
    Mean,
    Im2col,
    GroupWeightedSum,
    RowMatvec,
}

struct OpProbe(Op);

impl Probe for OpProbe {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, v: &[Var]) -> Result<Var> {
        let y = match self.0 {
            Op::Matmul => g.matmul(v[0], v[1])?,
            Op::MatmulNt => g.matmul_nt(v[0], v[1])?,
            Op::Linear => g.linear(v[0], v[1], Some(v[2]))?,
            Op::Add => g.add(v[0], v[1])?,
            Op::Sub => g.sub(v[0], v[1])?,
            Op::Mul => g.mul(v[0], v[1])?,
            Op::AddRow => g.add_row(v[0], v[1])?,
            Op::Scale => g.scale(v[0], T::lit(-1.7)),
            Op::AddScalar => {
                let s = g.add_scalar(v[0], T::lit(0.3));
                g.mul(s, v[0])?
            }
            Op::Relu => g.relu(v[0]),
            Op::Sigmoid => g.sigmoid(v[0]),
            Op::Abs => g.abs(v[0]),
            Op::Softmax0 => g.softmax(v[0], 0)?,
            Op::Softmax1 => g.softmax(v[0], 1)?,
            Op::SoftmaxRows => g.softmax_rows(v[0])?,
            Op::LayerNorm => g.layer_norm(v[0], v[1], v[2])?,
            Op::Bilinear => g.bilinear_sample(v[0], v[1])?,
            Op::SliceCols => g.slice_cols(v[0], 1, 2)?,
            Op::SliceRows => g.slice_rows(v[0], 1, 2)?,
            Op::ConcatCols => g.concat_cols(&[v[0], v[1], v[0]])?,
            Op::ConcatRows => g.concat_rows(&[v[1], v[0]])?,
            Op::GatherRows => g.gather_rows(v[0], &[2, 0, 2, 1, 2])?,
            Op::Reshape => g.reshape(v[0], &[2, 6])?,
            Op::Transpose => g.transpose(v[0])?,
            Op::Sum => {
                let p = g.mul(v[0], v[0])?;
                g.sum(p)
            }
            Op::Mean => {
                let p = g.mul(v[0], v[0])?;
                g.mean(p)
            }
            Op::Im2col => g.im2col(v[0], 3, 2, 1)?,
            Op::GroupWeightedSum => g.group_weighted_sum(v[0], v[1])?,
            Op::RowMatvec => g.row_matvec(v[0], v[1], 4)?,
        };
        weighted_sum(g, y)
    }
}

/// Sampling points at least 0.2 px from every grid line of an `h x w` map.
fn off_grid_points(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let data = (0..n)
        .flat_map(|_| {
            let px = rng.gen_range(0..w - 1) as f64 + rng.gen_range(0.2..0.8);
            let py = rng.gen_range(0..h - 1) as f64 + rng.gen_range(0.2..0.8);
            [px / (w - 1) as f64, py / (h - 1) as f64]
        })
        .collect();
    Tensor::new(vec![n, 2], data).expect("point tensor")
}

fn numerics_cases(run: &mut Runner, rng: &mut ChaCha8Rng) -> Result<()> {
    use Op::*;
    let m34 = |rng: &mut ChaCha8Rng| uniform(rng, &[3, 4], 1.0);
    let cases: Vec<(&str, Op, Vec<Tensor<f64>>)> = vec![
        ("matmul", Matmul, vec![m34(rng), uniform(rng, &[4, 2], 1.0)]),
        (
            "matmul_nt",
            MatmulNt,
            vec![m34(rng), uniform(rng, &[2, 4], 1.0)],
        ),
        (
            "linear",
            Linear,
            vec![
                m34(rng),
                uniform(rng, &[4, 2], 1.0),
                uniform(rng, &[2], 1.0),
            ],
        ),
        ("add", Add, vec![m34(rng), m34(rng)]),
        ("sub", Sub, vec![m34(rng), m34(rng)]),
        ("mul", Mul, vec![m34(rng), m34(rng)]),
        ("add_row", AddRow, vec![m34(rng), uniform(rng, &[4], 1.0)]),
        ("scale", Scale, vec![m34(rng)]),
        ("add_scalar", AddScalar, vec![m34(rng)]),
        ("relu", Relu, vec![away_from_zero(rng, &[3, 4])]),
        ("sigmoid", Sigmoid, vec![uniform(rng, &[3, 4], 3.0)]),
        ("abs", Abs, vec![away_from_zero(rng, &[3, 4])]),
        ("softmax_axis0", Softmax0, vec![uniform(rng, &[3, 4], 2.0)]),
        ("softmax_axis1", Softmax1, vec![uniform(rng, &[3, 4], 2.0)]),
        (
            "softmax_rows",
            SoftmaxRows,
            vec![uniform(rng, &[3, 4], 2.0)],
        ),
        (
            "layer_norm",
            LayerNorm,
            vec![m34(rng), uniform(rng, &[4], 1.0), uniform(rng, &[4], 1.0)],
        ),
        (
            "bilinear_sample",
            Bilinear,
            vec![uniform(rng, &[4, 5, 3], 1.0), off_grid_points(rng, 6, 4, 5)],
        ),
        ("slice_cols", SliceCols, vec![m34(rng)]),
        ("slice_rows", SliceRows, vec![m34(rng)]),
        (
            "concat_cols",
            ConcatCols,
            vec![m34(rng), uniform(rng, &[3, 2], 1.0)],
        ),
        (
            "concat_rows",
            ConcatRows,
            vec![m34(rng), uniform(rng, &[2, 4], 1.0)],
        ),
        ("gather_rows", GatherRows, vec![m34(rng)]),
        ("reshape", Reshape, vec![m34(rng)]),
        ("transpose", Transpose, vec![m34(rng)]),
        ("sum", Sum, vec![m34(rng)]),
        ("mean", Mean, vec![m34(rng)]),
        ("im2col", Im2col, vec![uniform(rng, &[5, 5, 2], 1.0)]),
        (
            "group_weighted_sum",
            GroupWeightedSum,
            vec![uniform(rng, &[6, 2], 1.0), uniform(rng, &[12, 5], 1.0)],
        ),
        (
            "row_matvec",
            RowMatvec,
            vec![uniform(rng, &[3, 2], 1.0), uniform(rng, &[3, 8], 1.0)],
        ),
    ];
    for (name, op, inputs) in cases {
        run.check(
            "numerics",
            name,
            &OpProbe(op),
            None,
            &inputs,
            1e-6,
            1e-6,
            None,
        )?;
    }
    Ok(())
}

struct MhaProbe(MultiHeadAttention);

impl Probe for MhaProbe {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, x: &[Var]) -> Result<Var> {
        let o = self.0.forward(g, x[0], x[1], x[2])?;
        weighted_sum(g, o)
    }
}

struct DeformProbe(DeformableAttention);

impl Probe for DeformProbe {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, x: &[Var]) -> Result<Var> {
        let o = self.0.forward(g, x[0], x[1], &x[2..])?;
        weighted_sum(g, o)
    }
}

fn attention_cases(run: &mut Runner, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::<f64>::new();
    let (mha, single, multi) = {
        let mut init = Init::new(&mut store, rng);
        (
            MultiHeadAttention::new(&mut init, "mha", 4, 2)?,
            DeformableAttention::new(&mut init, "deform", 4, 2, 2, 1)?,
            DeformableAttention::new(&mut init, "temporal", 4, 2, 2, 2)?,
        )
    };
    perturb(&mut store, rng, 0.2);
    freeze_key_bias(&mut store, &[mha]);

    let inputs = [
        uniform(rng, &[2, 4], 1.0),
        uniform(rng, &[3, 4], 1.0),
        uniform(rng, &[3, 4], 1.0),
    ];
    run.check(
        "attention",
        "multi_head_attn",
        &MhaProbe(mha),
        Some(&store),
        &inputs,
        1e-4,
        1e-5,
        None,
    )?;

    let refs = Tensor::new(vec![2, 2], vec![0.31, 0.62, 0.77, 0.18])?;
    let inputs = [
        uniform(rng, &[2, 4], 1.0),
        refs.clone(),
        uniform(rng, &[3, 4, 4], 1.0),
    ];
    run.check(
        "attention",
        "deform_attn",
        &DeformProbe(single),
        Some(&store),
        &inputs,
        1e-6,
        1e-5,
        None,
    )?;
    let inputs = [
        uniform(rng, &[2, 4], 1.0),
        refs,
        uniform(rng, &[3, 4, 4], 1.0),
        uniform(rng, &[4, 3, 4], 1.0),
    ];
    run.check(
        "attention",
        "temp_deform_attn",
        &DeformProbe(multi),
        Some(&store),
        &inputs,
        1e-6,
        1e-5,
        None,
    )
}

fn queries(embed: Var, pos: Var, ref_logits: Var) -> Queries {
    Queries {
        embed,
        pos,
        ref_logits,
    }
}

struct TqeProbe(TqeLayer);

impl Probe for TqeProbe {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, x: &[Var]) -> Result<Var> {
        let o = self
            .0
            .forward(g, queries(x[0], x[1], x[1]), queries(x[2], x[3], x[3]))?;
        weighted_sum(g, o)
    }
}

struct QrfProbe(QrfLayer);

impl Probe for QrfProbe {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, x: &[Var]) -> Result<Var> {
        let o = self.0.forward(g, queries(x[0], x[1], x[1]), x[2])?;
        weighted_sum(g, o)
    }
}

struct TdteProbe(TdteLayer);

impl Probe for TdteProbe {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, x: &[Var]) -> Result<Var> {
        let o = self.0.forward(g, &x[1..], x[0])?;
        weighted_sum(g, o)
    }
}

struct TdtdProbe(TdtdLayer);

impl Probe for TdtdProbe {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, x: &[Var]) -> Result<Var> {
        let o = self.0.forward(g, queries(x[0], x[1], x[2]), x[3])?;
        weighted_sum(g, o)
    }
}

struct RoiProbe(Vec<BoxCxcywh>);

impl Probe for RoiProbe {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, x: &[Var]) -> Result<Var> {
        let o = roi_extract(g, x[0], &self.0)?;
        weighted_sum(g, o)
    }
}

fn temporal_cases(run: &mut Runner, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::<f64>::new();
    let (tqe, qrf, tdte, tdtd) = {
        let mut init = Init::new(&mut store, rng);
        (
            TqeLayer::new(&mut init, "tqe", 8, 2, 16)?,
            QrfLayer::new(&mut init, "qrf", 8, 2, 2)?,
            TdteLayer::new(&mut init, "tdte", 8, 2, 2, 2, 16)?,
            TdtdLayer::new(&mut init, "tdtd", 8, 2, 2, 16)?,
        )
    };
    perturb(&mut store, rng, 0.1);
    freeze_key_bias(&mut store, &[tqe.self_attn, tqe.cross_attn, qrf.self_attn]);
    // Probing 24 evenly strided coordinates per tensor keeps runtime bounded.
    let cap = Some(24);

    let inputs = [
        uniform(rng, &[3, 8], 1.0),
        uniform(rng, &[3, 8], 0.5),
        uniform(rng, &[4, 8], 1.0),
        uniform(rng, &[4, 8], 0.5),
    ];
    run.check(
        "temporal",
        "tqe_layer",
        &TqeProbe(tqe),
        Some(&store),
        &inputs,
        1e-4,
        1e-5,
        cap,
    )?;

    let inputs = [
        uniform(rng, &[3, 8], 1.0),
        uniform(rng, &[3, 8], 0.5),
        uniform(rng, &[3, 8], 1.0),
    ];
    run.check(
        "temporal",
        "qrf_layer",
        &QrfProbe(qrf),
        Some(&store),
        &inputs,
        1e-4,
        1e-5,
        cap,
    )?;

    let inputs = [
        uniform(rng, &[6, 8], 0.5),
        uniform(rng, &[2, 3, 8], 1.0),
        uniform(rng, &[2, 3, 8], 1.0),
    ];
    run.check(
        "temporal",
        "tdte_layer",
        &TdteProbe(tdte),
        Some(&store),
        &inputs,
        1e-6,
        1e-5,
        cap,
    )?;

    let inputs = [
        uniform(rng, &[3, 8], 1.0),
        uniform(rng, &[3, 8], 0.5),
        Tensor::new(vec![3, 2], vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.5])?,
        uniform(rng, &[4, 5, 8], 1.0),
    ];
    run.check(
        "temporal",
        "tdtd_layer",
        &TdtdProbe(tdtd),
        Some(&store),
        &inputs,
        1e-6,
        1e-5,
        cap,
    )?;

    let probe = RoiProbe(vec![[0.41, 0.37, 0.33, 0.29], [0.73, 0.62, 0.2, 0.5]]);
    run.check(
        "temporal",
        "roi_extract",
        &probe,
        None,
        &[uniform(rng, &[4, 5, 3], 1.0)],
        1e-4,
        1e-5,
        cap,
    )
}

struct FocalProbe(Vec<Option<usize>>);

impl Probe for FocalProbe {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, x: &[Var]) -> Result<Var> {
        focal_loss(g, x[0], &self.0, Focal::default())
    }
}

struct GiouProbe(Vec<BoxCxcywh>);

impl Probe for GiouProbe {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, x: &[Var]) -> Result<Var> {
        let l = giou_loss(g, x[0], &self.0)?;
        Ok(g.sum(l))
    }
}

/// Boxes pass through a sigmoid so every perturbation stays valid.
struct LossProbe(Vec<GroundTruth>);

impl Probe for LossProbe {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, x: &[Var]) -> Result<Var> {
        let boxes = g.sigmoid(x[1]);
        let p = Prediction {
            logits: x[0],
            boxes,
        };
        Ok(detection_loss(g, &[p], &self.0, &LossConfig::default())?.0)
    }
}

struct HeadProbe(Heads);

impl Probe for HeadProbe {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>, x: &[Var]) -> Result<Var> {
        let p = self.0.forward(g, x[0], x[1])?;
        let b = weighted_sum(g, p.boxes)?;
        let l = weighted_sum(g, p.logits)?;
        g.add(b, l)
    }
}

fn matching_cases(run: &mut Runner, rng: &mut ChaCha8Rng) -> Result<()> {
    let logits = uniform(rng, &[4, 3], 3.0);
    let probe = FocalProbe(vec![Some(1), None, Some(0), None]);
    run.check(
        "matching",
        "focal_loss",
        &probe,
        None,
        &[logits],
        1e-4,
        1e-5,
        None,
    )?;

    // Partially overlapping, disjoint and containing pairs; no ties.
    let preds = Tensor::new(
        vec![3, 4],
        vec![
            0.43, 0.52, 0.21, 0.33, 0.2, 0.25, 0.1, 0.12, 0.5, 0.5, 0.6, 0.55,
        ],
    )?;
    let probe = GiouProbe(vec![
        [0.5, 0.45, 0.3, 0.2],
        [0.7, 0.8, 0.15, 0.1],
        [0.52, 0.47, 0.2, 0.22],
    ]);
    run.check(
        "matching",
        "giou_loss",
        &probe,
        None,
        &[preds],
        1e-6,
        1e-6,
        None,
    )?;

    let probe = LossProbe(vec![
        GroundTruth {
            class_id: 1,
            bbox: [0.3, 0.4, 0.2, 0.25],
        },
        GroundTruth {
            class_id: 0,
            bbox: [0.7, 0.6, 0.15, 0.3],
        },
    ]);
    let inputs = [
        uniform(rng, &[4, 2], 2.0),
        Tensor::from_fn(vec![4, 4], |_| rng.gen_range(-1.5..0.5)),
    ];
    run.check(
        "matching",
        "detection_loss",
        &probe,
        None,
        &inputs,
        1e-6,
        1e-6,
        None,
    )
}

fn spatial_cases(run: &mut Runner, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::<f64>::new();
    let heads = Heads::new(&mut Init::new(&mut store, rng), "heads", 8, 3)?;
    perturb(&mut store, rng, 0.3);
    let inputs = [uniform(rng, &[3, 8], 1.0), uniform(rng, &[3, 2], 1.0)];
    run.check(
        "spatial",
        "prediction_heads",
        &HeadProbe(heads),
        Some(&store),
        &inputs,
        1e-5,
        1e-5,
        None,
    )
}

/// Runs every case from a fixed seed.
pub fn run_grad_suite() -> Result<GradReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x67_7261_64);
    let mut run = Runner { rows: Vec::new() };
    numerics_cases(&mut run, &mut rng)?;
    attention_cases(&mut run, &mut rng)?;
    temporal_cases(&mut run, &mut rng)?;
    matching_cases(&mut run, &mut rng)?;
    spatial_cases(&mut run, &mut rng)?;
    let pass = run.rows.iter().all(|r| r.pass);
    Ok(GradReport {
        rows: run.rows,
        seconds: start.elapsed().as_secs_f64(),
        pass,
    })
}
