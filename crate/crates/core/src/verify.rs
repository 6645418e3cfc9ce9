//! Self-checks against independent references: finite differences, nested
//! loop convolutions, the brute-force Volterra sum, closed-form parameter
//! counts and dataset statistics.
//!
//! Each suite returns a [`SuiteReport`] with one line per check and the
//! measured value behind it.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::{RngExt, SeedableRng};

use crate::data::{load_cifar10, Split, CIFAR_MEAN, CIFAR_STD, NUM_CLASSES};
use crate::error::Result;
use crate::fp_block::{build_fp_block, count_block_conv_params, count_fp_block_params, expand_volterra, feature_product_patch, FpBlockSpec};
use crate::model_zoo::{build_fp_resnet50_spec, summarize, Base, Model, ModelSpec};
use crate::nn_ops::{BatchNormSpec, Conv2dSpec, Ctx, DwsConvSpec, Mode, RunningStats};
use crate::tensor::{Fill, FpRng, ParamKind, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite {} ({:.2}s)", self.suite, self.seconds)?;
        for c in &self.checks {
            writeln!(f, "  {c}")?;
        }
        write!(f, "suite {}: {}", self.suite, if self.passed() { "PASS" } else { "FAIL" })
    }
}

fn timed(suite: &str, run: impl FnOnce() -> Result<Vec<Check>>) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = run()?;
    Ok(SuiteReport { suite: suite.to_string(), checks, seconds: start.elapsed().as_secs_f64() })
}

fn rng(seed: u64) -> FpRng {
    FpRng::seed_from_u64(seed)
}

fn random(dims: &[usize], seed: u64) -> Result<Tensor<f64>> {
    Tensor::create(dims, Fill::Uniform { lo: -1.0, hi: 1.0, seed })
}

// ---------------------------------------------------------------- gradients

/// Default central-difference step.
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Default acceptance bound on the norm-wise relative error.
pub const GRADCHECK_TOL: f64 = 1e-6;

/// Worst disagreement between backpropagated and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradCheckResult {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the
    /// concatenated gradient of every input and parameter.
    pub max_rel_error: f64,
    /// Tensor with the largest error relative to its own norm. Tensors whose
    /// true gradient vanishes (a convolution feeding batch norm over a single
    /// input channel) show rounding noise here.
    pub worst_tensor: String,
    pub worst_tensor_error: f64,
    /// Perturbations that moved a ReLU or max-pool to another branch; the
    /// difference quotient is meaningless there.
    pub kink_crossings: usize,
}

/// Compares gradients of the scalar `f` with central differences, for every
/// input and every learnable parameter in `store`.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], store: &mut ParamStore<f64>, eps: f64, f: F) -> Result<GradCheckResult>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], store: &mut ParamStore<f64>| -> Result<(f64, Option<u64>)> {
        let mut tape = Tape::inference().with_branch_trace();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Train);
        let out = f(&mut ctx, &vars)?;
        Ok((tape.value(out).item()?, tape.branch_trace()))
    };

    let mut tape = Tape::new().with_branch_trace();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input_with_grad(t.clone())).collect();
    store.zero_grad();
    let out = {
        let mut ctx = Ctx::new(&mut tape, store, Mode::Train);
        f(&mut ctx, &vars)?
    };
    tape.backward(out, store)?;
    let trace = tape.branch_trace();
    let mut kink_crossings = 0;

    // Errors are accumulated over the concatenated gradient of all inputs
    // and parameters; the worst single tensor is kept for diagnostics.
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut worst = (0.0f64, String::new());
    let mut record = |name: String, analytic: &[f64], numeric: &[f64]| {
        let d = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>();
        let (na, nn) = (norm(analytic), norm(numeric));
        diff2 += d;
        a2 += na * na;
        n2 += nn * nn;
        let rel = if na.max(nn) == 0.0 { 0.0 } else { d.sqrt() / na.max(nn) };
        if rel >= worst.0 {
            worst = (rel, name);
        }
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval(&work, store)?;
            work[k].data_mut()[i] = orig - eps;
            let down = eval(&work, store)?;
            kink_crossings += usize::from(up.1 != trace || down.1 != trace);
            work[k].data_mut()[i] = orig;
            *slot = (up.0 - down.0) / (2.0 * eps);
        }
        record(format!("input {k}"), &analytic, &numeric);
    }

    let ids: Vec<_> = store.iter().filter(|(_, p)| p.learnable()).map(|(id, _)| id).collect();
    for id in ids {
        let analytic = store.get(id).grad().map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).value().data()[i];
            store.get_mut(id).value_mut().data_mut()[i] = orig + eps;
            let up = eval(inputs, store)?;
            store.get_mut(id).value_mut().data_mut()[i] = orig - eps;
            let down = eval(inputs, store)?;
            kink_crossings += usize::from(up.1 != trace || down.1 != trace);
            store.get_mut(id).value_mut().data_mut()[i] = orig;
            *slot = (up.0 - down.0) / (2.0 * eps);
        }
        record(store.get(id).name().to_string(), &analytic, &numeric);
    }
    let scale = a2.max(n2).sqrt();
    let max_rel_error = if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale };
    Ok(GradCheckResult { max_rel_error, worst_tensor: worst.1, worst_tensor_error: worst.0, kink_crossings })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `Σ r ⊙ y` with a fixed random `r`, so every output element matters.
fn project(ctx: &mut Ctx<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let dims = ctx.tape.value(y).dims().to_vec();
    let r = ctx.tape.input(random(&dims, seed ^ 0x9e37)?);
    let p = ctx.tape.mul(y, r)?;
    ctx.tape.sum(p)
}

/// Names of the ops covered by [`gradcheck_op`].
pub const GRADCHECK_OPS: [&str; 14] = [
    "conv2d",
    "conv2d_strided_bias",
    "dws_conv",
    "batch_norm_affine",
    "batch_norm_plain",
    "relu",
    "mul",
    "add",
    "max_pool2d",
    "global_avg_pool",
    "linear",
    "softmax_cross_entropy",
    "shortcut_pad",
    "fp_block",
];

/// One random instance of `op`, checked with central differences.
pub fn gradcheck_op(op: &str, seed: u64, eps: f64) -> Result<GradCheckResult> {
    let mut r = rng(seed);
    let n = r.random_range(1..=3usize);
    let c = r.random_range(1..=3usize);
    let h = r.random_range(3..=6usize);
    let w = r.random_range(3..=6usize);
    let mut store = ParamStore::<f64>::new();
    let x = random(&[n, c, h, w], seed)?;
    match op {
        "conv2d" | "conv2d_strided_bias" => {
            let strided = op != "conv2d";
            let k = [1, 3][r.random_range(0..2usize)];
            let oc = r.random_range(1..=3usize);
            let (stride, pad) = if strided { (2, r.random_range(0..=k / 2 + 1).min(k - 1 + k / 2)) } else { (1, k / 2) };
            let spec = Conv2dSpec { bias: strided, ..Conv2dSpec::new(c, oc, k, stride, pad.min(k)) };
            let wt = random(&spec.weight_dims(), seed + 1)?;
            let mut inputs = vec![x, wt];
            if strided {
                inputs.push(random(&[oc], seed + 2)?);
            }
            gradcheck(&inputs, &mut store, eps, |ctx, v| {
                let y = ctx.tape.conv2d(v[0], v[1], v.get(2).copied(), &spec)?;
                project(ctx, y, seed)
            })
        }
        "dws_conv" => {
            let k = [1, 3, 5][r.random_range(0..3usize)];
            let spec = DwsConvSpec::same(c, k)?;
            let wt = random(&spec.weight_dims(), seed + 1)?;
            gradcheck(&[x, wt], &mut store, eps, |ctx, v| {
                let y = ctx.tape.dws_conv(v[0], v[1], &spec)?;
                project(ctx, y, seed)
            })
        }
        "batch_norm_affine" | "batch_norm_plain" => {
            let affine = op == "batch_norm_affine";
            let x = random(&[n.max(2), c, h, w], seed)?;
            let spec = if affine { BatchNormSpec::new(c) } else { BatchNormSpec::without_affine(c) };
            let mut inputs = vec![x];
            if affine {
                inputs.push(Tensor::create(&[c], Fill::Uniform { lo: 0.5, hi: 1.5, seed: seed + 1 })?);
                inputs.push(random(&[c], seed + 2)?);
            }
            gradcheck(&inputs, &mut store, eps, |ctx, v| {
                let mut mean = Tensor::zeros(&crate::tensor::Shape::new(vec![c])?);
                let mut var = Tensor::full(mean.shape(), 1.0);
                let aff = if affine { Some((v[1], v[2])) } else { None };
                let y = ctx.tape.batch_norm(v[0], aff, RunningStats { mean: &mut mean, var: &mut var }, &spec, Mode::Train)?;
                project(ctx, y, seed)
            })
        }
        "relu" => gradcheck(&[x], &mut store, eps, |ctx, v| {
            let y = ctx.tape.relu(v[0])?;
            project(ctx, y, seed)
        }),
        "mul" | "add" => {
            let b = random(&[n, c, h, w], seed + 1)?;
            let is_mul = op == "mul";
            gradcheck(&[x, b], &mut store, eps, |ctx, v| {
                let y = if is_mul { ctx.tape.mul(v[0], v[1])? } else { ctx.tape.add(v[0], v[1])? };
                project(ctx, y, seed)
            })
        }
        "max_pool2d" => gradcheck(&[x], &mut store, eps, |ctx, v| {
            let y = ctx.tape.max_pool2d(v[0], 2, 2)?;
            project(ctx, y, seed)
        }),
        "global_avg_pool" => gradcheck(&[x], &mut store, eps, |ctx, v| {
            let y = ctx.tape.global_avg_pool(v[0])?;
            project(ctx, y, seed)
        }),
        "linear" => {
            let (i, o) = (r.random_range(1..=6usize), r.random_range(1..=5usize));
            let inputs = [random(&[n, i], seed)?, random(&[o, i], seed + 1)?, random(&[o], seed + 2)?];
            gradcheck(&inputs, &mut store, eps, |ctx, v| {
                let y = ctx.tape.linear(v[0], v[1], Some(v[2]))?;
                project(ctx, y, seed)
            })
        }
        "softmax_cross_entropy" => {
            let k = r.random_range(2..=6usize);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let logits = Tensor::create(&[n, k], Fill::Normal { mean: 0.0, std: 2.0, seed })?;
            gradcheck(&[logits], &mut store, eps, |ctx, v| ctx.tape.softmax_cross_entropy(v[0], &labels))
        }
        "shortcut_pad" => {
            let extra = r.random_range(0..=3usize);
            let stride = r.random_range(1..=2usize);
            gradcheck(&[x], &mut store, eps, |ctx, v| {
                let y = ctx.tape.shortcut_pad(v[0], stride, c + extra)?;
                project(ctx, y, seed)
            })
        }
        "fp_block" => {
            // The affine-free norm after the product makes the output invariant
            // to rescaling either filter; with 1x1 filters or a single input
            // channel that leaves gradients at rounding level, so instances use
            // spatial filters over at least two channels.
            let c = c.max(2);
            let spec = FpBlockSpec::new(c, r.random_range(1..=3usize), r.random_range(1..=2usize))
                .kernel(3)
                .downsample(r.random_bool(0.5))
                .ablation(r.random_bool(0.3));
            let x = random(&[n.max(2), c, h.max(4), w.max(4)], seed)?;
            let (block, mut store) = if spec.ablation {
                crate::fp_block::build_ablation_block::<f64>(spec, seed)?
            } else {
                build_fp_block::<f64>(spec, seed)?
            };
            gradcheck(&[x], &mut store, eps, |ctx, v| {
                let y = block.forward(ctx, v[0])?;
                project(ctx, y, seed)
            })
        }
        other => Err(crate::error::Error::Config(format!("no gradient check for `{other}`"))),
    }
}

/// Every op in [`GRADCHECK_OPS`] on `instances` random instances. Instances
/// where a perturbation crosses a ReLU or max-pool kink are redrawn; the
/// count of redraws is reported.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    timed("gradcheck", || {
        GRADCHECK_OPS
            .iter()
            .map(|op| {
                let mut worst = GradCheckResult { max_rel_error: 0.0, worst_tensor: String::new(), worst_tensor_error: 0.0, kink_crossings: 0 };
                let (mut accepted, mut redrawn, mut draw) = (0, 0, 0u64);
                while accepted < instances && redrawn <= 10 * instances {
                    let r = gradcheck_op(op, seed.wrapping_add(draw * 7919), GRADCHECK_EPS)?;
                    draw += 1;
                    if r.kink_crossings > 0 {
                        redrawn += 1;
                        continue;
                    }
                    accepted += 1;
                    if r.max_rel_error >= worst.max_rel_error {
                        worst = r;
                    }
                }
                Ok(Check::new(
                    *op,
                    accepted == instances && worst.max_rel_error <= GRADCHECK_TOL,
                    format!(
                        "max relative error {:.2e} over {accepted} instances, {redrawn} redrawn at kinks (worst tensor: {} at {:.1e})",
                        worst.max_rel_error, worst.worst_tensor, worst.worst_tensor_error
                    ),
                ))
            })
            .collect()
    })
}

// -------------------------------------------------------------- convolution

/// Direct nested-loop grouped convolution; weights `(out, in / groups, k, k)`.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, stride: usize, pad: usize, groups: usize) -> Result<Tensor<f64>> {
    let (n, c, h, wd) = x.shape().nchw()?;
    let (oc, icg, k, _) = w.shape().nchw()?;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let ocg = oc / groups;
    let mut out = vec![0.0; n * oc * oh * ow];
    for s in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for i in 0..icg {
                        let ic = (o / ocg) * icg + i;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * icg + i) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[((s * oc + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, oc, oh, ow], out)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `conv2d` and `dws_conv` against [`naive_conv2d`] on random shapes.
pub fn conv_suite(shapes: usize, seed: u64, tol: f64) -> Result<SuiteReport> {
    timed("conv", || {
        let mut r = rng(seed);
        let (mut worst_conv, mut worst_dws) = (0.0f64, 0.0f64);
        let mut tape = Tape::<f64>::inference();
        for i in 0..shapes {
            let s = seed.wrapping_add(i as u64 * 31);
            let n = r.random_range(1..=3usize);
            let c = r.random_range(1..=6usize);
            let oc = r.random_range(1..=6usize);
            let k = [1, 3, 5][r.random_range(0..3usize)];
            let h = r.random_range(k..=k + 8);
            let w = r.random_range(k..=k + 8);
            let stride = r.random_range(1..=2usize);
            let pad = r.random_range(0..=k / 2);
            let bias = r.random_bool(0.5);
            let x = random(&[n, c, h, w], s)?;
            let spec = Conv2dSpec { bias, ..Conv2dSpec::new(c, oc, k, stride, pad) };
            let wt = random(&spec.weight_dims(), s + 1)?;
            let b = random(&[oc], s + 2)?;
            tape.clear();
            let (xv, wv) = (tape.input(x.clone()), tape.input(wt.clone()));
            let bv = bias.then(|| tape.input(b.clone()));
            let y = tape.conv2d(xv, wv, bv, &spec)?;
            let reference = naive_conv2d(&x, &wt, bias.then_some(b.data()), stride, pad, 1)?;
            worst_conv = worst_conv.max(max_abs_diff(tape.value(y).data(), reference.data()));

            let ks = [1, 3, 5][r.random_range(0..3usize)];
            let dspec = DwsConvSpec::same(c, ks)?;
            let xd = random(&[n, c, h.max(ks), w.max(ks)], s + 3)?;
            let wd = random(&dspec.weight_dims(), s + 4)?;
            let (xv, wv) = (tape.input(xd.clone()), tape.input(wd.clone()));
            let y = tape.dws_conv(xv, wv, &dspec)?;
            let reference = naive_conv2d(&xd, &wd, None, 1, ks / 2, c)?;
            worst_dws = worst_dws.max(max_abs_diff(tape.value(y).data(), reference.data()));
        }
        Ok(vec![
            Check::new("conv2d", worst_conv <= tol, format!("max abs deviation {worst_conv:.2e} over {shapes} shapes (tol {tol:.0e})")),
            Check::new("dws_conv", worst_dws <= tol, format!("max abs deviation {worst_dws:.2e} over {shapes} shapes (tol {tol:.0e})")),
        ])
    })
}

// ----------------------------------------------------------------- volterra

/// Quadratic-form evaluation of the expanded kernel against the feature
/// product on random triples with `k ∈ {1, 3, 5}`. The error is relative to
/// `(Σ|f_a·x|)(Σ|f_b·x|)`, the magnitude of the summed terms.
pub fn volterra_equivalence(triples: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..triples {
        let k = [1, 3, 5][r.random_range(0..3usize)];
        let n = k * k;
        let mut v = || (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (fa, fb, x) = (v(), v(), v());
        let g = feature_product_patch(&x, &fa, &fb)?;
        let q = expand_volterra(&fa, &fb)?.evaluate(&x)?;
        let abs = |f: &[f64]| f.iter().zip(&x).map(|(a, b)| (a * b).abs()).sum::<f64>();
        let scale = (abs(&fa) * abs(&fb)).max(f64::MIN_POSITIVE);
        worst = worst.max((q - g).abs() / scale);
    }
    Ok(worst)
}

/// Integer-valued `(f, x)` with `f·x = 0` exactly in floating point.
pub fn exact_orthogonal_pair(r: &mut FpRng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut f: Vec<f64> = (0..n).map(|_| r.random_range(-8..=8) as f64).collect();
    let pivot = r.random_range(0..n);
    f[pivot] = 1.0;
    let mut x: Vec<f64> = (0..n).map(|_| r.random_range(-8..=8) as f64).collect();
    x[pivot] = 0.0;
    x[pivot] = -f.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
    (f, x)
}

/// Number of cases, out of `cases`, where an FP-block's product stage is not
/// exactly zero on a patch orthogonal to its first filter.
pub fn orthogonal_suppression(cases: usize, seed: u64) -> Result<usize> {
    let mut r = rng(seed);
    let mut failures = 0;
    for case in 0..cases {
        let k = [1, 3, 5][case % 3];
        let spec = FpBlockSpec::new(1, 2, 1).kernel(k);
        let (block, mut store) = build_fp_block::<f64>(spec, seed.wrapping_add(case as u64))?;
        let (fa, _) = block.filters();
        let fa = fa.weight;
        let (f, x) = exact_orthogonal_pair(&mut r, k * k);
        let ch = r.random_range(0..2usize);
        store.get_mut(fa).value_mut().data_mut()[ch * k * k..][..k * k].copy_from_slice(&f);
        let mut h = random(&[1, 2, k, k], seed ^ case as u64)?;
        h.data_mut()[ch * k * k..][..k * k].copy_from_slice(&x);
        let mut tape = Tape::inference();
        let hv = tape.input(h);
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
        let p = block.product(&mut ctx, hv)?;
        let centre = ch * k * k + (k / 2) * k + k / 2;
        if tape.value(p).data()[centre] != 0.0 {
            failures += 1;
        }
    }
    Ok(failures)
}

pub fn volterra_suite(triples: usize, orthogonal_cases: usize, seed: u64) -> Result<SuiteReport> {
    timed("volterra", || {
        let worst = volterra_equivalence(triples, seed)?;
        let failures = orthogonal_suppression(orthogonal_cases, seed)?;
        Ok(vec![
            Check::new("quadratic form equals feature product", worst <= 1e-9, format!("max relative error {worst:.2e} over {triples} triples (tol 1e-9)")),
            Check::new("orthogonal patches suppressed", failures == 0, format!("{failures} of {orthogonal_cases} product outputs not exactly 0")),
        ])
    })
}

// --------------------------------------------------------------- parameters

/// Random specs whose closed-form count differs from the built block's
/// enumerated convolution weights; returns `(mismatches, checked)`.
pub fn formula_vs_enumeration(specs: usize, seed: u64) -> Result<(usize, usize)> {
    let mut r = rng(seed);
    let mut mismatches = 0;
    for _ in 0..specs {
        let spec = FpBlockSpec::new(r.random_range(8..=128), r.random_range(8..=128), r.random_range(1..=4))
            .kernel([1, 3, 5][r.random_range(0..3usize)]);
        let (_, store) = build_fp_block::<f32>(spec, 0)?;
        let enumerated: usize = store.iter().filter(|(_, p)| p.kind() == ParamKind::Weight).map(|(_, p)| p.numel()).sum();
        if enumerated != count_fp_block_params(&spec) || enumerated != count_block_conv_params(&spec) {
            mismatches += 1;
        }
    }
    Ok((mismatches, specs))
}

pub fn model_total(base: Base, config: &str, ablation: bool) -> Result<usize> {
    let spec = ModelSpec { ablation, ..ModelSpec::with_config(base, config) };
    let (m, s) = Model::new::<f32>(spec, 0)?;
    Ok(summarize(&m, &s).total_params)
}

pub fn params_suite(specs: usize, seed: u64) -> Result<SuiteReport> {
    timed("params", || {
        let (mismatches, n) = formula_vs_enumeration(specs, seed)?;
        let fp = model_total(Base::Resnet32, "001", false)?;
        let ab = model_total(Base::Resnet32, "001", true)?;
        let r20 = model_total(Base::Resnet20, "000", false)?;
        let r44 = model_total(Base::Resnet44, "000", false)?;
        let r50 = build_fp_resnet50_spec(1000)?.total_params;
        let k = |v: usize| (v as f64 / 1e3).round() as usize;
        Ok(vec![
            Check::new("block formula equals enumeration", mismatches == 0, format!("{mismatches} mismatches over {n} random specs")),
            Check::new("resnet32 001 total", k(fp) == 166, format!("{fp} ({}K, expected 166K)", k(fp))),
            Check::new("resnet32 001 single-filter total", k(ab) == 162, format!("{ab} ({}K, expected 162K)", k(ab))),
            Check::new("filter pair adds 3456", fp - ab == 3456, format!("difference {}", fp as i64 - ab as i64)),
            Check::new(
                "resnet20 and resnet44 within 270K-660K",
                (270..=660).contains(&k(r20)) && (270..=660).contains(&k(r44)) && r20.abs_diff(275_000) <= 10_000,
                format!("resnet20 {r20} ({}K, 275K +- 10K), resnet44 {r44} ({}K)", k(r20), k(r44)),
            ),
            Check::new("fp-resnet50 0101 total", (15_500_000..=16_500_000).contains(&r50), format!("{r50} ({:.2}M, expected 16M +- 0.5M)", r50 as f64 / 1e6)),
        ])
    })
}

// --------------------------------------------------------------------- data

pub fn data_suite(dir: &Path) -> Result<SuiteReport> {
    timed("data", || {
        let train = load_cifar10(dir, Split::Train)?;
        let test = load_cifar10(dir, Split::Test)?;
        let (mean, std) = train.channel_stats();
        let mean_dev = (0..3).map(|c| (mean[c] - CIFAR_MEAN[c]).abs()).fold(0.0, f64::max);
        let std_dev = (0..3).map(|c| (std[c] - CIFAR_STD[c]).abs()).fold(0.0, f64::max);
        let centred = (0..3).map(|c| ((mean[c] - CIFAR_MEAN[c]) / CIFAR_STD[c]).abs()).fold(0.0, f64::max);
        let balanced = test.class_counts() == [test.len() / NUM_CLASSES; NUM_CLASSES];
        Ok(vec![
            Check::new("train split size", train.len() == Split::Train.expected_len(), format!("{} items", train.len())),
            Check::new("test split size", test.len() == Split::Test.expected_len(), format!("{} items", test.len())),
            Check::new("test split class balance", balanced, format!("{:?}", test.class_counts())),
            Check::new(
                "normalisation constants",
                mean_dev < 1e-3 && std_dev < 1e-3,
                format!("measured mean {mean:.4?} std {std:.4?}; max deviation {mean_dev:.1e} / {std_dev:.1e}"),
            ),
            Check::new("normalised channel means near 0", centred < 0.02, format!("max |mean| {centred:.4} (tol 0.02)")),
        ])
    })
}

/// Builds a model in both precisions and compares logits: a cheap sanity
/// check that generic code paths agree.
pub fn precision_agreement(seed: u64) -> Result<f64> {
    let spec = ModelSpec::with_config(Base::Resnet20, "001");
    let (m, mut s32) = Model::new::<f32>(spec.clone(), seed)?;
    let (_, mut s64) = Model::new::<f64>(spec, seed)?;
    let x = random(&[2, 3, 32, 32], seed)?;
    let run = |store: &mut ParamStore<f64>| -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let xv = tape.input(x.clone());
        let mut ctx = Ctx::new(&mut tape, store, Mode::Train);
        let y = m.forward(&mut ctx, xv)?;
        Ok(tape.value(y).data().to_vec())
    };
    let y64 = run(&mut s64)?;
    let mut tape = Tape::<f32>::inference();
    let xv = tape.input(x.cast());
    let mut ctx = Ctx::new(&mut tape, &mut s32, Mode::Train);
    let y = m.forward(&mut ctx, xv)?;
    let y32: Vec<f64> = tape.value(y).data().iter().map(|v| v.as_f64()).collect();
    Ok(max_abs_diff(&y32, &y64))
}
