//! Built-in oracle suite: brute-force loop references for the tensor kernels
//! and finite-difference checks for every differentiable operation and the
//! full default model.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::volgrad::{
    grad_check_fn, grad_check_graph, ConvSpec, GradCheckOptions, GradCheckReport, Graph, Tensor, Var,
};
use crate::voxcnn::{VoxCnnConfig, VoxCnnModel};
use crate::{rng, Error, Result};

/// Tolerance of the loop-oracle comparisons, relative to `max(1, |reference|)`.
pub const ORACLE_TOLERANCE: f64 = 1e-12;

/// Deliberate fault injection used to show that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    /// Offsets one convolution output element before comparison.
    Conv3dOutput,
    /// Scales the analytic linear-layer weight gradient before comparison.
    LinearGradient,
}

#[derive(Debug, Clone)]
pub struct SelfCheckOptions {
    pub seeds: usize,
    pub oracle_cases: usize,
    /// Extent of the full-model check input.
    pub model_extent: usize,
    pub model_batch: usize,
    /// Sampled coordinates per parameter tensor in the full-model check.
    pub model_coords: usize,
    pub include_model: bool,
    pub perturbation: Option<Perturbation>,
    pub seed: u64,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        SelfCheckOptions {
            seeds: 20,
            oracle_cases: 50,
            model_extent: 16,
            model_batch: 3,
            model_coords: 2,
            include_model: true,
            perturbation: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn randn(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

fn max_scaled_diff(got: &[f64], want: &[f64]) -> f64 {
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Direct six-fold loop convolution over `[N, C, D, H, W]`.
pub fn conv3d_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: &ConvSpec) -> Result<Tensor<f64>> {
    let s = x.shape();
    let out_ext = spec.output_extent([s[2], s[3], s[4]])?;
    let (n, ci, co) = (s[0], spec.in_channels, spec.out_channels);
    let k = spec.kernel;
    let mut out = Tensor::zeros(&[n, co, out_ext[0], out_ext[1], out_ext[2]]);
    for i in 0..n {
        for o in 0..co {
            for z in 0..out_ext[0] {
                for y in 0..out_ext[1] {
                    for xx in 0..out_ext[2] {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for kz in 0..k[0] {
                                for ky in 0..k[1] {
                                    for kx in 0..k[2] {
                                        let iz = (z * spec.stride[0] + kz) as isize - spec.padding[0] as isize;
                                        let iy = (y * spec.stride[1] + ky) as isize - spec.padding[1] as isize;
                                        let ix = (xx * spec.stride[2] + kx) as isize - spec.padding[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= s[2] || iy >= s[3] || ix >= s[4] {
                                            continue;
                                        }
                                        acc += w.at(&[o, c, kz, ky, kx]) * x.at(&[i, c, iz, iy, ix]);
                                    }
                                }
                            }
                        }
                        let off = out.offset(&[i, o, z, y, xx]);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Non-overlapping max pooling with window and stride `k`, floor semantics.
pub fn maxpool3d_reference(x: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let s = x.shape();
    let o = [s[2] / k, s[3] / k, s[4] / k];
    let mut out = Tensor::zeros(&[s[0], s[1], o[0], o[1], o[2]]);
    for n in 0..s[0] {
        for c in 0..s[1] {
            for z in 0..o[0] {
                for y in 0..o[1] {
                    for xx in 0..o[2] {
                        let mut m = f64::NEG_INFINITY;
                        for dz in 0..k {
                            for dy in 0..k {
                                for dx in 0..k {
                                    m = m.max(x.at(&[n, c, z * k + dz, y * k + dy, xx * k + dx]));
                                }
                            }
                        }
                        let off = out.offset(&[n, c, z, y, xx]);
                        out.data_mut()[off] = m;
                    }
                }
            }
        }
    }
    out
}

/// `y[n, o] = b[o] + Σ_f x[n, f]·w[o, f]`.
pub fn linear_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    Tensor::from_fn(&[n, o], |idx| {
        let (i, j) = (idx / o, idx % o);
        (0..f).fold(b.data()[j], |acc, k| acc + x.at(&[i, k]) * w.at(&[j, k]))
    })
}

pub fn global_avg_pool_reference(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s: usize = x.shape()[2..].iter().product();
    Tensor::from_fn(&[n, c], |idx| {
        let base = idx * s;
        x.data()[base..base + s].iter().sum::<f64>() / s as f64
    })
}

fn random_conv_case(r: &mut impl Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, ConvSpec) {
    loop {
        let k = r.random_range(1..=3);
        let p = if k == 1 { 0 } else { r.random_range(0..=1) };
        let stride = r.random_range(1..=2);
        let spec = ConvSpec::new(r.random_range(1..=4), r.random_range(1..=4))
            .with_kernel(k, p)
            .with_stride(stride);
        let ext = [r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8)];
        if spec.output_extent(ext).is_err() {
            continue;
        }
        let n = r.random_range(1..=3);
        let x = randn(&[n, spec.in_channels, ext[0], ext[1], ext[2]], r);
        let w = randn(&spec.weight_shape(), r);
        let b = randn(&[spec.out_channels], r);
        return (x, w, b, spec);
    }
}

fn oracle_result(name: &str, cases: usize, worst: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: worst <= ORACLE_TOLERANCE,
        detail: format!("{cases} random shapes, max scaled difference {worst:.2e}"),
    }
}

/// Compares the graph kernels against the loop references on random shapes
/// with every extent at most 8.
pub fn kernel_oracle_checks(opts: &SelfCheckOptions) -> Result<Vec<CheckResult>> {
    let mut r = rng::stream(rng::derive(opts.seed, "oracles"));
    let cases = opts.oracle_cases;

    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (x, w, b, spec) = random_conv_case(&mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv3d(xv, wv, bv, &spec)?;
        let mut got = g.value(y).data().to_vec();
        if opts.perturbation == Some(Perturbation::Conv3dOutput) {
            got[0] += 1e-9;
        }
        worst = worst.max(max_scaled_diff(&got, conv3d_reference(&x, &w, &b, &spec)?.data()));
    }
    let conv = oracle_result("conv3d loop oracle", cases, worst);

    let mut worst = 0.0f64;
    for _ in 0..cases {
        let k = r.random_range(2..=3);
        let shape: Vec<usize> = [r.random_range(1..=3), r.random_range(1..=4)]
            .into_iter()
            .chain((0..3).map(|_| r.random_range(k..=8)))
            .collect();
        let x = randn(&shape, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.maxpool3d(xv, k)?;
        worst = worst.max(max_scaled_diff(g.value(y).data(), maxpool3d_reference(&x, k).data()));
    }
    let pool = oracle_result("maxpool3d loop oracle", cases, worst);

    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (n, f, o) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
        let x = randn(&[n, f], &mut r);
        let w = randn(&[o, f], &mut r);
        let b = randn(&[o], &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.linear(xv, wv, bv)?;
        worst = worst.max(max_scaled_diff(g.value(y).data(), linear_reference(&x, &w, &b).data()));
    }
    let lin = oracle_result("linear loop oracle", cases, worst);

    let mut worst = 0.0f64;
    for _ in 0..cases {
        let shape: Vec<usize> = (0..5).map(|_| r.random_range(1..=8)).collect();
        let x = randn(&shape, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.global_avg_pool(xv)?;
        worst = worst.max(max_scaled_diff(g.value(y).data(), global_avg_pool_reference(&x).data()));
    }
    let gap = oracle_result("global_avg_pool loop oracle", cases, worst);

    Ok(vec![conv, pool, lin, gap])
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One differentiable operation under test: its inputs and a builder that
/// reduces its output to a scalar with an MSE against a fixed target.
struct GradCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn mse_to(target: Tensor<f64>) -> impl Fn(&mut Graph<f64>, Var) -> Result<Var> {
    move |g, y| g.mse_loss(y, &target)
}

fn grad_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng::stream(seed);
    let mut cases = Vec::new();

    let (x, w, b, spec) = random_conv_case(&mut r);
    let out_ext = spec.output_extent([x.shape()[2], x.shape()[3], x.shape()[4]]).unwrap();
    let loss = mse_to(randn(
        &[x.shape()[0], spec.out_channels, out_ext[0], out_ext[1], out_ext[2]],
        &mut r,
    ));
    cases.push(GradCase {
        name: "conv3d",
        inputs: vec![x, w, b],
        build: Box::new(move |g, v| {
            let y = g.conv3d(v[0], v[1], v[2], &spec)?;
            loss(g, y)
        }),
    });

    let shape = [2, 3, 3, 4, 2];
    let loss = mse_to(randn(&shape, &mut r));
    cases.push(GradCase {
        name: "relu",
        inputs: vec![randn(&shape, &mut r)],
        build: Box::new(move |g, v| {
            let y = g.relu(v[0]);
            loss(g, y)
        }),
    });

    let shape = [3, 2, 2, 3, 2];
    let loss = mse_to(randn(&shape, &mut r));
    cases.push(GradCase {
        name: "batchnorm (training)",
        inputs: vec![randn(&shape, &mut r), randn(&[2], &mut r), randn(&[2], &mut r)],
        build: Box::new(move |g, v| {
            let (y, _) = g.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            loss(g, y)
        }),
    });

    let loss = mse_to(randn(&[4, 3], &mut r));
    cases.push(GradCase {
        name: "batchnorm (features)",
        inputs: vec![randn(&[4, 3], &mut r), randn(&[3], &mut r), randn(&[3], &mut r)],
        build: Box::new(move |g, v| {
            let (y, _) = g.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            loss(g, y)
        }),
    });

    let loss = mse_to(randn(&[2, 2, 2, 2, 1], &mut r));
    cases.push(GradCase {
        name: "maxpool3d",
        inputs: vec![randn(&[2, 2, 5, 4, 3], &mut r)],
        build: Box::new(move |g, v| {
            let y = g.maxpool3d(v[0], 2)?;
            loss(g, y)
        }),
    });

    let shape = [3, 4, 2, 2, 2];
    let loss = mse_to(randn(&shape, &mut r));
    let mask_seed = r.random::<u64>();
    cases.push(GradCase {
        name: "dropout3d",
        inputs: vec![randn(&shape, &mut r)],
        build: Box::new(move |g, v| {
            let y = g.dropout(v[0], 0.5, true, &mut rng::stream(mask_seed))?;
            loss(g, y)
        }),
    });

    let (n, f, o) = (r.random_range(2..=5), r.random_range(1..=6), r.random_range(1..=4));
    let loss = mse_to(randn(&[n, o], &mut r));
    cases.push(GradCase {
        name: "linear",
        inputs: vec![randn(&[n, f], &mut r), randn(&[o, f], &mut r), randn(&[o], &mut r)],
        build: Box::new(move |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            loss(g, y)
        }),
    });

    let shape = [2, 3, 2, 3, 2];
    let loss = mse_to(randn(&[2, 3], &mut r));
    cases.push(GradCase {
        name: "global_avg_pool",
        inputs: vec![randn(&shape, &mut r)],
        build: Box::new(move |g, v| {
            let y = g.global_avg_pool(v[0])?;
            loss(g, y)
        }),
    });

    let loss = mse_to(randn(&[3, 5], &mut r));
    cases.push(GradCase {
        name: "concat",
        inputs: vec![randn(&[3, 2], &mut r), randn(&[3, 3], &mut r)],
        build: Box::new(move |g, v| {
            let y = g.concat(v[0], v[1])?;
            loss(g, y)
        }),
    });

    let loss = mse_to(randn(&[6, 2], &mut r));
    cases.push(GradCase {
        name: "reshape",
        inputs: vec![randn(&[2, 3, 2], &mut r)],
        build: Box::new(move |g, v| {
            let y = g.reshape(v[0], &[6, 2])?;
            loss(g, y)
        }),
    });

    let loss = mse_to(randn(&[5], &mut r));
    cases.push(GradCase {
        name: "blend",
        inputs: vec![randn(&[5], &mut r), randn(&[5], &mut r)],
        build: Box::new(move |g, v| {
            let y = g.blend(v[0], v[1], 0.6, 0.4)?;
            loss(g, y)
        }),
    });

    cases
}

/// Like [`grad_check_graph`], with the analytic weight gradient (input 1)
/// multiplied by `weight_grad_scale`.
fn check_case(case: &GradCase, gc: &GradCheckOptions, weight_grad_scale: f64) -> Result<GradCheckReport> {
    if weight_grad_scale == 1.0 {
        return grad_check_graph(&case.inputs, |g, v| (case.build)(g, v), gc);
    }
    let mut tensors = case.inputs.clone();
    tensors.iter_mut().for_each(|t| t.set_requires_grad(true));
    grad_check_fn(
        &mut tensors,
        |ts, want_grad| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
            let loss = (case.build)(&mut g, &vars)?;
            let value = g.value(loss).data()[0];
            if !want_grad {
                return Ok((value, Vec::new()));
            }
            g.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = vars
                .iter()
                .zip(ts)
                .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect();
            grads[1].iter_mut().for_each(|d| *d *= weight_grad_scale);
            Ok((value, grads))
        },
        gc,
    )
}

fn grad_result(name: String, seeds: usize, report: &GradCheckReport) -> CheckResult {
    CheckResult {
        name,
        passed: report.passed(),
        detail: format!(
            "{seeds} seeds, {} coordinates, {} failures, {} kinks skipped, max relative error {:.2e}",
            report.checked, report.failures, report.skipped_kinks, report.max_rel_error
        ),
    }
}

/// Finite-difference checks of every differentiable operation.
pub fn kernel_grad_checks(opts: &SelfCheckOptions) -> Result<Vec<CheckResult>> {
    let names: Vec<&str> = grad_cases(0).iter().map(|c| c.name).collect();
    let mut reports = vec![GradCheckReport::default(); names.len()];
    for s in 0..opts.seeds {
        let seed = rng::derive_index(opts.seed, "grad", s as u64);
        for (i, case) in grad_cases(seed).into_iter().enumerate() {
            let gc = GradCheckOptions {
                seed,
                ..GradCheckOptions::default()
            };
            let scale = match opts.perturbation {
                Some(Perturbation::LinearGradient) if case.name == "linear" => 1.001,
                _ => 1.0,
            };
            let report = check_case(&case, &gc, scale)?;
            reports[i].merge(&report);
        }
    }
    Ok(names
        .iter()
        .zip(&reports)
        .map(|(n, r)| grad_result(format!("{n} gradient"), opts.seeds, r))
        .collect())
}

/// Finite-difference check of the full model's training loss with respect
/// to the input volume and a sample of every parameter tensor. Dropout
/// masks are drawn from the same stream on every evaluation.
pub fn model_grad_check(config: &VoxCnnConfig, batch: usize, coords: usize, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng::stream(rng::derive(seed, "init"));
    let model = VoxCnnModel::<f64>::new(config.clone(), &mut r)?;
    let e = config.input_extent;
    let x = randn(&[batch, config.in_channels, e[0], e[1], e[2]], &mut r);
    let tab = (config.tabular_dim > 0).then(|| randn(&[batch, config.tabular_dim], &mut r));
    let target = randn(&[batch], &mut r);
    let dropout_seed = rng::derive(seed, "dropout");

    let mut tensors: Vec<Tensor<f64>> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    let n_params = tensors.len();
    tensors.push(x);
    if let Some(t) = tab {
        tensors.push(t);
    }
    tensors.iter_mut().for_each(|t| t.set_requires_grad(true));
    let eval = |ts: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut m = model.clone();
        for ((_, p), t) in m.params_mut().into_iter().zip(ts) {
            p.data_mut().copy_from_slice(t.data());
        }
        let mut g = Graph::new();
        let xv = g.leaf(ts[n_params].clone());
        let tv = ts.get(n_params + 1).map(|t| g.leaf(t.clone()));
        let out = m.forward_train(&mut g, xv, tv, &mut rng::stream(dropout_seed))?;
        let loss = m.loss(&mut g, &out, &target)?;
        let value = g.value(loss).data()[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let vars = out.params.iter().copied().chain(std::iter::once(xv)).chain(tv);
        let grads = vars
            .zip(ts)
            .map(|(v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        Ok((value, grads))
    };
    let opts = GradCheckOptions {
        max_coords: Some(coords),
        seed: rng::derive(seed, "coords"),
        ..GradCheckOptions::default()
    };
    grad_check_fn(&mut tensors, eval, &opts)
}

/// Runs the whole suite, reporting each check through `on_result` as it
/// finishes.
pub fn run_selfcheck(opts: &SelfCheckOptions, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    if opts.seeds == 0 || opts.oracle_cases == 0 {
        return Err(Error::config("selfcheck needs at least one seed and one oracle case"));
    }
    let mut results = Vec::new();
    for r in kernel_oracle_checks(opts)?.into_iter().chain(kernel_grad_checks(opts)?) {
        on_result(&r);
        results.push(r);
    }
    if opts.include_model {
        let config = VoxCnnConfig {
            input_extent: [opts.model_extent; 3],
            ..VoxCnnConfig::default()
        };
        let mut total = GradCheckReport::default();
        for s in 0..opts.seeds {
            let seed = rng::derive_index(opts.seed, "model", s as u64);
            total.merge(&model_grad_check(&config, opts.model_batch, opts.model_coords, seed)?);
        }
        let r = grad_result(
            format!(
                "full model gradient ({}^3, batch {})",
                opts.model_extent, opts.model_batch
            ),
            opts.seeds,
            &total,
        );
        on_result(&r);
        results.push(r);
    }
    Ok(results)
}
