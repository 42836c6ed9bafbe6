//! Central finite-difference gradient oracle (double precision only).

use rand::seq::index::sample;

use crate::rng;
use crate::volgrad::{Graph, Tensor, Var};
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to round-off compare on an absolute scale.
    pub floor: f64,
    /// Round-off allowance of the loss, in units in the last place of
    /// `max(|loss|, 1)`. The denominator floor is raised so that a difference
    /// quotient disturbed by this much round-off still passes: gradients
    /// below the resolution of the finite difference compare on an absolute
    /// scale.
    pub noise_ulps: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            noise_ulps: 1024.0,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose difference quotient was not stable under halving
    /// the step: the function has a kink inside the stencil there.
    pub skipped_kinks: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    /// `(tensor, element, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures == 0
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        self.failures += other.failures;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self {
            checked: 0,
            skipped_kinks: 0,
            failures: 0,
            max_rel_error: 0.0,
            worst: None,
        }
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks the gradient returned by `eval(tensors, true)` against central
/// differences of `eval(tensors, false).0`. `eval` returns the scalar loss
/// and, when asked, one gradient buffer per tensor.
pub fn grad_check_fn<F>(tensors: &mut [Tensor<f64>], mut eval: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (loss, analytic) = eval(tensors, true)?;
    let mut picker = rng::stream(opts.seed);
    let mut report = GradCheckReport::default();
    let h = opts.step;
    let ulp = loss.abs().max(1.0) * f64::EPSILON;
    let floor = opts.floor.max(opts.noise_ulps * ulp / (2.0 * h) / opts.tolerance);
    for t in 0..tensors.len() {
        let numel = tensors[t].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < numel => {
                let mut c = sample(&mut picker, numel, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        for i in coords {
            let mut quotient = |step: f64, ts: &mut [Tensor<f64>]| -> Result<f64> {
                let orig = ts[t].data()[i];
                ts[t].data_mut()[i] = orig + step;
                let up = eval(ts, false)?.0;
                ts[t].data_mut()[i] = orig - step;
                let down = eval(ts, false)?.0;
                ts[t].data_mut()[i] = orig;
                Ok((up - down) / (2.0 * step))
            };
            let a = analytic[t][i];
            let n = quotient(h, tensors)?;
            let mut err = rel_error(a, n, floor);
            if err > opts.tolerance {
                let n_half = quotient(h / 2.0, tensors)?;
                if rel_error(n, n_half, floor) > opts.tolerance {
                    report.skipped_kinks += 1;
                    continue;
                }
                err = err.min(rel_error(a, n_half, floor));
                if err > opts.tolerance {
                    report.failures += 1;
                }
            }
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((t, i, a, n));
            }
        }
    }
    Ok(report)
}

/// Gradient check of a loss built on a fresh graph from `inputs`.
pub fn grad_check_graph<F>(inputs: &[Tensor<f64>], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut tensors: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            t
        })
        .collect();
    grad_check_fn(
        &mut tensors,
        |ts, want_grad| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
            let loss = build(&mut g, &vars)?;
            let value = g.value(loss).data()[0];
            if !want_grad {
                return Ok((value, Vec::new()));
            }
            g.backward(loss)?;
            let grads = vars
                .iter()
                .zip(ts)
                .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect();
            Ok((value, grads))
        },
        opts,
    )
}

/// Single-input convenience form of [`grad_check_graph`].
pub fn grad_check<F>(input: &Tensor<f64>, build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_graph(std::slice::from_ref(input), |g, v| build(g, v[0]), opts)
}
