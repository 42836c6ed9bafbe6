//! Forward and backward rules of the non-convolution kernels. The tape in
//! [`super::graph`] owns the bookkeeping; these functions only compute.

use rand::Rng;

use crate::parallel;
use crate::volgrad::Tensor;
use crate::{Error, Result, Scalar};

/// Per-channel affine batch normalisation with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        let mut gamma = Tensor::full(&[channels], T::one());
        let mut beta = Tensor::zeros(&[channels]);
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
        Self {
            gamma,
            beta,
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn absorb(&mut self, stats: &BatchStats<T>) {
        let mom = T::from_f64_lossy(self.momentum);
        let keep = T::one() - mom;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + mom * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + mom * b;
        }
    }
}

/// Per-channel batch mean and (biased) variance from a training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

pub(crate) fn relu_backward<T: Scalar>(x: &[T], g: &[T]) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

/// `(N, C, S)` view of a `[N, C, ...]` tensor.
pub(crate) fn ncs(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::config(format!(
            "expected a [N, C, ...] tensor, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub(crate) struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

fn channel_values<T: Scalar>(x: &[T], n: usize, c: usize, s: usize, ch: usize) -> impl Iterator<Item = &T> {
    (0..n).flat_map(move |i| x[(i * c + ch) * s..(i * c + ch + 1) * s].iter())
}

fn check_bn(shape: &[usize], channels: usize) -> Result<(usize, usize, usize)> {
    let (n, c, s) = ncs(shape)?;
    if c != channels {
        return Err(Error::config(format!(
            "batchnorm over {channels} channels received input with {c} channels (axis 1)"
        )));
    }
    Ok((n, c, s))
}

/// Training-mode normalisation by batch statistics over every axis but 1.
pub(crate) fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    epsilon: f64,
) -> Result<(Vec<T>, BatchNormSaved<T>)> {
    let (n, c, s) = check_bn(x.shape(), gamma.len())?;
    let m = n * s;
    if m < 2 {
        return Err(Error::numeric(format!(
            "degenerate batch statistics: batchnorm in training mode needs at least 2 values per channel, got {m}"
        )));
    }
    let data = x.data();
    let eps = T::from_f64_lossy(epsilon);
    let mf = T::from_usize(m).unwrap();
    let stats = parallel::map_indices(c, |ch| {
        let mean = channel_values(data, n, c, s, ch).fold(T::zero(), |a, &v| a + v) / mf;
        let ss = channel_values(data, n, c, s, ch).fold(T::zero(), |a, &v| {
            let d = v - mean;
            a + d * d
        });
        (mean, ss)
    });
    let batch_mean: Vec<T> = stats.iter().map(|s| s.0).collect();
    let inv_std: Vec<T> = stats.iter().map(|&(_, ss)| T::one() / (ss / mf + eps).sqrt()).collect();
    let batch_var = stats.iter().map(|&(_, ss)| ss / mf).collect();

    let mut xhat = vec![T::zero(); data.len()];
    parallel::for_each_chunk(&mut xhat, s, |i, dst| {
        let ch = i % c;
        let src = &data[i * s..(i + 1) * s];
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - batch_mean[ch]) * inv_std[ch];
        }
    });
    let out = affine(&xhat, gamma, beta, c, s);
    Ok((
        out,
        BatchNormSaved {
            xhat,
            inv_std,
            batch_mean,
            batch_var,
        },
    ))
}

/// Inference-mode normalisation by the running statistics.
pub(crate) fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    state: &BatchNormState<T>,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (_, c, s) = check_bn(x.shape(), gamma.len())?;
    if state.channels() != c {
        return Err(Error::config(format!(
            "running statistics cover {} channels, input has {c}",
            state.channels()
        )));
    }
    let eps = T::from_f64_lossy(state.epsilon);
    let inv_std: Vec<T> = state
        .running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let rm = state.running_mean.data();
    let mut xhat = vec![T::zero(); x.numel()];
    let data = x.data();
    parallel::for_each_chunk(&mut xhat, s, |i, dst| {
        let ch = i % c;
        for (d, &v) in dst.iter_mut().zip(&data[i * s..(i + 1) * s]) {
            *d = (v - rm[ch]) * inv_std[ch];
        }
    });
    let out = affine(&xhat, gamma, beta, c, s);
    Ok((out, xhat, inv_std))
}

fn affine<T: Scalar>(xhat: &[T], g: &[T], b: &[T], c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); xhat.len()];
    parallel::for_each_chunk(&mut out, s, |i, dst| {
        let ch = i % c;
        for (d, &v) in dst.iter_mut().zip(&xhat[i * s..(i + 1) * s]) {
            *d = g[ch] * v + b[ch];
        }
    });
    out
}

/// Gradients `(dx, dgamma, dbeta)`. `training` selects whether the batch
/// statistics depend on `x`.
pub(crate) fn batchnorm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    training: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, s) = ncs(shape).expect("validated in forward");
    let mf = T::from_usize(n * s).unwrap();
    let sums = parallel::map_indices(c, |ch| {
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for i in 0..n {
            let r = (i * c + ch) * s..(i * c + ch + 1) * s;
            for (&gv, &xv) in g[r.clone()].iter().zip(&xhat[r]) {
                sg = sg + gv;
                sgx = sgx + gv * xv;
            }
        }
        (sg, sgx)
    });
    let dbeta: Vec<T> = sums.iter().map(|s| s.0).collect();
    let dgamma: Vec<T> = sums.iter().map(|s| s.1).collect();
    let mut dx = vec![T::zero(); g.len()];
    parallel::for_each_chunk(&mut dx, s, |i, dst| {
        let ch = i % c;
        let r = i * s..(i + 1) * s;
        let scale = gamma[ch] * inv_std[ch];
        if training {
            let k = scale / mf;
            for ((d, &gv), &xv) in dst.iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                *d = k * (mf * gv - dbeta[ch] - xv * dgamma[ch]);
            }
        } else {
            for (d, &gv) in dst.iter_mut().zip(&g[r]) {
                *d = scale * gv;
            }
        }
    });
    (dx, dgamma, dbeta)
}

/// Max pooling with cubic window `kernel` and equal stride; trailing voxels
/// that do not fill a window are dropped. Returns the output and, per output
/// voxel, the flat input offset of the (first-in-scan-order) maximum.
pub(crate) fn maxpool3d<T: Scalar>(x: &Tensor<T>, kernel: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::config(format!(
            "maxpool3d expects a [N, C, D, H, W] input, got shape {s:?}"
        )));
    }
    if kernel == 0 {
        return Err(Error::config("maxpool3d kernel must be positive"));
    }
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    for (name, e) in [("depth", d), ("height", h), ("width", w)] {
        if e < kernel {
            return Err(Error::config(format!(
                "maxpool3d {name} extent {e} is smaller than the pooling window {kernel}"
            )));
        }
    }
    let (od, oh, ow) = (d / kernel, h / kernel, w / kernel);
    let in_len = d * h * w;
    let out_len = od * oh * ow;
    let data = x.data();
    let mut argmax = vec![0usize; n * c * out_len];
    parallel::for_each_chunk(&mut argmax, out_len, |i, dst| {
        let base = i * in_len;
        let mut p = 0;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + ((z * kernel) * h + y * kernel) * w + xo * kernel;
                    for dz in 0..kernel {
                        for dy in 0..kernel {
                            for dx in 0..kernel {
                                let off = base + ((z * kernel + dz) * h + y * kernel + dy) * w + xo * kernel + dx;
                                if data[off] > data[best] {
                                    best = off;
                                }
                            }
                        }
                    }
                    dst[p] = best;
                    p += 1;
                }
            }
        }
    });
    let out = argmax.iter().map(|&o| data[o]).collect();
    Ok((Tensor::new(&[n, c, od, oh, ow], out)?, argmax))
}

/// Channel-dropout multipliers: one draw per `(n, c)` pair in row-major
/// order; 0 for dropped channels and `1/(1−rate)` for survivors.
pub(crate) fn dropout_mask<T: Scalar, R: Rng + ?Sized>(pairs: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    (0..pairs)
        .map(|_| {
            let u: f64 = rng.random();
            if u < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

pub(crate) fn apply_channel_mask<T: Scalar>(x: &[T], mask: &[T], s: usize) -> Vec<T> {
    x.chunks(s)
        .zip(mask)
        .flat_map(|(chunk, &m)| chunk.iter().map(move |&v| v * m))
        .collect()
}

pub(crate) fn check_linear(x: &[usize], w: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if x.len() != 2 || w.len() != 2 {
        return Err(Error::config(format!(
            "linear expects [N, F] input and [O, F] weight, got {x:?} and {w:?}"
        )));
    }
    if x[1] != w[1] {
        return Err(Error::config(format!(
            "linear inner dimension mismatch: input has {} features, weight expects {}",
            x[1], w[1]
        )));
    }
    if b != [w[0]] {
        return Err(Error::config(format!(
            "linear bias shape {b:?} does not match {} outputs",
            w[0]
        )));
    }
    Ok((x[0], x[1], w[0]))
}

/// `out = x · wᵀ + b` for `x: [N, F]`, `w: [O, F]`.
pub(crate) fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], n: usize, f: usize, o: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * o];
    T::gemm(
        n,
        f,
        o,
        x,
        (f as isize, 1),
        w,
        (1, f as isize),
        false,
        &mut out,
        (o as isize, 1),
    );
    for row in out.chunks_mut(o) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v = *v + bv;
        }
    }
    out
}

pub(crate) fn global_avg_pool<T: Scalar>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let sf = T::from_usize(s).unwrap();
    (0..n * c)
        .map(|i| x[i * s..(i + 1) * s].iter().fold(T::zero(), |a, &v| a + v) / sf)
        .collect()
}
