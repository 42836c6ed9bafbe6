//! Reverse-mode tape. Nodes are appended in evaluation order, so every
//! node's inputs precede it and a single backward sweep in reverse index
//! order visits each node after all of its consumers.

use rand::Rng;

use super::conv::{conv3d_backward, conv3d_forward, ConvSpec};
use super::kernels::{self, BatchNormState, BatchStats};
use super::Tensor;
use crate::{Error, Result, Scalar};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
    },
    Relu {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
        spatial: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Concat {
        left: Var,
        right: Var,
    },
    Reshape {
        input: Var,
    },
    Blend {
        a: Var,
        b: Var,
        wa: T,
        wb: T,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3d {
                input, weight, bias, ..
            }
            | Op::Linear {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Relu { input }
            | Op::MaxPool { input, .. }
            | Op::Dropout { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::Reshape { input } => vec![*input],
            Op::Concat { left, right } => vec![*left, *right],
            Op::Blend { a, b, .. } => vec![*a, *b],
            Op::Mse { pred, .. } => vec![*pred],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Computation record for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Its gradient is tracked iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Records an input whose gradient is never needed.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a tracked leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, spec: &ConvSpec) -> Result<Var> {
        let out = conv3d_forward(self.value(input), self.value(weight), self.value(bias), spec)?;
        let tracked = self.tracked(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv3d {
                input,
                weight,
                bias,
                spec: *spec,
            },
            tracked,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::new(x.shape(), kernels::relu(x.data())).expect("same shape");
        let tracked = self.tracked(&[input]);
        self.push(out, Op::Relu { input }, tracked)
    }

    /// Batch normalisation over axis 1 of a `[N, C, ...]` tensor. `gamma` and
    /// `beta` are read from the graph; the running statistics in `state` are
    /// updated in training mode and used in inference mode.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        training: bool,
    ) -> Result<Var> {
        if training {
            let (out, stats) = self.batchnorm_train(input, gamma, beta, state.epsilon)?;
            state.absorb(&stats);
            Ok(out)
        } else {
            self.batchnorm_eval(input, gamma, beta, state)
        }
    }

    /// Training-mode batch normalisation; the caller decides what to do with
    /// the returned batch statistics.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<(Var, BatchStats<T>)> {
        let x = self.value(input);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let (out, saved) = kernels::batchnorm_train(x, g, b, epsilon)?;
        let out = Tensor::new(x.shape(), out)?;
        let stats = BatchStats {
            mean: saved.batch_mean,
            var: saved.batch_var,
        };
        let tracked = self.tracked(&[input, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: saved.xhat,
                inv_std: saved.inv_std,
                training: true,
            },
            tracked,
        );
        Ok((v, stats))
    }

    /// Inference-mode batch normalisation by the running statistics.
    pub fn batchnorm_eval(&mut self, input: Var, gamma: Var, beta: Var, state: &BatchNormState<T>) -> Result<Var> {
        let x = self.value(input);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let (out, xhat, inv_std) = kernels::batchnorm_eval(x, g, b, state)?;
        let out = Tensor::new(x.shape(), out)?;
        let tracked = self.tracked(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training: false,
            },
            tracked,
        ))
    }

    pub fn maxpool3d(&mut self, input: Var, kernel: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool3d(self.value(input), kernel)?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, tracked))
    }

    /// Zeroes whole `(n, c)` slices with probability `rate` in training mode.
    /// Identity (no node recorded) in inference mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        kernels::check_dropout_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let x = self.value(input);
        let (n, c, s) = kernels::ncs(x.shape())?;
        let mask = kernels::dropout_mask(n * c, rate, rng);
        let out = Tensor::new(x.shape(), kernels::apply_channel_mask(x.data(), &mask, s))?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(
            out,
            Op::Dropout {
                input,
                mask,
                spatial: s,
            },
            tracked,
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (n, f, o) = kernels::check_linear(x.shape(), w.shape(), b.shape())?;
        let out = Tensor::new(&[n, o], kernels::linear(x.data(), w.data(), b.data(), n, f, o))?;
        let tracked = self.tracked(&[input, weight, bias]);
        Ok(self.push(out, Op::Linear { input, weight, bias }, tracked))
    }

    /// Mean over every axis after the channel axis: `[N, C, ...] → [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, s) = kernels::ncs(x.shape())?;
        let out = Tensor::new(&[n, c], kernels::global_avg_pool(x.data(), n, c, s))?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(out, Op::GlobalAvgPool { input }, tracked))
    }

    /// Feature concatenation of `[N, F1]` and `[N, F2]` into `[N, F1+F2]`.
    pub fn concat(&mut self, left: Var, right: Var) -> Result<Var> {
        let (l, r) = (self.value(left), self.value(right));
        if l.rank() != 2 || r.rank() != 2 || l.shape()[0] != r.shape()[0] {
            return Err(Error::config(format!(
                "concat expects [N, F] operands with equal N, got {:?} and {:?}",
                l.shape(),
                r.shape()
            )));
        }
        let (n, fl, fr) = (l.shape()[0], l.shape()[1], r.shape()[1]);
        let mut data = Vec::with_capacity(n * (fl + fr));
        for i in 0..n {
            data.extend_from_slice(&l.data()[i * fl..(i + 1) * fl]);
            data.extend_from_slice(&r.data()[i * fr..(i + 1) * fr]);
        }
        let out = Tensor::new(&[n, fl + fr], data)?;
        let tracked = self.tracked(&[left, right]);
        Ok(self.push(out, Op::Concat { left, right }, tracked))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let mut out = self.value(input).clone().reshaped(shape)?;
        out.set_requires_grad(false);
        let tracked = self.tracked(&[input]);
        Ok(self.push(out, Op::Reshape { input }, tracked))
    }

    /// `wa·a + wb·b`, elementwise, evaluated in exactly that order.
    pub fn blend(&mut self, a: Var, b: Var, wa: T, wb: T) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::config(format!(
                "blend operands differ in shape: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| wa * p + wb * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Blend { a, b, wa, wb }, tracked))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.numel() {
            return Err(Error::config(format!(
                "mse: prediction has {} elements, target has {}",
                p.numel(),
                target.numel()
            )));
        }
        let loss = mse(p.data(), target.data());
        let tracked = self.tracked(&[pred]);
        Ok(self.push(
            Tensor::new(&[1], vec![loss])?,
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            tracked,
        ))
    }

    /// Populates the gradient buffer of every tracked leaf reachable from
    /// `loss`. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if let Some(bad) = self.nodes[i].op.inputs().iter().find(|v| v.0 >= i) {
                return Err(Error::Internal(format!(
                    "cycle in recorded computation: node {i} consumes node {}",
                    bad.0
                )));
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (var, grad) in self.local_grads(i, &g) {
                if !self.nodes[var.0].tracked {
                    continue;
                }
                match &mut adj[var.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    /// Gradients flowing from node `i` into its inputs, given its adjoint.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let want = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv3d {
                input,
                weight,
                bias,
                spec,
            } => {
                let grads = conv3d_backward(self.value(*input), self.value(*weight), spec, g, want(*input));
                let mut out = vec![(*weight, grads.weight), (*bias, grads.bias)];
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                out
            }
            Op::Relu { input } => {
                vec![(*input, kernels::relu_backward(self.value(*input).data(), g))]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (dx, dgamma, dbeta) = kernels::batchnorm_backward(
                    node.value.shape(),
                    self.value(*gamma).data(),
                    xhat,
                    inv_std,
                    g,
                    *training,
                );
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gv;
                }
                vec![(*input, dx)]
            }
            Op::Dropout { input, mask, spatial } => vec![(*input, kernels::apply_channel_mask(g, mask, *spatial))],
            Op::Linear { input, weight, bias } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (n, f, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let mut dx = vec![T::zero(); n * f];
                // dx = g · w
                T::gemm(
                    n,
                    o,
                    f,
                    g,
                    (o as isize, 1),
                    w.data(),
                    (f as isize, 1),
                    false,
                    &mut dx,
                    (f as isize, 1),
                );
                let mut dw = vec![T::zero(); o * f];
                // dw = gᵀ · x
                T::gemm(
                    o,
                    n,
                    f,
                    g,
                    (1, o as isize),
                    x.data(),
                    (f as isize, 1),
                    false,
                    &mut dw,
                    (f as isize, 1),
                );
                let mut db = vec![T::zero(); o];
                for row in g.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a = *a + *b);
                }
                vec![(*input, dx), (*weight, dw), (*bias, db)]
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let s = x.numel() / g.len();
                let sf = T::from_usize(s).unwrap();
                let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv / sf, s)).collect();
                vec![(*input, dx)]
            }
            Op::Concat { left, right } => {
                let fl = self.value(*left).shape()[1];
                let fr = self.value(*right).shape()[1];
                let mut dl = Vec::with_capacity(g.len());
                let mut dr = Vec::with_capacity(g.len());
                for row in g.chunks(fl + fr) {
                    dl.extend_from_slice(&row[..fl]);
                    dr.extend_from_slice(&row[fl..]);
                }
                vec![(*left, dl), (*right, dr)]
            }
            Op::Reshape { input } => vec![(*input, g.to_vec())],
            Op::Blend { a, b, wa, wb } => vec![
                (*a, g.iter().map(|&v| *wa * v).collect()),
                (*b, g.iter().map(|&v| *wb * v).collect()),
            ],
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let k = g[0] * T::from_f64_lossy(2.0) / T::from_usize(p.len()).unwrap();
                vec![(*pred, p.iter().zip(target).map(|(&a, &b)| k * (a - b)).collect())]
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn corrupt_edge_for_test(&mut self, node: Var, input: Var) {
        if let Op::Relu { input: slot } = &mut self.nodes[node.0].op {
            *slot = input;
        }
    }
}

/// `(1/N) Σ (p − t)²`.
pub fn mse<T: Scalar>(pred: &[T], target: &[T]) -> T {
    let n = T::from_usize(pred.len().max(1)).unwrap();
    pred.iter()
        .zip(target)
        .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t))
        / n
}
