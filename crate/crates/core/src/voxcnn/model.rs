use rand::Rng;

use super::config::{HeadInput, VoxCnnConfig};
use crate::volgrad::{he_normal, BatchNormState, BatchStats, ConvSpec, Graph, Tensor, Var};
use crate::{Error, Result, Scalar};

/// Convolution followed by batch normalisation (the ReLU is parameter-free).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T> {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: BatchNormState<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: Option<&mut R>) -> Self {
        let weight = match rng {
            Some(rng) => he_normal(&[outputs, inputs], inputs, rng),
            None => param_zeros(&[outputs, inputs]),
        };
        Self {
            name: name.into(),
            weight,
            bias: param_zeros(&[outputs]),
        }
    }
}

fn param_zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    t
}

fn batchnorm<T: Scalar>(channels: usize, cfg: &VoxCnnConfig) -> BatchNormState<T> {
    let mut bn = BatchNormState::new(channels);
    bn.momentum = cfg.bn_momentum;
    bn.epsilon = cfg.bn_epsilon;
    bn
}

impl<T: Scalar> ConvBn<T> {
    fn new<R: Rng + ?Sized>(name: String, spec: ConvSpec, cfg: &VoxCnnConfig, rng: Option<&mut R>) -> Self {
        let shape = spec.weight_shape();
        let weight = match rng {
            Some(rng) => he_normal(&shape, spec.patch_len(), rng),
            None => param_zeros(&shape),
        };
        Self {
            name,
            spec,
            weight,
            bias: param_zeros(&[spec.out_channels]),
            bn: batchnorm(spec.out_channels, cfg),
        }
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub main: Var,
    pub aux: Var,
    pub combined: Var,
    /// One leaf per trainable parameter, in canonical order.
    pub params: Vec<Var>,
}

/// Inference-mode outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions<T> {
    pub main: Vec<T>,
    pub aux: Vec<T>,
    pub combined: Vec<T>,
}

/// The volumetric regressor: `n_blocks` double-convolution blocks, a hidden
/// FC layer and a linear output unit, plus an auxiliary linear head on an
/// intermediate block. Predictions blend the two heads.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxCnnModel<T> {
    config: VoxCnnConfig,
    /// Two layers per block, block-major.
    convs: Vec<ConvBn<T>>,
    fc: Dense<T>,
    fc_bn: BatchNormState<T>,
    head: Dense<T>,
    aux: Dense<T>,
}

enum Mode<'a, R: ?Sized> {
    Train(&'a mut R),
    Eval,
}

impl<T: Scalar> VoxCnnModel<T> {
    /// Fresh model with He-initialised weights, zero biases, unit BN scale.
    pub fn new<R: Rng + ?Sized>(config: VoxCnnConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    /// Model skeleton with all-zero weights, used when loading checkpoints.
    pub fn zeroed(config: VoxCnnConfig) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(config, None)
    }

    fn build<R: Rng + ?Sized>(config: VoxCnnConfig, mut rng: Option<&mut R>) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(2 * config.n_blocks);
        let mut cin = config.in_channels;
        for b in 1..=config.n_blocks {
            let f = config.filters(b);
            let first = if b == 1 {
                config.stem_spec()
            } else {
                ConvSpec::new(cin, f)
            };
            convs.push(ConvBn::new(
                format!("block{b}.conv1"),
                first,
                &config,
                rng.as_deref_mut(),
            ));
            convs.push(ConvBn::new(
                format!("block{b}.conv2"),
                ConvSpec::new(f, f),
                &config,
                rng.as_deref_mut(),
            ));
            cin = f;
        }
        let feat = config.head_features()?;
        let fc = Dense::new("fc", feat, config.fc_hidden, rng.as_deref_mut());
        let fc_bn = batchnorm(config.fc_hidden, &config);
        let head = Dense::new("head", config.fc_hidden, 1, rng.as_deref_mut());
        let aux = Dense::new("aux", config.filters(config.aux_tap_block), 1, rng);
        let model = Self {
            config,
            convs,
            fc,
            fc_bn,
            head,
            aux,
        };
        debug_assert_eq!(Some(model.num_parameters()), model.config.parameter_count().ok());
        Ok(model)
    }

    pub fn config(&self) -> &VoxCnnConfig {
        &self.config
    }

    /// Trainable tensors with their canonical names, in canonical order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push((format!("{}.weight", c.name), &c.weight));
            out.push((format!("{}.bias", c.name), &c.bias));
            out.push((format!("{}.bn.gamma", c.name), &c.bn.gamma));
            out.push((format!("{}.bn.beta", c.name), &c.bn.beta));
        }
        out.push(("fc.weight".into(), &self.fc.weight));
        out.push(("fc.bias".into(), &self.fc.bias));
        out.push(("fc.bn.gamma".into(), &self.fc_bn.gamma));
        out.push(("fc.bn.beta".into(), &self.fc_bn.beta));
        for d in [&self.head, &self.aux] {
            out.push((format!("{}.weight", d.name), &d.weight));
            out.push((format!("{}.bias", d.name), &d.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push((format!("{}.weight", c.name), &mut c.weight));
            out.push((format!("{}.bias", c.name), &mut c.bias));
            out.push((format!("{}.bn.gamma", c.name), &mut c.bn.gamma));
            out.push((format!("{}.bn.beta", c.name), &mut c.bn.beta));
        }
        out.push(("fc.weight".into(), &mut self.fc.weight));
        out.push(("fc.bias".into(), &mut self.fc.bias));
        out.push(("fc.bn.gamma".into(), &mut self.fc_bn.gamma));
        out.push(("fc.bn.beta".into(), &mut self.fc_bn.beta));
        for d in [&mut self.head, &mut self.aux] {
            out.push((format!("{}.weight", d.name), &mut d.weight));
            out.push((format!("{}.bias", d.name), &mut d.bias));
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push((format!("{}.bn.running_mean", c.name), &c.bn.running_mean));
            out.push((format!("{}.bn.running_var", c.name), &c.bn.running_var));
        }
        out.push(("fc.bn.running_mean".into(), &self.fc_bn.running_mean));
        out.push(("fc.bn.running_var".into(), &self.fc_bn.running_var));
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push((format!("{}.bn.running_mean", c.name), &mut c.bn.running_mean));
            out.push((format!("{}.bn.running_var", c.name), &mut c.bn.running_var));
        }
        out.push(("fc.bn.running_mean".into(), &mut self.fc_bn.running_mean));
        out.push(("fc.bn.running_var".into(), &mut self.fc_bn.running_var));
        out
    }

    pub fn params_and_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push((format!("{}.weight", c.name), &mut c.weight));
            out.push((format!("{}.bias", c.name), &mut c.bias));
            out.push((format!("{}.bn.gamma", c.name), &mut c.bn.gamma));
            out.push((format!("{}.bn.beta", c.name), &mut c.bn.beta));
            out.push((format!("{}.bn.running_mean", c.name), &mut c.bn.running_mean));
            out.push((format!("{}.bn.running_var", c.name), &mut c.bn.running_var));
        }
        out.push(("fc.weight".into(), &mut self.fc.weight));
        out.push(("fc.bias".into(), &mut self.fc.bias));
        out.push(("fc.bn.gamma".into(), &mut self.fc_bn.gamma));
        out.push(("fc.bn.beta".into(), &mut self.fc_bn.beta));
        out.push(("fc.bn.running_mean".into(), &mut self.fc_bn.running_mean));
        out.push(("fc.bn.running_var".into(), &mut self.fc_bn.running_var));
        for d in [&mut self.head, &mut self.aux] {
            out.push((format!("{}.weight", d.name), &mut d.weight));
            out.push((format!("{}.bias", d.name), &mut d.bias));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Adds the gradients recorded on `graph` into the parameters' buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, out: &ForwardOutput) {
        for ((_, p), &v) in self.params_mut().into_iter().zip(&out.params) {
            if let Some(g) = graph.grad(v) {
                p.accumulate_grad(g);
            }
        }
    }

    fn check_inputs(&self, volumes: &Tensor<T>, tabular: Option<&Tensor<T>>) -> Result<()> {
        let s = volumes.shape();
        if s.len() != 5 {
            return Err(Error::config(format!("model input must be [N, C, D, H, W], got {s:?}")));
        }
        if s[1] != self.config.in_channels {
            return Err(Error::config(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels, s[1]
            )));
        }
        let ext = [s[2], s[3], s[4]];
        if self.config.head_input == HeadInput::Flatten && ext != self.config.input_extent {
            return Err(Error::config(format!(
                "flatten head is tied to input extent {:?}, got {ext:?}",
                self.config.input_extent
            )));
        }
        self.config.shape_ledger(ext)?;
        match (self.config.tabular_dim, tabular) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(Error::config(
                "tabular features supplied to a model without tabular fusion",
            )),
            (d, None) => Err(Error::config(format!(
                "model fuses {d} tabular features but none were supplied"
            ))),
            (d, Some(t)) if t.shape() != [s[0], d] => Err(Error::config(format!(
                "tabular features must be [{}, {d}], got {:?}",
                s[0],
                t.shape()
            ))),
            _ => Ok(()),
        }
    }

    /// Training-mode forward: dropout draws from `rng`, batch norm uses batch
    /// statistics and updates the running estimates.
    pub fn forward_train<R: Rng + ?Sized>(
        &mut self,
        graph: &mut Graph<T>,
        volumes: Var,
        tabular: Option<Var>,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let (out, stats) = self.run(graph, volumes, tabular, Mode::Train(rng))?;
        let bns = self
            .convs
            .iter_mut()
            .map(|c| &mut c.bn)
            .chain(std::iter::once(&mut self.fc_bn));
        for (bn, s) in bns.zip(&stats) {
            bn.absorb(s);
        }
        Ok(out)
    }

    /// Inference-mode forward: dropout is the identity and batch norm uses
    /// the running statistics. The model is not modified.
    pub fn forward_eval(&self, graph: &mut Graph<T>, volumes: Var, tabular: Option<Var>) -> Result<ForwardOutput> {
        Ok(self
            .run::<rand_chacha::ChaCha8Rng>(graph, volumes, tabular, Mode::Eval)?
            .0)
    }

    fn run<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        volumes: Var,
        tabular: Option<Var>,
        mut mode: Mode<'_, R>,
    ) -> Result<(ForwardOutput, Vec<BatchStats<T>>)> {
        self.check_inputs(g.value(volumes), tabular.map(|t| g.value(t)))?;
        let cfg = &self.config;
        let params: Vec<Var> = self.params().into_iter().map(|(_, t)| g.leaf(t.clone())).collect();
        let mut stats = Vec::new();
        let mut bn = |g: &mut Graph<T>,
                      x: Var,
                      gamma: Var,
                      beta: Var,
                      state: &BatchNormState<T>,
                      mode: &Mode<'_, R>|
         -> Result<Var> {
            match mode {
                Mode::Train(_) => {
                    let (y, s) = g.batchnorm_train(x, gamma, beta, state.epsilon)?;
                    stats.push(s);
                    Ok(y)
                }
                Mode::Eval => g.batchnorm_eval(x, gamma, beta, state),
            }
        };
        let dropout = |g: &mut Graph<T>, x: Var, rate: f64, mode: &mut Mode<'_, R>| -> Result<Var> {
            match mode {
                Mode::Train(rng) => g.dropout(x, rate, true, &mut **rng),
                Mode::Eval => Ok(x),
            }
        };

        let mut x = volumes;
        let mut tap = None;
        for (b, pair) in self.convs.chunks(2).enumerate() {
            let block = b + 1;
            if block > 1 {
                x = g.maxpool3d(x, 2)?;
                x = dropout(g, x, cfg.dropout_conv, &mut mode)?;
            }
            for (j, layer) in pair.iter().enumerate() {
                let p = &params[(2 * b + j) * 4..(2 * b + j + 1) * 4];
                x = g.conv3d(x, p[0], p[1], &layer.spec)?;
                x = bn(g, x, p[2], p[3], &layer.bn, &mode)?;
                x = g.relu(x);
            }
            if block == cfg.aux_tap_block {
                tap = Some(x);
            }
        }

        let n = g.value(volumes).shape()[0];
        let mut feat = match cfg.head_input {
            HeadInput::GlobalAvgPool => g.global_avg_pool(x)?,
            HeadInput::Flatten => {
                let numel = g.value(x).numel();
                g.reshape(x, &[n, numel / n])?
            }
        };
        if let Some(t) = tabular {
            feat = g.concat(feat, t)?;
        }
        let p = &params[self.convs.len() * 4..];
        let mut h = g.linear(feat, p[0], p[1])?;
        h = bn(g, h, p[2], p[3], &self.fc_bn, &mode)?;
        h = g.relu(h);
        h = dropout(g, h, cfg.dropout_fc, &mut mode)?;
        let main = g.linear(h, p[4], p[5])?;
        let main = g.reshape(main, &[n])?;

        let tap = tap.expect("aux tap block validated");
        let aux_feat = g.global_avg_pool(tap)?;
        let aux = g.linear(aux_feat, p[6], p[7])?;
        let aux = g.reshape(aux, &[n])?;

        let combined = g.blend(
            main,
            aux,
            T::from_f64_lossy(cfg.main_weight),
            T::from_f64_lossy(cfg.aux_weight),
        )?;
        Ok((
            ForwardOutput {
                main,
                aux,
                combined,
                params,
            },
            stats,
        ))
    }

    /// Training objective on a forward pass.
    pub fn loss(&self, g: &mut Graph<T>, out: &ForwardOutput, target: &Tensor<T>) -> Result<Var> {
        if self.config.aux_as_separate_loss {
            let lm = g.mse_loss(out.main, target)?;
            let la = g.mse_loss(out.aux, target)?;
            g.blend(
                lm,
                la,
                T::from_f64_lossy(self.config.main_weight),
                T::from_f64_lossy(self.config.aux_weight),
            )
        } else {
            g.mse_loss(out.combined, target)
        }
    }

    /// Inference-mode predictions for a batch `[N, C, D, H, W]`.
    pub fn predict(&self, volumes: &Tensor<T>, tabular: Option<&Tensor<T>>) -> Result<Predictions<T>> {
        let mut g = Graph::new();
        let x = g.constant(volumes.clone());
        let t = tabular.map(|t| g.constant(t.clone()));
        let out = self.forward_eval(&mut g, x, t)?;
        Ok(Predictions {
            main: g.value(out.main).data().to_vec(),
            aux: g.value(out.aux).data().to_vec(),
            combined: g.value(out.combined).data().to_vec(),
        })
    }
}
