use crate::volgrad::Tensor;
use crate::{Error, Result, Scalar};

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config("adam betas must lie in (0, 1)"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            step_count: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            config,
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `name` identifies the
/// parameter in diagnostics.
pub fn adam_step<T: Scalar>(name: &str, param: &mut [T], grad: &[T], state: &mut AdamState<T>) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(Error::config(format!(
            "adam: parameter {name} has {} elements, gradient {}, state {}",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite gradient in parameter {name} at element {i} ({})",
            grad[i]
        )));
    }
    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let b1 = T::from_f64_lossy(c.beta1);
    let b2 = T::from_f64_lossy(c.beta2);
    let one = T::one();
    let corr1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
    let corr2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
    let lr = T::from_f64_lossy(c.learning_rate);
    let eps = T::from_f64_lossy(c.epsilon);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over an ordered list of named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub states: Vec<(String, AdamState<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = (String, &'a Tensor<T>)>) -> Self {
        let states = params
            .into_iter()
            .map(|(name, t)| (name, AdamState::new(t.numel(), config)))
            .collect();
        Self { config, states }
    }

    pub fn step_count(&self) -> u64 {
        self.states.first().map_or(0, |(_, s)| s.step_count)
    }

    /// Updates each parameter from its accumulated gradient. Parameters must
    /// arrive in the order the optimizer was built with.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Tensor<T>)>) -> Result<()> {
        let mut n = 0;
        for ((name, tensor), (state_name, state)) in params.into_iter().zip(self.states.iter_mut()) {
            if &name != state_name {
                return Err(Error::Internal(format!(
                    "optimizer parameter order changed: expected {state_name}, got {name}"
                )));
            }
            let grad = tensor
                .grad()
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); tensor.numel()]);
            adam_step(&name, tensor.data_mut(), &grad, state)?;
            n += 1;
        }
        if n != self.states.len() {
            return Err(Error::Internal(format!(
                "optimizer tracks {} parameters but {n} were supplied",
                self.states.len()
            )));
        }
        Ok(())
    }
}
