use serde::{Deserialize, Serialize};

use super::{shape_mismatch, NumericsError, Scalar};

/// Cosine-annealed learning rate with a zero floor and no restarts:
/// `lr_max · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam hyper-parameters. Weight decay is decoupled: parameters shrink by
/// `lr · weight_decay · θ` before the moment update is applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub lr_max: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
            lr_max: 0.1,
        }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    /// Updates seen by each tensor since it was last reset (bias correction).
    tensor_steps: Vec<u64>,
    step: u64,
    total_steps: u64,
}

impl<T: Scalar> OptimizerState<T> {
    /// `sizes` lists the flattened length of each parameter tensor.
    pub fn new(sizes: &[usize], config: AdamConfig, total_steps: u64) -> Self {
        Self {
            config,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            tensor_steps: vec![0; sizes.len()],
            step: 0,
            total_steps,
        }
    }

    /// Fresh moments whose schedule continues from `step`, for tensors that
    /// join a run partway through.
    pub fn resumed(sizes: &[usize], config: AdamConfig, total_steps: u64, step: u64) -> Self {
        Self {
            step,
            ..Self::new(sizes, config, total_steps)
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Learning rate that the next call to [`adam_step`] will use.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.config.lr_max)
    }

    /// Fresh zero moments of length `len` for tensor `index`, used when a
    /// parameter is re-drawn. Its bias correction restarts; the shared
    /// schedule step does not.
    pub fn reset_tensor(&mut self, index: usize, len: usize) {
        self.first[index] = vec![T::zero(); len];
        self.second[index] = vec![T::zero(); len];
        self.tensor_steps[index] = 0;
    }
}

/// One Adam update over every parameter tensor, in order.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut OptimizerState<T>,
) -> Result<(), NumericsError> {
    if params.len() != state.first.len() || grads.len() != params.len() {
        return Err(shape_mismatch(
            format!("{} tensors", state.first.len()),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let n = state.first[i].len();
        if p.len() != n || g.len() != n {
            return Err(shape_mismatch(
                format!("tensor {i} of length {n}"),
                format!("param {} / grad {}", p.len(), g.len()),
            ));
        }
    }

    let cfg = state.config;
    let lr = T::lit(state.current_lr());
    state.step += 1;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let eps = T::lit(cfg.epsilon);
    let decay = T::one() - lr * T::lit(cfg.weight_decay);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.tensor_steps[i] += 1;
        let t = state.tensor_steps[i].min(i32::MAX as u64) as i32;
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] = p[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
