use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
///
/// Moments are created lazily, zero-initialized, one slot per parameter
/// position in the slices passed to [`AdamW::step`]; callers must pass
/// parameters in the same order every step.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TensorError::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(TensorError::Config(format!("betas must lie in [0, 1), got ({beta1}, {beta2})")));
        }
        if eps <= 0.0 || weight_decay < 0.0 {
            return Err(TensorError::Config("eps must be positive and weight decay non-negative".into()));
        }
        Ok(Self { lr, beta1, beta2, eps, weight_decay, step: 0, m: Vec::new(), v: Vec::new() })
    }

    /// PyTorch defaults for betas and eps.
    pub fn with_lr(lr: f64, weight_decay: f64) -> Result<Self> {
        Self::new(lr, 0.9, 0.999, 1e-8, weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Sets the learning rate used by subsequent steps (warmup schedules).
    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TensorError::Config(format!("learning rate must be positive, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::Contract("parameter list changed between steps".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let bc1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let decay = T::from_f64_lossy(1.0 - self.lr * self.weight_decay);
        let eps = T::from_f64_lossy(self.eps);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(TensorError::dim(
                    "adamw_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().map(|g| g.sq_norm().to_f64().unwrap()).sum::<f64>().sqrt();
    if total > max_norm && total > 0.0 {
        let factor = T::from_f64_lossy(max_norm / total);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    total
}
