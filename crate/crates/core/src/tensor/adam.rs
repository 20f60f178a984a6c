use super::{Result, Tensor, TensorError};

/// Bias-corrected Adam. Moment buffers are allocated on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Updates every tensor with `requires_grad` set. Gradients are left as
    /// they are. Nothing is modified if any trainable tensor lacks a gradient.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        for (index, p) in params.iter().enumerate() {
            if p.requires_grad && p.grad.as_ref().is_none_or(|g| g.len() != p.numel()) {
                return Err(TensorError::MissingGradient { index });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(TensorError::Contract(
                "adam: parameter list differs from the one this state was built for".into(),
            ));
        }

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            for (((x, g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::new(&[1], vec![v]).unwrap().with_grad();
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![param(0.0, 1.0)];
        let mut adam = AdamState::new(2e-4);
        adam.step(&mut params).unwrap();
        assert!((params[0].data()[0] + 2e-4).abs() < 1e-9);
        assert_eq!(adam.step_count(), 1);
        assert_eq!(params[0].grad.as_deref(), Some(&[1.0][..]));
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut params = vec![param(0.3, 0.0)];
        let mut adam = AdamState::new(2e-4);
        for _ in 0..3 {
            adam.step(&mut params).unwrap();
        }
        assert_eq!(params[0].data()[0], 0.3);
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut params = vec![param(0.1, 0.7), param(-2.0, -0.3)];
            let mut adam = AdamState::new(1e-3);
            for k in 0..10 {
                for p in params.iter_mut() {
                    p.grad = Some(vec![(k as f64 * 0.37).sin()]);
                }
                adam.step(&mut params).unwrap();
            }
            params.iter().map(|p| p.data()[0].to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_gradient_is_rejected_without_side_effects() {
        let mut params = vec![param(1.0, 1.0), Tensor::scalar(2.0).with_grad()];
        params[1].grad = None;
        let mut adam = AdamState::new(1e-3);
        let err = adam.step(&mut params).unwrap_err();
        assert_eq!(err, TensorError::MissingGradient { index: 1 });
        assert_eq!(params[0].data()[0], 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn frozen_tensors_are_skipped() {
        let mut params = vec![param(1.0, 1.0), Tensor::scalar(5.0)];
        let mut adam = AdamState::new(1e-2);
        adam.step(&mut params).unwrap();
        assert_eq!(params[1].data()[0], 5.0);
        assert_eq!(adam.first_moments()[1], vec![0.0]);
    }
}
