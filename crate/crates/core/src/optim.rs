//! Parameter updates: Adam, plain SGD and the EMA used for target networks.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_grads(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(alloc::format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One Adam update. Moment buffers are created on the first call and
    /// must shape-match the same parameter list on every later call.
    ///
    /// On a non-finite or mis-shaped gradient the parameters and moments
    /// are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check_grads(params, grads)?;
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::invalid("Adam moment buffers do not match parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bias2 = 1.0 - libm::pow(self.beta2, t as f64);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                pd[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

/// `p ← p − lr·g` for every parameter.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

/// `target ← τ·target + (1 − τ)·online`, elementwise.
pub fn ema_update(target: &mut [&mut Tensor], online: &[&Tensor], tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(alloc::format!("EMA decay {tau} outside [0, 1]")));
    }
    if target.len() != online.len() {
        return Err(Error::invalid("EMA partitions differ in length"));
    }
    for (t, o) in target.iter().zip(online) {
        if t.shape() != o.shape() {
            return Err(Error::shape("ema_update", t.shape(), o.shape()));
        }
    }
    for (t, o) in target.iter_mut().zip(online) {
        for (x, y) in t.data_mut().iter_mut().zip(o.data()) {
            *x = tau * *x + (1.0 - tau) * y;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(&[1.0, -2.0]);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: m̂ = g, v̂ = g², update = lr·g/(|g| + ε) = 0.1/(1 + 1e-8).
        let mut p = Tensor::scalar(0.5);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        let expected = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn momentum_decay_after_zero_grads_is_bounded() {
        // Steps 2 and 3 with g=0: m̂_t = 0.9^{t-1}·0.1/(1-0.9^t), v̂_t likewise;
        // each step is below lr, total drift below 2·lr.
        let mut p = Tensor::scalar(0.0);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        let after_first = p.item();
        for _ in 0..2 {
            let before = p.item();
            adam.step(&mut [&mut p], &[Tensor::scalar(0.0)]).unwrap();
            assert!((p.item() - before).abs() <= 0.1);
        }
        assert!((p.item() - after_first).abs() <= 0.2);
        // Hand evaluation of step 2: m = 0.09, v = 0.000999;
        // m̂ = 0.09/0.19, v̂ = 0.000999/0.001999.
        let m_hat2 = 0.09 / (1.0 - 0.81);
        let v_hat2 = 0.000999 / (1.0 - 0.999f64 * 0.999);
        let step2 = 0.1 * m_hat2 / (libm::sqrt(v_hat2) + 1e-8);
        let m_hat3 = 0.081 / (1.0 - 0.729);
        let v_hat3 = 0.000999 * 0.999 / (1.0 - 0.999f64 * 0.999 * 0.999);
        let step3 = 0.1 * m_hat3 / (libm::sqrt(v_hat3) + 1e-8);
        assert!((p.item() - (after_first - step2 - step3)).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_rejected_params_untouched() {
        let mut p = Tensor::vector(&[1.0, 2.0]);
        let bad = Tensor::from_parts(vec![2], vec![0.5, f64::NAN]);
        let mut adam = AdamState::new(0.1);
        assert!(adam.step(&mut [&mut p], &[bad]).is_err());
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn ema_edge_cases() {
        let online = Tensor::scalar(4.0);
        let mut target = Tensor::scalar(2.0);
        ema_update(&mut [&mut target], &[&online], 1.0).unwrap();
        assert_eq!(target.item(), 2.0);
        ema_update(&mut [&mut target], &[&online], 0.5).unwrap();
        assert_eq!(target.item(), 3.0);
        ema_update(&mut [&mut target], &[&online], 0.0).unwrap();
        assert_eq!(target.item(), 4.0);
        assert!(ema_update(&mut [&mut target], &[&online], 1.5).is_err());
    }

    #[test]
    fn ema_shape_mismatch() {
        let online = Tensor::zeros(&[2]);
        let mut target = Tensor::zeros(&[3]);
        assert!(ema_update(&mut [&mut target], &[&online], 0.5).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        // θ=1, ∇=2, α=0.5 → 0.
        let mut p = Tensor::scalar(1.0);
        sgd_step(&mut [&mut p], &[Tensor::scalar(2.0)], 0.5).unwrap();
        assert_eq!(p.item(), 0.0);
    }
}
