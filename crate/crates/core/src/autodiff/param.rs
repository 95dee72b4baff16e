use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;

use crate::error::CoreError;
use crate::Result;

use super::Tensor;

/// A named model parameter: value, gradient accumulator, trainable flag.
///
/// Frozen parameters never change after initialization; [`adaptive_step`]
/// refuses to touch them.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    /// Stores a 64-bit gradient into the 32-bit accumulator.
    pub fn set_grad(&mut self, g: &[f64]) {
        self.grad.set_from_f64(g);
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second-moment optimizer state for one parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
        }
    }

    pub fn for_param(p: &Parameter) -> Self {
        Self::new(p.numel())
    }
}

/// Bias-corrected adaptive moment update. The moments live in 64-bit; the
/// parameter value is read and stored in its 32-bit tensor.
pub fn adaptive_step(param: &mut Parameter, lr: f64, state: &mut AdamState) -> Result<()> {
    if !param.trainable {
        return Err(CoreError::Contract(
            "adaptive step on a frozen parameter",
        ));
    }
    if state.m.len() != param.numel() {
        return Err(CoreError::ShapeMismatch {
            context: "optimizer state vs parameter",
            left: vec![state.m.len()],
            right: vec![param.numel()],
        });
    }
    state.t += 1;
    let bc1 = 1.0 - pow64(BETA1, state.t);
    let bc2 = 1.0 - pow64(BETA2, state.t);
    let grad = param.grad.data().to_vec();
    let data = param.value.data_mut();
    for i in 0..grad.len() {
        let g = grad[i] as f64;
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let next = data[i] as f64 - lr * m_hat / (sqrt(v_hat) + ADAM_EPS);
        data[i] = next as f32;
    }
    Ok(())
}

fn pow64(base: f64, mut exp: u64) -> f64 {
    let mut acc = 1.0;
    let mut b = base;
    while exp > 0 {
        if exp & 1 == 1 {
            acc *= b;
        }
        b *= b;
        exp >>= 1;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let t = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut p = Parameter::new("w", t.clone(), true);
        let mut st = AdamState::for_param(&p);
        adaptive_step(&mut p, 0.1, &mut st).unwrap();
        assert_eq!(p.value.data(), t.data());
    }

    #[test]
    fn first_step_is_signed_lr() {
        let t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let mut p = Parameter::new("w", t, true);
        p.set_grad(&[0.5, -2.0]);
        let mut st = AdamState::for_param(&p);
        adaptive_step(&mut p, 0.01, &mut st).unwrap();
        // bias corrections cancel at t=1: update = -lr * g/(|g| + eps)
        assert!((p.value.data()[0] as f64 + 0.01).abs() < 1e-7);
        assert!((p.value.data()[1] as f64 - 0.01).abs() < 1e-7);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = Parameter::new("x", Tensor::scalar(0.0), true);
        let mut st = AdamState::for_param(&p);
        for _ in 0..500 {
            let x = p.value.data()[0] as f64;
            p.set_grad(&[x - 5.0]);
            adaptive_step(&mut p, 0.1, &mut st).unwrap();
        }
        let x = p.value.data()[0] as f64;
        assert!((x - 5.0).abs() < 1e-2, "ended at {x}");
    }

    #[test]
    fn frozen_parameter_is_rejected() {
        let mut p = Parameter::new("theta", Tensor::scalar(1.0), false);
        let mut st = AdamState::for_param(&p);
        match adaptive_step(&mut p, 0.1, &mut st).unwrap_err() {
            CoreError::Contract(_) => {}
            other => panic!("unexpected error {other:?}"),
        }
    }
}
