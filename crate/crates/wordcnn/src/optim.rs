//! Parameter update rules: mini-batch SGD, RMSprop, and Nesterov Adam.
//!
//! Gradients are expected to be batch means (the training loop averages
//! before stepping), so learning rates are batch-size-insensitive. Updates
//! are applied to parameters in name order, making runs bitwise reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::stack::{GradSet, LayerStack};
use crate::nn::tensor::{scalar, Scalar, Tensor};

pub const SGD_DEFAULT_LR: f64 = 0.01;
pub const RMSPROP_DEFAULT_LR: f64 = 0.001;
pub const RMSPROP_DEFAULT_RHO: f64 = 0.9;
pub const NADAM_DEFAULT_LR: f64 = 0.002;
pub const NADAM_DEFAULT_BETA1: f64 = 0.9;
pub const NADAM_DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Update rule plus its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "optimizer", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { learning_rate: f64 },
    RmsProp { learning_rate: f64, rho: f64, epsilon: f64 },
    Nadam { learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn sgd_default() -> Self {
        OptimizerKind::Sgd {
            learning_rate: SGD_DEFAULT_LR,
        }
    }

    pub fn rmsprop_default() -> Self {
        OptimizerKind::RmsProp {
            learning_rate: RMSPROP_DEFAULT_LR,
            rho: RMSPROP_DEFAULT_RHO,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn nadam_default() -> Self {
        OptimizerKind::Nadam {
            learning_rate: NADAM_DEFAULT_LR,
            beta1: NADAM_DEFAULT_BETA1,
            beta2: NADAM_DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd { .. } => "sgd",
            OptimizerKind::RmsProp { .. } => "rmsprop",
            OptimizerKind::Nadam { .. } => "nadam",
        }
    }
}

/// One step of plain gradient descent: `theta <- theta - lr * g`.
pub fn sgd_step<T: Scalar>(param: &mut [T], grad: &[T], learning_rate: f64) -> Result<()> {
    check_len(param.len(), grad.len())?;
    let lr: T = scalar(learning_rate);
    for (p, &g) in param.iter_mut().zip(grad) {
        *p = *p - lr * g;
    }
    Ok(())
}

/// Running second-moment state for RMSprop.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState<T: Scalar> {
    pub v: Vec<T>,
}

impl<T: Scalar> RmsPropState<T> {
    pub fn new(len: usize) -> Self {
        RmsPropState {
            v: vec![T::zero(); len],
        }
    }
}

/// RMSprop: `v <- rho v + (1-rho) g^2; theta <- theta - lr g / (sqrt(v) + eps)`.
pub fn rmsprop_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut RmsPropState<T>,
    learning_rate: f64,
    rho: f64,
    epsilon: f64,
) -> Result<()> {
    check_len(param.len(), grad.len())?;
    check_len(param.len(), state.v.len())?;
    let lr: T = scalar(learning_rate);
    let rho_t: T = scalar(rho);
    let one_minus_rho: T = scalar(1.0 - rho);
    let eps: T = scalar(epsilon);
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(&mut state.v) {
        *v = rho_t * *v + one_minus_rho * g * g;
        *p = *p - lr * g / (v.sqrt() + eps);
    }
    Ok(())
}

/// First- and second-moment state for Nesterov Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct NadamState<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> NadamState<T> {
    pub fn new(len: usize) -> Self {
        NadamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// Nesterov-momentum Adam. With `t` the 1-based step count:
///
/// ```text
/// m <- b1 m + (1-b1) g          v <- b2 v + (1-b2) g^2
/// m_hat = m / (1 - b1^(t+1))    v_hat = v / (1 - b2^t)
/// theta <- theta - lr (b1 m_hat + (1-b1) g / (1 - b1^t)) / (sqrt(v_hat) + eps)
/// ```
#[allow(clippy::too_many_arguments)]
pub fn nadam_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut NadamState<T>,
    t: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    check_len(param.len(), grad.len())?;
    check_len(param.len(), state.m.len())?;
    assert!(t >= 1, "nadam step count is 1-based");
    let lr: T = scalar(learning_rate);
    let b1: T = scalar(beta1);
    let b2: T = scalar(beta2);
    let one_minus_b1: T = scalar(1.0 - beta1);
    let one_minus_b2: T = scalar(1.0 - beta2);
    let eps: T = scalar(epsilon);
    let m_corr: T = scalar(1.0 - beta1.powi(t as i32 + 1));
    let v_corr: T = scalar(1.0 - beta2.powi(t as i32));
    let g_corr: T = scalar(1.0 - beta1.powi(t as i32));
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + one_minus_b1 * g;
        *v = b2 * *v + one_minus_b2 * g * g;
        let m_hat = *m / m_corr;
        let v_hat = *v / v_corr;
        let lookahead = b1 * m_hat + one_minus_b1 * g / g_corr;
        *p = *p - lr * lookahead / (v_hat.sqrt() + eps);
    }
    Ok(())
}

enum ParamState<T: Scalar> {
    RmsProp(RmsPropState<T>),
    Nadam(NadamState<T>),
}

/// Stateful optimizer over a stack's named parameters. The step counter
/// advances exactly once per [`Optimizer::step`], shared by all parameters.
pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    state: BTreeMap<String, ParamState<T>>,
    t: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            state: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update from averaged gradients. Parameters are visited in
    /// name order; gradients with no matching parameter are an error.
    pub fn step(&mut self, stack: &mut LayerStack<T>, grads: &GradSet<T>) -> Result<()> {
        self.t += 1;
        for (name, grad) in grads {
            let param: &mut Tensor<T> = stack
                .param_mut(name)
                .ok_or_else(|| Error::Input(format!("gradient for unknown parameter `{name}`")))?;
            if param.shape() != grad.shape() {
                return Err(Error::shape(
                    "optimizer step",
                    format!(
                        "parameter `{name}` shape {:?} != gradient shape {:?}",
                        param.shape(),
                        grad.shape()
                    ),
                ));
            }
            let len = param.len();
            match self.kind {
                OptimizerKind::Sgd { learning_rate } => {
                    sgd_step(param.data_mut(), grad.data(), learning_rate)?;
                }
                OptimizerKind::RmsProp {
                    learning_rate,
                    rho,
                    epsilon,
                } => {
                    let slot = self
                        .state
                        .entry(name.clone())
                        .or_insert_with(|| ParamState::RmsProp(RmsPropState::new(len)));
                    match slot {
                        ParamState::RmsProp(s) => rmsprop_step(
                            param.data_mut(),
                            grad.data(),
                            s,
                            learning_rate,
                            rho,
                            epsilon,
                        )?,
                        _ => unreachable!("state kind fixed at construction"),
                    }
                }
                OptimizerKind::Nadam {
                    learning_rate,
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let slot = self
                        .state
                        .entry(name.clone())
                        .or_insert_with(|| ParamState::Nadam(NadamState::new(len)));
                    match slot {
                        ParamState::Nadam(s) => nadam_step(
                            param.data_mut(),
                            grad.data(),
                            s,
                            self.t,
                            learning_rate,
                            beta1,
                            beta2,
                            epsilon,
                        )?,
                        _ => unreachable!("state kind fixed at construction"),
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_len(param: usize, other: usize) -> Result<()> {
    if param != other {
        return Err(Error::shape(
            "optimizer",
            format!("parameter length {param} != {other}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_definition_and_linearity() {
        let mut theta = vec![1.0f64];
        sgd_step(&mut theta, &[0.5], 0.1).unwrap();
        assert!((theta[0] - 0.95).abs() < 1e-15);

        let mut a = vec![1.0f64];
        sgd_step(&mut a, &[0.3], 0.1).unwrap();
        sgd_step(&mut a, &[0.3], 0.1).unwrap();
        let mut b = vec![1.0f64];
        sgd_step(&mut b, &[0.3], 0.2).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-15);

        let mut c = vec![2.5f64];
        sgd_step(&mut c, &[0.0], 0.1).unwrap();
        assert_eq!(c[0], 2.5);
    }

    #[test]
    fn rmsprop_first_step_matches_hand_oracle() {
        // v = 0.1 * 1 = 0.1; delta = -0.001 / (sqrt(0.1) + 1e-8)
        // frozen from an independent hand computation
        let expected_theta = 0.9968377224398316f64;
        let mut theta = vec![1.0f64];
        let mut state = RmsPropState::new(1);
        rmsprop_step(&mut theta, &[1.0], &mut state, 0.001, 0.9, 1e-8).unwrap();
        assert!(
            (theta[0] - expected_theta).abs() < 1e-12,
            "got {}",
            theta[0]
        );
        assert!((state.v[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_zero_grad_fresh_state_is_identity() {
        let mut theta = vec![3.0f64, -2.0];
        let mut state = RmsPropState::new(2);
        rmsprop_step(&mut theta, &[0.0, 0.0], &mut state, 0.001, 0.9, 1e-8).unwrap();
        assert_eq!(theta, vec![3.0, -2.0]);
    }

    #[test]
    fn nadam_first_step_matches_hand_oracle() {
        // m = 0.1, v = 0.001, m_hat = 0.1/0.19, v_hat = 1,
        // delta = -0.002 (0.9 m_hat + 0.1/(0.1)) / (1 + 1e-8)
        // frozen from an independent hand computation
        let expected_theta = 0.9970526316084211f64;
        let mut theta = vec![1.0f64];
        let mut state = NadamState::new(1);
        nadam_step(&mut theta, &[1.0], &mut state, 1, 0.002, 0.9, 0.999, 1e-8).unwrap();
        assert!(
            (theta[0] - expected_theta).abs() < 1e-12,
            "got {}",
            theta[0]
        );
    }

    #[test]
    fn nadam_zero_grad_fresh_state_is_identity() {
        let mut theta = vec![1.5f64];
        let mut state = NadamState::new(1);
        nadam_step(&mut theta, &[0.0], &mut state, 1, 0.002, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(theta[0], 1.5);
    }

    #[test]
    fn nadam_descends_a_quadratic() {
        // f(theta) = theta^2, grad = 2 theta, start at 5
        let mut theta = vec![5.0f64];
        let mut state = NadamState::new(1);
        let mut last_loss = theta[0] * theta[0];
        for t in 1..=200 {
            let grad = vec![2.0 * theta[0]];
            nadam_step(&mut theta, &grad, &mut state, t, 0.002, 0.9, 0.999, 1e-8).unwrap();
            let loss = theta[0] * theta[0];
            assert!(loss < last_loss, "loss rose at step {t}");
            last_loss = loss;
        }
    }

    #[test]
    fn all_optimizers_reach_origin_on_quadratic() {
        // 2-D f(theta) = |theta|^2 from (5, 5), 10^4 steps at defaults
        for kind in [
            OptimizerKind::sgd_default(),
            OptimizerKind::rmsprop_default(),
            OptimizerKind::nadam_default(),
        ] {
            let mut theta = vec![5.0f64, 5.0];
            let mut rms = RmsPropState::new(2);
            let mut nadam = NadamState::new(2);
            for t in 1..=10_000u64 {
                let grad: Vec<f64> = theta.iter().map(|&x| 2.0 * x).collect();
                match kind {
                    OptimizerKind::Sgd { learning_rate } => {
                        sgd_step(&mut theta, &grad, learning_rate).unwrap()
                    }
                    OptimizerKind::RmsProp {
                        learning_rate,
                        rho,
                        epsilon,
                    } => rmsprop_step(&mut theta, &grad, &mut rms, learning_rate, rho, epsilon)
                        .unwrap(),
                    OptimizerKind::Nadam {
                        learning_rate,
                        beta1,
                        beta2,
                        epsilon,
                    } => nadam_step(
                        &mut theta, &grad, &mut nadam, t, learning_rate, beta1, beta2, epsilon,
                    )
                    .unwrap(),
                }
            }
            let max = theta.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            assert!(max < 0.1, "{} ended at {theta:?}", kind.name());
        }
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let mut theta = vec![0.0f64; 3];
        assert!(sgd_step(&mut theta, &[1.0], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn second_moments_never_go_negative(seed in any::<u64>(), steps in 1usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut theta = vec![0.5f64; 4];
            let mut rms = RmsPropState::new(4);
            let mut nadam = NadamState::new(4);
            let mut theta2 = theta.clone();
            for t in 1..=steps as u64 {
                let grad: Vec<f64> = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
                rmsprop_step(&mut theta, &grad, &mut rms, 0.001, 0.9, 1e-8).unwrap();
                nadam_step(&mut theta2, &grad, &mut nadam, t, 0.002, 0.9, 0.999, 1e-8).unwrap();
                prop_assert!(rms.v.iter().all(|&v| v >= 0.0));
                prop_assert!(nadam.v.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn zero_grad_from_fresh_state_is_identity_for_all(x in -5.0f64..5.0) {
            let mut a = vec![x];
            sgd_step(&mut a, &[0.0], 0.01).unwrap();
            prop_assert_eq!(a[0], x);
            let mut b = vec![x];
            rmsprop_step(&mut b, &[0.0], &mut RmsPropState::new(1), 0.001, 0.9, 1e-8).unwrap();
            prop_assert_eq!(b[0], x);
            let mut c = vec![x];
            nadam_step(&mut c, &[0.0], &mut NadamState::new(1), 1, 0.002, 0.9, 0.999, 1e-8).unwrap();
            prop_assert_eq!(c[0], x);
        }
    }
}
