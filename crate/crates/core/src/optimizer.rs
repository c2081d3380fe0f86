//! First-order updates: Adam for CF pre-training and the plain gradient
//! steps used during adaptation.

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};

/// Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: DMatrix<f64>,
    pub second_moment: DMatrix<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// Fresh state with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(rows: usize, cols: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: DMatrix::zeros(rows, cols),
            second_moment: DMatrix::zeros(rows, cols),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn like(param: &DMatrix<f64>, learning_rate: f64) -> Self {
        Self::new(param.nrows(), param.ncols(), learning_rate)
    }
}

fn check_shape(context: &'static str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    check_dim(context, a.nrows(), b.nrows())?;
    check_dim(context, a.ncols(), b.ncols())
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(
    state: &mut AdamState,
    param: &mut DMatrix<f64>,
    grad: &DMatrix<f64>,
) -> Result<()> {
    check_shape("adam parameter shape", &state.first_moment, param)?;
    check_shape("adam gradient shape", param, grad)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::invalid("adam_step received a non-finite gradient"));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.epsilon;
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad.iter())
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `param - (eta_pred * grad_pred - eta_minus * grad_adv)`: descend the
/// prediction loss while ascending the adversarial loss.
pub fn sgd_combined_step(
    param: &DMatrix<f64>,
    grad_pred: &DMatrix<f64>,
    grad_adv: &DMatrix<f64>,
    eta_pred: f64,
    eta_minus: f64,
) -> Result<DMatrix<f64>> {
    check_shape("prediction gradient shape", param, grad_pred)?;
    check_shape("adversarial gradient shape", param, grad_adv)?;
    let mut out = param.clone();
    for ((p, &gp), &ga) in out.iter_mut().zip(grad_pred.iter()).zip(grad_adv.iter()) {
        *p -= eta_pred * gp - eta_minus * ga;
    }
    Ok(out)
}

/// `param - eta * grad`.
pub fn sgd_step(param: &DMatrix<f64>, grad: &DMatrix<f64>, eta: f64) -> Result<DMatrix<f64>> {
    check_shape("gradient shape", param, grad)?;
    let mut out = param.clone();
    for (p, &g) in out.iter_mut().zip(grad.iter()) {
        *p -= eta * g;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn adam_zero_gradient_is_fixpoint() {
        let mut p = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 0.5]);
        let before = p.clone();
        let mut s = AdamState::like(&p, 0.1);
        adam_step(&mut s, &mut p, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // Oracle: m = 0.1, v = 0.001, m_hat = 0.1/0.1 = 1, v_hat = 0.001/0.001 = 1,
        // update = 0.1 * 1 / (1 + 1e-8).
        let expected = 1.0 - 0.1 * 1.0 / (1.0f64.sqrt() + 1e-8);
        let mut p = scalar(1.0);
        let mut s = AdamState::new(1, 1, 0.1);
        adam_step(&mut s, &mut p, &scalar(1.0)).unwrap();
        assert!((p[(0, 0)] - expected).abs() < 1e-15);
        assert!((p[(0, 0)] - 0.9).abs() < 1e-8);

        // Second step with the same gradient, again by hand.
        let m2: f64 = 0.9 * 0.1 + 0.1;
        let v2: f64 = 0.999 * 0.001 + 0.001;
        let step2 = 0.1 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        adam_step(&mut s, &mut p, &scalar(1.0)).unwrap();
        assert!((p[(0, 0)] - (expected - step2)).abs() < 1e-15);
    }

    #[test]
    fn adam_is_a_pure_function_of_its_inputs() {
        let s0 = AdamState::new(1, 3, 0.01);
        let p0 = DMatrix::from_row_slice(1, 3, &[0.1, 0.2, 0.3]);
        let g = DMatrix::from_row_slice(1, 3, &[0.5, -1.0, 2.0]);
        let run = || {
            let (mut s, mut p) = (s0.clone(), p0.clone());
            adam_step(&mut s, &mut p, &g).unwrap();
            (s, p)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_bad_shapes_and_gradients() {
        let mut p = DMatrix::zeros(2, 2);
        let mut s = AdamState::new(2, 2, 0.1);
        assert!(adam_step(&mut s, &mut p, &DMatrix::zeros(2, 3)).is_err());
        let mut wrong = AdamState::new(1, 2, 0.1);
        assert!(adam_step(&mut wrong, &mut p, &DMatrix::zeros(2, 2)).is_err());
        assert!(adam_step(&mut s, &mut p, &DMatrix::from_element(2, 2, f64::NAN)).is_err());
    }

    proptest! {
        #[test]
        fn adam_zero_gradients_identity_for_all_step_counts(
            values in prop::collection::vec(-3.0..3.0f64, 6),
            steps in 1usize..50,
        ) {
            let mut p = DMatrix::from_row_slice(2, 3, &values);
            let before = p.clone();
            let mut s = AdamState::like(&p, 0.3);
            for _ in 0..steps {
                adam_step(&mut s, &mut p, &DMatrix::zeros(2, 3)).unwrap();
            }
            prop_assert_eq!(p, before);
        }
    }

    #[test]
    fn combined_step_examples() {
        let p = scalar(1.0);
        assert_eq!(
            sgd_combined_step(&p, &scalar(0.0), &scalar(0.0), 0.1, 0.05).unwrap(),
            p
        );
        let out = sgd_combined_step(&p, &scalar(2.0), &scalar(1.0), 0.1, 0.05).unwrap();
        assert!((out[(0, 0)] - 0.85).abs() < 1e-15);
        assert_eq!(
            sgd_combined_step(&p, &scalar(2.0), &scalar(7.0), 0.1, 0.0).unwrap(),
            sgd_step(&p, &scalar(2.0), 0.1).unwrap()
        );
        assert!(sgd_combined_step(&p, &DMatrix::zeros(1, 2), &scalar(0.0), 0.1, 0.1).is_err());
        assert!(sgd_combined_step(&p, &scalar(0.0), &DMatrix::zeros(2, 1), 0.1, 0.1).is_err());
    }

    #[test]
    fn sgd_step_examples() {
        assert_eq!(
            sgd_step(&scalar(2.0), &scalar(0.0), 0.5).unwrap(),
            scalar(2.0)
        );
        assert_eq!(
            sgd_step(&scalar(2.0), &scalar(1.0), 0.5).unwrap(),
            scalar(1.5)
        );
        assert!(sgd_step(&scalar(2.0), &DMatrix::zeros(1, 2), 0.5).is_err());
    }

    proptest! {
        #[test]
        fn sgd_forward_then_back_returns_to_start(
            p in prop::collection::vec(-4.0..4.0f64, 4),
            g in prop::collection::vec(-4.0..4.0f64, 4),
            eta in 0.0..1.0f64,
        ) {
            let p = DMatrix::from_row_slice(2, 2, &p);
            let g = DMatrix::from_row_slice(2, 2, &g);
            let there = sgd_step(&p, &g, eta).unwrap();
            let back = sgd_step(&there, &(-&g), eta).unwrap();
            for (a, b) in back.iter().zip(p.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn combined_step_is_linear_in_each_gradient(
            p in prop::collection::vec(-4.0..4.0f64, 3),
            g1 in prop::collection::vec(-4.0..4.0f64, 3),
            g2 in prop::collection::vec(-4.0..4.0f64, 3),
            a in prop::collection::vec(-4.0..4.0f64, 3),
            eta in 0.0..1.0f64,
            eta_minus in 0.0..1.0f64,
        ) {
            let m = |v: &Vec<f64>| DMatrix::from_row_slice(1, 3, v);
            let (p, g1, g2, a) = (m(&p), m(&g1), m(&g2), m(&a));
            // Displacement from `param` is linear in the gradient arguments.
            let disp = |gp: &DMatrix<f64>, ga: &DMatrix<f64>| {
                sgd_combined_step(&p, gp, ga, eta, eta_minus).unwrap() - &p
            };
            let lhs = disp(&(&g1 + &g2), &a);
            let rhs = disp(&g1, &a) + disp(&g2, &a) - disp(&DMatrix::zeros(1, 3), &a);
            prop_assert!((lhs - rhs).amax() <= 1e-12);
            let doubled = disp(&DMatrix::zeros(1, 3), &(&a * 2.0));
            let single = disp(&DMatrix::zeros(1, 3), &a);
            prop_assert!((doubled - single * 2.0).amax() <= 1e-12);
        }

        #[test]
        fn updates_preserve_finiteness(
            p in prop::collection::vec(-1e3..1e3f64, 4),
            g in prop::collection::vec(-1e3..1e3f64, 4),
            eta in 0.0..10.0f64,
        ) {
            let p = DMatrix::from_row_slice(2, 2, &p);
            let g = DMatrix::from_row_slice(2, 2, &g);
            prop_assert!(sgd_step(&p, &g, eta).unwrap().iter().all(|v| v.is_finite()));
            prop_assert!(sgd_combined_step(&p, &g, &g, eta, eta).unwrap().iter().all(|v| v.is_finite()));
            let mut q = p.clone();
            let mut s = AdamState::like(&q, eta);
            adam_step(&mut s, &mut q, &g).unwrap();
            prop_assert!(q.iter().all(|v| v.is_finite()));
        }
    }
}
