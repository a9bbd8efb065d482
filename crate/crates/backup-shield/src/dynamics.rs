//! Control-affine plant abstraction and the inverted-pendulum plant.
//!
//! A plant is the system ẋ = f(x) + g(x)·u with analytic Jacobians. The
//! Jacobians feed hard safety constraints downstream, so each plant supplies
//! them in closed form; [`fd_jacobian`] exists as a generic fallback and as
//! the test oracle for the analytic paths.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Control-affine dynamics ẋ = f(x) + g(x)·u.
pub trait Plant: Send + Sync {
    /// State dimension n.
    fn state_dim(&self) -> usize;
    /// Input dimension m.
    fn input_dim(&self) -> usize;
    /// Drift f(x), length n.
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Input matrix g(x), n×m.
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Jacobian of the drift, n×n.
    fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Jacobians of each column of g, m matrices of size n×n.
    fn input_col_jacobians(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>>;
}

/// Inverted pendulum with unit coefficients:
/// ẋ₁ = x₂, ẋ₂ = sin(x₁) + u. State is (angle, angular velocity), the input
/// is a torque, and the drawn power is x₂·u.
#[derive(Debug, Clone, Copy, Default)]
pub struct PendulumPlant;

impl Plant for PendulumPlant {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&[x[1], x[0].sin()])
    }

    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0])
    }

    fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, x[0].cos(), 0.0])
    }

    fn input_col_jacobians(&self, _x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(2, 2)]
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Evaluate the drift f(x), rejecting wrong-length states.
pub fn eval_drift(plant: &dyn Plant, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(plant.state_dim(), x.len())?;
    Ok(plant.drift(x))
}

/// Evaluate the closed-loop field f(x) + g(x)·k(x).
pub fn eval_closed_loop(
    plant: &dyn Plant,
    x: &DVector<f64>,
    controller: &dyn Fn(&DVector<f64>) -> DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim(plant.state_dim(), x.len())?;
    let u = controller(x);
    check_dim(plant.input_dim(), u.len())?;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteController {
            state: x.iter().copied().collect(),
        });
    }
    Ok(plant.drift(x) + plant.input_matrix(x) * u)
}

/// Central finite-difference Jacobian of a vector map, step 1e-6·max(1,|xᵢ|).
///
/// Generic fallback and test oracle; analytic Jacobians stay authoritative in
/// the control path.
pub fn fd_jacobian<F>(map: F, x: &DVector<f64>, out_dim: usize) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(out_dim, n);
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fp = map(&xp);
        let fm = map(&xm);
        for i in 0..out_dim {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_column_slice(&[a, b])
    }

    #[test]
    fn pendulum_drift_values() {
        let p = PendulumPlant;
        // sin 0 = 0
        assert_eq!(eval_drift(&p, &v2(0.0, 0.0)).unwrap(), v2(0.0, 0.0));
        let d = eval_drift(&p, &v2(std::f64::consts::FRAC_PI_2, 1.0)).unwrap();
        assert_relative_eq!(d[0], 1.0, max_relative = 1e-15);
        assert_relative_eq!(d[1], 1.0, max_relative = 1e-15);
        let d = eval_drift(&p, &v2(-std::f64::consts::FRAC_PI_2, 0.5)).unwrap();
        assert_relative_eq!(d[0], 0.5, max_relative = 1e-15);
        assert_relative_eq!(d[1], -1.0, max_relative = 1e-15);
    }

    #[test]
    fn drift_rejects_wrong_dimension() {
        let p = PendulumPlant;
        let bad = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            eval_drift(&p, &bad),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 3
            })
        ));
    }

    #[test]
    fn closed_loop_drift_only_under_zero_controller() {
        let p = PendulumPlant;
        let zero = |_: &DVector<f64>| DVector::zeros(1);
        let d = eval_closed_loop(&p, &v2(0.0, 1.0), &zero).unwrap();
        assert_eq!(d, v2(1.0, 0.0));
    }

    #[test]
    fn closed_loop_with_backup_controller() {
        let p = PendulumPlant;
        let k = 0.7;
        let kb = move |x: &DVector<f64>| DVector::from_element(1, -x[0].sin() - k * x[1]);
        // sin 0 = 0, so u = -0.7 and the acceleration equals u
        let d = eval_closed_loop(&p, &v2(0.0, 1.0), &kb).unwrap();
        assert_relative_eq!(d[0], 1.0, max_relative = 1e-15);
        assert_relative_eq!(d[1], -0.7, max_relative = 1e-15);
        // feedback linearization cancels the drift; zero velocity => zero field
        let d = eval_closed_loop(&p, &v2(0.3, 0.0), &kb).unwrap();
        assert_relative_eq!(d[0], 0.0, max_relative = 1e-15);
        assert!(d[1].abs() < 1e-15);
    }

    #[test]
    fn closed_loop_rejects_non_finite_input() {
        let p = PendulumPlant;
        let bad = |_: &DVector<f64>| DVector::from_element(1, f64::NAN);
        assert!(matches!(
            eval_closed_loop(&p, &v2(0.1, 0.2), &bad),
            Err(Error::NonFiniteController { .. })
        ));
    }

    #[test]
    fn pendulum_closed_loop_is_exactly_linear_under_backup_controller() {
        // Under k_b the field must equal (x₂, -K·x₂) pointwise.
        let p = PendulumPlant;
        let k = 0.7;
        let kb = move |x: &DVector<f64>| DVector::from_element(1, -x[0].sin() - k * x[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = v2(rng.gen_range(-2.0..2.0), rng.gen_range(-1.5..1.5));
            let d = eval_closed_loop(&p, &x, &kb).unwrap();
            assert!((d[0] - x[1]).abs() < 1e-12);
            assert!((d[1] + k * x[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let p = PendulumPlant;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = v2(rng.gen_range(-2.0..2.0), rng.gen_range(-1.5..1.5));
            let analytic = p.drift_jacobian(&x);
            let fd = fd_jacobian(|y| p.drift(y), &x, 2);
            for i in 0..2 {
                for j in 0..2 {
                    let scale = analytic[(i, j)].abs().max(1.0);
                    assert!(
                        (analytic[(i, j)] - fd[(i, j)]).abs() <= 1e-5 * scale,
                        "J[{i},{j}] analytic {} vs fd {}",
                        analytic[(i, j)],
                        fd[(i, j)]
                    );
                }
            }
        }
    }
}
