//! Backup flow evaluation and its state sensitivity.
//!
//! The backup flow φ_b(θ, x) is the solution of the closed-loop system under
//! the backup controller, and Q(θ, x) = ∂φ_b/∂x is its sensitivity to the
//! initial state. The filter needs both: constraint rows along the flow are
//! linear in u through ∇h(φ)·Q·g(x). Two evaluation strategies exist — a
//! fixed-step RK4 integrator that also propagates the variational equation
//! Q̇ = J(φ)·Q, and an analytic fast path for backup policies that render the
//! closed loop linear, where φ_b(θ, x) = e^{Aθ}·x and Q = e^{Aθ}.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::Plant;
use crate::error::{Error, Result};
use crate::params::PendulumParams;

/// Any flow component beyond this magnitude is treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

type StateFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// How the backup flow is evaluated.
#[derive(Clone)]
pub enum FlowMode {
    /// Fixed-step RK4 integration of the closed loop plus variational equation.
    NumericRk4 { step: f64 },
    /// Closed loop equals A·x; flow and sensitivity are matrix exponentials.
    AnalyticLinear { a: DMatrix<f64> },
}

/// Backup controller k_b, backup-set function h_b and the flow strategy.
#[derive(Clone)]
pub struct BackupPair {
    controller: StateFn,
    controller_jacobian: MatFn,
    backup_set: ScalarFn,
    backup_set_gradient: StateFn,
    mode: FlowMode,
}

impl BackupPair {
    pub fn new(
        controller: StateFn,
        controller_jacobian: MatFn,
        backup_set: ScalarFn,
        backup_set_gradient: StateFn,
        mode: FlowMode,
    ) -> Self {
        Self {
            controller,
            controller_jacobian,
            backup_set,
            backup_set_gradient,
            mode,
        }
    }

    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.controller)(x)
    }

    pub fn control_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.controller_jacobian)(x)
    }

    pub fn backup_set_value(&self, x: &DVector<f64>) -> f64 {
        (self.backup_set)(x)
    }

    pub fn backup_set_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.backup_set_gradient)(x)
    }

    pub fn mode(&self) -> &FlowMode {
        &self.mode
    }

    /// Checks that an `AnalyticLinear` mode matches the actual closed loop on
    /// the given states: f(x) + g(x)·k_b(x) must equal A·x to relative 1e-10.
    /// Numeric mode always passes.
    pub fn validate_mode(&self, plant: &dyn Plant, states: &[DVector<f64>]) -> Result<()> {
        let FlowMode::AnalyticLinear { a } = &self.mode else {
            return Ok(());
        };
        for x in states {
            let field = plant.drift(x) + plant.input_matrix(x) * self.control(x);
            let linear = a * x;
            let scale = linear.amax().max(1.0);
            if (&field - &linear).amax() > 1e-10 * scale {
                return Err(Error::InvalidParameter(format!(
                    "AnalyticLinear mode mismatch at state {:?}: field {:?} vs A*x {:?}",
                    x.as_slice(),
                    field.as_slice(),
                    linear.as_slice()
                )));
            }
        }
        Ok(())
    }
}

/// Flow point φ_b(θ, x) with its sensitivity Q = ∂φ_b/∂x.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub theta: f64,
    pub state: DVector<f64>,
    pub sensitivity: DMatrix<f64>,
}

/// Jacobian of the closed-loop field f(x) + g(x)·k_b(x).
pub fn closed_loop_jacobian(
    plant: &dyn Plant,
    pair: &BackupPair,
    x: &DVector<f64>,
) -> DMatrix<f64> {
    let u = pair.control(x);
    let mut jac = plant.drift_jacobian(x);
    for (i, jg) in plant.input_col_jacobians(x).iter().enumerate() {
        jac += jg * u[i];
    }
    jac += plant.input_matrix(x) * pair.control_jacobian(x);
    jac
}

/// e^{A·t} by scaling and squaring with a Taylor core.
///
/// The scaled argument has norm <= 0.5, where the Taylor series converges
/// past machine precision in under 25 terms; squaring restores the scale.
pub fn matrix_exponential(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix exponential needs a square matrix");
    let at = a * t;
    let norm = at.amax() * n as f64;
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = &at / 2f64.powi(squarings as i32);

    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=30 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.amax() < 1e-18 * result.amax().max(1.0) {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

fn check_thetas(thetas: &[f64]) -> Result<()> {
    if thetas.is_empty() || thetas[0] < 0.0 {
        return Err(Error::InvalidThetaGrid);
    }
    if thetas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidThetaGrid);
    }
    Ok(())
}

/// Samples of the backup flow and its sensitivity at the requested times.
pub fn flow(
    pair: &BackupPair,
    plant: &dyn Plant,
    x: &DVector<f64>,
    thetas: &[f64],
) -> Result<Vec<FlowSample>> {
    check_thetas(thetas)?;
    match pair.mode().clone() {
        FlowMode::AnalyticLinear { a } => Ok(thetas
            .iter()
            .map(|&theta| {
                let e = matrix_exponential(&a, theta);
                FlowSample {
                    theta,
                    state: &e * x,
                    sensitivity: e,
                }
            })
            .collect()),
        FlowMode::NumericRk4 { step } => flow_rk4(pair, plant, x, thetas, step),
    }
}

fn flow_rk4(
    pair: &BackupPair,
    plant: &dyn Plant,
    x: &DVector<f64>,
    thetas: &[f64],
    step: f64,
) -> Result<Vec<FlowSample>> {
    let n = plant.state_dim();
    let field = |s: &DVector<f64>| plant.drift(s) + plant.input_matrix(s) * pair.control(s);

    let mut samples = Vec::with_capacity(thetas.len());
    let mut state = x.clone();
    let mut sens = DMatrix::identity(n, n);
    let mut theta = 0.0;

    for &target in thetas {
        let span = target - theta;
        if span > 0.0 {
            // uniform substeps no longer than `step`, landing exactly on target
            let count = (span / step).ceil().max(1.0) as usize;
            let h = span / count as f64;
            for _ in 0..count {
                rk4_variational_step(
                    &field,
                    |s| closed_loop_jacobian(plant, pair, s),
                    &mut state,
                    &mut sens,
                    h,
                );
                if state
                    .iter()
                    .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
                {
                    return Err(Error::DivergedFlow {
                        theta,
                        limit: DIVERGENCE_LIMIT,
                    });
                }
                theta += h;
            }
            theta = target;
        }
        samples.push(FlowSample {
            theta: target,
            state: state.clone(),
            sensitivity: sens.clone(),
        });
    }
    Ok(samples)
}

/// One RK4 step of the coupled system (ẋ = F(x), Q̇ = J(x)·Q).
fn rk4_variational_step<F, J>(
    field: &F,
    jac: J,
    state: &mut DVector<f64>,
    sens: &mut DMatrix<f64>,
    h: f64,
) where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let k1 = field(state);
    let q1 = jac(state) * &*sens;

    let s2 = &*state + &k1 * (h / 2.0);
    let k2 = field(&s2);
    let q2 = jac(&s2) * (&*sens + &q1 * (h / 2.0));

    let s3 = &*state + &k2 * (h / 2.0);
    let k3 = field(&s3);
    let q3 = jac(&s3) * (&*sens + &q2 * (h / 2.0));

    let s4 = &*state + &k3 * h;
    let k4 = field(&s4);
    let q4 = jac(&s4) * (&*sens + &q3 * h);

    *state += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    *sens += (q1 + q2 * 2.0 + q3 * 2.0 + q4) * (h / 6.0);
}

/// Closed-form pendulum backup flow under k_b(x) = -sin(x₁) - K·x₂:
/// φ₁ = x₁ + (1 - e^{-Kθ})·x₂/K, φ₂ = e^{-Kθ}·x₂, with the matching
/// upper-triangular sensitivity. No online integration needed.
pub fn pendulum_flow_closed_form(k: f64, x: &DVector<f64>, theta: f64) -> FlowSample {
    let decay = (-k * theta).exp();
    let ramp = (1.0 - decay) / k;
    FlowSample {
        theta,
        state: DVector::from_column_slice(&[x[0] + ramp * x[1], decay * x[1]]),
        sensitivity: DMatrix::from_row_slice(2, 2, &[1.0, ramp, 0.0, decay]),
    }
}

/// Backup pair for the pendulum study: feedback linearization with velocity
/// gain K (closed loop A = [[0,1],[0,-K]]) and the elliptic backup set
/// h_b(x) = 1 - (x₁/φ_max)² - (x₂/X₂)².
pub fn pendulum_backup_pair(params: &PendulumParams) -> BackupPair {
    let k = params.k;
    let phi_max = params.phi_max;
    let x2_max = params.x2_max;
    BackupPair::new(
        Arc::new(move |x: &DVector<f64>| DVector::from_element(1, -x[0].sin() - k * x[1])),
        Arc::new(move |x: &DVector<f64>| DMatrix::from_row_slice(1, 2, &[-x[0].cos(), -k])),
        Arc::new(move |x: &DVector<f64>| 1.0 - (x[0] / phi_max).powi(2) - (x[1] / x2_max).powi(2)),
        Arc::new(move |x: &DVector<f64>| {
            DVector::from_column_slice(&[
                -2.0 * x[0] / (phi_max * phi_max),
                -2.0 * x[1] / (x2_max * x2_max),
            ])
        }),
        FlowMode::AnalyticLinear {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -k]),
        },
    )
}

/// Same pair but forced through the numeric integrator; used by tests and the
/// self-test to cross-check the analytic path.
pub fn pendulum_backup_pair_numeric(params: &PendulumParams, step: f64) -> BackupPair {
    let mut pair = pendulum_backup_pair(params);
    pair.mode = FlowMode::NumericRk4 { step };
    pair
}
