//! Affine mixed state-input constraints and their projection along the
//! backup controller.
//!
//! A constraint is H(x, u) = b(x) - a(x)·u >= 0, affine in the input so the
//! filter stays a quadratic program. Projecting along the backup controller,
//! h(x) = H(x, k_b(x)), turns it into a pure state constraint; its gradient
//! is assembled by the chain rule (never finite differences in the control
//! path).

use std::sync::Arc;

use nalgebra::{DVector, RowDVector};

use crate::dynamics::Plant;
use crate::error::{Error, Result};
use crate::flow::BackupPair;
use crate::params::PendulumParams;

type RowFn = Arc<dyn Fn(&DVector<f64>) -> RowDVector<f64> + Send + Sync>;
type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type GradRowsFn = Arc<dyn Fn(&DVector<f64>) -> Vec<DVector<f64>> + Send + Sync>;

/// Diagnostic label for the constraint structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    State,
    Input,
    Mixed,
}

/// H(x, u) = b(x) - a(x)·u with gradients of a and b.
#[derive(Clone)]
pub struct MixedConstraint {
    pub label: String,
    pub kind: ConstraintKind,
    input_coeff: RowFn,
    offset: ScalarFn,
    input_coeff_gradients: GradRowsFn,
    offset_gradient: GradFn,
}

impl MixedConstraint {
    pub fn new(
        label: impl Into<String>,
        kind: ConstraintKind,
        input_coeff: RowFn,
        offset: ScalarFn,
        input_coeff_gradients: GradRowsFn,
        offset_gradient: GradFn,
    ) -> Self {
        Self {
            label: label.into(),
            kind,
            input_coeff,
            offset,
            input_coeff_gradients,
            offset_gradient,
        }
    }

    /// Pure state constraint b(x) >= 0 (a ≡ 0).
    pub fn state(
        label: impl Into<String>,
        input_dim: usize,
        offset: ScalarFn,
        offset_gradient: GradFn,
    ) -> Self {
        let state_dim_hint = Arc::new(move |x: &DVector<f64>| {
            let n = x.len();
            vec![DVector::zeros(n); input_dim]
        });
        Self::new(
            label,
            ConstraintKind::State,
            Arc::new(move |_x| RowDVector::zeros(input_dim)),
            offset,
            state_dim_hint,
            offset_gradient,
        )
    }

    /// Constant input constraint b - a·u >= 0.
    pub fn input(label: impl Into<String>, a: RowDVector<f64>, b: f64) -> Self {
        let m = a.len();
        Self::new(
            label,
            ConstraintKind::Input,
            Arc::new(move |_x| a.clone()),
            Arc::new(move |_x| b),
            Arc::new(move |x| vec![DVector::zeros(x.len()); m]),
            Arc::new(|x| DVector::zeros(x.len())),
        )
    }

    pub fn input_coeff(&self, x: &DVector<f64>) -> RowDVector<f64> {
        (self.input_coeff)(x)
    }

    pub fn offset(&self, x: &DVector<f64>) -> f64 {
        (self.offset)(x)
    }

    pub fn input_coeff_gradients(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        (self.input_coeff_gradients)(x)
    }

    pub fn offset_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.offset_gradient)(x)
    }

    /// H(x, u) = b(x) - a(x)·u.
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.offset(x) - (self.input_coeff(x) * u)[0]
    }
}

/// h(x) = H(x, k_b(x)) and its chain-rule gradient.
#[derive(Clone)]
pub struct ProjectedConstraint {
    source: Arc<MixedConstraint>,
    pair: Arc<BackupPair>,
}

/// Project a mixed constraint along the backup controller.
pub fn project(source: Arc<MixedConstraint>, pair: Arc<BackupPair>) -> ProjectedConstraint {
    ProjectedConstraint { source, pair }
}

impl ProjectedConstraint {
    pub fn source(&self) -> &MixedConstraint {
        &self.source
    }

    /// h(x) = b(x) - a(x)·k_b(x), the same arithmetic path as `eval`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.source.eval(x, &self.pair.control(x))
    }

    /// ∇h = ∇b - Σᵢ k_b(x)ᵢ·∇aᵢ - (∂k_b/∂x)ᵀ·aᵀ.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let kb = self.pair.control(x);
        let a = self.source.input_coeff(x);
        let mut grad = self.source.offset_gradient(x);
        for (i, ga) in self.source.input_coeff_gradients(x).iter().enumerate() {
            grad -= ga * kb[i];
        }
        grad -= self.pair.control_jacobian(x).transpose() * a.transpose();
        grad
    }
}

/// Linear class-K function α(s) = gain·s (extended: defined for s < 0 too).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassK {
    gain: f64,
}

impl ClassK {
    pub fn linear(gain: f64) -> Result<Self> {
        if !gain.is_finite() || gain <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "class-K gain must be > 0, got {gain}"
            )));
        }
        Ok(Self { gain })
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.gain * s
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }
}

/// k̇_b(x, u) = (∂k_b/∂x)·(f(x) + g(x)·u), the backup-controller time
/// derivative that appears in the decoupled-constraint rows.
pub fn kb_time_derivative(
    pair: &BackupPair,
    plant: &dyn Plant,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> DVector<f64> {
    let field = plant.drift(x) + plant.input_matrix(x) * u;
    pair.control_jacobian(x) * field
}

/// The six pendulum constraints, in filter row order:
/// angle (±φ_max), torque (u_min..u_max), power (P_min..P_max with P = x₂·u).
pub fn pendulum_constraints(params: &PendulumParams) -> Vec<MixedConstraint> {
    let phi_max = params.phi_max;
    let (u_min, u_max) = (params.u_min, params.u_max);
    let (p_min, p_max) = (params.p_min, params.p_max);
    vec![
        MixedConstraint::state(
            "H1",
            1,
            Arc::new(move |x| phi_max - x[0]),
            Arc::new(|_x| DVector::from_column_slice(&[-1.0, 0.0])),
        ),
        MixedConstraint::state(
            "H2",
            1,
            Arc::new(move |x| x[0] + phi_max),
            Arc::new(|_x| DVector::from_column_slice(&[1.0, 0.0])),
        ),
        MixedConstraint::input("H3", RowDVector::from_column_slice(&[1.0]), u_max),
        MixedConstraint::input("H4", RowDVector::from_column_slice(&[-1.0]), -u_min),
        // H5 = P_max - x₂·u
        MixedConstraint::new(
            "H5",
            ConstraintKind::Mixed,
            Arc::new(|x| RowDVector::from_column_slice(&[x[1]])),
            Arc::new(move |_x| p_max),
            Arc::new(|_x| vec![DVector::from_column_slice(&[0.0, 1.0])]),
            Arc::new(|_x| DVector::zeros(2)),
        ),
        // H6 = x₂·u - P_min
        MixedConstraint::new(
            "H6",
            ConstraintKind::Mixed,
            Arc::new(|x| RowDVector::from_column_slice(&[-x[1]])),
            Arc::new(move |_x| -p_min),
            Arc::new(|_x| vec![DVector::from_column_slice(&[0.0, -1.0])]),
            Arc::new(|_x| DVector::zeros(2)),
        ),
    ]
}
