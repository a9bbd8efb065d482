//! Safety filters: the backup CBF optimization problem and the HOCBF
//! baseline it is compared against.
//!
//! The backup filter stacks, per state, three deterministic row blocks
//! (constraint-major, θ-minor):
//! 1. for every constraint j and every θ sample along the backup flow:
//!    ḣ_j(φ(θ,x), u) >= -α_j(h_j(φ(θ,x))), realized through the sensitivity
//!    chain rule ḣ = ∇h_j(φ)·Q·(f(x) + g(x)·u);
//! 2. the terminal backup-set row with h_b and α_b at θ = T;
//! 3. the direct rows a_j(x)·u <= b_j(x), i.e. H_j(x, u) >= 0.
//!
//! The objective center is the desired controller k_d(x). Infeasibility
//! (which provably cannot occur inside the invariant set) falls back to the
//! backup controller.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::constraint::{
    pendulum_constraints, project, ClassK, ConstraintKind, MixedConstraint, ProjectedConstraint,
};
use crate::dynamics::{PendulumPlant, Plant};
use crate::error::{Error, Result};
use crate::flow::{flow, pendulum_backup_pair, BackupPair, FlowSample};
use crate::params::PendulumParams;
use crate::qp::{solve, QpProblem, QpStatus};

type ControllerFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionStatus {
    Optimal,
    /// The QP had no solution; the filter substituted its fallback input.
    InfeasibleFallback,
}

/// Filter output at one state: the chosen input plus the telemetry the
/// simulation harness logs.
#[derive(Debug, Clone)]
pub struct FilterDecision {
    pub input: DVector<f64>,
    pub status: DecisionStatus,
    /// H_j(x, u) for every constraint, at the returned input.
    pub margins: Vec<f64>,
    /// Per constraint: min over θ samples of h_j(φ_b(θ, x)).
    pub flow_min_margins: Vec<f64>,
    /// h_b(φ_b(T, x)) for the backup filter; ψ_e(x) for the baseline.
    pub terminal_margin: f64,
}

impl FilterDecision {
    /// Smallest flow margin across constraints (what the CSV logs).
    pub fn flow_min(&self) -> f64 {
        self.flow_min_margins
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Common interface for the simulation harness.
pub trait SafetyFilter: Send + Sync {
    fn decide(&self, x: &DVector<f64>) -> Result<FilterDecision>;
}

/// Backup CBF filter: flow-discretized projected-constraint rows, terminal
/// backup-set row, and direct mixed-constraint rows around a desired
/// controller.
pub struct BackupCbfFilter {
    plant: Arc<dyn Plant>,
    pair: Arc<BackupPair>,
    constraints: Vec<Arc<MixedConstraint>>,
    projections: Vec<ProjectedConstraint>,
    alphas: Vec<ClassK>,
    alpha_backup: ClassK,
    horizon: f64,
    n_samples: usize,
    desired: ControllerFn,
}

impl BackupCbfFilter {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        plant: Arc<dyn Plant>,
        pair: Arc<BackupPair>,
        constraints: Vec<Arc<MixedConstraint>>,
        alphas: Vec<ClassK>,
        alpha_backup: ClassK,
        horizon: f64,
        n_samples: usize,
        desired: ControllerFn,
    ) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "horizon must be > 0, got {horizon}"
            )));
        }
        if n_samples < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 flow samples, got {n_samples}"
            )));
        }
        if alphas.len() != constraints.len() {
            return Err(Error::InvalidParameter(format!(
                "{} constraints but {} class-K gains",
                constraints.len(),
                alphas.len()
            )));
        }
        let projections = constraints
            .iter()
            .map(|c| project(c.clone(), pair.clone()))
            .collect();
        Ok(Self {
            plant,
            pair,
            constraints,
            projections,
            alphas,
            alpha_backup,
            horizon,
            n_samples,
            desired,
        })
    }

    /// The full pendulum study: six constraints, Table-style gains, zero
    /// desired torque. The analytic flow mode is validated against the plant
    /// on a state sample at construction.
    pub fn pendulum(params: &PendulumParams) -> Result<Self> {
        params.validate()?;
        let plant: Arc<dyn Plant> = Arc::new(PendulumPlant);
        let pair = Arc::new(pendulum_backup_pair(params));
        let probes: Vec<DVector<f64>> = (-2..=2)
            .flat_map(|i| {
                (-2..=2).map(move |j| DVector::from_column_slice(&[0.9 * i as f64, 0.7 * j as f64]))
            })
            .collect();
        pair.validate_mode(plant.as_ref(), &probes)?;
        let constraints: Vec<_> = pendulum_constraints(params)
            .into_iter()
            .map(Arc::new)
            .collect();
        let alphas = vec![ClassK::linear(params.alpha_gain)?; constraints.len()];
        Self::new(
            plant,
            pair,
            constraints,
            alphas,
            ClassK::linear(params.alpha_b_gain)?,
            params.t_horizon,
            params.n_samples,
            Arc::new(|_x: &DVector<f64>| DVector::zeros(1)),
        )
    }

    /// Uniform θ samples on [0, T], both endpoints included.
    pub fn theta_grid(&self) -> Vec<f64> {
        let n = self.n_samples;
        (0..n)
            .map(|i| self.horizon * i as f64 / (n - 1) as f64)
            .collect()
    }

    pub fn constraints(&self) -> &[Arc<MixedConstraint>] {
        &self.constraints
    }

    pub fn projections(&self) -> &[ProjectedConstraint] {
        &self.projections
    }

    pub fn pair(&self) -> &Arc<BackupPair> {
        &self.pair
    }

    pub fn plant(&self) -> &Arc<dyn Plant> {
        &self.plant
    }

    pub fn desired_input(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.desired)(x)
    }

    pub fn flow_samples(&self, x: &DVector<f64>) -> Result<Vec<FlowSample>> {
        flow(&self.pair, self.plant.as_ref(), x, &self.theta_grid())
    }

    /// Assemble the QP at x. Row order: constraint-major flow rows, terminal
    /// row, direct rows.
    pub fn assemble(&self, x: &DVector<f64>) -> Result<QpProblem> {
        let samples = self.flow_samples(x)?;
        Ok(self.assemble_with_samples(x, &samples).0)
    }

    fn assemble_with_samples(
        &self,
        x: &DVector<f64>,
        samples: &[FlowSample],
    ) -> (QpProblem, Vec<f64>, f64) {
        let m = self.plant.input_dim();
        let jn = self.constraints.len();
        let rows = jn * samples.len() + 1 + jn;
        let mut a = DMatrix::zeros(rows, m);
        let mut b = DVector::zeros(rows);

        let f = self.plant.drift(x);
        let g = self.plant.input_matrix(x);
        // Q·f and Q·g per sample, shared by all constraints
        let propagated: Vec<(DVector<f64>, DMatrix<f64>)> = samples
            .iter()
            .map(|s| (&s.sensitivity * &f, &s.sensitivity * &g))
            .collect();

        let mut flow_mins = vec![f64::INFINITY; jn];
        let mut row = 0;
        for (j, proj) in self.projections.iter().enumerate() {
            for (s, (qf, qg)) in samples.iter().zip(&propagated) {
                let grad = proj.gradient(&s.state);
                let h = proj.value(&s.state);
                flow_mins[j] = flow_mins[j].min(h);
                let coeff = -(grad.transpose() * qg);
                a.row_mut(row).copy_from(&coeff);
                b[row] = grad.dot(qf) + self.alphas[j].eval(h);
                row += 1;
            }
        }

        let last = samples.len() - 1;
        let terminal_state = &samples[last].state;
        let grad_b = self.pair.backup_set_gradient(terminal_state);
        let terminal_margin = self.pair.backup_set_value(terminal_state);
        let (qf, qg) = &propagated[last];
        let coeff = -(grad_b.transpose() * qg);
        a.row_mut(row).copy_from(&coeff);
        b[row] = grad_b.dot(qf) + self.alpha_backup.eval(terminal_margin);
        row += 1;

        for c in &self.constraints {
            a.row_mut(row).copy_from(&c.input_coeff(x));
            b[row] = c.offset(x);
            row += 1;
        }

        let qp = QpProblem::new((self.desired)(x), a, b);
        (qp, flow_mins, terminal_margin)
    }

    /// Solve the filter at x. Inside the invariant set the QP is feasible by
    /// construction (u = k_b(x) satisfies every row); if it is not, the
    /// backup input is substituted and flagged.
    pub fn decide(&self, x: &DVector<f64>) -> Result<FilterDecision> {
        let samples = self.flow_samples(x)?;
        let (qp, flow_min_margins, terminal_margin) = self.assemble_with_samples(x, &samples);
        let sol = solve(&qp)?;
        let (input, status) = match sol.status {
            QpStatus::Optimal => (sol.u, DecisionStatus::Optimal),
            QpStatus::Infeasible => (self.pair.control(x), DecisionStatus::InfeasibleFallback),
        };
        let margins = self.constraints.iter().map(|c| c.eval(x, &input)).collect();
        Ok(FilterDecision {
            input,
            status,
            margins,
            flow_min_margins,
            terminal_margin,
        })
    }
}

impl SafetyFilter for BackupCbfFilter {
    fn decide(&self, x: &DVector<f64>) -> Result<FilterDecision> {
        BackupCbfFilter::decide(self, x)
    }
}

/// ψ_e(x) = -2·x₁·x₂ + γ·(φ_max² - x₁²), the high-order barrier derived from
/// the angle constraint.
pub fn hocbf_barrier(gamma: f64, phi_max: f64, x: &DVector<f64>) -> f64 {
    -2.0 * x[0] * x[1] + gamma * (phi_max * phi_max - x[0] * x[0])
}

fn hocbf_barrier_gradient(gamma: f64, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_column_slice(&[-2.0 * x[1] - 2.0 * gamma * x[0], -2.0 * x[0]])
}

/// HOCBF baseline: one barrier row plus (optionally) the direct input and
/// power rows. No forward prediction, so it goes infeasible where braking
/// within the input/power budget is impossible; the fallback then returns
/// the phase-1 least-max-violation input, which reproduces the small
/// constraint violations this baseline is known for without crashing the run.
pub struct HocbfFilter {
    plant: Arc<dyn Plant>,
    gamma: f64,
    phi_max: f64,
    barrier_gain: ClassK,
    include_direct_rows: bool,
    constraints: Vec<Arc<MixedConstraint>>,
    desired: ControllerFn,
}

impl HocbfFilter {
    pub fn pendulum(params: &PendulumParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            plant: Arc::new(PendulumPlant),
            gamma: params.gamma,
            phi_max: params.phi_max,
            barrier_gain: ClassK::linear(params.hocbf_alpha_gain)?,
            include_direct_rows: true,
            constraints: pendulum_constraints(params)
                .into_iter()
                .map(Arc::new)
                .collect(),
            desired: Arc::new(|_x: &DVector<f64>| DVector::zeros(1)),
        })
    }

    pub fn include_direct_rows(mut self, on: bool) -> Self {
        self.include_direct_rows = on;
        self
    }

    pub fn barrier(&self, x: &DVector<f64>) -> f64 {
        hocbf_barrier(self.gamma, self.phi_max, x)
    }

    pub fn assemble(&self, x: &DVector<f64>) -> QpProblem {
        let m = self.plant.input_dim();
        let direct: Vec<&Arc<MixedConstraint>> = if self.include_direct_rows {
            self.constraints
                .iter()
                .filter(|c| c.kind != ConstraintKind::State)
                .collect()
        } else {
            Vec::new()
        };
        let rows = 1 + direct.len();
        let mut a = DMatrix::zeros(rows, m);
        let mut b = DVector::zeros(rows);

        let f = self.plant.drift(x);
        let g = self.plant.input_matrix(x);
        let grad = hocbf_barrier_gradient(self.gamma, x);
        let coeff: RowDVector<f64> = -(grad.transpose() * &g);
        a.row_mut(0).copy_from(&coeff);
        b[0] = grad.dot(&f) + self.barrier_gain.eval(self.barrier(x));
        for (row, c) in direct.iter().enumerate() {
            a.row_mut(row + 1).copy_from(&c.input_coeff(x));
            b[row + 1] = c.offset(x);
        }
        QpProblem::new((self.desired)(x), a, b)
    }

    pub fn decide(&self, x: &DVector<f64>) -> Result<FilterDecision> {
        let qp = self.assemble(x);
        let sol = solve(&qp)?;
        let (input, status) = match sol.status {
            QpStatus::Optimal => (sol.u, DecisionStatus::Optimal),
            QpStatus::Infeasible => (sol.u, DecisionStatus::InfeasibleFallback),
        };
        let margins = self.constraints.iter().map(|c| c.eval(x, &input)).collect();
        let psi = self.barrier(x);
        Ok(FilterDecision {
            input,
            status,
            margins,
            flow_min_margins: vec![psi],
            terminal_margin: psi,
        })
    }
}

impl SafetyFilter for HocbfFilter {
    fn decide(&self, x: &DVector<f64>) -> Result<FilterDecision> {
        HocbfFilter::decide(self, x)
    }
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

    fn filter() -> BackupCbfFilter {
        BackupCbfFilter::pendulum(&PendulumParams::default()).unwrap()
    }

    #[test]
    fn row_count_is_six_blocks_plus_terminal_plus_direct() {
        let qp = filter().assemble(&v2(0.0, 0.0)).unwrap();
        assert_eq!(qp.rows(), 6 * 100 + 1 + 6);
    }

    #[test]
    fn direct_rows_at_origin() {
        let qp = filter().assemble(&v2(0.0, 0.0)).unwrap();
        let k = qp.rows();
        // last six rows: the direct block; power rows vacuous at x2 = 0
        let a: Vec<f64> = (k - 6..k).map(|i| qp.a[(i, 0)]).collect();
        let b: Vec<f64> = (k - 6..k).map(|i| qp.b[i]).collect();
        assert_eq!(a, vec![0.0, 0.0, 1.0, -1.0, 0.0, 0.0]);
        assert_eq!(b, vec![1.75, 1.75, 1.2, 1.1, 0.2, 0.7]);
    }

    #[test]
    fn origin_passes_through_zero_desire() {
        let d = filter().decide(&v2(0.0, 0.0)).unwrap();
        assert_eq!(d.status, DecisionStatus::Optimal);
        assert_eq!(d.input[0], 0.0);
        assert!(d.margins.iter().all(|&m| m > 0.0));
        assert!(d.terminal_margin > 0.9); // flow stays at the origin
    }

    #[test]
    fn direct_power_row_caps_the_input() {
        // at (0, 0.5) the power row demands x2*u <= 0.2, i.e. u <= 0.4
        let d = filter().decide(&v2(0.0, 0.5)).unwrap();
        assert_eq!(d.status, DecisionStatus::Optimal);
        assert!(0.5 * d.input[0] <= 0.2 + 1e-9);
    }

    #[test]
    fn optimal_decisions_satisfy_every_mixed_constraint() {
        let f = filter();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..40 {
            let x = v2(rng.gen_range(-1.2..1.2), rng.gen_range(-0.8..0.8));
            let d = f.decide(&x).unwrap();
            if d.status == DecisionStatus::Optimal {
                for (i, &m) in d.margins.iter().enumerate() {
                    assert!(m >= -1e-8, "H{} = {m} at {:?}", i + 1, x.as_slice());
                }
            }
        }
    }

    #[test]
    fn flow_row_matches_directional_derivative() {
        // row-(1) linear form == d/dε h_j(φ(θ, x + ε(f+gu)))|₀
        let f = filter();
        let thetas = f.theta_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..25 {
            let x = v2(rng.gen_range(-1.5..1.5), rng.gen_range(-1.0..1.0));
            let u = DVector::from_element(1, rng.gen_range(-1.1..1.2));
            let ti = rng.gen_range(0..thetas.len());
            let theta = thetas[ti];
            let j = rng.gen_range(0..6);

            let samples = f.flow_samples(&x).unwrap();
            let s = &samples[ti];
            let proj = &f.projections()[j];
            let field = f.plant().drift(&x) + f.plant().input_matrix(&x) * &u;
            let row_value = proj.gradient(&s.state).dot(&(&s.sensitivity * &field));

            let eps = 1e-6;
            let h = |y: &DVector<f64>| {
                let sample = crate::flow::flow(f.pair(), f.plant().as_ref(), y, &[theta]).unwrap();
                proj.value(&sample[0].state)
            };
            let fd = (h(&(&x + &field * eps)) - h(&(&x - &field * eps))) / (2.0 * eps);
            let scale = row_value.abs().max(1.0);
            assert!(
                (row_value - fd).abs() < 1e-4 * scale,
                "j={j} theta={theta}: chain rule {row_value} vs fd {fd}"
            );
        }
    }

    #[test]
    fn hocbf_barrier_value() {
        assert_relative_eq!(
            hocbf_barrier(0.7, 1.75, &v2(0.0, 0.0)),
            2.14375,
            epsilon = 1e-15
        );
    }

    #[test]
    fn hocbf_origin_is_untouched() {
        let h = HocbfFilter::pendulum(&PendulumParams::default()).unwrap();
        let d = h.decide(&v2(0.0, 0.0)).unwrap();
        assert_eq!(d.status, DecisionStatus::Optimal);
        assert_eq!(d.input[0], 0.0);
    }

    #[test]
    fn hocbf_barrier_gradient_matches_fd() {
        let gamma = 0.7;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x = v2(rng.gen_range(-2.0..2.0), rng.gen_range(-1.5..1.5));
            let g = hocbf_barrier_gradient(gamma, &x);
            let fd = crate::dynamics::fd_jacobian(
                |y| DVector::from_element(1, hocbf_barrier(gamma, 1.75, y)),
                &x,
                1,
            );
            for j in 0..2 {
                assert!((g[j] - fd[(0, j)]).abs() < 1e-5 * g[j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn hocbf_fallback_returns_least_violation_input() {
        // deep in trouble: positive angle near the bound, large velocity
        let h = HocbfFilter::pendulum(&PendulumParams::default()).unwrap();
        let d = h.decide(&v2(1.7, 1.2)).unwrap();
        assert_eq!(d.status, DecisionStatus::InfeasibleFallback);
        assert!(d.input[0].is_finite());
    }

    #[test]
    fn rejects_mismatched_gains() {
        let params = PendulumParams::default();
        let plant: Arc<dyn Plant> = Arc::new(PendulumPlant);
        let pair = Arc::new(pendulum_backup_pair(&params));
        let constraints: Vec<_> = pendulum_constraints(&params)
            .into_iter()
            .map(Arc::new)
            .collect();
        let r = BackupCbfFilter::new(
            plant,
            pair,
            constraints,
            vec![ClassK::linear(15.0).unwrap(); 2],
            ClassK::linear(1.0).unwrap(),
            8.0,
            100,
            Arc::new(|_x: &DVector<f64>| DVector::zeros(1)),
        );
        assert!(r.is_err());
    }
}
