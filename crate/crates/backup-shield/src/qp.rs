//! Small dense strictly convex QP: min ‖u − u_d‖² subject to A·u <= b.
//!
//! Solved by primal active-set iteration starting from u_d (the objective
//! Hessian is the identity, so the equality-constrained subproblems reduce to
//! a Gram solve on the working set). When u_d is infeasible, a phase-1 pass
//! minimizes the maximum violation first; a positive minimax violation above
//! [`FEASIBILITY_TOL`] is an exact infeasibility certificate and the phase-1
//! point is returned as the least-violating input. Everything is
//! deterministic: scans run in ascending row order and ties pick the lowest
//! row index.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Phase-1 verdict threshold: minimax violation above this is infeasible.
pub const FEASIBILITY_TOL: f64 = 1e-9;

const ZERO_COEFF: f64 = 1e-14;

/// QP data: objective center `desired` (u_d), rows `a` (k×m) and bounds `b`
/// with the convention a_i·u <= b_i.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub desired: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QpProblem {
    pub fn new(desired: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        assert_eq!(a.nrows(), b.len(), "row count mismatch");
        assert_eq!(a.ncols(), desired.len(), "input dimension mismatch");
        Self { desired, a, b }
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.a.ncols()
    }

    fn residual(&self, u: &DVector<f64>, i: usize) -> f64 {
        (self.a.row(i) * u)[0] - self.b[i]
    }

    /// Largest constraint violation at u (negative when strictly feasible).
    pub fn max_residual(&self, u: &DVector<f64>) -> f64 {
        (0..self.rows())
            .map(|i| self.residual(u, i))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

/// Solver output. On `Infeasible`, `u` is the phase-1 least-max-violation
/// point and `kkt_residual` carries that violation.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub status: QpStatus,
    pub active_set: Vec<usize>,
    pub kkt_residual: f64,
}

/// Exact minimizer of the strictly convex QP, or an infeasibility verdict.
pub fn solve(p: &QpProblem) -> Result<QpSolution> {
    let m = p.input_dim();
    if m == 0 {
        return Err(Error::InvalidParameter("qp needs m >= 1".into()));
    }
    if p.desired.iter().any(|v| !v.is_finite())
        || p.a.iter().any(|v| !v.is_finite())
        || p.b.iter().any(|v| !v.is_finite())
    {
        return Err(Error::InvalidParameter("qp data must be finite".into()));
    }

    let start = if p.rows() == 0 || p.max_residual(&p.desired) <= 0.0 {
        p.desired.clone()
    } else {
        let (u1, viol) = phase1(p);
        if viol > FEASIBILITY_TOL {
            return Ok(QpSolution {
                u: u1,
                status: QpStatus::Infeasible,
                active_set: Vec::new(),
                kkt_residual: viol,
            });
        }
        u1
    };
    active_set_from(p, start)
}

/// Primal active-set iteration from a feasible (within `FEASIBILITY_TOL`)
/// starting point.
fn active_set_from(p: &QpProblem, mut u: DVector<f64>) -> Result<QpSolution> {
    let m = p.input_dim();
    let k = p.rows();
    let max_iters = 10 * (k + m);
    let mut working: Vec<usize> = Vec::new();

    for _ in 0..max_iters {
        let (v, lambda) = eqp_solve(p, &working)?;
        let d = &v - &u;
        if d.amax() <= 1e-12 * v.amax().max(1.0) {
            // at the subproblem optimum; check duals
            let mut worst: Option<usize> = None;
            let mut worst_value = -1e-12;
            for (j, &l) in lambda.iter().enumerate() {
                if l < worst_value {
                    worst = Some(j);
                    worst_value = l;
                }
            }
            match worst {
                None => {
                    let mut active = working.clone();
                    active.sort_unstable();
                    let kkt = kkt_residual(p, &u, &working, &lambda);
                    return Ok(QpSolution {
                        u,
                        status: QpStatus::Optimal,
                        active_set: active,
                        kkt_residual: kkt,
                    });
                }
                Some(j) => {
                    working.remove(j);
                }
            }
        } else {
            // step toward v until a new row blocks
            let mut alpha = 1.0;
            let mut blocker = None;
            for i in 0..k {
                if working.contains(&i) {
                    continue;
                }
                let along = (p.a.row(i) * &d)[0];
                if along > ZERO_COEFF {
                    let room = p.b[i] - (p.a.row(i) * &u)[0];
                    let step = (room / along).max(0.0);
                    if step < alpha {
                        alpha = step;
                        blocker = Some(i);
                    }
                }
            }
            u += d * alpha;
            if let Some(i) = blocker {
                insert_independent(p, &mut working, i);
            }
        }
    }
    Err(Error::SolverStall {
        iterations: max_iters,
    })
}

/// Equality-constrained subproblem: minimize ‖v − u_d‖² with the working-set
/// rows tight. Returns the minimizer and the dual variables.
fn eqp_solve(p: &QpProblem, working: &[usize]) -> Result<(DVector<f64>, Vec<f64>)> {
    if working.is_empty() {
        return Ok((p.desired.clone(), Vec::new()));
    }
    let m = p.input_dim();
    let q = working.len();
    let mut aw = DMatrix::zeros(q, m);
    let mut bw = DVector::zeros(q);
    for (r, &i) in working.iter().enumerate() {
        aw.row_mut(r).copy_from(&p.a.row(i));
        bw[r] = p.b[i];
    }
    let gram = &aw * aw.transpose();
    let rhs = &aw * &p.desired - bw;
    let lambda = gram
        .lu()
        .solve(&rhs)
        .ok_or(Error::SolverStall { iterations: 0 })?;
    let v = &p.desired - aw.transpose() * &lambda;
    Ok((v, lambda.iter().copied().collect()))
}

/// Add a blocking row, keeping the working-set rows linearly independent.
/// A row parallel to an existing member replaces it (the newly binding row
/// carries the geometry from here on).
fn insert_independent(p: &QpProblem, working: &mut Vec<usize>, row: usize) {
    working.push(row);
    if gram_ok(p, working) {
        return;
    }
    working.pop();
    for j in 0..working.len() {
        let removed = working[j];
        working[j] = row;
        if gram_ok(p, working) {
            return;
        }
        working[j] = removed;
    }
    // every replacement fails only for a zero row; ignore it
}

fn gram_ok(p: &QpProblem, working: &[usize]) -> bool {
    let m = p.input_dim();
    if working.len() > m {
        return false;
    }
    let q = working.len();
    let mut aw = DMatrix::zeros(q, m);
    for (r, &i) in working.iter().enumerate() {
        aw.row_mut(r).copy_from(&p.a.row(i));
    }
    let gram = &aw * aw.transpose();
    let scale: f64 = (0..q).map(|i| gram[(i, i)]).fold(0.0f64, f64::max);
    match gram.clone().lu().determinant().abs() {
        d if scale == 0.0 => d > 0.0,
        d => d > 1e-12 * scale.powi(q as i32),
    }
}

fn kkt_residual(p: &QpProblem, u: &DVector<f64>, working: &[usize], lambda: &[f64]) -> f64 {
    let mut stationarity = u - &p.desired;
    for (&i, &l) in working.iter().zip(lambda) {
        stationarity += p.a.row(i).transpose() * l.max(0.0);
    }
    let feasibility = if p.rows() == 0 {
        0.0
    } else {
        p.max_residual(u).max(0.0)
    };
    let complementarity = working
        .iter()
        .zip(lambda)
        .map(|(&i, &l)| (l.max(0.0) * ((p.a.row(i) * u)[0] - p.b[i])).abs())
        .fold(0.0f64, f64::max);
    stationarity.amax().max(feasibility).max(complementarity)
}

/// Phase 1: minimize the maximum violation max_i(a_i·u − b_i).
/// Exact subgradient bisection for m = 1; vertex enumeration in the epigraph
/// for m >= 2 (intended for the small test problems; the control path has
/// m = 1). Ties take the lowest row index by scan order.
fn phase1(p: &QpProblem) -> (DVector<f64>, f64) {
    if p.input_dim() == 1 {
        phase1_1d(p)
    } else {
        phase1_vertex(p)
    }
}

fn phase1_1d(p: &QpProblem) -> (DVector<f64>, f64) {
    let k = p.rows();
    let coeffs: Vec<f64> = (0..k).map(|i| p.a[(i, 0)]).collect();
    let mut const_floor = f64::NEG_INFINITY; // violation from zero-coefficient rows
    let mut has_pos = false;
    let mut has_neg = false;
    let mut min_abs = f64::INFINITY;
    let mut max_b = 0.0f64;
    for (i, &c) in coeffs.iter().enumerate() {
        if c > ZERO_COEFF {
            has_pos = true;
            min_abs = min_abs.min(c);
        } else if c < -ZERO_COEFF {
            has_neg = true;
            min_abs = min_abs.min(-c);
        } else {
            const_floor = const_floor.max(-p.b[i]);
        }
        max_b = max_b.max(p.b[i].abs());
    }
    let value = |u: f64| -> f64 {
        let mut f = const_floor;
        for (i, &c) in coeffs.iter().enumerate() {
            if c.abs() > ZERO_COEFF {
                f = f.max(c * u - p.b[i]);
            }
        }
        f
    };

    let finish = |u: f64| (DVector::from_element(1, u), value(u));

    match (has_pos, has_neg) {
        (false, false) => finish(p.desired[0]),
        (true, false) => {
            // slide left onto the tightest upper bound; envelope flattens to the floor
            let ub = coeffs
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > ZERO_COEFF)
                .map(|(i, &c)| p.b[i] / c)
                .fold(f64::INFINITY, f64::min);
            finish(ub)
        }
        (false, true) => {
            let lb = coeffs
                .iter()
                .enumerate()
                .filter(|(_, &c)| c < -ZERO_COEFF)
                .map(|(i, &c)| p.b[i] / c)
                .fold(f64::NEG_INFINITY, f64::max);
            finish(lb)
        }
        (true, true) => {
            // convex piecewise-linear with +inf limits both ways: bisect on the
            // sign of the active slopes
            let bound = (max_b + 1.0) / min_abs + p.desired[0].abs() + 1.0;
            let (mut lo, mut hi) = (-bound, bound);
            let mut mid = 0.5 * (lo + hi);
            for _ in 0..200 {
                mid = 0.5 * (lo + hi);
                let f = value(mid);
                let tol = 1e-13 * f.abs().max(1.0);
                let mut smin = f64::INFINITY;
                let mut smax = f64::NEG_INFINITY;
                if const_floor >= f - tol {
                    smin = 0.0;
                    smax = 0.0;
                }
                for (i, &c) in coeffs.iter().enumerate() {
                    if c.abs() > ZERO_COEFF && c * mid - p.b[i] >= f - tol {
                        smin = smin.min(c);
                        smax = smax.max(c);
                    }
                }
                if smin > 0.0 {
                    hi = mid;
                } else if smax < 0.0 {
                    lo = mid;
                } else {
                    break;
                }
            }
            finish(mid)
        }
    }
}

fn phase1_vertex(p: &QpProblem) -> (DVector<f64>, f64) {
    let m = p.input_dim();
    let k = p.rows();
    // virtual box rows bound the epigraph LP so a vertex always exists
    let max_b = (0..k).map(|i| p.b[i].abs()).fold(0.0f64, f64::max);
    let bound = 1e6 * (1.0 + p.desired.amax() + max_b);
    let total = k + 2 * m;
    let row = |i: usize| -> (DVector<f64>, f64) {
        if i < k {
            (p.a.row(i).transpose(), p.b[i])
        } else {
            let j = (i - k) / 2;
            let sign = if (i - k).is_multiple_of(2) { 1.0 } else { -1.0 };
            let mut a = DVector::zeros(m);
            a[j] = sign;
            (a, bound)
        }
    };

    let real_violation = |u: &DVector<f64>| -> f64 {
        (0..k)
            .map(|i| (p.a.row(i) * u)[0] - p.b[i])
            .fold(f64::NEG_INFINITY, f64::max)
    };

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut subset = vec![0usize; m + 1];
    enumerate_subsets(total, m + 1, &mut subset, 0, 0, &mut |chosen| {
        let dim = m + 1;
        let mut mat = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        for (r, &i) in chosen.iter().enumerate() {
            let (a, b) = row(i);
            for c in 0..m {
                mat[(r, c)] = a[c];
            }
            mat[(r, m)] = -1.0;
            rhs[r] = b;
        }
        let Some(z) = mat.lu().solve(&rhs) else {
            return;
        };
        let u = DVector::from_iterator(m, (0..m).map(|i| z[i]));
        let s = z[m];
        if !s.is_finite() || u.iter().any(|v| !v.is_finite()) {
            return;
        }
        // vertex is valid only if s is the true maximum over all rows
        for i in 0..total {
            let (a, b) = row(i);
            if (a.dot(&u) - b) > s + 1e-9 * s.abs().max(1.0) {
                return;
            }
        }
        if best.as_ref().is_none_or(|(bs, _)| s < *bs) {
            best = Some((s, u));
        }
    });

    match best {
        Some((_, u)) => {
            let viol = real_violation(&u);
            (u.clone(), viol)
        }
        None => {
            let viol = real_violation(&p.desired);
            (p.desired.clone(), viol)
        }
    }
}

fn enumerate_subsets(
    total: usize,
    size: usize,
    current: &mut Vec<usize>,
    depth: usize,
    start: usize,
    visit: &mut impl FnMut(&[usize]),
) {
    if depth == size {
        visit(current);
        return;
    }
    for i in start..total {
        current[depth] = i;
        enumerate_subsets(total, size, current, depth + 1, i + 1, visit);
    }
}

/// Outcome of the grid-search oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleOutcome {
    Feasible { u: DVector<f64>, objective: f64 },
    Infeasible,
}

/// Test oracle: best feasible point of a per-coordinate grid over `[lower,
/// upper]` with `grid_points` samples per axis. Only meant for m <= 2.
pub fn brute_force_oracle(
    p: &QpProblem,
    lower: &[f64],
    upper: &[f64],
    grid_points: usize,
) -> OracleOutcome {
    let m = p.input_dim();
    assert!(m <= 2, "oracle supports m <= 2");
    assert!(grid_points >= 101, "oracle needs grid_points >= 101");
    assert_eq!(lower.len(), m);
    assert_eq!(upper.len(), m);

    let coord =
        |j: usize, t: usize| lower[j] + (upper[j] - lower[j]) * t as f64 / (grid_points - 1) as f64;
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut consider = |u: DVector<f64>| {
        if p.max_residual(&u) <= FEASIBILITY_TOL {
            let obj = (&u - &p.desired).norm_squared();
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, u));
            }
        }
    };
    if m == 1 {
        for t in 0..grid_points {
            consider(DVector::from_element(1, coord(0, t)));
        }
    } else {
        for t0 in 0..grid_points {
            for t1 in 0..grid_points {
                consider(DVector::from_column_slice(&[coord(0, t0), coord(1, t1)]));
            }
        }
    }
    match best {
        Some((objective, u)) => OracleOutcome::Feasible { u, objective },
        None => OracleOutcome::Infeasible,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qp1(ud: f64, rows: &[(f64, f64)]) -> QpProblem {
        QpProblem::new(
            DVector::from_element(1, ud),
            DMatrix::from_iterator(rows.len(), 1, rows.iter().map(|r| r.0)),
            DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1)),
        )
    }

    #[test]
    fn unconstrained_projection() {
        let p = qp1(0.3, &[]);
        let s = solve(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_eq!(s.u[0], 0.3);
        assert!(s.active_set.is_empty());
        assert!(s.kkt_residual < 1e-12);
    }

    #[test]
    fn one_dimensional_interval() {
        // u <= 1.2, -u <= 1.1, and a derivative row forcing u >= 0.5
        let p = qp1(0.0, &[(1.0, 1.2), (-1.0, 1.1), (-1.0, -0.5)]);
        let s = solve(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.u[0], 0.5, epsilon = 1e-12);
        assert_eq!(s.active_set, vec![2]);
    }

    #[test]
    fn halfspace_projection_m2() {
        let p = QpProblem::new(
            DVector::from_column_slice(&[1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 1.0),
        );
        let s = solve(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.u[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(s.u[1], 0.5, epsilon = 1e-12);
        assert!(s.kkt_residual < 1e-10);
    }

    #[test]
    fn empty_interval_is_infeasible() {
        let p = qp1(0.0, &[(1.0, -1.0), (-1.0, -1.0)]); // u <= -1 and u >= 1
        let s = solve(&p).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        // least-violation point is the midpoint, violating both rows by 1
        assert_relative_eq!(s.u[0], 0.0, epsilon = 1e-9);
        assert_relative_eq!(s.kkt_residual, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn vacuous_row_with_negative_bound_is_infeasible() {
        let p = qp1(0.2, &[(0.0, -0.5), (1.0, 2.0)]);
        let s = solve(&p).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        assert_relative_eq!(s.kkt_residual, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn infeasible_m2() {
        // u1 <= -1, u1 >= 1 in two dimensions
        let p = QpProblem::new(
            DVector::from_column_slice(&[0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]),
            DVector::from_column_slice(&[-1.0, -1.0]),
        );
        let s = solve(&p).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        assert!(s.kkt_residual > 0.9);
    }

    #[test]
    fn duplicate_rows_do_not_stall() {
        let p = qp1(3.0, &[(1.0, 1.0), (1.0, 1.0), (2.0, 2.0)]);
        let s = solve(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.u[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_bitwise() {
        let p = QpProblem::new(
            DVector::from_column_slice(&[0.7, -0.3]),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.4, -0.2, 1.0, 0.5, -1.0]),
            DVector::from_column_slice(&[0.3, 0.1, 0.2]),
        );
        let s1 = solve(&p).unwrap();
        let s2 = solve(&p).unwrap();
        assert_eq!(s1.u, s2.u);
        assert_eq!(s1.active_set, s2.active_set);
        assert_eq!(s1.kkt_residual.to_bits(), s2.kkt_residual.to_bits());
    }

    #[test]
    fn oracle_unconstrained_returns_nearest_grid_point() {
        let p = qp1(0.33, &[]);
        match brute_force_oracle(&p, &[-1.0], &[1.0], 201) {
            OracleOutcome::Feasible { u, .. } => {
                assert!((u[0] - 0.33).abs() <= 1.0 / 200.0 + 1e-12);
            }
            OracleOutcome::Infeasible => panic!("unconstrained oracle infeasible"),
        }
    }

    #[test]
    fn oracle_and_solver_agree_on_verdicts() {
        let p = qp1(0.0, &[(1.0, -1.0), (-1.0, -1.0)]);
        assert_eq!(
            brute_force_oracle(&p, &[-0.5], &[0.5], 101),
            OracleOutcome::Infeasible
        );
        assert_eq!(solve(&p).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn random_problems_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..60 {
            let m = 1 + (case % 2);
            let k = rng.gen_range(1..8);
            // rows through a known interior point keep the problem feasible
            let z = DVector::from_iterator(m, (0..m).map(|_| rng.gen_range(-1.0..1.0)));
            let mut a = DMatrix::zeros(k, m);
            let mut b = DVector::zeros(k);
            for i in 0..k {
                for j in 0..m {
                    a[(i, j)] = rng.gen_range(-1.0..1.0);
                }
                b[i] = (a.row(i) * &z)[0] + rng.gen_range(0.05..1.0);
            }
            let ud = DVector::from_iterator(m, (0..m).map(|_| rng.gen_range(-2.0..2.0)));
            let p = QpProblem::new(ud, a, b);
            let s = solve(&p).unwrap();
            assert_eq!(s.status, QpStatus::Optimal, "case {case}");
            assert!(
                p.max_residual(&s.u) <= 1e-8,
                "case {case} infeasible answer"
            );
            assert!(s.kkt_residual < 1e-8, "case {case} kkt {}", s.kkt_residual);

            let gp = 301;
            let width = 6.0;
            match brute_force_oracle(&p, &vec![-3.0; m], &vec![3.0; m], gp) {
                OracleOutcome::Feasible { objective, .. } => {
                    let slack = 2.0 * width / gp as f64;
                    let solver_obj = (&s.u - &p.desired).norm_squared();
                    assert!(
                        solver_obj <= objective + slack,
                        "case {case}: solver {solver_obj} vs oracle {objective}"
                    );
                }
                OracleOutcome::Infeasible => panic!("case {case}: oracle found nothing"),
            }
        }
    }
}
