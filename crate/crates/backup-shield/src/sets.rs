//! Grid-based invariant-set analysis: membership margins for the projected
//! constraint set C_p, the backup set S_b, the invariant sets S_I^φ (state
//! constraints only), S_I^{φu} (state + input), S_I^p (all constraints) and
//! the HOCBF superlevel set C_e; nesting verification and CSV export.
//!
//! Membership is decided by dense θ-sampling of the backup flow: a node's
//! margin is the minimum of the sampled projected-constraint values along the
//! flow and the terminal backup-set value. Each sample of the closed-form
//! flow is exact; refinement of the θ grid can only shrink margins. Node
//! classifications are independent, so the grid is farmed to a rayon pool
//! when the `parallel` feature is on; `classify_seq` is the always-available
//! sequential path the benchmarks compare against.

use std::io::{self, Write};
use std::sync::Arc;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use nalgebra::DVector;

use crate::constraint::{pendulum_constraints, project, ProjectedConstraint};
use crate::dynamics::{PendulumPlant, Plant};
use crate::error::{Error, Result};
use crate::filter::hocbf_barrier;
use crate::flow::{flow, pendulum_backup_pair, BackupPair};
use crate::params::PendulumParams;

/// Rectangular state-space grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub x1_range: (f64, f64),
    pub x2_range: (f64, f64),
    pub n1: usize,
    pub n2: usize,
}

impl GridSpec {
    pub fn new(x1_range: (f64, f64), x2_range: (f64, f64), n1: usize, n2: usize) -> Result<Self> {
        if !(x1_range.1 - x1_range.0).is_finite()
            || x1_range.1 <= x1_range.0
            || x2_range.1 <= x2_range.0
        {
            return Err(Error::InvalidParameter(
                "grid ranges must be nondegenerate".into(),
            ));
        }
        if n1 < 2 || n2 < 2 {
            return Err(Error::InvalidParameter(
                "grid needs at least 2x2 nodes".into(),
            ));
        }
        Ok(Self {
            x1_range,
            x2_range,
            n1,
            n2,
        })
    }

    /// Default window for the pendulum study; contains C_p for the default
    /// parameters.
    pub fn pendulum_default() -> Self {
        Self::new((-2.2, 2.2), (-1.5, 1.5), 301, 301).unwrap()
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn x1(&self, i: usize) -> f64 {
        self.x1_range.0 + (self.x1_range.1 - self.x1_range.0) * i as f64 / (self.n1 - 1) as f64
    }

    pub fn x2(&self, j: usize) -> f64 {
        self.x2_range.0 + (self.x2_range.1 - self.x2_range.0) * j as f64 / (self.n2 - 1) as f64
    }

    /// Flat index, x1-major.
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n2 + j
    }

    pub fn node(&self, idx: usize) -> (f64, f64) {
        (self.x1(idx / self.n2), self.x2(idx % self.n2))
    }
}

/// Margin field of one set over a grid; membership is margin >= 0.
#[derive(Debug, Clone)]
pub struct SetMembershipGrid {
    pub spec: GridSpec,
    pub label: String,
    pub margin: Vec<f64>,
}

impl SetMembershipGrid {
    pub fn member(&self, idx: usize) -> bool {
        self.margin[idx] >= 0.0
    }

    pub fn member_count(&self) -> usize {
        self.margin.iter().filter(|&&m| m >= 0.0).count()
    }
}

/// Backup-set value h_b(x) = 1 - (x₁/φ_max)² - (x₂/X₂)².
pub fn backup_set_margin(x: &DVector<f64>, phi_max: f64, x2_max: f64) -> f64 {
    1.0 - (x[0] / phi_max).powi(2) - (x[1] / x2_max).powi(2)
}

/// Invariant-set margin of one state: minimum of the projected constraints
/// along the sampled backup flow and the terminal backup-set value. A
/// diverged flow classifies as outside (−∞).
pub fn membership_margin(
    projected: &[ProjectedConstraint],
    pair: &BackupPair,
    plant: &dyn Plant,
    x: &DVector<f64>,
    horizon: f64,
    n_samples: usize,
) -> f64 {
    let thetas: Vec<f64> = (0..n_samples)
        .map(|i| horizon * i as f64 / (n_samples - 1) as f64)
        .collect();
    let samples = match flow(pair, plant, x, &thetas) {
        Ok(s) => s,
        Err(_) => return f64::NEG_INFINITY,
    };
    let mut margin = f64::INFINITY;
    for s in &samples {
        for p in projected {
            margin = margin.min(p.value(&s.state));
        }
    }
    margin.min(pair.backup_set_value(&samples[n_samples - 1].state))
}

/// All margin fields of the pendulum set study.
#[derive(Debug, Clone)]
pub struct MarginGrids {
    pub cp: SetMembershipGrid,
    pub sb: SetMembershipGrid,
    pub si_phi: SetMembershipGrid,
    pub si_phi_u: SetMembershipGrid,
    pub si_p: SetMembershipGrid,
    pub ce: SetMembershipGrid,
}

/// Per-node margins, in CSV column order.
type NodeMargins = [f64; 6];

fn classify_node(
    x: &DVector<f64>,
    params: &PendulumParams,
    projected: &[ProjectedConstraint],
    pair: &BackupPair,
    plant: &dyn Plant,
    thetas: &[f64],
) -> NodeMargins {
    let cp = projected
        .iter()
        .map(|p| p.value(x))
        .fold(f64::INFINITY, f64::min);
    let sb = backup_set_margin(x, params.phi_max, params.x2_max);
    let ce = hocbf_barrier(params.gamma, params.phi_max, x);

    let samples = match flow(pair, plant, x, thetas) {
        Ok(s) => s,
        Err(_) => {
            return [
                cp,
                sb,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
                ce,
            ];
        }
    };
    // running minima over nested constraint subsets share the flow samples
    let mut m_state = f64::INFINITY;
    let mut m_state_input = f64::INFINITY;
    let mut m_all = f64::INFINITY;
    for s in &samples {
        for (j, p) in projected.iter().enumerate() {
            let v = p.value(&s.state);
            if j < 2 {
                m_state = m_state.min(v);
            }
            if j < 4 {
                m_state_input = m_state_input.min(v);
            }
            m_all = m_all.min(v);
        }
    }
    let terminal = pair.backup_set_value(&samples[samples.len() - 1].state);
    [
        cp,
        sb,
        m_state.min(terminal),
        m_state_input.min(terminal),
        m_all.min(terminal),
        ce,
    ]
}

struct StudyContext {
    params: PendulumParams,
    projected: Vec<ProjectedConstraint>,
    pair: Arc<BackupPair>,
    plant: PendulumPlant,
    thetas: Vec<f64>,
}

impl StudyContext {
    fn new(params: &PendulumParams) -> StudyContext {
        let pair = Arc::new(pendulum_backup_pair(params));
        let projected = pendulum_constraints(params)
            .into_iter()
            .map(|c| project(Arc::new(c), pair.clone()))
            .collect();
        let thetas = (0..params.n_samples)
            .map(|i| params.t_horizon * i as f64 / (params.n_samples - 1) as f64)
            .collect();
        StudyContext {
            params: params.clone(),
            projected,
            pair,
            plant: PendulumPlant,
            thetas,
        }
    }

    fn classify(&self, spec: &GridSpec, idx: usize) -> NodeMargins {
        let (x1, x2) = spec.node(idx);
        let x = DVector::from_column_slice(&[x1, x2]);
        classify_node(
            &x,
            &self.params,
            &self.projected,
            &self.pair,
            &self.plant,
            &self.thetas,
        )
    }
}

fn collect_grids(spec: &GridSpec, margins: Vec<NodeMargins>) -> MarginGrids {
    let mut fields: Vec<Vec<f64>> = (0..6).map(|_| Vec::with_capacity(spec.len())).collect();
    for node in margins {
        for (f, v) in fields.iter_mut().zip(node) {
            f.push(v);
        }
    }
    let mut fields = fields.into_iter();
    let mut grid = |label: &str| SetMembershipGrid {
        spec: spec.clone(),
        label: label.to_string(),
        margin: fields.next().unwrap(),
    };
    MarginGrids {
        cp: grid("Cp"),
        sb: grid("Sb"),
        si_phi: grid("SIphi"),
        si_phi_u: grid("SIphiu"),
        si_p: grid("SIp"),
        ce: grid("Ce"),
    }
}

/// Classify every node of the grid; parallel when the `parallel` feature is
/// enabled, otherwise identical to [`compute_margin_grids_seq`].
pub fn compute_margin_grids(params: &PendulumParams, spec: &GridSpec) -> MarginGrids {
    let ctx = StudyContext::new(params);
    #[cfg(feature = "parallel")]
    let margins: Vec<NodeMargins> = (0..spec.len())
        .into_par_iter()
        .map(|idx| ctx.classify(spec, idx))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let margins: Vec<NodeMargins> = (0..spec.len()).map(|idx| ctx.classify(spec, idx)).collect();
    collect_grids(spec, margins)
}

/// Sequential reference implementation (also the fallback when built without
/// the `parallel` feature).
pub fn compute_margin_grids_seq(params: &PendulumParams, spec: &GridSpec) -> MarginGrids {
    let ctx = StudyContext::new(params);
    let margins: Vec<NodeMargins> = (0..spec.len()).map(|idx| ctx.classify(spec, idx)).collect();
    collect_grids(spec, margins)
}

/// One nodewise inclusion failure: the node is in `inner` but not in `outer`.
#[derive(Debug, Clone)]
pub struct NestingViolation {
    pub relation: &'static str,
    pub x1: f64,
    pub x2: f64,
    pub inner_margin: f64,
    pub outer_margin: f64,
}

#[derive(Debug, Clone)]
pub struct NestingReport {
    pub violations: Vec<NestingViolation>,
    pub member_counts: Vec<(String, usize)>,
}

impl NestingReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check S_b ⊆ C_p, S_b ⊆ S_I^p and S_I^p ⊆ S_I^{φu} ⊆ S_I^φ nodewise.
pub fn verify_nesting(grids: &MarginGrids) -> NestingReport {
    let mut violations = Vec::new();
    let mut check =
        |relation: &'static str, inner: &SetMembershipGrid, outer: &SetMembershipGrid| {
            for idx in 0..inner.spec.len() {
                if inner.member(idx) && !outer.member(idx) {
                    let (x1, x2) = inner.spec.node(idx);
                    violations.push(NestingViolation {
                        relation,
                        x1,
                        x2,
                        inner_margin: inner.margin[idx],
                        outer_margin: outer.margin[idx],
                    });
                }
            }
        };
    check("Sb in Cp", &grids.sb, &grids.cp);
    check("Sb in SIp", &grids.sb, &grids.si_p);
    check("SIp in SIphiu", &grids.si_p, &grids.si_phi_u);
    check("SIphiu in SIphi", &grids.si_phi_u, &grids.si_phi);
    NestingReport {
        violations,
        member_counts: [
            &grids.sb,
            &grids.cp,
            &grids.si_phi,
            &grids.si_phi_u,
            &grids.si_p,
            &grids.ce,
        ]
        .iter()
        .map(|g| (g.label.clone(), g.member_count()))
        .collect(),
    }
}

/// Nine significant digits, scientific; shared by every CSV writer.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.8e}")
}

/// Margin CSV: one row per node, x1-major.
pub fn write_margins_csv(grids: &MarginGrids, out: &mut dyn Write) -> io::Result<()> {
    writeln!(
        out,
        "x1,x2,margin_Cp,margin_Sb,margin_SIphi,margin_SIphiu,margin_SIp,margin_Ce"
    )?;
    let spec = &grids.cp.spec;
    for idx in 0..spec.len() {
        let (x1, x2) = spec.node(idx);
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            fmt_f64(x1),
            fmt_f64(x2),
            fmt_f64(grids.cp.margin[idx]),
            fmt_f64(grids.sb.margin[idx]),
            fmt_f64(grids.si_phi.margin[idx]),
            fmt_f64(grids.si_phi_u.margin[idx]),
            fmt_f64(grids.si_p.margin[idx]),
            fmt_f64(grids.ce.margin[idx]),
        )?;
    }
    Ok(())
}

/// Zero-level boundary segments of a margin field by marching squares with
/// linear interpolation; saddle cells disambiguate on the cell-center value.
pub fn boundary_segments(grid: &SetMembershipGrid) -> Vec<[(f64, f64); 2]> {
    let spec = &grid.spec;
    let m = |i: usize, j: usize| grid.margin[spec.index(i, j)];
    let mut segments = Vec::new();

    let interp = |pa: (f64, f64), va: f64, pb: (f64, f64), vb: f64| -> (f64, f64) {
        let t = if (va - vb).abs() < 1e-300 {
            0.5
        } else {
            va / (va - vb)
        };
        (pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1))
    };

    for i in 0..spec.n1 - 1 {
        for j in 0..spec.n2 - 1 {
            // corners: a = (i,j), b = (i+1,j), c = (i+1,j+1), d = (i,j+1)
            let (va, vb, vc, vd) = (m(i, j), m(i + 1, j), m(i + 1, j + 1), m(i, j + 1));
            let pa = (spec.x1(i), spec.x2(j));
            let pb = (spec.x1(i + 1), spec.x2(j));
            let pc = (spec.x1(i + 1), spec.x2(j + 1));
            let pd = (spec.x1(i), spec.x2(j + 1));
            let code = (va >= 0.0) as u8
                | ((vb >= 0.0) as u8) << 1
                | ((vc >= 0.0) as u8) << 2
                | ((vd >= 0.0) as u8) << 3;
            if code == 0 || code == 15 {
                continue;
            }
            let ab = || interp(pa, va, pb, vb);
            let bc = || interp(pb, vb, pc, vc);
            let cd = || interp(pc, vc, pd, vd);
            let da = || interp(pd, vd, pa, va);
            match code {
                1 | 14 => segments.push([ab(), da()]),
                2 | 13 => segments.push([ab(), bc()]),
                4 | 11 => segments.push([bc(), cd()]),
                8 | 7 => segments.push([cd(), da()]),
                3 | 12 => segments.push([bc(), da()]),
                6 | 9 => segments.push([ab(), cd()]),
                5 | 10 => {
                    // saddle: split on the center sign
                    let center = 0.25 * (va + vb + vc + vd);
                    let corners_positive = code == 5;
                    if (center >= 0.0) == corners_positive {
                        segments.push([ab(), bc()]);
                        segments.push([cd(), da()]);
                    } else {
                        segments.push([ab(), da()]);
                        segments.push([bc(), cd()]);
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    segments
}

/// Boundary CSV: one zero-crossing segment per row, per set.
pub fn write_boundaries_csv(grids: &MarginGrids, out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "set,x1_start,x2_start,x1_end,x2_end")?;
    for grid in [
        &grids.cp,
        &grids.sb,
        &grids.si_phi,
        &grids.si_phi_u,
        &grids.si_p,
        &grids.ce,
    ] {
        for seg in boundary_segments(grid) {
            writeln!(
                out,
                "{},{},{},{},{}",
                grid.label,
                fmt_f64(seg[0].0),
                fmt_f64(seg[0].1),
                fmt_f64(seg[1].0),
                fmt_f64(seg[1].1),
            )?;
        }
    }
    Ok(())
}
