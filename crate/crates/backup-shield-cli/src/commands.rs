//! Command implementations. Exit-code policy: 0 = success, 1 = config or I/O
//! error (raised as anyhow errors by the caller), 2 = safety finding that is
//! an error by policy — a constraint violation under the backup filter, a
//! nesting violation, or a self-test failure. Baseline (hocbf) violations are
//! expected findings and exit 0.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use nalgebra::{DMatrix, DVector};

use backup_shield::dynamics::PendulumPlant;
use backup_shield::filter::{BackupCbfFilter, HocbfFilter};
use backup_shield::flow::{
    flow, pendulum_backup_pair, pendulum_backup_pair_numeric, pendulum_flow_closed_form,
};
use backup_shield::qp::{brute_force_oracle, solve, OracleOutcome, QpProblem, QpStatus};
use backup_shield::sets::{
    compute_margin_grids, fmt_f64, verify_nesting, write_boundaries_csv, write_margins_csv,
};
use backup_shield::sim::{run, summarize, write_trajectory_csv, TrajectoryLog};

use crate::config::{FilterChoice, ResolvedConfig};

/// Violations beyond this under the backup filter fail the run (exit 2).
const SAFETY_VIOLATION_TOL: f64 = 1e-6;

struct Manifest {
    command: String,
    out_dir: PathBuf,
    artifacts: Vec<String>,
    notes: Vec<String>,
}

impl Manifest {
    fn new(command: &str, out_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            out_dir: out_dir.to_path_buf(),
            artifacts: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn add(&mut self, name: &str) {
        self.artifacts.push(name.to_string());
    }

    fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// Written last: its presence signals a completed run.
    fn write(&self) -> anyhow::Result<()> {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut text = String::new();
        text.push_str("backup-shield run manifest\n");
        text.push_str(&format!("version: {}\n", env!("CARGO_PKG_VERSION")));
        text.push_str(&format!("command: {}\n", self.command));
        text.push_str(&format!("timestamp_unix: {ts}\n"));
        for n in &self.notes {
            text.push_str(&format!("note: {n}\n"));
        }
        text.push_str("artifacts:\n");
        for a in &self.artifacts {
            text.push_str(&format!("  - {a}\n"));
        }
        fs::write(self.out_dir.join("manifest.txt"), text).context("writing manifest")?;
        Ok(())
    }
}

fn write_artifact(
    manifest: &mut Manifest,
    name: &str,
    body: impl FnOnce(&mut dyn std::io::Write) -> std::io::Result<()>,
) -> anyhow::Result<()> {
    let path = manifest.out_dir.join(name);
    let mut file = std::io::BufWriter::new(
        fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    body(&mut file).with_context(|| format!("writing {}", path.display()))?;
    file.flush()?;
    manifest.add(name);
    Ok(())
}

fn run_filter_kind(
    resolved: &ResolvedConfig,
    kind: FilterChoice,
) -> anyhow::Result<Vec<TrajectoryLog>> {
    let sim = resolved.sim_config()?;
    let logs = match kind {
        FilterChoice::Backup => {
            let filter = BackupCbfFilter::pendulum(&resolved.params)?;
            run(&PendulumPlant, &filter, &sim)
        }
        FilterChoice::Hocbf => {
            let filter = HocbfFilter::pendulum(&resolved.params)?;
            run(&PendulumPlant, &filter, &sim)
        }
        FilterChoice::Both => unreachable!("expanded by the caller"),
    };
    Ok(logs)
}

fn summary_lines(kind: FilterChoice, logs: &[TrajectoryLog]) -> Vec<String> {
    let mut lines = Vec::new();
    for (i, (log, s)) in logs.iter().zip(summarize(logs)).enumerate() {
        lines.push(format!(
            "{kind} traj {i}: x1 in [{}, {}], u in [{}, {}], power in [{}, {}], infeasible_steps {}, max_violation {}{}",
            fmt_f64(s.x1_min),
            fmt_f64(s.x1_max),
            fmt_f64(s.u_min),
            fmt_f64(s.u_max),
            fmt_f64(s.power_min),
            fmt_f64(s.power_max),
            s.infeasible_steps,
            fmt_f64(s.max_violation),
            log.truncated
                .as_ref()
                .map(|r| format!(", truncated: {r}"))
                .unwrap_or_default(),
        ));
    }
    lines
}

/// `simulate`: closed-loop runs for the configured filter(s), one CSV per
/// trajectory plus a resolved-config echo and the manifest.
pub fn cmd_simulate(resolved: &ResolvedConfig, out_dir: &Path) -> anyhow::Result<i32> {
    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::new("simulate", out_dir);
    manifest.note(format!(
        "initial_states_source = {}",
        resolved.initial_states_source
    ));

    let kinds: Vec<FilterChoice> = match resolved.filter_choice {
        FilterChoice::Both => vec![FilterChoice::Backup, FilterChoice::Hocbf],
        k => vec![k],
    };

    let mut all_lines = Vec::new();
    let mut backup_violation = 0.0f64;
    for kind in kinds {
        let logs = run_filter_kind(resolved, kind)?;
        for (i, log) in logs.iter().enumerate() {
            write_artifact(&mut manifest, &format!("traj_{kind}_{i}.csv"), |w| {
                write_trajectory_csv(log, w)
            })?;
        }
        if kind == FilterChoice::Backup {
            backup_violation = logs
                .iter()
                .map(|l| l.max_violation())
                .fold(backup_violation, f64::max);
            if logs.iter().any(|l| l.truncated.is_some()) {
                backup_violation = f64::INFINITY;
            }
        }
        all_lines.extend(summary_lines(kind, &logs));
    }

    for line in &all_lines {
        println!("{line}");
    }
    write_artifact(&mut manifest, "summary.txt", |w| {
        for line in &all_lines {
            writeln!(w, "{line}")?;
        }
        Ok(())
    })?;
    write_artifact(&mut manifest, "config_resolved.toml", |w| {
        w.write_all(resolved.to_toml().as_bytes())
    })?;
    manifest.write()?;

    if backup_violation > SAFETY_VIOLATION_TOL {
        eprintln!(
            "safety regression: backup filter violated constraints by {}",
            fmt_f64(backup_violation)
        );
        return Ok(2);
    }
    Ok(0)
}

/// `sets`: membership grids for all six sets, nesting verification, margin
/// and boundary CSVs.
pub fn cmd_sets(resolved: &ResolvedConfig, out_dir: &Path) -> anyhow::Result<i32> {
    fs::create_dir_all(out_dir)?;
    let mut manifest = Manifest::new("sets", out_dir);

    let grids = compute_margin_grids(&resolved.params, &resolved.grid);
    let report = verify_nesting(&grids);

    write_artifact(&mut manifest, "sets.csv", |w| write_margins_csv(&grids, w))?;
    write_artifact(&mut manifest, "boundaries.csv", |w| {
        write_boundaries_csv(&grids, w)
    })?;
    write_artifact(&mut manifest, "nesting_report.txt", |w| {
        writeln!(w, "nesting report: {} violations", report.violations.len())?;
        for (label, count) in &report.member_counts {
            writeln!(w, "members {label}: {count}")?;
        }
        for v in &report.violations {
            writeln!(
                w,
                "violation {}: node ({}, {}) inner_margin {} outer_margin {}",
                v.relation,
                fmt_f64(v.x1),
                fmt_f64(v.x2),
                fmt_f64(v.inner_margin),
                fmt_f64(v.outer_margin)
            )?;
        }
        Ok(())
    })?;
    write_artifact(&mut manifest, "config_resolved.toml", |w| {
        w.write_all(resolved.to_toml().as_bytes())
    })?;
    manifest.write()?;

    println!("nesting report: {} violations", report.violations.len());
    for (label, count) in &report.member_counts {
        println!("members {label}: {count}");
    }
    if report.is_clean() {
        Ok(0)
    } else {
        eprintln!("nesting violations found; see nesting_report.txt");
        Ok(2)
    }
}

/// `compare`: both filters from the same configuration, side by side.
pub fn cmd_compare(resolved: &ResolvedConfig, out_dir: &Path) -> anyhow::Result<i32> {
    let mut both = resolved.clone();
    both.filter_choice = FilterChoice::Both;
    cmd_simulate(&both, out_dir)
}

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

/// `selftest`: the embedded oracle suite. Deterministic output; exit 2 on any
/// failure. `BACKUP_SHIELD_SELFTEST_PERTURB` injects an offset into the
/// analytic flow inside the suite (fault-injection hook for testing the
/// test).
pub fn cmd_selftest() -> anyhow::Result<i32> {
    let perturb: f64 = std::env::var("BACKUP_SHIELD_SELFTEST_PERTURB")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.0);

    let params = backup_shield::PendulumParams::default();
    let plant = PendulumPlant;
    let analytic = pendulum_backup_pair(&params);
    let numeric = pendulum_backup_pair_numeric(&params, 1e-3);

    // fixed probe states, no RNG: identical output on every invocation
    let probes: Vec<DVector<f64>> = (0..20)
        .map(|i| {
            let a = -2.0 + 4.0 * (i as f64) / 19.0;
            let b = 1.4 * ((0.37 * i as f64).sin());
            DVector::from_column_slice(&[a, b])
        })
        .collect();

    let mut checks = Vec::new();

    // 1. analytic vs numeric flow
    {
        let thetas: Vec<f64> = (0..=16).map(|i| 0.5 * i as f64).collect();
        let mut worst = 0.0f64;
        for x in &probes {
            let sa = flow(&analytic, &plant, x, &thetas)?;
            let sn = flow(&numeric, &plant, x, &thetas)?;
            for (a, n) in sa.iter().zip(&sn) {
                let mut state = a.state.clone();
                state[0] += perturb;
                worst = worst.max((state - &n.state).amax());
            }
        }
        checks.push(Check {
            name: "flow analytic-vs-numeric",
            passed: worst < 1e-6,
            detail: format!("max state error {}", fmt_f64(worst)),
        });
    }

    // 2. sensitivity vs central finite differences
    {
        let mut worst = 0.0f64;
        for (i, x) in probes.iter().enumerate() {
            let theta = 0.4 + 0.35 * i as f64;
            let mut s = pendulum_flow_closed_form(params.k, x, theta);
            s.sensitivity[(0, 0)] += perturb;
            let eps = 1e-6;
            for j in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += eps;
                xm[j] -= eps;
                let fp = pendulum_flow_closed_form(params.k, &xp, theta);
                let fm = pendulum_flow_closed_form(params.k, &xm, theta);
                for r in 0..2 {
                    let fd = (fp.state[r] - fm.state[r]) / (2.0 * eps);
                    let scale = s.sensitivity[(r, j)].abs().max(1.0);
                    worst = worst.max((s.sensitivity[(r, j)] - fd).abs() / scale);
                }
            }
        }
        checks.push(Check {
            name: "sensitivity finite-difference",
            passed: worst < 1e-4,
            detail: format!("max relative error {}", fmt_f64(worst)),
        });
    }

    // 3. qp solver vs grid oracle (deterministic LCG problems)
    {
        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let mut worst = 0.0f64;
        let mut verdict_ok = true;
        for case in 0..40 {
            let m = 1 + case % 2;
            let k = 2 + case % 5;
            let z: Vec<f64> = (0..m).map(|_| next()).collect();
            let mut a = DMatrix::zeros(k, m);
            let mut b = DVector::zeros(k);
            for r in 0..k {
                for c in 0..m {
                    a[(r, c)] = next();
                }
                let az: f64 = (0..m).map(|c| a[(r, c)] * z[c]).sum();
                b[r] = az + 0.05 + 0.5 * (next() + 1.0);
            }
            let ud = DVector::from_iterator(m, (0..m).map(|_| 2.0 * next()));
            let p = QpProblem::new(ud, a, b);
            let sol = solve(&p)?;
            if sol.status != QpStatus::Optimal {
                verdict_ok = false;
                continue;
            }
            match brute_force_oracle(&p, &vec![-3.0; m], &vec![3.0; m], 301) {
                OracleOutcome::Feasible { objective, .. } => {
                    let mine = (&sol.u - &p.desired).norm_squared();
                    worst = worst.max(mine - objective);
                }
                OracleOutcome::Infeasible => verdict_ok = false,
            }
        }
        let slack = 2.0 * 6.0 / 301.0;
        checks.push(Check {
            name: "qp-vs-grid oracle",
            passed: verdict_ok && worst <= slack,
            detail: format!("max objective excess {}", fmt_f64(worst.max(0.0))),
        });
    }

    // 4. projection identity h(x) = H(x, k_b(x))
    {
        let constraints = backup_shield::constraint::pendulum_constraints(&params);
        let pair = std::sync::Arc::new(pendulum_backup_pair(&params));
        let mut worst = 0.0f64;
        for x in &probes {
            let kb = pair.control(x);
            for c in &constraints {
                let projected = backup_shield::constraint::project(
                    std::sync::Arc::new(c.clone()),
                    pair.clone(),
                );
                worst = worst.max((c.eval(x, &kb) - projected.value(x)).abs());
            }
        }
        checks.push(Check {
            name: "projection identity",
            passed: worst <= 1e-12,
            detail: format!("max |H(x,k_b(x)) - h(x)| {}", fmt_f64(worst)),
        });
    }

    let mut all_ok = true;
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {:<32} {}", c.name, c.detail);
        all_ok &= c.passed;
    }
    Ok(if all_ok { 0 } else { 2 })
}
