//! Run configuration: a flat `key = value` file with bracketed section
//! headers (TOML), using the conventional parameter names verbatim so a
//! parameter table maps 1:1 onto the file. Unknown keys are hard errors —
//! no silent typos in safety parameters.

use anyhow::{bail, Context};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use backup_shield::sets::GridSpec;
use backup_shield::sim::SimConfig;
use backup_shield::PendulumParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterChoice {
    Backup,
    Hocbf,
    Both,
}

impl std::fmt::Display for FilterChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FilterChoice::Backup => "backup",
            FilterChoice::Hocbf => "hocbf",
            FilterChoice::Both => "both",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for FilterChoice {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "backup" => Ok(FilterChoice::Backup),
            "hocbf" => Ok(FilterChoice::Hocbf),
            "both" => Ok(FilterChoice::Both),
            other => bail!("unknown filter '{other}' (expected backup|hocbf|both)"),
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    pendulum: PendulumSection,
    #[serde(default)]
    filter: FilterSection,
    #[serde(default)]
    sim: SimSection,
    #[serde(default)]
    sets: SetsSection,
}

macro_rules! section {
    ($name:ident { $($(#[$meta:meta])* $field:ident : $ty:ty = $default:expr),+ $(,)? }) => {
        #[derive(Debug, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        struct $name {
            $($(#[$meta])* $field: $ty,)+
        }
        impl Default for $name {
            fn default() -> Self {
                Self { $($field: $default,)+ }
            }
        }
    };
}

section!(PendulumSection {
    phi_max: f64 = 1.75,
    u_min: f64 = -1.1,
    u_max: f64 = 1.2,
    #[serde(rename = "P_min")]
    p_min: f64 = -0.7,
    #[serde(rename = "P_max")]
    p_max: f64 = 0.2,
    #[serde(rename = "K")]
    k: f64 = 0.7,
    #[serde(rename = "X2")]
    x2: f64 = 0.2,
    gamma: f64 = 0.7,
});

section!(FilterSection {
    #[serde(rename = "T")]
    t: f64 = 8.0,
    #[serde(rename = "N_c")]
    n_c: usize = 100,
    alpha_gain: f64 = 15.0,
    alpha_b_gain: f64 = 1.0,
    hocbf_alpha_gain: f64 = 15.0,
});

section!(SimSection {
    dt: f64 = 0.01,
    t_end: f64 = 20.0,
    substeps: usize = 10,
    initial_states: Vec<[f64; 2]> = vec![[0.8, -0.25], [-0.8, 0.25]],
    filter_choice: FilterChoice = FilterChoice::Backup,
});

section!(SetsSection {
    x1_min: f64 = -2.2,
    x1_max: f64 = 2.2,
    x2_min: f64 = -1.5,
    x2_max: f64 = 1.5,
    n1: usize = 301,
    n2: usize = 301,
});

/// Fully resolved run parameters (file values + defaults + CLI overrides).
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub params: PendulumParams,
    pub dt: f64,
    pub t_end: f64,
    pub substeps: usize,
    pub initial_states: Vec<[f64; 2]>,
    pub filter_choice: FilterChoice,
    pub grid: GridSpec,
    /// Whether the initial states came from a config file or library defaults.
    pub initial_states_source: &'static str,
}

impl ResolvedConfig {
    pub fn sim_config(&self) -> anyhow::Result<SimConfig> {
        let states = self
            .initial_states
            .iter()
            .map(|s| DVector::from_column_slice(s))
            .collect();
        let mut cfg = SimConfig::new(self.dt, self.t_end, states)?;
        cfg.substeps = self.substeps;
        Ok(cfg)
    }

    /// Serialize back to the config format; feeding the output to `--config`
    /// reproduces the run bit-identically.
    pub fn to_toml(&self) -> String {
        let file = ConfigFile {
            pendulum: PendulumSection {
                phi_max: self.params.phi_max,
                u_min: self.params.u_min,
                u_max: self.params.u_max,
                p_min: self.params.p_min,
                p_max: self.params.p_max,
                k: self.params.k,
                x2: self.params.x2_max,
                gamma: self.params.gamma,
            },
            filter: FilterSection {
                t: self.params.t_horizon,
                n_c: self.params.n_samples,
                alpha_gain: self.params.alpha_gain,
                alpha_b_gain: self.params.alpha_b_gain,
                hocbf_alpha_gain: self.params.hocbf_alpha_gain,
            },
            sim: SimSection {
                dt: self.dt,
                t_end: self.t_end,
                substeps: self.substeps,
                initial_states: self.initial_states.clone(),
                filter_choice: self.filter_choice,
            },
            sets: SetsSection {
                x1_min: self.grid.x1_range.0,
                x1_max: self.grid.x1_range.1,
                x2_min: self.grid.x2_range.0,
                x2_max: self.grid.x2_range.1,
                n1: self.grid.n1,
                n2: self.grid.n2,
            },
        };
        toml::to_string(&file).expect("config serializes")
    }
}

/// Parse a config file (or take pure defaults when `path` is None) and apply
/// CLI overrides. Every parameter is validated before use.
pub fn resolve(
    path: Option<&std::path::Path>,
    dt_override: Option<f64>,
    filter_override: Option<FilterChoice>,
    grid_override: Option<(usize, usize)>,
) -> anyhow::Result<ResolvedConfig> {
    let (file, from_file): (ConfigFile, bool) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            let parsed =
                toml::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?;
            (parsed, true)
        }
        None => (ConfigFile::default(), false),
    };

    let params = PendulumParams {
        phi_max: file.pendulum.phi_max,
        u_min: file.pendulum.u_min,
        u_max: file.pendulum.u_max,
        p_min: file.pendulum.p_min,
        p_max: file.pendulum.p_max,
        k: file.pendulum.k,
        x2_max: file.pendulum.x2,
        gamma: file.pendulum.gamma,
        t_horizon: file.filter.t,
        n_samples: file.filter.n_c,
        alpha_gain: file.filter.alpha_gain,
        alpha_b_gain: file.filter.alpha_b_gain,
        hocbf_alpha_gain: file.filter.hocbf_alpha_gain,
    };
    params.validate()?;

    let (n1, n2) = grid_override.unwrap_or((file.sets.n1, file.sets.n2));
    let grid = GridSpec::new(
        (file.sets.x1_min, file.sets.x1_max),
        (file.sets.x2_min, file.sets.x2_max),
        n1,
        n2,
    )?;

    let resolved = ResolvedConfig {
        params,
        dt: dt_override.unwrap_or(file.sim.dt),
        t_end: file.sim.t_end,
        substeps: file.sim.substeps,
        initial_states: file.sim.initial_states,
        filter_choice: filter_override.unwrap_or(file.sim.filter_choice),
        grid,
        initial_states_source: if from_file { "config" } else { "defaults" },
    };
    // surface bad dt/t_end/state values now, not mid-run
    resolved.sim_config()?;
    Ok(resolved)
}
