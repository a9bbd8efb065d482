use crate::error::{Error, Result};

/// Parameter bundle for the state-input-power constrained pendulum study.
///
/// Field names follow the conventional symbols: `phi_max` is the angle bound
/// (rad), `u_min`/`u_max` the torque bounds (N·m), `p_min`/`p_max` the power
/// bounds (W), `k` the backup-controller velocity gain (1/s), `x2_max` the
/// velocity semi-axis of the backup ellipse (rad/s), `gamma` the HOCBF
/// baseline rate (1/s), `t_horizon` the backup horizon (s), `n_samples` the
/// number of flow constraint samples, and `alpha_gain`/`alpha_b_gain`/
/// `hocbf_alpha_gain` the linear class-K gains (1/s).
#[derive(Debug, Clone, PartialEq)]
pub struct PendulumParams {
    pub phi_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub k: f64,
    pub x2_max: f64,
    pub gamma: f64,
    pub t_horizon: f64,
    pub n_samples: usize,
    pub alpha_gain: f64,
    pub alpha_b_gain: f64,
    pub hocbf_alpha_gain: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            phi_max: 1.75,
            u_min: -1.1,
            u_max: 1.2,
            p_min: -0.7,
            p_max: 0.2,
            k: 0.7,
            x2_max: 0.2,
            gamma: 0.7,
            t_horizon: 8.0,
            n_samples: 100,
            alpha_gain: 15.0,
            alpha_b_gain: 1.0,
            hocbf_alpha_gain: 15.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("phi_max", self.phi_max),
            ("K", self.k),
            ("X2", self.x2_max),
            ("gamma", self.gamma),
            ("T", self.t_horizon),
            ("alpha_gain", self.alpha_gain),
            ("alpha_b_gain", self.alpha_b_gain),
            ("hocbf_alpha_gain", self.hocbf_alpha_gain),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be > 0, got {v}"
                )));
            }
        }
        if self.u_min >= self.u_max {
            return Err(Error::InvalidParameter(format!(
                "u_min ({}) must be < u_max ({})",
                self.u_min, self.u_max
            )));
        }
        if self.p_min >= self.p_max {
            return Err(Error::InvalidParameter(format!(
                "P_min ({}) must be < P_max ({})",
                self.p_min, self.p_max
            )));
        }
        if self.n_samples < 2 {
            return Err(Error::InvalidParameter(format!(
                "N_c must be >= 2, got {}",
                self.n_samples
            )));
        }
        Ok(())
    }
}
