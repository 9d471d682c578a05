use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Defaults used throughout training and sampling.
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.5;
pub const DEFAULT_ZETA: usize = 10;
pub const DEFAULT_S_HAT: usize = 30;

/// Range of the normalized data; predicted clean states are clipped to it
/// while sampling.
pub const DEFAULT_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub zeta: usize,
    pub s_hat: usize,
    /// `None` disables clipping.
    pub clip_x0: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            zeta: DEFAULT_ZETA,
            s_hat: DEFAULT_S_HAT,
            clip_x0: Some(DEFAULT_CLIP),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.beta_start, self.beta_end, self.zeta, self.s_hat)?.with_clip(self.clip_x0)
    }
}

/// Quadratic noise schedule with its derived sequences.
///
/// All per-step vectors are indexed by the step itself, `0..=steps`. Index 0
/// holds the clean-data convention `alpha_hat[0] = 1`, `a[0] = 0`; `beta[0]`,
/// `alpha[0]` and `posterior_sigma[0]` are unused placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    zeta: usize,
    s_hat: usize,
    clip_x0: Option<f64>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_hat: Vec<f64>,
    a: Vec<f64>,
    posterior_sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds `beta_s = (sqrt(b0) + (s-1)/(S-1) * (sqrt(b1) - sqrt(b0)))^2`.
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, zeta: usize, s_hat: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::param("steps", format!("must be >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::param(
                "beta",
                format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        if zeta == 0 || zeta > steps {
            return Err(Error::param("zeta", format!("must lie in 1..={steps}, got {zeta}")));
        }
        if steps % zeta != 0 {
            return Err(Error::param(
                "zeta",
                format!("skip chain requires steps ({steps}) divisible by zeta ({zeta})"),
            ));
        }
        if s_hat > steps {
            return Err(Error::param("s_hat", format!("must lie in 0..={steps}, got {s_hat}")));
        }

        let (r0, r1) = (beta_start.sqrt(), beta_end.sqrt());
        let mut beta = vec![0.0; steps + 1];
        for (s, b) in beta.iter_mut().enumerate().skip(1) {
            let frac = (s - 1) as f64 / (steps - 1) as f64;
            let r = r0 + frac * (r1 - r0);
            *b = r * r;
        }
        // pin the endpoints against interpolation round-off
        beta[1] = beta_start;
        beta[steps] = beta_end;

        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_hat = vec![1.0; steps + 1];
        let mut a = vec![0.0; steps + 1];
        let mut posterior_sigma = vec![0.0; steps + 1];
        for s in 1..=steps {
            alpha[s] = 1.0 - beta[s];
            alpha_hat[s] = alpha_hat[s - 1] * alpha[s];
            a[s] = (1.0 - alpha_hat[s]).sqrt();
            posterior_sigma[s] = ((1.0 - alpha_hat[s - 1]) / (1.0 - alpha_hat[s]) * beta[s]).sqrt();
        }
        Ok(NoiseSchedule {
            steps,
            zeta,
            s_hat,
            clip_x0: None,
            beta,
            alpha,
            alpha_hat,
            a,
            posterior_sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn zeta(&self) -> usize {
        self.zeta
    }

    pub fn s_hat(&self) -> usize {
        self.s_hat
    }

    /// Same schedule with a different variance start step.
    pub fn with_s_hat(&self, s_hat: usize) -> Result<Self> {
        if s_hat > self.steps {
            return Err(Error::param("s_hat", format!("must lie in 0..={}, got {s_hat}", self.steps)));
        }
        Ok(NoiseSchedule {
            s_hat,
            ..self.clone()
        })
    }

    pub fn clip_x0(&self) -> Option<f64> {
        self.clip_x0
    }

    /// Same schedule with a different clean-state clip bound.
    pub fn with_clip(self, clip_x0: Option<f64>) -> Result<Self> {
        if let Some(c) = clip_x0 {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::param("clip_x0", format!("must be positive, got {c}")));
            }
        }
        Ok(NoiseSchedule { clip_x0, ..self })
    }

    pub fn beta(&self, s: usize) -> f64 {
        self.beta[s]
    }

    pub fn alpha(&self, s: usize) -> f64 {
        self.alpha[s]
    }

    pub fn alpha_hat(&self, s: usize) -> f64 {
        self.alpha_hat[s]
    }

    /// `sqrt(1 - alpha_hat[s])`.
    pub fn a(&self, s: usize) -> f64 {
        self.a[s]
    }

    pub fn posterior_sigma(&self, s: usize) -> f64 {
        self.posterior_sigma[s]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }

    pub fn alpha_hats(&self) -> &[f64] {
        &self.alpha_hat
    }

    /// Denoising steps visited by the sampler, from `S` down to 1:
    /// `S, S - zeta, ..., zeta, 1` (duplicates removed).
    pub fn sampling_chain(&self) -> Vec<usize> {
        let mut chain: Vec<usize> = (1..=self.steps / self.zeta)
            .rev()
            .map(|k| k * self.zeta)
            .collect();
        if chain.last() != Some(&1) {
            chain.push(1);
        }
        chain
    }

    pub(crate) fn check_step(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.steps {
            return Err(Error::StepRange {
                step: s as i64,
                reason: format!("must lie in 1..={}", self.steps),
            });
        }
        Ok(())
    }

    /// `(sqrt(alpha_hat[to] / alpha_hat[from]), a[to] - ratio * a[from])`,
    /// the two coefficients of a deterministic jump `from -> to`.
    pub fn ddim_coefficients(&self, from: usize, to: usize) -> Result<(f64, f64)> {
        self.check_step(from)?;
        if to >= from {
            return Err(Error::StepRange {
                step: to as i64,
                reason: format!("jump target must be below {from}"),
            });
        }
        let ratio = (self.alpha_hat[to] / self.alpha_hat[from]).sqrt();
        Ok((ratio, self.a[to] - ratio * self.a[from]))
    }
}
