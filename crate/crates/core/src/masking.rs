//! Conditioning masks for forecasting, imputation and unseen-agent tasks.
//!
//! A mask is a `T × N` grid; 1 marks an observed state, 0 a state to infer.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Field;

/// Redraw budget for randomly generated masks that come out degenerate.
pub const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    t: usize,
    n: usize,
    m: Vec<bool>,
}

impl Mask {
    /// Builds a mask and checks the completion invariants (at least one
    /// observed and one unobserved state).
    pub fn new(t: usize, n: usize, m: Vec<bool>) -> Result<Self> {
        let mask = Self::new_unchecked(t, n, m)?;
        mask.validate()?;
        Ok(mask)
    }

    /// Builds a mask without the completion invariants (e.g. an all-observed
    /// grid used for reconstruction-only evaluation).
    pub fn new_unchecked(t: usize, n: usize, m: Vec<bool>) -> Result<Self> {
        if m.len() != t * n {
            return Err(Error::dim(format!("{} mask entries for a {t}x{n} grid", m.len())));
        }
        Ok(Mask { t, n, m })
    }

    pub fn from_fn(t: usize, n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Vec::with_capacity(t * n);
        for ti in 0..t {
            for ni in 0..n {
                m.push(f(ti, ni));
            }
        }
        Mask { t, n, m }
    }

    pub fn validate(&self) -> Result<()> {
        let observed = self.observed_count();
        if observed == 0 {
            return Err(Error::param("mask", "no observed state"));
        }
        if observed == self.m.len() {
            return Err(Error::param("mask", "no unobserved state"));
        }
        Ok(())
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn agents(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.t, self.n)
    }

    #[inline]
    pub fn observed(&self, t: usize, n: usize) -> bool {
        self.m[t * self.n + n]
    }

    pub fn set(&mut self, t: usize, n: usize, observed: bool) {
        self.m[t * self.n + n] = observed;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.m
    }

    pub fn observed_count(&self) -> usize {
        self.m.iter().filter(|&&b| b).count()
    }

    pub fn unobserved_count(&self) -> usize {
        self.m.len() - self.observed_count()
    }

    /// Mask values as 0/1 floats in `(t, n)` order.
    pub fn to_f64(&self) -> Vec<f64> {
        self.m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

fn check_grid(t: usize, n: usize) -> Result<()> {
    if t < 2 || n < 1 {
        return Err(Error::param("shape", format!("need T >= 2 and N >= 1, got {t}x{n}")));
    }
    Ok(())
}

/// Observe the first `observed_prefix` frames of every agent.
pub fn forecast_mask(t: usize, n: usize, observed_prefix: usize) -> Result<Mask> {
    check_grid(t, n)?;
    if observed_prefix < 1 || observed_prefix >= t {
        return Err(Error::param(
            "observed_prefix",
            format!("must lie in 1..{t}, got {observed_prefix}"),
        ));
    }
    Ok(Mask::from_fn(t, n, |ti, _| ti < observed_prefix))
}

/// One contiguous hidden run of `gap_len` frames per agent, placed uniformly
/// so that the first and last frames stay observed.
pub fn gap_mask<R: Rng + ?Sized>(t: usize, n: usize, gap_len: usize, rng: &mut R) -> Result<Mask> {
    check_grid(t, n)?;
    if gap_len < 1 || gap_len + 2 > t {
        return Err(Error::param("gap_len", format!("must lie in 1..={}, got {gap_len}", t.saturating_sub(2))));
    }
    let mut mask = Mask::from_fn(t, n, |_, _| true);
    // valid starts: 1..=t-1-gap_len (0-based), keeping frame 0 and t-1
    let positions = t - 1 - gap_len;
    for ni in 0..n {
        let start = 1 + rng.gen_range(0..positions);
        for ti in start..start + gap_len {
            mask.set(ti, ni, false);
        }
    }
    Ok(mask)
}

/// Hide `hidden_agents` agents, chosen uniformly, for the whole scene.
pub fn agent_mask<R: Rng + ?Sized>(t: usize, n: usize, hidden_agents: usize, rng: &mut R) -> Result<Mask> {
    check_grid(t, n)?;
    if hidden_agents < 1 || hidden_agents >= n {
        return Err(Error::param("hidden_agents", format!("must lie in 1..{n}, got {hidden_agents}")));
    }
    let hidden = sample(rng, n, hidden_agents).into_vec();
    let mut mask = Mask::from_fn(t, n, |_, _| true);
    for ni in hidden {
        for ti in 0..t {
            mask.set(ti, ni, false);
        }
    }
    Ok(mask)
}

/// Hide each state independently with probability `missing_ratio`, redrawing
/// degenerate (all observed / all hidden) grids.
pub fn random_state_mask<R: Rng + ?Sized>(t: usize, n: usize, missing_ratio: f64, rng: &mut R) -> Result<Mask> {
    check_grid(t, n)?;
    if !(missing_ratio > 0.0 && missing_ratio < 1.0) {
        return Err(Error::param("missing_ratio", format!("must lie in (0, 1), got {missing_ratio}")));
    }
    for _ in 0..MAX_REDRAWS {
        let m: Vec<bool> = (0..t * n).map(|_| !rng.gen_bool(missing_ratio)).collect();
        let mask = Mask { t, n, m };
        if mask.validate().is_ok() {
            return Ok(mask);
        }
    }
    Err(Error::param(
        "missing_ratio",
        format!("no valid mask after {MAX_REDRAWS} draws at ratio {missing_ratio}"),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Forecast,
    Gap,
    Agent,
    RandomState,
    Mixed,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 5] = [
        MaskStrategy::Forecast,
        MaskStrategy::Gap,
        MaskStrategy::Agent,
        MaskStrategy::RandomState,
        MaskStrategy::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Forecast => "forecast",
            MaskStrategy::Gap => "gap",
            MaskStrategy::Agent => "agent",
            MaskStrategy::RandomState => "random_state",
            MaskStrategy::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Strategy plus its parameters. Sizes of zero select defaults derived from
/// the scene geometry (see [`MaskSampler::resolve`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSampler {
    pub strategy: MaskStrategy,
    pub observed_prefix: usize,
    pub gap_len: usize,
    pub hidden_agents: usize,
    pub missing_ratio: f64,
}

impl Default for MaskSampler {
    fn default() -> Self {
        MaskSampler {
            strategy: MaskStrategy::Mixed,
            observed_prefix: 0,
            gap_len: 0,
            hidden_agents: 0,
            missing_ratio: 0.3,
        }
    }
}

impl MaskSampler {
    pub fn new(strategy: MaskStrategy) -> Self {
        MaskSampler {
            strategy,
            ..Default::default()
        }
    }

    /// Fills zero-valued sizes with geometry defaults: a one-third observed
    /// prefix, a one-third gap, and roughly a third of the agents hidden.
    pub fn resolve(&self, t: usize, n: usize) -> MaskSampler {
        let mut out = *self;
        if out.observed_prefix == 0 {
            out.observed_prefix = (t / 3).max(1);
        }
        if out.gap_len == 0 {
            out.gap_len = (t / 3).clamp(1, t.saturating_sub(2).max(1));
        }
        if out.hidden_agents == 0 {
            out.hidden_agents = (n / 3).clamp(1, n.saturating_sub(1).max(1));
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, t: usize, n: usize, rng: &mut R) -> Result<Mask> {
        let p = self.resolve(t, n);
        match p.strategy {
            MaskStrategy::Forecast => forecast_mask(t, n, p.observed_prefix),
            MaskStrategy::Gap => gap_mask(t, n, p.gap_len, rng),
            MaskStrategy::Agent => agent_mask(t, n, p.hidden_agents, rng),
            MaskStrategy::RandomState => random_state_mask(t, n, p.missing_ratio, rng),
            MaskStrategy::Mixed => mixed_mask_with(t, n, &p, rng).map(|(m, _)| m),
        }
    }
}

/// Uniform choice among forecast, gap, agent and random-state masks with
/// default parameters; returns the mask and the chosen strategy.
pub fn mixed_mask<R: Rng + ?Sized>(t: usize, n: usize, rng: &mut R) -> Result<(Mask, MaskStrategy)> {
    let p = MaskSampler::default().resolve(t, n);
    mixed_mask_with(t, n, &p, rng)
}

fn mixed_mask_with<R: Rng + ?Sized>(
    t: usize,
    n: usize,
    p: &MaskSampler,
    rng: &mut R,
) -> Result<(Mask, MaskStrategy)> {
    const CHOICES: [MaskStrategy; 4] = [
        MaskStrategy::Forecast,
        MaskStrategy::Gap,
        MaskStrategy::Agent,
        MaskStrategy::RandomState,
    ];
    let mut strategy = CHOICES[rng.gen_range(0..CHOICES.len())];
    // a single agent cannot be hidden while another stays visible
    if strategy == MaskStrategy::Agent && n < 2 {
        strategy = MaskStrategy::Gap;
    }
    let sub = MaskSampler { strategy, ..*p };
    Ok((sub.sample(t, n, rng)?, strategy))
}

/// Copies observed states and fills each unobserved one by linear
/// interpolation in time between the agent's nearest observed states
/// (nearest observed state at the ends; zero for an agent never observed).
pub fn linear_fill(x: &Field, mask: &Mask) -> Result<Field> {
    let (t, n) = mask.shape();
    if x.shape() != (t, n) {
        return Err(Error::Dimension(format!("field {:?} vs mask {:?}", x.shape(), (t, n))));
    }
    let mut out = x.clone();
    for ni in 0..n {
        let obs: Vec<usize> = (0..t).filter(|&ti| mask.observed(ti, ni)).collect();
        for ti in 0..t {
            if mask.observed(ti, ni) {
                continue;
            }
            let next = obs.partition_point(|&j| j < ti);
            let v = match (next.checked_sub(1).map(|i| obs[i]), obs.get(next)) {
                (Some(a), Some(&b)) => {
                    let w = (ti - a) as f64 / (b - a) as f64;
                    let (pa, pb) = (x.get(a, ni), x.get(b, ni));
                    [pa[0] + w * (pb[0] - pa[0]), pa[1] + w * (pb[1] - pa[1])]
                }
                (Some(a), None) => x.get(a, ni),
                (None, Some(&b)) => x.get(b, ni),
                (None, None) => [0.0, 0.0],
            };
            out.set(ti, ni, v);
        }
    }
    Ok(out)
}
