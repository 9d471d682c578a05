//! Forward noising, reverse steps, variance propagation and the sampler.

mod schedule;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

pub use schedule::{
    NoiseSchedule, ScheduleConfig, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS,
    DEFAULT_S_HAT, DEFAULT_ZETA,
};

use crate::denoiser::DenoiserOutput;
use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::tensor::Field;

/// Default number of modes generated per scene.
pub const DEFAULT_MODES: usize = 20;

/// Per-state Gaussian prediction for one generated mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorField {
    pub mean: Field,
    pub var: Field,
}

impl PosteriorField {
    pub fn new(mean: Field, var: Field) -> Result<Self> {
        mean.check_same_shape(&var, "posterior mean/var")?;
        if var.as_slice().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Domain("posterior variance must be nonnegative".into()));
        }
        Ok(PosteriorField { mean, var })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }

    pub fn quantize_f32(&self) -> PosteriorField {
        PosteriorField {
            mean: self.mean.quantize_f32(),
            var: self.var.quantize_f32(),
        }
    }
}

/// K modes generated under one shared prior, optionally annotated with
/// per-mode error probabilities and SADE values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet {
    pub modes: Vec<PosteriorField>,
    pub errors: Option<Vec<f64>>,
    pub sade: Option<Vec<f64>>,
}

impl ModeSet {
    pub fn new(modes: Vec<PosteriorField>) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| Error::param("K", "a mode set needs at least one mode"))?
            .shape();
        if modes.iter().any(|m| m.shape() != first) {
            return Err(Error::dim("modes of one set must share (T, N)"));
        }
        Ok(ModeSet {
            modes,
            errors: None,
            sade: None,
        })
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.modes[0].shape()
    }
}

/// Anything that predicts the injected noise (mean and std) of a latent
/// state given the conditioning.
pub trait NoisePredictor: Sync {
    fn predict(&self, x_s: &Field, s: usize, x_obs: &Field, mask: &Mask) -> Result<DenoiserOutput>;
}

/// `sqrt(alpha_hat[s]) * x0 + sqrt(1 - alpha_hat[s]) * eps`.
pub fn forward_sample(x0: &Field, s: usize, eps: &Field, schedule: &NoiseSchedule) -> Result<Field> {
    schedule.check_step(s)?;
    let (c0, c1) = (schedule.alpha_hat(s).sqrt(), schedule.a(s));
    x0.zip_map(eps, |x, e| c0 * x + c1 * e)
}

/// Stochastic DDPM reverse step with the fixed posterior variance.
pub fn ddpm_step(x_s: &Field, eps_mean: &Field, s: usize, z: &Field, schedule: &NoiseSchedule) -> Result<Field> {
    schedule.check_step(s)?;
    x_s.check_same_shape(eps_mean, "ddpm_step")?;
    x_s.check_same_shape(z, "ddpm_step noise")?;
    let inv_sqrt_alpha = 1.0 / schedule.alpha(s).sqrt();
    let k = schedule.beta(s) / schedule.a(s);
    let sigma = schedule.posterior_sigma(s);
    let mean = x_s.zip_map(eps_mean, |x, e| inv_sqrt_alpha * (x - k * e))?;
    mean.zip_map(z, |m, zi| m + sigma * zi)
}

/// Deterministic jump `from -> to` (`to < from`, `to = 0` allowed).
pub fn ddim_jump(x_s: &Field, eps_mean: &Field, from: usize, to: usize, schedule: &NoiseSchedule) -> Result<Field> {
    let (ratio, coef) = schedule.ddim_coefficients(from, to)?;
    x_s.zip_map(eps_mean, |x, e| ratio * x + coef * e)
}

/// Deterministic jump of the schedule's skip interval `zeta`.
pub fn ddim_step(x_s: &Field, eps_mean: &Field, s: usize, schedule: &NoiseSchedule) -> Result<Field> {
    let to = s.checked_sub(schedule.zeta()).ok_or_else(|| Error::StepRange {
        step: s as i64 - schedule.zeta() as i64,
        reason: "jump lands below step 0".into(),
    })?;
    ddim_jump(x_s, eps_mean, s, to, schedule)
}

/// Variance of the latent after a deterministic jump `from -> to`, treating
/// the latent and the noise prediction as independent. Zero while `from`
/// lies above the schedule's variance start step.
pub fn propagate_variance_jump(
    var_s: &Field,
    eps_std: &Field,
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
) -> Result<Field> {
    var_s.check_same_shape(eps_std, "propagate_variance")?;
    if var_s.as_slice().iter().chain(eps_std.as_slice()).any(|&v| !(v >= 0.0)) {
        return Err(Error::Domain("variance and noise std must be nonnegative".into()));
    }
    let (ratio, coef) = schedule.ddim_coefficients(from, to)?;
    if from > schedule.s_hat() {
        let (t, n) = var_s.shape();
        return Ok(Field::zeros(t, n));
    }
    let (r2, c2) = (ratio * ratio, coef * coef);
    var_s.zip_map(eps_std, |v, sd| r2 * v + c2 * sd * sd)
}

pub fn propagate_variance(var_s: &Field, eps_std: &Field, s: usize, schedule: &NoiseSchedule) -> Result<Field> {
    let to = s.checked_sub(schedule.zeta()).ok_or_else(|| Error::StepRange {
        step: s as i64 - schedule.zeta() as i64,
        reason: "jump lands below step 0".into(),
    })?;
    propagate_variance_jump(var_s, eps_std, s, to, schedule)
}

/// Noise prediction consistent with a clean-state estimate clipped to
/// `[-clip, clip]`; unchanged when the estimate is already inside.
pub fn clip_noise(x_s: &Field, eps_mean: &Field, s: usize, clip: f64, schedule: &NoiseSchedule) -> Result<Field> {
    schedule.check_step(s)?;
    let (sa, a) = (schedule.alpha_hat(s).sqrt(), schedule.a(s));
    x_s.zip_map(eps_mean, |x, e| {
        let x0 = (x - a * e) / sa;
        if x0.abs() <= clip {
            e
        } else {
            (x - sa * x0.clamp(-clip, clip)) / a
        }
    })
}

/// Random stream for mode `index` of a run seeded with `seed`. Streams are
/// independent, so modes can be drawn in any order or in parallel.
pub fn mode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn standard_normal_field<R: rand::Rng + ?Sized>(t: usize, n: usize, rng: &mut R) -> Field {
    Field::from_fn(t, n, |_, _, _| StandardNormal.sample(rng))
}

/// Checks that the conditioning tensors agree and that unobserved entries of
/// `x_obs` are zero.
pub fn check_conditioning(x_obs: &Field, mask: &Mask) -> Result<()> {
    if x_obs.shape() != mask.shape() {
        return Err(Error::dim(format!(
            "observations {:?} vs mask {:?}",
            x_obs.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

/// Zeroes the unobserved states of a ground-truth scene.
pub fn observed_part(x: &Field, mask: &Mask) -> Result<Field> {
    check_conditioning(x, mask)?;
    let (t, n) = x.shape();
    Ok(Field::from_fn(t, n, |ti, ni, c| {
        if mask.observed(ti, ni) {
            x.get(ti, ni)[c]
        } else {
            0.0
        }
    }))
}

fn sample_stream<P: NoisePredictor + ?Sized>(
    denoiser: &P,
    x_obs: &Field,
    mask: &Mask,
    schedule: &NoiseSchedule,
    seed: u64,
    stream: u64,
) -> Result<PosteriorField> {
    check_conditioning(x_obs, mask)?;
    let (t, n) = x_obs.shape();
    let mut rng = mode_rng(seed, stream);
    let mut x = standard_normal_field(t, n, &mut rng);
    let mut var = Field::zeros(t, n);
    let chain = schedule.sampling_chain();
    for w in chain.windows(2) {
        let (s, next) = (w[0], w[1]);
        let out = denoiser.predict(&x, s, x_obs, mask)?;
        var = propagate_variance_jump(&var, &out.eps_std, s, next, schedule)?;
        let eps = match schedule.clip_x0() {
            Some(c) => clip_noise(&x, &out.eps_mean, s, c, schedule)?,
            None => out.eps_mean,
        };
        x = ddim_jump(&x, &eps, s, next, schedule)?;
    }
    // final stochastic-form step taken deterministically; variance frozen
    let out = denoiser.predict(&x, 1, x_obs, mask)?;
    let eps = match schedule.clip_x0() {
        Some(c) => clip_noise(&x, &out.eps_mean, 1, c, schedule)?,
        None => out.eps_mean,
    };
    let mean = ddpm_step(&x, &eps, 1, &Field::zeros(t, n), schedule)?;
    PosteriorField::new(mean, var)
}

/// One generated mode: DDIM down the skip chain with variance propagation,
/// then a noise-free DDPM step at `s = 1`. Observed states are never
/// overwritten; the model reconstructs them.
pub fn sample_mode<P: NoisePredictor + ?Sized>(
    denoiser: &P,
    x_obs: &Field,
    mask: &Mask,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<PosteriorField> {
    sample_stream(denoiser, x_obs, mask, schedule, seed, 0)
}

/// `k` independent modes; mode `i` uses random stream `i` of `seed`.
pub fn generate_modes<P: NoisePredictor + ?Sized>(
    denoiser: &P,
    x_obs: &Field,
    mask: &Mask,
    schedule: &NoiseSchedule,
    k: usize,
    seed: u64,
) -> Result<ModeSet> {
    if k == 0 {
        return Err(Error::param("K", "must be >= 1"));
    }
    let modes = (0..k as u64)
        .into_par_iter()
        .map(|i| sample_stream(denoiser, x_obs, mask, schedule, seed, i))
        .collect::<Result<Vec<_>>>()?;
    ModeSet::new(modes)
}
