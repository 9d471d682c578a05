//! Mode ranking: the AvgUcty baseline and a small network that assigns each
//! of K generated modes an error probability, trained through a soft
//! Spearman correlation against per-mode SADE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{generate_modes, mode_rng, observed_part, ModeSet, NoisePredictor, NoiseSchedule, PosteriorField};
use crate::error::{Error, Result};
use crate::masking::{Mask, MaskSampler};
use crate::metrics::per_mode_sade;
use crate::nn::{sigmoid, Act, Adam, AdamConfig, Grads, Linear, ParamStore, SetTransformerLayer, Tape, TemporalLayer, Var};
use crate::tensor::{Axis, Field, Layout, Mat};

pub const RANK_CHANNELS: usize = 5;

/// Mean of the predicted standard deviation over every state and coordinate.
pub fn avg_ucty(field: &PosteriorField) -> f64 {
    let v = field.var.as_slice();
    v.iter().map(|x| x.sqrt()).sum::<f64>() / v.len() as f64
}

/// AvgUcty restricted to the unobserved states.
pub fn avg_ucty_unobserved(field: &PosteriorField, mask: &Mask) -> Result<f64> {
    let (t, n) = field.shape();
    if mask.shape() != (t, n) {
        return Err(Error::dim("mask does not match the field"));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for ti in 0..t {
        for ni in 0..n {
            if !mask.observed(ti, ni) {
                let v = field.var.get(ti, ni);
                sum += v[0].sqrt() + v[1].sqrt();
                count += 2;
            }
        }
    }
    if count == 0 {
        return Err(Error::param("mask", "no unobserved state"));
    }
    Ok(sum / count as f64)
}

/// Per-mode features `[mean_x, mean_y, var_x, var_y, mask]`, rows ordered
/// `(k, t, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankInput {
    pub k: usize,
    pub t: usize,
    pub n: usize,
    pub data: Vec<f64>,
}

impl RankInput {
    pub fn layout(&self) -> Layout {
        Layout::new(self.k, self.t, self.n)
    }

    pub fn at(&self, k: usize, t: usize, n: usize) -> &[f64] {
        let r = (k * self.t + t) * self.n + n;
        &self.data[r * RANK_CHANNELS..(r + 1) * RANK_CHANNELS]
    }

    fn to_mat(&self, transform: VarTransform) -> Mat {
        let mut m = Mat {
            rows: self.k * self.t * self.n,
            cols: RANK_CHANNELS,
            data: self.data.clone(),
        };
        if transform == VarTransform::Sqrt {
            for r in 0..m.rows {
                let row = m.row_mut(r);
                row[2] = row[2].sqrt();
                row[3] = row[3].sqrt();
            }
        }
        m
    }
}

pub fn build_rank_input(modes: &ModeSet, mask: &Mask) -> Result<RankInput> {
    let (t, n) = modes.shape();
    if modes.modes.iter().any(|m| m.shape() != (t, n)) {
        return Err(Error::dim("modes of one set must share (T, N)"));
    }
    if mask.shape() != (t, n) {
        return Err(Error::dim(format!("mask is {:?}, modes are {:?}", mask.shape(), (t, n))));
    }
    let mut data = Vec::with_capacity(modes.len() * t * n * RANK_CHANNELS);
    for m in &modes.modes {
        for ti in 0..t {
            for ni in 0..n {
                let (mu, v) = (m.mean.get(ti, ni), m.var.get(ti, ni));
                data.extend_from_slice(&[mu[0], mu[1], v[0], v[1], if mask.observed(ti, ni) { 1.0 } else { 0.0 }]);
            }
        }
    }
    Ok(RankInput {
        k: modes.len(),
        t,
        n,
        data,
    })
}

/// Differentiable rank: `1 + sum_{j != i} sigmoid((v_i - v_j) / tau)`.
pub fn soft_rank(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", format!("must be positive, got {tau}")));
    }
    Ok((0..v.len())
        .map(|i| {
            1.0 + (0..v.len())
                .filter(|&j| j != i)
                .map(|j| sigmoid((v[i] - v[j]) / tau))
                .sum::<f64>()
        })
        .collect())
}

/// Vector-Jacobian product of [`soft_rank`]: maps `dL/dR` to `dL/dv`.
pub fn soft_rank_vjp(v: &[f64], tau: f64, grad_r: &[f64]) -> Vec<f64> {
    let k = v.len();
    let mut g = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let s = sigmoid((v[i] - v[j]) / tau);
            let d = s * (1.0 - s) / tau * grad_r[i];
            g[i] += d;
            g[j] -= d;
        }
    }
    g
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Pearson correlation of `soft_rank(e)` and `soft_rank(sade)`.
pub fn spearman_soft(e: &[f64], sade: &[f64], tau: f64) -> Result<f64> {
    Ok(spearman_soft_grad(e, sade, tau)?.0)
}

/// `spearman_soft` and its gradient with respect to `e`.
pub fn spearman_soft_grad(e: &[f64], sade: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    if e.len() != sade.len() {
        return Err(Error::dim(format!("{} scores for {} targets", e.len(), sade.len())));
    }
    if e.len() < 2 {
        return Err(Error::param("K", "ranking needs at least two modes"));
    }
    let a = centered(&soft_rank(e, tau)?);
    let b = centered(&soft_rank(sade, tau)?);
    let (na, nb) = (norm(&a), norm(&b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    let rho = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    // b is centered, so the centering projection leaves this unchanged
    let grad_r: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| y / (na * nb) - rho * x / (na * na))
        .collect();
    Ok((rho, soft_rank_vjp(e, tau, &grad_r)))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|x| x / s).collect()
}

/// Pulls `dL/de` back through the softmax.
pub fn softmax_vjp(e: &[f64], grad_e: &[f64]) -> Vec<f64> {
    let dot: f64 = e.iter().zip(grad_e).map(|(p, g)| p * g).sum();
    e.iter().zip(grad_e).map(|(p, g)| p * (g - dot)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarTransform {
    Raw,
    /// Feed standard deviations instead of variances.
    Sqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankConfig {
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub pre_norm: bool,
    pub var_transform: VarTransform,
    pub tau: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Modes generated per training scene.
    pub modes: usize,
    /// Generate modes once and reuse them every epoch.
    pub cache_modes: bool,
    /// Ablation switches.
    pub temporal: bool,
    pub social: bool,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            width: 64,
            heads: 4,
            ffn: 128,
            pre_norm: true,
            var_transform: VarTransform::Sqrt,
            tau: 0.1,
            lr: 1e-3,
            batch: 32,
            epochs: 20,
            modes: 20,
            cache_modes: true,
            temporal: true,
            social: true,
        }
    }
}

impl RankConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("width", self.width), ("heads", self.heads), ("ffn", self.ffn), ("batch", self.batch)] {
            if v == 0 {
                return Err(Error::param(name, "must be positive"));
            }
        }
        if self.width % self.heads != 0 {
            return Err(Error::param("heads", "width must be divisible by heads"));
        }
        if self.modes < 2 {
            return Err(Error::param("K", "ranking needs at least two modes"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::param("tau", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::param("lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RankNet {
    pub config: RankConfig,
    pub params: ParamStore,
    pub embed: Linear,
    pub temporal: TemporalLayer,
    pub social: SetTransformerLayer,
    pub scenes: SetTransformerLayer,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

impl RankNet {
    pub fn new(config: RankConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let w = config.width;
        let embed = Linear::new(&mut ps, "embed", RANK_CHANNELS, w, &mut rng);
        let temporal = TemporalLayer::new(&mut ps, "temporal", w, config.pre_norm, &mut rng);
        let social = SetTransformerLayer::new(&mut ps, "social", w, config.heads, config.ffn, config.pre_norm, &mut rng);
        let scenes = SetTransformerLayer::new(&mut ps, "scenes", w, config.heads, config.ffn, config.pre_norm, &mut rng);
        let head_hidden = Linear::new(&mut ps, "head_hidden", w, w, &mut rng);
        let head_out = Linear::new(&mut ps, "head_out", w, 1, &mut rng);
        Ok(RankNet {
            config,
            params: ps,
            embed,
            temporal,
            social,
            scenes,
            head_hidden,
            head_out,
        })
    }

    pub fn from_params(config: RankConfig, named: std::collections::BTreeMap<String, Mat>) -> Result<Self> {
        let mut net = RankNet::new(config, 0)?;
        net.params.load_named(named)?;
        Ok(net)
    }

    /// Records the network up to the `K × 1` logits.
    pub fn record<'p>(&'p self, tape: &mut Tape<'p>, input: &RankInput) -> Result<Var> {
        if input.k < 2 {
            return Err(Error::param("K", "ranking needs at least two modes"));
        }
        let layout = input.layout();
        let x = tape.constant(input.to_mat(self.config.var_transform));
        let mut h = self.embed.forward(tape, x);
        if self.config.temporal {
            h = self.temporal.forward(tape, h, layout);
        }
        if self.config.social {
            h = self.social.forward(tape, h, layout, Axis::Agent);
        }
        let pooled = tape.mean_rows(h, input.t * input.n);
        let h = self.scenes.forward(tape, pooled, Layout::new(1, 1, input.k), Axis::Agent);
        let h = self.head_hidden.forward(tape, h);
        let h = tape.act(h, Act::Relu);
        Ok(self.head_out.forward(tape, h))
    }

    pub fn logits(&self, input: &RankInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let out = self.record(&mut tape, input)?;
        Ok(tape.value(out).data.clone())
    }

    /// Loss `-spearman_soft(e, sade)` and its parameter gradient.
    pub fn example_grads(&self, ex: &RankExample) -> Result<(f64, Grads)> {
        let mut tape = Tape::new(&self.params);
        let out = self.record(&mut tape, &ex.input)?;
        let e = softmax(&tape.value(out).data);
        let (rho, grad_e) = spearman_soft_grad(&e, &ex.sade, self.config.tau)?;
        let neg: Vec<f64> = grad_e.iter().map(|g| -g).collect();
        let seed = Mat {
            rows: ex.input.k,
            cols: 1,
            data: softmax_vjp(&e, &neg),
        };
        let mut grads = self.params.zero_grads();
        tape.backward(out, seed, &mut grads);
        Ok((-rho, grads))
    }
}

/// Error probabilities of the K modes: positive and summing to one.
pub fn rank_forward(input: &RankInput, net: &RankNet) -> Result<Vec<f64>> {
    Ok(softmax(&net.logits(input)?))
}

/// A scene prepared for rank training.
#[derive(Debug, Clone)]
pub struct RankExample {
    pub input: RankInput,
    pub sade: Vec<f64>,
}

/// Generates modes for `gt` under `mask` and pairs them with their SADE.
pub fn prepare_example<P: NoisePredictor + ?Sized>(
    denoiser: &P,
    gt: &Field,
    mask: &Mask,
    schedule: &NoiseSchedule,
    k: usize,
    seed: u64,
) -> Result<(ModeSet, RankExample)> {
    let x_obs = observed_part(gt, mask)?;
    let modes = generate_modes(denoiser, &x_obs, mask, schedule, k, seed)?;
    let ex = RankExample {
        input: build_rank_input(&modes, mask)?,
        sade: per_mode_sade(&modes, gt, mask)?,
    };
    Ok((modes, ex))
}

/// Trains on prepared examples, returning the mean loss of each epoch.
/// Scenes whose targets have no rank variance are skipped.
pub fn train_on_examples(net: &mut RankNet, examples: &[RankExample], seed: u64) -> Result<Vec<f64>> {
    let cfg = net.config.clone();
    let mut opt = Adam::new(&net.params, AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut rng = mode_rng(seed, u64::MAX);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (sum, used) = epoch_pass(net, &mut opt, examples, &order, cfg.batch)?;
        if used == 0 {
            return Err(Error::Config("no rank training scene has distinct SADE values".into()));
        }
        let loss = sum / used as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("rank loss in epoch {epoch}")));
        }
        history.push(loss);
    }
    net.params.quantize_f32();
    Ok(history)
}

fn epoch_pass(net: &mut RankNet, opt: &mut Adam, examples: &[RankExample], order: &[usize], batch: usize) -> Result<(f64, usize)> {
    let (mut sum, mut used) = (0.0, 0usize);
    for chunk in order.chunks(batch) {
        let results: Vec<Result<(f64, Grads)>> = chunk.par_iter().map(|&i| net.example_grads(&examples[i])).collect();
        let mut grads = net.params.zero_grads();
        let mut count = 0usize;
        for r in results {
            match r {
                Ok((loss, g)) => {
                    grads.add_assign(&g);
                    sum += loss;
                    count += 1;
                }
                Err(Error::UndefinedCorrelation) => {}
                Err(e) => return Err(e),
            }
        }
        if count == 0 {
            continue;
        }
        grads.scale(1.0 / count as f64);
        if !grads.is_finite() {
            return Err(Error::NonFinite("rank gradient".into()));
        }
        opt.step(&mut net.params, &grads);
        used += count;
    }
    Ok((sum, used))
}

/// Online rank training with a frozen denoiser. With `cache_modes` the modes
/// of each scene are generated once; otherwise every epoch draws fresh
/// masks and modes.
pub fn train_ranknn<P: NoisePredictor + ?Sized>(
    denoiser: Option<&P>,
    scenes: &[Field],
    schedule: &NoiseSchedule,
    sampler: &MaskSampler,
    config: RankConfig,
    seed: u64,
) -> Result<(RankNet, Vec<f64>)> {
    let denoiser = denoiser.ok_or_else(|| Error::Config("rank training needs a trained denoiser".into()))?;
    if scenes.is_empty() {
        return Err(Error::Config("rank training set is empty".into()));
    }
    let mut net = RankNet::new(config.clone(), seed)?;
    let prepare = |epoch: u64| -> Result<Vec<RankExample>> {
        scenes
            .iter()
            .enumerate()
            .map(|(i, gt)| {
                let stream = epoch * scenes.len() as u64 + i as u64;
                let mut rng = mode_rng(seed ^ 0x5a5a, stream);
                let (t, n) = gt.shape();
                let mask = sampler.sample(t, n, &mut rng)?;
                Ok(prepare_example(denoiser, gt, &mask, schedule, config.modes, seed.wrapping_add(stream))?.1)
            })
            .collect()
    };
    let mut history = Vec::with_capacity(config.epochs);
    if config.cache_modes {
        let examples = prepare(0)?;
        history = train_on_examples(&mut net, &examples, seed)?;
    } else {
        let mut opt = Adam::new(&net.params, AdamConfig { lr: config.lr, ..Default::default() });
        let mut rng = mode_rng(seed, u64::MAX);
        for epoch in 0..config.epochs {
            let examples = prepare(epoch as u64)?;
            let mut order: Vec<usize> = (0..examples.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let (sum, used) = epoch_pass(&mut net, &mut opt, &examples, &order, config.batch)?;
            if used == 0 {
                return Err(Error::Config("no rank training scene has distinct SADE values".into()));
            }
            history.push(sum / used as f64);
        }
        net.params.quantize_f32();
    }
    Ok((net, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(t: usize, n: usize, k: f64) -> PosteriorField {
        PosteriorField::new(
            Field::from_fn(t, n, |a, b, c| ((a * 5 + b * 3 + c) as f64 * k).sin()),
            Field::from_fn(t, n, |a, b, c| ((a + b + c) as f64 * k).cos().powi(2) * 0.1),
        )
        .unwrap()
    }

    fn tiny() -> RankConfig {
        RankConfig {
            width: 8,
            heads: 2,
            ffn: 8,
            ..Default::default()
        }
    }

    #[test]
    fn avg_ucty_examples() {
        let z = PosteriorField::new(Field::zeros(2, 2), Field::zeros(2, 2)).unwrap();
        assert_eq!(avg_ucty(&z), 0.0);
        let f = PosteriorField::new(Field::zeros(2, 2), Field::filled(2, 2, 0.04)).unwrap();
        assert!((avg_ucty(&f) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn rank_input_layout() {
        let mask = Mask::from_fn(3, 2, |t, _| t == 0);
        let set = ModeSet::new(vec![field(3, 2, 0.3), field(3, 2, 0.7)]).unwrap();
        let inp = build_rank_input(&set, &mask).unwrap();
        for k in 0..2 {
            for t in 0..3 {
                for n in 0..2 {
                    let row = inp.at(k, t, n);
                    let m = &set.modes[k];
                    assert_eq!(&row[..2], &m.mean.get(t, n));
                    assert_eq!(&row[2..4], &m.var.get(t, n));
                    assert_eq!(row[4], if t == 0 { 1.0 } else { 0.0 });
                }
            }
        }
        assert!(build_rank_input(&set, &Mask::from_fn(2, 2, |_, _| true)).is_err());
    }

    #[test]
    fn soft_rank_examples() {
        let r = soft_rank(&[0.0, 1.0], 1.0).unwrap();
        assert!((r[0] - 1.26894).abs() < 1e-5 && (r[1] - 1.73106).abs() < 1e-5);
        assert_eq!(soft_rank(&[2.0, 2.0], 0.3).unwrap(), vec![1.5, 1.5]);
        assert!(soft_rank(&[1.0], 0.0).is_err());
    }

    #[test]
    fn spearman_soft_limits() {
        let s = [0.4, 0.1, 0.9, 0.3];
        let up: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        let down: Vec<f64> = s.iter().map(|v| -v).collect();
        assert!((spearman_soft(&up, &s, 1e-4).unwrap() - 1.0).abs() < 1e-6);
        assert!((spearman_soft(&down, &s, 1e-4).unwrap() + 1.0).abs() < 1e-6);
        assert!(matches!(spearman_soft(&[1.0, 1.0], &[0.0, 1.0], 0.1), Err(Error::UndefinedCorrelation)));
    }

    #[test]
    fn probabilities_and_variable_k() {
        let net = RankNet::new(tiny(), 3).unwrap();
        let mask = Mask::from_fn(4, 2, |t, _| t < 2);
        for k in [2, 5, 10] {
            let set = ModeSet::new((0..k).map(|i| field(4, 2, 0.1 + i as f64 * 0.13)).collect()).unwrap();
            let e = rank_forward(&build_rank_input(&set, &mask).unwrap(), &net).unwrap();
            assert_eq!(e.len(), k);
            assert!(e.iter().all(|&p| p > 0.0));
            assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let one = ModeSet::new(vec![field(4, 2, 0.2)]).unwrap();
        assert!(rank_forward(&build_rank_input(&one, &mask).unwrap(), &net).is_err());
    }

    #[test]
    fn missing_denoiser_is_config_error() {
        let s = crate::diffusion::ScheduleConfig::default().build().unwrap();
        let r = train_ranknn::<crate::denoiser::Denoiser>(None, &[Field::zeros(2, 2)], &s, &MaskSampler::default(), tiny(), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
