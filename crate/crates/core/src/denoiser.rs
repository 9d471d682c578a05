//! Conditional noise-prediction network and its training objective.
//!
//! The network embeds `[x_obs, x_s]` per state, runs a stack of residual
//! blocks (temporal recurrence per agent, then attention across agents per
//! timestep, then a mask-conditioned gate/filter unit) and reads the summed
//! skip outputs into a noise mean and a sigmoid-bounded noise std.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    check_conditioning, forward_sample, mode_rng, observed_part, standard_normal_field,
    NoisePredictor, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::masking::{linear_fill, Mask, MaskSampler};
use crate::nn::{
    sigmoid, Act, Adam, AdamConfig, Grads, Linear, ParamId, ParamStore, SetTransformerLayer,
    Tape, TemporalLayer, Var,
};
use crate::tensor::{Axis, Field, Layout, Mat};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Every state contributes, so observed states are reconstructed too.
    All,
    Unobserved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn: usize,
    pub step_emb: usize,
    pub agent_emb: usize,
    /// Rows in the agent embedding table; scenes use a prefix.
    pub max_agents: usize,
    pub pre_norm: bool,
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub loss_scope: LossScope,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Fill unobserved states of the observation channel by linear
    /// interpolation of the observed ones instead of zeros.
    pub interp_cond: bool,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine_lr: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            channels: 256,
            blocks: 2,
            heads: 8,
            ffn: 1024,
            step_emb: 128,
            agent_emb: 64,
            max_agents: 32,
            pre_norm: true,
            lambda: 0.01,
            lr: 1e-3,
            batch: 16,
            epochs: 100,
            loss_scope: LossScope::All,
            grad_clip: 0.0,
            interp_cond: false,
            cosine_lr: false,
        }
    }
}

impl DenoiserConfig {
    /// Small network that trains on a single CPU core in minutes.
    pub fn desk() -> Self {
        DenoiserConfig {
            channels: 32,
            heads: 4,
            ffn: 64,
            step_emb: 32,
            agent_emb: 16,
            interp_cond: true,
            cosine_lr: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("step_emb", self.step_emb),
            ("agent_emb", self.agent_emb),
            ("max_agents", self.max_agents),
            ("batch", self.batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(name, "must be positive"));
            }
        }
        if self.channels % self.heads != 0 {
            return Err(Error::param(
                "heads",
                format!("channels ({}) must be divisible by heads ({})", self.channels, self.heads),
            ));
        }
        if self.step_emb % 2 != 0 {
            return Err(Error::param("step_emb", "must be even"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::param("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::param("lr", "must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::param("grad_clip", "must be >= 0"));
        }
        Ok(())
    }
}

/// Predicted noise distribution for every state.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_mean: Field,
    /// Entrywise in `(0, 1)`.
    pub eps_std: Field,
}

/// Intermediate tensors of one forward pass, as `(T·N) × width` matrices.
#[derive(Debug, Clone)]
pub struct DenoiserActivations {
    pub j: Mat,
    pub j_skip: Vec<Mat>,
    pub m_emb: Mat,
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualBlock {
    pub step_proj: Linear,
    pub temporal: TemporalLayer,
    pub social: SetTransformerLayer,
    pub mid_proj: Linear,
    pub cond_proj: Linear,
    pub out_proj: Linear,
    pub channels: usize,
}

impl ResidualBlock {
    fn new<R: Rng>(ps: &mut ParamStore, name: &str, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        ResidualBlock {
            step_proj: Linear::new(ps, &format!("{name}.step_proj"), cfg.step_emb, c, rng),
            temporal: TemporalLayer::new(ps, &format!("{name}.temporal"), c, cfg.pre_norm, rng),
            social: SetTransformerLayer::new(
                ps,
                &format!("{name}.social"),
                c,
                cfg.heads,
                cfg.ffn,
                cfg.pre_norm,
                rng,
            ),
            mid_proj: Linear::new(ps, &format!("{name}.mid_proj"), c, 2 * c, rng),
            cond_proj: Linear::new(ps, &format!("{name}.cond_proj"), 1 + cfg.agent_emb, 2 * c, rng),
            out_proj: Linear::new(ps, &format!("{name}.out_proj"), c, 2 * c, rng),
            channels: c,
        }
    }

    /// `(J_next, J_skip)` for input `j`, a `1 × step_emb` step embedding and
    /// the per-state mask/agent embedding.
    pub fn forward(&self, tape: &mut Tape, j: Var, s_emb: Var, m_emb: Var, layout: Layout) -> (Var, Var) {
        let c = self.channels;
        let p = self.step_proj.forward(tape, s_emb);
        let p = tape.repeat_rows(p, layout.rows());
        let h = tape.add(j, p);
        let h = self.temporal.forward(tape, h, layout);
        let h = self.social.forward(tape, h, layout, Axis::Agent);
        let y = self.mid_proj.forward(tape, h);
        let cond = self.cond_proj.forward(tape, m_emb);
        let y = tape.add(y, cond);
        let gate = tape.slice_cols(y, 0, c);
        let filter = tape.slice_cols(y, c, c);
        let gate = tape.act(gate, Act::Sigmoid);
        let filter = tape.act(filter, Act::Tanh);
        let z = tape.mul(gate, filter);
        let o = self.out_proj.forward(tape, z);
        let residual = tape.slice_cols(o, 0, c);
        let skip = tape.slice_cols(o, c, c);
        (tape.add(j, residual), skip)
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    pub input: Linear,
    pub step_in: Linear,
    pub agent_table: ParamId,
    pub blocks: Vec<ResidualBlock>,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

/// Handles into a tape holding one forward pass.
pub struct DenoiserGraph {
    pub raw_out: Var,
    pub j: Var,
    pub j_skip: Vec<Var>,
    pub m_emb: Var,
    pub layout: Layout,
}

/// Sinusoidal features of the step index.
pub fn step_features(s: usize, width: usize) -> Mat {
    let half = width / 2;
    let mut m = Mat::zeros(1, width);
    for i in 0..half {
        let freq = if half > 1 {
            10_000f64.powf(-(i as f64) / (half - 1) as f64)
        } else {
            1.0
        };
        let arg = s as f64 * freq;
        m.data[i] = arg.sin();
        m.data[half + i] = arg.cos();
    }
    m
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let c = config.channels;
        let input = Linear::new(&mut ps, "input", 4, c, &mut rng);
        let step_in = Linear::new(&mut ps, "step_in", config.step_emb, config.step_emb, &mut rng);
        let agent_table = ps.add_uniform("agent_table", config.max_agents, config.agent_emb, 1, &mut rng);
        let blocks = (0..config.blocks)
            .map(|b| ResidualBlock::new(&mut ps, &format!("block{b}"), &config, &mut rng))
            .collect();
        let head_hidden = Linear::new(&mut ps, "head_hidden", c, c, &mut rng);
        let head_out = Linear::new(&mut ps, "head_out", c, 4, &mut rng);
        // zero read-out: eps_mean starts at 0 and eps_std at sigmoid(0) = 0.5
        ps.get_mut(head_out.w).data.iter_mut().for_each(|v| *v = 0.0);
        ps.get_mut(head_out.b).data.iter_mut().for_each(|v| *v = 0.0);
        Ok(Denoiser {
            config,
            params: ps,
            input,
            step_in,
            agent_table,
            blocks,
            head_hidden,
            head_out,
        })
    }

    /// Rebuilds the network for `config` and loads `params` into it.
    pub fn from_params(config: DenoiserConfig, named: std::collections::BTreeMap<String, Mat>) -> Result<Self> {
        let mut model = Denoiser::new(config, 0)?;
        model.params.load_named(named)?;
        Ok(model)
    }

    fn check_inputs(&self, x_s: &Field, x_obs: &Field, mask: &Mask) -> Result<()> {
        x_s.check_same_shape(x_obs, "latent vs observations")?;
        check_conditioning(x_obs, mask)?;
        if x_s.agents() > self.config.max_agents {
            return Err(Error::dim(format!(
                "{} agents exceed the embedding table ({})",
                x_s.agents(),
                self.config.max_agents
            )));
        }
        Ok(())
    }

    /// Records a forward pass; `raw_out` is `(T·N) × 4` with the std channels
    /// before the sigmoid.
    pub fn record<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        x_s: &Field,
        s: usize,
        x_obs: &Field,
        mask: &Mask,
    ) -> Result<DenoiserGraph> {
        self.check_inputs(x_s, x_obs, mask)?;
        let (t, n) = x_s.shape();
        let layout = Layout::new(1, t, n);
        let rows = layout.rows();

        let filled;
        let x_obs = if self.config.interp_cond {
            filled = linear_fill(x_obs, mask)?;
            &filled
        } else {
            x_obs
        };
        let mut inp = Mat::zeros(rows, 4);
        for r in 0..rows {
            let (ti, ni) = (r / n, r % n);
            let o = x_obs.get(ti, ni);
            let l = x_s.get(ti, ni);
            inp.row_mut(r).copy_from_slice(&[o[0], o[1], l[0], l[1]]);
        }
        let inp = tape.constant(inp);
        let j = self.input.forward(tape, inp);
        let j = tape.act(j, Act::Relu);

        let sf = tape.constant(step_features(s, self.config.step_emb));
        let s_emb = self.step_in.forward(tape, sf);
        let s_emb = tape.act(s_emb, Act::Silu);

        let mcol = tape.constant(Mat {
            rows,
            cols: 1,
            data: mask.to_f64(),
        });
        let agents = tape.gather(self.agent_table, (0..rows).map(|r| r % n).collect());
        let m_emb = tape.concat_cols(mcol, agents);

        let j0 = j;
        let mut j = j;
        let mut skips = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, skip) = block.forward(tape, j, s_emb, m_emb, layout);
            j = next;
            skips.push(skip);
        }
        let mut acc = skips[0];
        for &sk in &skips[1..] {
            acc = tape.add(acc, sk);
        }
        let h = self.head_hidden.forward(tape, acc);
        let h = tape.act(h, Act::Relu);
        let raw_out = self.head_out.forward(tape, h);
        Ok(DenoiserGraph {
            raw_out,
            j: j0,
            j_skip: skips,
            m_emb,
            layout,
        })
    }

    pub fn denoise(&self, x_s: &Field, s: usize, x_obs: &Field, mask: &Mask) -> Result<DenoiserOutput> {
        let mut tape = Tape::new(&self.params);
        let g = self.record(&mut tape, x_s, s, x_obs, mask)?;
        Ok(split_output(tape.value(g.raw_out), x_s.shape()))
    }

    pub fn activations(&self, x_s: &Field, s: usize, x_obs: &Field, mask: &Mask) -> Result<DenoiserActivations> {
        let mut tape = Tape::new(&self.params);
        let g = self.record(&mut tape, x_s, s, x_obs, mask)?;
        Ok(DenoiserActivations {
            j: tape.value(g.j).clone(),
            j_skip: g.j_skip.iter().map(|&v| tape.value(v).clone()).collect(),
            m_emb: tape.value(g.m_emb).clone(),
        })
    }

    /// Loss of one training example and its parameter gradient.
    pub fn example_grads(&self, ex: &TrainExample, lambda: f64, scope: LossScope) -> Result<(LossBreakdown, Grads)> {
        let mut tape = Tape::new(&self.params);
        let g = self.record(&mut tape, &ex.x_s, ex.s, &ex.x_obs, &ex.mask)?;
        let weights = match scope {
            LossScope::All => None,
            LossScope::Unobserved => Some(&ex.mask),
        };
        let (loss, seed) = loss_and_seed(&ex.eps, tape.value(g.raw_out), lambda, weights)?;
        let mut grads = self.params.zero_grads();
        tape.backward(g.raw_out, seed, &mut grads);
        Ok((loss, grads))
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x_s: &Field, s: usize, x_obs: &Field, mask: &Mask) -> Result<DenoiserOutput> {
        self.denoise(x_s, s, x_obs, mask)
    }
}

/// Splits a raw `(T·N) × 4` head output into noise mean and std.
pub fn split_output(raw: &Mat, shape: (usize, usize)) -> DenoiserOutput {
    let (t, n) = shape;
    let mut mean = Vec::with_capacity(t * n * 2);
    let mut std = Vec::with_capacity(t * n * 2);
    for r in 0..raw.rows {
        let row = raw.row(r);
        mean.extend_from_slice(&row[..2]);
        std.push(sigmoid(row[2]));
        std.push(sigmoid(row[3]));
    }
    DenoiserOutput {
        eps_mean: Field::from_vec(t, n, mean).expect("head output shape"),
        eps_std: Field::from_vec(t, n, std).expect("head output shape"),
    }
}

/// Mean of `(eps - eps_mean)^2` over all entries.
pub fn loss_simple(eps: &Field, out: &DenoiserOutput) -> Result<f64> {
    eps.check_same_shape(&out.eps_mean, "loss_simple")?;
    let n = eps.as_slice().len() as f64;
    Ok(eps
        .as_slice()
        .iter()
        .zip(out.eps_mean.as_slice())
        .map(|(e, m)| (e - m) * (e - m))
        .sum::<f64>()
        / n)
}

/// Gaussian negative log-likelihood of the true noise under the predicted
/// per-entry distribution, averaged over entries.
pub fn loss_nll(eps: &Field, out: &DenoiserOutput) -> Result<f64> {
    eps.check_same_shape(&out.eps_mean, "loss_nll")?;
    eps.check_same_shape(&out.eps_std, "loss_nll")?;
    let mut acc = 0.0;
    for ((e, m), s) in eps
        .as_slice()
        .iter()
        .zip(out.eps_mean.as_slice())
        .zip(out.eps_std.as_slice())
    {
        if !(*s > 0.0) {
            return Err(Error::Domain(format!("noise std must be positive, got {s}")));
        }
        let r = e - m;
        acc += LN_SQRT_2PI + s.ln() + r * r / (2.0 * s * s);
    }
    Ok(acc / eps.as_slice().len() as f64)
}

pub fn loss_total(eps: &Field, out: &DenoiserOutput, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::param("lambda", "must be >= 0"));
    }
    Ok(loss_simple(eps, out)? + lambda * loss_nll(eps, out)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub simple: f64,
    pub nll: f64,
    pub total: f64,
}

/// Total loss and its gradient with respect to the raw head output. The NLL
/// term treats the predicted mean as a constant, so the mean channels only
/// receive the gradient of the squared error. With `weights`, only
/// unobserved states contribute.
pub fn loss_and_seed(eps: &Field, raw: &Mat, lambda: f64, weights: Option<&Mask>) -> Result<(LossBreakdown, Mat)> {
    let (t, n) = eps.shape();
    if raw.rows != t * n || raw.cols != 4 {
        return Err(Error::dim("raw output does not match the noise shape"));
    }
    let active = |r: usize| weights.map_or(true, |m| !m.observed(r / n, r % n));
    let count = (0..raw.rows).filter(|&r| active(r)).count() * 2;
    if count == 0 {
        return Err(Error::param("mask", "loss scope selects no state"));
    }
    let inv = 1.0 / count as f64;
    let mut seed = Mat::zeros(raw.rows, 4);
    let (mut simple, mut nll) = (0.0, 0.0);
    for r in 0..raw.rows {
        if !active(r) {
            continue;
        }
        let e = eps.get(r / n, r % n);
        let row = raw.row(r);
        for c in 0..2 {
            let res = e[c] - row[c];
            simple += res * res;
            *seed.at_mut(r, c) = -2.0 * res * inv;
            let sd = sigmoid(row[2 + c]);
            nll += LN_SQRT_2PI + sd.ln() + res * res / (2.0 * sd * sd);
            let dsd = 1.0 / sd - res * res / (sd * sd * sd);
            *seed.at_mut(r, 2 + c) = lambda * dsd * sd * (1.0 - sd) * inv;
        }
    }
    let (simple, nll) = (simple * inv, nll * inv);
    Ok((
        LossBreakdown {
            simple,
            nll,
            total: simple + lambda * nll,
        },
        seed,
    ))
}

/// One noised training example.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub x_s: Field,
    pub s: usize,
    pub eps: Field,
    pub x_obs: Field,
    pub mask: Mask,
}

/// Draws the step, noise and mask for one scene.
pub fn make_example<R: Rng>(
    x0: &Field,
    schedule: &NoiseSchedule,
    sampler: &MaskSampler,
    rng: &mut R,
) -> Result<TrainExample> {
    let (t, n) = x0.shape();
    let s = rng.gen_range(1..=schedule.steps());
    let eps = standard_normal_field(t, n, rng);
    let x_s = forward_sample(x0, s, &eps, schedule)?;
    let mask = sampler.sample(t, n, rng)?;
    let x_obs = observed_part(x0, &mask)?;
    Ok(TrainExample {
        x_s,
        s,
        eps,
        x_obs,
        mask,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// Examples per parallel chunk; gradients are reduced in index order, so the
/// result does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// Minimizes the total loss over `data` (scenes in model units). Returns the
/// mean training loss of every epoch. Deterministic for a given seed.
pub fn train(
    model: &mut Denoiser,
    data: &[Field],
    schedule: &NoiseSchedule,
    sampler: &MaskSampler,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let cfg = model.config.clone();
    cfg.validate()?;
    let mut opt = Adam::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let mut shuffle_rng = mode_rng(seed, u64::MAX);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut counter: u64 = 0;
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        let batches = data.len().div_ceil(cfg.batch);
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            if cfg.cosine_lr {
                let progress = (epoch * batches + b) as f64 / (cfg.epochs * batches) as f64;
                opt.set_lr(0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos()));
            }
            let examples = batch
                .iter()
                .map(|&i| {
                    let mut rng = mode_rng(seed, counter);
                    counter += 1;
                    make_example(&data[i], schedule, sampler, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = model.params.zero_grads();
            for chunk in examples.chunks(GRAD_CHUNK) {
                let results = chunk
                    .par_iter()
                    .map(|ex| model.example_grads(ex, cfg.lambda, cfg.loss_scope))
                    .collect::<Result<Vec<_>>>()?;
                for (loss, g) in results {
                    grads.add_assign(&g);
                    sum.simple += loss.simple;
                    sum.nll += loss.nll;
                    sum.total += loss.total;
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!("gradient in epoch {epoch}")));
            }
            if cfg.grad_clip > 0.0 {
                let norm = grads.norm();
                if norm > cfg.grad_clip {
                    grads.scale(cfg.grad_clip / norm);
                }
            }
            opt.step(&mut model.params, &grads);
        }
        let k = data.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: LossBreakdown {
                simple: sum.simple / k,
                nll: sum.nll / k,
                total: sum.total / k,
            },
        };
        if !stats.loss.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss in epoch {epoch}")));
        }
        on_epoch(&stats);
        history.push(stats);
    }
    model.params.quantize_f32();
    Ok(history)
}
