//! Run configuration: a flat TOML file; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use u2traj::data::{Bounds, DynamicsParams};
use u2traj::denoiser::{DenoiserConfig, LossScope};
use u2traj::diffusion::{NoiseSchedule, ScheduleConfig};
use u2traj::masking::{MaskSampler, MaskStrategy};
use u2traj::metrics::Coverage;
use u2traj::ranknn::{RankConfig, VarTransform};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // schedule
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub zeta: usize,
    pub s_hat: usize,
    /// Clean-state clip bound while sampling; 0 disables it.
    pub clip_x0: f64,

    // denoiser
    pub lambda: f64,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn: usize,
    pub step_emb: usize,
    pub agent_emb: usize,
    pub max_agents: usize,
    pub pre_norm: bool,
    pub loss_scope: LossScope,
    pub grad_clip: f64,
    pub interp_cond: bool,
    pub cosine_lr: bool,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,

    // sampling and ranking
    #[serde(rename = "K")]
    pub k: usize,
    pub tau: f64,
    pub rank_width: usize,
    pub rank_heads: usize,
    pub rank_ffn: usize,
    pub rank_lr: f64,
    pub rank_batch: usize,
    pub rank_epochs: usize,
    /// Training scenes used for rank training (0 = all).
    pub rank_scenes: usize,
    pub rank_var_transform: VarTransform,
    pub rank_cache_modes: bool,

    pub seed: u64,

    // masks
    pub mask_strategy: String,
    pub observed_prefix: usize,
    pub gap_len: usize,
    pub hidden_agents: usize,
    pub missing_ratio: f64,

    // data
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub dt: f64,
    pub court_x: [f64; 2],
    pub court_y: [f64; 2],
    pub v_max: f64,
    pub pass_prob: f64,

    // evaluation
    pub coverage: Coverage,
    pub sweep_s_hat: Vec<usize>,
    /// Test scenes used by the sweep (0 = all).
    pub sweep_scenes: usize,

    // paths, relative to the config file
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub rank_checkpoint: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        let d = DenoiserConfig::default();
        let r = RankConfig::default();
        let dynamics = DynamicsParams::default();
        RunConfig {
            steps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            zeta: s.zeta,
            s_hat: s.s_hat,
            clip_x0: s.clip_x0.unwrap_or(0.0),
            lambda: d.lambda,
            channels: d.channels,
            blocks: d.blocks,
            heads: d.heads,
            ffn: d.ffn,
            step_emb: d.step_emb,
            agent_emb: d.agent_emb,
            max_agents: d.max_agents,
            pre_norm: d.pre_norm,
            loss_scope: d.loss_scope,
            grad_clip: d.grad_clip,
            interp_cond: d.interp_cond,
            cosine_lr: d.cosine_lr,
            lr: d.lr,
            batch: d.batch,
            epochs: d.epochs,
            k: r.modes,
            tau: r.tau,
            rank_width: r.width,
            rank_heads: r.heads,
            rank_ffn: r.ffn,
            rank_lr: r.lr,
            rank_batch: r.batch,
            rank_epochs: r.epochs,
            rank_scenes: 0,
            rank_var_transform: r.var_transform,
            rank_cache_modes: r.cache_modes,
            seed: 0,
            mask_strategy: "mixed".into(),
            observed_prefix: 0,
            gap_len: 0,
            hidden_agents: 0,
            missing_ratio: 0.3,
            t: 50,
            n: 11,
            train_scenes: 1000,
            test_scenes: 200,
            dt: dynamics.dt,
            court_x: dynamics.bounds.x,
            court_y: dynamics.bounds.y,
            v_max: dynamics.v_max,
            pass_prob: dynamics.pass_prob,
            coverage: Coverage::PerCoordinate,
            sweep_s_hat: vec![50, 40, 30, 20, 10],
            sweep_scenes: 0,
            data_dir: "data".into(),
            out_dir: "out".into(),
            checkpoint: "out/denoiser.ckpt".into(),
            rank_checkpoint: "out/rank.ckpt".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads and validates a config; relative paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data_dir, &mut cfg.out_dir, &mut cfg.checkpoint, &mut cfg.rank_checkpoint] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.schedule()?;
        self.denoiser()?.validate()?;
        self.rank()?.validate()?;
        self.dynamics().validate()?;
        let sampler = self.sampler()?;
        if self.t < 2 || self.n < 2 {
            return Err(CliError::Config(format!("T and N must be >= 2, got T={} N={}", self.t, self.n)));
        }
        if self.n > self.max_agents {
            return Err(CliError::Config(format!("N = {} exceeds max_agents = {}", self.n, self.max_agents)));
        }
        if !(0.0..1.0).contains(&sampler.missing_ratio) || sampler.missing_ratio <= 0.0 {
            return Err(CliError::Config(format!("missing_ratio must lie in (0, 1), got {}", self.missing_ratio)));
        }
        let r = sampler.resolve(self.t, self.n);
        if r.observed_prefix >= self.t {
            return Err(CliError::Config(format!("observed_prefix must be < T, got {}", r.observed_prefix)));
        }
        if r.gap_len + 2 > self.t {
            return Err(CliError::Config(format!("gap_len must be <= T - 2, got {}", r.gap_len)));
        }
        if r.hidden_agents >= self.n {
            return Err(CliError::Config(format!("hidden_agents must be < N, got {}", r.hidden_agents)));
        }
        if let Some(&bad) = self.sweep_s_hat.iter().find(|&&s| s > self.steps) {
            return Err(CliError::Config(format!("sweep_s_hat entry {bad} exceeds steps = {}", self.steps)));
        }
        if self.train_scenes == 0 {
            return Err(CliError::Config("train_scenes must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        Ok(ScheduleConfig {
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            zeta: self.zeta,
            s_hat: self.s_hat,
            clip_x0: (self.clip_x0 > 0.0).then_some(self.clip_x0),
        }
        .build()?)
    }

    pub fn denoiser(&self) -> Result<DenoiserConfig, CliError> {
        Ok(DenoiserConfig {
            channels: self.channels,
            blocks: self.blocks,
            heads: self.heads,
            ffn: self.ffn,
            step_emb: self.step_emb,
            agent_emb: self.agent_emb,
            max_agents: self.max_agents,
            pre_norm: self.pre_norm,
            lambda: self.lambda,
            lr: self.lr,
            batch: self.batch,
            epochs: self.epochs,
            loss_scope: self.loss_scope,
            grad_clip: self.grad_clip,
            interp_cond: self.interp_cond,
            cosine_lr: self.cosine_lr,
        })
    }

    pub fn rank(&self) -> Result<RankConfig, CliError> {
        Ok(RankConfig {
            width: self.rank_width,
            heads: self.rank_heads,
            ffn: self.rank_ffn,
            var_transform: self.rank_var_transform,
            tau: self.tau,
            lr: self.rank_lr,
            batch: self.rank_batch,
            epochs: self.rank_epochs,
            modes: self.k,
            cache_modes: self.rank_cache_modes,
            ..Default::default()
        })
    }

    pub fn sampler(&self) -> Result<MaskSampler, CliError> {
        let strategy = MaskStrategy::parse(&self.mask_strategy).ok_or_else(|| {
            CliError::Config(format!(
                "mask_strategy: unknown strategy `{}` (forecast, gap, agent, random_state, mixed)",
                self.mask_strategy
            ))
        })?;
        Ok(MaskSampler {
            strategy,
            observed_prefix: self.observed_prefix,
            gap_len: self.gap_len,
            hidden_agents: self.hidden_agents,
            missing_ratio: self.missing_ratio,
        })
    }

    pub fn dynamics(&self) -> DynamicsParams {
        DynamicsParams {
            bounds: Bounds {
                x: self.court_x,
                y: self.court_y,
            },
            dt: self.dt,
            v_max: self.v_max,
            pass_prob: self.pass_prob,
            ..Default::default()
        }
    }

    /// SHA-256 of the canonical serialization, ignoring paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        for p in [&mut c.data_dir, &mut c.out_dir, &mut c.checkpoint, &mut c.rank_checkpoint] {
            *p = PathBuf::new();
        }
        let text = toml::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Provenance block embedded in every output header.
    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "tool": "u2traj",
            "version": env!("CARGO_PKG_VERSION"),
            "config_sha256": self.hash(),
            "seed": self.seed,
        })
    }
}
