//! One function per subcommand. Every output file carries the run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use u2traj::checkpoint::{Checkpoint, CheckpointKind};
use u2traj::data::{generate_split, Normalizer, Scene};
use u2traj::denoiser::{self, Denoiser, DenoiserConfig, EpochStats};
use u2traj::diffusion::{generate_modes, mode_rng, observed_part, ModeSet, NoiseSchedule, ScheduleConfig};
use u2traj::io::{read_modeset, read_scene, write_modeset, write_scene, ModeSetFile};
use u2traj::masking::Mask;
use u2traj::metrics::{
    evaluate_topk, gaussian_nll, gaussian_nll_observed, median, per_mode_sade, scene_metrics, spearman, acc_rate,
    EvalReport,
};
use u2traj::ranknn::{self, avg_ucty, build_rank_input, rank_forward, RankConfig, RankNet};
use u2traj::{Error, Field};

use crate::{io_err, CliError, DirLock, RunConfig};

pub const SCENE_EXT: &str = "scene";
pub const MODES_EXT: &str = "modes";
const MASK_SALT: u64 = 0x6d61_736b;

fn scene_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index)
}

pub fn train_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.join("train")
}

pub fn test_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.join("test")
}

pub fn modes_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("modes")
}

pub fn ranked_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("ranked")
}

/// Files with extension `ext` in `dir`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn read_scenes(paths: &[PathBuf]) -> Result<Vec<Scene>, CliError> {
    paths.par_iter().map(|p| Ok(read_scene(p)?)).collect()
}

fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body).map_err(|e| io_err(path, e))
}

fn manifest_line(cfg: &RunConfig) -> String {
    format!("# manifest {}\n", cfg.manifest())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserMeta {
    pub manifest: serde_json::Value,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankMeta {
    pub manifest: serde_json::Value,
    pub rank: RankConfig,
    pub normalizer: Normalizer,
}

/// Writes `train_scenes` and `test_scenes` synthetic scenes. Test scenes
/// carry a conditioning mask drawn from the configured strategy.
pub fn gen_data(cfg: &RunConfig) -> Result<(usize, usize), CliError> {
    let _lock = DirLock::acquire(&cfg.data_dir)?;
    let split = generate_split(cfg.train_scenes, cfg.test_scenes, cfg.t, cfg.n, &cfg.dynamics(), cfg.seed)?;
    let sampler = cfg.sampler()?;
    let manifest = cfg.manifest();
    for dir in [train_dir(cfg), test_dir(cfg)] {
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    for (i, s) in split.train.iter().enumerate() {
        write_scene(&train_dir(cfg).join(format!("scene_{i:05}.{SCENE_EXT}")), s, Some(&manifest))?;
    }
    for (i, s) in split.test.iter().enumerate() {
        let mut rng = mode_rng(cfg.seed ^ MASK_SALT, i as u64);
        let mut s = s.clone();
        s.mask = sampler.sample(cfg.t, cfg.n, &mut rng)?;
        write_scene(&test_dir(cfg).join(format!("scene_{i:05}.{SCENE_EXT}")), &s, Some(&manifest))?;
    }
    Ok((split.train.len(), split.test.len()))
}

/// Trains the denoiser on `data_dir/train` and writes the checkpoint.
pub fn train(cfg: &RunConfig, mut log: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>, CliError> {
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let scenes = read_scenes(&list_files(&train_dir(cfg), SCENE_EXT)?)?;
    if scenes.is_empty() {
        return Err(CliError::Config(format!("no training scenes in {}", train_dir(cfg).display())));
    }
    let normalizer = Normalizer::fit(&scenes)?;
    let data: Vec<Field> = scenes.iter().map(|s| normalizer.normalize(&s.x)).collect();
    let schedule = cfg.schedule()?;
    let mut model = Denoiser::new(cfg.denoiser()?, cfg.seed)?;
    let mut text = manifest_line(cfg);
    let history = denoiser::train(&mut model, &data, &schedule, &cfg.sampler()?, cfg.seed, |s| {
        let _ = writeln!(text, "epoch {} total {:.8e} simple {:.8e} nll {:.8e}", s.epoch, s.loss.total, s.loss.simple, s.loss.nll);
        log(s);
    })?;
    let meta = DenoiserMeta {
        manifest: cfg.manifest(),
        denoiser: model.config.clone(),
        schedule: schedule_config(cfg),
        normalizer,
    };
    let json = serde_json::to_value(&meta).map_err(|e| CliError::Io(e.to_string()))?;
    if let Some(parent) = cfg.checkpoint.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    Checkpoint::new(CheckpointKind::Denoiser, json, &model.params).save(&cfg.checkpoint)?;
    write_text(&cfg.out_dir.join("train_log.txt"), &text)?;
    Ok(history)
}

fn schedule_config(cfg: &RunConfig) -> ScheduleConfig {
    ScheduleConfig {
        steps: cfg.steps,
        beta_start: cfg.beta_start,
        beta_end: cfg.beta_end,
        zeta: cfg.zeta,
        s_hat: cfg.s_hat,
        clip_x0: (cfg.clip_x0 > 0.0).then_some(cfg.clip_x0),
    }
}

/// Loads the denoiser checkpoint; the forward schedule must match the one
/// it was trained with.
pub fn load_denoiser(cfg: &RunConfig) -> Result<(Denoiser, Normalizer, NoiseSchedule), CliError> {
    let ck = Checkpoint::load(&cfg.checkpoint)
        .map_err(|e| CliError::Io(format!("{}: {e}", cfg.checkpoint.display())))?
        .expect(CheckpointKind::Denoiser)?;
    let meta: DenoiserMeta = serde_json::from_value(ck.config)
        .map_err(|e| CliError::Io(format!("{}: bad config block: {e}", cfg.checkpoint.display())))?;
    let s = schedule_config(cfg);
    if (s.steps, s.beta_start, s.beta_end) != (meta.schedule.steps, meta.schedule.beta_start, meta.schedule.beta_end) {
        return Err(CliError::Config(format!(
            "schedule (steps, beta_start, beta_end) differs from the one {} was trained with",
            cfg.checkpoint.display()
        )));
    }
    let model = Denoiser::from_params(meta.denoiser, ck.params)?;
    Ok((model, meta.normalizer, cfg.schedule()?))
}

fn completion_mask(cfg: &RunConfig, scene: &Scene, index: usize) -> Result<Mask, CliError> {
    if scene.mask.validate().is_ok() {
        return Ok(scene.mask.clone());
    }
    let (t, n) = scene.x.shape();
    let mut rng = mode_rng(cfg.seed ^ MASK_SALT, index as u64);
    Ok(cfg.sampler()?.sample(t, n, &mut rng)?)
}

/// Generates K modes for one scene, in court units at f32 precision.
pub fn sample_scene(
    cfg: &RunConfig,
    model: &Denoiser,
    normalizer: &Normalizer,
    schedule: &NoiseSchedule,
    scene: &Scene,
    index: usize,
) -> Result<ModeSetFile, CliError> {
    let mask = completion_mask(cfg, scene, index)?;
    let gt = normalizer.normalize(&scene.x);
    let x_obs = observed_part(&gt, &mask)?;
    let set = generate_modes(model, &x_obs, &mask, schedule, cfg.k, scene_seed(cfg.seed, index as u64))?;
    let modes = set
        .modes
        .iter()
        .map(|m| normalizer.denormalize_posterior(m).quantize_f32())
        .collect();
    let mut modes = ModeSet::new(modes)?;
    let mut scene = scene.clone();
    scene.mask = mask;
    modes.sade = Some(per_mode_sade(&modes, &scene.x, &scene.mask)?);
    Ok(ModeSetFile {
        scene,
        modes,
        units: "m".into(),
    })
}

/// Writes one mode-set file per input scene (default: the test split).
pub fn sample(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let (model, normalizer, schedule) = load_denoiser(cfg)?;
    let inputs = if inputs.is_empty() {
        list_files(&test_dir(cfg), SCENE_EXT)?
    } else {
        inputs.to_vec()
    };
    let out = modes_dir(cfg);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let manifest = cfg.manifest();
    let mut written = Vec::with_capacity(inputs.len());
    for (i, p) in inputs.iter().enumerate() {
        let scene = read_scene(p)?;
        let file = sample_scene(cfg, &model, &normalizer, &schedule, &scene, i)?;
        let dst = out.join(format!("{}.{MODES_EXT}", stem(p)));
        write_modeset(&dst, &file, Some(&manifest))?;
        written.push(dst);
    }
    Ok(written)
}

fn modeset_inputs(dir: PathBuf, inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    if inputs.is_empty() {
        list_files(&dir, MODES_EXT)
    } else {
        Ok(inputs.to_vec())
    }
}

/// Scene-level metrics; ranking scores are the stored error probabilities
/// when present, else AvgUcty.
pub fn eval(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<EvalReport, CliError> {
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let files = modeset_inputs(modes_dir(cfg), inputs)?;
    if files.is_empty() {
        return Err(CliError::Config("no mode-set files to evaluate".into()));
    }
    let metrics = files
        .par_iter()
        .map(|p| {
            let f = read_modeset(p)?;
            let scores: Vec<f64> = match &f.modes.errors {
                Some(e) => e.clone(),
                None => f.modes.modes.iter().map(avg_ucty).collect(),
            };
            Ok(scene_metrics(&f.modes, &f.scene.x, &f.scene.mask, Some(&scores), cfg.coverage)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let report = EvalReport::from_scenes(&metrics)?;
    write_text(&cfg.out_dir.join("eval.txt"), &(manifest_line(cfg) + &report.to_text()))?;
    Ok(report)
}

/// Trains the ranker on modes from the frozen denoiser.
pub fn rank_train(cfg: &RunConfig) -> Result<Vec<f64>, CliError> {
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let (model, normalizer, schedule) = load_denoiser(cfg)?;
    let mut files = list_files(&train_dir(cfg), SCENE_EXT)?;
    if cfg.rank_scenes > 0 {
        files.truncate(cfg.rank_scenes);
    }
    let scenes = read_scenes(&files)?;
    let data: Vec<Field> = scenes.iter().map(|s| normalizer.normalize(&s.x)).collect();
    let (net, history) = ranknn::train_ranknn(Some(&model), &data, &schedule, &cfg.sampler()?, cfg.rank()?, cfg.seed)?;
    let meta = RankMeta {
        manifest: cfg.manifest(),
        rank: net.config.clone(),
        normalizer,
    };
    let json = serde_json::to_value(&meta).map_err(|e| CliError::Io(e.to_string()))?;
    if let Some(parent) = cfg.rank_checkpoint.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    Checkpoint::new(CheckpointKind::Rank, json, &net.params).save(&cfg.rank_checkpoint)?;
    let mut text = manifest_line(cfg);
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(text, "epoch {i} loss {l:.8e}");
    }
    write_text(&cfg.out_dir.join("rank_log.txt"), &text)?;
    Ok(history)
}

pub fn load_rank(cfg: &RunConfig) -> Result<(RankNet, Normalizer), CliError> {
    let ck = Checkpoint::load(&cfg.rank_checkpoint)
        .map_err(|e| CliError::Io(format!("{}: {e}", cfg.rank_checkpoint.display())))?
        .expect(CheckpointKind::Rank)?;
    let meta: RankMeta = serde_json::from_value(ck.config)
        .map_err(|e| CliError::Io(format!("{}: bad config block: {e}", cfg.rank_checkpoint.display())))?;
    Ok((RankNet::from_params(meta.rank, ck.params)?, meta.normalizer))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopkRow {
    pub k: usize,
    pub rank: f64,
    pub ucty: f64,
    pub random: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub scenes: usize,
    pub rho_rank: Vec<f64>,
    pub rho_ucty: Vec<f64>,
    pub topk: Vec<TopkRow>,
}

impl RankReport {
    pub fn to_text(&self) -> String {
        let stat = |v: &[f64]| {
            let m = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
            (m, median(v).unwrap_or(f64::NAN))
        };
        let (rm, rmed) = stat(&self.rho_rank);
        let (um, umed) = stat(&self.rho_ucty);
        let mut s = format!(
            "scenes {}\nrho_rank_mean {rm:.8e}\nrho_rank_median {rmed:.8e}\nrho_ucty_mean {um:.8e}\nrho_ucty_median {umed:.8e}\n",
            self.scenes
        );
        for r in &self.topk {
            let _ = writeln!(s, "top{} rank {:.8e} ucty {:.8e} random {:.8e}", r.k, r.rank, r.ucty, r.random);
        }
        s
    }
}

/// Scores each mode set with the ranker, writes annotated copies and
/// reports Spearman distributions and Top-k minSADE.
pub fn rank_eval(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<RankReport, CliError> {
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let (net, normalizer) = load_rank(cfg)?;
    let files = modeset_inputs(modes_dir(cfg), inputs)?;
    if files.is_empty() {
        return Err(CliError::Config("no mode-set files to rank".into()));
    }
    let out = ranked_dir(cfg);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let manifest = cfg.manifest();
    struct Scored {
        rho_rank: Option<f64>,
        rho_ucty: Option<f64>,
        topk: Vec<[f64; 3]>,
    }
    let ks_for = |k: usize| -> Vec<usize> {
        let mut ks: Vec<usize> = [1, 5, 10, k].into_iter().filter(|&x| x <= k).collect();
        ks.dedup();
        ks
    };
    let scored = files
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<(Vec<usize>, Scored), CliError> {
            let mut f = read_modeset(p)?;
            let model_units = ModeSet::new(f.modes.modes.iter().map(|m| normalizer.normalize_posterior(m)).collect())?;
            let e = rank_forward(&build_rank_input(&model_units, &f.scene.mask)?, &net)?;
            let sade = per_mode_sade(&f.modes, &f.scene.x, &f.scene.mask)?;
            let ucty: Vec<f64> = f.modes.modes.iter().map(avg_ucty).collect();
            let mut rng = mode_rng(cfg.seed ^ 0x72616e64, i as u64);
            let random: Vec<f64> = (0..e.len()).map(|_| rng.gen::<f64>()).collect();
            let defined = |r: Result<f64, Error>| match r {
                Ok(v) => Ok(Some(v)),
                Err(Error::UndefinedCorrelation) => Ok(None),
                Err(e) => Err(e),
            };
            let ks = ks_for(e.len());
            let topk = ks
                .iter()
                .map(|&k| {
                    Ok([
                        evaluate_topk(&f.modes, &e, &f.scene.x, &f.scene.mask, k)?,
                        evaluate_topk(&f.modes, &ucty, &f.scene.x, &f.scene.mask, k)?,
                        evaluate_topk(&f.modes, &random, &f.scene.x, &f.scene.mask, k)?,
                    ])
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let s = Scored {
                rho_rank: defined(spearman(&e, &sade))?,
                rho_ucty: defined(spearman(&ucty, &sade))?,
                topk,
            };
            f.modes.errors = Some(e.iter().map(|&v| v as f32 as f64).collect());
            f.modes.sade = Some(sade);
            write_modeset(&out.join(p.file_name().unwrap_or_default()), &f, Some(&manifest))?;
            Ok((ks, s))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let ks = scored[0].0.clone();
    if scored.iter().any(|(k, _)| *k != ks) {
        return Err(CliError::Config("mode sets differ in K".into()));
    }
    let n = scored.len() as f64;
    let topk = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let mean = |c: usize| scored.iter().map(|(_, s)| s.topk[j][c]).sum::<f64>() / n;
            TopkRow {
                k,
                rank: mean(0),
                ucty: mean(1),
                random: mean(2),
            }
        })
        .collect();
    let report = RankReport {
        scenes: scored.len(),
        rho_rank: scored.iter().filter_map(|(_, s)| s.rho_rank).collect(),
        rho_ucty: scored.iter().filter_map(|(_, s)| s.rho_ucty).collect(),
        topk,
    };
    write_text(&cfg.out_dir.join("rank_eval.txt"), &(manifest_line(cfg) + &report.to_text()))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub s_hat: usize,
    pub nll: f64,
    pub nll_observed: f64,
    pub acc_rate: f64,
}

/// NLL of the propagated variance for each variance start step.
pub fn sweep_shat(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<Vec<SweepRow>, CliError> {
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let (model, normalizer, schedule) = load_denoiser(cfg)?;
    let mut files = if inputs.is_empty() {
        list_files(&test_dir(cfg), SCENE_EXT)?
    } else {
        inputs.to_vec()
    };
    if cfg.sweep_scenes > 0 {
        files.truncate(cfg.sweep_scenes);
    }
    if files.is_empty() {
        return Err(CliError::Config("no scenes for the sweep".into()));
    }
    let scenes = read_scenes(&files)?;
    let mut rows = Vec::with_capacity(cfg.sweep_s_hat.len());
    for &s_hat in &cfg.sweep_s_hat {
        let sched = schedule.with_s_hat(s_hat)?;
        let (mut nll, mut nll_obs, mut acc, mut count) = (0.0, 0.0, 0.0, 0usize);
        for (i, scene) in scenes.iter().enumerate() {
            let f = sample_scene(cfg, &model, &normalizer, &sched, scene, i)?;
            for m in &f.modes.modes {
                nll += gaussian_nll(m, &f.scene.x, &f.scene.mask)?;
                nll_obs += gaussian_nll_observed(m, &f.scene.x, &f.scene.mask)?;
                acc += acc_rate(m, &f.scene.x, &f.scene.mask, cfg.coverage)?;
                count += 1;
            }
        }
        let c = count as f64;
        let row = SweepRow {
            s_hat,
            nll: nll / c,
            nll_observed: nll_obs / c,
            acc_rate: acc / c,
        };
        if !row.nll.is_finite() {
            return Err(CliError::Numeric(format!("non-finite NLL at s_hat = {s_hat}")));
        }
        rows.push(row);
    }
    let mut text = manifest_line(cfg);
    text.push_str("s_hat nll nll_observed acc_rate\n");
    for r in &rows {
        let _ = writeln!(text, "{} {:.8e} {:.8e} {:.8e}", r.s_hat, r.nll, r.nll_observed, r.acc_rate);
    }
    write_text(&cfg.out_dir.join("sweep_shat.txt"), &text)?;
    Ok(rows)
}
