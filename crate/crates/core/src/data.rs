//! Synthetic basketball-like scenes and the court/model unit conversion.
//!
//! Players follow a mean-reverting velocity process pulled toward random
//! waypoints and reflected at the court lines. The last agent is the ball:
//! it is dribbled next to its possessor and now and then passed to another
//! player, flying at constant speed until it reaches them.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{mode_rng, PosteriorField};
use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::tensor::Field;

/// Axis-aligned court rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Bounds {
    pub const BASKETBALL: Bounds = Bounds {
        x: [0.0, 28.65],
        y: [0.0, 15.24],
    };

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("x", self.x), ("y", self.y)] {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::param("bounds", format!("degenerate {name} extent [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x[0] && p[0] <= self.x[1] && p[1] >= self.y[0] && p[1] <= self.y[1]
    }

    fn axis(&self, c: usize) -> [f64; 2] {
        if c == 0 {
            self.x
        } else {
            self.y
        }
    }

    pub fn union(&self, other: &Bounds) -> Bounds {
        Bounds {
            x: [self.x[0].min(other.x[0]), self.x[1].max(other.x[1])],
            y: [self.y[0].min(other.y[0]), self.y[1].max(other.y[1])],
        }
    }
}

/// Frame interval in seconds: 50 frames span 8 s.
pub const DEFAULT_DT: f64 = 0.16;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub x: Field,
    pub mask: Mask,
    pub dt: f64,
    pub bounds: Bounds,
    pub meta: BTreeMap<String, String>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let (t, n) = self.x.shape();
        if t < 2 || n < 1 {
            return Err(Error::param("shape", format!("need T >= 2 and N >= 1, got {t}x{n}")));
        }
        if self.mask.shape() != (t, n) {
            return Err(Error::dim("scene mask does not match its positions"));
        }
        self.bounds.validate()?;
        if !(self.dt > 0.0) {
            return Err(Error::param("dt", "must be positive"));
        }
        Ok(())
    }

    /// True if every position lies inside the scene bounds.
    pub fn in_bounds(&self) -> bool {
        let (t, n) = self.x.shape();
        (0..t).all(|ti| (0..n).all(|ni| self.bounds.contains(self.x.get(ti, ni))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsParams {
    pub bounds: Bounds,
    pub dt: f64,
    /// Player speed cap in m/s.
    pub v_max: f64,
    /// Velocity mean-reversion rate (1/s).
    pub theta: f64,
    /// Velocity noise (m/s per sqrt(s)).
    pub sigma: f64,
    /// Pull toward the current waypoint (1/s).
    pub waypoint_gain: f64,
    /// Per-frame probability of picking a new waypoint.
    pub waypoint_switch: f64,
    /// Per-frame probability of a pass while the ball is held.
    pub pass_prob: f64,
    pub ball_speed: f64,
    pub dribble_offset: f64,
    pub dribble_noise: f64,
    /// Ball counts as attached within this distance of its possessor.
    pub attach_radius: f64,
}

impl Default for DynamicsParams {
    fn default() -> Self {
        DynamicsParams {
            bounds: Bounds::BASKETBALL,
            dt: DEFAULT_DT,
            v_max: 7.0,
            theta: 1.5,
            sigma: 1.0,
            waypoint_gain: 0.6,
            waypoint_switch: 0.05,
            pass_prob: 0.02,
            ball_speed: 12.0,
            dribble_offset: 0.4,
            dribble_noise: 0.1,
            attach_radius: 1.0,
        }
    }
}

impl DynamicsParams {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        for (name, v) in [
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("ball_speed", self.ball_speed),
            ("attach_radius", self.attach_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("theta", self.theta),
            ("sigma", self.sigma),
            ("waypoint_gain", self.waypoint_gain),
            ("dribble_offset", self.dribble_offset),
            ("dribble_noise", self.dribble_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, format!("must be >= 0, got {v}")));
            }
        }
        for (name, v) in [("waypoint_switch", self.waypoint_switch), ("pass_prob", self.pass_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Nearest f32 value that stays inside `[lo, hi]`.
fn to_f32_within(v: f64, lo: f64, hi: f64) -> f64 {
    let mut q = v as f32;
    while (q as f64) > hi {
        q = f32::from_bits(if q > 0.0 { q.to_bits() - 1 } else { q.to_bits() + 1 });
    }
    while (q as f64) < lo {
        q = f32::from_bits(if q >= 0.0 { q.to_bits() + 1 } else { q.to_bits() - 1 });
    }
    q as f64
}

fn reflect(p: &mut f64, v: &mut f64, [lo, hi]: [f64; 2]) {
    if *p < lo {
        *p = 2.0 * lo - *p;
        *v = -*v;
    } else if *p > hi {
        *p = 2.0 * hi - *p;
        *v = -*v;
    }
    *p = p.clamp(lo, hi);
}

fn uniform_point<R: Rng + ?Sized>(b: &Bounds, rng: &mut R) -> [f64; 2] {
    [rng.gen_range(b.x[0]..b.x[1]), rng.gen_range(b.y[0]..b.y[1])]
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn clamp_norm(v: [f64; 2], max: f64) -> [f64; 2] {
    let s = v[0].hypot(v[1]);
    if s > max {
        [v[0] * max / s, v[1] * max / s]
    } else {
        v
    }
}

/// One scene of `t` frames: `n - 1` players and a ball. Positions are
/// stored at f32 precision; the mask is all-observed.
pub fn generate_scene<R: Rng + ?Sized>(t: usize, n: usize, params: &DynamicsParams, rng: &mut R) -> Result<Scene> {
    params.validate()?;
    if t < 2 || n < 2 {
        return Err(Error::param("shape", format!("need T >= 2 and N >= 2, got {t}x{n}")));
    }
    let b = params.bounds;
    let dt = params.dt;
    let players = n - 1;
    let mut pos: Vec<[f64; 2]> = (0..players).map(|_| uniform_point(&b, rng)).collect();
    let mut vel = vec![[0.0; 2]; players];
    let mut goal: Vec<[f64; 2]> = (0..players).map(|_| uniform_point(&b, rng)).collect();
    let mut holder = rng.gen_range(0..players);
    let mut flying = false;
    let mut offset_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut ball = pos[holder];

    let mut x = Field::zeros(t, n);
    for ti in 0..t {
        if ti > 0 {
            for i in 0..players {
                if rng.gen::<f64>() < params.waypoint_switch {
                    goal[i] = uniform_point(&b, rng);
                }
                let pull = clamp_norm(
                    [
                        params.waypoint_gain * (goal[i][0] - pos[i][0]),
                        params.waypoint_gain * (goal[i][1] - pos[i][1]),
                    ],
                    params.v_max,
                );
                let mut v = vel[i];
                for c in 0..2 {
                    v[c] += params.theta * (pull[c] - v[c]) * dt + params.sigma * dt.sqrt() * normal(rng);
                }
                let mut v = clamp_norm(v, params.v_max);
                let mut p = pos[i];
                for c in 0..2 {
                    p[c] += v[c] * dt;
                    reflect(&mut p[c], &mut v[c], b.axis(c));
                }
                pos[i] = p;
                vel[i] = v;
            }
        }

        if !flying && players > 1 && ti > 0 && rng.gen::<f64>() < params.pass_prob {
            let mut to = rng.gen_range(0..players - 1);
            if to >= holder {
                to += 1;
            }
            holder = to;
            flying = true;
        }
        if flying {
            let target = pos[holder];
            let (dx, dy) = (target[0] - ball[0], target[1] - ball[1]);
            let d = dx.hypot(dy);
            let step = params.ball_speed * dt;
            if d <= step {
                flying = false;
                offset_angle = rng.gen_range(0.0..std::f64::consts::TAU);
            } else {
                ball = [ball[0] + dx / d * step, ball[1] + dy / d * step];
            }
        }
        if !flying {
            offset_angle += 0.3 * normal(rng);
            let p = pos[holder];
            ball = [
                p[0] + params.dribble_offset * offset_angle.cos() + params.dribble_noise * normal(rng),
                p[1] + params.dribble_offset * offset_angle.sin() + params.dribble_noise * normal(rng),
            ];
        }
        ball = [ball[0].clamp(b.x[0], b.x[1]), ball[1].clamp(b.y[0], b.y[1])];

        for (i, p) in pos.iter().chain(std::iter::once(&ball)).enumerate() {
            x.set(
                ti,
                i,
                [to_f32_within(p[0], b.x[0], b.x[1]), to_f32_within(p[1], b.y[0], b.y[1])],
            );
        }
    }
    Ok(Scene {
        x,
        mask: Mask::from_fn(t, n, |_, _| true),
        dt,
        bounds: b,
        meta: BTreeMap::new(),
    })
}

/// `count` scenes; scene `i` draws from random stream `i` of `seed`.
pub fn generate_scenes(count: usize, t: usize, n: usize, params: &DynamicsParams, seed: u64) -> Result<Vec<Scene>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(t, n, params, &mut mode_rng(seed, i)))
        .collect()
}

/// Dataset-wide affine map of the court to `[-1, 1]` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub bounds: Bounds,
}

impl Normalizer {
    pub fn new(bounds: Bounds) -> Result<Self> {
        bounds.validate()?;
        Ok(Normalizer { bounds })
    }

    /// Uses the union of the scene bounds.
    pub fn fit(scenes: &[Scene]) -> Result<Self> {
        let first = scenes
            .first()
            .ok_or_else(|| Error::param("scenes", "cannot fit a normalizer to no scenes"))?
            .bounds;
        Normalizer::new(scenes.iter().fold(first, |acc, s| acc.union(&s.bounds)))
    }

    fn half_extent(&self, c: usize) -> f64 {
        let [lo, hi] = self.bounds.axis(c);
        0.5 * (hi - lo)
    }

    pub fn normalize(&self, x: &Field) -> Field {
        let b = self.bounds;
        Field::from_fn(x.time(), x.agents(), |t, n, c| {
            let [lo, hi] = b.axis(c);
            2.0 * (x.get(t, n)[c] - lo) / (hi - lo) - 1.0
        })
    }

    pub fn denormalize(&self, u: &Field) -> Field {
        let b = self.bounds;
        Field::from_fn(u.time(), u.agents(), |t, n, c| {
            let [lo, hi] = b.axis(c);
            lo + (u.get(t, n)[c] + 1.0) * 0.5 * (hi - lo)
        })
    }

    pub fn denormalize_posterior(&self, p: &PosteriorField) -> PosteriorField {
        let var = Field::from_fn(p.var.time(), p.var.agents(), |t, n, c| {
            let h = self.half_extent(c);
            p.var.get(t, n)[c] * h * h
        });
        PosteriorField {
            mean: self.denormalize(&p.mean),
            var,
        }
    }

    pub fn normalize_posterior(&self, p: &PosteriorField) -> PosteriorField {
        let var = Field::from_fn(p.var.time(), p.var.agents(), |t, n, c| {
            let h = self.half_extent(c);
            p.var.get(t, n)[c] / (h * h)
        });
        PosteriorField {
            mean: self.normalize(&p.mean),
            var,
        }
    }
}

/// Train/test scenes with their shared normalizer.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
    pub normalizer: Normalizer,
}

/// Generates disjoint train and test sets from independent random streams.
pub fn generate_split(
    train: usize,
    test: usize,
    t: usize,
    n: usize,
    params: &DynamicsParams,
    seed: u64,
) -> Result<DatasetSplit> {
    let all = generate_scenes(train + test, t, n, params, seed)?;
    let mut train_set = all;
    let test_set = train_set.split_off(train);
    let normalizer = Normalizer::fit(if train_set.is_empty() { &test_set } else { &train_set })?;
    Ok(DatasetSplit {
        train: train_set,
        test: test_set,
        normalizer,
    })
}
