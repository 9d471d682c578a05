//! Text formats for scenes and mode sets.
//!
//! Both start with one JSON header line followed by whitespace-separated
//! records. Reals are written with 9 significant digits, which reproduces
//! any f32 value exactly; they are read back through f32.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Bounds, Scene};
use crate::diffusion::{ModeSet, PosteriorField};
use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::tensor::Field;

pub const SCENE_FORMAT: &str = "u2traj-scene";
pub const MODESET_FORMAT: &str = "u2traj-modeset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneHeader {
    pub format: String,
    pub version: u32,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub dt: f64,
    pub bounds: Bounds,
    pub units: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSetHeader {
    pub format: String,
    pub version: u32,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub dt: f64,
    pub bounds: Bounds,
    pub units: String,
    pub errors: bool,
    pub sade: bool,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

/// A mode set together with the scene (ground truth and mask) it completes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSetFile {
    pub scene: Scene,
    pub modes: ModeSet,
    pub units: String,
}

pub fn fmt_real(v: f64) -> String {
    format!("{:.8e}", v as f32)
}

fn write_scene_records(out: &mut String, x: &Field, mask: &Mask) {
    let (t, n) = x.shape();
    for ti in 0..t {
        for ni in 0..n {
            let p = x.get(ti, ni);
            let m = u8::from(mask.observed(ti, ni));
            out.push_str(&format!("{ti} {ni} {} {} {m}\n", fmt_real(p[0]), fmt_real(p[1])));
        }
    }
}

fn atomic_write(path: &Path, body: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(body.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn scene_to_string(scene: &Scene, units: &str, manifest: Option<&serde_json::Value>) -> Result<String> {
    scene.validate()?;
    let (t, n) = scene.x.shape();
    let header = SceneHeader {
        format: SCENE_FORMAT.into(),
        version: FORMAT_VERSION,
        t,
        n,
        dt: scene.dt,
        bounds: scene.bounds,
        units: units.into(),
        meta: scene.meta.clone(),
        manifest: manifest.cloned(),
    };
    let mut out = serde_json::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    out.push('\n');
    write_scene_records(&mut out, &scene.x, &scene.mask);
    Ok(out)
}

pub fn write_scene(path: &Path, scene: &Scene, manifest: Option<&serde_json::Value>) -> Result<()> {
    atomic_write(path, &scene_to_string(scene, "m", manifest)?)
}

/// Line-numbered reader over a text body.
struct Lines<'a> {
    path: PathBuf,
    iter: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn new(path: &Path, text: &'a str) -> Self {
        Lines {
            path: path.to_path_buf(),
            iter: text.lines().enumerate().peekable(),
        }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        loop {
            let (i, l) = self.iter.next()?;
            if !l.trim().is_empty() {
                return Some((i + 1, l));
            }
        }
    }

    fn err(&self, line: usize, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            reason: reason.into(),
        }
    }
}

fn parse_header<T: serde::de::DeserializeOwned>(lines: &mut Lines, format: &str) -> Result<T> {
    let (no, line) = lines.next().ok_or_else(|| lines.err(1, "empty file"))?;
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| lines.err(no, format!("bad header: {e}")))?;
    let found = v.get("format").and_then(|f| f.as_str()).unwrap_or("");
    if found != format {
        return Err(lines.err(no, format!("expected format `{format}`, found `{found}`")));
    }
    let version = v.get("version").and_then(|f| f.as_u64()).unwrap_or(0);
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            path: lines.path.clone(),
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(v).map_err(|e| lines.err(no, format!("bad header: {e}")))
}

fn parse_real(lines: &Lines, no: usize, s: &str) -> Result<f64> {
    let v: f32 = s.parse().map_err(|_| lines.err(no, format!("malformed number `{s}`")))?;
    if !v.is_finite() {
        return Err(lines.err(no, format!("non-finite value `{s}`")));
    }
    Ok(v as f64)
}

fn parse_index(lines: &Lines, no: usize, s: &str, expected: usize, what: &str) -> Result<()> {
    match s.parse::<usize>() {
        Ok(v) if v == expected => Ok(()),
        Ok(v) => Err(lines.err(no, format!("expected {what} {expected}, found {v}"))),
        Err(_) => Err(lines.err(no, format!("malformed {what} `{s}`"))),
    }
}

/// Reads `t·n` records with `width` real columns after `t n`, plus the mask
/// column when `with_mask`.
fn read_grid(lines: &mut Lines, t: usize, n: usize, width: usize, with_mask: bool) -> Result<(Vec<f64>, Vec<bool>)> {
    let expected = t * n;
    let mut vals = Vec::with_capacity(expected * width);
    let mut mask = Vec::with_capacity(expected);
    for r in 0..expected {
        let Some((no, line)) = lines.next() else {
            return Err(Error::Truncated {
                path: lines.path.clone(),
                expected,
                found: r,
            });
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let cols = 2 + width + usize::from(with_mask);
        if fields.len() != cols {
            if fields.len() == 1 || fields[0].parse::<usize>().is_err() {
                return Err(Error::Truncated {
                    path: lines.path.clone(),
                    expected,
                    found: r,
                });
            }
            return Err(lines.err(no, format!("expected {cols} fields, found {}", fields.len())));
        }
        parse_index(lines, no, fields[0], r / n, "t")?;
        parse_index(lines, no, fields[1], r % n, "n")?;
        for f in &fields[2..2 + width] {
            vals.push(parse_real(lines, no, f)?);
        }
        if with_mask {
            mask.push(match fields[2 + width] {
                "0" => false,
                "1" => true,
                other => return Err(lines.err(no, format!("mask value must be 0 or 1, found `{other}`"))),
            });
        }
    }
    Ok((vals, mask))
}

fn check_geometry(lines: &Lines, t: usize, n: usize) -> Result<()> {
    if t < 2 || n < 1 {
        return Err(lines.err(1, format!("need T >= 2 and N >= 1, got {t}x{n}")));
    }
    Ok(())
}

fn expect_end(lines: &mut Lines) -> Result<()> {
    if let Some((no, _)) = lines.next() {
        return Err(lines.err(no, "unexpected trailing record"));
    }
    Ok(())
}

fn scene_from(lines: &mut Lines, h_t: usize, h_n: usize, dt: f64, bounds: Bounds, meta: BTreeMap<String, String>) -> Result<Scene> {
    let (vals, m) = read_grid(lines, h_t, h_n, 2, true)?;
    Ok(Scene {
        x: Field::from_vec(h_t, h_n, vals)?,
        mask: Mask::new_unchecked(h_t, h_n, m)?,
        dt,
        bounds,
        meta,
    })
}

pub fn parse_scene(path: &Path, text: &str) -> Result<(SceneHeader, Scene)> {
    let mut lines = Lines::new(path, text);
    let h: SceneHeader = parse_header(&mut lines, SCENE_FORMAT)?;
    check_geometry(&lines, h.t, h.n)?;
    let scene = scene_from(&mut lines, h.t, h.n, h.dt, h.bounds, h.meta.clone())?;
    expect_end(&mut lines)?;
    Ok((h, scene))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path)?;
    Ok(parse_scene(path, &text)?.1)
}

pub fn modeset_to_string(file: &ModeSetFile, manifest: Option<&serde_json::Value>) -> Result<String> {
    let scene = &file.scene;
    scene.validate()?;
    let (t, n) = scene.x.shape();
    if file.modes.shape() != (t, n) {
        return Err(Error::dim("modes do not match the scene"));
    }
    let k = file.modes.len();
    for (name, v) in [("errors", &file.modes.errors), ("sade", &file.modes.sade)] {
        if v.as_ref().is_some_and(|v| v.len() != k) {
            return Err(Error::dim(format!("{name} vector length differs from K = {k}")));
        }
    }
    let header = ModeSetHeader {
        format: MODESET_FORMAT.into(),
        version: FORMAT_VERSION,
        t,
        n,
        k,
        dt: scene.dt,
        bounds: scene.bounds,
        units: file.units.clone(),
        errors: file.modes.errors.is_some(),
        sade: file.modes.sade.is_some(),
        meta: scene.meta.clone(),
        manifest: manifest.cloned(),
    };
    let mut out = serde_json::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    out.push('\n');
    write_scene_records(&mut out, &scene.x, &scene.mask);
    for (i, m) in file.modes.modes.iter().enumerate() {
        out.push_str(&format!("mode {i}\n"));
        for ti in 0..t {
            for ni in 0..n {
                let (mu, v) = (m.mean.get(ti, ni), m.var.get(ti, ni));
                out.push_str(&format!(
                    "{ti} {ni} {} {} {} {}\n",
                    fmt_real(mu[0]),
                    fmt_real(mu[1]),
                    fmt_real(v[0]),
                    fmt_real(v[1])
                ));
            }
        }
    }
    for (name, v) in [("errors", &file.modes.errors), ("sade", &file.modes.sade)] {
        if let Some(v) = v {
            out.push_str(name);
            for x in v {
                out.push(' ');
                out.push_str(&fmt_real(*x));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_modeset(path: &Path, file: &ModeSetFile, manifest: Option<&serde_json::Value>) -> Result<()> {
    atomic_write(path, &modeset_to_string(file, manifest)?)
}

fn read_vector(lines: &mut Lines, name: &str, k: usize) -> Result<Vec<f64>> {
    let Some((no, line)) = lines.next() else {
        return Err(Error::Truncated {
            path: lines.path.clone(),
            expected: k,
            found: 0,
        });
    };
    let mut fields = line.split_whitespace();
    if fields.next() != Some(name) {
        return Err(lines.err(no, format!("expected `{name}` vector")));
    }
    let v = fields.map(|f| parse_real(lines, no, f)).collect::<Result<Vec<_>>>()?;
    if v.len() != k {
        return Err(lines.err(no, format!("`{name}` has {} values, expected {k}", v.len())));
    }
    Ok(v)
}

pub fn parse_modeset(path: &Path, text: &str) -> Result<(ModeSetHeader, ModeSetFile)> {
    let mut lines = Lines::new(path, text);
    let h: ModeSetHeader = parse_header(&mut lines, MODESET_FORMAT)?;
    check_geometry(&lines, h.t, h.n)?;
    if h.k == 0 {
        return Err(lines.err(1, "K must be >= 1"));
    }
    let scene = scene_from(&mut lines, h.t, h.n, h.dt, h.bounds, h.meta.clone())?;
    let mut modes = Vec::with_capacity(h.k);
    for i in 0..h.k {
        let Some((no, line)) = lines.next() else {
            return Err(Error::Truncated {
                path: lines.path.clone(),
                expected: h.k,
                found: i,
            });
        };
        if line.trim() != format!("mode {i}") {
            return Err(lines.err(no, format!("expected `mode {i}`")));
        }
        let (vals, _) = read_grid(&mut lines, h.t, h.n, 4, false)?;
        let mut mean = Vec::with_capacity(h.t * h.n * 2);
        let mut var = Vec::with_capacity(h.t * h.n * 2);
        for c in vals.chunks(4) {
            mean.extend_from_slice(&c[..2]);
            var.extend_from_slice(&c[2..]);
        }
        let pf = PosteriorField::new(Field::from_vec(h.t, h.n, mean)?, Field::from_vec(h.t, h.n, var)?)
            .map_err(|e| lines.err(no, e.to_string()))?;
        modes.push(pf);
    }
    let mut set = ModeSet::new(modes)?;
    if h.errors {
        set.errors = Some(read_vector(&mut lines, "errors", h.k)?);
    }
    if h.sade {
        set.sade = Some(read_vector(&mut lines, "sade", h.k)?);
    }
    expect_end(&mut lines)?;
    let units = h.units.clone();
    Ok((h, ModeSetFile { scene, modes: set, units }))
}

pub fn read_modeset(path: &Path) -> Result<ModeSetFile> {
    let text = fs::read_to_string(path)?;
    Ok(parse_modeset(path, &text)?.1)
}
