//! Standalone SVG figures.
//!
//! Court coordinates map to pixels by `px = M + (x - x_min) * s`,
//! `py = M + (y_max - y) * s` with margin `M = 20` and `s` chosen so the
//! court spans `COURT_WIDTH` pixels; y points up as on the court.

use std::fmt::Write as _;

use u2traj::io::ModeSetFile;
use u2traj::metrics::{per_mode_sade, Z95};
use u2traj::ranknn::avg_ucty;

use crate::CliError;

pub const COURT_WIDTH: f64 = 860.0;
const MARGIN: f64 = 20.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

fn color(agent: usize, agents: usize) -> &'static str {
    // the ball (last agent) is always orange
    if agent + 1 == agents {
        "#ff7f0e"
    } else {
        PALETTE[agent % PALETTE.len()]
    }
}

struct CourtMap {
    x0: f64,
    y1: f64,
    s: f64,
}

impl CourtMap {
    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        (MARGIN + (p[0] - self.x0) * self.s, MARGIN + (self.y1 - p[1]) * self.s)
    }
}

fn polyline(out: &mut String, pts: &[(f64, f64)], stroke: &str, width: f64, opacity: f64, dash: bool) {
    if pts.len() < 2 {
        return;
    }
    let d: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}" stroke-opacity="{opacity}"{}/>"#,
        d.join(" "),
        if dash { r#" stroke-dasharray="4 3""# } else { "" }
    );
}

/// Ground truth, every mode's mean path, and 1.96σ ellipses of mode
/// `mode` (default: the lowest-SADE mode) at the unobserved states.
pub fn trajectories_svg(f: &ModeSetFile, mode: Option<usize>) -> Result<String, CliError> {
    let b = f.scene.bounds;
    let (t, n) = f.scene.x.shape();
    let k = f.modes.len();
    let sade = per_mode_sade(&f.modes, &f.scene.x, &f.scene.mask)?;
    let pick = match mode {
        Some(m) if m < k => m,
        Some(m) => return Err(CliError::Config(format!("mode {m} out of range (K = {k})"))),
        None => sade.iter().enumerate().fold(0, |best, (i, &v)| if v < sade[best] { i } else { best }),
    };
    let map = CourtMap {
        x0: b.x[0],
        y1: b.y[1],
        s: COURT_WIDTH / (b.x[1] - b.x[0]),
    };
    let w = COURT_WIDTH + 2.0 * MARGIN;
    let h = (b.y[1] - b.y[0]) * map.s + 2.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#);
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{w:.0}" height="{h:.0}" fill="white"/>"#);
    let (cx, cy) = map.px([b.x[0], b.y[1]]);
    let _ = writeln!(
        out,
        r##"<rect x="{cx:.2}" y="{cy:.2}" width="{:.2}" height="{:.2}" fill="#f4efe6" stroke="#555"/>"##,
        COURT_WIDTH,
        (b.y[1] - b.y[0]) * map.s
    );
    for (mi, m) in f.modes.modes.iter().enumerate() {
        for ni in 0..n {
            let pts: Vec<_> = (0..t).map(|ti| map.px(m.mean.get(ti, ni))).collect();
            let (wd, op) = if mi == pick { (2.0, 0.9) } else { (1.0, 0.2) };
            polyline(&mut out, &pts, color(ni, n), wd, op, false);
        }
    }
    let m = &f.modes.modes[pick];
    for ti in 0..t {
        for ni in 0..n {
            if f.scene.mask.observed(ti, ni) {
                continue;
            }
            let (x, y) = map.px(m.mean.get(ti, ni));
            let v = m.var.get(ti, ni);
            let _ = writeln!(
                out,
                r#"<ellipse cx="{x:.2}" cy="{y:.2}" rx="{:.2}" ry="{:.2}" fill="{}" fill-opacity="0.12" stroke="none"/>"#,
                Z95 * v[0].sqrt() * map.s,
                Z95 * v[1].sqrt() * map.s,
                color(ni, n)
            );
        }
    }
    for ni in 0..n {
        let pts: Vec<_> = (0..t).map(|ti| map.px(f.scene.x.get(ti, ni))).collect();
        polyline(&mut out, &pts, "#000", 1.2, 0.8, true);
        for ti in 0..t {
            if f.scene.mask.observed(ti, ni) {
                let (x, y) = pts[ti];
                let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.2" fill="{}"/>"#, color(ni, n));
            }
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{:.0}" font-family="sans-serif" font-size="12">mode {pick} of {k}, SADE {:.3}</text>"#,
        h - 4.0,
        sade[pick]
    );
    out.push_str("</svg>\n");
    Ok(out)
}

fn scatter_panel(out: &mut String, x0: f64, title: &str, xs: &[f64], ys: &[f64]) {
    const W: f64 = 360.0;
    const H: f64 = 300.0;
    const P: f64 = 40.0;
    let range = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) }
    };
    let (xl, xh) = range(xs);
    let (yl, yh) = range(ys);
    let _ = writeln!(out, r##"<rect x="{:.0}" y="{P}" width="{W}" height="{H}" fill="none" stroke="#555"/>"##, x0 + P);
    for (&x, &y) in xs.iter().zip(ys) {
        let px = x0 + P + (x - xl) / (xh - xl) * W;
        let py = P + H - (y - yl) / (yh - yl) * H;
        let _ = writeln!(out, r##"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="#1f77b4" fill-opacity="0.7"/>"##);
    }
    let font = r#"font-family="sans-serif" font-size="11""#;
    let _ = writeln!(out, r#"<text x="{:.0}" y="{:.0}" {font}>{title}</text>"#, x0 + P, P - 8.0);
    let _ = writeln!(out, r#"<text x="{:.0}" y="{:.0}" {font}>{xl:.3}</text>"#, x0 + P, P + H + 14.0);
    let _ = writeln!(out, r#"<text x="{:.0}" y="{:.0}" {font} text-anchor="end">{xh:.3}</text>"#, x0 + P + W, P + H + 14.0);
    let _ = writeln!(out, r#"<text x="{:.0}" y="{:.0}" {font} text-anchor="end">{yh:.3}</text>"#, x0 + P - 4.0, P + 10.0);
    let _ = writeln!(out, r#"<text x="{:.0}" y="{:.0}" {font} text-anchor="end">{yl:.3}</text>"#, x0 + P - 4.0, P + H);
}

/// AvgUcty vs SADE across the modes, plus error probability vs SADE when
/// the mode set carries one.
pub fn scatter_svg(f: &ModeSetFile) -> Result<String, CliError> {
    let sade = per_mode_sade(&f.modes, &f.scene.x, &f.scene.mask)?;
    let ucty: Vec<f64> = f.modes.modes.iter().map(avg_ucty).collect();
    let panels = 1 + usize::from(f.modes.errors.is_some());
    let w = 440.0 * panels as f64;
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="380" viewBox="0 0 {w:.0} 380">"#);
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{w:.0}" height="380" fill="white"/>"#);
    scatter_panel(&mut out, 0.0, "AvgUcty (x) vs SADE (y)", &ucty, &sade);
    if let Some(e) = &f.modes.errors {
        scatter_panel(&mut out, 440.0, "error probability e (x) vs SADE (y)", e, &sade);
    }
    out.push_str("</svg>\n");
    Ok(out)
}
