//! Displacement errors, uncertainty quality, rank correlation and Top-k
//! selection.

use serde::{Deserialize, Serialize};

use crate::diffusion::{ModeSet, PosteriorField};
use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::tensor::Field;

/// Two-sided 95% standard-normal quantile.
pub const Z95: f64 = 1.96;
/// 95% quantile of chi-square with 2 degrees of freedom, `-2 ln 0.05`.
pub const CHI2_2DOF_95: f64 = 5.991_464_547_107_979;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Region counted as "inside the predicted distribution".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    /// Both coordinates within `Z95` standard deviations.
    #[default]
    PerCoordinate,
    /// Mahalanobis distance within the 2-dof chi-square quantile.
    Elliptical,
}

fn check(pred: &Field, gt: &Field, mask: &Mask) -> Result<()> {
    pred.check_same_shape(gt, "prediction vs ground truth")?;
    if mask.shape() != gt.shape() {
        return Err(Error::dim(format!(
            "mask is {:?}, scene is {:?}",
            mask.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Euclidean error averaged over the unobserved states.
pub fn sade(pred: &Field, gt: &Field, mask: &Mask) -> Result<f64> {
    check(pred, gt, mask)?;
    let (t, n) = gt.shape();
    let (mut sum, mut count) = (0.0, 0usize);
    for ti in 0..t {
        for ni in 0..n {
            if !mask.observed(ti, ni) {
                sum += dist(pred.get(ti, ni), gt.get(ti, ni));
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::param("mask", "no unobserved state to evaluate"));
    }
    Ok(sum / count as f64)
}

/// Last unobserved timestep of every agent (`None` if fully observed).
pub fn final_unobserved(mask: &Mask) -> Vec<Option<usize>> {
    let (t, n) = mask.shape();
    (0..n)
        .map(|ni| (0..t).rev().find(|&ti| !mask.observed(ti, ni)))
        .collect()
}

/// Euclidean error at each agent's last unobserved timestep, averaged over
/// agents that have one.
pub fn sfde(pred: &Field, gt: &Field, mask: &Mask) -> Result<f64> {
    check(pred, gt, mask)?;
    let finals = final_unobserved(mask);
    let errs: Vec<f64> = finals
        .iter()
        .enumerate()
        .filter_map(|(ni, f)| f.map(|ti| dist(pred.get(ti, ni), gt.get(ti, ni))))
        .collect();
    if errs.is_empty() {
        return Err(Error::param("mask", "no unobserved state to evaluate"));
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Per-agent masked ADE; `None` for fully observed agents.
pub fn agent_ade(pred: &Field, gt: &Field, mask: &Mask) -> Result<Vec<Option<f64>>> {
    check(pred, gt, mask)?;
    let (t, n) = gt.shape();
    Ok((0..n)
        .map(|ni| {
            let errs: Vec<f64> = (0..t)
                .filter(|&ti| !mask.observed(ti, ni))
                .map(|ti| dist(pred.get(ti, ni), gt.get(ti, ni)))
                .collect();
            (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
        })
        .collect())
}

pub fn agent_fde(pred: &Field, gt: &Field, mask: &Mask) -> Result<Vec<Option<f64>>> {
    check(pred, gt, mask)?;
    Ok(final_unobserved(mask)
        .iter()
        .enumerate()
        .map(|(ni, f)| f.map(|ti| dist(pred.get(ti, ni), gt.get(ti, ni))))
        .collect())
}

/// Minimum with the lowest index winning ties.
fn argmin(values: &[f64]) -> (f64, usize) {
    let mut best = (values[0], 0);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < best.0 {
            best = (v, i);
        }
    }
    best
}

pub fn per_mode_sade(modes: &ModeSet, gt: &Field, mask: &Mask) -> Result<Vec<f64>> {
    modes.modes.iter().map(|m| sade(&m.mean, gt, mask)).collect()
}

/// Best scene-level SADE over modes and the index achieving it.
pub fn min_sade_k(modes: &ModeSet, gt: &Field, mask: &Mask) -> Result<(f64, usize)> {
    Ok(argmin(&per_mode_sade(modes, gt, mask)?))
}

pub fn min_sfde_k(modes: &ModeSet, gt: &Field, mask: &Mask) -> Result<(f64, usize)> {
    let v = modes
        .modes
        .iter()
        .map(|m| sfde(&m.mean, gt, mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmin(&v))
}

fn agentwise_min(per_mode: Vec<Vec<Option<f64>>>) -> Result<f64> {
    let n = per_mode[0].len();
    let mins: Vec<f64> = (0..n)
        .filter_map(|ni| {
            per_mode
                .iter()
                .filter_map(|m| m[ni])
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
        })
        .collect();
    if mins.is_empty() {
        return Err(Error::param("mask", "no unobserved state to evaluate"));
    }
    Ok(mins.iter().sum::<f64>() / mins.len() as f64)
}

/// Per agent, the best mode's masked ADE; averaged over agents.
pub fn min_ade_k(modes: &ModeSet, gt: &Field, mask: &Mask) -> Result<f64> {
    agentwise_min(
        modes
            .modes
            .iter()
            .map(|m| agent_ade(&m.mean, gt, mask))
            .collect::<Result<_>>()?,
    )
}

pub fn min_fde_k(modes: &ModeSet, gt: &Field, mask: &Mask) -> Result<f64> {
    agentwise_min(
        modes
            .modes
            .iter()
            .map(|m| agent_fde(&m.mean, gt, mask))
            .collect::<Result<_>>()?,
    )
}

fn covered(err: [f64; 2], var: [f64; 2], rule: Coverage) -> bool {
    if var[0] == 0.0 || var[1] == 0.0 {
        // degenerate distribution: only an exact hit counts
        let exact = |c: usize| var[c] > 0.0 || err[c] == 0.0;
        if !(exact(0) && exact(1)) {
            return false;
        }
    }
    match rule {
        Coverage::PerCoordinate => (0..2).all(|c| err[c].abs() <= Z95 * var[c].sqrt()),
        Coverage::Elliptical => {
            let d2: f64 = (0..2)
                .filter(|&c| var[c] > 0.0)
                .map(|c| err[c] * err[c] / var[c])
                .sum();
            d2 <= CHI2_2DOF_95
        }
    }
}

/// Percentage of unobserved ground-truth states inside the 95% region.
pub fn acc_rate(field: &PosteriorField, gt: &Field, mask: &Mask, rule: Coverage) -> Result<f64> {
    check(&field.mean, gt, mask)?;
    let (t, n) = gt.shape();
    let (mut hit, mut count) = (0usize, 0usize);
    for ti in 0..t {
        for ni in 0..n {
            if mask.observed(ti, ni) {
                continue;
            }
            let (m, g) = (field.mean.get(ti, ni), gt.get(ti, ni));
            if covered([g[0] - m[0], g[1] - m[1]], field.var.get(ti, ni), rule) {
                hit += 1;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::param("mask", "no unobserved state to evaluate"));
    }
    Ok(100.0 * hit as f64 / count as f64)
}

fn nll_over(field: &PosteriorField, gt: &Field, mask: &Mask, observed: bool) -> Result<f64> {
    check(&field.mean, gt, mask)?;
    let (t, n) = gt.shape();
    let (mut sum, mut count) = (0.0, 0usize);
    for ti in 0..t {
        for ni in 0..n {
            if mask.observed(ti, ni) != observed {
                continue;
            }
            let (m, g, v) = (field.mean.get(ti, ni), gt.get(ti, ni), field.var.get(ti, ni));
            for c in 0..2 {
                if !(v[c] > 0.0) {
                    return Err(Error::Domain(format!(
                        "variance must be positive, got {} at t={ti} n={ni}",
                        v[c]
                    )));
                }
                let r = g[c] - m[c];
                sum += LN_SQRT_2PI + 0.5 * v[c].ln() + r * r / (2.0 * v[c]);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::param("mask", "no state selected for the NLL"));
    }
    Ok(sum / count as f64)
}

/// Gaussian NLL averaged over the unobserved states and their coordinates.
pub fn gaussian_nll(field: &PosteriorField, gt: &Field, mask: &Mask) -> Result<f64> {
    nll_over(field, gt, mask, false)
}

/// Gaussian NLL over the observed (conditioning) states.
pub fn gaussian_nll_observed(field: &PosteriorField, gt: &Field, mask: &Mask) -> Result<f64> {
    nll_over(field, gt, mask, true)
}

/// 1-based ranks; tied values share their mean rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::param("K", "correlation needs at least two values"));
    }
    let k = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / k, b.iter().sum::<f64>() / k);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("lengths {} and {}", a.len(), b.len())));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Indices of the `k` lowest scores, ties broken by index.
pub fn top_k_select(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::param("k", format!("must lie in 1..={}, got {k}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx.truncate(k);
    Ok(idx)
}

/// minSADE over the `k` modes with the lowest predicted error.
pub fn evaluate_topk(modes: &ModeSet, scores: &[f64], gt: &Field, mask: &Mask, k: usize) -> Result<f64> {
    if scores.len() != modes.len() {
        return Err(Error::dim(format!("{} scores for {} modes", scores.len(), modes.len())));
    }
    let sel = top_k_select(scores, k)?;
    let v = sel
        .iter()
        .map(|&i| sade(&modes.modes[i].mean, gt, mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmin(&v).0)
}

/// Metrics of one scene's mode set.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub min_sade: f64,
    pub min_sfde: f64,
    pub acc_rate: f64,
    pub nll: f64,
    pub rho: Option<f64>,
}

/// `scores`, if given, are per-mode error estimates correlated against the
/// per-mode SADE. AccRate and NLL are averaged over the modes.
pub fn scene_metrics(
    modes: &ModeSet,
    gt: &Field,
    mask: &Mask,
    scores: Option<&[f64]>,
    rule: Coverage,
) -> Result<SceneMetrics> {
    let k = modes.len() as f64;
    let mut acc = 0.0;
    let mut nll = 0.0;
    for m in &modes.modes {
        acc += acc_rate(m, gt, mask, rule)?;
        nll += gaussian_nll(m, gt, mask)?;
    }
    let rho = match scores {
        Some(s) => match spearman(s, &per_mode_sade(modes, gt, mask)?) {
            Ok(r) => Some(r),
            Err(Error::UndefinedCorrelation) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    Ok(SceneMetrics {
        min_ade: min_ade_k(modes, gt, mask)?,
        min_fde: min_fde_k(modes, gt, mask)?,
        min_sade: min_sade_k(modes, gt, mask)?.0,
        min_sfde: min_sfde_k(modes, gt, mask)?.0,
        acc_rate: acc / k,
        nll: nll / k,
        rho,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub min_sade: f64,
    pub min_sfde: f64,
    pub acc_rate: f64,
    pub nll: f64,
    pub per_scene_rho: Vec<f64>,
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let h = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[h] } else { 0.5 * (s[h - 1] + s[h]) })
}

impl EvalReport {
    pub fn from_scenes(scenes: &[SceneMetrics]) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::param("scenes", "nothing to evaluate"));
        }
        let k = scenes.len() as f64;
        let mean = |f: fn(&SceneMetrics) -> f64| scenes.iter().map(f).sum::<f64>() / k;
        Ok(EvalReport {
            scenes: scenes.len(),
            min_ade: mean(|s| s.min_ade),
            min_fde: mean(|s| s.min_fde),
            min_sade: mean(|s| s.min_sade),
            min_sfde: mean(|s| s.min_sfde),
            acc_rate: mean(|s| s.acc_rate),
            nll: mean(|s| s.nll),
            per_scene_rho: scenes.iter().filter_map(|s| s.rho).collect(),
        })
    }

    pub fn rho_mean(&self) -> Option<f64> {
        (!self.per_scene_rho.is_empty())
            .then(|| self.per_scene_rho.iter().sum::<f64>() / self.per_scene_rho.len() as f64)
    }

    pub fn rho_median(&self) -> Option<f64> {
        median(&self.per_scene_rho)
    }

    /// `key value` lines with fixed key names; undefined correlations print
    /// as `nan`.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.8e}"));
        format!(
            "scenes {}\nmin_ade {:.8e}\nmin_fde {:.8e}\nmin_sade {:.8e}\nmin_sfde {:.8e}\nacc_rate {:.8e}\nnll {:.8e}\nrho_mean {}\nrho_median {}\n",
            self.scenes,
            self.min_ade,
            self.min_fde,
            self.min_sade,
            self.min_sfde,
            self.acc_rate,
            self.nll,
            opt(self.rho_mean()),
            opt(self.rho_median()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_state() -> (Field, Mask) {
        (Field::zeros(1, 1), Mask::from_fn(1, 1, |_, _| false))
    }

    fn posterior(mean: Field, var: f64) -> PosteriorField {
        let (t, n) = mean.shape();
        PosteriorField::new(mean, Field::filled(t, n, var)).unwrap()
    }

    #[test]
    fn sade_examples() {
        let (gt, mask) = one_state();
        assert_eq!(sade(&gt, &gt, &mask).unwrap(), 0.0);
        let pred = Field::from_vec(1, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(sade(&pred, &gt, &mask).unwrap(), 5.0);
        let gt2 = Field::zeros(1, 2);
        let pred2 = Field::from_vec(1, 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let m2 = Mask::from_fn(1, 2, |_, _| false);
        assert_eq!(sade(&pred2, &gt2, &m2).unwrap(), 2.0);
        let all = Mask::from_fn(1, 1, |_, _| true);
        assert!(sade(&gt, &gt, &all).is_err());
    }

    #[test]
    fn duplicated_best_mode_keeps_lowest_index() {
        let (gt, mask) = one_state();
        let far = posterior(Field::filled(1, 1, 2.0), 1.0);
        let near = posterior(Field::filled(1, 1, 1.0), 1.0);
        let set = ModeSet::new(vec![far, near.clone(), near]).unwrap();
        let (v, i) = min_sade_k(&set, &gt, &mask).unwrap();
        assert_eq!(i, 1);
        assert_eq!(v, 2f64.sqrt());
    }

    #[test]
    fn agentwise_selection_by_hand() {
        // mode 0 good for agent 0, mode 1 good for agent 1
        let gt = Field::zeros(1, 2);
        let mask = Mask::from_fn(1, 2, |_, _| false);
        let m0 = Field::from_vec(1, 2, vec![1.0, 0.0, 4.0, 0.0]).unwrap();
        let m1 = Field::from_vec(1, 2, vec![3.0, 0.0, 2.0, 0.0]).unwrap();
        let set = ModeSet::new(vec![posterior(m0, 1.0), posterior(m1, 1.0)]).unwrap();
        assert_eq!(min_ade_k(&set, &gt, &mask).unwrap(), 1.5);
        assert_eq!(min_sade_k(&set, &gt, &mask).unwrap(), (2.5, 0));
        assert_eq!(min_fde_k(&set, &gt, &mask).unwrap(), 1.5);
    }

    #[test]
    fn coverage_examples() {
        let (gt, mask) = one_state();
        assert_eq!(acc_rate(&posterior(gt.clone(), 1.0), &gt, &mask, Coverage::PerCoordinate).unwrap(), 100.0);
        let off = Field::from_vec(1, 1, vec![-3.0, 0.0]).unwrap();
        assert_eq!(acc_rate(&posterior(off, 1.0), &gt, &mask, Coverage::PerCoordinate).unwrap(), 0.0);
        // zero variance: covered only on an exact hit
        assert_eq!(acc_rate(&posterior(gt.clone(), 0.0), &gt, &mask, Coverage::PerCoordinate).unwrap(), 100.0);
        let tiny = Field::from_vec(1, 1, vec![1e-12, 0.0]).unwrap();
        assert_eq!(acc_rate(&posterior(tiny, 0.0), &gt, &mask, Coverage::Elliptical).unwrap(), 0.0);
    }

    #[test]
    fn elliptical_region_is_a_disc() {
        let (gt, mask) = one_state();
        let r = CHI2_2DOF_95.sqrt();
        let inside = Field::from_vec(1, 1, vec![0.99 * r / 2f64.sqrt(), 0.99 * r / 2f64.sqrt()]).unwrap();
        let outside = Field::from_vec(1, 1, vec![1.01 * r / 2f64.sqrt(), 1.01 * r / 2f64.sqrt()]).unwrap();
        assert_eq!(acc_rate(&posterior(inside, 1.0), &gt, &mask, Coverage::Elliptical).unwrap(), 100.0);
        assert_eq!(acc_rate(&posterior(outside, 1.0), &gt, &mask, Coverage::Elliptical).unwrap(), 0.0);
    }

    #[test]
    fn nll_examples() {
        let (gt, mask) = one_state();
        let v = gaussian_nll(&posterior(gt.clone(), 1.0), &gt, &mask).unwrap();
        assert!((v - 0.918939).abs() < 1e-6);
        let h = gaussian_nll(&posterior(gt.clone(), 0.25), &gt, &mask).unwrap();
        assert!((v - h - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            gaussian_nll(&posterior(gt.clone(), 0.0), &gt, &mask),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn spearman_examples() {
        let a = [0.3, 1.0, -2.0, 5.0];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let r: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((spearman(&a, &r).unwrap() + 1.0).abs() < 1e-15);
        let rho = spearman(&[1.0, 2.0, 4.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((rho - (1.0 - 6.0 * 2.0 / (4.0 * 15.0))).abs() < 1e-12);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation)));
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn topk_selection() {
        assert_eq!(top_k_select(&[0.5, 0.1, 0.5, 0.0], 3).unwrap(), vec![3, 1, 0]);
        assert!(top_k_select(&[0.1], 0).is_err());
        assert!(top_k_select(&[0.1], 2).is_err());
    }

    #[test]
    fn report_text_keys() {
        let s = SceneMetrics {
            min_ade: 1.0,
            min_fde: 2.0,
            min_sade: 1.5,
            min_sfde: 2.5,
            acc_rate: 90.0,
            nll: 0.5,
            rho: Some(0.2),
        };
        let r = EvalReport::from_scenes(&[s.clone(), SceneMetrics { rho: None, ..s }]).unwrap();
        let text = r.to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(' ').next().unwrap()).collect();
        assert_eq!(
            keys,
            ["scenes", "min_ade", "min_fde", "min_sade", "min_sfde", "acc_rate", "nll", "rho_mean", "rho_median"]
        );
        assert_eq!(r.per_scene_rho, vec![0.2]);
    }
}
