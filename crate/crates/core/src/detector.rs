//! Two-stage detection with a deferral band.
//!
//! The first network screens every observation by its evidence ratio
//! Γ¹ = ζ_H1/ζ_H0. Ratios below the lower threshold clear as H0 and ratios
//! above the upper threshold alarm as H1 — the two thresholds are placed so
//! that, on the calibration set, every decision made outside the band is
//! correct. Anything inside the band (boundaries included) defers to the
//! second, block-wise-trained network, whose single threshold is the order
//! statistic of H0 calibration ratios that caps the empirical false-alarm
//! rate at a chosen target.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dnn::{score, ModelParams, ScorePair};
use crate::error::{Error, Result};
use crate::features::{Label, Observation};

/// Evidence ratio Γ = ζ_H1/ζ_H0 with the denominator floored at 1e-12.
pub fn score_ratio(scores: ScorePair) -> f64 {
    scores.ratio()
}

/// Calibrated decision thresholds.
///
/// `gamma1`/`gamma2` bound the first network's deferral band (−∞/+∞
/// sentinels mean "defer everything from that side"); `gamma_second` is the
/// second network's alarm threshold, derived from the false-alarm target
/// `delta_fa`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSet {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma_second: f64,
    pub delta_fa: f64,
}

impl ThresholdSet {
    pub fn new(gamma1: f64, gamma2: f64, gamma_second: f64, delta_fa: f64) -> Result<Self> {
        if gamma1.is_nan() || gamma2.is_nan() || gamma_second.is_nan() {
            return Err(Error::invalid("thresholds must not be NaN"));
        }
        if gamma1 > gamma2 {
            return Err(Error::invalid(format!(
                "lower threshold {gamma1} exceeds upper threshold {gamma2}"
            )));
        }
        if !(delta_fa > 0.0 && delta_fa < 1.0) {
            return Err(Error::invalid("false-alarm target must lie strictly in (0, 1)"));
        }
        Ok(Self { gamma1, gamma2, gamma_second, delta_fa })
    }

    /// Write as UTF-8 `key=value` lines. Finite values carry 17 significant
    /// digits so they reparse exactly; infinities are written `inf`/`-inf`.
    pub fn save(&self, path: &Path) -> Result<()> {
        fn fmt(v: f64) -> String {
            if v == f64::INFINITY {
                "inf".to_string()
            } else if v == f64::NEG_INFINITY {
                "-inf".to_string()
            } else {
                format!("{v:.16e}")
            }
        }
        let text = format!(
            "gamma1={}\ngamma2={}\ngamma_second={}\ndelta_fa={}\n",
            fmt(self.gamma1),
            fmt(self.gamma2),
            fmt(self.gamma_second),
            fmt(self.delta_fa)
        );
        fs::write(path, text)?;
        Ok(())
    }

    /// Parse a file written by [`ThresholdSet::save`]. Every key must appear
    /// exactly once; blank lines are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut gamma1 = None;
        let mut gamma2 = None;
        let mut gamma_second = None;
        let mut delta_fa = None;
        let mut n_lines = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            n_lines = line;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(Error::Parse {
                line,
                msg: "expected key=value".to_string(),
            })?;
            let value: f64 = value.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("cannot parse `{}` as a number", value.trim()),
            })?;
            let slot = match key.trim() {
                "gamma1" => &mut gamma1,
                "gamma2" => &mut gamma2,
                "gamma_second" => &mut gamma_second,
                "delta_fa" => &mut delta_fa,
                other => {
                    return Err(Error::Parse { line, msg: format!("unknown key `{other}`") });
                }
            };
            if slot.replace(value).is_some() {
                return Err(Error::Parse { line, msg: format!("duplicate key `{}`", key.trim()) });
            }
        }
        let missing = [
            ("gamma1", gamma1),
            ("gamma2", gamma2),
            ("gamma_second", gamma_second),
            ("delta_fa", delta_fa),
        ];
        for (name, v) in &missing {
            if v.is_none() {
                return Err(Error::Parse {
                    line: n_lines + 1,
                    msg: format!("missing key `{name}`"),
                });
            }
        }
        ThresholdSet::new(
            gamma1.unwrap(),
            gamma2.unwrap(),
            gamma_second.unwrap(),
            delta_fa.unwrap(),
        )
        .map_err(|e| Error::Parse { line: n_lines + 1, msg: e.to_string() })
    }
}

/// Which network produced the verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Dnn1,
    Dnn2,
}

/// Outcome of detecting one observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub verdict: Label,
    pub stage: Stage,
    /// First network's evidence ratio, always computed.
    pub gamma_ratio_1: f64,
    /// Second network's evidence ratio, present iff the decision deferred.
    pub gamma_ratio_2: Option<f64>,
}

/// Count of decisions in each (stage, verdict) cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DetectStats {
    pub n: usize,
    pub dnn1_h0: usize,
    pub dnn1_h1: usize,
    pub dnn2_h0: usize,
    pub dnn2_h1: usize,
}

impl DetectStats {
    /// Fraction of observations that deferred to the second network
    /// (0 for an empty batch).
    pub fn deferral_fraction(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.dnn2_h0 + self.dnn2_h1) as f64 / self.n as f64
        }
    }
}

/// Sort ratios descending; at ties, H0 sorts before H1 and original order
/// breaks any remainder, so the pure-class runs below are as conservative
/// (short) as possible.
fn sort_scored(scored: &mut [(f64, Label)]) {
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("ratios are never NaN")
            .then_with(|| (a.1 == Label::H1).cmp(&(b.1 == Label::H1)))
    });
}

/// Deferral band from scored calibration data: `gamma2` is the ratio of the
/// last observation in the maximal all-H1 prefix of the descending order,
/// `gamma1` the ratio of the first observation in the maximal all-H0 suffix.
/// An empty prefix/suffix yields a +∞/−∞ sentinel (that side always defers).
pub(crate) fn double_threshold_from_scores(scored: &mut [(f64, Label)]) -> (f64, f64) {
    sort_scored(scored);
    let prefix_len = scored.iter().take_while(|(_, l)| *l == Label::H1).count();
    let gamma2 = if prefix_len == 0 { f64::INFINITY } else { scored[prefix_len - 1].0 };
    let suffix_start =
        scored.len() - scored.iter().rev().take_while(|(_, l)| *l == Label::H0).count();
    let gamma1 =
        if suffix_start == scored.len() { f64::NEG_INFINITY } else { scored[suffix_start].0 };
    // The descending order makes gamma1 ≤ gamma2 structurally; collapse to a
    // single point if floating-point pathology ever crossed them.
    if gamma1 > gamma2 {
        let mid = 0.5 * (gamma1 + gamma2);
        (mid, mid)
    } else {
        (gamma1, gamma2)
    }
}

/// Alarm threshold from descending H0 ratios: the value at 1-based rank
/// ⌊delta_fa·N⌋, or +∞ when that rank is 0 (never alarm).
pub(crate) fn gamma_second_from_ratios(ratios: &mut [f64], delta_fa: f64) -> f64 {
    ratios.sort_by(|a, b| b.partial_cmp(a).expect("ratios are never NaN"));
    gamma_second_from_sorted(ratios, delta_fa)
}

/// [`gamma_second_from_ratios`] against ratios already sorted descending
/// (lets a caller sweep many false-alarm targets over one sort).
pub(crate) fn gamma_second_from_sorted(sorted_desc: &[f64], delta_fa: f64) -> f64 {
    let mut rank = (delta_fa * sorted_desc.len() as f64).floor() as usize;
    // Alarms are ratios at or above the returned threshold, so a tie group
    // spanning the cut would alarm past the budget; retreat to its start.
    while rank > 0 && rank < sorted_desc.len() && sorted_desc[rank] == sorted_desc[rank - 1] {
        rank -= 1;
    }
    if rank == 0 {
        f64::INFINITY
    } else {
        sorted_desc[rank - 1]
    }
}

/// The verdict [`detect`] would reach for the given first- and second-stage
/// ratios: cleared or alarmed by the first ratio outside the deferral band,
/// otherwise decided by the second ratio against its alarm threshold. For
/// callers that have precomputed both ratios (threshold sweeps).
pub(crate) fn verdict_from_ratios(g1: f64, g2: f64, thresholds: &ThresholdSet) -> Label {
    if g1 < thresholds.gamma1 {
        Label::H0
    } else if g1 > thresholds.gamma2 || g2 >= thresholds.gamma_second {
        Label::H1
    } else {
        Label::H0
    }
}

/// Place the first network's deferral band on labeled calibration data so
/// that every calibration observation outside the band is classified
/// correctly. Returns `(gamma1, gamma2)`.
pub fn calibrate_double_threshold(
    model1: &ModelParams<f32>,
    calibration: &[Observation],
) -> Result<(f64, f64)> {
    let labels: Vec<Label> = calibration
        .iter()
        .enumerate()
        .map(|(i, o)| {
            o.label.ok_or_else(|| {
                Error::invalid(format!("calibration observation {i} is unlabeled"))
            })
        })
        .collect::<Result<_>>()?;
    if !labels.contains(&Label::H0) || !labels.contains(&Label::H1) {
        return Err(Error::invalid("calibration data must contain both classes"));
    }
    let scores = score(model1, calibration)?;
    let mut scored: Vec<(f64, Label)> =
        scores.iter().map(|s| s.ratio()).zip(labels).collect();
    Ok(double_threshold_from_scores(&mut scored))
}

/// Set the second network's alarm threshold from H0-labeled calibration data
/// so its empirical false-alarm rate is capped at `delta_fa`.
pub fn calibrate_gamma2(
    model2: &ModelParams<f32>,
    h0_calibration: &[Observation],
    delta_fa: f64,
) -> Result<f64> {
    if !(delta_fa > 0.0 && delta_fa < 1.0) {
        return Err(Error::invalid("false-alarm target must lie strictly in (0, 1)"));
    }
    if h0_calibration.is_empty() {
        return Err(Error::invalid("false-alarm calibration needs at least one observation"));
    }
    for (i, o) in h0_calibration.iter().enumerate() {
        if o.label != Some(Label::H0) {
            return Err(Error::invalid(format!(
                "false-alarm calibration observation {i} is not labeled H0"
            )));
        }
    }
    let mut ratios: Vec<f64> = score(model2, h0_calibration)?.iter().map(|s| s.ratio()).collect();
    Ok(gamma_second_from_ratios(&mut ratios, delta_fa))
}

/// Detect one observation: clear or alarm immediately when the first
/// network's ratio falls outside the deferral band, otherwise let the second
/// network decide (alarming on ratios at or above its threshold). Band
/// boundaries defer.
pub fn detect(
    obs: &Observation,
    model1: &ModelParams<f32>,
    model2: &ModelParams<f32>,
    thresholds: &ThresholdSet,
) -> Result<Decision> {
    let g1 = score(model1, std::slice::from_ref(obs))?[0].ratio();
    if g1 < thresholds.gamma1 {
        return Ok(Decision {
            verdict: Label::H0,
            stage: Stage::Dnn1,
            gamma_ratio_1: g1,
            gamma_ratio_2: None,
        });
    }
    if g1 > thresholds.gamma2 {
        return Ok(Decision {
            verdict: Label::H1,
            stage: Stage::Dnn1,
            gamma_ratio_1: g1,
            gamma_ratio_2: None,
        });
    }
    let g2 = score(model2, std::slice::from_ref(obs))?[0].ratio();
    let verdict = if g2 >= thresholds.gamma_second { Label::H1 } else { Label::H0 };
    Ok(Decision { verdict, stage: Stage::Dnn2, gamma_ratio_1: g1, gamma_ratio_2: Some(g2) })
}

/// Element-wise [`detect`] over a batch (parallel, order-preserving) plus
/// the (stage, verdict) cell counts.
pub fn detect_batch(
    observations: &[Observation],
    model1: &ModelParams<f32>,
    model2: &ModelParams<f32>,
    thresholds: &ThresholdSet,
) -> Result<(Vec<Decision>, DetectStats)> {
    let decisions: Vec<Decision> = observations
        .par_iter()
        .map(|o| detect(o, model1, model2, thresholds))
        .collect::<Result<_>>()?;
    let mut stats = DetectStats { n: decisions.len(), ..DetectStats::default() };
    for d in &decisions {
        match (d.stage, d.verdict) {
            (Stage::Dnn1, Label::H0) => stats.dnn1_h0 += 1,
            (Stage::Dnn1, Label::H1) => stats.dnn1_h1 += 1,
            (Stage::Dnn2, Label::H0) => stats.dnn2_h0 += 1,
            (Stage::Dnn2, Label::H1) => stats.dnn2_h1 += 1,
        }
    }
    Ok((decisions, stats))
}
