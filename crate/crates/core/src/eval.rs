//! Detector evaluation: confusion matrices, ROC sweeps, and SJNR-binned
//! miss profiles, plus CSV emitters for all three.
//!
//! Reporting convention: the *positive* class is "no jamming" (H0), so a
//! true positive keeps a clean observation and a true negative flags a
//! jammed one. Detection and false-alarm probabilities use the opposite,
//! alarm-centric convention: P_D is the fraction of jammed observations
//! flagged, P_FA the fraction of clean observations flagged. Every function
//! here is a pure function of its inputs.

use std::fs;
use std::path::Path;

use crate::detector::{gamma_second_from_sorted, verdict_from_ratios, ThresholdSet};
use crate::dnn::{score, ModelParams};
use crate::error::{Error, Result};
use crate::features::{Label, Observation};

/// 2×2 confusion counts in the clean-positive convention (see the module
/// docs): `true_positive` counts clean observations kept, `true_negative`
/// jammed observations flagged, `false_positive` jammed observations waved
/// through (missed detections), and `false_negative` clean observations
/// flagged (false alarms).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub true_positive: usize,
    pub true_negative: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

impl ConfusionMatrix {
    pub fn n(&self) -> usize {
        self.true_positive + self.true_negative + self.false_positive + self.false_negative
    }

    /// Fraction of truly clean observations kept. NaN when none exist.
    pub fn true_positive_rate(&self) -> f64 {
        self.true_positive as f64 / (self.true_positive + self.false_negative) as f64
    }

    /// Fraction of truly clean observations flagged. NaN when none exist.
    pub fn false_negative_rate(&self) -> f64 {
        self.false_negative as f64 / (self.true_positive + self.false_negative) as f64
    }

    /// Fraction of truly jammed observations flagged. NaN when none exist.
    pub fn true_negative_rate(&self) -> f64 {
        self.true_negative as f64 / (self.true_negative + self.false_positive) as f64
    }

    /// Fraction of truly jammed observations waved through. NaN when none
    /// exist.
    pub fn false_positive_rate(&self) -> f64 {
        self.false_positive as f64 / (self.true_negative + self.false_positive) as f64
    }
}

/// Tally verdicts against ground-truth labels.
pub fn confusion(verdicts: &[Label], labels: &[Label]) -> Result<ConfusionMatrix> {
    if verdicts.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} verdicts against {} labels",
            verdicts.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (&verdict, &label) in verdicts.iter().zip(labels) {
        match (label, verdict) {
            (Label::H0, Label::H0) => m.true_positive += 1,
            (Label::H0, Label::H1) => m.false_negative += 1,
            (Label::H1, Label::H1) => m.true_negative += 1,
            (Label::H1, Label::H0) => m.false_positive += 1,
        }
    }
    Ok(m)
}

/// One operating point: empirical false-alarm and detection probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub p_fa: f64,
    pub p_d: f64,
}

/// Operating curves for the two decision rules over one test set.
///
/// Both curves run from the never-alarm endpoint (0, 0) to the always-alarm
/// endpoint (1, 1) and are nondecreasing in both coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// The full two-network rule: first-stage deferral band held fixed,
    /// second-stage alarm threshold recalibrated per false-alarm target.
    pub double_threshold: Vec<RocPoint>,
    /// The first network alone, its evidence ratio swept through every
    /// decision threshold the test set distinguishes.
    pub single_threshold: Vec<RocPoint>,
}

fn ratios_of(model: &ModelParams<f32>, observations: &[Observation]) -> Result<Vec<f64>> {
    Ok(score(model, observations)?.iter().map(|s| s.ratio()).collect())
}

/// Sweep operating points on a labeled test set.
///
/// For each false-alarm target in `fa_grid`, the second-stage threshold is
/// recalibrated on the H0 observations of `calibration` (the first-stage
/// band stays at `thresholds`) and the resulting rule is measured on
/// `testset`; the single-threshold curve sweeps the first network's ratio
/// directly. Models are scored once per set, not once per target.
pub fn roc_curve(
    model1: &ModelParams<f32>,
    model2: &ModelParams<f32>,
    thresholds: &ThresholdSet,
    calibration: &[Observation],
    testset: &[Observation],
    fa_grid: &[f64],
) -> Result<RocCurve> {
    for &delta in fa_grid {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid(format!(
                "false-alarm target {delta} must lie strictly in (0, 1)"
            )));
        }
    }
    let labels: Vec<Label> = testset
        .iter()
        .enumerate()
        .map(|(i, o)| {
            o.label
                .ok_or_else(|| Error::invalid(format!("test observation {i} is unlabeled")))
        })
        .collect::<Result<_>>()?;
    let n_h0 = labels.iter().filter(|&&l| l == Label::H0).count();
    let n_h1 = labels.len() - n_h0;
    if n_h0 == 0 || n_h1 == 0 {
        return Err(Error::invalid("the test set must contain both classes"));
    }
    let h0_calibration: Vec<Observation> = calibration
        .iter()
        .filter(|o| o.label == Some(Label::H0))
        .cloned()
        .collect();
    if h0_calibration.is_empty() {
        return Err(Error::invalid("the calibration set must contain H0 observations"));
    }

    let g1 = ratios_of(model1, testset)?;
    let g2 = ratios_of(model2, testset)?;
    let mut calibration_ratios = ratios_of(model2, &h0_calibration)?;
    calibration_ratios.sort_by(|a, b| b.partial_cmp(a).expect("ratios are never NaN"));

    let mut targets = fa_grid.to_vec();
    targets.sort_by(|a, b| a.partial_cmp(b).expect("targets were validated finite"));

    let mut double_threshold = vec![RocPoint { p_fa: 0.0, p_d: 0.0 }];
    for delta in targets {
        let swept = ThresholdSet {
            gamma_second: gamma_second_from_sorted(&calibration_ratios, delta),
            delta_fa: delta,
            ..*thresholds
        };
        let mut fa = 0usize;
        let mut d = 0usize;
        for ((&r1, &r2), &label) in g1.iter().zip(&g2).zip(&labels) {
            if verdict_from_ratios(r1, r2, &swept) == Label::H1 {
                match label {
                    Label::H0 => fa += 1,
                    Label::H1 => d += 1,
                }
            }
        }
        double_threshold.push(RocPoint {
            p_fa: fa as f64 / n_h0 as f64,
            p_d: d as f64 / n_h1 as f64,
        });
    }
    double_threshold.push(RocPoint { p_fa: 1.0, p_d: 1.0 });

    // Empirical single-threshold curve: alarm whenever Γ¹ ≥ τ, with τ swept
    // through every distinct observed ratio from the top down.
    let mut ranked: Vec<(f64, Label)> = g1.iter().copied().zip(labels).collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("ratios are never NaN"));
    let mut single_threshold = vec![RocPoint { p_fa: 0.0, p_d: 0.0 }];
    let mut fa = 0usize;
    let mut d = 0usize;
    let mut i = 0;
    while i < ranked.len() {
        let tau = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == tau {
            match ranked[i].1 {
                Label::H0 => fa += 1,
                Label::H1 => d += 1,
            }
            i += 1;
        }
        single_threshold.push(RocPoint {
            p_fa: fa as f64 / n_h0 as f64,
            p_d: d as f64 / n_h1 as f64,
        });
    }

    Ok(RocCurve { double_threshold, single_threshold })
}

/// Missed detections (jammed observations cleared as clean) histogrammed
/// over SJNR bins.
///
/// Bin `i` spans `[bin_edges_db[i], bin_edges_db[i+1])`, with the last bin
/// closed on the right. `total_misses` counts every miss with a recorded
/// SJNR, including any falling outside the binned range.
#[derive(Debug, Clone, PartialEq)]
pub struct SjnrMissProfile {
    pub bin_edges_db: Vec<f64>,
    pub counts: Vec<usize>,
    pub total_misses: usize,
}

/// Histogram missed detections by the SJNR recorded on each observation.
pub fn sjnr_miss_profile(
    verdicts: &[Label],
    observations: &[Observation],
    bin_edges_db: &[f64],
) -> Result<SjnrMissProfile> {
    if verdicts.len() != observations.len() {
        return Err(Error::invalid(format!(
            "{} verdicts against {} observations",
            verdicts.len(),
            observations.len()
        )));
    }
    if bin_edges_db.len() < 2 {
        return Err(Error::invalid("at least two bin edges are required"));
    }
    if bin_edges_db.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("bin edges must be strictly increasing"));
    }
    let mut counts = vec![0usize; bin_edges_db.len() - 1];
    let mut total_misses = 0usize;
    for (&verdict, o) in verdicts.iter().zip(observations) {
        if o.label != Some(Label::H1) || verdict != Label::H0 {
            continue;
        }
        let Some(sjnr) = o.meta.sjnr_db else { continue };
        total_misses += 1;
        let below_or_at = bin_edges_db.partition_point(|e| *e <= sjnr);
        if below_or_at == bin_edges_db.len() && sjnr == *bin_edges_db.last().unwrap() {
            *counts.last_mut().unwrap() += 1;
        } else if below_or_at > 0 && below_or_at < bin_edges_db.len() {
            counts[below_or_at - 1] += 1;
        }
    }
    Ok(SjnrMissProfile { bin_edges_db: bin_edges_db.to_vec(), counts, total_misses })
}

/// Write an operating curve as CSV with columns `p_fa,p_d,variant`, where
/// the variant is `double_threshold` or `single_threshold`.
pub fn write_roc_csv(curve: &RocCurve, path: &Path) -> Result<()> {
    let mut out = String::from("p_fa,p_d,variant\n");
    for p in &curve.double_threshold {
        out.push_str(&format!("{},{},double_threshold\n", p.p_fa, p.p_d));
    }
    for p in &curve.single_threshold {
        out.push_str(&format!("{},{},single_threshold\n", p.p_fa, p.p_d));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write a confusion matrix as CSV: a legend comment pinning the
/// clean-positive convention, then one `count` and one `rate` row.
pub fn write_confusion_csv(matrix: &ConfusionMatrix, path: &Path) -> Result<()> {
    let out = format!(
        "# positive = clean (H0), negative = jammed (H1): a true positive keeps a clean \
         observation, a true negative flags a jammed one\n\
         quantity,true_positive,true_negative,false_positive,false_negative\n\
         count,{},{},{},{}\n\
         rate,{},{},{},{}\n",
        matrix.true_positive,
        matrix.true_negative,
        matrix.false_positive,
        matrix.false_negative,
        matrix.true_positive_rate(),
        matrix.true_negative_rate(),
        matrix.false_positive_rate(),
        matrix.false_negative_rate(),
    );
    fs::write(path, out)?;
    Ok(())
}

/// Write a miss profile as CSV with columns `bin_low_db,bin_high_db,misses`.
pub fn write_sjnr_miss_csv(profile: &SjnrMissProfile, path: &Path) -> Result<()> {
    let mut out = String::from("bin_low_db,bin_high_db,misses\n");
    for (w, count) in profile.bin_edges_db.windows(2).zip(&profile.counts) {
        out.push_str(&format!("{},{},{count}\n", w[0], w[1]));
    }
    fs::write(path, out)?;
    Ok(())
}
