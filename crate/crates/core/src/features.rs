//! Observation tensors for the detector: PSS correlations compressed by a
//! two-stage Haar wavelet, plus the energy-per-null-resource-element probe.
//!
//! Each received SSB becomes a 5×(N_FFT/2) real tensor:
//!
//! * rows 0–2 — the magnitudes of the full linear cross-correlation between
//!   the received PSS symbol and each of the three candidate PSS waveforms,
//!   halved twice by keeping only the approximation branch of a Haar DWT
//!   (which doubles a wide correlation peak while quartering the length);
//! * rows 3–4 — the log₂ energy ε of symbol 0's 113 intentionally-empty
//!   resource elements (EPNRE), broadcast across both rows. Clean receptions
//!   leave those cells near the noise floor; in-band jamming fills them.
//!
//! A circular-shift style augmentation permutes correlation-row segments
//! identically across rows 0–2, teaching the downstream classifier that the
//! peak position carries no class information.

use crate::channel::JammerKind;
use crate::error::{Error, Result};
use crate::fft;
use crate::rng;
use crate::waveform::{
    build_ssb_grid, ofdm_modulate, Modulation, ResourceGrid, SSB_NULL_RES, SSB_SUBCARRIERS,
};
use num_complex::Complex64;
use rand::seq::SliceRandom;

/// Rows in an observation tensor.
pub const TENSOR_ROWS: usize = 5;
/// Lower clamp for the EPNRE log transform: `ε = log₂(max(E, 2^-60))`.
pub const EPSILON_FLOOR_LOG2: f64 = -60.0;

/// Binary hypothesis label: `H0` = clean reception, `H1` = jammed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    H0,
    H1,
}

/// Scenario descriptors carried alongside a tensor. Everything is optional:
/// synthesized observations know their ground truth, ingested captures don't.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObsMeta {
    /// Signal/(jamming+noise) ratio the scenario was generated at, dB.
    pub sjnr_db: Option<f64>,
    pub distance_m: Option<f64>,
    pub modulation: Option<Modulation>,
    pub jammer: Option<JammerKind>,
    pub n_id2: Option<u8>,
    pub seed: Option<u64>,
}

/// One 5×(N_FFT/2) observation tensor with its label and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Columns per row (N_FFT/2).
    pub cols: usize,
    /// Row-major 5×cols tensor.
    pub tensor: Vec<f32>,
    pub label: Option<Label>,
    pub meta: ObsMeta,
}

impl Observation {
    pub fn row(&self, r: usize) -> &[f32] {
        assert!(r < TENSOR_ROWS, "row index out of range");
        &self.tensor[r * self.cols..(r + 1) * self.cols]
    }
}

/// Magnitudes of the full linear cross-correlation against one candidate
/// PSS, padded to exactly `2·N_FFT` values.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSignal {
    pub n_id2: u8,
    pub values: Vec<f64>,
}

/// Time-domain PSS reference: the symbol-0 SSB waveform body (no cyclic
/// prefix) at the given DFT size.
pub fn pss_time_reference(n_id2: u8, n_fft: usize) -> Result<Vec<Complex64>> {
    let ssb = build_ssb_grid(n_id2)?;
    let mut pss_only = ResourceGrid::new(SSB_SUBCARRIERS, 1)?;
    for k in 0..SSB_SUBCARRIERS {
        pss_only.set_cell(0, k, ssb.cell(0, k));
    }
    // Subcarrier spacing does not affect the samples; any positive value works.
    Ok(ofdm_modulate(&pss_only, n_fft, 0, 1.0)?.samples)
}

/// Forward DFT of the conjugated, zero-padded reference, ready for
/// FFT-based correlation (length 2·N_FFT).
fn reference_fft_conj(reference: &[Complex64]) -> Vec<Complex64> {
    let l = 2 * reference.len();
    let mut buf = vec![Complex64::new(0.0, 0.0); l];
    buf[..reference.len()].copy_from_slice(reference);
    fft::forward(&mut buf);
    buf.iter_mut().for_each(|c| *c = c.conj());
    buf
}

/// Correlate `y_pss` against a prepared reference spectrum. Output index `i`
/// holds the magnitude at lag `i - (N_FFT - 1)`; index `2·N_FFT - 1` is the
/// padding zero.
fn correlate_against(y_pss: &[Complex64], ref_fft_conj: &[Complex64], n_id2: u8) -> CorrelationSignal {
    let n = y_pss.len();
    let l = 2 * n;
    debug_assert_eq!(ref_fft_conj.len(), l);
    let mut buf = vec![Complex64::new(0.0, 0.0); l];
    buf[..n].copy_from_slice(y_pss);
    fft::forward(&mut buf);
    for (c, &r) in buf.iter_mut().zip(ref_fft_conj) {
        *c *= r;
    }
    fft::inverse(&mut buf);
    let scale = 1.0 / l as f64;
    // Circular index t holds Σ_m ref*(m)·y(t+m mod L); linear lag s maps to
    // t = s mod L, so lag i-(N-1) lives at (i+N+1) mod 2N.
    let mut values = vec![0.0; l];
    for (i, v) in values.iter_mut().enumerate().take(l - 1) {
        *v = buf[(i + n + 1) % l].norm() * scale;
    }
    CorrelationSignal { n_id2, values }
}

/// Full linear cross-correlation magnitude between a received PSS symbol
/// (the DFT window, length N_FFT) and the candidate PSS waveform for
/// `n_id2`, padded to `2·N_FFT` values. A matching clean input peaks at
/// index `N_FFT - 1`.
pub fn pss_correlate(y_pss: &[Complex64], n_id2: u8) -> Result<CorrelationSignal> {
    if y_pss.is_empty() || !y_pss.len().is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "PSS window length must be even and nonzero, got {}",
            y_pss.len()
        )));
    }
    let reference = pss_time_reference(n_id2, y_pss.len())?;
    Ok(correlate_against(y_pss, &reference_fft_conj(&reference), n_id2))
}

/// One orthonormal Haar analysis stage:
/// `approx[n] = (x[2n] + x[2n+1])/√2`, `detail[n] = (x[2n] - x[2n+1])/√2`.
pub fn haar_dwt_stage(x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() < 2 || !x.len().is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "Haar stage needs an even input length of at least 2, got {}",
            x.len()
        )));
    }
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut approx = Vec::with_capacity(x.len() / 2);
    let mut detail = Vec::with_capacity(x.len() / 2);
    for pair in x.chunks_exact(2) {
        approx.push((pair[0] + pair[1]) * inv_sqrt2);
        detail.push((pair[0] - pair[1]) * inv_sqrt2);
    }
    Ok((approx, detail))
}

/// Approximation-of-approximation of two Haar stages: quarters the length
/// and doubles the height of wide peaks (each stage contributes a √2 gain).
pub fn two_stage_dwt(corr: &CorrelationSignal) -> Result<Vec<f64>> {
    if corr.values.len() < 4 || !corr.values.len().is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "two-stage DWT needs a length divisible by 4, got {}",
            corr.values.len()
        )));
    }
    let (approx, _) = haar_dwt_stage(&corr.values)?;
    let (approx, _) = haar_dwt_stage(&approx)?;
    Ok(approx)
}

/// Mean energy of symbol 0's 113 null resource elements and its log₂.
///
/// Returns `(E, ε)` with `E = (1/113)·Σ |Y₀ₖ|²` over subcarriers
/// 0..=55 and 183..=239, and `ε = log₂(E)` clamped below at
/// [`EPSILON_FLOOR_LOG2`] (an all-zero grid reports `E = 0`, `ε = -60`).
pub fn epnre(grid: &ResourceGrid) -> Result<(f64, f64)> {
    if grid.n_subcarriers() != SSB_SUBCARRIERS || grid.n_symbols() == 0 {
        return Err(Error::invalid("EPNRE needs a 240-subcarrier SSB grid"));
    }
    let energy: f64 = (0..=55)
        .chain(183..=239)
        .map(|k| grid.cell(0, k).norm_sqr())
        .sum();
    let e = energy / SSB_NULL_RES as f64;
    let epsilon = e.max(EPSILON_FLOOR_LOG2.exp2()).log2();
    Ok((e, epsilon))
}

/// Stack three DWT-compressed correlation rows and the broadcast ε rows
/// into a 5-row observation tensor.
pub fn assemble_observation(
    corr_rows: &[Vec<f64>; 3],
    epsilon: f64,
    label: Option<Label>,
    meta: ObsMeta,
) -> Result<Observation> {
    let cols = corr_rows[0].len();
    if cols == 0 || corr_rows.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("correlation rows must share one nonzero length"));
    }
    let mut tensor = Vec::with_capacity(TENSOR_ROWS * cols);
    for row in corr_rows {
        tensor.extend(row.iter().map(|&v| v as f32));
    }
    let eps = epsilon as f32;
    tensor.extend(std::iter::repeat_n(eps, 2 * cols));
    Ok(Observation { cols, tensor, label, meta })
}

/// Split each correlation row (rows 0–2) into `n_segments` equal segments
/// and permute the segments with one seeded permutation shared by all three
/// rows; the ε rows, label, and meta pass through unchanged.
pub fn circular_shift_augment(
    obs: &Observation,
    n_segments: usize,
    seed: u64,
) -> Result<Observation> {
    if n_segments == 0 || !obs.cols.is_multiple_of(n_segments) {
        return Err(Error::invalid(format!(
            "{} columns cannot be split into {n_segments} equal segments",
            obs.cols
        )));
    }
    let seg_len = obs.cols / n_segments;
    let mut order: Vec<usize> = (0..n_segments).collect();
    order.shuffle(&mut rng::chacha(seed));
    let mut out = obs.clone();
    for r in 0..3 {
        let src = obs.row(r);
        let dst = &mut out.tensor[r * obs.cols..(r + 1) * obs.cols];
        for (si, &sj) in order.iter().enumerate() {
            dst[si * seg_len..(si + 1) * seg_len]
                .copy_from_slice(&src[sj * seg_len..(sj + 1) * seg_len]);
        }
    }
    Ok(out)
}

/// Precomputed correlation references for one DFT size, for bulk extraction.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    n_fft: usize,
    ref_fft_conj: [Vec<Complex64>; 3],
}

impl FeatureExtractor {
    pub fn new(n_fft: usize) -> Result<Self> {
        if n_fft < 2 || !n_fft.is_multiple_of(2) {
            return Err(Error::invalid("DFT size must be even and at least 2"));
        }
        let mut refs = Vec::with_capacity(3);
        for n_id2 in 0..3u8 {
            refs.push(reference_fft_conj(&pss_time_reference(n_id2, n_fft)?));
        }
        let ref_fft_conj = match refs.try_into() {
            Ok(arr) => arr,
            Err(_) => unreachable!("exactly three references were built"),
        };
        Ok(Self { n_fft, ref_fft_conj })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// Tensor column count this extractor produces (N_FFT/2).
    pub fn cols(&self) -> usize {
        self.n_fft / 2
    }

    /// Same contract as [`pss_correlate`], using the cached reference.
    pub fn correlate(&self, y_pss: &[Complex64], n_id2: u8) -> Result<CorrelationSignal> {
        if n_id2 > 2 {
            return Err(Error::invalid(format!("n_id2 must be 0, 1, or 2, got {n_id2}")));
        }
        if y_pss.len() != self.n_fft {
            return Err(Error::invalid(format!(
                "PSS window must have {} samples, got {}",
                self.n_fft,
                y_pss.len()
            )));
        }
        Ok(correlate_against(y_pss, &self.ref_fft_conj[n_id2 as usize], n_id2))
    }

    /// Build the full observation tensor from a received PSS symbol window
    /// and the demodulated SSB grid.
    pub fn observe(
        &self,
        y_pss: &[Complex64],
        grid: &ResourceGrid,
        label: Option<Label>,
        meta: ObsMeta,
    ) -> Result<Observation> {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(3);
        for n_id2 in 0..3u8 {
            rows.push(two_stage_dwt(&self.correlate(y_pss, n_id2)?)?);
        }
        let rows: [Vec<f64>; 3] = match rows.try_into() {
            Ok(arr) => arr,
            Err(_) => unreachable!("exactly three rows were built"),
        };
        let (_, epsilon) = epnre(grid)?;
        assemble_observation(&rows, epsilon, label, meta)
    }
}
