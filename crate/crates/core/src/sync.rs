//! Carrier-frequency-offset and symbol-timing recovery for raw IQ captures.
//!
//! CFO estimation is a grid search: for each candidate offset the capture is
//! (implicitly) derotated and cross-correlated against a known time-domain
//! reference, and the candidate with the strongest correlation peak wins.
//! Timing uses the cyclic-prefix variant of the Schmidl & Cox metric — the
//! normalized correlation between a window and its copy one DFT-length
//! later — whose maximum marks the start of an OFDM symbol. Once both
//! offsets are known, [`extract_ssb`] derotates the capture, strips cyclic
//! prefixes, and demodulates the four SSB symbols back to a 240-subcarrier
//! grid.

use crate::error::{Error, Result};
use crate::fft;
use crate::waveform::{
    build_ssb_grid, ofdm_modulate, subcarrier_to_bin, ResourceGrid, TimeSignal, SSB_SUBCARRIERS,
    SSB_SYMBOLS,
};
use num_complex::Complex64;
use std::f64::consts::TAU;

/// Deterministic time-domain SSB waveform for a sector identity, used as the
/// CFO-search reference.
pub fn ssb_reference(n_id2: u8, n_fft: usize, cp_length: usize, scs_hz: f64) -> Result<TimeSignal> {
    ofdm_modulate(&build_ssb_grid(n_id2)?, n_fft, cp_length, scs_hz)
}

/// Symmetric frequency grid of `n_points` candidates spanning `±half_span_hz`
/// around `center_hz`.
pub fn cfo_grid(center_hz: f64, half_span_hz: f64, n_points: usize) -> Vec<f64> {
    assert!(n_points >= 1, "grid needs at least one candidate");
    if n_points == 1 {
        return vec![center_hz];
    }
    let step = 2.0 * half_span_hz / (n_points - 1) as f64;
    (0..n_points).map(|i| center_hz - half_span_hz + i as f64 * step).collect()
}

/// Default CFO search grid: ±half the subcarrier spacing, 201 candidates.
pub fn default_cfo_grid(scs_hz: f64) -> Vec<f64> {
    cfo_grid(0.0, scs_hz / 2.0, 201)
}

/// Multiply `reference` by the phase ramp `e^{+j2πf·m/fs}` into `out`.
fn rotate_reference(reference: &[Complex64], f_hz: f64, fs: f64, out: &mut [Complex64]) {
    let step = Complex64::from_polar(1.0, TAU * f_hz / fs);
    let mut phasor = Complex64::new(1.0, 0.0);
    for (i, (&r, o)) in reference.iter().zip(out.iter_mut()).enumerate() {
        *o = r * phasor;
        phasor *= step;
        if i % 4096 == 4095 {
            // Keep the incrementally-updated phasor on the unit circle.
            phasor /= phasor.norm();
        }
    }
}

/// Largest squared cross-correlation magnitude between the capture (given as
/// its padded forward DFT) and the reference rotated by `f_hz`.
fn rotated_correlation_peak(
    capture_fft: &[Complex64],
    reference: &[Complex64],
    f_hz: f64,
    fs: f64,
    capture_len: usize,
    scratch: &mut [Complex64],
) -> f64 {
    debug_assert_eq!(capture_fft.len(), scratch.len());
    scratch.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
    rotate_reference(reference, f_hz, fs, &mut scratch[..reference.len()]);
    fft::forward(scratch);
    for (c, &yk) in scratch.iter_mut().zip(capture_fft) {
        *c = yk * c.conj();
    }
    fft::inverse(scratch);
    let valid = capture_len - reference.len() + 1;
    scratch[..valid].iter().map(|c| c.norm_sqr()).fold(0.0, f64::max)
}

/// Estimate the carrier-frequency offset of `signal` by derotating it with
/// each candidate in `grid` and cross-correlating against `reference`; the
/// candidate with the strongest peak wins, ties going to the smallest
/// magnitude offset.
pub fn estimate_cfo(signal: &TimeSignal, reference: &TimeSignal, grid: &[f64]) -> Result<f64> {
    Ok(estimate_cfo_peak(signal, reference, grid)?.0)
}

/// [`estimate_cfo`] plus the winning squared correlation peak, for callers
/// that must compare the match quality of several candidate references.
pub(crate) fn estimate_cfo_peak(
    signal: &TimeSignal,
    reference: &TimeSignal,
    grid: &[f64],
) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::invalid("CFO candidate grid is empty"));
    }
    if reference.samples.is_empty() || reference.samples.len() > signal.samples.len() {
        return Err(Error::invalid("reference must be nonempty and no longer than the capture"));
    }
    if reference.sample_rate_hz != signal.sample_rate_hz {
        return Err(Error::invalid("reference and capture sample rates differ"));
    }
    let n = signal.samples.len();
    let fft_len = n.next_power_of_two();
    let mut capture_fft = vec![Complex64::new(0.0, 0.0); fft_len];
    capture_fft[..n].copy_from_slice(&signal.samples);
    fft::forward(&mut capture_fft);

    let mut scratch = vec![Complex64::new(0.0, 0.0); fft_len];
    let mut best_f = grid[0];
    let mut best_peak = f64::NEG_INFINITY;
    for &f in grid {
        let peak = rotated_correlation_peak(
            &capture_fft,
            &reference.samples,
            f,
            signal.sample_rate_hz,
            n,
            &mut scratch,
        );
        if peak > best_peak || (peak == best_peak && f.abs() < best_f.abs()) {
            best_peak = peak;
            best_f = f;
        }
    }
    Ok((best_f, best_peak))
}

/// Two-pass CFO estimate: the default ±scs/2 grid, then a second pass at a
/// tenth of the coarse step around the coarse winner.
pub fn estimate_cfo_refined(
    signal: &TimeSignal,
    reference: &TimeSignal,
    scs_hz: f64,
) -> Result<f64> {
    Ok(estimate_cfo_refined_peak(signal, reference, scs_hz)?.0)
}

/// [`estimate_cfo_refined`] plus the winning squared correlation peak.
pub(crate) fn estimate_cfo_refined_peak(
    signal: &TimeSignal,
    reference: &TimeSignal,
    scs_hz: f64,
) -> Result<(f64, f64)> {
    if !(scs_hz > 0.0) {
        return Err(Error::invalid("subcarrier spacing must be positive"));
    }
    let coarse_grid = default_cfo_grid(scs_hz);
    let coarse_step = coarse_grid[1] - coarse_grid[0];
    let (coarse, _) = estimate_cfo_peak(signal, reference, &coarse_grid)?;
    let fine_grid = cfo_grid(coarse, coarse_step, 21);
    estimate_cfo_peak(signal, reference, &fine_grid)
}

/// Cyclic-prefix repetition metric `M(t) = |P(t)|² / R(t)²` with
/// `P(t) = Σ_{m<L} y*(t+m)·y(t+m+lag)` and `R(t) = Σ_{m<L} |y(t+m+lag)|²`.
///
/// Positions where `R(t) = 0` yield `M(t) = 0`. Computed with rolling sums,
/// so the cost is linear in the capture length.
pub fn schmidl_cox_metric(signal: &TimeSignal, window_len: usize, lag: usize) -> Result<Vec<f64>> {
    let n = signal.samples.len();
    if window_len == 0 || lag == 0 {
        return Err(Error::invalid("window and lag must be positive"));
    }
    if n < lag + window_len + 1 {
        return Err(Error::invalid(format!(
            "capture of {n} samples is too short for window {window_len} plus lag {lag}"
        )));
    }
    let y = &signal.samples;
    let positions = n - lag - window_len + 1;
    // Rolling subtraction leaves ~1e-15-scale residue where the true sums
    // are zero, which would blow up |P|²/R²; clamp R below a floor tied to
    // the capture's overall power.
    let mean_power: f64 = y.iter().map(|s| s.norm_sqr()).sum::<f64>() / n as f64;
    let floor = 1e-12 * mean_power * window_len as f64;
    let mut p = Complex64::new(0.0, 0.0);
    let mut r = 0.0;
    for m in 0..window_len {
        p += y[m].conj() * y[m + lag];
        r += y[m + lag].norm_sqr();
    }
    let mut metric = Vec::with_capacity(positions);
    for t in 0..positions {
        metric.push(if r > floor { p.norm_sqr() / (r * r) } else { 0.0 });
        if t + 1 < positions {
            p -= y[t].conj() * y[t + lag];
            p += y[t + window_len].conj() * y[t + window_len + lag];
            r -= y[t + lag].norm_sqr();
            r += y[t + window_len + lag].norm_sqr();
        }
    }
    Ok(metric)
}

/// Symbol-timing estimate: the earliest argmax of the cyclic-prefix
/// Schmidl & Cox metric (window = CP length, lag = DFT size).
pub fn estimate_timing(signal: &TimeSignal, n_fft: usize, cp_length: usize) -> Result<usize> {
    let metric = schmidl_cox_metric(signal, cp_length, n_fft)?;
    let mut best_t = 0;
    let mut best_m = f64::NEG_INFINITY;
    for (t, &m) in metric.iter().enumerate() {
        if m > best_m {
            best_m = m;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Fully-normalized repetition metric `|P(t)|² / (R₀(t)·R₁(t))` where `R₀`
/// and `R₁` are the energies of the near and far windows. Cauchy-Schwarz
/// bounds it to [0, 1], so — unlike the far-window-only normalization of
/// [`schmidl_cox_metric`] — it cannot spike where a strong window faces a
/// near-silent one (the edges of a burst in an otherwise quiet capture).
fn normalized_repetition_metric(
    signal: &TimeSignal,
    window_len: usize,
    lag: usize,
) -> Result<Vec<f64>> {
    let n = signal.samples.len();
    if window_len == 0 || lag == 0 {
        return Err(Error::invalid("window and lag must be positive"));
    }
    if n < lag + window_len + 1 {
        return Err(Error::invalid(format!(
            "capture of {n} samples is too short for window {window_len} plus lag {lag}"
        )));
    }
    let y = &signal.samples;
    let positions = n - lag - window_len + 1;
    let mean_power: f64 = y.iter().map(|s| s.norm_sqr()).sum::<f64>() / n as f64;
    let floor = 1e-12 * mean_power * window_len as f64;
    let mut p = Complex64::new(0.0, 0.0);
    let mut r_near = 0.0;
    let mut r_far = 0.0;
    for m in 0..window_len {
        p += y[m].conj() * y[m + lag];
        r_near += y[m].norm_sqr();
        r_far += y[m + lag].norm_sqr();
    }
    let mut metric = Vec::with_capacity(positions);
    for t in 0..positions {
        metric.push(if r_near > floor && r_far > floor {
            p.norm_sqr() / (r_near * r_far)
        } else {
            0.0
        });
        if t + 1 < positions {
            p -= y[t].conj() * y[t + lag];
            p += y[t + window_len].conj() * y[t + window_len + lag];
            r_near -= y[t].norm_sqr();
            r_near += y[t + window_len].norm_sqr();
            r_far -= y[t + lag].norm_sqr();
            r_far += y[t + window_len + lag].norm_sqr();
        }
    }
    Ok(metric)
}

/// Locate the start of a four-symbol SSB: every symbol boundary produces a
/// cyclic-prefix peak, so a single-boundary metric alone is ambiguous up to
/// a symbol length. Summing the normalized repetition metric over the four
/// boundary hypotheses peaks only where all four align — the SSB start.
/// Returns the earliest argmax of that sum and its per-boundary average
/// (in [0, 1]; near 1 for a clean SSB, near 0 for captures without one).
pub fn locate_ssb(signal: &TimeSignal, n_fft: usize, cp_length: usize) -> Result<(usize, f64)> {
    let symbol_len = n_fft + cp_length;
    let metric = normalized_repetition_metric(signal, cp_length, n_fft)?;
    let tail = 3 * symbol_len;
    if metric.len() <= tail {
        return Err(Error::invalid("capture too short to hold a full four-symbol SSB"));
    }
    let mut best_t = 0;
    let mut best_m = f64::NEG_INFINITY;
    for t in 0..metric.len() - tail {
        let m = metric[t]
            + metric[t + symbol_len]
            + metric[t + 2 * symbol_len]
            + metric[t + 3 * symbol_len];
        if m > best_m {
            best_m = m;
            best_t = t;
        }
    }
    Ok((best_t, best_m / 4.0))
}

/// Demodulate the four SSB symbols starting at sample `t_off`: derotate the
/// capture by `-f_off` (phase referenced to the capture's first sample),
/// strip each cyclic prefix, forward-DFT, and keep the centered 240
/// subcarriers.
pub fn extract_ssb(
    signal: &TimeSignal,
    t_off: usize,
    f_off: f64,
    n_fft: usize,
    cp_length: usize,
) -> Result<ResourceGrid> {
    let symbol_len = n_fft + cp_length;
    let end = t_off + SSB_SYMBOLS * symbol_len;
    if end > signal.samples.len() {
        return Err(Error::invalid(format!(
            "SSB at offset {t_off} needs {end} samples, capture has {}",
            signal.samples.len()
        )));
    }
    let fs = signal.sample_rate_hz;
    let mut grid = ResourceGrid::new(SSB_SUBCARRIERS, SSB_SYMBOLS)?;
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for l in 0..SSB_SYMBOLS {
        let start = t_off + l * symbol_len + cp_length;
        for (i, c) in buf.iter_mut().enumerate() {
            let t = (start + i) as f64;
            *c = signal.samples[start + i] * Complex64::from_polar(1.0, -TAU * f_off * t / fs);
        }
        fft::forward(&mut buf);
        for k in 0..SSB_SUBCARRIERS {
            grid.set_cell(l, k, buf[subcarrier_to_bin(k, SSB_SUBCARRIERS, n_fft)]);
        }
    }
    Ok(grid)
}
