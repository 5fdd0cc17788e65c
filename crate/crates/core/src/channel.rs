//! Propagation and interference: path loss, multipath fading, thermal noise,
//! and jammer injection at a controlled SJNR.
//!
//! The channel between the transmitter and the detector is modeled as a
//! seeded tapped-delay line (a deterministic leading ray for LOS-dominant
//! scenarios, circularly-symmetric complex-Gaussian taps with an exponential
//! power-delay profile otherwise) followed by a free-space attenuation knob
//! and additive thermal noise at k_B·T·B. Jammers — wideband Gaussian,
//! BPSK, or rectangular 8QAM symbol streams — are injected either across the
//! whole capture ("barrage") or confined to the SSB's symbol span and
//! subcarrier band ("smart"), scaled so the measured
//! signal/(jamming+noise) ratio over the SSB span hits a requested value.

use crate::error::{Error, Result};
use crate::fft;
use crate::rng;
use crate::waveform::{TimeSignal, SSB_SUBCARRIERS};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use std::ops::Range;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Power ratio of the deterministic ray to the total scattered energy in
/// [`ChannelProfile::LosDominant`].
pub const LOS_K_FACTOR: f64 = 10.0;

/// Tap template family for the fading channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelProfile {
    /// Strong deterministic first ray plus weak scattered taps.
    LosDominant,
    /// All taps scattered (Rayleigh-like), richer delay profile.
    NlosRich,
}

/// Fading-plus-path-loss channel parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub profile: ChannelProfile,
    /// RMS delay spread of the exponential power-delay profile, nanoseconds.
    pub delay_spread_ns: f64,
    /// Number of taps at consecutive sample delays.
    pub n_taps: usize,
    /// Carrier frequency, Hz (sets the path-loss wavelength).
    pub carrier_hz: f64,
    /// Transmitter-receiver distance, meters.
    pub distance_m: f64,
    /// Seed for the scattered-tap draw.
    pub seed: u64,
}

impl ChannelConfig {
    fn validate(&self) -> Result<()> {
        if self.n_taps == 0 {
            return Err(Error::invalid("channel needs at least one tap"));
        }
        if !(self.delay_spread_ns >= 0.0) || !self.delay_spread_ns.is_finite() {
            return Err(Error::invalid("delay spread must be a nonnegative finite value"));
        }
        if !(self.carrier_hz > 0.0) {
            return Err(Error::invalid("carrier frequency must be positive"));
        }
        if !(self.distance_m > 0.0) {
            return Err(Error::invalid("distance must be positive"));
        }
        Ok(())
    }
}

/// Jamming waveform family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JammerKind {
    /// White circularly-symmetric Gaussian samples.
    Awgn,
    /// Rectangular-pulse BPSK symbol stream.
    Bpsk,
    /// Rectangular-pulse 8QAM symbol stream (I in {±1,±3}, Q in {±1}).
    Qam8,
}

/// How much of the capture the jammer occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    /// Confined to the SSB symbol span and subcarrier band.
    SmartSsb,
    /// Full band, full duration.
    Barrage,
}

/// Jammer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct JammerConfig {
    pub kind: JammerKind,
    pub coverage: Coverage,
    /// Requested signal/(jamming+noise) ratio over the SSB span, dB.
    pub sjnr_db: f64,
    pub seed: u64,
}

/// Where the SSB sits inside a capture: its sample span and its subcarrier
/// band in signed subcarriers relative to DC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsbLocation {
    /// Sample range of the four SSB symbols (CPs included).
    pub span: Range<usize>,
    /// Signed subcarrier range relative to DC (e.g. -120..120 when centered).
    pub band: Range<i64>,
}

impl SsbLocation {
    /// Location of a band-centered SSB occupying the given sample span.
    pub fn centered(span: Range<usize>) -> Self {
        let half = SSB_SUBCARRIERS as i64 / 2;
        Self { span, band: -half..half }
    }
}

/// A jammed capture together with the exact waveform that was added.
#[derive(Debug, Clone, PartialEq)]
pub struct JammedSignal {
    /// Input plus jammer.
    pub signal: TimeSignal,
    /// The additive jamming waveform, full capture length (zero outside the
    /// SSB span for smart coverage).
    pub jammer: Vec<Complex64>,
    /// Mean jammer power over the measurement range after scaling.
    pub jam_power: f64,
}

/// Free-space attenuation in dB: `20·log10(λ² / (4π²·d²))`.
///
/// Used purely as a monotone distance knob; larger distances give more
/// negative values (−20·log10(4) ≈ −12.04 dB per doubling of distance).
pub fn fspl_db(wavelength_m: f64, distance_m: f64) -> Result<f64> {
    if !(wavelength_m > 0.0) || !(distance_m > 0.0) {
        return Err(Error::invalid("wavelength and distance must be positive"));
    }
    let ratio = wavelength_m * wavelength_m
        / (4.0 * std::f64::consts::PI * std::f64::consts::PI * distance_m * distance_m);
    Ok(20.0 * ratio.log10())
}

/// Expected per-tap powers (the power-delay profile template).
///
/// Powers sum to 1: an LOS-dominant profile puts `K/(K+1)` in the
/// deterministic first tap and splits `1/(K+1)` exponentially over the
/// scattered taps; an NLOS-rich profile splits everything exponentially.
/// With a single tap all energy sits in that tap.
pub fn power_delay_profile(cfg: &ChannelConfig, sample_rate_hz: f64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(sample_rate_hz > 0.0) {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let k = LOS_K_FACTOR;
    let (deterministic, scattered_total, first_scattered) = match cfg.profile {
        ChannelProfile::LosDominant if cfg.n_taps == 1 => (Some(1.0), 0.0, 1),
        ChannelProfile::LosDominant => (Some(k / (k + 1.0)), 1.0 / (k + 1.0), 1),
        ChannelProfile::NlosRich => (None, 1.0, 0),
    };
    let tau = cfg.delay_spread_ns * 1e-9;
    let mut weights = vec![0.0; cfg.n_taps];
    if scattered_total > 0.0 {
        if tau == 0.0 {
            weights[first_scattered] = 1.0;
        } else {
            for (i, w) in weights.iter_mut().enumerate().skip(first_scattered) {
                let delay_s = (i - first_scattered) as f64 / sample_rate_hz;
                *w = (-delay_s / tau).exp();
            }
        }
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w *= scattered_total / sum);
    }
    if let Some(p0) = deterministic {
        weights[0] = p0;
    }
    Ok(weights)
}

/// Draw one tapped-delay-line realization (seeded by `cfg.seed`).
///
/// The first tap is the deterministic ray for LOS-dominant profiles; every
/// scattered tap is circularly-symmetric complex Gaussian with variance from
/// [`power_delay_profile`].
pub fn tap_realization(cfg: &ChannelConfig, sample_rate_hz: f64) -> Result<Vec<Complex64>> {
    let pdp = power_delay_profile(cfg, sample_rate_hz)?;
    let mut rng = rng::chacha(cfg.seed);
    let deterministic_first = matches!(cfg.profile, ChannelProfile::LosDominant);
    let taps = pdp
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if i == 0 && deterministic_first {
                Complex64::new(p.sqrt(), 0.0)
            } else {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(re, im) * (p / 2.0).sqrt()
            }
        })
        .collect();
    Ok(taps)
}

/// Full linear convolution (output length `x.len() + h.len() - 1`).
pub fn convolve(x: &[Complex64], h: &[Complex64]) -> Vec<Complex64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let mut out = vec![Complex64::new(0.0, 0.0); x.len() + h.len() - 1];
    for (j, &tap) in h.iter().enumerate() {
        if tap == Complex64::new(0.0, 0.0) {
            continue;
        }
        for (i, &s) in x.iter().enumerate() {
            out[i + j] += s * tap;
        }
    }
    out
}

/// Convolve a signal with a seeded channel realization and apply free-space
/// attenuation. Symbol framing metadata carries through (taps only smear the
/// signal forward in time).
pub fn apply_channel(signal: &TimeSignal, cfg: &ChannelConfig) -> Result<TimeSignal> {
    if signal.samples.is_empty() {
        return Err(Error::invalid("cannot apply a channel to an empty signal"));
    }
    let taps = tap_realization(cfg, signal.sample_rate_hz)?;
    let gain = 10f64.powf(fspl_db(SPEED_OF_LIGHT / cfg.carrier_hz, cfg.distance_m)? / 20.0);
    let mut samples = convolve(&signal.samples, &taps);
    samples.iter_mut().for_each(|s| *s *= gain);
    Ok(TimeSignal { samples, ..signal.clone() })
}

/// Add circularly-symmetric complex Gaussian noise of power `k_B·T·B`.
pub fn add_thermal_noise(
    signal: &TimeSignal,
    temperature_k: f64,
    bandwidth_hz: f64,
    seed: u64,
) -> Result<TimeSignal> {
    if !(temperature_k > 0.0) || !(bandwidth_hz > 0.0) {
        return Err(Error::invalid("temperature and bandwidth must be positive"));
    }
    let sigma_component = (BOLTZMANN * temperature_k * bandwidth_hz / 2.0).sqrt();
    let mut rng = rng::chacha(seed);
    let samples = signal
        .samples
        .iter()
        .map(|&s| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            s + Complex64::new(re, im) * sigma_component
        })
        .collect();
    Ok(TimeSignal { samples, ..signal.clone() })
}

/// Thermal noise power `k_B·T·B` for a receiver bandwidth.
pub fn thermal_noise_power(temperature_k: f64, bandwidth_hz: f64) -> f64 {
    BOLTZMANN * temperature_k * bandwidth_hz
}

/// Generate one raw unit-power jamming waveform of the given length.
fn raw_jammer(kind: JammerKind, len: usize, sps: usize, rng: &mut impl Rng) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(len);
    match kind {
        JammerKind::Awgn => {
            for _ in 0..len {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                out.push(Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2);
            }
        }
        JammerKind::Bpsk => {
            while out.len() < len {
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for _ in 0..sps.min(len - out.len()) {
                    out.push(Complex64::new(s, 0.0));
                }
            }
        }
        JammerKind::Qam8 => {
            let i_levels = [-3.0, -1.0, 1.0, 3.0];
            let norm = 6f64.sqrt();
            while out.len() < len {
                let i = i_levels[rng.random_range(0..4)];
                let q = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let sym = Complex64::new(i / norm, q / norm);
                for _ in 0..sps.min(len - out.len()) {
                    out.push(sym);
                }
            }
        }
    }
    out
}

/// Brick-wall filter a segment to the signed-subcarrier band (in units of
/// `sample_rate / n_fft`), via a segment-length DFT.
fn band_filter(segment: &mut [Complex64], band: &Range<i64>, n_fft: usize) {
    let len = segment.len();
    fft::forward(segment);
    let lo = band.start as f64 / n_fft as f64;
    let hi = band.end as f64 / n_fft as f64;
    for (b, cell) in segment.iter_mut().enumerate() {
        let f_norm =
            if b <= len / 2 { b as f64 / len as f64 } else { (b as f64 - len as f64) / len as f64 };
        if f_norm < lo || f_norm >= hi {
            *cell = Complex64::new(0.0, 0.0);
        }
    }
    fft::inverse(segment);
    let scale = 1.0 / len as f64;
    segment.iter_mut().for_each(|c| *c *= scale);
}

/// Add a jammer to a capture so that `reference_power / (jammer power +
/// noise_power)` over the SSB span equals `10^(sjnr_db/10)`.
///
/// `reference_power` is the capture's mean signal power over the SSB span
/// (measured before noise was added); `noise_power` is the thermal-noise
/// power in the same units. Smart coverage gates the jammer to
/// `location.span` and filters it to `location.band`; barrage covers the
/// whole capture (a `location` is still used as the power-measurement range
/// when present). Requested ratios that would need negative jammer power —
/// the noise alone already exceeds the target — are rejected.
pub fn inject_jammer(
    signal: &TimeSignal,
    cfg: &JammerConfig,
    location: Option<&SsbLocation>,
    reference_power: f64,
    noise_power: f64,
) -> Result<JammedSignal> {
    if signal.samples.is_empty() {
        return Err(Error::invalid("cannot jam an empty signal"));
    }
    if !cfg.sjnr_db.is_finite() {
        return Err(Error::invalid("sjnr_db must be finite"));
    }
    if !(reference_power > 0.0) || !(noise_power >= 0.0) {
        return Err(Error::invalid("reference power must be positive and noise nonnegative"));
    }
    if let Some(loc) = location {
        if loc.span.start >= loc.span.end || loc.span.end > signal.samples.len() {
            return Err(Error::invalid("SSB span outside the capture"));
        }
        if loc.band.start >= loc.band.end {
            return Err(Error::invalid("SSB band is empty"));
        }
    }
    let target_jam = reference_power / 10f64.powf(cfg.sjnr_db / 10.0) - noise_power;
    if target_jam < 0.0 {
        return Err(Error::invalid(format!(
            "requested SJNR of {} dB is infeasible: thermal noise power {noise_power:.3e} alone \
             exceeds the total interference budget {:.3e}",
            cfg.sjnr_db,
            reference_power / 10f64.powf(cfg.sjnr_db / 10.0),
        )));
    }

    let len = signal.samples.len();
    let mut rng = rng::chacha(cfg.seed);
    let (mut jammer, measure_range) = match cfg.coverage {
        Coverage::Barrage => {
            let jam = raw_jammer(cfg.kind, len, 1, &mut rng);
            let range = location.map_or(0..len, |loc| loc.span.clone());
            (jam, range)
        }
        Coverage::SmartSsb => {
            let loc = location.ok_or_else(|| {
                Error::invalid("smart-SSB coverage requires the SSB span and band")
            })?;
            let span_len = loc.span.len();
            let sps = ((signal.n_fft as f64 / SSB_SUBCARRIERS as f64).round() as usize).max(1);
            let mut segment = raw_jammer(cfg.kind, span_len, sps, &mut rng);
            band_filter(&mut segment, &loc.band, signal.n_fft);
            let mut jam = vec![Complex64::new(0.0, 0.0); len];
            jam[loc.span.clone()].copy_from_slice(&segment);
            (jam, loc.span.clone())
        }
    };

    let measured: f64 = jammer[measure_range.clone()].iter().map(|s| s.norm_sqr()).sum::<f64>()
        / measure_range.len() as f64;
    if target_jam > 0.0 && measured <= 0.0 {
        return Err(Error::invalid("jammer waveform has no energy over the SSB span"));
    }
    let scale = if target_jam == 0.0 { 0.0 } else { (target_jam / measured).sqrt() };
    jammer.iter_mut().for_each(|j| *j *= scale);

    let mut samples = signal.samples.clone();
    match cfg.coverage {
        Coverage::Barrage => {
            for (s, j) in samples.iter_mut().zip(&jammer) {
                *s += j;
            }
        }
        Coverage::SmartSsb => {
            for i in measure_range {
                samples[i] += jammer[i];
            }
        }
    }
    Ok(JammedSignal {
        signal: TimeSignal { samples, ..signal.clone() },
        jammer,
        jam_power: target_jam,
    })
}
