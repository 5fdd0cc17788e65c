//! Scenario-driven dataset synthesis, persistence, and capture ingestion.
//!
//! [`generate_dataset`] drives the full transmit/channel/receive pipeline for
//! a grid of scenarios — SJNR, distance, payload modulation, and sector
//! identity all stratified or sampled from configured grids — and yields
//! labeled observation tensors plus a manifest describing every draw.
//! [`save_dataset`]/[`load_dataset`] persist observations in a compact
//! little-endian binary format, and [`ingest_iq_csv`] turns a raw IQ capture
//! into an unlabeled observation by running blind synchronization before the
//! feature pipeline.
//!
//! Synthesis extracts the SSB at its known timing with no frequency error, so
//! feature noise reflects only the channel, the thermal noise, and the
//! jammer; ingestion is where carrier and timing recovery are exercised.

use std::fs;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::channel::{
    add_thermal_noise, apply_channel, fspl_db, inject_jammer, thermal_noise_power, ChannelConfig,
    ChannelProfile, Coverage, JammerConfig, JammerKind, SsbLocation, SPEED_OF_LIGHT,
};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, Label, ObsMeta, Observation, TENSOR_ROWS};
use crate::rng;
use crate::sync::{estimate_cfo_refined_peak, extract_ssb, locate_ssb, ssb_reference};
use crate::waveform::{
    build_ssb_grid, centered_offset, default_cp_length, embed_in_band, ofdm_modulate, Modulation,
    TimeSignal, SSB_SYMBOLS,
};

/// Sub-seed salts: every random stage of one observation draws from its own
/// stream derived from the observation seed.
const EMBED_SALT: u64 = 0x656d_6265_645f_7267;
const CHANNEL_SALT: u64 = 0x6368_616e_5f74_6170;
const NOISE_SALT: u64 = 0x7468_6572_6d6e_6f69;
const JAMMER_SALT: u64 = 0x6a61_6d77_6176_655f;
const OBS_SALT: u64 = 0x6f62_735f_7365_6564;
const DRAW_SALT: u64 = 0x7363_656e_6472_6177;
const SUBSET_SALT: u64 = 0x6830_7375_6273_6574;

/// Minimum blind-sync match quality accepted by [`ingest_iq_csv`].
pub const SYNC_QUALITY_THRESHOLD: f64 = 0.2;

/// Everything that defines one synthetic dataset: the scenario grids, the
/// waveform dimensions, the channel and jammer templates, and the master
/// seed that all per-observation seeds derive from.
///
/// The templates' `distance_m`, `sjnr_db`, and `seed` fields are replaced per
/// observation; every other template field applies dataset-wide.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Jammed-class SJNR grid, dB (sampled uniformly per jammed observation).
    pub sjnr_grid_db: Vec<f64>,
    /// Transmitter-receiver distance grid, meters (sampled uniformly).
    pub distance_grid_m: Vec<f64>,
    pub n_fft: usize,
    pub scs_hz: f64,
    /// Width of the occupied band the SSB is embedded in (subcarriers).
    pub band_subcarriers: usize,
    /// Payload modulations to stratify over.
    pub modulations: Vec<Modulation>,
    pub channel: ChannelConfig,
    pub jammer: JammerConfig,
    pub n_obs_per_class: usize,
    pub master_seed: u64,
    /// Transmit power, dB relative to unit mean sample power.
    pub tx_power_db: f64,
    /// Link budget calibration: the SNR (dB above the thermal floor) of an
    /// unfaded SSB received at [`reference_distance_m`](Self::reference_distance_m).
    /// The front-end gain is fixed there, so each observation's true SNR
    /// moves with its drawn distance (free-space path loss) and tap gain —
    /// a weak jammer can hide under the floor on a long link.
    pub receiver_snr_db: f64,
    /// Distance at which `receiver_snr_db` is realized, meters.
    pub reference_distance_m: f64,
    /// Receiver noise temperature, kelvin.
    pub temperature_k: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::with_n_fft(2048)
    }
}

impl ScenarioConfig {
    /// Default scenario grids at a given DFT size, with the occupied band
    /// scaled proportionally (1272 subcarriers at 2048).
    pub fn with_n_fft(n_fft: usize) -> Self {
        let mut band = (n_fft * 1272 / 2048).clamp(240, n_fft);
        band &= !1;
        Self {
            sjnr_grid_db: (-10..=30).map(f64::from).collect(),
            distance_grid_m: (0..25).map(|i| f64::from(10 + 20 * i)).collect(),
            n_fft,
            scs_hz: 30_000.0,
            band_subcarriers: band,
            modulations: Modulation::ALL.to_vec(),
            channel: ChannelConfig {
                profile: ChannelProfile::LosDominant,
                delay_spread_ns: 30.0,
                n_taps: 8,
                carrier_hz: 3.5e9,
                distance_m: 100.0,
                seed: 0,
            },
            jammer: JammerConfig {
                kind: JammerKind::Awgn,
                coverage: Coverage::Barrage,
                sjnr_db: 0.0,
                seed: 0,
            },
            n_obs_per_class: 100,
            master_seed: 0,
            tx_power_db: 30.0,
            receiver_snr_db: 38.0,
            reference_distance_m: 100.0,
            temperature_k: 290.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sjnr_grid_db.is_empty() || self.distance_grid_m.is_empty() {
            return Err(Error::invalid("SJNR and distance grids must be nonempty"));
        }
        if self.sjnr_grid_db.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("SJNR grid values must be finite"));
        }
        if self.distance_grid_m.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("distances must be positive and finite"));
        }
        if self.n_obs_per_class == 0 {
            return Err(Error::invalid("n_obs_per_class must be positive"));
        }
        if self.n_fft == 0 || !self.n_fft.is_multiple_of(2) {
            return Err(Error::invalid("DFT size must be even and nonzero"));
        }
        if self.band_subcarriers < 240
            || self.band_subcarriers > self.n_fft
            || !self.band_subcarriers.is_multiple_of(2)
        {
            return Err(Error::invalid(format!(
                "band of {} subcarriers must be even and lie in [240, n_fft={}]",
                self.band_subcarriers, self.n_fft
            )));
        }
        if !(self.scs_hz > 0.0) || !self.scs_hz.is_finite() {
            return Err(Error::invalid("subcarrier spacing must be positive and finite"));
        }
        if self.modulations.is_empty() {
            return Err(Error::invalid("at least one payload modulation is required"));
        }
        for (i, m) in self.modulations.iter().enumerate() {
            if self.modulations[..i].contains(m) {
                return Err(Error::invalid(format!("duplicate modulation {m}")));
            }
        }
        if !self.tx_power_db.is_finite() || !self.receiver_snr_db.is_finite() {
            return Err(Error::invalid("power levels must be finite"));
        }
        if !(self.reference_distance_m > 0.0) || !self.reference_distance_m.is_finite() {
            return Err(Error::invalid("reference distance must be positive and finite"));
        }
        if !(self.temperature_k > 0.0) {
            return Err(Error::invalid("noise temperature must be positive"));
        }
        Ok(())
    }
}

/// One sampled scenario point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioDraw {
    /// Target SJNR, dB (ignored when the observation is not jammed).
    pub sjnr_db: f64,
    pub distance_m: f64,
    pub modulation: Modulation,
    pub n_id2: u8,
}

/// Synthesize one observation: SSB grid → band embedding → CP-OFDM →
/// fading channel → receiver gain → thermal noise → optional jammer →
/// ground-truth-timing extraction → feature tensor. The label is `H1` iff
/// `jammed`; all randomness derives from `seed`.
pub fn generate_observation(
    cfg: &ScenarioConfig,
    draw: &ScenarioDraw,
    jammed: bool,
    seed: u64,
) -> Result<Observation> {
    cfg.validate()?;
    generate_observation_with(&FeatureExtractor::new(cfg.n_fft)?, cfg, draw, jammed, seed)
}

/// [`generate_observation`] against a prebuilt extractor (bulk-generation
/// hot path; skips config re-validation).
fn generate_observation_with(
    extractor: &FeatureExtractor,
    cfg: &ScenarioConfig,
    draw: &ScenarioDraw,
    jammed: bool,
    seed: u64,
) -> Result<Observation> {
    let n_fft = cfg.n_fft;
    let cp = default_cp_length(n_fft);
    let span = 0..SSB_SYMBOLS * (n_fft + cp);

    let ssb = build_ssb_grid(draw.n_id2)?;
    let offset = centered_offset(cfg.band_subcarriers);
    let band = embed_in_band(
        &ssb,
        cfg.band_subcarriers,
        offset,
        draw.modulation,
        rng::derive_seed(seed, EMBED_SALT),
    )?;
    let mut tx = ofdm_modulate(&band, n_fft, cp, cfg.scs_hz)?;

    // Transmit at the configured power relative to unit sample power.
    let p_tx = tx.mean_power(0..tx.samples.len());
    let g_tx = (10f64.powf(cfg.tx_power_db / 10.0) / p_tx).sqrt();
    tx.samples.iter_mut().for_each(|s| *s *= g_tx);

    let p_tx_ssb = tx.mean_power(span.clone());

    let channel = ChannelConfig {
        distance_m: draw.distance_m,
        seed: rng::derive_seed(seed, CHANNEL_SALT),
        ..cfg.channel.clone()
    };
    let mut rx = apply_channel(&tx, &channel)?;

    // Receiver front end: one fixed gain for the whole dataset, calibrated
    // so an unfaded SSB at the reference distance lands `receiver_snr_db`
    // above the thermal floor. The drawn distance and the tap realization
    // then move each observation's true SNR, exactly as the propagation
    // model dictates.
    let bandwidth_hz = cfg.scs_hz * n_fft as f64;
    let noise_power = thermal_noise_power(cfg.temperature_k, bandwidth_hz);
    let wavelength_m = SPEED_OF_LIGHT / cfg.channel.carrier_hz;
    let fspl_ref = 10f64.powf(fspl_db(wavelength_m, cfg.reference_distance_m)? / 10.0);
    let g_rx = (noise_power * 10f64.powf(cfg.receiver_snr_db / 10.0) / (p_tx_ssb * fspl_ref))
        .sqrt();
    rx.samples.iter_mut().for_each(|s| *s *= g_rx);
    let reference_power = rx.mean_power(span.clone());
    if !(reference_power > 0.0) {
        return Err(Error::invalid("received signal has no power over the SSB span"));
    }

    let noisy =
        add_thermal_noise(&rx, cfg.temperature_k, bandwidth_hz, rng::derive_seed(seed, NOISE_SALT))?;

    let location = SsbLocation::centered(span.clone());
    // A jammer constrained to the drawn SJNR needs interference power of
    // reference/sjnr, noise included; when the thermal floor alone exceeds
    // that budget the weakest consistent jammer is silence, so the jammed
    // observation is physically identical to its clean twin. Those draws
    // are kept (still labeled jammed): undetectable-by-construction rows
    // are part of the weak-jammer regime, not generation failures.
    let feasible = jammed
        && reference_power / 10f64.powf(draw.sjnr_db / 10.0) - noise_power >= 0.0;
    let mut capture = if feasible {
        let jammer = JammerConfig {
            sjnr_db: draw.sjnr_db,
            seed: rng::derive_seed(seed, JAMMER_SALT),
            ..cfg.jammer.clone()
        };
        inject_jammer(&noisy, &jammer, Some(&location), reference_power, noise_power)?.signal
    } else {
        noisy
    };

    // Digital gain to unit capture power, so tensors are well-conditioned
    // regardless of the absolute physical level; every power ratio the
    // features depend on is unchanged.
    let g_cap = 1.0 / capture.mean_power(span.clone()).sqrt();
    capture.samples.iter_mut().for_each(|s| *s *= g_cap);

    // Synthesis knows the exact timing: extract at t = 0 with no CFO.
    let grid = extract_ssb(&capture, 0, 0.0, n_fft, cp)?;
    let y_pss = &capture.samples[cp..cp + n_fft];
    let meta = ObsMeta {
        sjnr_db: jammed.then_some(draw.sjnr_db),
        distance_m: Some(draw.distance_m),
        modulation: Some(draw.modulation),
        jammer: jammed.then_some(cfg.jammer.kind),
        n_id2: Some(draw.n_id2),
        seed: Some(seed),
    };
    let label = if jammed { Label::H1 } else { Label::H0 };
    extractor.observe(y_pss, &grid, Some(label), meta)
}

/// One line of the dataset manifest: the draw that produced an observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub label: Label,
    /// Absent for clean (H0) observations.
    pub sjnr_db: Option<f64>,
    pub distance_m: f64,
    pub modulation: Modulation,
    pub n_id2: u8,
    /// The observation seed (all stage seeds derive from it).
    pub seed: u64,
}

/// Split `n_obs` as evenly as possible across `n_cells` strata; earlier
/// cells absorb the remainder, so counts differ by at most one.
fn cell_quotas(n_obs: usize, n_cells: usize) -> Vec<usize> {
    let base = n_obs / n_cells;
    let rem = n_obs % n_cells;
    (0..n_cells).map(|c| base + usize::from(c < rem)).collect()
}

/// Generate a balanced labeled dataset: `n_obs_per_class` observations per
/// class, stratified evenly over (modulation, sector identity) cells, with
/// SJNR and distance drawn uniformly from their grids. Returns the
/// observations (all H0 first, then all H1) and a manifest recording every
/// draw. The result is a pure function of the config.
pub fn generate_dataset(cfg: &ScenarioConfig) -> Result<(Vec<Observation>, Vec<ManifestEntry>)> {
    cfg.validate()?;
    let extractor = FeatureExtractor::new(cfg.n_fft)?;
    let mut draw_rng = rng::chacha(rng::derive_seed(cfg.master_seed, DRAW_SALT));
    let obs_base = rng::derive_seed(cfg.master_seed, OBS_SALT);
    let quotas = cell_quotas(cfg.n_obs_per_class, cfg.modulations.len() * 3);

    let mut plan: Vec<(ScenarioDraw, bool)> = Vec::with_capacity(2 * cfg.n_obs_per_class);
    for jammed in [false, true] {
        for (cell, &quota) in quotas.iter().enumerate() {
            let modulation = cfg.modulations[cell / 3];
            let n_id2 = (cell % 3) as u8;
            for _ in 0..quota {
                let sjnr_db =
                    cfg.sjnr_grid_db[draw_rng.random_range(0..cfg.sjnr_grid_db.len())];
                let distance_m =
                    cfg.distance_grid_m[draw_rng.random_range(0..cfg.distance_grid_m.len())];
                plan.push((ScenarioDraw { sjnr_db, distance_m, modulation, n_id2 }, jammed));
            }
        }
    }

    let observations: Vec<Observation> = plan
        .par_iter()
        .enumerate()
        .map(|(i, (draw, jammed))| {
            let seed = rng::derive_seed(obs_base, i as u64);
            generate_observation_with(&extractor, cfg, draw, *jammed, seed)
        })
        .collect::<Result<_>>()?;

    let manifest = plan
        .iter()
        .enumerate()
        .map(|(i, (draw, jammed))| ManifestEntry {
            index: i,
            label: if *jammed { Label::H1 } else { Label::H0 },
            sjnr_db: jammed.then_some(draw.sjnr_db),
            distance_m: draw.distance_m,
            modulation: draw.modulation,
            n_id2: draw.n_id2,
            seed: rng::derive_seed(obs_base, i as u64),
        })
        .collect();
    Ok((observations, manifest))
}

/// Write a manifest as CSV (`index,label,sjnr_db,distance_m,modulation,
/// n_id2,seed`; the SJNR column is empty for H0 rows).
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut out = String::from("index,label,sjnr_db,distance_m,modulation,n_id2,seed\n");
    for e in entries {
        let label = match e.label {
            Label::H0 => "H0",
            Label::H1 => "H1",
        };
        let sjnr = e.sjnr_db.map_or_else(String::new, |v| v.to_string());
        out.push_str(&format!(
            "{},{label},{sjnr},{},{},{},{}\n",
            e.index, e.distance_m, e.modulation, e.n_id2, e.seed
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Indices for training the second-stage network: every H1 observation at or
/// above the SJNR cutoff, plus an equal-size H0 sample drawn without
/// replacement (seeded, deterministic). Returned sorted ascending.
pub fn high_sjnr_training_subset(
    observations: &[Observation],
    cutoff_db: f64,
    seed: u64,
) -> Vec<usize> {
    let mut picked: Vec<usize> = observations
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            o.label == Some(Label::H1) && o.meta.sjnr_db.is_some_and(|s| s >= cutoff_db)
        })
        .map(|(i, _)| i)
        .collect();
    let mut h0: Vec<usize> = observations
        .iter()
        .enumerate()
        .filter(|(_, o)| o.label == Some(Label::H0))
        .map(|(i, _)| i)
        .collect();
    h0.shuffle(&mut rng::chacha(rng::derive_seed(seed, SUBSET_SALT)));
    h0.truncate(picked.len());
    picked.extend(h0);
    picked.sort_unstable();
    picked
}

// ---------------------------------------------------------------------------
// Binary persistence
// ---------------------------------------------------------------------------

/// A loaded dataset: the DFT size observations were generated at, plus the
/// observations themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub n_fft: usize,
    pub observations: Vec<Observation>,
}

/// Leading bytes of every dataset file (callers can sniff inputs with it).
pub const DATASET_MAGIC: &[u8; 8] = b"SSBJAM01";
const DATASET_VERSION: u32 = 1;

fn label_to_byte(label: Option<Label>) -> u8 {
    match label {
        Some(Label::H0) => 0,
        Some(Label::H1) => 1,
        None => 2,
    }
}

fn modulation_to_byte(m: Option<Modulation>) -> u8 {
    match m {
        None => 0,
        Some(Modulation::Qpsk) => 1,
        Some(Modulation::Qam16) => 2,
        Some(Modulation::Qam64) => 3,
        Some(Modulation::Qam256) => 4,
    }
}

fn jammer_to_byte(j: Option<JammerKind>) -> u8 {
    match j {
        None => 0,
        Some(JammerKind::Awgn) => 1,
        Some(JammerKind::Bpsk) => 2,
        Some(JammerKind::Qam8) => 3,
    }
}

/// Persist observations in the little-endian `SSBJAM01` format: a 28-byte
/// header (magic, version, n_fft, n_obs, rows, cols — all u32 after the
/// magic), then one record per observation (label byte, SJNR and distance as
/// f32 with NaN meaning absent, modulation/jammer/sector bytes, seed flag
/// and u64 seed, then the row-major f32 tensor).
pub fn save_dataset(observations: &[Observation], n_fft: usize, path: &Path) -> Result<()> {
    if n_fft == 0 || !n_fft.is_multiple_of(2) {
        return Err(Error::invalid("DFT size must be even and nonzero"));
    }
    if observations.len() > u32::MAX as usize {
        return Err(Error::invalid("too many observations for the file format"));
    }
    let cols = n_fft / 2;
    for (i, o) in observations.iter().enumerate() {
        if o.cols != cols || o.tensor.len() != TENSOR_ROWS * cols {
            return Err(Error::invalid(format!(
                "observation {i} has shape {}x{} but the file needs {TENSOR_ROWS}x{cols}",
                o.tensor.len() / o.cols.max(1),
                o.cols
            )));
        }
        if let Some(v) = o.meta.n_id2 {
            if v > 2 {
                return Err(Error::invalid(format!("observation {i} has sector identity {v}")));
            }
        }
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(n_fft as u32).to_le_bytes())?;
    w.write_all(&(observations.len() as u32).to_le_bytes())?;
    w.write_all(&(TENSOR_ROWS as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for o in observations {
        w.write_all(&[label_to_byte(o.label)])?;
        w.write_all(&o.meta.sjnr_db.map_or(f32::NAN, |v| v as f32).to_le_bytes())?;
        w.write_all(&o.meta.distance_m.map_or(f32::NAN, |v| v as f32).to_le_bytes())?;
        w.write_all(&[
            modulation_to_byte(o.meta.modulation),
            jammer_to_byte(o.meta.jammer),
            o.meta.n_id2.unwrap_or(u8::MAX),
            u8::from(o.meta.seed.is_some()),
        ])?;
        w.write_all(&o.meta.seed.unwrap_or(0).to_le_bytes())?;
        for &v in &o.tensor {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Byte-counting reader: failures report the offset of the field being read.
struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<u64> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format { offset: at, msg: format!("file truncated while reading {what}") }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(at)
    }

    fn u8(&mut self, what: &str) -> Result<(u64, u8)> {
        let mut b = [0u8; 1];
        let at = self.fill(&mut b, what)?;
        Ok((at, b[0]))
    }

    fn u32(&mut self, what: &str) -> Result<(u64, u32)> {
        let mut b = [0u8; 4];
        let at = self.fill(&mut b, what)?;
        Ok((at, u32::from_le_bytes(b)))
    }

    fn u64(&mut self, what: &str) -> Result<(u64, u64)> {
        let mut b = [0u8; 8];
        let at = self.fill(&mut b, what)?;
        Ok((at, u64::from_le_bytes(b)))
    }

    fn f32(&mut self, what: &str) -> Result<(u64, f32)> {
        let mut b = [0u8; 4];
        let at = self.fill(&mut b, what)?;
        Ok((at, f32::from_le_bytes(b)))
    }
}

/// Load a dataset written by [`save_dataset`]. Bad magic, an unsupported
/// version, inconsistent dimensions, truncation, or trailing bytes are
/// format errors carrying the failing byte offset (and the record index,
/// where one applies).
pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    let mut r = ByteReader { inner: BufReader::new(File::open(path)?), offset: 0 };

    let mut magic = [0u8; 8];
    r.fill(&mut magic, "the file magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(DATASET_MAGIC)
            ),
        });
    }
    let (at, version) = r.u32("the format version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: at,
            msg: format!("unsupported version {version}, expected {DATASET_VERSION}"),
        });
    }
    let (at, n_fft) = r.u32("the DFT size")?;
    let n_fft = n_fft as usize;
    if n_fft == 0 || !n_fft.is_multiple_of(2) {
        return Err(Error::Format { offset: at, msg: format!("invalid DFT size {n_fft}") });
    }
    let (_, n_obs) = r.u32("the observation count")?;
    let (at, rows) = r.u32("the row count")?;
    if rows as usize != TENSOR_ROWS {
        return Err(Error::Format {
            offset: at,
            msg: format!("tensor has {rows} rows, expected {TENSOR_ROWS}"),
        });
    }
    let (at, cols) = r.u32("the column count")?;
    let cols = cols as usize;
    if cols != n_fft / 2 {
        return Err(Error::Format {
            offset: at,
            msg: format!("tensor has {cols} columns, expected n_fft/2 = {}", n_fft / 2),
        });
    }

    let mut observations = Vec::with_capacity(n_obs as usize);
    let mut tensor_bytes = vec![0u8; 4 * TENSOR_ROWS * cols];
    for i in 0..n_obs {
        let (at, label_byte) = r.u8(&format!("record {i} label"))?;
        let label = match label_byte {
            0 => Some(Label::H0),
            1 => Some(Label::H1),
            2 => None,
            other => {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("record {i} has invalid label byte {other}"),
                });
            }
        };
        let (_, sjnr) = r.f32(&format!("record {i} SJNR"))?;
        let (_, distance) = r.f32(&format!("record {i} distance"))?;
        let (at, modulation_byte) = r.u8(&format!("record {i} modulation"))?;
        let modulation = match modulation_byte {
            0 => None,
            1 => Some(Modulation::Qpsk),
            2 => Some(Modulation::Qam16),
            3 => Some(Modulation::Qam64),
            4 => Some(Modulation::Qam256),
            other => {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("record {i} has invalid modulation byte {other}"),
                });
            }
        };
        let (at, jammer_byte) = r.u8(&format!("record {i} jammer"))?;
        let jammer = match jammer_byte {
            0 => None,
            1 => Some(JammerKind::Awgn),
            2 => Some(JammerKind::Bpsk),
            3 => Some(JammerKind::Qam8),
            other => {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("record {i} has invalid jammer byte {other}"),
                });
            }
        };
        let (at, n_id2_byte) = r.u8(&format!("record {i} sector identity"))?;
        let n_id2 = match n_id2_byte {
            0..=2 => Some(n_id2_byte),
            u8::MAX => None,
            other => {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("record {i} has invalid sector identity {other}"),
                });
            }
        };
        let (at, seed_flag) = r.u8(&format!("record {i} seed flag"))?;
        if seed_flag > 1 {
            return Err(Error::Format {
                offset: at,
                msg: format!("record {i} has invalid seed flag {seed_flag}"),
            });
        }
        let (_, seed) = r.u64(&format!("record {i} seed"))?;
        r.fill(&mut tensor_bytes, &format!("record {i} tensor"))?;
        let tensor: Vec<f32> = tensor_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        observations.push(Observation {
            cols,
            tensor,
            label,
            meta: ObsMeta {
                sjnr_db: (!sjnr.is_nan()).then_some(f64::from(sjnr)),
                distance_m: (!distance.is_nan()).then_some(f64::from(distance)),
                modulation,
                jammer,
                n_id2,
                seed: (seed_flag == 1).then_some(seed),
            },
        });
    }

    let mut probe = [0u8; 1];
    match r.inner.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Format {
                offset: r.offset,
                msg: "trailing bytes after the last record".to_string(),
            });
        }
        Err(e) => return Err(Error::Io(e)),
    }
    Ok(DatasetFile { n_fft, observations })
}

// ---------------------------------------------------------------------------
// IQ capture ingestion
// ---------------------------------------------------------------------------

/// Synchronization parameters for [`ingest_iq_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct IngestParams {
    pub n_fft: usize,
    pub scs_hz: f64,
}

impl Default for IngestParams {
    fn default() -> Self {
        Self { n_fft: 2048, scs_hz: 30_000.0 }
    }
}

fn parse_iq_line(text: &str) -> std::result::Result<Complex64, String> {
    let mut parts = text.split(',');
    let mut field = || -> std::result::Result<f64, String> {
        let raw = parts
            .next()
            .ok_or_else(|| "expected two comma-separated values".to_string())?
            .trim();
        let v: f64 =
            raw.parse().map_err(|_| format!("cannot parse {raw:?} as a number"))?;
        if !v.is_finite() {
            return Err(format!("sample value {v} is not finite"));
        }
        Ok(v)
    };
    let re = field()?;
    let im = field()?;
    if parts.next().is_some() {
        return Err("expected exactly two comma-separated values".to_string());
    }
    Ok(Complex64::new(re, im))
}

/// Ingest a raw IQ capture stored as CSV (`<I>,<Q>` per line, one optional
/// header line) into an unlabeled observation: blind timing recovery with a
/// match-quality gate, carrier-frequency estimation against all three
/// candidate sector references, SSB extraction, then the feature pipeline.
pub fn ingest_iq_csv(path: &Path, params: &IngestParams) -> Result<Observation> {
    let text = fs::read_to_string(path)?;
    let mut samples = Vec::new();
    let mut header_allowed = true;
    for (i, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        match parse_iq_line(trimmed) {
            Ok(c) => {
                samples.push(c);
                header_allowed = false;
            }
            Err(msg) => {
                if header_allowed {
                    // A single leading non-numeric line is a column header.
                    header_allowed = false;
                    continue;
                }
                return Err(Error::Parse { line: i + 1, msg });
            }
        }
    }

    let n_fft = params.n_fft;
    let cp = default_cp_length(n_fft);
    let span_len = SSB_SYMBOLS * (n_fft + cp);
    if samples.len() < span_len {
        return Err(Error::invalid(format!(
            "capture of {} samples cannot hold one SSB span of {span_len}",
            samples.len()
        )));
    }
    let fs = params.scs_hz * n_fft as f64;
    let signal = TimeSignal::from_samples(samples, fs, n_fft);

    // Blind timing first: the cyclic-prefix metric is CFO-invariant, and its
    // quality gate rejects SSB-free captures before the costlier CFO search.
    let (t_off, quality) = locate_ssb(&signal, n_fft, cp)?;
    if quality < SYNC_QUALITY_THRESHOLD {
        return Err(Error::NoSsbFound { metric: quality, threshold: SYNC_QUALITY_THRESHOLD });
    }

    // CFO against each candidate sector reference; the strongest match wins.
    let mut best: Option<(f64, f64)> = None;
    for n_id2 in 0..3u8 {
        let reference = ssb_reference(n_id2, n_fft, cp, params.scs_hz)?;
        let (f, peak) = estimate_cfo_refined_peak(&signal, &reference, params.scs_hz)?;
        if best.is_none_or(|(_, best_peak)| peak > best_peak) {
            best = Some((f, peak));
        }
    }
    let (f_off, _) = best.expect("three candidate references were evaluated");

    let grid = extract_ssb(&signal, t_off, f_off, n_fft, cp)?;
    let start = t_off + cp;
    let y_pss: Vec<Complex64> = (0..n_fft)
        .map(|i| {
            let t = (start + i) as f64;
            signal.samples[start + i]
                * Complex64::from_polar(1.0, -std::f64::consts::TAU * f_off * t / fs)
        })
        .collect();
    FeatureExtractor::new(n_fft)?.observe(&y_pss, &grid, None, ObsMeta::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    const N_FFT: usize = 256;

    fn tiny_config() -> ScenarioConfig {
        ScenarioConfig { n_obs_per_class: 3, master_seed: 11, ..ScenarioConfig::with_n_fft(N_FFT) }
    }

    fn a_draw() -> ScenarioDraw {
        ScenarioDraw {
            sjnr_db: -10.0,
            distance_m: 50.0,
            modulation: Modulation::Qpsk,
            n_id2: 2,
        }
    }

    #[test]
    fn default_config_is_valid_and_scales_with_the_dft_size() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.sjnr_grid_db.len(), 41);
        assert_eq!(cfg.sjnr_grid_db[0], -10.0);
        assert_eq!(*cfg.sjnr_grid_db.last().unwrap(), 30.0);
        assert_eq!(cfg.distance_grid_m.len(), 25);
        assert_eq!(cfg.distance_grid_m[0], 10.0);
        assert_eq!(*cfg.distance_grid_m.last().unwrap(), 490.0);
        assert_eq!(cfg.n_fft, 2048);
        assert_eq!(cfg.band_subcarriers, 1272);

        assert_eq!(ScenarioConfig::with_n_fft(256).band_subcarriers, 240);
        assert_eq!(ScenarioConfig::with_n_fft(1024).band_subcarriers, 636);
        ScenarioConfig::with_n_fft(1024).validate().unwrap();

        let mut bad = ScenarioConfig::with_n_fft(256);
        bad.sjnr_grid_db.clear();
        assert!(bad.validate().is_err());
        let mut bad = ScenarioConfig::with_n_fft(256);
        bad.band_subcarriers = 241;
        assert!(bad.validate().is_err());
        let mut bad = ScenarioConfig::with_n_fft(256);
        bad.reference_distance_m = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = ScenarioConfig::with_n_fft(256);
        bad.modulations.push(Modulation::Qpsk);
        assert!(bad.validate().is_err());
        let mut bad = ScenarioConfig::with_n_fft(256);
        bad.n_obs_per_class = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quotas_split_evenly() {
        assert_eq!(cell_quotas(300, 12), vec![25; 12]);
        assert_eq!(cell_quotas(7, 3), vec![3, 2, 2]);
        assert_eq!(cell_quotas(2, 3), vec![1, 1, 0]);
    }

    #[test]
    fn labels_and_metadata_follow_the_jammed_flag() {
        let cfg = tiny_config();
        let clean = generate_observation(&cfg, &a_draw(), false, 5).unwrap();
        assert_eq!(clean.label, Some(Label::H0));
        assert_eq!(clean.meta.jammer, None);
        assert_eq!(clean.meta.sjnr_db, None);
        assert_eq!(clean.meta.distance_m, Some(50.0));
        assert_eq!(clean.meta.n_id2, Some(2));
        assert_eq!(clean.meta.seed, Some(5));
        assert_eq!(clean.cols, N_FFT / 2);

        let jammed = generate_observation(&cfg, &a_draw(), true, 5).unwrap();
        assert_eq!(jammed.label, Some(Label::H1));
        assert_eq!(jammed.meta.jammer, Some(cfg.jammer.kind));
        assert_eq!(jammed.meta.sjnr_db, Some(-10.0));
    }

    #[test]
    fn observation_generation_is_deterministic() {
        let cfg = tiny_config();
        let a = generate_observation(&cfg, &a_draw(), true, 77).unwrap();
        let b = generate_observation(&cfg, &a_draw(), true, 77).unwrap();
        assert_eq!(a, b);
        let c = generate_observation(&cfg, &a_draw(), true, 78).unwrap();
        assert_ne!(a.tensor, c.tensor);
    }

    #[test]
    fn strong_jamming_floods_the_null_elements() {
        // Paired twins: identical seeds, only the jammed flag differs. The
        // log null-element energy must rise strictly under jamming.
        let cfg = tiny_config();
        for seed in [21, 22, 23] {
            let clean = generate_observation(&cfg, &a_draw(), false, seed).unwrap();
            let jammed = generate_observation(&cfg, &a_draw(), true, seed).unwrap();
            assert!(
                jammed.row(3)[0] > clean.row(3)[0],
                "seed {seed}: jammed ε {} vs clean ε {}",
                jammed.row(3)[0],
                clean.row(3)[0]
            );
        }
    }

    #[test]
    fn link_budget_tracks_distance() {
        // One fixed front-end gain: on a longer link the SSB arrives weaker,
        // so thermal noise claims a larger share of the normalized capture
        // and the null-element energy rises.
        let cfg = tiny_config();
        let near = ScenarioDraw { distance_m: 10.0, ..a_draw() };
        let far = ScenarioDraw { distance_m: 490.0, ..a_draw() };
        for seed in [31, 32, 33] {
            let close = generate_observation(&cfg, &near, false, seed).unwrap();
            let distant = generate_observation(&cfg, &far, false, seed).unwrap();
            assert!(
                distant.row(3)[0] > close.row(3)[0],
                "seed {seed}: ε at 490 m {} vs 10 m {}",
                distant.row(3)[0],
                close.row(3)[0]
            );
        }
    }

    #[test]
    fn infeasible_sjnr_leaves_the_clean_waveform() {
        // At 490 m the received SNR sits well under 30 dB, so a jammer
        // constrained to SJNR 30 dB has no power budget at all: the jammed
        // observation must equal its clean twin exactly. The same request on
        // a short link is feasible and must perturb the tensor.
        let cfg = tiny_config();
        let weak_far = ScenarioDraw { distance_m: 490.0, sjnr_db: 30.0, ..a_draw() };
        let clean = generate_observation(&cfg, &weak_far, false, 9).unwrap();
        let jammed = generate_observation(&cfg, &weak_far, true, 9).unwrap();
        assert_eq!(jammed.tensor, clean.tensor);
        assert_eq!(jammed.label, Some(Label::H1));

        let weak_near = ScenarioDraw { distance_m: 10.0, sjnr_db: 30.0, ..a_draw() };
        let clean = generate_observation(&cfg, &weak_near, false, 9).unwrap();
        let jammed = generate_observation(&cfg, &weak_near, true, 9).unwrap();
        assert_ne!(jammed.tensor, clean.tensor);
    }

    #[test]
    fn dataset_generation_stratifies_and_reproduces() {
        let mut cfg = tiny_config();
        cfg.modulations = vec![Modulation::Qpsk];
        let (obs, manifest) = generate_dataset(&cfg).unwrap();
        assert_eq!(obs.len(), 6);
        assert_eq!(manifest.len(), 6);

        // Class balance and stratification: 3 per class over 3 sector cells.
        for label in [Label::H0, Label::H1] {
            for n_id2 in 0..3u8 {
                let count = manifest
                    .iter()
                    .filter(|e| e.label == label && e.n_id2 == n_id2)
                    .count();
                assert_eq!(count, 1, "label {label:?} sector {n_id2}");
            }
        }
        for (i, (o, e)) in obs.iter().zip(&manifest).enumerate() {
            assert_eq!(e.index, i);
            assert_eq!(o.label, Some(e.label));
            assert_eq!(o.meta.sjnr_db, e.sjnr_db);
            assert_eq!(o.meta.distance_m, Some(e.distance_m));
            assert_eq!(o.meta.n_id2, Some(e.n_id2));
            assert_eq!(o.meta.seed, Some(e.seed));
            assert_eq!(e.sjnr_db.is_some(), e.label == Label::H1);
            assert!(cfg.distance_grid_m.contains(&e.distance_m));
        }

        let (obs2, manifest2) = generate_dataset(&cfg).unwrap();
        assert_eq!(obs, obs2);
        assert_eq!(manifest, manifest2);
    }

    #[test]
    fn manifest_renders_as_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let entries = vec![
            ManifestEntry {
                index: 0,
                label: Label::H0,
                sjnr_db: None,
                distance_m: 10.0,
                modulation: Modulation::Qam64,
                n_id2: 1,
                seed: 42,
            },
            ManifestEntry {
                index: 1,
                label: Label::H1,
                sjnr_db: Some(-3.0),
                distance_m: 490.0,
                modulation: Modulation::Qpsk,
                n_id2: 0,
                seed: 43,
            },
        ];
        write_manifest(&entries, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,label,sjnr_db,distance_m,modulation,n_id2,seed");
        assert_eq!(lines[1], "0,H0,,10,64qam,1,42");
        assert_eq!(lines[2], "1,H1,-3,490,qpsk,0,43");
    }

    #[test]
    fn dataset_file_round_trips_bit_exactly() {
        let mut cfg = tiny_config();
        cfg.modulations = vec![Modulation::Qam16];
        let (mut obs, _) = generate_dataset(&cfg).unwrap();
        // An ingested-style observation: no label, empty metadata.
        obs.push(Observation {
            cols: N_FFT / 2,
            tensor: vec![0.25; TENSOR_ROWS * N_FFT / 2],
            label: None,
            meta: ObsMeta::default(),
        });

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bin");
        save_dataset(&obs, N_FFT, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.n_fft, N_FFT);
        assert_eq!(back.observations, obs);

        // An empty dataset is a valid file.
        save_dataset(&[], N_FFT, &path).unwrap();
        let empty = load_dataset(&path).unwrap();
        assert_eq!(empty.n_fft, N_FFT);
        assert!(empty.observations.is_empty());
    }

    #[test]
    fn dataset_file_rejects_corruption() {
        let mut cfg = tiny_config();
        cfg.modulations = vec![Modulation::Qpsk];
        cfg.n_obs_per_class = 1;
        let (obs, _) = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.bin");
        save_dataset(&obs, N_FFT, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Bad magic, reported at offset 0.
        let mut bad = good.clone();
        bad[0] ^= 0xff;
        std::fs::write(&path, &bad).unwrap();
        match load_dataset(&path) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected a format error at offset 0, got {other:?}"),
        }

        // Unsupported version, reported at offset 8.
        let mut bad = good.clone();
        bad[8] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format { offset: 8, .. })));

        // Wrong row count, reported at offset 20.
        let mut bad = good.clone();
        bad[20] = 4;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format { offset: 20, .. })));

        // Truncation inside the second record names that record.
        let record_len = 1 + 4 + 4 + 4 + 8 + 4 * TENSOR_ROWS * (N_FFT / 2);
        let cut = 28 + record_len + record_len / 2;
        std::fs::write(&path, &good[..cut]).unwrap();
        match load_dataset(&path) {
            Err(Error::Format { msg, .. }) => {
                assert!(msg.contains("record 1"), "message was: {msg}");
                assert!(msg.contains("truncated"), "message was: {msg}");
            }
            other => panic!("expected a truncation error, got {other:?}"),
        }

        // Trailing garbage after the last record.
        let mut bad = good.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        match load_dataset(&path) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, good.len() as u64);
                assert!(msg.contains("trailing"));
            }
            other => panic!("expected a trailing-bytes error, got {other:?}"),
        }
    }

    /// Build a capture holding one SSB with a known CFO and timing offset,
    /// surrounded by noise-only padding.
    fn loopback_capture(
        f_cfo: f64,
        lead: usize,
        tail: usize,
        snr_db: f64,
        seed: u64,
    ) -> (TimeSignal, usize) {
        let cp = default_cp_length(N_FFT);
        let ssb = build_ssb_grid(1).unwrap();
        let band = embed_in_band(&ssb, 240, 0, Modulation::Qpsk, 7).unwrap();
        let tx = ofdm_modulate(&band, N_FFT, cp, 30_000.0).unwrap();
        let fs = tx.sample_rate_hz;
        let p_signal = tx.mean_power(0..tx.samples.len());

        let mut full = vec![Complex64::new(0.0, 0.0); lead];
        full.extend_from_slice(&tx.samples);
        full.resize(full.len() + tail, Complex64::new(0.0, 0.0));
        for (t, s) in full.iter_mut().enumerate() {
            *s *= Complex64::from_polar(1.0, std::f64::consts::TAU * f_cfo * t as f64 / fs);
        }
        let sigma = (p_signal / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
        let mut noise_rng = rng::chacha(seed);
        for s in full.iter_mut() {
            let re: f64 = noise_rng.sample(StandardNormal);
            let im: f64 = noise_rng.sample(StandardNormal);
            *s += Complex64::new(re, im) * sigma;
        }
        (TimeSignal::from_samples(full, fs, N_FFT), lead)
    }

    fn write_capture_csv(signal: &TimeSignal, path: &Path) {
        let mut text = String::from("I,Q\n");
        for s in &signal.samples {
            text.push_str(&format!("{},{}\n", s.re, s.im));
        }
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn csv_ingestion_matches_direct_extraction() {
        let f_cfo = 2345.0;
        let (capture, t_true) = loopback_capture(f_cfo, 777, 333, 28.0, 99);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("capture.csv");
        write_capture_csv(&capture, &path);

        let params = IngestParams { n_fft: N_FFT, scs_hz: 30_000.0 };
        let ingested = ingest_iq_csv(&path, &params).unwrap();
        assert_eq!(ingested.label, None);
        assert_eq!(ingested.meta, ObsMeta::default());

        // Direct path: extract at the known offsets from the same capture.
        let cp = default_cp_length(N_FFT);
        let fs = capture.sample_rate_hz;
        let grid = extract_ssb(&capture, t_true, f_cfo, N_FFT, cp).unwrap();
        let start = t_true + cp;
        let y_pss: Vec<Complex64> = (0..N_FFT)
            .map(|i| {
                let t = (start + i) as f64;
                capture.samples[start + i]
                    * Complex64::from_polar(1.0, -std::f64::consts::TAU * f_cfo * t / fs)
            })
            .collect();
        let direct = FeatureExtractor::new(N_FFT)
            .unwrap()
            .observe(&y_pss, &grid, None, ObsMeta::default())
            .unwrap();

        let scale = direct.tensor.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
        let worst = ingested
            .tensor
            .iter()
            .zip(&direct.tensor)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(
            worst <= 1e-3 * scale,
            "worst tensor deviation {worst} exceeds 1e-3 of peak {scale}"
        );
    }

    #[test]
    fn csv_ingestion_reports_malformed_lines_and_missing_ssbs() {
        let dir = tempfile::tempdir().unwrap();
        let params = IngestParams { n_fft: N_FFT, scs_hz: 30_000.0 };

        // Non-numeric field on line 7 (line 1 is a legitimate header).
        let path = dir.path().join("bad_field.csv");
        let mut text = String::from("I,Q\n");
        for i in 0..5 {
            text.push_str(&format!("0.{i},0.{i}\n"));
        }
        text.push_str("0.5,oops\n");
        std::fs::write(&path, text).unwrap();
        match ingest_iq_csv(&path, &params) {
            Err(Error::Parse { line: 7, msg }) => assert!(msg.contains("oops")),
            other => panic!("expected a parse error at line 7, got {other:?}"),
        }

        // A one-field line fails even right after the header.
        let path = dir.path().join("short_row.csv");
        std::fs::write(&path, "I,Q\n0.25\n").unwrap();
        assert!(matches!(ingest_iq_csv(&path, &params), Err(Error::Parse { line: 2, .. })));

        // A non-finite sample is rejected, not propagated into the DSP.
        let path = dir.path().join("inf.csv");
        std::fs::write(&path, "0.1,0.1\ninf,0.0\n").unwrap();
        assert!(matches!(ingest_iq_csv(&path, &params), Err(Error::Parse { line: 2, .. })));

        // Too short to hold an SSB.
        let path = dir.path().join("short.csv");
        std::fs::write(&path, "0.1,0.2\n0.3,0.4\n").unwrap();
        assert!(matches!(ingest_iq_csv(&path, &params), Err(Error::InvalidArgument(_))));

        // Pure noise: long enough, but no SSB to find.
        let path = dir.path().join("noise.csv");
        let mut noise_rng = rng::chacha(4242);
        let mut text = String::new();
        for _ in 0..2500 {
            let re: f64 = noise_rng.sample(StandardNormal);
            let im: f64 = noise_rng.sample(StandardNormal);
            text.push_str(&format!("{re},{im}\n"));
        }
        std::fs::write(&path, text).unwrap();
        match ingest_iq_csv(&path, &params) {
            Err(Error::NoSsbFound { metric, threshold }) => {
                assert!(metric < threshold);
                assert_eq!(threshold, SYNC_QUALITY_THRESHOLD);
            }
            other => panic!("expected no-SSB-found, got {other:?}"),
        }
    }

    #[test]
    fn second_stage_subset_is_balanced_and_deterministic() {
        let num = |label: Option<Label>, sjnr: Option<f64>| Observation {
            cols: 1,
            tensor: vec![0.0; TENSOR_ROWS],
            label,
            meta: ObsMeta { sjnr_db: sjnr, ..ObsMeta::default() },
        };
        let mut obs = Vec::new();
        for sjnr in [0.0, 10.0, 20.0, 30.0, 40.0] {
            obs.push(num(Some(Label::H1), Some(sjnr)));
        }
        obs.push(num(Some(Label::H1), None)); // unusable: no recorded SJNR
        obs.push(num(None, Some(25.0))); // unusable: unlabeled
        for _ in 0..6 {
            obs.push(num(Some(Label::H0), None));
        }

        let subset = high_sjnr_training_subset(&obs, 10.0, 3);
        let h1: Vec<usize> =
            subset.iter().copied().filter(|&i| obs[i].label == Some(Label::H1)).collect();
        let h0: Vec<usize> =
            subset.iter().copied().filter(|&i| obs[i].label == Some(Label::H0)).collect();
        assert_eq!(h1, vec![1, 2, 3, 4]); // SJNR 10, 20, 30, 40
        assert_eq!(h0.len(), h1.len());
        assert!(subset.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subset, high_sjnr_training_subset(&obs, 10.0, 3));

        // The H0 side caps at what is available.
        let few: Vec<Observation> = obs.iter().take(6).cloned().collect();
        let subset = high_sjnr_training_subset(&few, 10.0, 3);
        assert_eq!(subset, vec![1, 2, 3, 4]); // four H1, no H0 available
    }

    proptest! {
        #[test]
        fn quotas_always_cover_and_balance(n in 1usize..500, cells in 1usize..16) {
            let q = cell_quotas(n, cells);
            prop_assert_eq!(q.len(), cells);
            prop_assert_eq!(q.iter().sum::<usize>(), n);
            let max = *q.iter().max().unwrap();
            let min = *q.iter().min().unwrap();
            prop_assert!(max - min <= 1);
        }
    }
}
