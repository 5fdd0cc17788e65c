//! SSB waveform synthesis: PSS m-sequences, resource grids, CP-OFDM.
//!
//! The synchronization signal block (SSB) is a 240-subcarrier x 4-symbol
//! region of the downlink resource grid. Symbol 0 carries the primary
//! synchronization signal (PSS) — one of three length-127 bipolar
//! m-sequences — on subcarriers 56..=182, leaving 113 intentionally empty
//! ("null") resource elements. Symbols 1..3 carry SSS/PBCH, which this
//! pipeline fills with placeholder QPSK cells: the detector never reads
//! their content, only their energy footprint.
//!
//! Modulation follows plain CP-OFDM: each symbol is an inverse DFT (scaled
//! by 1/N_FFT) of the band-centered subcarrier mapping, prefixed with its
//! cyclic prefix.

use crate::error::{Error, Result};
use crate::fft;
use crate::rng;
use num_complex::Complex64;
use rand::Rng;

/// Length of the PSS m-sequence.
pub const PSS_LENGTH: usize = 127;
/// Subcarriers spanned by an SSB.
pub const SSB_SUBCARRIERS: usize = 240;
/// OFDM symbols spanned by an SSB.
pub const SSB_SYMBOLS: usize = 4;
/// First subcarrier of the PSS within SSB symbol 0 (occupies 56..=182).
pub const PSS_FIRST_SUBCARRIER: usize = 56;
/// Number of empty resource elements in SSB symbol 0.
pub const SSB_NULL_RES: usize = SSB_SUBCARRIERS - PSS_LENGTH;

/// One of the three PSS sequences, as bipolar (+1/-1) symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct PssSequence {
    /// Sector identity in {0, 1, 2}.
    pub n_id2: u8,
    /// The 127 bipolar symbols.
    pub symbols: Vec<f64>,
}

/// Generate the first `length` bits of the degree-7 PSS m-sequence.
///
/// The recurrence is `s(i+7) = (s(i+4) + s(i)) mod 2` with initial state
/// `s(0..=6) = [0, 1, 1, 0, 1, 1, 1]`.
pub fn m_sequence(length: usize) -> Result<Vec<u8>> {
    if length == 0 || length > PSS_LENGTH {
        return Err(Error::invalid(format!(
            "m-sequence length must be in 1..={PSS_LENGTH}, got {length}"
        )));
    }
    const INIT: [u8; 7] = [0, 1, 1, 0, 1, 1, 1];
    let mut s = Vec::with_capacity(length);
    s.extend_from_slice(&INIT[..length.min(7)]);
    for i in 7..length {
        s.push(s[i - 3] ^ s[i - 7]);
    }
    Ok(s)
}

/// Build the PSS for a sector identity: `d(k) = 1 - 2*s((k + 43*n_id2) mod 127)`.
pub fn pss_sequence(n_id2: u8) -> Result<PssSequence> {
    if n_id2 > 2 {
        return Err(Error::invalid(format!("n_id2 must be 0, 1, or 2, got {n_id2}")));
    }
    let s = m_sequence(PSS_LENGTH)?;
    let symbols = (0..PSS_LENGTH)
        .map(|k| 1.0 - 2.0 * f64::from(s[(k + 43 * n_id2 as usize) % PSS_LENGTH]))
        .collect();
    Ok(PssSequence { n_id2, symbols })
}

/// A complex subcarrier-by-symbol grid (symbol-major storage).
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceGrid {
    n_subcarriers: usize,
    n_symbols: usize,
    cells: Vec<Complex64>,
}

impl ResourceGrid {
    /// All-zero grid with the given dimensions.
    pub fn new(n_subcarriers: usize, n_symbols: usize) -> Result<Self> {
        if n_subcarriers == 0 || n_symbols == 0 {
            return Err(Error::invalid("resource grid dimensions must be nonzero"));
        }
        Ok(Self {
            n_subcarriers,
            n_symbols,
            cells: vec![Complex64::new(0.0, 0.0); n_subcarriers * n_symbols],
        })
    }

    pub fn n_subcarriers(&self) -> usize {
        self.n_subcarriers
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    /// Cell at (symbol `l`, subcarrier `k`).
    pub fn cell(&self, l: usize, k: usize) -> Complex64 {
        assert!(l < self.n_symbols && k < self.n_subcarriers, "cell index out of range");
        self.cells[l * self.n_subcarriers + k]
    }

    pub fn set_cell(&mut self, l: usize, k: usize, value: Complex64) {
        assert!(l < self.n_symbols && k < self.n_subcarriers, "cell index out of range");
        self.cells[l * self.n_subcarriers + k] = value;
    }

    /// All subcarriers of one symbol.
    pub fn symbol(&self, l: usize) -> &[Complex64] {
        assert!(l < self.n_symbols, "symbol index out of range");
        &self.cells[l * self.n_subcarriers..(l + 1) * self.n_subcarriers]
    }
}

/// Data-subcarrier modulation for the band surrounding the SSB.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modulation {
    Qpsk,
    Qam16,
    Qam64,
    Qam256,
}

impl Modulation {
    pub const ALL: [Modulation; 4] =
        [Modulation::Qpsk, Modulation::Qam16, Modulation::Qam64, Modulation::Qam256];

    /// Draw one unit-average-power constellation point.
    fn draw(self, rng: &mut impl Rng) -> Complex64 {
        let (levels, norm): (&[f64], f64) = match self {
            Modulation::Qpsk => (&[-1.0, 1.0], std::f64::consts::SQRT_2),
            Modulation::Qam16 => (&[-3.0, -1.0, 1.0, 3.0], 10f64.sqrt()),
            Modulation::Qam64 => {
                (&[-7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0], 42f64.sqrt())
            }
            Modulation::Qam256 => (
                &[
                    -15.0, -13.0, -11.0, -9.0, -7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0,
                    9.0, 11.0, 13.0, 15.0,
                ],
                170f64.sqrt(),
            ),
        };
        let i = levels[rng.random_range(0..levels.len())];
        let q = levels[rng.random_range(0..levels.len())];
        Complex64::new(i / norm, q / norm)
    }
}

impl std::str::FromStr for Modulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qpsk" => Ok(Modulation::Qpsk),
            "16qam" => Ok(Modulation::Qam16),
            "64qam" => Ok(Modulation::Qam64),
            "256qam" => Ok(Modulation::Qam256),
            other => Err(Error::invalid(format!(
                "unknown modulation {other:?} (expected qpsk, 16qam, 64qam, or 256qam)"
            ))),
        }
    }
}

impl std::fmt::Display for Modulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modulation::Qpsk => "qpsk",
            Modulation::Qam16 => "16qam",
            Modulation::Qam64 => "64qam",
            Modulation::Qam256 => "256qam",
        })
    }
}

/// Build the 240x4 SSB grid for a sector identity.
///
/// Symbol 0 carries the PSS on subcarriers 56..=182 and zeros elsewhere.
/// Symbols 1..3 carry placeholder QPSK cells in the standard SSS/PBCH
/// positions (PBCH on all of symbols 1 and 3 plus the symbol-2 edges,
/// SSS in the symbol-2 center); their content is deterministic in `n_id2`
/// and irrelevant to the detector.
pub fn build_ssb_grid(n_id2: u8) -> Result<ResourceGrid> {
    let pss = pss_sequence(n_id2)?;
    let mut grid = ResourceGrid::new(SSB_SUBCARRIERS, SSB_SYMBOLS)?;
    for (i, &d) in pss.symbols.iter().enumerate() {
        grid.set_cell(0, PSS_FIRST_SUBCARRIER + i, Complex64::new(d, 0.0));
    }
    // Placeholder fill: deterministic per sector so repeated builds are
    // bit-identical.
    let mut rng = rng::chacha(rng::derive_seed(0x5533_4242, n_id2 as u64));
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut fill = |grid: &mut ResourceGrid, l: usize, k: usize| {
        let re = if rng.random::<bool>() { inv_sqrt2 } else { -inv_sqrt2 };
        let im = if rng.random::<bool>() { inv_sqrt2 } else { -inv_sqrt2 };
        grid.set_cell(l, k, Complex64::new(re, im));
    };
    for k in 0..SSB_SUBCARRIERS {
        fill(&mut grid, 1, k);
        fill(&mut grid, 3, k);
    }
    for k in (0..=47).chain(56..=182).chain(192..=239) {
        fill(&mut grid, 2, k);
    }
    Ok(grid)
}

/// Subcarrier offset that centers an SSB inside a wider band.
pub fn centered_offset(band_subcarriers: usize) -> usize {
    (band_subcarriers - SSB_SUBCARRIERS) / 2
}

/// Place an SSB inside a wider band and fill every other cell with random
/// unit-average-power data symbols.
///
/// SSB cells (including its zeros) are copied bit-exactly to subcarriers
/// `ssb_offset..ssb_offset+240`; everything else gets independent draws from
/// `modulation`, seeded by `seed`.
pub fn embed_in_band(
    ssb: &ResourceGrid,
    band_subcarriers: usize,
    ssb_offset: usize,
    modulation: Modulation,
    seed: u64,
) -> Result<ResourceGrid> {
    if ssb.n_subcarriers() != SSB_SUBCARRIERS || ssb.n_symbols() != SSB_SYMBOLS {
        return Err(Error::invalid("embed_in_band expects a 240x4 SSB grid"));
    }
    if band_subcarriers < ssb_offset + SSB_SUBCARRIERS {
        return Err(Error::invalid(format!(
            "band of {band_subcarriers} subcarriers cannot hold an SSB at offset {ssb_offset}"
        )));
    }
    let mut band = ResourceGrid::new(band_subcarriers, SSB_SYMBOLS)?;
    let mut rng = rng::chacha(seed);
    for l in 0..SSB_SYMBOLS {
        for k in 0..band_subcarriers {
            let in_ssb = k >= ssb_offset && k < ssb_offset + SSB_SUBCARRIERS;
            let value = if in_ssb {
                ssb.cell(l, k - ssb_offset)
            } else {
                modulation.draw(&mut rng)
            };
            band.set_cell(l, k, value);
        }
    }
    Ok(band)
}

/// A complex baseband signal with its OFDM framing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
    /// DFT size used to build (or expected to demodulate) the signal.
    pub n_fft: usize,
    /// Cyclic-prefix length per modulated symbol; empty for raw captures.
    pub cp_lengths: Vec<usize>,
}

impl TimeSignal {
    /// Raw capture without symbol framing.
    pub fn from_samples(samples: Vec<Complex64>, sample_rate_hz: f64, n_fft: usize) -> Self {
        Self { samples, sample_rate_hz, n_fft, cp_lengths: Vec::new() }
    }

    /// Start index of modulated symbol `l`.
    pub fn symbol_start(&self, l: usize) -> usize {
        assert!(l < self.cp_lengths.len(), "symbol index out of range");
        self.cp_lengths[..l].iter().map(|cp| cp + self.n_fft).sum()
    }

    /// Mean per-sample power over an index range.
    pub fn mean_power(&self, range: std::ops::Range<usize>) -> f64 {
        assert!(range.end <= self.samples.len() && range.start < range.end);
        let sum: f64 = self.samples[range.clone()].iter().map(|s| s.norm_sqr()).sum();
        sum / range.len() as f64
    }
}

/// Conventional cyclic-prefix length for a DFT size (144 samples at 2048).
pub fn default_cp_length(n_fft: usize) -> usize {
    (n_fft * 144 + 1024) / 2048
}

/// Map a subcarrier index within a band to its DFT bin (band centered on DC).
pub(crate) fn subcarrier_to_bin(k: usize, n_subcarriers: usize, n_fft: usize) -> usize {
    let signed = k as i64 - (n_subcarriers as i64) / 2;
    signed.rem_euclid(n_fft as i64) as usize
}

/// CP-OFDM modulate a grid: per symbol, inverse DFT (scaled 1/N_FFT) of the
/// band-centered mapping, prefixed with the last `cp_length` samples.
pub fn ofdm_modulate(
    grid: &ResourceGrid,
    n_fft: usize,
    cp_length: usize,
    scs_hz: f64,
) -> Result<TimeSignal> {
    if n_fft < grid.n_subcarriers() {
        return Err(Error::invalid(format!(
            "n_fft {n_fft} smaller than grid width {}",
            grid.n_subcarriers()
        )));
    }
    if cp_length >= n_fft {
        return Err(Error::invalid("cyclic prefix must be shorter than the DFT size"));
    }
    if !(scs_hz > 0.0) {
        return Err(Error::invalid("subcarrier spacing must be positive"));
    }
    let n_sc = grid.n_subcarriers();
    let mut samples = Vec::with_capacity(grid.n_symbols() * (n_fft + cp_length));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for l in 0..grid.n_symbols() {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for k in 0..n_sc {
            buf[subcarrier_to_bin(k, n_sc, n_fft)] = grid.cell(l, k);
        }
        fft::inverse(&mut buf);
        let scale = 1.0 / n_fft as f64;
        buf.iter_mut().for_each(|c| *c *= scale);
        samples.extend_from_slice(&buf[n_fft - cp_length..]);
        samples.extend_from_slice(&buf);
    }
    Ok(TimeSignal {
        samples,
        sample_rate_hz: scs_hz * n_fft as f64,
        n_fft,
        cp_lengths: vec![cp_length; grid.n_symbols()],
    })
}

/// Invert [`ofdm_modulate`] for a signal whose framing metadata is intact.
pub fn ofdm_demodulate(signal: &TimeSignal, n_subcarriers: usize) -> Result<ResourceGrid> {
    if signal.cp_lengths.is_empty() {
        return Err(Error::invalid("signal carries no symbol framing to demodulate"));
    }
    if n_subcarriers > signal.n_fft {
        return Err(Error::invalid("more subcarriers requested than DFT bins"));
    }
    let n_fft = signal.n_fft;
    let mut grid = ResourceGrid::new(n_subcarriers, signal.cp_lengths.len())?;
    for l in 0..signal.cp_lengths.len() {
        let start = signal.symbol_start(l) + signal.cp_lengths[l];
        if start + n_fft > signal.samples.len() {
            return Err(Error::invalid("signal truncated before final symbol"));
        }
        let mut buf = signal.samples[start..start + n_fft].to_vec();
        fft::forward(&mut buf);
        for k in 0..n_subcarriers {
            grid.set_cell(l, k, buf[subcarrier_to_bin(k, n_subcarriers, n_fft)]);
        }
    }
    Ok(grid)
}
