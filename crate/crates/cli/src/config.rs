//! Key-value configuration files.
//!
//! Format: UTF-8 `key = value` lines, `#` comment lines, blank lines
//! ignored, dotted keys for sections (`channel.delay_spread_ns = 30`).
//! Later assignments override earlier ones. Every key must belong to the
//! schema below; unknown keys are errors that name the key and line.
//!
//! Grid-valued keys accept either a comma-separated list (`-10,-5,0`) or an
//! inclusive `start:step:stop` range (`-10:1:30`).

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use jamdet::channel::{ChannelProfile, Coverage, JammerKind};
use jamdet::dnn::{DEFAULT_CHANNELS, DEFAULT_FC_HIDDEN};
use jamdet::waveform::Modulation;
use jamdet::{ScenarioConfig, TrainConfig};

/// Everything a command can pull from a configuration file.
#[derive(Debug, Clone)]
pub struct Settings {
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub dnn_channels: [usize; 3],
    pub dnn_fc_hidden: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            train: TrainConfig::default(),
            dnn_channels: DEFAULT_CHANNELS,
            dnn_fc_hidden: DEFAULT_FC_HIDDEN,
        }
    }
}

/// Load settings from an optional config file, with an optional DFT-size
/// override (a `--n-fft` flag beats the file, which beats the default).
/// Changing the DFT size rescales the default occupied band; an explicit
/// `band_subcarriers` key still wins.
pub fn load_settings(path: Option<&Path>, n_fft_override: Option<usize>) -> Result<Settings, String> {
    let entries = match path {
        None => Vec::new(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            parse_entries(&text)?
        }
    };

    let mut n_fft = None;
    for (line, key, value) in &entries {
        if key == "n_fft" {
            n_fft = Some(parse_value::<usize>(*line, key, value)?);
        }
    }
    if let Some(n) = n_fft_override {
        n_fft = Some(n);
    }

    let mut s = Settings::default();
    if let Some(n) = n_fft {
        s.scenario = ScenarioConfig::with_n_fft(n);
    }
    for (line, key, value) in &entries {
        apply_key(&mut s, *line, key, value)?;
    }
    Ok(s)
}

fn parse_entries(text: &str) -> Result<Vec<(usize, String, String)>, String> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(format!("config line {line}: expected `key = value`, got {trimmed:?}"));
        };
        entries.push((line, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

fn apply_key(s: &mut Settings, line: usize, key: &str, value: &str) -> Result<(), String> {
    match key {
        "n_fft" => {} // consumed up front so the band default can rescale
        "scs_hz" => s.scenario.scs_hz = parse_value(line, key, value)?,
        "band_subcarriers" => s.scenario.band_subcarriers = parse_value(line, key, value)?,
        "n_obs_per_class" => s.scenario.n_obs_per_class = parse_value(line, key, value)?,
        "master_seed" => s.scenario.master_seed = parse_value(line, key, value)?,
        "tx_power_db" => s.scenario.tx_power_db = parse_value(line, key, value)?,
        "receiver_snr_db" => s.scenario.receiver_snr_db = parse_value(line, key, value)?,
        "reference_distance_m" => {
            s.scenario.reference_distance_m = parse_value(line, key, value)?;
        }
        "temperature_k" => s.scenario.temperature_k = parse_value(line, key, value)?,
        "sjnr_grid_db" => s.scenario.sjnr_grid_db = parse_grid(key, value).map_err(|e| at(line, e))?,
        "distance_grid_m" => {
            s.scenario.distance_grid_m = parse_grid(key, value).map_err(|e| at(line, e))?;
        }
        "modulations" => {
            s.scenario.modulations = value
                .split(',')
                .map(|m| {
                    Modulation::from_str(m.trim())
                        .map_err(|e| format!("config line {line}: key `{key}`: {e}"))
                })
                .collect::<Result<_, _>>()?;
        }
        "channel.profile" => {
            s.scenario.channel.profile = match normalize(value).as_str() {
                "los-dominant" => ChannelProfile::LosDominant,
                "nlos-rich" => ChannelProfile::NlosRich,
                other => {
                    return Err(format!(
                        "config line {line}: key `{key}`: unknown profile {other:?} \
                         (expected los-dominant or nlos-rich)"
                    ));
                }
            };
        }
        "channel.delay_spread_ns" => s.scenario.channel.delay_spread_ns = parse_value(line, key, value)?,
        "channel.n_taps" => s.scenario.channel.n_taps = parse_value(line, key, value)?,
        "channel.carrier_hz" => s.scenario.channel.carrier_hz = parse_value(line, key, value)?,
        "jammer.kind" => {
            s.scenario.jammer.kind = match normalize(value).as_str() {
                "awgn" => JammerKind::Awgn,
                "bpsk" => JammerKind::Bpsk,
                "8qam" => JammerKind::Qam8,
                other => {
                    return Err(format!(
                        "config line {line}: key `{key}`: unknown jammer {other:?} \
                         (expected awgn, bpsk, or 8qam)"
                    ));
                }
            };
        }
        "jammer.coverage" => {
            s.scenario.jammer.coverage = match normalize(value).as_str() {
                "barrage" => Coverage::Barrage,
                "smart-ssb" => Coverage::SmartSsb,
                other => {
                    return Err(format!(
                        "config line {line}: key `{key}`: unknown coverage {other:?} \
                         (expected barrage or smart-ssb)"
                    ));
                }
            };
        }
        "train.learning_rate" => s.train.learning_rate = parse_value(line, key, value)?,
        "train.momentum" => s.train.momentum = parse_value(line, key, value)?,
        "train.batch_size" => s.train.batch_size = parse_value(line, key, value)?,
        "train.max_epochs" => s.train.max_epochs = parse_value(line, key, value)?,
        "train.val_fraction" => s.train.val_fraction = parse_value(line, key, value)?,
        "train.val_frequency" => s.train.val_frequency = parse_value(line, key, value)?,
        "train.cascade_stage_epochs" => {
            s.train.cascade_stage_epochs = parse_value(line, key, value)?;
        }
        "dnn.channels" => {
            let parts: Vec<usize> = value
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|e| format!("config line {line}: key `{key}`: {e}"))
                })
                .collect::<Result<_, _>>()?;
            s.dnn_channels = parts.try_into().map_err(|parts: Vec<usize>| {
                format!(
                    "config line {line}: key `{key}`: expected 3 channel counts, got {}",
                    parts.len()
                )
            })?;
        }
        "dnn.fc_hidden" => s.dnn_fc_hidden = parse_value(line, key, value)?,
        other => {
            return Err(format!("config line {line}: unknown configuration key `{other}`"));
        }
    }
    Ok(())
}

fn normalize(value: &str) -> String {
    value.to_ascii_lowercase().replace('_', "-")
}

fn at(line: usize, msg: String) -> String {
    format!("config line {line}: {msg}")
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| format!("config line {line}: key `{key}`: {e}"))
}

/// Parse a grid: a comma-separated list, or an inclusive `start:step:stop`
/// range.
pub fn parse_grid(key: &str, text: &str) -> Result<Vec<f64>, String> {
    let bad = |msg: String| format!("key `{key}`: {msg}");
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(bad(format!("range {text:?} must be start:step:stop")));
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|e| bad(format!("{e} in {text:?}"))))
            .collect::<Result<_, _>>()?;
        let (start, step, stop) = (nums[0], nums[1], nums[2]);
        // Negated on purpose: a NaN step must fail closed here too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(step > 0.0) || !step.is_finite() {
            return Err(bad(format!("range step {step} must be positive")));
        }
        if stop < start {
            return Err(bad(format!("range stop {stop} is below start {start}")));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize;
        Ok((0..=count).map(|i| start + i as f64 * step).collect())
    } else {
        text.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| bad(format!("{e} in {text:?}"))))
            .collect()
    }
}
