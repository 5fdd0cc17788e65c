//! The five pipeline commands: gen, train, calibrate, detect, eval.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use jamdet::dataset::{
    generate_dataset, high_sjnr_training_subset, ingest_iq_csv, load_dataset, save_dataset,
    write_manifest, IngestParams, DATASET_MAGIC,
};
use jamdet::detector::{calibrate_double_threshold, calibrate_gamma2, detect_batch};
use jamdet::dnn::{cascade_train, load_model, save_model, train, Layout};
use jamdet::eval::{
    confusion, roc_curve, sjnr_miss_profile, write_confusion_csv, write_roc_csv,
    write_sjnr_miss_csv,
};
use jamdet::features::TENSOR_ROWS;
use jamdet::{Label, Observation, Stage, ThresholdSet, TrainConfig, TrainLog};

use crate::config::{parse_grid, Settings};

fn fail(what: &str, path: &Path, e: impl std::fmt::Display) -> String {
    format!("{what} {}: {e}", path.display())
}

/// Default path for an auxiliary output: next to `path`, named `name`.
fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(name), |p| p.join(name))
}

fn label_str(label: Label) -> &'static str {
    match label {
        Label::H0 => "H0",
        Label::H1 => "H1",
    }
}

pub fn cmd_gen(settings: &Settings, out: &Path, manifest: Option<PathBuf>) -> Result<(), String> {
    let cfg = &settings.scenario;
    let manifest_path = manifest.unwrap_or_else(|| sibling(out, "manifest.csv"));
    let (observations, entries) =
        generate_dataset(cfg).map_err(|e| format!("dataset generation: {e}"))?;
    save_dataset(&observations, cfg.n_fft, out).map_err(|e| fail("dataset", out, e))?;
    write_manifest(&entries, &manifest_path).map_err(|e| fail("manifest", &manifest_path, e))?;
    println!(
        "wrote {} observations ({} per class, {}x{} tensors) to {}",
        observations.len(),
        cfg.n_obs_per_class,
        TENSOR_ROWS,
        cfg.n_fft / 2,
        out.display()
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

pub struct TrainArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub cascade: bool,
    pub model2_out: Option<PathBuf>,
    pub sjnr_cutoff: f64,
    pub log: Option<PathBuf>,
}

pub fn cmd_train(settings: &Settings, args: &TrainArgs) -> Result<(), String> {
    let data = load_dataset(&args.dataset).map_err(|e| fail("dataset", &args.dataset, e))?;
    let layout =
        Layout::with_channels(data.n_fft / 2, settings.dnn_channels, settings.dnn_fc_hidden)
            .map_err(|e| format!("network layout: {e}"))?;
    let cfg = &settings.train;

    let (model1, log1) = train(layout, &data.observations, cfg)
        .map_err(|e| format!("training the first network: {e}"))?;
    save_model(&model1, &args.out).map_err(|e| fail("model", &args.out, e))?;
    println!(
        "first network: {} observations, final validation accuracy {:.4} ({:.1} s)",
        data.observations.len(),
        log1.final_val_accuracy,
        log1.wall_seconds
    );

    let mut logs = vec![("dnn1", log1)];
    if args.cascade {
        let out2 = args.model2_out.as_ref().expect("clap requires --model2-out with --cascade");
        let subset_idx =
            high_sjnr_training_subset(&data.observations, args.sjnr_cutoff, cfg.seed);
        if subset_idx.is_empty() {
            return Err(format!(
                "no jammed observations at or above the {} dB SJNR cutoff in {}",
                args.sjnr_cutoff,
                args.dataset.display()
            ));
        }
        let subset: Vec<Observation> =
            subset_idx.iter().map(|&i| data.observations[i].clone()).collect();
        let (model2, log2) = cascade_train(layout, &subset, cfg)
            .map_err(|e| format!("training the second network: {e}"))?;
        save_model(&model2, out2).map_err(|e| fail("model", out2, e))?;
        println!(
            "second network: {} observations at SJNR >= {} dB, \
             final validation accuracy {:.4} ({:.1} s)",
            subset.len(),
            args.sjnr_cutoff,
            log2.final_val_accuracy,
            log2.wall_seconds
        );
        logs.push(("dnn2", log2));
    }

    let log_path = args.log.clone().unwrap_or_else(|| sibling(&args.out, "train_log.csv"));
    write_train_log(&log_path, cfg, &logs).map_err(|e| fail("training log", &log_path, e))?;
    println!("training log: {}", log_path.display());
    Ok(())
}

/// Hyperparameters as a comment header, then one row per validation event.
fn write_train_log(
    path: &Path,
    cfg: &TrainConfig,
    logs: &[(&str, TrainLog)],
) -> std::io::Result<()> {
    let mut text = format!(
        "# learning_rate={} momentum={} batch_size={} max_epochs={} val_fraction={} \
         val_frequency={} cascade_stage_epochs={} seed={}\n",
        cfg.learning_rate,
        cfg.momentum,
        cfg.batch_size,
        cfg.max_epochs,
        cfg.val_fraction,
        cfg.val_frequency,
        cfg.cascade_stage_epochs,
        cfg.seed
    );
    text.push_str("network,phase,epoch,iteration,train_loss,val_loss,val_accuracy\n");
    for (name, log) in logs {
        for r in &log.records {
            text.push_str(&format!(
                "{name},{},{},{},{},{},{}\n",
                r.phase, r.epoch, r.iteration, r.train_loss, r.val_loss, r.val_accuracy
            ));
        }
    }
    fs::write(path, text)
}

pub fn cmd_calibrate(
    model1: &Path,
    model2: &Path,
    dataset: &Path,
    delta_fa: f64,
    out: &Path,
) -> Result<(), String> {
    let m1 = load_model(model1).map_err(|e| fail("model", model1, e))?;
    let m2 = load_model(model2).map_err(|e| fail("model", model2, e))?;
    let data = load_dataset(dataset).map_err(|e| fail("dataset", dataset, e))?;
    let (gamma1, gamma2) = calibrate_double_threshold(&m1, &data.observations)
        .map_err(|e| format!("deferral-band calibration: {e}"))?;
    let h0: Vec<Observation> = data
        .observations
        .iter()
        .filter(|o| o.label == Some(Label::H0))
        .cloned()
        .collect();
    let gamma_second = calibrate_gamma2(&m2, &h0, delta_fa)
        .map_err(|e| format!("alarm-threshold calibration: {e}"))?;
    let thresholds = ThresholdSet::new(gamma1, gamma2, gamma_second, delta_fa)
        .map_err(|e| format!("threshold validation: {e}"))?;
    thresholds.save(out).map_err(|e| fail("thresholds", out, e))?;
    let (_, stats) = detect_batch(&data.observations, &m1, &m2, &thresholds)
        .map_err(|e| format!("detection on the calibration set: {e}"))?;
    println!("gamma1 = {gamma1}");
    println!("gamma2 = {gamma2}");
    println!(
        "gamma_second = {gamma_second} (false-alarm target {delta_fa} over {} clean observations)",
        h0.len()
    );
    println!("deferral fraction on the calibration set: {:.4}", stats.deferral_fraction());
    println!("thresholds: {}", out.display());
    Ok(())
}

fn is_dataset_file(path: &Path) -> Result<bool, String> {
    let mut f = fs::File::open(path).map_err(|e| fail("input", path, e))?;
    let mut magic = [0u8; 8];
    match f.read_exact(&mut magic) {
        Ok(()) => Ok(&magic == DATASET_MAGIC),
        Err(_) => Ok(false), // shorter than a dataset header: treat as CSV
    }
}

pub fn cmd_detect(
    settings: &Settings,
    input: &Path,
    model1: &Path,
    model2: &Path,
    thresholds: &Path,
    out: &Path,
) -> Result<(), String> {
    let m1 = load_model(model1).map_err(|e| fail("model", model1, e))?;
    let m2 = load_model(model2).map_err(|e| fail("model", model2, e))?;
    let ts = ThresholdSet::load(thresholds).map_err(|e| fail("thresholds", thresholds, e))?;
    let observations = if is_dataset_file(input)? {
        load_dataset(input).map_err(|e| fail("dataset", input, e))?.observations
    } else {
        let params = IngestParams {
            n_fft: settings.scenario.n_fft,
            scs_hz: settings.scenario.scs_hz,
        };
        vec![ingest_iq_csv(input, &params).map_err(|e| fail("IQ capture", input, e))?]
    };
    let (decisions, stats) =
        detect_batch(&observations, &m1, &m2, &ts).map_err(|e| format!("detection: {e}"))?;

    let labeled = observations.iter().any(|o| o.label.is_some());
    let mut text = String::from("index,verdict,stage,gamma_ratio_1,gamma_ratio_2");
    if labeled {
        text.push_str(",correct");
    }
    text.push('\n');
    for (i, (d, o)) in decisions.iter().zip(&observations).enumerate() {
        let stage = match d.stage {
            Stage::Dnn1 => "dnn1",
            Stage::Dnn2 => "dnn2",
        };
        let g2 = d.gamma_ratio_2.map_or_else(String::new, |v| v.to_string());
        text.push_str(&format!(
            "{i},{},{stage},{},{g2}",
            label_str(d.verdict),
            d.gamma_ratio_1
        ));
        if labeled {
            let cell = o.label.map_or_else(String::new, |l| (l == d.verdict).to_string());
            text.push_str(&format!(",{cell}"));
        }
        text.push('\n');
    }
    fs::write(out, text).map_err(|e| fail("decisions", out, e))?;

    let flagged = decisions.iter().filter(|d| d.verdict == Label::H1).count();
    println!(
        "classified {} observations: {} flagged as jammed, {} cleared, deferral fraction {:.4}",
        decisions.len(),
        flagged,
        decisions.len() - flagged,
        stats.deferral_fraction()
    );
    println!("decisions: {}", out.display());
    Ok(())
}

pub struct EvalArgs {
    pub dataset: PathBuf,
    pub decisions: Option<PathBuf>,
    pub model1: Option<PathBuf>,
    pub model2: Option<PathBuf>,
    pub thresholds: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub sjnr_bins: String,
    pub fa_points: usize,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), String> {
    let data = load_dataset(&args.dataset).map_err(|e| fail("dataset", &args.dataset, e))?;
    let labels: Vec<Label> = data
        .observations
        .iter()
        .enumerate()
        .map(|(i, o)| {
            o.label.ok_or_else(|| {
                format!("observation {i} in {} is unlabeled", args.dataset.display())
            })
        })
        .collect::<Result<_, _>>()?;
    let edges = parse_grid("sjnr-bins", &args.sjnr_bins)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| fail("output directory", &args.out_dir, e))?;

    let verdicts: Vec<Label> = match &args.decisions {
        Some(decisions_path) => {
            // Reusing recorded verdicts: the curve sweep needs live models,
            // so only the confusion matrix and miss profile are rebuilt.
            let verdicts = read_decision_verdicts(decisions_path)?;
            if verdicts.len() != labels.len() {
                return Err(format!(
                    "{} decisions in {} against {} observations in {}",
                    verdicts.len(),
                    decisions_path.display(),
                    labels.len(),
                    args.dataset.display()
                ));
            }
            println!(
                "reusing verdicts from {}; skipping roc.csv (the sweep needs models)",
                decisions_path.display()
            );
            verdicts
        }
        None => {
            let need = |o: &Option<PathBuf>, flag: &str| {
                o.clone().ok_or_else(|| format!("--{flag} is required without --decisions"))
            };
            let m1_path = need(&args.model1, "model1")?;
            let m2_path = need(&args.model2, "model2")?;
            let ts_path = need(&args.thresholds, "thresholds")?;
            let cal_path = need(&args.calibration, "calibration")?;
            let m1 = load_model(&m1_path).map_err(|e| fail("model", &m1_path, e))?;
            let m2 = load_model(&m2_path).map_err(|e| fail("model", &m2_path, e))?;
            let ts = ThresholdSet::load(&ts_path).map_err(|e| fail("thresholds", &ts_path, e))?;
            let cal = load_dataset(&cal_path).map_err(|e| fail("dataset", &cal_path, e))?;

            if args.fa_points < 2 {
                return Err("--fa-points must be at least 2".into());
            }
            let fa_grid: Vec<f64> = (0..args.fa_points)
                .map(|i| 0.01 + i as f64 * (0.5 - 0.01) / (args.fa_points - 1) as f64)
                .collect();
            let curve =
                roc_curve(&m1, &m2, &ts, &cal.observations, &data.observations, &fa_grid)
                    .map_err(|e| format!("operating-curve sweep: {e}"))?;
            let roc_path = args.out_dir.join("roc.csv");
            write_roc_csv(&curve, &roc_path).map_err(|e| fail("roc", &roc_path, e))?;
            println!("operating curves: {}", roc_path.display());

            let (decisions, stats) = detect_batch(&data.observations, &m1, &m2, &ts)
                .map_err(|e| format!("detection: {e}"))?;
            println!("deferral fraction on the test set: {:.4}", stats.deferral_fraction());
            decisions.iter().map(|d| d.verdict).collect()
        }
    };

    let matrix = confusion(&verdicts, &labels).map_err(|e| format!("confusion: {e}"))?;
    let confusion_path = args.out_dir.join("confusion.csv");
    write_confusion_csv(&matrix, &confusion_path)
        .map_err(|e| fail("confusion", &confusion_path, e))?;
    let profile = sjnr_miss_profile(&verdicts, &data.observations, &edges)
        .map_err(|e| format!("miss profile: {e}"))?;
    let miss_path = args.out_dir.join("sjnr_miss.csv");
    write_sjnr_miss_csv(&profile, &miss_path).map_err(|e| fail("miss profile", &miss_path, e))?;

    println!(
        "clean kept {}/{} ({:.1}%), jammed flagged {}/{} ({:.1}%), {} missed detections",
        matrix.true_positive,
        matrix.true_positive + matrix.false_negative,
        100.0 * matrix.true_positive_rate(),
        matrix.true_negative,
        matrix.true_negative + matrix.false_positive,
        100.0 * matrix.true_negative_rate(),
        profile.total_misses
    );
    println!("confusion matrix: {}", confusion_path.display());
    println!("miss profile: {}", miss_path.display());
    Ok(())
}

/// Pull the verdict column out of a decisions CSV written by `detect`.
fn read_decision_verdicts(path: &Path) -> Result<Vec<Label>, String> {
    let text = fs::read_to_string(path).map_err(|e| fail("decisions", path, e))?;
    let mut verdicts = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if i == 0 {
            if !raw.starts_with("index,verdict") {
                return Err(format!(
                    "decisions {}: unrecognized header {raw:?}",
                    path.display()
                ));
            }
            continue;
        }
        match raw.split(',').nth(1) {
            Some("H0") => verdicts.push(Label::H0),
            Some("H1") => verdicts.push(Label::H1),
            other => {
                return Err(format!(
                    "decisions {} line {}: bad verdict {other:?}",
                    path.display(),
                    i + 1
                ));
            }
        }
    }
    Ok(verdicts)
}
