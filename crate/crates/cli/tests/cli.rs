//! End-to-end tests of the `jamdet` binary: the full pipeline on a tiny
//! scenario, plus error reporting for broken inputs.

use std::path::Path;
use std::process::{Command, Output};

use jamdet::dataset::{load_dataset, save_dataset};
use jamdet::waveform::{build_ssb_grid, default_cp_length, embed_in_band, ofdm_modulate, Modulation};
use jamdet::{Complex64, ThresholdSet};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jamdet"))
        .args(args)
        .output()
        .expect("the binary should spawn")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_err(args: &[&str]) -> (Option<i32>, String) {
    let out = run(args);
    assert!(
        !out.status.success(),
        "command {args:?} unexpectedly succeeded:\n{}",
        String::from_utf8_lossy(&out.stdout)
    );
    (out.status.code(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A clean capture holding one SSB between runs of silence, as CSV.
fn write_iq_capture(path: &Path) {
    let n_fft = 256;
    let cp = default_cp_length(n_fft);
    let ssb = build_ssb_grid(0).unwrap();
    let band = embed_in_band(&ssb, 240, 0, Modulation::Qpsk, 9).unwrap();
    let tx = ofdm_modulate(&band, n_fft, cp, 30_000.0).unwrap();
    let mut samples = vec![Complex64::new(0.0, 0.0); 100];
    samples.extend_from_slice(&tx.samples);
    samples.resize(samples.len() + 50, Complex64::new(0.0, 0.0));
    let mut text = String::from("I,Q\n");
    for v in &samples {
        text.push_str(&format!("{},{}\n", v.re, v.im));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn full_pipeline_on_a_tiny_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let config = p("jamdet.cfg");
    std::fs::write(
        &config,
        "n_fft = 256\n\
         n_obs_per_class = 24\n\
         master_seed = 5\n\
         sjnr_grid_db = 12,18,24\n\
         distance_grid_m = 50:50:200\n\
         modulations = qpsk\n\
         train.max_epochs = 2\n\
         train.batch_size = 8\n\
         train.val_fraction = 0.25\n\
         train.val_frequency = 2\n\
         train.cascade_stage_epochs = 1\n\
         dnn.channels = 6,6,6\n\
         dnn.fc_hidden = 8\n",
    )
    .unwrap();
    let config = s(&config);

    // gen: dataset + manifest, dimensions from the config.
    let dataset = p("ds.bin");
    run_ok(&["gen", "--config", config, "--out", s(&dataset)]);
    let loaded = load_dataset(&dataset).unwrap();
    assert_eq!(loaded.n_fft, 256);
    assert_eq!(loaded.observations.len(), 48);
    let manifest = std::fs::read_to_string(p("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 49);

    // gen: --obs-per-class override halves the record count.
    let small = p("ds_small.bin");
    run_ok(&[
        "gen",
        "--config",
        config,
        "--out",
        s(&small),
        "--manifest",
        s(&p("manifest_small.csv")),
        "--obs-per-class",
        "6",
    ]);
    assert_eq!(load_dataset(&small).unwrap().observations.len(), 12);

    // train: both networks, hyperparameters echoed in the log header.
    let model1 = p("m1.bin");
    let model2 = p("m2.bin");
    run_ok(&[
        "train",
        "--config",
        config,
        "--seed",
        "3",
        "--dataset",
        s(&dataset),
        "--out",
        s(&model1),
        "--cascade",
        "--model2-out",
        s(&model2),
    ]);
    assert!(model1.exists() && model2.exists());
    let log = std::fs::read_to_string(p("train_log.csv")).unwrap();
    let mut log_lines = log.lines();
    let header = log_lines.next().unwrap();
    assert!(header.starts_with('#'), "log header: {header}");
    for fact in ["learning_rate=0.001", "momentum=0.9", "batch_size=8", "seed=3"] {
        assert!(header.contains(fact), "log header {header:?} lacks {fact}");
    }
    assert_eq!(
        log_lines.next().unwrap(),
        "network,phase,epoch,iteration,train_loss,val_loss,val_accuracy"
    );
    assert!(log.contains("\ndnn1,") && log.contains("\ndnn2,"), "log: {log}");

    // Determinism: retraining with the same seed reproduces the model bytes.
    std::fs::create_dir(p("again")).unwrap();
    let model1_again = p("again/m1.bin");
    run_ok(&[
        "train",
        "--config",
        config,
        "--seed",
        "3",
        "--dataset",
        s(&dataset),
        "--out",
        s(&model1_again),
    ]);
    assert_eq!(
        std::fs::read(&model1).unwrap(),
        std::fs::read(&model1_again).unwrap(),
        "same seed must reproduce the first network bit-exactly"
    );

    // calibrate: thresholds file parses back, diagnostics on stdout.
    let thresholds = p("thresholds.txt");
    let stdout = run_ok(&[
        "calibrate",
        "--model1",
        s(&model1),
        "--model2",
        s(&model2),
        "--dataset",
        s(&dataset),
        "--delta-fa",
        "0.25",
        "--out",
        s(&thresholds),
    ]);
    assert!(stdout.contains("gamma_second"), "stdout: {stdout}");
    assert!(stdout.contains("deferral fraction"), "stdout: {stdout}");
    let ts = ThresholdSet::load(&thresholds).unwrap();
    assert_eq!(ts.delta_fa, 0.25);

    // detect on the labeled dataset: one row per observation + correctness.
    let decisions = p("decisions.csv");
    run_ok(&[
        "detect",
        "--input",
        s(&dataset),
        "--model1",
        s(&model1),
        "--model2",
        s(&model2),
        "--thresholds",
        s(&thresholds),
        "--out",
        s(&decisions),
    ]);
    let text = std::fs::read_to_string(&decisions).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "index,verdict,stage,gamma_ratio_1,gamma_ratio_2,correct");
    assert_eq!(lines.len(), 49);
    for row in &lines[1..] {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 6);
        assert!(fields[1] == "H0" || fields[1] == "H1", "row: {row}");
        assert!(fields[2] == "dnn1" || fields[2] == "dnn2", "row: {row}");
        assert!(fields[5] == "true" || fields[5] == "false", "row: {row}");
    }

    // detect on an empty dataset: header-only CSV, success.
    let empty = p("empty.bin");
    save_dataset(&[], 256, &empty).unwrap();
    let empty_out = p("decisions_empty.csv");
    run_ok(&[
        "detect",
        "--input",
        s(&empty),
        "--model1",
        s(&model1),
        "--model2",
        s(&model2),
        "--thresholds",
        s(&thresholds),
        "--out",
        s(&empty_out),
    ]);
    assert_eq!(
        std::fs::read_to_string(&empty_out).unwrap(),
        "index,verdict,stage,gamma_ratio_1,gamma_ratio_2\n"
    );

    // detect on a raw IQ capture: routed through synchronization + ingest.
    let capture = p("capture.csv");
    write_iq_capture(&capture);
    let capture_out = p("decisions_capture.csv");
    run_ok(&[
        "detect",
        "--config",
        config,
        "--input",
        s(&capture),
        "--model1",
        s(&model1),
        "--model2",
        s(&model2),
        "--thresholds",
        s(&thresholds),
        "--out",
        s(&capture_out),
    ]);
    let text = std::fs::read_to_string(&capture_out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "index,verdict,stage,gamma_ratio_1,gamma_ratio_2");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,H"), "row: {}", lines[1]);

    // eval end to end: all three reports, byte-identical on a rerun.
    let eval_dir = p("eval");
    let eval_args = [
        "eval",
        "--dataset",
        s(&dataset),
        "--calibration",
        s(&small),
        "--model1",
        s(&model1),
        "--model2",
        s(&model2),
        "--thresholds",
        s(&thresholds),
        "--out-dir",
        s(&eval_dir),
    ];
    run_ok(&eval_args);
    let roc = std::fs::read(eval_dir.join("roc.csv")).unwrap();
    let conf = std::fs::read(eval_dir.join("confusion.csv")).unwrap();
    let miss = std::fs::read(eval_dir.join("sjnr_miss.csv")).unwrap();
    assert!(!roc.is_empty() && !conf.is_empty() && !miss.is_empty());
    assert!(String::from_utf8_lossy(&roc).starts_with("p_fa,p_d,variant\n"));
    run_ok(&eval_args);
    assert_eq!(roc, std::fs::read(eval_dir.join("roc.csv")).unwrap());
    assert_eq!(conf, std::fs::read(eval_dir.join("confusion.csv")).unwrap());
    assert_eq!(miss, std::fs::read(eval_dir.join("sjnr_miss.csv")).unwrap());

    // eval from recorded decisions: no models needed, no roc.csv.
    let eval_dir2 = p("eval_decisions");
    let stdout = run_ok(&[
        "eval",
        "--dataset",
        s(&dataset),
        "--decisions",
        s(&decisions),
        "--out-dir",
        s(&eval_dir2),
    ]);
    assert!(stdout.contains("skipping roc.csv"), "stdout: {stdout}");
    assert!(eval_dir2.join("confusion.csv").exists());
    assert!(eval_dir2.join("sjnr_miss.csv").exists());
    assert!(!eval_dir2.join("roc.csv").exists());
}

#[test]
fn broken_inputs_are_reported_clearly() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);

    // Missing config file: the message names the path.
    let (_, stderr) = run_err(&[
        "gen",
        "--config",
        "/no/such/jamdet.cfg",
        "--out",
        s(&p("x.bin")),
    ]);
    assert!(stderr.contains("/no/such/jamdet.cfg"), "stderr: {stderr}");

    // Unknown configuration key: named, with its line.
    let bad_key = p("bad_key.cfg");
    std::fs::write(&bad_key, "n_fft = 256\nbogus_key = 1\n").unwrap();
    let (_, stderr) = run_err(&["gen", "--config", s(&bad_key), "--out", s(&p("x.bin"))]);
    assert!(stderr.contains("bogus_key"), "stderr: {stderr}");

    // Unparseable value: the key is named.
    let bad_value = p("bad_value.cfg");
    std::fs::write(&bad_value, "n_fft = potato\n").unwrap();
    let (_, stderr) = run_err(&["gen", "--config", s(&bad_value), "--out", s(&p("x.bin"))]);
    assert!(stderr.contains("n_fft"), "stderr: {stderr}");

    // Corrupt dataset magic: a format error names the byte offset.
    let corrupt = p("corrupt.bin");
    std::fs::write(&corrupt, b"XXXXXXXXjunk".as_slice()).unwrap();
    let (code, stderr) =
        run_err(&["train", "--dataset", s(&corrupt), "--out", s(&p("m.bin"))]);
    assert_eq!(code, Some(1));
    assert!(stderr.contains("format error"), "stderr: {stderr}");

    // delta-fa outside (0, 1) is an argument error (usage exit code).
    let (code, stderr) = run_err(&[
        "calibrate",
        "--model1",
        "m1",
        "--model2",
        "m2",
        "--dataset",
        "d",
        "--delta-fa",
        "1.5",
        "--out",
        "t",
    ]);
    assert_eq!(code, Some(2));
    assert!(stderr.contains("delta-fa"), "stderr: {stderr}");

    // eval without models or decisions: the missing flag is named.
    let empty = p("empty.bin");
    save_dataset(&[], 256, &empty).unwrap();
    let (_, stderr) = run_err(&[
        "eval",
        "--dataset",
        s(&empty),
        "--out-dir",
        s(&p("eval")),
    ]);
    assert!(stderr.contains("--model1"), "stderr: {stderr}");
}
