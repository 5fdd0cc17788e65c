//! Optimization and scoring.
//!
//! Two training schedules are provided over the same network:
//!
//! * [`train`] — joint minibatch SGD with momentum over the whole network.
//! * [`cascade_train`] — block-wise pretraining: each convolution block in
//!   turn trains against a throwaway classifier head while everything before
//!   it stays frozen in inference mode, then the network's own classifier
//!   trains at full length on the frozen convolutional features.
//!
//! Both minimize mean negative log-likelihood of the softmax outputs, use
//! the same validation split, and are deterministic for a given seed at any
//! thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::model::{
    block_backward, block_forward_train, BatchNorm, Conv, Head, Layout, ModelParams, ParamGroup,
    ParamTensors,
};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::features::{Label, Observation};
use crate::rng::{chacha, derive_seed};

/// Role salts feeding [`derive_seed`] so the independent random choices of a
/// training run never share a stream.
const INIT_SALT: u64 = 0x6e65_745f_696e_6974;
const SPLIT_SALT: u64 = 0x7661_6c5f_7370_6c69;
const ORDER_SALT: u64 = 0x6261_7463_685f_7368;
const HEAD_SALT: u64 = 0x626c_6f63_6b5f_6864;
const CHECK_SALT: u64 = 0x6772_6164_5f63_686b;

/// Probabilities are clamped here before the log in the loss.
const PROB_FLOOR: f64 = 1e-12;

/// Hyperparameters shared by both training schedules.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epochs of joint training, and of the final classifier phase of
    /// block-wise training.
    pub max_epochs: usize,
    /// Fraction of the observations reserved for validation.
    pub val_fraction: f64,
    /// Validate every this many optimizer steps.
    pub val_frequency: usize,
    /// Epochs each convolution block trains in the block-wise schedule.
    pub cascade_stage_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 25,
            max_epochs: 20,
            val_fraction: 0.30,
            val_frequency: 80,
            cascade_stage_epochs: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.cascade_stage_epochs == 0 {
            return Err(Error::invalid("batch size and epoch counts must be nonzero"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        if self.val_frequency == 0 {
            return Err(Error::invalid("validation frequency must be nonzero"));
        }
        Ok(())
    }
}

/// One validation snapshot. `phase` is 0 for joint training; block-wise
/// training numbers its convolution phases 0–2 and the classifier phase 3.
#[derive(Clone, Copy, Debug)]
pub struct ValRecord {
    pub phase: usize,
    pub epoch: usize,
    /// Optimizer steps taken so far, cumulative across phases.
    pub iteration: usize,
    /// Loss of the minibatch that preceded this snapshot.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Training history plus summary figures.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<ValRecord>,
    /// Accuracy on the validation split at the end of training
    /// (NaN when the split is empty).
    pub final_val_accuracy: f64,
    pub wall_seconds: f64,
}

/// Softmax outputs for one observation: evidence for the jammed hypothesis
/// (`h1`) and the clean one (`h0`).
#[derive(Clone, Copy, Debug)]
pub struct ScorePair {
    pub h1: f64,
    pub h0: f64,
}

impl ScorePair {
    /// Likelihood-ratio style score `h1 / h0`, guarded against a vanishing
    /// denominator.
    pub fn ratio(&self) -> f64 {
        self.h1 / self.h0.max(PROB_FLOOR)
    }
}

/// Class index convention: the jammed hypothesis scores at column 0.
pub(crate) fn class_index(label: Label) -> usize {
    match label {
        Label::H1 => 0,
        Label::H0 => 1,
    }
}

/// Mean negative log-likelihood of the true classes under softmax outputs
/// (`n × 2` rows), with probabilities clamped at 1e-12.
pub fn nll_loss<S: Scalar>(probs: &[S], classes: &[usize]) -> f64 {
    assert_eq!(probs.len(), 2 * classes.len());
    let mut sum = 0.0;
    for (s, &cls) in classes.iter().enumerate() {
        sum -= probs[s * 2 + cls].to_f64().max(PROB_FLOOR).ln();
    }
    sum / classes.len() as f64
}

/// One momentum step on a single tensor: `v ← m·v − lr·g`, `θ ← θ + v`.
fn sgdm_vecs<S: Scalar>(theta: &mut [S], g: &[S], v: &mut [S], lr: S, mom: S) {
    debug_assert!(theta.len() == g.len() && g.len() == v.len());
    for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = mom * *vi - lr * gi;
        *t += *vi;
    }
}

/// Momentum step over every tensor the filter admits.
fn sgdm_step<S: Scalar, T: ParamTensors<S>>(
    theta: &mut T,
    grads: &T,
    vel: &mut T,
    lr: S,
    mom: S,
    keep: impl Fn(ParamGroup) -> bool,
) {
    let gs = grads.tensors();
    for ((tg, tv), ((gg, gv), (vg, vv))) in
        theta.tensors_mut().into_iter().zip(gs.into_iter().zip(vel.tensors_mut()))
    {
        debug_assert!(tg == gg && gg == vg, "parameter tensors out of order");
        if keep(tg) {
            sgdm_vecs(tv, gv, vv, lr, mom);
        }
    }
}

/// Shuffled train/validation index split (validation size rounded down).
fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut chacha(derive_seed(SPLIT_SALT, seed)));
    let n_val = (n as f64 * val_fraction).floor() as usize;
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

fn check_observations(layout: Layout, obs: &[Observation], need_labels: bool) -> Result<()> {
    if obs.is_empty() {
        return Err(Error::invalid("no observations supplied"));
    }
    for (i, o) in obs.iter().enumerate() {
        if o.cols != layout.cols || o.tensor.len() != layout.input_len() {
            return Err(Error::invalid(format!(
                "observation {i} has width {} but the network expects {}",
                o.cols, layout.cols
            )));
        }
        if need_labels && o.label.is_none() {
            return Err(Error::invalid(format!("observation {i} is unlabeled")));
        }
    }
    Ok(())
}

/// Copy the selected observations into a contiguous `f32` batch and collect
/// their class indices. Labels must have been checked beforehand.
fn fill_batch(
    obs: &[Observation],
    idx: &[usize],
    input_len: usize,
    x: &mut Vec<f32>,
    classes: &mut Vec<usize>,
) {
    x.clear();
    classes.clear();
    for &i in idx {
        x.extend_from_slice(&obs[i].tensor);
        classes.push(class_index(obs[i].label.expect("labels checked")));
    }
    debug_assert_eq!(x.len(), idx.len() * input_len);
}

/// Mean loss and accuracy of `forward` over the indexed observations,
/// evaluated in minibatches. Empty index → (NaN, NaN).
fn evaluate(
    forward: impl Fn(&[f32], usize) -> Vec<f32>,
    obs: &[Observation],
    idx: &[usize],
    input_len: usize,
    batch_size: usize,
) -> (f64, f64) {
    if idx.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut x = Vec::new();
    let mut classes = Vec::new();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size) {
        fill_batch(obs, chunk, input_len, &mut x, &mut classes);
        let probs = forward(&x, chunk.len());
        loss_sum += nll_loss(&probs, &classes) * chunk.len() as f64;
        for (s, &cls) in classes.iter().enumerate() {
            let predicted = if probs[s * 2] > probs[s * 2 + 1] { 0 } else { 1 };
            if predicted == cls {
                correct += 1;
            }
        }
    }
    (loss_sum / idx.len() as f64, correct as f64 / idx.len() as f64)
}

/// Joint training of the whole network.
///
/// Observations must all be labeled and match the layout's input width. The
/// returned model is the final iterate; the log carries the validation
/// trace.
pub fn train(
    layout: Layout,
    obs: &[Observation],
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainLog)> {
    cfg.validate()?;
    check_observations(layout, obs, true)?;
    let start = Instant::now();
    let (mut train_idx, val_idx) = split_indices(obs.len(), cfg.val_fraction, cfg.seed);
    let mut model = ModelParams::<f32>::new(layout, derive_seed(INIT_SALT, cfg.seed));
    let mut grads = model.zeros_like();
    let mut vel = model.zeros_like();
    let mut order_rng = chacha(derive_seed(ORDER_SALT, cfg.seed));
    let (lr, mom) = (cfg.learning_rate as f32, cfg.momentum as f32);
    let input_len = layout.input_len();

    let mut records = Vec::new();
    let mut iter = 0usize;
    let mut x = Vec::new();
    let mut classes = Vec::new();
    for epoch in 0..cfg.max_epochs {
        train_idx.shuffle(&mut order_rng);
        for chunk in train_idx.chunks(cfg.batch_size) {
            fill_batch(obs, chunk, input_len, &mut x, &mut classes);
            let cache = model.forward_train(&x, chunk.len());
            let train_loss = nll_loss(&cache.probs, &classes);
            model.backward(&x, &classes, &cache, &mut grads);
            sgdm_step(&mut model, &grads, &mut vel, lr, mom, |_| true);
            iter += 1;
            if iter.is_multiple_of(cfg.val_frequency) {
                let (val_loss, val_accuracy) = evaluate(
                    |xb, m| model.forward_infer(xb, m),
                    obs,
                    &val_idx,
                    input_len,
                    cfg.batch_size,
                );
                records.push(ValRecord {
                    phase: 0,
                    epoch,
                    iteration: iter,
                    train_loss,
                    val_loss,
                    val_accuracy,
                });
            }
        }
    }
    let (val_loss, final_val_accuracy) =
        evaluate(|xb, m| model.forward_infer(xb, m), obs, &val_idx, input_len, cfg.batch_size);
    if records.last().map(|r| r.iteration) != Some(iter) {
        records.push(ValRecord {
            phase: 0,
            epoch: cfg.max_epochs.saturating_sub(1),
            iteration: iter,
            train_loss: f64::NAN,
            val_loss,
            val_accuracy: final_val_accuracy,
        });
    }
    let log = TrainLog { records, final_val_accuracy, wall_seconds: start.elapsed().as_secs_f64() };
    Ok((model, log))
}

/// State threaded through the block-wise phases.
struct CascadeCtx<'a> {
    obs: &'a [Observation],
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    cfg: TrainConfig,
    records: Vec<ValRecord>,
    iter: usize,
}

/// Train convolution block `stage` against a fresh throwaway head, leaving
/// every other parameter untouched. Earlier blocks run frozen in inference
/// mode; the trained head is discarded by the caller.
fn train_stage(model: &mut ModelParams<f32>, stage: usize, ctx: &mut CascadeCtx<'_>) -> Head<f32> {
    let layout = model.layout;
    let d = layout.stage(stage);
    let cfg = ctx.cfg;
    let (lr, mom) = (cfg.learning_rate as f32, cfg.momentum as f32);
    let input_len = layout.input_len();

    let mut head = Head::<f32>::new(
        d.out_len(),
        layout.fc_hidden,
        derive_seed(HEAD_SALT, derive_seed(cfg.seed, stage as u64)),
    );
    let mut head_grads = head.zeros_like();
    let mut head_vel = head.zeros_like();
    let mut conv_g = Conv::<f32>::zeros(d.c_out, d.c_in, d.kh, d.kw);
    let mut conv_v = Conv::<f32>::zeros(d.c_out, d.c_in, d.kh, d.kw);
    let mut bn_g = BatchNorm::<f32>::zeros(d.c_out);
    let mut bn_v = BatchNorm::<f32>::zeros(d.c_out);

    let mut order_rng = chacha(derive_seed(ORDER_SALT, derive_seed(cfg.seed, 100 + stage as u64)));
    let mut x = Vec::new();
    let mut classes = Vec::new();
    for epoch in 0..cfg.cascade_stage_epochs {
        ctx.train_idx.shuffle(&mut order_rng);
        for ci in 0..ctx.train_idx.len().div_ceil(cfg.batch_size) {
            let chunk =
                &ctx.train_idx[ci * cfg.batch_size..((ci + 1) * cfg.batch_size).min(ctx.train_idx.len())];
            let m = chunk.len();
            fill_batch(ctx.obs, chunk, input_len, &mut x, &mut classes);
            let owned_in;
            let block_in: &[f32] = if stage == 0 {
                &x
            } else {
                owned_in = model.forward_prefix_infer(&x, m, stage);
                &owned_in
            };
            let cache = block_forward_train(&model.conv[stage], &mut model.bn[stage], d, block_in, m);
            let hcache = head.forward(&cache.act, m);
            let train_loss = nll_loss(&hcache.probs, &classes);
            let mut d_act = vec![0.0f32; m * d.out_len()];
            head.backward(&cache.act, &classes, &hcache, &mut head_grads, Some(&mut d_act));
            block_backward(
                &model.conv[stage],
                &model.bn[stage],
                d,
                block_in,
                m,
                &cache,
                &mut d_act,
                &mut conv_g,
                &mut bn_g,
            );
            sgdm_vecs(&mut model.conv[stage].w, &conv_g.w, &mut conv_v.w, lr, mom);
            sgdm_vecs(&mut model.conv[stage].b, &conv_g.b, &mut conv_v.b, lr, mom);
            sgdm_vecs(&mut model.bn[stage].gamma, &bn_g.gamma, &mut bn_v.gamma, lr, mom);
            sgdm_vecs(&mut model.bn[stage].beta, &bn_g.beta, &mut bn_v.beta, lr, mom);
            sgdm_step(&mut head, &head_grads, &mut head_vel, lr, mom, |_| true);
            ctx.iter += 1;
            if ctx.iter.is_multiple_of(cfg.val_frequency) {
                let (val_loss, val_accuracy) = evaluate(
                    |xb, m| head.forward(&model.forward_prefix_infer(xb, m, stage + 1), m).probs,
                    ctx.obs,
                    &ctx.val_idx,
                    input_len,
                    cfg.batch_size,
                );
                ctx.records.push(ValRecord {
                    phase: stage,
                    epoch,
                    iteration: ctx.iter,
                    train_loss,
                    val_loss,
                    val_accuracy,
                });
            }
        }
    }
    head
}

/// Block-wise training: pretrain each convolution block in turn against a
/// throwaway head, then train the network's own classifier at full length on
/// the frozen convolutional features.
pub fn cascade_train(
    layout: Layout,
    obs: &[Observation],
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainLog)> {
    cfg.validate()?;
    check_observations(layout, obs, true)?;
    let start = Instant::now();
    let (train_idx, val_idx) = split_indices(obs.len(), cfg.val_fraction, cfg.seed);
    let mut model = ModelParams::<f32>::new(layout, derive_seed(INIT_SALT, cfg.seed));
    let mut ctx =
        CascadeCtx { obs, train_idx, val_idx, cfg: *cfg, records: Vec::new(), iter: 0 };

    for stage in 0..3 {
        // The throwaway head is dropped here; only the block's parameters
        // (and its batch-norm running statistics) persist.
        let _ = train_stage(&mut model, stage, &mut ctx);
    }

    // Classifier phase: the network's own fully connected layers train on
    // frozen convolutional features, recomputed batch by batch.
    let input_len = layout.input_len();
    let (lr, mom) = (cfg.learning_rate as f32, cfg.momentum as f32);
    let mut head =
        Head { fc1: std::mem::take(&mut model.fc1), fc2: std::mem::take(&mut model.fc2) };
    let mut grads = head.zeros_like();
    let mut vel = head.zeros_like();
    let mut order_rng = chacha(derive_seed(ORDER_SALT, derive_seed(cfg.seed, 200)));
    let mut x = Vec::new();
    let mut classes = Vec::new();
    for epoch in 0..cfg.max_epochs {
        ctx.train_idx.shuffle(&mut order_rng);
        for ci in 0..ctx.train_idx.len().div_ceil(cfg.batch_size) {
            let chunk = &ctx.train_idx
                [ci * cfg.batch_size..((ci + 1) * cfg.batch_size).min(ctx.train_idx.len())];
            let m = chunk.len();
            fill_batch(obs, chunk, input_len, &mut x, &mut classes);
            let feats = model.forward_prefix_infer(&x, m, 3);
            let cache = head.forward(&feats, m);
            let train_loss = nll_loss(&cache.probs, &classes);
            head.backward(&feats, &classes, &cache, &mut grads, None);
            sgdm_step(&mut head, &grads, &mut vel, lr, mom, |_| true);
            ctx.iter += 1;
            if ctx.iter.is_multiple_of(cfg.val_frequency) {
                let (val_loss, val_accuracy) = evaluate(
                    |xb, m| head.forward(&model.forward_prefix_infer(xb, m, 3), m).probs,
                    obs,
                    &ctx.val_idx,
                    input_len,
                    cfg.batch_size,
                );
                ctx.records.push(ValRecord {
                    phase: 3,
                    epoch,
                    iteration: ctx.iter,
                    train_loss,
                    val_loss,
                    val_accuracy,
                });
            }
        }
    }
    model.fc1 = head.fc1;
    model.fc2 = head.fc2;

    let (val_loss, final_val_accuracy) = evaluate(
        |xb, m| model.forward_infer(xb, m),
        obs,
        &ctx.val_idx,
        input_len,
        cfg.batch_size,
    );
    let mut records = ctx.records;
    if records.last().map(|r| r.iteration) != Some(ctx.iter) {
        records.push(ValRecord {
            phase: 3,
            epoch: cfg.max_epochs.saturating_sub(1),
            iteration: ctx.iter,
            train_loss: f64::NAN,
            val_loss,
            val_accuracy: final_val_accuracy,
        });
    }
    let log = TrainLog { records, final_val_accuracy, wall_seconds: start.elapsed().as_secs_f64() };
    Ok((model, log))
}

/// Batch size used when scoring observations for detection.
const SCORE_BATCH: usize = 25;

/// Softmax evidence pairs for a list of observations (labels not required).
pub fn score(model: &ModelParams<f32>, obs: &[Observation]) -> Result<Vec<ScorePair>> {
    check_observations(model.layout, obs, false)?;
    let input_len = model.layout.input_len();
    let mut out = Vec::with_capacity(obs.len());
    let mut x = Vec::new();
    for chunk in obs.chunks(SCORE_BATCH) {
        x.clear();
        for o in chunk {
            x.extend_from_slice(&o.tensor);
        }
        debug_assert_eq!(x.len(), chunk.len() * input_len);
        let probs = model.forward_infer(&x, chunk.len());
        for s in 0..chunk.len() {
            out.push(ScorePair { h1: f64::from(probs[s * 2]), h0: f64::from(probs[s * 2 + 1]) });
        }
    }
    Ok(out)
}

/// Compare analytic gradients against central finite differences on an
/// `f64` copy of the network and return the worst relative error.
///
/// The batch is standard-normal noise with alternating classes; every
/// numeric evaluation perturbs a fresh clone of the parameters and runs the
/// same training-mode forward pass the analytic gradients came from.
pub fn gradient_check(layout: Layout, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::invalid("gradient check needs at least one sample"));
    }
    let model = ModelParams::<f64>::new(layout, derive_seed(INIT_SALT, seed));
    let mut rng = chacha(derive_seed(CHECK_SALT, seed));
    let x: Vec<f64> =
        (0..n_samples * layout.input_len()).map(|_| rng.sample(StandardNormal)).collect();
    let classes: Vec<usize> = (0..n_samples).map(|s| s % 2).collect();

    let mut grads = model.zeros_like();
    {
        let mut work = model.clone();
        let cache = work.forward_train(&x, n_samples);
        work.backward(&x, &classes, &cache, &mut grads);
    }

    let h = 1e-5;
    let loss_at = |tensor: usize, elem: usize, delta: f64| -> f64 {
        let mut probe = model.clone();
        {
            let mut ts = probe.tensors_mut();
            ts[tensor].1[elem] += delta;
        }
        let cache = probe.forward_train(&x, n_samples);
        nll_loss(&cache.probs, &classes)
    };

    let mut max_rel: f64 = 0.0;
    for (ti, (_, gvec)) in grads.tensors().into_iter().enumerate() {
        for (ei, &analytic) in gvec.iter().enumerate() {
            let numeric = (loss_at(ti, ei, h) - loss_at(ti, ei, -h)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ObsMeta, TENSOR_ROWS};

    fn tiny_layout() -> Layout {
        Layout::with_channels(16, [4, 4, 4], 6).unwrap()
    }

    /// Two well-separated Gaussian blobs, alternating classes.
    fn toy_obs(n: usize, cols: usize, seed: u64) -> Vec<Observation> {
        let mut rng = chacha(seed);
        (0..n)
            .map(|i| {
                let jammed = i % 2 == 0;
                let mean = if jammed { 0.8 } else { -0.8 };
                let tensor: Vec<f32> = (0..TENSOR_ROWS * cols)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        (mean + 0.2 * z) as f32
                    })
                    .collect();
                Observation {
                    cols,
                    tensor,
                    label: Some(if jammed { Label::H1 } else { Label::H0 }),
                    meta: ObsMeta::default(),
                }
            })
            .collect()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.02,
            batch_size: 10,
            max_epochs: 8,
            val_fraction: 0.25,
            val_frequency: 5,
            cascade_stage_epochs: 3,
            seed: 42,
            ..TrainConfig::default()
        }
    }

    fn accuracy(model: &ModelParams<f32>, obs: &[Observation]) -> f64 {
        let scores = score(model, obs).unwrap();
        let correct = scores
            .iter()
            .zip(obs)
            .filter(|(s, o)| {
                let predicted = if s.h1 > s.h0 { Label::H1 } else { Label::H0 };
                predicted == o.label.unwrap()
            })
            .count();
        correct as f64 / obs.len() as f64
    }

    #[test]
    fn nll_matches_hand_computed_values() {
        assert!((nll_loss(&[0.5f64, 0.5], &[0]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((nll_loss(&[0.9f64, 0.1], &[0]) + 0.9f64.ln()).abs() < 1e-12);
        // Mean over two samples.
        let probs = [0.9f64, 0.1, 0.25, 0.75];
        let want = -(0.9f64.ln() + 0.75f64.ln()) / 2.0;
        assert!((nll_loss(&probs, &[0, 1]) - want).abs() < 1e-12);
        // A zero probability hits the clamp instead of -inf.
        let clamped = nll_loss(&[1.0f64, 0.0], &[1]);
        assert!((clamped - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn momentum_update_follows_the_recursion() {
        // Constant unit gradient: v accumulates -lr·(1, 1.9, ...).
        let mut theta = [1.0f64];
        let mut v = [0.0f64];
        let g = [1.0f64];
        sgdm_vecs(&mut theta, &g, &mut v, 0.1, 0.9);
        assert!((theta[0] - 0.9).abs() < 1e-15);
        assert!((v[0] + 0.1).abs() < 1e-15);
        sgdm_vecs(&mut theta, &g, &mut v, 0.1, 0.9);
        assert!((v[0] + 0.19).abs() < 1e-15);
        assert!((theta[0] - (1.0 - 0.1 * (1.0 + 1.9))).abs() < 1e-15);
    }

    #[test]
    fn joint_training_separates_the_toy_problem() {
        let layout = tiny_layout();
        let obs = toy_obs(120, layout.cols, 7);
        let (model, log) = train(layout, &obs, &toy_config()).unwrap();
        assert!(accuracy(&model, &obs) >= 0.99, "accuracy {}", accuracy(&model, &obs));
        assert!(log.final_val_accuracy >= 0.9);
        assert!(!log.records.is_empty());
        for r in &log.records {
            assert!(r.train_loss.is_nan() || r.train_loss.is_finite());
            assert!(r.val_loss.is_finite());
        }
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let layout = tiny_layout();
        let obs = toy_obs(60, layout.cols, 3);
        let mut cfg = toy_config();
        cfg.max_epochs = 2;
        let (a, _) = train(layout, &obs, &cfg).unwrap();
        let (b, _) = train(layout, &obs, &cfg).unwrap();
        for ((ga, ta), (gb, tb)) in a.tensors().into_iter().zip(b.tensors()) {
            assert_eq!(ga, gb);
            assert_eq!(ta, tb, "parameters diverged in {ga:?}");
        }
        for i in 0..3 {
            assert_eq!(a.bn[i].run_mean, b.bn[i].run_mean);
            assert_eq!(a.bn[i].run_var, b.bn[i].run_var);
        }
    }

    #[test]
    fn blockwise_training_separates_the_toy_problem() {
        let layout = tiny_layout();
        let obs = toy_obs(120, layout.cols, 11);
        let (model, log) = cascade_train(layout, &obs, &toy_config()).unwrap();
        assert!(accuracy(&model, &obs) >= 0.95, "accuracy {}", accuracy(&model, &obs));
        assert!(log.records.iter().any(|r| r.phase == 3));
        // Same trainable structure as the jointly trained network.
        let reference = ModelParams::<f32>::new(layout, 0);
        assert_eq!(model.param_count(), reference.param_count());
    }

    #[test]
    fn stage_training_touches_only_its_own_block() {
        let layout = tiny_layout();
        let obs = toy_obs(40, layout.cols, 5);
        let cfg = TrainConfig { cascade_stage_epochs: 1, ..toy_config() };
        let (train_idx, val_idx) = split_indices(obs.len(), cfg.val_fraction, cfg.seed);
        let mut model = ModelParams::<f32>::new(layout, 99);
        let before = model.clone();
        let mut ctx = CascadeCtx {
            obs: &obs,
            train_idx,
            val_idx,
            cfg,
            records: Vec::new(),
            iter: 0,
        };
        let _ = train_stage(&mut model, 1, &mut ctx);
        // Block 1 moved; every other tensor is bit-identical, including the
        // frozen prefix's running statistics.
        assert_ne!(model.conv[1].w, before.conv[1].w);
        assert_eq!(model.conv[0].w, before.conv[0].w);
        assert_eq!(model.conv[0].b, before.conv[0].b);
        assert_eq!(model.bn[0].gamma, before.bn[0].gamma);
        assert_eq!(model.bn[0].run_mean, before.bn[0].run_mean);
        assert_eq!(model.bn[0].run_var, before.bn[0].run_var);
        assert_eq!(model.conv[2].w, before.conv[2].w);
        assert_eq!(model.bn[2].gamma, before.bn[2].gamma);
        assert_eq!(model.bn[2].run_var, before.bn[2].run_var);
        assert_eq!(model.fc1.w, before.fc1.w);
        assert_eq!(model.fc2.w, before.fc2.w);
    }

    #[test]
    fn scoring_reports_both_hypotheses() {
        let layout = tiny_layout();
        let mut model = ModelParams::<f32>::new(layout, 1);
        for (_, t) in model.tensors_mut() {
            t.fill(0.0);
        }
        let obs = toy_obs(3, layout.cols, 2);
        let scores = score(&model, &obs).unwrap();
        for s in &scores {
            assert_eq!(s.h1, 0.5);
            assert_eq!(s.h0, 0.5);
            assert!((s.ratio() - 1.0).abs() < 1e-12);
        }
        // Width mismatch is rejected.
        let bad = toy_obs(1, layout.cols + 2, 2);
        assert!(score(&model, &bad).is_err());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let layout = Layout::with_channels(12, [3, 3, 3], 4).unwrap();
        for seed in 0..10 {
            let worst = gradient_check(layout, 4, seed).unwrap();
            assert!(worst < 1e-4, "seed {seed}: worst relative error {worst}");
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let layout = tiny_layout();
        let obs = toy_obs(10, layout.cols, 0);
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { val_fraction: 1.0, ..TrainConfig::default() },
            TrainConfig { val_frequency: 0, ..TrainConfig::default() },
        ] {
            assert!(train(layout, &obs, &cfg).is_err());
        }
        // Unlabeled observations are rejected for training.
        let mut unlabeled = toy_obs(10, layout.cols, 0);
        unlabeled[3].label = None;
        assert!(train(layout, &unlabeled, &TrainConfig::default()).is_err());
    }
}
