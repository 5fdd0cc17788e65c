//! Convolutional classifier over the 5-row detection tensor.
//!
//! Architecture: three valid-padding convolution blocks (conv → batch norm →
//! ReLU) followed by a two-layer fully connected classifier with a softmax
//! output. Kernel footprints are fixed at 2×5, 2×5, and 1×2, which takes the
//! five input rows down to three while trimming nine columns; channel widths
//! and the hidden layer size are configurable through [`Layout`].
//!
//! Activations are stored sample-major, channel-major (`[n][c][h][w]`), so
//! flattening the last block's output for the classifier is a no-op. All
//! heavy lifting runs through the GEMM front-end: each convolution unrolls a
//! sample's receptive fields into a patch matrix and runs one large dense
//! product (contiguous operands keep the BLAS near peak), the classifier
//! layers are single batched products, and per-sample work is parallelized
//! with a fixed-order reduction so results are bit-reproducible at any
//! thread count.

use rand::Rng;
use rayon::prelude::*;

use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::features::TENSOR_ROWS;
use crate::rng::chacha;

/// Kernel footprint (height, width) of each convolution stage.
pub const KERNELS: [(usize, usize); 3] = [(2, 5), (2, 5), (1, 2)];
/// Channel widths of the three convolution stages in the standard network.
pub const DEFAULT_CHANNELS: [usize; 3] = [256, 128, 128];
/// Hidden width of the fully connected classifier in the standard network.
pub const DEFAULT_FC_HIDDEN: usize = 128;
/// Output classes: index 0 scores the jammed hypothesis, index 1 the clean one.
pub const N_CLASSES: usize = 2;
/// Variance guard inside batch-norm denominators.
pub const BN_EPS: f64 = 1e-5;
/// Update weight of fresh batch statistics in the running averages.
pub const BN_MOMENTUM: f64 = 0.1;

/// Network shape: input width plus the free size choices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    /// Columns of the 5-row input tensor.
    pub cols: usize,
    /// Output channels of the three convolution stages.
    pub channels: [usize; 3],
    /// Hidden width of the classifier.
    pub fc_hidden: usize,
}

/// Spatial bookkeeping for one convolution stage.
#[derive(Clone, Copy, Debug)]
pub(super) struct StageDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub kh: usize,
    pub kw: usize,
}

impl StageDims {
    pub(super) fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }
    pub(super) fn out_len(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }
}

impl Layout {
    /// Standard network over an input of `cols` columns.
    pub fn new(cols: usize) -> Result<Self> {
        Self::with_channels(cols, DEFAULT_CHANNELS, DEFAULT_FC_HIDDEN)
    }

    /// Network with custom channel widths (useful for small test nets).
    pub fn with_channels(cols: usize, channels: [usize; 3], fc_hidden: usize) -> Result<Self> {
        let trimmed: usize = KERNELS.iter().map(|&(_, kw)| kw - 1).sum();
        if cols <= trimmed {
            return Err(Error::invalid(format!(
                "input width {cols} leaves no columns after the convolution chain (needs > {trimmed})"
            )));
        }
        if channels.contains(&0) || fc_hidden == 0 {
            return Err(Error::invalid("channel and hidden widths must be nonzero"));
        }
        Ok(Self { cols, channels, fc_hidden })
    }

    /// Heights, widths, and channels of the tensor entering each stage
    /// (index 0..3) and leaving the last one (index 3).
    fn chain(&self) -> ([usize; 4], [usize; 4], [usize; 4]) {
        let mut h = [0; 4];
        let mut w = [0; 4];
        let mut c = [0; 4];
        h[0] = TENSOR_ROWS;
        w[0] = self.cols;
        c[0] = 1;
        for i in 0..3 {
            let (kh, kw) = KERNELS[i];
            h[i + 1] = h[i] - kh + 1;
            w[i + 1] = w[i] - kw + 1;
            c[i + 1] = self.channels[i];
        }
        (h, w, c)
    }

    pub(super) fn stage(&self, i: usize) -> StageDims {
        let (h, w, c) = self.chain();
        let (kh, kw) = KERNELS[i];
        StageDims {
            c_in: c[i],
            h: h[i],
            w: w[i],
            c_out: c[i + 1],
            h_out: h[i + 1],
            w_out: w[i + 1],
            kh,
            kw,
        }
    }

    /// Length of one flattened input sample (5 rows × `cols`).
    pub fn input_len(&self) -> usize {
        TENSOR_ROWS * self.cols
    }

    /// Length of the flattened feature vector entering the classifier.
    pub fn flattened_len(&self) -> usize {
        let (h, w, c) = self.chain();
        c[3] * h[3] * w[3]
    }
}

/// Convolution layer: weights `[c_out][c_in][kh][kw]`, one bias per output
/// channel.
#[derive(Clone, Debug)]
pub struct Conv<S> {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub w: Vec<S>,
    pub b: Vec<S>,
}

/// Per-channel batch normalization with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm<S> {
    pub c: usize,
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub run_mean: Vec<S>,
    pub run_var: Vec<S>,
}

/// Fully connected layer: weights `[n_out][n_in]`, one bias per output.
#[derive(Clone, Debug, Default)]
pub struct Fc<S> {
    pub n_out: usize,
    pub n_in: usize,
    pub w: Vec<S>,
    pub b: Vec<S>,
}

impl<S: Scalar> Conv<S> {
    pub(super) fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize) -> Self {
        Self {
            c_out,
            c_in,
            kh,
            kw,
            w: vec![S::ZERO; c_out * c_in * kh * kw],
            b: vec![S::ZERO; c_out],
        }
    }
}

impl<S: Scalar> BatchNorm<S> {
    pub(super) fn identity(c: usize) -> Self {
        Self {
            c,
            gamma: vec![S::ONE; c],
            beta: vec![S::ZERO; c],
            run_mean: vec![S::ZERO; c],
            run_var: vec![S::ONE; c],
        }
    }

    pub(super) fn zeros(c: usize) -> Self {
        Self {
            c,
            gamma: vec![S::ZERO; c],
            beta: vec![S::ZERO; c],
            run_mean: vec![S::ZERO; c],
            run_var: vec![S::ZERO; c],
        }
    }
}

impl<S: Scalar> Fc<S> {
    pub(super) fn zeros(n_out: usize, n_in: usize) -> Self {
        Self { n_out, n_in, w: vec![S::ZERO; n_out * n_in], b: vec![S::ZERO; n_out] }
    }
}

/// Identifies which layer a parameter tensor belongs to, so optimizer steps
/// can be restricted to a subset of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum ParamGroup {
    Conv(usize),
    Bn(usize),
    Fc(usize),
}

/// Borrow every trainable tensor in a canonical, stable order.
pub(super) trait ParamTensors<S> {
    fn tensors(&self) -> Vec<(ParamGroup, &Vec<S>)>;
    fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Vec<S>)>;
}

/// Full parameter set of the classifier network.
///
/// The same struct doubles as the holder for gradients and optimizer
/// velocity (via [`ModelParams::zeros_like`]); batch-norm running statistics
/// are inference buffers, not trainable parameters, and are skipped by
/// [`ParamTensors`].
#[derive(Clone, Debug)]
pub struct ModelParams<S> {
    pub layout: Layout,
    pub conv: [Conv<S>; 3],
    pub bn: [BatchNorm<S>; 3],
    pub fc1: Fc<S>,
    pub fc2: Fc<S>,
}

impl<S: Scalar> ParamTensors<S> for ModelParams<S> {
    fn tensors(&self) -> Vec<(ParamGroup, &Vec<S>)> {
        let mut out = Vec::with_capacity(16);
        for i in 0..3 {
            out.push((ParamGroup::Conv(i), &self.conv[i].w));
            out.push((ParamGroup::Conv(i), &self.conv[i].b));
            out.push((ParamGroup::Bn(i), &self.bn[i].gamma));
            out.push((ParamGroup::Bn(i), &self.bn[i].beta));
        }
        out.push((ParamGroup::Fc(0), &self.fc1.w));
        out.push((ParamGroup::Fc(0), &self.fc1.b));
        out.push((ParamGroup::Fc(1), &self.fc2.w));
        out.push((ParamGroup::Fc(1), &self.fc2.b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Vec<S>)> {
        let mut out: Vec<(ParamGroup, &mut Vec<S>)> = Vec::with_capacity(16);
        for (i, (conv, bn)) in self.conv.iter_mut().zip(self.bn.iter_mut()).enumerate() {
            out.push((ParamGroup::Conv(i), &mut conv.w));
            out.push((ParamGroup::Conv(i), &mut conv.b));
            out.push((ParamGroup::Bn(i), &mut bn.gamma));
            out.push((ParamGroup::Bn(i), &mut bn.beta));
        }
        out.push((ParamGroup::Fc(0), &mut self.fc1.w));
        out.push((ParamGroup::Fc(0), &mut self.fc1.b));
        out.push((ParamGroup::Fc(1), &mut self.fc2.w));
        out.push((ParamGroup::Fc(1), &mut self.fc2.b));
        out
    }
}

/// Fill `w` with He-uniform draws, `U(-√(6/fan_in), √(6/fan_in))`.
///
/// Draws happen in `f64` before narrowing so every scalar type sees the same
/// underlying values for a given seed.
pub(super) fn he_uniform<S: Scalar>(w: &mut [S], fan_in: usize, rng: &mut impl Rng) {
    let limit = (6.0 / fan_in as f64).sqrt();
    for v in w {
        *v = S::from_f64(rng.random_range(-limit..limit));
    }
}

impl<S: Scalar> ModelParams<S> {
    /// He-uniform initialized network (biases zero, batch norm at identity).
    pub fn new(layout: Layout, seed: u64) -> Self {
        let mut rng = chacha(seed);
        let mut conv = Vec::with_capacity(3);
        let mut bn = Vec::with_capacity(3);
        for i in 0..3 {
            let d = layout.stage(i);
            let mut c = Conv::zeros(d.c_out, d.c_in, d.kh, d.kw);
            he_uniform(&mut c.w, d.c_in * d.kh * d.kw, &mut rng);
            conv.push(c);
            bn.push(BatchNorm::identity(d.c_out));
        }
        let flat = layout.flattened_len();
        let mut fc1 = Fc::zeros(layout.fc_hidden, flat);
        he_uniform(&mut fc1.w, flat, &mut rng);
        let mut fc2 = Fc::zeros(N_CLASSES, layout.fc_hidden);
        he_uniform(&mut fc2.w, layout.fc_hidden, &mut rng);
        let conv: [Conv<S>; 3] = conv.try_into().expect("three stages");
        let bn: [BatchNorm<S>; 3] = bn.try_into().expect("three stages");
        Self { layout, conv, bn, fc1, fc2 }
    }

    /// Same shapes, every tensor zeroed — gradient / velocity holder.
    pub fn zeros_like(&self) -> Self {
        let layout = self.layout;
        let conv: [Conv<S>; 3] = std::array::from_fn(|i| {
            let c = &self.conv[i];
            Conv::zeros(c.c_out, c.c_in, c.kh, c.kw)
        });
        let bn: [BatchNorm<S>; 3] = std::array::from_fn(|i| BatchNorm::zeros(self.bn[i].c));
        Self {
            layout,
            conv,
            bn,
            fc1: Fc::zeros(self.fc1.n_out, self.fc1.n_in),
            fc2: Fc::zeros(self.fc2.n_out, self.fc2.n_in),
        }
    }

    /// Number of trainable parameters (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Layer primitives
// ---------------------------------------------------------------------------

/// Rows of the unrolled-patch matrix: one per (input channel, kernel offset),
/// in the same order the stored weights use as columns.
fn patch_rows(d: StageDims) -> usize {
    d.c_in * d.kh * d.kw
}

/// Unroll one sample's receptive fields into a `c_in·kh·kw × h_out·w_out`
/// matrix, so a valid-padding convolution becomes a single dense product
/// against the weights viewed as a `c_out × c_in·kh·kw` matrix. Each row is
/// filled with contiguous `w_out`-long copies, one per output row.
fn unroll_sample<S: Scalar>(d: StageDims, x_s: &[S], buf: &mut [S]) {
    debug_assert_eq!(x_s.len(), d.in_len());
    debug_assert_eq!(buf.len(), patch_rows(d) * d.h_out * d.w_out);
    let out_plane = d.h_out * d.w_out;
    let mut rows = buf.chunks_exact_mut(out_plane);
    for i in 0..d.c_in {
        for dy in 0..d.kh {
            for dx in 0..d.kw {
                let row = rows.next().expect("row per channel and offset");
                for y in 0..d.h_out {
                    let src = i * d.h * d.w + (y + dy) * d.w + dx;
                    row[y * d.w_out..(y + 1) * d.w_out]
                        .copy_from_slice(&x_s[src..src + d.w_out]);
                }
            }
        }
    }
}

/// Adjoint of [`unroll_sample`]: accumulate a patch-matrix gradient back
/// onto the sample's input layout (overlapping windows sum).
fn fold_sample_grad<S: Scalar>(d: StageDims, buf: &[S], dx_s: &mut [S]) {
    debug_assert_eq!(dx_s.len(), d.in_len());
    debug_assert_eq!(buf.len(), patch_rows(d) * d.h_out * d.w_out);
    let out_plane = d.h_out * d.w_out;
    let mut rows = buf.chunks_exact(out_plane);
    for i in 0..d.c_in {
        for dy in 0..d.kh {
            for dx in 0..d.kw {
                let row = rows.next().expect("row per channel and offset");
                for y in 0..d.h_out {
                    let dst = i * d.h * d.w + (y + dy) * d.w + dx;
                    for (a, &g) in
                        dx_s[dst..dst + d.w_out].iter_mut().zip(&row[y * d.w_out..])
                    {
                        *a += g;
                    }
                }
            }
        }
    }
}

/// Valid-padding convolution of a sample batch.
///
/// Each sample's input is unrolled into a patch matrix and multiplied by the
/// weight matrix in one GEMM — large, contiguous operands that the BLAS can
/// run near peak, unlike strided window views. Samples are independent and
/// run in parallel, with one scratch buffer per worker.
fn conv_forward<S: Scalar>(conv: &Conv<S>, d: StageDims, x: &[S], n: usize, out: &mut [S]) {
    debug_assert_eq!(x.len(), n * d.in_len());
    debug_assert_eq!(out.len(), n * d.out_len());
    let k = patch_rows(d);
    let out_plane = d.h_out * d.w_out;
    out.par_chunks_mut(d.out_len())
        .zip(x.par_chunks(d.in_len()))
        .for_each_init(
            || vec![S::ZERO; k * out_plane],
            |patches, (out_s, x_s)| {
                unroll_sample(d, x_s, patches);
                for o in 0..d.c_out {
                    out_s[o * out_plane..(o + 1) * out_plane].fill(conv.b[o]);
                }
                S::gemm(
                    false,
                    false,
                    d.c_out,
                    out_plane,
                    k,
                    S::ONE,
                    &conv.w,
                    k,
                    patches,
                    out_plane,
                    S::ONE,
                    out_s,
                    out_plane,
                );
            },
        );
}

/// Gradients of a convolution: weight and bias gradients always, input
/// gradients only when a buffer is supplied (the first stage has no
/// upstream). Per-sample weight contributions go into private buffers and
/// are reduced in sample order to keep the result thread-count independent.
fn conv_backward<S: Scalar>(
    conv: &Conv<S>,
    d: StageDims,
    x: &[S],
    n: usize,
    d_out: &[S],
    d_conv: &mut Conv<S>,
    dx: Option<&mut [S]>,
) {
    debug_assert_eq!(x.len(), n * d.in_len());
    debug_assert_eq!(d_out.len(), n * d.out_len());
    let k = patch_rows(d);
    let w_len = d.c_out * k;
    let out_plane = d.h_out * d.w_out;

    // Bias gradient: plain sums over batch and positions.
    for (o, db) in d_conv.b.iter_mut().enumerate() {
        let mut acc = 0.0;
        for s in 0..n {
            let base = s * d.out_len() + o * out_plane;
            for &g in &d_out[base..base + out_plane] {
                acc += g.to_f64();
            }
        }
        *db = S::from_f64(acc);
    }

    // Per-sample weight contributions: dW_s = dY_s · patchesᵀ, one GEMM each,
    // written to private buffers so the batch reduction order stays fixed.
    let mut dw_bufs = vec![S::ZERO; n * w_len];
    let sample_dw = |patches: &mut Vec<S>, x_s: &[S], dout_s: &[S], dw_s: &mut [S]| {
        unroll_sample(d, x_s, patches);
        S::gemm(
            false,
            true,
            d.c_out,
            k,
            out_plane,
            S::ONE,
            dout_s,
            out_plane,
            patches,
            out_plane,
            S::ZERO,
            dw_s,
            k,
        );
    };

    if let Some(dx) = dx {
        debug_assert_eq!(dx.len(), n * d.in_len());
        dx.par_chunks_mut(d.in_len())
            .zip(x.par_chunks(d.in_len()))
            .zip(d_out.par_chunks(d.out_len()))
            .zip(dw_bufs.par_chunks_mut(w_len))
            .for_each_init(
                || (vec![S::ZERO; k * out_plane], vec![S::ZERO; k * out_plane]),
                |(patches, d_patches), (((dx_s, x_s), dout_s), dw_s)| {
                    sample_dw(patches, x_s, dout_s, dw_s);
                    // Patch-matrix gradient Wᵀ·dY_s, folded back onto the input.
                    S::gemm(
                        true,
                        false,
                        k,
                        out_plane,
                        d.c_out,
                        S::ONE,
                        &conv.w,
                        k,
                        dout_s,
                        out_plane,
                        S::ZERO,
                        d_patches,
                        out_plane,
                    );
                    dx_s.fill(S::ZERO);
                    fold_sample_grad(d, d_patches, dx_s);
                },
            );
    } else {
        x.par_chunks(d.in_len())
            .zip(d_out.par_chunks(d.out_len()))
            .zip(dw_bufs.par_chunks_mut(w_len))
            .for_each_init(
                || vec![S::ZERO; k * out_plane],
                |patches, ((x_s, dout_s), dw_s)| sample_dw(patches, x_s, dout_s, dw_s),
            );
    }

    // Fixed-order reduction of the per-sample weight contributions.
    d_conv.w.fill(S::ZERO);
    for s in 0..n {
        for (a, &v) in d_conv.w.iter_mut().zip(&dw_bufs[s * w_len..(s + 1) * w_len]) {
            *a += v;
        }
    }
}

/// Per-channel mean and inverse standard deviation of a batch, accumulated
/// in `f64` in a fixed order.
fn batch_stats<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    plane: usize,
    mu: &mut Vec<S>,
    invstd: &mut Vec<S>,
) -> Vec<f64> {
    let n_el = (n * plane) as f64;
    mu.clear();
    invstd.clear();
    let mut vars = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for &v in &x[base..base + plane] {
                let v = v.to_f64();
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / n_el;
        let var = (sumsq / n_el - mean * mean).max(0.0);
        mu.push(S::from_f64(mean));
        invstd.push(S::from_f64(1.0 / (var + BN_EPS).sqrt()));
        vars.push(var);
    }
    vars
}

/// Apply a per-channel affine map `y = x·scale[c] + shift[c]`.
fn apply_affine<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    plane: usize,
    scale: &[S],
    shift: &[S],
    out: &mut [S],
) {
    debug_assert_eq!(x.len(), n * c * plane);
    out.par_chunks_mut(c * plane)
        .zip(x.par_chunks(c * plane))
        .for_each(|(out_s, x_s)| {
            for ch in 0..c {
                let (sc, sh) = (scale[ch], shift[ch]);
                for (o, &v) in out_s[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .zip(&x_s[ch * plane..(ch + 1) * plane])
                {
                    *o = v * sc + sh;
                }
            }
        });
}

/// Training-mode batch norm: normalize with batch statistics, update the
/// running averages, and cache (mean, inverse std) for the backward pass.
fn bn_forward_train<S: Scalar>(
    bn: &mut BatchNorm<S>,
    plane: usize,
    x: &[S],
    n: usize,
    out: &mut [S],
    mu: &mut Vec<S>,
    invstd: &mut Vec<S>,
) {
    let c = bn.c;
    let vars = batch_stats(x, n, c, plane, mu, invstd);
    let keep = S::from_f64(1.0 - BN_MOMENTUM);
    let fresh = S::from_f64(BN_MOMENTUM);
    let mut scale = Vec::with_capacity(c);
    let mut shift = Vec::with_capacity(c);
    for ch in 0..c {
        bn.run_mean[ch] = bn.run_mean[ch] * keep + mu[ch] * fresh;
        bn.run_var[ch] = bn.run_var[ch] * keep + S::from_f64(vars[ch]) * fresh;
        let sc = bn.gamma[ch] * invstd[ch];
        scale.push(sc);
        shift.push(bn.beta[ch] - sc * mu[ch]);
    }
    apply_affine(x, n, c, plane, &scale, &shift, out);
}

/// Inference-mode batch norm: normalize with the running statistics.
fn bn_forward_infer<S: Scalar>(
    bn: &BatchNorm<S>,
    plane: usize,
    x: &[S],
    n: usize,
    out: &mut [S],
) {
    let c = bn.c;
    let mut scale = Vec::with_capacity(c);
    let mut shift = Vec::with_capacity(c);
    for ch in 0..c {
        let inv = 1.0 / (bn.run_var[ch].to_f64() + BN_EPS).sqrt();
        let sc = bn.gamma[ch] * S::from_f64(inv);
        scale.push(sc);
        shift.push(bn.beta[ch] - sc * bn.run_mean[ch]);
    }
    apply_affine(x, n, c, plane, &scale, &shift, out);
}

/// Training-mode batch norm gradients. `x` is the pre-normalization input
/// cached by the forward pass; the normalized values are recomputed from the
/// cached statistics rather than stored.
#[allow(clippy::too_many_arguments)]
fn bn_backward<S: Scalar>(
    bn: &BatchNorm<S>,
    plane: usize,
    x: &[S],
    n: usize,
    mu: &[S],
    invstd: &[S],
    d_out: &[S],
    d_bn: &mut BatchNorm<S>,
    dx: &mut [S],
) {
    let c = bn.c;
    let n_el = (n * plane) as f64;
    let mut mean_dy = Vec::with_capacity(c);
    let mut mean_dy_xhat = Vec::with_capacity(c);
    for ch in 0..c {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for t in 0..plane {
                let dy = d_out[base + t].to_f64();
                let xhat = ((x[base + t] - mu[ch]) * invstd[ch]).to_f64();
                s1 += dy;
                s2 += dy * xhat;
            }
        }
        d_bn.beta[ch] = S::from_f64(s1);
        d_bn.gamma[ch] = S::from_f64(s2);
        mean_dy.push(S::from_f64(s1 / n_el));
        mean_dy_xhat.push(S::from_f64(s2 / n_el));
    }
    dx.par_chunks_mut(c * plane)
        .zip(x.par_chunks(c * plane))
        .zip(d_out.par_chunks(c * plane))
        .for_each(|((dx_s, x_s), dy_s)| {
            for ch in 0..c {
                let a = bn.gamma[ch] * invstd[ch];
                for t in ch * plane..(ch + 1) * plane {
                    let xhat = (x_s[t] - mu[ch]) * invstd[ch];
                    dx_s[t] = a * (dy_s[t] - mean_dy[ch] - xhat * mean_dy_xhat[ch]);
                }
            }
        });
}

pub(super) fn relu_inplace<S: Scalar>(v: &mut [S]) {
    for x in v {
        *x = x.max(S::ZERO);
    }
}

/// Zero the gradient wherever the activation was clipped.
pub(super) fn relu_backward<S: Scalar>(act: &[S], d: &mut [S]) {
    for (g, &a) in d.iter_mut().zip(act) {
        if !(a > S::ZERO) {
            *g = S::ZERO;
        }
    }
}

/// `out = x·Wᵀ + b` for a batch of `n` rows.
pub(super) fn fc_forward<S: Scalar>(fc: &Fc<S>, x: &[S], n: usize, out: &mut Vec<S>) {
    debug_assert_eq!(x.len(), n * fc.n_in);
    out.clear();
    out.resize(n * fc.n_out, S::ZERO);
    S::gemm(
        false,
        true,
        n,
        fc.n_out,
        fc.n_in,
        S::ONE,
        x,
        fc.n_in,
        &fc.w,
        fc.n_in,
        S::ZERO,
        out,
        fc.n_out,
    );
    for s in 0..n {
        for (o, &b) in out[s * fc.n_out..(s + 1) * fc.n_out].iter_mut().zip(&fc.b) {
            *o += b;
        }
    }
}

/// Gradients of a fully connected layer. The weight gradient is one batched
/// product `d_outᵀ·x`; the input gradient is written when requested.
pub(super) fn fc_backward<S: Scalar>(
    fc: &Fc<S>,
    x: &[S],
    n: usize,
    d_out: &[S],
    d_fc: &mut Fc<S>,
    dx: Option<&mut [S]>,
) {
    S::gemm(
        true,
        false,
        fc.n_out,
        fc.n_in,
        n,
        S::ONE,
        d_out,
        fc.n_out,
        x,
        fc.n_in,
        S::ZERO,
        &mut d_fc.w,
        fc.n_in,
    );
    for (j, db) in d_fc.b.iter_mut().enumerate() {
        let mut acc = 0.0;
        for s in 0..n {
            acc += d_out[s * fc.n_out + j].to_f64();
        }
        *db = S::from_f64(acc);
    }
    if let Some(dx) = dx {
        S::gemm(
            false,
            false,
            n,
            fc.n_in,
            fc.n_out,
            S::ONE,
            d_out,
            fc.n_out,
            &fc.w,
            fc.n_in,
            S::ZERO,
            dx,
            fc.n_in,
        );
    }
}

/// Row-wise softmax in place (`width` entries per row).
pub(super) fn softmax_rows<S: Scalar>(logits: &mut [S], n: usize, width: usize) {
    debug_assert_eq!(logits.len(), n * width);
    for row in logits.chunks_mut(width) {
        let mut m = row[0];
        for &v in row.iter().skip(1) {
            m = m.max(v);
        }
        let mut sum = S::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Gradient of mean NLL through softmax: `(probs − onehot)/n`.
pub(super) fn softmax_nll_backward<S: Scalar>(probs: &[S], classes: &[usize], n: usize) -> Vec<S> {
    debug_assert_eq!(probs.len(), n * N_CLASSES);
    let inv_n = S::from_f64(1.0 / n as f64);
    let mut d = Vec::with_capacity(probs.len());
    for (s, &cls) in classes.iter().enumerate() {
        for j in 0..N_CLASSES {
            let target = if j == cls { S::ONE } else { S::ZERO };
            d.push((probs[s * N_CLASSES + j] - target) * inv_n);
        }
    }
    d
}

// ---------------------------------------------------------------------------
// Whole-network passes
// ---------------------------------------------------------------------------

/// Everything the backward pass needs from a training-mode forward pass.
pub struct TrainCache<S> {
    pub(super) conv_out: [Vec<S>; 3],
    pub(super) bn_mu: [Vec<S>; 3],
    pub(super) bn_invstd: [Vec<S>; 3],
    pub(super) act: [Vec<S>; 3],
    pub(super) hidden: Vec<S>,
    /// Softmax outputs, `n × 2` (column 0 scores the jammed hypothesis).
    pub probs: Vec<S>,
    pub(super) n: usize,
}

impl<S: Scalar> ModelParams<S> {
    /// Training-mode forward pass over a batch of `n` samples laid out as
    /// `n × 5 × cols`. Updates batch-norm running statistics and returns the
    /// caches the backward pass consumes.
    pub fn forward_train(&mut self, x: &[S], n: usize) -> TrainCache<S> {
        assert_eq!(x.len(), n * self.layout.input_len(), "batch length mismatch");
        let mut cache = TrainCache {
            conv_out: std::array::from_fn(|_| Vec::new()),
            bn_mu: std::array::from_fn(|_| Vec::new()),
            bn_invstd: std::array::from_fn(|_| Vec::new()),
            act: std::array::from_fn(|_| Vec::new()),
            hidden: Vec::new(),
            probs: Vec::new(),
            n,
        };
        for i in 0..3 {
            let d = self.layout.stage(i);
            let input = if i == 0 { x } else { &cache.act[i - 1] };
            cache.conv_out[i] = vec![S::ZERO; n * d.out_len()];
            conv_forward(&self.conv[i], d, input, n, &mut cache.conv_out[i]);
            let mut act = vec![S::ZERO; n * d.out_len()];
            let (mu, invstd) = (&mut cache.bn_mu[i], &mut cache.bn_invstd[i]);
            bn_forward_train(
                &mut self.bn[i],
                d.h_out * d.w_out,
                &cache.conv_out[i],
                n,
                &mut act,
                mu,
                invstd,
            );
            relu_inplace(&mut act);
            cache.act[i] = act;
        }
        fc_forward(&self.fc1, &cache.act[2], n, &mut cache.hidden);
        relu_inplace(&mut cache.hidden);
        fc_forward(&self.fc2, &cache.hidden, n, &mut cache.probs);
        softmax_rows(&mut cache.probs, n, N_CLASSES);
        cache
    }

    /// Inference-mode forward pass: batch norm uses running statistics and
    /// nothing is cached or mutated. Returns softmax outputs, `n × 2`.
    pub fn forward_infer(&self, x: &[S], n: usize) -> Vec<S> {
        assert_eq!(x.len(), n * self.layout.input_len(), "batch length mismatch");
        let act = self.forward_prefix_infer(x, n, 3);
        let mut hidden = Vec::new();
        fc_forward(&self.fc1, &act, n, &mut hidden);
        relu_inplace(&mut hidden);
        let mut probs = Vec::new();
        fc_forward(&self.fc2, &hidden, n, &mut probs);
        softmax_rows(&mut probs, n, N_CLASSES);
        probs
    }

    /// Inference-mode forward through the first `n_stages` convolution
    /// blocks only, returning the flattened activations.
    pub(super) fn forward_prefix_infer(&self, x: &[S], n: usize, n_stages: usize) -> Vec<S> {
        assert!((1..=3).contains(&n_stages));
        let mut cur: Vec<S> = Vec::new();
        for i in 0..n_stages {
            let d = self.layout.stage(i);
            let input = if i == 0 { x } else { &cur };
            let mut conv_out = vec![S::ZERO; n * d.out_len()];
            conv_forward(&self.conv[i], d, input, n, &mut conv_out);
            let mut act = vec![S::ZERO; n * d.out_len()];
            bn_forward_infer(&self.bn[i], d.h_out * d.w_out, &conv_out, n, &mut act);
            relu_inplace(&mut act);
            cur = act;
        }
        cur
    }

    /// Gradients of mean NLL over the batch with respect to every trainable
    /// parameter. Every gradient tensor in `grads` is fully overwritten;
    /// `x` and `classes` must be the batch the cache came from.
    pub fn backward(
        &self,
        x: &[S],
        classes: &[usize],
        cache: &TrainCache<S>,
        grads: &mut ModelParams<S>,
    ) {
        let n = cache.n;
        assert_eq!(classes.len(), n, "one class per sample");
        let dlogits = softmax_nll_backward(&cache.probs, classes, n);

        let mut d_hidden = vec![S::ZERO; n * self.fc2.n_in];
        fc_backward(&self.fc2, &cache.hidden, n, &dlogits, &mut grads.fc2, Some(&mut d_hidden));
        relu_backward(&cache.hidden, &mut d_hidden);

        let mut d_act = vec![S::ZERO; n * self.fc1.n_in];
        fc_backward(&self.fc1, &cache.act[2], n, &d_hidden, &mut grads.fc1, Some(&mut d_act));

        for i in (0..3).rev() {
            let d = self.layout.stage(i);
            relu_backward(&cache.act[i], &mut d_act);
            let mut d_conv_out = vec![S::ZERO; n * d.out_len()];
            bn_backward(
                &self.bn[i],
                d.h_out * d.w_out,
                &cache.conv_out[i],
                n,
                &cache.bn_mu[i],
                &cache.bn_invstd[i],
                &d_act,
                &mut grads.bn[i],
                &mut d_conv_out,
            );
            if i == 0 {
                conv_backward(&self.conv[0], d, x, n, &d_conv_out, &mut grads.conv[0], None);
            } else {
                let mut d_prev = vec![S::ZERO; n * d.in_len()];
                conv_backward(
                    &self.conv[i],
                    d,
                    &cache.act[i - 1],
                    n,
                    &d_conv_out,
                    &mut grads.conv[i],
                    Some(&mut d_prev),
                );
                d_act = d_prev;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Detached classifier head (used for block-wise training)
// ---------------------------------------------------------------------------

/// A standalone flatten → hidden → softmax classifier.
///
/// Block-wise training attaches one of these to each convolution stage in
/// turn; the final classifier phase reuses the same code on the network's
/// own fully connected layers.
#[derive(Clone, Debug, Default)]
pub(super) struct Head<S> {
    pub fc1: Fc<S>,
    pub fc2: Fc<S>,
}

pub(super) struct HeadCache<S> {
    pub hidden: Vec<S>,
    pub probs: Vec<S>,
    pub n: usize,
}

impl<S: Scalar> ParamTensors<S> for Head<S> {
    fn tensors(&self) -> Vec<(ParamGroup, &Vec<S>)> {
        vec![
            (ParamGroup::Fc(0), &self.fc1.w),
            (ParamGroup::Fc(0), &self.fc1.b),
            (ParamGroup::Fc(1), &self.fc2.w),
            (ParamGroup::Fc(1), &self.fc2.b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Vec<S>)> {
        vec![
            (ParamGroup::Fc(0), &mut self.fc1.w),
            (ParamGroup::Fc(0), &mut self.fc1.b),
            (ParamGroup::Fc(1), &mut self.fc2.w),
            (ParamGroup::Fc(1), &mut self.fc2.b),
        ]
    }
}

impl<S: Scalar> Head<S> {
    pub(super) fn new(n_in: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = chacha(seed);
        let mut fc1 = Fc::zeros(hidden, n_in);
        he_uniform(&mut fc1.w, n_in, &mut rng);
        let mut fc2 = Fc::zeros(N_CLASSES, hidden);
        he_uniform(&mut fc2.w, hidden, &mut rng);
        Self { fc1, fc2 }
    }

    pub(super) fn zeros_like(&self) -> Self {
        Self {
            fc1: Fc::zeros(self.fc1.n_out, self.fc1.n_in),
            fc2: Fc::zeros(self.fc2.n_out, self.fc2.n_in),
        }
    }

    pub(super) fn forward(&self, x: &[S], n: usize) -> HeadCache<S> {
        let mut hidden = Vec::new();
        fc_forward(&self.fc1, x, n, &mut hidden);
        relu_inplace(&mut hidden);
        let mut probs = Vec::new();
        fc_forward(&self.fc2, &hidden, n, &mut probs);
        softmax_rows(&mut probs, n, N_CLASSES);
        HeadCache { hidden, probs, n }
    }

    /// Gradients of mean NLL; optionally also the gradient with respect to
    /// the head's input (needed when a convolution block trains below it).
    pub(super) fn backward(
        &self,
        x: &[S],
        classes: &[usize],
        cache: &HeadCache<S>,
        grads: &mut Head<S>,
        dx: Option<&mut [S]>,
    ) {
        let n = cache.n;
        let dlogits = softmax_nll_backward(&cache.probs, classes, n);
        let mut d_hidden = vec![S::ZERO; n * self.fc2.n_in];
        fc_backward(&self.fc2, &cache.hidden, n, &dlogits, &mut grads.fc2, Some(&mut d_hidden));
        relu_backward(&cache.hidden, &mut d_hidden);
        fc_backward(&self.fc1, x, n, &d_hidden, &mut grads.fc1, dx);
    }
}

/// Training-mode forward/backward of a single convolution block, used when
/// the block trains against a detached head. Returns the post-activation
/// output and the caches needed to push gradients back through.
pub(super) struct BlockCache<S> {
    pub conv_out: Vec<S>,
    pub mu: Vec<S>,
    pub invstd: Vec<S>,
    pub act: Vec<S>,
}

pub(super) fn block_forward_train<S: Scalar>(
    conv: &Conv<S>,
    bn: &mut BatchNorm<S>,
    d: StageDims,
    x: &[S],
    n: usize,
) -> BlockCache<S> {
    let mut conv_out = vec![S::ZERO; n * d.out_len()];
    conv_forward(conv, d, x, n, &mut conv_out);
    let mut act = vec![S::ZERO; n * d.out_len()];
    let mut mu = Vec::new();
    let mut invstd = Vec::new();
    bn_forward_train(bn, d.h_out * d.w_out, &conv_out, n, &mut act, &mut mu, &mut invstd);
    relu_inplace(&mut act);
    BlockCache { conv_out, mu, invstd, act }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn block_backward<S: Scalar>(
    conv: &Conv<S>,
    bn: &BatchNorm<S>,
    d: StageDims,
    x: &[S],
    n: usize,
    cache: &BlockCache<S>,
    d_act: &mut [S],
    d_conv: &mut Conv<S>,
    d_bn: &mut BatchNorm<S>,
) {
    relu_backward(&cache.act, d_act);
    let mut d_conv_out = vec![S::ZERO; n * d.out_len()];
    bn_backward(
        bn,
        d.h_out * d.w_out,
        &cache.conv_out,
        n,
        &cache.mu,
        &cache.invstd,
        d_act,
        d_bn,
        &mut d_conv_out,
    );
    conv_backward(conv, d, x, n, &d_conv_out, d_conv, None);
}

/// Single-block inference forward, used to cross-check the whole-network
/// pass against its pieces.
#[cfg(test)]
fn block_forward_infer<S: Scalar>(
    conv: &Conv<S>,
    bn: &BatchNorm<S>,
    d: StageDims,
    x: &[S],
    n: usize,
) -> Vec<S> {
    let mut conv_out = vec![S::ZERO; n * d.out_len()];
    conv_forward(conv, d, x, n, &mut conv_out);
    let mut act = vec![S::ZERO; n * d.out_len()];
    bn_forward_infer(bn, d.h_out * d.w_out, &conv_out, n, &mut act);
    relu_inplace(&mut act);
    act
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_layout() -> Layout {
        Layout::with_channels(16, [4, 4, 4], 6).unwrap()
    }

    #[test]
    fn layout_tracks_the_convolution_chain() {
        let l = Layout::new(1024).unwrap();
        let s0 = l.stage(0);
        assert_eq!((s0.c_in, s0.h, s0.w), (1, 5, 1024));
        assert_eq!((s0.c_out, s0.h_out, s0.w_out), (256, 4, 1020));
        let s1 = l.stage(1);
        assert_eq!((s1.c_in, s1.h, s1.w), (256, 4, 1020));
        assert_eq!((s1.c_out, s1.h_out, s1.w_out), (128, 3, 1016));
        let s2 = l.stage(2);
        assert_eq!((s2.c_in, s2.h, s2.w), (128, 3, 1016));
        assert_eq!((s2.c_out, s2.h_out, s2.w_out), (128, 3, 1015));
        assert_eq!(l.flattened_len(), 128 * 3 * 1015);
        assert_eq!(l.input_len(), 5 * 1024);
    }

    #[test]
    fn layout_rejects_too_narrow_inputs() {
        assert!(Layout::new(9).is_err());
        assert!(Layout::new(10).is_ok());
        assert!(Layout::with_channels(16, [0, 4, 4], 6).is_err());
        assert!(Layout::with_channels(16, [4, 4, 4], 0).is_err());
    }

    #[test]
    fn parameter_count_matches_hand_tally() {
        let l = tiny_layout();
        let m = ModelParams::<f32>::new(l, 7);
        // conv: 4·1·2·5+4, 4·4·2·5+4, 4·4·1·2+4; bn: 2·4 each;
        // fc1: 6·(4·3·7)+6; fc2: 2·6+2.
        let expect = (40 + 4) + (160 + 4) + (32 + 4) + 3 * 8 + (6 * 84 + 6) + (2 * 6 + 2);
        assert_eq!(m.param_count(), expect);
    }

    #[test]
    fn zeroed_network_is_indifferent() {
        let l = tiny_layout();
        let mut m = ModelParams::<f64>::new(l, 3);
        for (_, t) in m.tensors_mut() {
            t.fill(0.0);
        }
        let x = vec![0.7; 2 * l.input_len()];
        let probs = m.forward_infer(&x, 2);
        assert_eq!(probs, vec![0.5; 4]);
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant() {
        let mut a = vec![1.25f64, -0.5, 3.0, 0.0, 0.0, 0.0];
        let mut b: Vec<f64> = a.iter().map(|v| v + 17.5).collect();
        softmax_rows(&mut a, 2, 3);
        softmax_rows(&mut b, 2, 3);
        for row in a.chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_is_invariant_to_sample_order() {
        let l = tiny_layout();
        let m = ModelParams::<f32>::new(l, 11);
        let mut rng = crate::rng::chacha(5);
        let n = 4;
        let x: Vec<f32> = (0..n * l.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probs = m.forward_infer(&x, n);
        // Reverse the batch and check rows follow their samples bit-exactly.
        let mut xr = Vec::with_capacity(x.len());
        for s in (0..n).rev() {
            xr.extend_from_slice(&x[s * l.input_len()..(s + 1) * l.input_len()]);
        }
        let probs_r = m.forward_infer(&xr, n);
        for s in 0..n {
            let orig = &probs[(n - 1 - s) * 2..(n - 1 - s) * 2 + 2];
            assert_eq!(orig, &probs_r[s * 2..s * 2 + 2]);
        }
    }

    #[test]
    fn convolution_matches_direct_summation() {
        let l = tiny_layout();
        let d = l.stage(1); // multi-channel in and out
        let mut rng = crate::rng::chacha(9);
        let n = 3;
        let mut conv = Conv::<f64>::zeros(d.c_out, d.c_in, d.kh, d.kw);
        for v in conv.w.iter_mut().chain(conv.b.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..n * d.in_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut fast = vec![0.0; n * d.out_len()];
        conv_forward(&conv, d, &x, n, &mut fast);
        for s in 0..n {
            for o in 0..d.c_out {
                for y in 0..d.h_out {
                    for xcol in 0..d.w_out {
                        let mut acc = conv.b[o];
                        for i in 0..d.c_in {
                            for dy in 0..d.kh {
                                for dx in 0..d.kw {
                                    acc += conv.w[((o * d.c_in + i) * d.kh + dy) * d.kw + dx]
                                        * x[s * d.in_len()
                                            + i * d.h * d.w
                                            + (y + dy) * d.w
                                            + (xcol + dx)];
                                }
                            }
                        }
                        let got =
                            fast[s * d.out_len() + o * d.h_out * d.w_out + y * d.w_out + xcol];
                        assert!((got - acc).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // `ch` walks four parallel per-channel arrays
    fn training_batch_norm_standardizes_each_channel() {
        let mut bn = BatchNorm::<f64>::identity(3);
        let (n, plane) = (4, 10);
        let mut rng = crate::rng::chacha(21);
        let x: Vec<f64> = (0..n * 3 * plane).map(|_| rng.random_range(-3.0..5.0)).collect();
        let mut out = vec![0.0; x.len()];
        let (mut mu, mut invstd) = (Vec::new(), Vec::new());
        bn_forward_train(&mut bn, plane, &x, n, &mut out, &mut mu, &mut invstd);
        for ch in 0..3 {
            let mut vals = Vec::new();
            for s in 0..n {
                let base = (s * 3 + ch) * plane;
                vals.extend_from_slice(&out[base..base + plane]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
            // Running stats moved one-tenth of the way toward the batch.
            assert!((bn.run_mean[ch] - 0.1 * mu[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn blockwise_and_whole_network_forward_agree() {
        let l = tiny_layout();
        let mut m = ModelParams::<f64>::new(l, 13);
        let mut rng = crate::rng::chacha(6);
        let n = 3;
        let x: Vec<f64> = (0..n * l.input_len()).map(|_| rng.range()).collect();
        let probs = m.forward_infer(&x, n);
        // Same computation assembled from the block-level pieces.
        let mut cur = x.clone();
        for i in 0..3 {
            cur = block_forward_infer(&m.conv[i], &m.bn[i], l.stage(i), &cur, n);
        }
        let head = Head { fc1: std::mem::take(&mut m.fc1), fc2: std::mem::take(&mut m.fc2) };
        let cache = head.forward(&cur, n);
        for (a, b) in probs.iter().zip(&cache.probs) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    trait RangeExt {
        fn range(&mut self) -> f64;
    }
    impl RangeExt for rand_chacha::ChaCha20Rng {
        fn range(&mut self) -> f64 {
            rand::Rng::random_range(self, -1.0..1.0)
        }
    }
}
