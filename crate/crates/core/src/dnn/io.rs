//! Binary model file format.
//!
//! A saved model starts with the magic `SSBNN001` and a little-endian `u32`
//! format version (currently 1), followed by the eight layers in network
//! order: conv, batch norm, conv, batch norm, conv, batch norm, then the two
//! fully connected layers. Each layer is a one-byte type tag, its shape as
//! little-endian `u32`s, and its tensors as little-endian `f32`s:
//!
//! | tag | layer      | shape              | tensors                        |
//! |-----|------------|--------------------|--------------------------------|
//! | 1   | convolution| c_out, c_in, kh, kw| weights, bias                  |
//! | 2   | batch norm | c                  | gamma, beta, run_mean, run_var |
//! | 3   | fully conn.| n_out, n_in        | weights, bias                  |
//!
//! The network shape is not stored separately — it is reconstructed from the
//! layer shapes on load and cross-checked against the fixed kernel chain.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::model::{BatchNorm, Conv, Fc, Layout, ModelParams, KERNELS, N_CLASSES};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SSBNN001";
const VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_BN: u8 = 2;
const TAG_FC: u8 = 3;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(4 * 16384.min(data.len().max(1)));
    for chunk in data.chunks(16384) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Save a trained model.
pub fn save_model(model: &ModelParams<f32>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    for i in 0..3 {
        let c = &model.conv[i];
        w.write_all(&[TAG_CONV])?;
        for dim in [c.c_out, c.c_in, c.kh, c.kw] {
            write_u32(&mut w, dim as u32)?;
        }
        write_f32s(&mut w, &c.w)?;
        write_f32s(&mut w, &c.b)?;

        let bn = &model.bn[i];
        w.write_all(&[TAG_BN])?;
        write_u32(&mut w, bn.c as u32)?;
        write_f32s(&mut w, &bn.gamma)?;
        write_f32s(&mut w, &bn.beta)?;
        write_f32s(&mut w, &bn.run_mean)?;
        write_f32s(&mut w, &bn.run_var)?;
    }
    for fc in [&model.fc1, &model.fc2] {
        w.write_all(&[TAG_FC])?;
        write_u32(&mut w, fc.n_out as u32)?;
        write_u32(&mut w, fc.n_in as u32)?;
        write_f32s(&mut w, &fc.w)?;
        write_f32s(&mut w, &fc.b)?;
    }
    w.flush()?;
    Ok(())
}

/// Byte cursor that reports the offset of whatever failed to parse.
struct Reader {
    data: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn fail<T>(&self, msg: impl std::fmt::Display) -> Result<T> {
        Err(Error::Format { offset: self.pos as u64, msg: msg.to_string() })
    }

    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "file truncated: needed {n} more bytes, had {}",
                    self.data.len() - self.pos
                ),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u32()?;
        if v == 0 {
            return Err(Error::Format { offset: at as u64, msg: format!("{what} must be nonzero") });
        }
        Ok(v as usize)
    }

    fn f32s(&mut self, len: usize, what: &str) -> Result<Vec<f32>> {
        let need = len.checked_mul(4).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            msg: format!("{what} length overflows"),
        })?;
        let b = self.bytes(need)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn tag(&mut self, expected: u8, what: &str) -> Result<()> {
        let at = self.pos;
        let t = self.u8()?;
        if t != expected {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!("expected {what} layer (tag {expected}), found tag {t}"),
            });
        }
        Ok(())
    }
}

fn read_conv(r: &mut Reader) -> Result<Conv<f32>> {
    r.tag(TAG_CONV, "convolution")?;
    let c_out = r.dim("output channels")?;
    let c_in = r.dim("input channels")?;
    let kh = r.dim("kernel height")?;
    let kw = r.dim("kernel width")?;
    let w = r.f32s(c_out * c_in * kh * kw, "convolution weights")?;
    let b = r.f32s(c_out, "convolution bias")?;
    Ok(Conv { c_out, c_in, kh, kw, w, b })
}

fn read_bn(r: &mut Reader) -> Result<BatchNorm<f32>> {
    r.tag(TAG_BN, "batch norm")?;
    let c = r.dim("channels")?;
    let gamma = r.f32s(c, "gamma")?;
    let beta = r.f32s(c, "beta")?;
    let run_mean = r.f32s(c, "running mean")?;
    let var_at = r.pos;
    let run_var = r.f32s(c, "running variance")?;
    if let Some(j) = run_var.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::Format {
            offset: (var_at + 4 * j) as u64,
            msg: format!("running variance entry {j} is {} (must be positive)", run_var[j]),
        });
    }
    Ok(BatchNorm { c, gamma, beta, run_mean, run_var })
}

fn read_fc(r: &mut Reader) -> Result<Fc<f32>> {
    r.tag(TAG_FC, "fully connected")?;
    let n_out = r.dim("output width")?;
    let n_in = r.dim("input width")?;
    let w = r.f32s(n_out * n_in, "weights")?;
    let b = r.f32s(n_out, "bias")?;
    Ok(Fc { n_out, n_in, w, b })
}

/// Load a model saved by [`save_model`], validating the layer chain.
pub fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    let mut data = Vec::new();
    File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader { data, pos: 0 };

    let magic = r.bytes(MAGIC.len())?;
    if magic != MAGIC {
        r.pos = 0;
        return r.fail("not a model file (bad magic)");
    }
    let ver_at = r.pos;
    let version = r.u32()?;
    if version != VERSION {
        r.pos = ver_at;
        return r.fail(format!("unsupported format version {version} (expected {VERSION})"));
    }

    let mut conv: Vec<Conv<f32>> = Vec::with_capacity(3);
    let mut bn: Vec<BatchNorm<f32>> = Vec::with_capacity(3);
    for i in 0..3 {
        let at = r.pos;
        let c = read_conv(&mut r)?;
        if (c.kh, c.kw) != KERNELS[i] {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!(
                    "convolution {i} has kernel {}×{}, expected {}×{}",
                    c.kh, c.kw, KERNELS[i].0, KERNELS[i].1
                ),
            });
        }
        let expected_in = if i == 0 { 1 } else { conv[i - 1].c_out };
        if c.c_in != expected_in {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!(
                    "convolution {i} expects {} input channels, previous layer provides {expected_in}",
                    c.c_in
                ),
            });
        }
        let bn_at = r.pos;
        let b = read_bn(&mut r)?;
        if b.c != c.c_out {
            return Err(Error::Format {
                offset: bn_at as u64,
                msg: format!(
                    "batch norm {i} covers {} channels, convolution produces {}",
                    b.c, c.c_out
                ),
            });
        }
        conv.push(c);
        bn.push(b);
    }
    let fc1_at = r.pos;
    let fc1 = read_fc(&mut r)?;
    let fc2_at = r.pos;
    let fc2 = read_fc(&mut r)?;
    if r.pos != r.data.len() {
        return r.fail(format!("{} trailing bytes after the last layer", r.data.len() - r.pos));
    }
    if fc2.n_out != N_CLASSES {
        return Err(Error::Format {
            offset: fc2_at as u64,
            msg: format!("classifier emits {} outputs, expected {N_CLASSES}", fc2.n_out),
        });
    }
    if fc2.n_in != fc1.n_out {
        return Err(Error::Format {
            offset: fc2_at as u64,
            msg: format!(
                "classifier layers disagree: {} into {}",
                fc1.n_out, fc2.n_in
            ),
        });
    }

    // Reconstruct the input width from the classifier's fan-in: the three
    // convolutions leave 3 rows and trim Σ(kw−1) = 9 columns.
    let c3 = conv[2].c_out;
    if fc1.n_in % (3 * c3) != 0 {
        return Err(Error::Format {
            offset: fc1_at as u64,
            msg: format!(
                "classifier fan-in {} is not a whole number of {}-channel columns",
                fc1.n_in,
                3 * c3
            ),
        });
    }
    let w3 = fc1.n_in / (3 * c3);
    let trimmed: usize = KERNELS.iter().map(|&(_, kw)| kw - 1).sum();
    let layout = Layout::with_channels(
        w3 + trimmed,
        [conv[0].c_out, conv[1].c_out, conv[2].c_out],
        fc1.n_out,
    )
    .map_err(|e| Error::Format { offset: fc1_at as u64, msg: e.to_string() })?;

    let conv: [Conv<f32>; 3] = conv.try_into().expect("three stages");
    let bn: [BatchNorm<f32>; 3] = bn.try_into().expect("three stages");
    Ok(ModelParams { layout, conv, bn, fc1, fc2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnn::Layout;

    fn small_model() -> ModelParams<f32> {
        let layout = Layout::with_channels(14, [3, 5, 4], 7).unwrap();
        ModelParams::new(layout, 77)
    }

    #[test]
    fn save_and_load_round_trips_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut model = small_model();
        // Make the running statistics non-trivial so they are exercised too.
        for bn in &mut model.bn {
            for (j, v) in bn.run_mean.iter_mut().enumerate() {
                *v = j as f32 * 0.25 - 0.5;
            }
            for (j, v) in bn.run_var.iter_mut().enumerate() {
                *v = 0.5 + j as f32 * 0.125;
            }
        }
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.layout, model.layout);
        for i in 0..3 {
            assert_eq!(loaded.conv[i].w, model.conv[i].w);
            assert_eq!(loaded.conv[i].b, model.conv[i].b);
            assert_eq!(loaded.bn[i].gamma, model.bn[i].gamma);
            assert_eq!(loaded.bn[i].beta, model.bn[i].beta);
            assert_eq!(loaded.bn[i].run_mean, model.bn[i].run_mean);
            assert_eq!(loaded.bn[i].run_var, model.bn[i].run_var);
        }
        assert_eq!(loaded.fc1.w, model.fc1.w);
        assert_eq!(loaded.fc1.b, model.fc1.b);
        assert_eq!(loaded.fc2.w, model.fc2.w);
        assert_eq!(loaded.fc2.b, model.fc2.b);
    }

    #[test]
    fn corrupted_files_are_rejected_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let model = small_model();
        save_model(&model, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        match load_model(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected a format error, got {other:?}"),
        }

        // Unsupported version.
        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        match load_model(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected a format error, got {other:?}"),
        }

        // Truncation.
        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));

        // Trailing garbage.
        let mut bad = good.clone();
        bad.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));

        // Wrong kernel footprint: the first conv's kh field (after magic,
        // version, tag, c_out, c_in) forced to 3.
        let mut bad = good.clone();
        let kh_at = 8 + 4 + 1 + 4 + 4;
        bad[kh_at..kh_at + 4].copy_from_slice(&3u32.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn non_positive_running_variance_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut model = small_model();
        model.bn[1].run_var[2] = 0.0;
        save_model(&model, &path).unwrap();
        match load_model(&path) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("running variance")),
            other => panic!("expected a format error, got {other:?}"),
        }
    }
}
