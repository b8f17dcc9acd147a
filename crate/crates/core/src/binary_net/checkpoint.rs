//! Versioned little-endian model checkpoints. The byte layout is described
//! in `docs/checkpoint-format.md`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{BatchNorm, BinaryLayer, LayerParams};
use super::model::{ForwardMode, Model};
use super::sign_value;
use super::spec::{infer_output, LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::scalar::Real;

const MAGIC: &[u8; 8] = b"BIFLCKPT";
const VERSION: u32 = 1;

/// Serializes `model` (specs, weights, amplitudes, batch-norm state, RNG
/// state and optimizer step). Optimizer moments are not stored.
pub fn write_checkpoint<F: Real, W: Write>(model: &Model<F>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[match model.mode {
        ForwardMode::Binary => 0,
        ForwardMode::Real => 1,
    }])?;
    w.write_all(&model.rng.get_seed())?;
    w.write_all(&model.rng.get_stream().to_le_bytes())?;
    w.write_all(&model.rng.get_word_pos().to_le_bytes())?;
    w.write_all(&model.step.to_le_bytes())?;
    let input = &model.specs[0].input_dims;
    write_u32(&mut w, input.len())?;
    for &d in input {
        write_u32(&mut w, d)?;
    }
    write_u32(&mut w, model.specs.len())?;
    for (spec, params) in model.specs.iter().zip(&model.params) {
        w.write_all(&[spec.kind.tag()])?;
        match spec.kind {
            LayerKind::Dense { units } => write_u32(&mut w, units)?,
            LayerKind::Conv2d { filters, kernel } => {
                write_u32(&mut w, filters)?;
                write_u32(&mut w, kernel)?;
            }
            _ => {}
        }
        w.write_all(&[spec.binarized as u8])?;
        match params {
            LayerParams::Weight(layer) => {
                let (rows, cols) = layer.shape();
                write_u32(&mut w, rows)?;
                write_u32(&mut w, cols)?;
                write_f32(&mut w, layer.amplitude)?;
                for &a in layer.aux.iter() {
                    write_f32(&mut w, a)?;
                }
                let mut bytes = vec![0u8; layer.len().div_ceil(8)];
                for (i, &b) in layer.bin.iter().enumerate() {
                    if b > F::zero() {
                        bytes[i / 8] |= 1 << (i % 8);
                    }
                }
                w.write_all(&bytes)?;
            }
            LayerParams::BatchNorm(bn) => {
                write_u32(&mut w, bn.features())?;
                for arr in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    for &v in arr.iter() {
                        write_f32(&mut w, v)?;
                    }
                }
            }
            LayerParams::None => {}
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint<F: Real>(model: &Model<F>, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Model<F>> {
    read_checkpoint(BufReader::new(File::open(path)?), path)
}

/// Parses a checkpoint; `path` is used only in error messages.
pub fn read_checkpoint<F: Real, R: Read>(r: R, path: &Path) -> Result<Model<F>> {
    let mut r = Cursor {
        inner: r,
        offset: 0,
        path: path.to_path_buf(),
    };
    let magic: [u8; 8] = r.array()?;
    if &magic != MAGIC {
        return Err(r.fail(0, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(8, &format!("unsupported checkpoint version {version}")));
    }
    let mode = match r.u8()? {
        0 => ForwardMode::Binary,
        1 => ForwardMode::Real,
        m => return Err(r.fail(r.offset - 1, &format!("unknown mode {m}"))),
    };
    let seed: [u8; 32] = r.array()?;
    let stream = u64::from_le_bytes(r.array()?);
    let word_pos = u128::from_le_bytes(r.array()?);
    let step = u64::from_le_bytes(r.array()?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let ndims = r.len_u32(4)?;
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(r.u32()? as usize);
    }
    let nlayers = r.len_u32(1 << 16)?;
    let mut specs = Vec::with_capacity(nlayers);
    let mut params = Vec::with_capacity(nlayers);
    for _ in 0..nlayers {
        let at = r.offset;
        let kind = match r.u8()? {
            0 => LayerKind::Dense {
                units: r.u32()? as usize,
            },
            1 => LayerKind::Conv2d {
                filters: r.u32()? as usize,
                kernel: r.u32()? as usize,
            },
            2 => LayerKind::BatchNorm,
            3 => LayerKind::Tanh,
            4 => LayerKind::Softmax,
            5 => LayerKind::PoolDown2,
            t => return Err(r.fail(at, &format!("unknown layer tag {t}"))),
        };
        let binarized = r.u8()? != 0;
        let output_dims = infer_output(&kind, &dims).map_err(|e| r.fail(at, &e.to_string()))?;
        let spec = LayerSpec {
            kind,
            input_dims: dims.clone(),
            output_dims: output_dims.clone(),
            binarized,
        };
        spec.validate().map_err(|e| r.fail(at, &e.to_string()))?;
        let p = match kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                if Some((rows, cols)) != spec.weight_shape() {
                    return Err(r.fail(at, "weight shape does not match layer spec"));
                }
                let amplitude = r.f32::<F>()?;
                let n = rows * cols;
                let mut aux = Vec::with_capacity(n);
                for _ in 0..n {
                    aux.push(r.f32::<F>()?);
                }
                let bits_at = r.offset;
                let mut bytes = vec![0u8; n.div_ceil(8)];
                r.fill(&mut bytes)?;
                let aux = Array2::from_shape_vec((rows, cols), aux).expect("sized");
                let bin = Array2::from_shape_fn((rows, cols), |(i, j)| {
                    let k = i * cols + j;
                    if bytes[k / 8] >> (k % 8) & 1 == 1 {
                        F::one()
                    } else {
                        -F::one()
                    }
                });
                if aux
                    .iter()
                    .zip(bin.iter())
                    .any(|(&a, &b)| sign_value(a) != b)
                {
                    return Err(r.fail(bits_at, "binary weights disagree with auxiliary weights"));
                }
                let mut layer = BinaryLayer::from_aux(aux, F::one());
                if !(amplitude > F::zero()) {
                    return Err(r.fail(at, "non-positive layer amplitude"));
                }
                layer.amplitude = amplitude;
                LayerParams::Weight(layer)
            }
            LayerKind::BatchNorm => {
                let features = r.u32()? as usize;
                if features != spec.bn_features() {
                    return Err(r.fail(at, "batch-norm width does not match layer spec"));
                }
                let mut bn = BatchNorm::new(features);
                let read = |r: &mut Cursor<R>| -> Result<Array1<F>> {
                    (0..features).map(|_| r.f32::<F>()).collect()
                };
                bn.gamma = read(&mut r)?;
                bn.beta = read(&mut r)?;
                bn.running_mean = read(&mut r)?;
                bn.running_var = read(&mut r)?;
                LayerParams::BatchNorm(bn)
            }
            _ => LayerParams::None,
        };
        specs.push(spec);
        params.push(p);
        dims = output_dims;
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(r.fail(r.offset, "trailing bytes after checkpoint"));
    }
    let mut model = Model::from_parts(specs, params, mode, rng)?;
    model.step = step;
    Ok(model)
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Range(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32<F: Real, W: Write>(w: &mut W, v: F) -> Result<()> {
    w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
    path: PathBuf,
}

impl<R: Read> Cursor<R> {
    fn fail(&self, offset: u64, reason: &str) -> Error {
        Error::Parse {
            path: self.path.clone(),
            offset,
            reason: reason.to_string(),
        }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut done = 0;
        while done < buf.len() {
            match self.inner.read(&mut buf[done..])? {
                0 => return Err(self.fail(self.offset + done as u64, "unexpected end of file")),
                k => done += k,
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b)?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn len_u32(&mut self, max: usize) -> Result<usize> {
        let at = self.offset;
        let v = self.u32()? as usize;
        if v == 0 || v > max {
            return Err(self.fail(at, &format!("count {v} outside 1..={max}")));
        }
        Ok(v)
    }

    fn f32<F: Real>(&mut self) -> Result<F> {
        let at = self.offset;
        let v = f32::from_le_bytes(self.array()?);
        if !v.is_finite() {
            return Err(self.fail(at, "non-finite value"));
        }
        Ok(F::lit(v as f64))
    }
}
