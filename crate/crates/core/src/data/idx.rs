//! IDX container reading and writing (plain or gzip-compressed).
//!
//! Byte offsets in parse errors refer to the decompressed stream.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::{Compression, GzBuilder};
use ndarray::Array2;

use super::Dataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: out.len() as u64,
                reason: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Header {
    dims: Vec<usize>,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path, magic: u32, ndims: usize) -> Result<Header> {
    let err = |offset: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "truncated magic number".into()));
    }
    let found = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(err(
            0,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(err(
            bytes.len(),
            format!("truncated header: need {header_len} bytes"),
        ));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() < header_len + payload {
        return Err(err(
            bytes.len(),
            format!(
                "truncated payload: header declares {payload} bytes, file has {}",
                bytes.len() - header_len
            ),
        ));
    }
    if bytes.len() > header_len + payload {
        return Err(err(
            header_len + payload,
            "trailing bytes after payload".into(),
        ));
    }
    Ok(Header {
        dims,
        data_offset: header_len,
    })
}

/// Reads an IDX3 image file. Returns pixel values scaled to `[0, 1]`, one
/// row per image, together with `(rows, cols)`.
pub fn read_idx_images(path: &Path) -> Result<(Array2<f32>, [usize; 2])> {
    let bytes = read_bytes(path)?;
    let h = parse_header(&bytes, path, IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (h.dims[0], h.dims[1], h.dims[2]);
    let data = &bytes[h.data_offset..];
    let images = Array2::from_shape_fn((n, rows * cols), |(i, j)| {
        data[i * rows * cols + j] as f32 / 255.0
    });
    Ok((images, [rows, cols]))
}

/// Reads an IDX1 label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_bytes(path)?;
    let h = parse_header(&bytes, path, LABELS_MAGIC, 1)?;
    Ok(bytes[h.data_offset..].iter().map(|&b| b as usize).collect())
}

/// Loads an image file and its label file into a [`Dataset`] with
/// `num_classes` classes.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let (x, [rows, cols]) = read_idx_images(images)?;
    let y = read_idx_labels(labels)?;
    if x.nrows() != y.len() {
        return Err(Error::Parse {
            path: labels.to_path_buf(),
            offset: 4,
            reason: format!("{} labels for {} images", y.len(), x.nrows()),
        });
    }
    Dataset::new(x, vec![rows, cols], y, num_classes)
}

fn resolve(dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

/// Loads `(train, test)` from a directory with the canonical MNIST file names.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &resolve(dir, "train-images-idx3-ubyte")?,
        &resolve(dir, "train-labels-idx1-ubyte")?,
        10,
    )?;
    let test = load_idx(
        &resolve(dir, "t10k-images-idx3-ubyte")?,
        &resolve(dir, "t10k-labels-idx1-ubyte")?,
        10,
    )?;
    Ok((train, test))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc: GzEncoder<File> = GzBuilder::new()
            .mtime(0)
            .write(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        let mut f = file;
        f.write_all(bytes)?;
    }
    Ok(())
}

/// Writes images (values in `[0, 1]`, rounded to bytes) as IDX3.
/// Paths ending in `.gz` are gzip-compressed.
pub fn write_idx_images(path: &Path, images: &Array2<f32>, rows: usize, cols: usize) -> Result<()> {
    if images.ncols() != rows * cols {
        return Err(Error::Shape(format!(
            "{} pixels per image, expected {rows}x{cols}",
            images.ncols()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + images.len());
    bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.nrows(), rows, cols] {
        bytes.extend_from_slice(&(d as u32).to_be_bytes());
    }
    bytes.extend(
        images
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write_bytes(path, &bytes)
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        bytes.push(u8::try_from(l).map_err(|_| Error::Range(format!("label {l} exceeds 255")))?);
    }
    write_bytes(path, &bytes)
}
