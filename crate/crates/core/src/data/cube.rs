use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};

const CUBE_MAGIC: &[u8; 4] = b"HSIC";
const GT_MAGIC: &[u8; 4] = b"HSIG";
const CUBE_VERSION: u16 = 1;
const CUBE_HEADER_LEN: usize = 4 + 2 + 4 * 3;
const GT_HEADER_LEN: usize = 4 + 4 * 2;

/// An `M x N x B` reflectance cube stored `[row][col][band]`, with an
/// optional ground-truth grid (`0` = unlabeled, `1..=K` = classes).
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub values: Vec<f32>,
    pub gt: Option<Vec<u16>>,
}

/// Contents of a ground-truth file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u16>,
}

impl HsiCube {
    pub fn new(rows: usize, cols: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        let cube = Self {
            rows,
            cols,
            bands,
            values,
            gt: None,
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn with_gt(mut self, labels: Vec<u16>) -> Result<Self> {
        self.gt = Some(labels);
        self.validate()?;
        Ok(self)
    }

    /// Attaches a ground-truth grid read from disk; spatial sizes must agree.
    pub fn with_ground_truth(self, gt: GroundTruth) -> Result<Self> {
        if gt.rows != self.rows || gt.cols != self.cols {
            return Err(Error::Validation(format!(
                "ground truth is {}x{}, cube is {}x{}",
                gt.rows, gt.cols, self.rows, self.cols
            )));
        }
        self.with_gt(gt.labels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.bands == 0 {
            return Err(Error::Validation(format!(
                "cube dimensions must be positive, got {}x{}x{}",
                self.rows, self.cols, self.bands
            )));
        }
        let expected = self.rows * self.cols * self.bands;
        if self.values.len() != expected {
            return Err(Error::Validation(format!(
                "cube needs {expected} values, has {}",
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value at index {i}")));
        }
        if let Some(gt) = &self.gt {
            if gt.len() != self.rows * self.cols {
                return Err(Error::Validation(format!(
                    "ground truth needs {} labels, has {}",
                    self.rows * self.cols,
                    gt.len()
                )));
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.cols + col) * self.bands;
        &self.values[start..start + self.bands]
    }

    /// Class at a pixel, `None` when unlabeled or without ground truth.
    pub fn label(&self, row: usize, col: usize) -> Option<u16> {
        self.gt
            .as_ref()
            .map(|g| g[row * self.cols + col])
            .filter(|&l| l != 0)
    }

    /// Largest label present (the class count `K`), 0 without ground truth.
    pub fn class_count(&self) -> usize {
        self.gt
            .as_ref()
            .and_then(|g| g.iter().max().copied())
            .unwrap_or(0) as usize
    }

    pub fn labelled_count(&self) -> usize {
        self.gt
            .as_ref()
            .map(|g| g.iter().filter(|&&l| l != 0).count())
            .unwrap_or(0)
    }

    /// Per-band min-max scaling of the whole cube to `[0, 1]`; constant
    /// bands map to 0.
    pub fn normalize_bands(&mut self) {
        let b = self.bands;
        let mut lo = vec![f32::INFINITY; b];
        let mut hi = vec![f32::NEG_INFINITY; b];
        for px in self.values.chunks(b) {
            for (i, &v) in px.iter().enumerate() {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        for px in self.values.chunks_mut(b) {
            for (i, v) in px.iter_mut().enumerate() {
                let range = hi[i] as f64 - lo[i] as f64;
                *v = if range > 0.0 {
                    ((*v as f64 - lo[i] as f64) / range).clamp(0.0, 1.0) as f32
                } else {
                    0.0
                };
            }
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn dim(bytes: &[u8]) -> usize {
    LittleEndian::read_u32(bytes) as usize
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    if bytes.len() < CUBE_HEADER_LEN || &bytes[..4] != CUBE_MAGIC {
        return Err(Error::Format(format!("{}: missing HSIC header", path.display())));
    }
    let version = LittleEndian::read_u16(&bytes[4..6]);
    if version != CUBE_VERSION {
        return Err(Error::Format(format!("unsupported cube version {version}")));
    }
    let (rows, cols, bands) = (dim(&bytes[6..]), dim(&bytes[10..]), dim(&bytes[14..]));
    let expected = rows * cols * bands;
    let payload = &bytes[CUBE_HEADER_LEN..];
    if payload.len() != expected * 4 {
        return Err(Error::Truncated {
            expected,
            actual: payload.len() / 4,
        });
    }
    let mut values = vec![0f32; expected];
    LittleEndian::read_f32_into(payload, &mut values);
    HsiCube::new(rows, cols, bands, values)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes the cube values; ground truth goes to its own file via [`write_gt`].
pub fn write_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    cube.validate()?;
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = create(path)?;
    w.write_all(CUBE_MAGIC).map_err(io)?;
    w.write_u16::<LittleEndian>(CUBE_VERSION).map_err(io)?;
    for d in [cube.rows, cube.cols, cube.bands] {
        w.write_u32::<LittleEndian>(header_dim(d)?).map_err(io)?;
    }
    let mut buf = vec![0u8; 4 * 4096];
    for chunk in cube.values.chunks(4096) {
        let out = &mut buf[..chunk.len() * 4];
        LittleEndian::write_f32_into(chunk, out);
        w.write_all(out).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn header_dim(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::Validation(format!("dimension {d} exceeds u32")))
}

pub fn read_gt(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    if bytes.len() < GT_HEADER_LEN || &bytes[..4] != GT_MAGIC {
        return Err(Error::Format(format!("{}: missing HSIG header", path.display())));
    }
    let (rows, cols) = (dim(&bytes[4..]), dim(&bytes[8..]));
    let expected = rows * cols;
    let payload = &bytes[GT_HEADER_LEN..];
    if payload.len() != expected * 2 {
        return Err(Error::Truncated {
            expected,
            actual: payload.len() / 2,
        });
    }
    let mut labels = vec![0u16; expected];
    LittleEndian::read_u16_into(payload, &mut labels);
    Ok(GroundTruth { rows, cols, labels })
}

pub fn write_gt(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    cube.validate()?;
    let labels = cube
        .gt
        .as_ref()
        .ok_or_else(|| Error::Validation("cube has no ground truth".into()))?;
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = create(path)?;
    w.write_all(GT_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(header_dim(cube.rows)?).map_err(io)?;
    w.write_u32::<LittleEndian>(header_dim(cube.cols)?).map_err(io)?;
    let mut buf = vec![0u8; labels.len() * 2];
    LittleEndian::write_u16_into(labels, &mut buf);
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)
}
