//! Band-sequential cube and label raster types with their on-disk format.
//!
//! A cube on disk is a JSON text header plus a separate raw file of
//! little-endian 32-bit floats in band-sequential order; label maps use the
//! same scheme with unsigned 16-bit values. Both are auditable with a hex
//! dump and trivially parseable from any language.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// B-band image raster, band-sequential: `data[(b*height + y)*width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    width: usize,
    height: usize,
    bands: usize,
    data: Vec<f32>,
}

impl HyperCube {
    pub fn new(width: usize, height: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::Shape(format!(
                "cube dimensions must be positive, got {width}x{height}x{bands}"
            )));
        }
        if data.len() != width * height * bands {
            return Err(Error::Shape(format!(
                "cube {width}x{height}x{bands} needs {} values, got {}",
                width * height * bands,
                data.len()
            )));
        }
        crate::autodiff::check_finite(&data, "cube data")?;
        Ok(HyperCube {
            width,
            height,
            bands,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn band(&self, b: usize) -> &[f32] {
        &self.data[b * self.height * self.width..(b + 1) * self.height * self.width]
    }

    pub fn at(&self, b: usize, x: usize, y: usize) -> f32 {
        self.data[(b * self.height + y) * self.width + x]
    }

    /// All band values at one pixel.
    pub fn spectrum(&self, x: usize, y: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.at(b, x, y)).collect()
    }
}

/// Per-pixel class annotations; 0 means unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "label map dimensions must be positive, got {width}x{height}"
            )));
        }
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "label map {width}x{height} needs {} values, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(LabelMap {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn at(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Pixel count per class index `1..=classes`.
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; classes];
        for &l in &self.labels {
            if l != 0 && (l as usize) <= classes {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }
}

#[derive(Serialize, Deserialize)]
struct CubeHeader {
    format_version: u32,
    width: usize,
    height: usize,
    bands: usize,
    dtype: String,
    interleave: String,
    raw: String,
}

#[derive(Serialize, Deserialize)]
struct LabelHeader {
    format_version: u32,
    width: usize,
    height: usize,
    dtype: String,
    raw: String,
    class_names: Vec<String>,
}

fn raw_path_for(header_path: &Path, raw: &str) -> PathBuf {
    match header_path.parent() {
        Some(dir) => dir.join(raw),
        None => PathBuf::from(raw),
    }
}

fn raw_name_for(header_path: &Path) -> Result<String> {
    let stem = header_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Invalid(format!("bad header path {}", header_path.display())))?;
    Ok(format!("{stem}.raw"))
}

pub fn save_cube(cube: &HyperCube, header_path: &Path) -> Result<()> {
    let raw = raw_name_for(header_path)?;
    let header = CubeHeader {
        format_version: 1,
        width: cube.width,
        height: cube.height,
        bands: cube.bands,
        dtype: "f32le".into(),
        interleave: "bsq".into(),
        raw: raw.clone(),
    };
    fs::write(header_path, serde_json::to_string_pretty(&header)?)?;
    let mut bytes = Vec::with_capacity(cube.data.len() * 4);
    for &v in &cube.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(raw_path_for(header_path, &raw), bytes)?;
    Ok(())
}

pub fn load_cube(header_path: &Path) -> Result<HyperCube> {
    let header: CubeHeader = serde_json::from_str(&fs::read_to_string(header_path)?)?;
    if header.format_version != 1 {
        return Err(Error::Format(format!(
            "unsupported cube format version {}",
            header.format_version
        )));
    }
    if header.dtype != "f32le" || header.interleave != "bsq" {
        return Err(Error::Format(format!(
            "unsupported cube encoding {}/{}",
            header.dtype, header.interleave
        )));
    }
    let bytes = fs::read(raw_path_for(header_path, &header.raw))?;
    let expected = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(header.bands))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("cube dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::PayloadSize {
            expected: expected as u64,
            got: bytes.len() as u64,
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    HyperCube::new(header.width, header.height, header.bands, data)
}

pub fn save_labels(labels: &LabelMap, class_names: &[String], header_path: &Path) -> Result<()> {
    let raw = raw_name_for(header_path)?;
    let header = LabelHeader {
        format_version: 1,
        width: labels.width,
        height: labels.height,
        dtype: "u16le".into(),
        raw: raw.clone(),
        class_names: class_names.to_vec(),
    };
    fs::write(header_path, serde_json::to_string_pretty(&header)?)?;
    let mut bytes = Vec::with_capacity(labels.labels.len() * 2);
    for &v in &labels.labels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(raw_path_for(header_path, &raw), bytes)?;
    Ok(())
}

pub fn load_labels(header_path: &Path) -> Result<(LabelMap, Vec<String>)> {
    let header: LabelHeader = serde_json::from_str(&fs::read_to_string(header_path)?)?;
    if header.format_version != 1 {
        return Err(Error::Format(format!(
            "unsupported label format version {}",
            header.format_version
        )));
    }
    if header.dtype != "u16le" {
        return Err(Error::Format(format!("unsupported label dtype {}", header.dtype)));
    }
    let bytes = fs::read(raw_path_for(header_path, &header.raw))?;
    let expected = header.width * header.height * 2;
    if bytes.len() != expected {
        return Err(Error::PayloadSize {
            expected: expected as u64,
            got: bytes.len() as u64,
        });
    }
    let labels: Vec<u16> = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let map = LabelMap::new(header.width, header.height, labels)?;
    let max = map.max_label() as usize;
    if max > header.class_names.len() {
        return Err(Error::Format(format!(
            "label {} exceeds the {} declared classes",
            max,
            header.class_names.len()
        )));
    }
    Ok((map, header.class_names))
}

/// Keep only the listed bands, in order; `keep` must be strictly increasing
/// and in range.
pub fn band_reduce(cube: &HyperCube, keep: &[usize]) -> Result<HyperCube> {
    if keep.is_empty() {
        return Err(Error::Invalid("band keep-list is empty".into()));
    }
    for pair in keep.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Invalid(format!(
                "band keep-list not strictly increasing at {} -> {}",
                pair[0], pair[1]
            )));
        }
    }
    if *keep.last().unwrap() >= cube.bands {
        return Err(Error::Invalid(format!(
            "band index {} out of range for {} bands",
            keep.last().unwrap(),
            cube.bands
        )));
    }
    let plane = cube.width * cube.height;
    let mut data = Vec::with_capacity(keep.len() * plane);
    for &b in keep {
        data.extend_from_slice(cube.band(b));
    }
    HyperCube::new(cube.width, cube.height, keep.len(), data)
}
