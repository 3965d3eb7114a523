//! Stratified splitting, patch extraction, eight-fold dihedral augmentation,
//! and the per-iteration multi-domain batch schedule.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::hsdata::{HyperCube, LabelMap};
use crate::mix_seed;

/// Train/test pixel coordinates for one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub name: String,
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

/// Stratified split of the labeled pixels of one label map. `classes` is
/// ordered by class index, so `classes[k]` holds label value `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub seed: u64,
    pub per_class: usize,
    pub classes: Vec<ClassSplit>,
}

impl Split {
    pub fn train_total(&self) -> usize {
        self.classes.iter().map(|c| c.train.len()).sum()
    }

    pub fn test_total(&self) -> usize {
        self.classes.iter().map(|c| c.test.len()).sum()
    }

    /// Training pixels as (x, y, class index), class index 0-based.
    pub fn train_pixels(&self) -> Vec<(usize, usize, usize)> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(k, c)| c.train.iter().map(move |&(x, y)| (x, y, k)))
            .collect()
    }

    /// Test pixels as (x, y, class index), class index 0-based.
    pub fn test_pixels(&self) -> Vec<(usize, usize, usize)> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(k, c)| c.test.iter().map(move |&(x, y)| (x, y, k)))
            .collect()
    }
}

/// Per-class uniform sample of `per_class` training pixels; the rest of the
/// labeled pixels become test. Every class must have more than `per_class`
/// labeled pixels, so the test side is never empty.
pub fn split_train_test(
    labels: &LabelMap,
    class_names: &[String],
    per_class: usize,
    seed: u64,
) -> Result<Split> {
    let classes = class_names.len();
    if (labels.max_label() as usize) > classes {
        return Err(Error::Format(format!(
            "label {} exceeds the {} declared classes",
            labels.max_label(),
            classes
        )));
    }
    let mut coords: Vec<Vec<(usize, usize)>> = vec![Vec::new(); classes];
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            let l = labels.at(x, y);
            if l != 0 {
                coords[l as usize - 1].push((x, y));
            }
        }
    }
    let mut out = Vec::with_capacity(classes);
    for (k, pixels) in coords.into_iter().enumerate() {
        if pixels.len() <= per_class {
            return Err(Error::ClassTooSmall {
                name: class_names[k].clone(),
                available: pixels.len(),
                requested: per_class,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, k as u64));
        let picked = rand::seq::index::sample(&mut rng, pixels.len(), per_class);
        let mut is_train = vec![false; pixels.len()];
        let mut train = Vec::with_capacity(per_class);
        for i in picked {
            is_train[i] = true;
            train.push(pixels[i]);
        }
        let test = pixels
            .iter()
            .zip(&is_train)
            .filter(|&(_, &t)| !t)
            .map(|(&p, _)| p)
            .collect();
        out.push(ClassSplit {
            name: class_names[k].clone(),
            train,
            test,
        });
    }
    Ok(Split {
        seed,
        per_class,
        classes: out,
    })
}

#[derive(Serialize, Deserialize)]
struct ClassEntry {
    train: Vec<(usize, usize)>,
    test: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    seed: u64,
    per_class: usize,
    classes: BTreeMap<String, ClassEntry>,
}

pub fn save_split(split: &Split, path: &Path) -> Result<()> {
    let file = SplitFile {
        seed: split.seed,
        per_class: split.per_class,
        classes: split
            .classes
            .iter()
            .map(|c| {
                (
                    c.name.clone(),
                    ClassEntry {
                        train: c.train.clone(),
                        test: c.test.clone(),
                    },
                )
            })
            .collect(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Load a split, restoring class order from `class_names`.
pub fn load_split(path: &Path, class_names: &[String]) -> Result<Split> {
    let mut file: SplitFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if file.classes.len() != class_names.len() {
        return Err(Error::Format(format!(
            "split file has {} classes, expected {}",
            file.classes.len(),
            class_names.len()
        )));
    }
    let mut classes = Vec::with_capacity(class_names.len());
    for name in class_names {
        let entry = file
            .classes
            .remove(name)
            .ok_or_else(|| Error::Format(format!("split file missing class {name:?}")))?;
        classes.push(ClassSplit {
            name: name.clone(),
            train: entry.train,
            test: entry.test,
        });
    }
    Ok(Split {
        seed: file.seed,
        per_class: file.per_class,
        classes,
    })
}

/// Default spatial window: the largest bank filter is 5x5, so P = 5 gives
/// it exactly one valid placement.
pub const DEFAULT_PATCH: usize = 5;

/// One training sample: all bands of a P-by-P window.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Shape [B, P, P].
    pub data: Tensor<f32>,
    /// 1-based class label.
    pub label: u16,
    pub domain_id: usize,
}

/// Reflect an out-of-image coordinate back inside without repeating the
/// border pixel (a window at (0,0) with P=5 reads indices 2,1,0,1,2).
pub(crate) fn mirror(t: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut t = t.rem_euclid(period);
    if t >= n {
        t = period - t;
    }
    t as usize
}

/// P-by-P window of all bands centered at (x, y), borders mirrored.
/// P must be odd so the center is well defined.
pub fn extract_patch(cube: &HyperCube, x: usize, y: usize, p: usize) -> Result<Tensor<f32>> {
    if p == 0 || p.is_multiple_of(2) {
        return Err(Error::Invalid(format!("patch size {p} must be odd")));
    }
    if x >= cube.width() || y >= cube.height() {
        return Err(Error::Invalid(format!(
            "pixel ({x},{y}) outside {}x{} image",
            cube.width(),
            cube.height()
        )));
    }
    let r = (p / 2) as i64;
    let (w, h, bands) = (cube.width() as i64, cube.height() as i64, cube.bands());
    let xs: Vec<usize> = (-r..=r).map(|d| mirror(x as i64 + d, w)).collect();
    let ys: Vec<usize> = (-r..=r).map(|d| mirror(y as i64 + d, h)).collect();
    let mut data = Vec::with_capacity(bands * p * p);
    for b in 0..bands {
        for &sy in &ys {
            for &sx in &xs {
                data.push(cube.at(b, sx, sy));
            }
        }
    }
    Tensor::new(vec![bands, p, p], data)
}

/// Spatial transforms of the dihedral group, in the order produced by
/// [`augment_d4`]. Index 0 is the identity.
pub const D4_TRANSFORMS: usize = 8;

/// Source index (sy, sx) for output position (y, x) under transform `t`.
fn d4_source(t: usize, n: usize, y: usize, x: usize) -> (usize, usize) {
    let m = n - 1;
    match t {
        0 => (y, x),         // identity
        1 => (m - x, y),     // rotate 90
        2 => (m - y, m - x), // rotate 180
        3 => (x, m - y),     // rotate 270
        4 => (y, m - x),     // mirror across the vertical axis
        5 => (m - y, x),     // mirror across the horizontal axis
        6 => (x, y),         // mirror across the main diagonal
        7 => (m - x, m - y), // mirror across the anti-diagonal
        _ => unreachable!(),
    }
}

/// Apply D4 transform `t` to a [B, P, P] tensor.
pub fn apply_d4(data: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
    let shape = data.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Shape(format!(
            "expected a square [B,P,P] patch, got {shape:?}"
        )));
    }
    if t >= D4_TRANSFORMS {
        return Err(Error::Invalid(format!("transform index {t} out of range")));
    }
    let (bands, n) = (shape[0], shape[1]);
    let src = data.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..bands {
        let plane = &src[b * n * n..(b + 1) * n * n];
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = d4_source(t, n, y, x);
                out.push(plane[sy * n + sx]);
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// The eight dihedral images of a patch: identity, three rotations, and the
/// four mirrors. Labels and bands are untouched; for odd P every transform
/// fixes the center pixel, so the label stays attached to the same ground
/// coordinate.
pub fn augment_d4(patch: &Patch) -> Result<Vec<Patch>> {
    (0..D4_TRANSFORMS)
        .map(|t| {
            Ok(Patch {
                data: apply_d4(&patch.data, t)?,
                label: patch.label,
                domain_id: patch.domain_id,
            })
        })
        .collect()
}

/// One batch for one domain.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub domain_id: usize,
    /// Shape [batch, B_d, P, P].
    pub data: Tensor<f32>,
    /// 0-based class indices, one per sample.
    pub labels: Vec<usize>,
}

/// Draws one batch per domain per iteration, uniformly with replacement from
/// each domain's augmented training pool (train pixels times the 8 dihedral
/// transforms). Each domain has its own RNG stream.
pub struct BatchSchedule {
    batch_size: usize,
    patch: usize,
    pools: Vec<Vec<(usize, usize, usize)>>,
    rngs: Vec<ChaCha8Rng>,
}

impl BatchSchedule {
    pub fn new(splits: &[Split], batch_size: usize, patch: usize, seed: u64) -> Result<Self> {
        if splits.is_empty() {
            return Err(Error::Invalid("schedule needs at least one domain".into()));
        }
        if batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        let mut pools = Vec::with_capacity(splits.len());
        for (d, split) in splits.iter().enumerate() {
            let pool = split.train_pixels();
            if pool.is_empty() {
                return Err(Error::EmptyTrainingPool(d));
            }
            pools.push(pool);
        }
        let rngs = (0..splits.len())
            .map(|d| ChaCha8Rng::seed_from_u64(mix_seed(seed, d as u64)))
            .collect();
        Ok(BatchSchedule {
            batch_size,
            patch,
            pools,
            rngs,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn domains(&self) -> usize {
        self.pools.len()
    }

    /// Size of the augmented pool for one domain.
    pub fn pool_size(&self, domain: usize) -> usize {
        self.pools[domain].len() * D4_TRANSFORMS
    }

    /// One batch per domain; `cubes` must be ordered like the splits.
    pub fn next_batches(&mut self, cubes: &[&HyperCube]) -> Result<Vec<DomainBatch>> {
        if cubes.len() != self.pools.len() {
            return Err(Error::Invalid(format!(
                "{} cubes for {} domains",
                cubes.len(),
                self.pools.len()
            )));
        }
        let mut out = Vec::with_capacity(self.pools.len());
        for d in 0..self.pools.len() {
            let pool = &self.pools[d];
            let augmented = pool.len() * D4_TRANSFORMS;
            let bands = cubes[d].bands();
            let mut data = Vec::with_capacity(self.batch_size * bands * self.patch * self.patch);
            let mut labels = Vec::with_capacity(self.batch_size);
            for _ in 0..self.batch_size {
                let pick = self.rngs[d].random_range(0..augmented);
                let (x, y, class) = pool[pick / D4_TRANSFORMS];
                let window = extract_patch(cubes[d], x, y, self.patch)?;
                let window = apply_d4(&window, pick % D4_TRANSFORMS)?;
                data.extend_from_slice(window.data());
                labels.push(class);
            }
            out.push(DomainBatch {
                domain_id: d,
                data: Tensor::new(
                    vec![self.batch_size, bands, self.patch, self.patch],
                    data,
                )?,
                labels,
            });
        }
        Ok(out)
    }
}
