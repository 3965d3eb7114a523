//! Dataset descriptors: band counts and class rosters for each domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Everything the network needs to know about one dataset: how many bands
/// survive reduction and what the classes are called.
///
/// `band_keep` lists which raw bands to retain; it may be empty when only the
/// reduced count is known (the built-in descriptors ship without index lists,
/// since those depend on the user's copy of the data).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Band count after reduction; the network's input channel count.
    pub bands: usize,
    /// Band count of the raw cube before reduction.
    pub bands_raw: usize,
    /// 0-based raw-band indices to keep, strictly increasing; empty means
    /// the cube is expected to arrive already reduced.
    pub band_keep: Vec<usize>,
    pub class_names: Vec<String>,
}

impl DomainSpec {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Invalid("domain name is empty".into()));
        }
        if self.bands == 0 || self.bands_raw == 0 {
            return Err(Error::Invalid(format!(
                "domain {}: band counts must be positive",
                self.name
            )));
        }
        if self.bands > self.bands_raw {
            return Err(Error::Invalid(format!(
                "domain {}: {} reduced bands exceed {} raw bands",
                self.name, self.bands, self.bands_raw
            )));
        }
        if !self.band_keep.is_empty() {
            if self.band_keep.len() != self.bands {
                return Err(Error::Invalid(format!(
                    "domain {}: keep-list has {} entries but bands = {}",
                    self.name,
                    self.band_keep.len(),
                    self.bands
                )));
            }
            for pair in self.band_keep.windows(2) {
                if pair[1] <= pair[0] {
                    return Err(Error::Invalid(format!(
                        "domain {}: keep-list not strictly increasing",
                        self.name
                    )));
                }
            }
            if *self.band_keep.last().unwrap() >= self.bands_raw {
                return Err(Error::Invalid(format!(
                    "domain {}: keep index {} out of range for {} raw bands",
                    self.name,
                    self.band_keep.last().unwrap(),
                    self.bands_raw
                )));
            }
        }
        if self.class_names.len() < 2 {
            return Err(Error::Invalid(format!(
                "domain {}: needs at least 2 classes",
                self.name
            )));
        }
        Ok(())
    }
}

fn spec(name: &str, bands: usize, bands_raw: usize, classes: &[&str]) -> DomainSpec {
    DomainSpec {
        name: name.into(),
        bands,
        bands_raw,
        band_keep: Vec::new(),
        class_names: classes.iter().map(|s| s.to_string()).collect(),
    }
}

/// Descriptors for the three benchmark datasets. Water-absorption band
/// indices are not included: only the reduced counts are standardized, the
/// exact removal lists vary between distributed copies.
pub fn builtin_domain_specs() -> Vec<DomainSpec> {
    vec![
        spec(
            "indian_pines",
            200,
            224,
            &[
                "Corn-notill",
                "Corn-mintill",
                "Grass-pasture",
                "Hay-windrowed",
                "Soybean-notill",
                "Soybean-mintill",
                "Soybean-clean",
                "Woods",
            ],
        ),
        spec(
            "salinas",
            204,
            224,
            &[
                "Brocooli green weeds 1",
                "Brocooli green weeds 2",
                "Fallow",
                "Fallow rough plow",
                "Fallow smooth",
                "Stubble",
                "Celery",
                "Grapes untrained",
                "Soil vineyard develop",
                "Corn senesced green weeds",
                "Lettuce romaines, 4 wk",
                "Lettuce romaines, 5 wk",
                "Lettuce romaines, 6 wk",
                "Lettuce romaines, 7 wk",
                "Vineyard untrained",
                "Vineyard vertical trellis",
            ],
        ),
        spec(
            "pavia_university",
            103,
            103,
            &[
                "Asphalt",
                "Meadows",
                "Gravel",
                "Trees",
                "Sheets",
                "Bare soils",
                "Bitumen",
                "Bricks",
                "Shadows",
            ],
        ),
    ]
}
