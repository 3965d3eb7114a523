//! Experiment configuration: which datasets participate, how to train,
//! where outputs go. All paths are resolved relative to the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use xdcnn_core::error::{Error, Result};
use xdcnn_core::hsdata::{band_reduce, load_cube, load_labels, DomainSpec, HyperCube, LabelMap};
use xdcnn_core::traineval::TrainConfig;

/// One dataset. `band_keep_path` points at a JSON index list for cubes that
/// arrive with their noisy bands still present.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainEntry {
    pub name: String,
    pub cube_path: String,
    pub labels_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_keep_path: Option<String>,
    pub per_class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub domains: Vec<DomainEntry>,
    /// Missing fields fall back to the standard recipe, so `"train": {}`
    /// is a complete schedule.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn default_output_dir() -> String {
    ".".into()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Invalid("config needs at least one domain".into()));
        }
        for d in &self.domains {
            if d.per_class == 0 {
                return Err(Error::Invalid(format!(
                    "domain {}: per_class must be positive",
                    d.name
                )));
            }
        }
        self.train.validate()
    }
}

/// A config domain with its data loaded and band-reduced.
pub struct LoadedDomain {
    pub spec: DomainSpec,
    pub cube: HyperCube,
    pub labels: LabelMap,
    pub per_class: usize,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub domains: Vec<LoadedDomain>,
    pub output_dir: PathBuf,
}

pub fn load_experiment(path: &Path) -> Result<Experiment> {
    let config: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
    config.validate()?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut domains = Vec::new();
    for entry in &config.domains {
        let cube = load_cube(&base.join(&entry.cube_path))?;
        let (labels, class_names) = load_labels(&base.join(&entry.labels_path))?;
        if (labels.width(), labels.height()) != (cube.width(), cube.height()) {
            return Err(Error::Shape(format!(
                "domain {}: labels are {}x{} but the cube is {}x{}",
                entry.name,
                labels.width(),
                labels.height(),
                cube.width(),
                cube.height()
            )));
        }
        let bands_raw = cube.bands();
        let (cube, band_keep) = match &entry.band_keep_path {
            Some(p) => {
                let keep: Vec<usize> = serde_json::from_str(&fs::read_to_string(base.join(p))?)?;
                (band_reduce(&cube, &keep)?, keep)
            }
            None => (cube, Vec::new()),
        };
        let spec = DomainSpec {
            name: entry.name.clone(),
            bands: cube.bands(),
            bands_raw,
            band_keep,
            class_names,
        };
        spec.validate()?;
        domains.push(LoadedDomain {
            spec,
            cube,
            labels,
            per_class: entry.per_class,
        });
    }
    let output_dir = base.join(&config.output_dir);
    Ok(Experiment {
        config,
        domains,
        output_dir,
    })
}
