//! Hyperspectral cube and label-map I/O, dataset descriptors, band
//! reduction, and a synthetic multi-domain scene generator.

pub mod cube;
pub mod domain;
pub mod synth;

pub use cube::{band_reduce, load_cube, load_labels, save_cube, save_labels, HyperCube, LabelMap};
pub use domain::{builtin_domain_specs, DomainSpec};
pub use synth::{default_synth_spec, synth_generate, SynthSpec};
