//! Dataset manifests, score normalisation and the synthetic distortion corpus.

pub mod distort;
pub mod image;
pub mod manifest;
pub mod toy;

pub use distort::{synth_distort, DistortionKind};
pub use image::{stack_images, ImageTensor};
pub use manifest::{load_manifest, normalize_score, DatasetManifest, Domain, ImageRecord, NormalizedScore, ScoreType};
pub use toy::{build_toy_corpus, ToyCorpusSpec};
