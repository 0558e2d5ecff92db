//! Self-contained synthetic corpus: procedural reference images, their
//! distorted versions and pseudo-MOS labels.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::distort::{synth_distort, DistortionKind, MAX_LEVEL};
use super::image::ImageTensor;
use super::manifest::{DatasetManifest, Domain, ImageRecord, ScoreType};
use crate::error::{Error, Result};

/// Procedural RGB scene: gradient background, flat shapes and oriented
/// sinusoidal texture, so that every crop carries edges and fine detail.
/// The scene spans [0.17, 0.83] before texture; values stay inside (0, 1).
pub fn reference_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_1e_a1);
    let mut img = ImageTensor::filled(height, width, 0.0);
    let c0: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let c1: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let norm = (height.max(width)) as f32;
    for y in 0..height {
        for x in 0..width {
            let t = (0.5 + (dx * x as f32 + dy * y as f32) / (2.0 * norm)).clamp(0.0, 1.0);
            for c in 0..3 {
                img.set(c, y, x, c0[c] * (1.0 - t) + c1[c] * t);
            }
        }
    }

    let n_shapes = rng.random_range(3..6);
    for _ in 0..n_shapes {
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let cy = rng.random_range(0.0..height as f32);
        let cx = rng.random_range(0.0..width as f32);
        let ry = rng.random_range(0.08..0.3) * height as f32;
        let rx = rng.random_range(0.08..0.3) * width as f32;
        let disk = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
                let inside = if disk {
                    u * u + v * v <= 1.0
                } else {
                    u.abs() <= 1.0 && v.abs() <= 1.0
                };
                if inside {
                    for (c, &col) in color.iter().enumerate() {
                        img.set(c, y, x, col);
                    }
                }
            }
        }
    }

    // common dynamic range and texture energy across references
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let gain = 0.66 / (hi - lo).max(1e-6);
    img.data_mut().iter_mut().for_each(|v| *v = 0.17 + (*v - lo) * gain);

    for band in [0.03..0.07, 0.07..0.14, 0.14..0.25] {
        let freq = rng.random_range(band) * std::f32::consts::TAU;
        let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let amp = rng.random_range(0.045..0.055);
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..height {
            for x in 0..width {
                let s = amp * (freq * (ct * x as f32 + st * y as f32) + phase).sin();
                for (c, t) in tint.iter().enumerate() {
                    let v = img.get(c, y, x) + s * t;
                    img.set(c, y, x, v);
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusSpec {
    pub n_refs: usize,
    pub kinds: Vec<DistortionKind>,
    /// Levels 1..=levels are generated.
    pub levels: u32,
    pub seed: u64,
    pub size: usize,
    pub name: String,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            n_refs: 10,
            kinds: DistortionKind::ALL.to_vec(),
            levels: 3,
            seed: 0,
            size: 96,
            name: "toy".into(),
        }
    }
}

/// Pseudo-MOS on [0, 1]: 1 − level/(levels+1) plus a per-kind offset.
pub fn pseudo_mos(level: u32, levels: u32, kind_offset: f64) -> f64 {
    (1.0 - level as f64 / (levels as f64 + 1.0) + kind_offset).clamp(0.0, 1.0)
}

/// One offset per kind, at most a quarter level step in magnitude, drawn from
/// the corpus seed.
pub fn kind_offsets(kinds: &[DistortionKind], levels: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x0ff5e7);
    let step = 1.0 / (levels as f64 + 1.0);
    kinds.iter().map(|_| rng.random_range(-0.25..0.25) * step).collect()
}

fn distortion_seed(seed: u64, r: usize, kind: DistortionKind, level: u32) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add((r as u64) << 16)
        .wrapping_add((kind as u64) << 8)
        .wrapping_add(level as u64)
}

/// Builds the corpus in memory: (relative path, image) pairs plus the manifest
/// rooted at `root`.
pub fn toy_corpus_images(spec: &ToyCorpusSpec, root: &Path) -> Result<(DatasetManifest, Vec<(PathBuf, ImageTensor)>)> {
    if spec.n_refs < 2 {
        return Err(Error::InvalidArgument("toy corpus needs n_refs >= 2".into()));
    }
    if spec.kinds.is_empty() || !(1..=MAX_LEVEL).contains(&spec.levels) {
        return Err(Error::InvalidArgument(format!(
            "toy corpus needs at least one kind and 1..={MAX_LEVEL} levels"
        )));
    }
    let offsets = kind_offsets(&spec.kinds, spec.levels, spec.seed);
    let mut files = Vec::new();
    let mut records = Vec::new();
    let mut refs = Vec::new();
    for r in 0..spec.n_refs {
        let reference = reference_image(
            spec.size,
            spec.size,
            spec.seed.wrapping_mul(7919).wrapping_add(r as u64),
        );
        let ref_path = PathBuf::from(format!("refs/ref_{r:03}.png"));
        refs.push(ref_path.clone());
        for (k, &kind) in spec.kinds.iter().enumerate() {
            for level in 1..=spec.levels {
                let img = synth_distort(&reference, kind, level, distortion_seed(spec.seed, r, kind, level))?;
                let path = PathBuf::from(format!("images/ref_{r:03}/{}_l{level}.png", kind.name()));
                records.push(ImageRecord {
                    path: path.clone(),
                    raw_score: pseudo_mos(level, spec.levels, offsets[k]),
                    score_type: ScoreType::Mos,
                    score_range: (0.0, 1.0),
                    distortion_type: Some(kind.name().to_string()),
                    distortion_level: Some(level),
                    domain: Domain::Synthetic,
                });
                files.push((path, img));
            }
        }
        files.push((ref_path, reference));
    }
    let mut manifest = DatasetManifest::new(spec.name.clone(), root, records);
    manifest.reference_paths = Some(refs);
    Ok((manifest, files))
}

/// Writes the corpus under `out_dir` (PNG images plus `<name>.csv`) and
/// returns the manifest.
pub fn build_toy_corpus(spec: &ToyCorpusSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let (manifest, files) = toy_corpus_images(spec, out_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (path, img) in &files {
        img.save_png(&out_dir.join(path))?;
    }
    manifest.write(&out_dir.join(format!("{}.csv", spec.name)))?;
    Ok(manifest)
}
