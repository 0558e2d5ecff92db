//! Synthetic distortions with five severity levels.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use crate::error::{Error, Result};

pub const MAX_LEVEL: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    GaussianBlur,
    WhiteNoise,
    JpegLike,
    ContrastChange,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 4] = [
        DistortionKind::GaussianBlur,
        DistortionKind::WhiteNoise,
        DistortionKind::JpegLike,
        DistortionKind::ContrastChange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::GaussianBlur => "gaussian_blur",
            DistortionKind::WhiteNoise => "white_noise",
            DistortionKind::JpegLike => "jpeg_like",
            DistortionKind::ContrastChange => "contrast_change",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown distortion kind {s:?}")))
    }
}

const BLUR_SIGMA: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
const NOISE_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.16, 0.2];
const JPEG_SCALE: [f64; 5] = [2.0, 6.0, 12.0, 20.0, 30.0];
const CONTRAST_GAIN: [f64; 5] = [0.7, 0.5, 0.35, 0.25, 0.18];

/// Standard JPEG luminance quantisation table.
const JPEG_LUMA: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Applies `kind` at `level` (1..=5). Output is clipped to [0, 1] and depends
/// only on the arguments.
pub fn synth_distort(image: &ImageTensor, kind: DistortionKind, level: u32, seed: u64) -> Result<ImageTensor> {
    if !(1..=MAX_LEVEL).contains(&level) {
        return Err(Error::InvalidArgument(format!(
            "distortion level {level} outside 1..={MAX_LEVEL}"
        )));
    }
    let li = (level - 1) as usize;
    let mut out = match kind {
        DistortionKind::GaussianBlur => gaussian_blur(image, BLUR_SIGMA[li]),
        DistortionKind::WhiteNoise => white_noise(image, NOISE_SIGMA[li], seed),
        DistortionKind::JpegLike => block_dct_quantize(image, JPEG_SCALE[li]),
        DistortionKind::ContrastChange => contrast(image, CONTRAST_GAIN[li]),
    };
    out.clamp_unit();
    Ok(out)
}

/// Normalised 1-D Gaussian taps, radius ceil(3σ).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable blur with periodic boundaries, so every pixel keeps total
/// weight one and the image mean is unchanged.
fn gaussian_blur(image: &ImageTensor, sigma: f64) -> ImageTensor {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (image.height(), image.width());
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let mut out = image.clone();
    for c in 0..ImageTensor::CHANNELS {
        let src = image.plane(c);
        let mut tmp = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * src[y * w + wrap(x as isize + i as isize - r, w)] as f64)
                    .sum();
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[wrap(y as isize + i as isize - r, h) * w + x])
                    .sum::<f64>() as f32;
            }
        }
    }
    out
}

fn white_noise(image: &ImageTensor, sigma: f64, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for v in out.data_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += (sigma * n) as f32;
    }
    out
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let a = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    b
}

/// 8×8 block orthonormal DCT, uniform quantisation with the JPEG luminance
/// table scaled by `scale`, inverse DCT. Partial edge blocks are padded by
/// edge replication.
fn block_dct_quantize(image: &ImageTensor, scale: f64) -> ImageTensor {
    let basis = dct_basis();
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for c in 0..ImageTensor::CHANNELS {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0f64; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + x).min(w - 1);
                        *v = src[sy * w + sx] as f64 - 0.5;
                    }
                }
                let mut coef = [[0.0f64; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                acc += basis[u][y] * basis[v][x] * block[y][x];
                            }
                        }
                        let q = JPEG_LUMA[u * 8 + v] / 255.0 * scale;
                        coef[u][v] = (acc / q).round() * q;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        if by + y >= h || bx + x >= w {
                            continue;
                        }
                        let mut acc = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                acc += basis[u][y] * basis[v][x] * coef[u][v];
                            }
                        }
                        dst[(by + y) * w + bx + x] = (acc + 0.5) as f32;
                    }
                }
            }
        }
    }
    out
}

/// Pulls every channel toward its mean by `gain`.
fn contrast(image: &ImageTensor, gain: f64) -> ImageTensor {
    let mut out = image.clone();
    let n = image.height() * image.width();
    for c in 0..ImageTensor::CHANNELS {
        let mean = image.plane(c).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        for v in out.plane_mut(c) {
            *v = (mean + (*v as f64 - mean) * gain) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy::reference_image;

    fn test_image() -> ImageTensor {
        reference_image(48, 48, 2024)
    }

    /// Straight 2-D convolution with the outer product of the 1-D taps and
    /// periodic indexing.
    fn blur_oracle(image: &ImageTensor, sigma: f64) -> ImageTensor {
        let k = gaussian_kernel(sigma);
        let r = (k.len() / 2) as isize;
        let (h, w) = (image.height() as isize, image.width() as isize);
        let mut out = image.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, ki) in k.iter().enumerate() {
                        for (j, kj) in k.iter().enumerate() {
                            let sy = (y + i as isize - r).rem_euclid(h) as usize;
                            let sx = (x + j as isize - r).rem_euclid(w) as usize;
                            acc += ki * kj * image.get(c, sy, sx) as f64;
                        }
                    }
                    out.set(c, y as usize, x as usize, acc as f32);
                }
            }
        }
        out
    }

    #[test]
    fn white_noise_is_deterministic() {
        let img = test_image();
        let a = synth_distort(&img, DistortionKind::WhiteNoise, 1, 7).unwrap();
        let b = synth_distort(&img, DistortionKind::WhiteNoise, 1, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_distort(&img, DistortionKind::WhiteNoise, 1, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn blur_matches_oracle_and_preserves_mean() {
        let img = test_image();
        for level in 1..=MAX_LEVEL {
            let out = synth_distort(&img, DistortionKind::GaussianBlur, level, 0).unwrap();
            let oracle = blur_oracle(&img, BLUR_SIGMA[level as usize - 1]);
            assert!(out.mse(&oracle).unwrap() < 1e-12, "level {level}");
            assert!((out.mean() - img.mean()).abs() < 1e-3, "level {level}");
        }
    }

    #[test]
    fn invalid_level_and_kind() {
        let img = test_image();
        assert!(synth_distort(&img, DistortionKind::JpegLike, 0, 0).is_err());
        assert!(synth_distort(&img, DistortionKind::JpegLike, 6, 0).is_err());
        assert!("posterize".parse::<DistortionKind>().is_err());
        assert_eq!("jpeg_like".parse::<DistortionKind>().unwrap(), DistortionKind::JpegLike);
    }

    #[test]
    fn output_stays_in_unit_range() {
        let img = test_image();
        for kind in DistortionKind::ALL {
            let out = synth_distort(&img, kind, MAX_LEVEL, 3).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!((out.height(), out.width()), (img.height(), img.width()));
        }
    }

    /// MSE ladder of the 48×48 reference with seed 2024, frozen when the
    /// distortion parameters were fixed.
    const MSE_LADDER: [(DistortionKind, [f64; 5]); 4] = [
        (
            DistortionKind::GaussianBlur,
            [
                0.0016586462898644603,
                0.004271152016171073,
                0.006684663597846951,
                0.009010496468907512,
                0.011225432996267978,
            ],
        ),
        (
            DistortionKind::WhiteNoise,
            [
                0.0015468307509092932,
                0.006150359223915399,
                0.013402278240408383,
                0.022701321060680717,
                0.03349326976243711,
            ],
        ),
        (
            DistortionKind::JpegLike,
            [
                0.0007865098962188976,
                0.002079602893381598,
                0.0038658007584036346,
                0.007259607912002691,
                0.010088629545972628,
            ],
        ),
        (
            DistortionKind::ContrastChange,
            [
                0.0020067939608867484,
                0.005574427296436068,
                0.009420782668121621,
                0.01254246222977011,
                0.014992980518136247,
            ],
        ),
    ];

    fn ladder(img: &ImageTensor, kind: DistortionKind, seed: u64) -> Vec<f64> {
        (1..=MAX_LEVEL)
            .map(|l| img.mse(&synth_distort(img, kind, l, seed).unwrap()).unwrap())
            .collect()
    }

    #[test]
    fn mse_ladder_regression() {
        let img = test_image();
        for (kind, want) in &MSE_LADDER {
            let got = ladder(&img, *kind, 99);
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() <= 1e-6 * w.max(1e-3), "{kind}: {got:?}");
            }
        }
    }

    #[test]
    fn mse_strictly_increases_with_level_on_ten_seeds() {
        for seed in 0..10u64 {
            let img = reference_image(40, 56, seed);
            for kind in DistortionKind::ALL {
                let l = ladder(&img, kind, seed);
                assert!(l.windows(2).all(|p| p[1] > p[0]), "{kind} seed {seed}: {l:?}");
            }
        }
    }
}
