//! High-frequency extraction network.
//!
//! A vanilla convolution stem followed by three octave-convolution modules.
//! Each module exchanges information between a full-resolution high-frequency
//! branch and a half-resolution low-frequency branch; the high branch outputs
//! g₁, g₂, g₃ guide the quality backbone and the final low branch is dropped.
//!
//! All feature maps are (B, C, H, W) tensors.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Builder, Conv2d, ConvGeometry, Mode};

/// 2×2 average pooling, stride 2.
pub fn downsample_avg2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "downsample_avg2 needs even spatial dims, got {h}x{w}"
        )));
    }
    Ok(x.avg_pool2d(2)?)
}

/// Nearest-neighbour ×2 upsampling: every cell becomes a 2×2 block.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
}

/// High-frequency map and its half-resolution low-frequency companion.
#[derive(Debug, Clone)]
pub struct OctavePair {
    pub high: Tensor,
    pub low: Tensor,
}

impl OctavePair {
    pub fn new(high: Tensor, low: Tensor) -> Result<Self> {
        let (bh, _, h, w) = high.dims4()?;
        let (bl, _, lh, lw) = low.dims4()?;
        if bh != bl {
            return Err(Error::Shape(format!("octave pair batch {bh} vs {bl}")));
        }
        if h % 2 != 0 || w % 2 != 0 || lh * 2 != h || lw * 2 != w {
            return Err(Error::Shape(format!(
                "octave pair needs even high dims and a half-size low branch, got {h}x{w} / {lh}x{lw}"
            )));
        }
        Ok(Self { high, low })
    }

    pub fn high_channels(&self) -> usize {
        self.high.dims()[1]
    }

    pub fn low_channels(&self) -> usize {
        self.low.dims()[1]
    }
}

/// The four exchange kernels plus one bias per output branch.
#[derive(Debug, Clone)]
pub struct OctaveWeights {
    pub high_to_high: Conv2d,
    pub high_to_low: Conv2d,
    pub low_to_high: Conv2d,
    pub low_to_low: Conv2d,
    pub high_bias: Var,
    pub low_bias: Var,
}

impl OctaveWeights {
    pub fn new(
        b: &mut Builder,
        (high_in, low_in): (usize, usize),
        (high_out, low_out): (usize, usize),
        kernel: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("octave kernel {kernel} must be odd")));
        }
        let g = ConvGeometry::same(kernel, 1);
        let fan_in = (high_in + low_in) * kernel * kernel;
        // one fan-in for all four paths: each output sums over both input branches
        let mut conv = |name: &str, cin: usize, cout: usize| -> Result<Conv2d> {
            let weight = b
                .pp(name)
                .fan_in_uniform("weight", &[cout, cin, kernel, kernel], fan_in)?;
            Ok(Conv2d {
                weight,
                bias: None,
                geometry: g,
            })
        };
        let high_to_high = conv("hh", high_in, high_out)?;
        let high_to_low = conv("hl", high_in, low_out)?;
        let low_to_high = conv("lh", low_in, high_out)?;
        let low_to_low = conv("ll", low_in, low_out)?;
        Ok(Self {
            high_to_high,
            high_to_low,
            low_to_high,
            low_to_low,
            high_bias: b.constant("high_bias", &[high_out], 0.0)?,
            low_bias: b.constant("low_bias", &[low_out], 0.0)?,
        })
    }

    fn check(&self, pair: &OctavePair) -> Result<()> {
        let cin = |c: &Conv2d| c.weight.dims()[1];
        let (ch, cl) = (pair.high_channels(), pair.low_channels());
        if cin(&self.high_to_high) != ch
            || cin(&self.high_to_low) != ch
            || cin(&self.low_to_high) != cl
            || cin(&self.low_to_low) != cl
        {
            return Err(Error::Shape(format!(
                "octave weights do not accept a ({ch}, {cl})-channel pair"
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> (usize, usize) {
        (self.high_to_high.out_channels(), self.low_to_low.out_channels())
    }

    pub fn kernels(&self) -> [&Conv2d; 4] {
        [
            &self.high_to_high,
            &self.high_to_low,
            &self.low_to_high,
            &self.low_to_low,
        ]
    }
}

/// One octave convolution:
///
/// high' = f(high; W_HH) + up(f(low; W_LH), 2)
/// low'  = f(low; W_LL) + f(down(high, 2); W_HL)
///
/// "Same" padding and stride 1, so spatial sizes are preserved.
pub fn octave_forward(pair: &OctavePair, w: &OctaveWeights) -> Result<OctavePair> {
    w.check(pair)?;
    let hh = w.high_to_high.forward(&pair.high)?;
    let lh = upsample_nearest2(&w.low_to_high.forward(&pair.low)?)?;
    let high = (hh + lh)?.broadcast_add(&w.high_bias.reshape((1, (), 1, 1))?)?;
    let ll = w.low_to_low.forward(&pair.low)?;
    let hl = w.high_to_low.forward(&downsample_avg2(&pair.high)?)?;
    let low = (ll + hl)?.broadcast_add(&w.low_bias.reshape((1, (), 1, 1))?)?;
    OctavePair::new(high, low)
}

/// Which convolution the three extraction modules use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HfConv {
    #[default]
    Octave,
    /// Single-path convolution with the same parameter count.
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HfenConfig {
    /// Total channels across both frequency branches.
    pub channels: usize,
    /// Fraction of channels assigned to the low-frequency branch.
    pub alpha: f64,
    pub kernel: usize,
    pub conv: HfConv,
}

impl Default for HfenConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            alpha: 0.5,
            kernel: 3,
            conv: HfConv::Octave,
        }
    }
}

impl HfenConfig {
    pub fn split(&self) -> (usize, usize) {
        let low = ((self.channels as f64) * self.alpha).round() as usize;
        (self.channels - low, low)
    }

    /// Channel count of g₁..g₃.
    pub fn out_channels(&self) -> usize {
        match self.conv {
            HfConv::Octave => self.split().0,
            HfConv::Vanilla => self.channels,
        }
    }
}

#[derive(Debug, Clone)]
struct OctaveModule {
    weights: OctaveWeights,
    bn_high: BatchNorm2d,
    bn_low: BatchNorm2d,
}

#[derive(Debug, Clone)]
struct VanillaModule {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
enum Body {
    Octave {
        split_high: Conv2d,
        split_low: Conv2d,
        modules: Vec<OctaveModule>,
    },
    Vanilla {
        mix: Conv2d,
        modules: Vec<VanillaModule>,
    },
}

#[derive(Debug, Clone)]
pub struct Hfen {
    config: HfenConfig,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    body: Body,
}

impl Hfen {
    pub const MODULES: usize = 3;

    /// `in_channels` is the channel count of F₁.
    pub fn new(b: &mut Builder, in_channels: usize, config: &HfenConfig) -> Result<Self> {
        let c = config.channels;
        let (ch, cl) = config.split();
        if ch == 0 || cl == 0 {
            return Err(Error::InvalidArgument(format!(
                "alpha {} leaves an empty frequency branch of {c} channels",
                config.alpha
            )));
        }
        let k = config.kernel;
        let stem = Conv2d::new(&mut b.pp("stem"), in_channels, c, 3, ConvGeometry::same(3, 1), false)?;
        let stem_bn = BatchNorm2d::new(&mut b.pp("stem_bn"), c)?;
        let body = match config.conv {
            HfConv::Octave => {
                let split_high = Conv2d::pointwise(&mut b.pp("split_high"), c, ch, false)?;
                let split_low = Conv2d::pointwise(&mut b.pp("split_low"), c, cl, false)?;
                let modules = (0..Self::MODULES)
                    .map(|i| {
                        let mut mb = b.pp(format!("module{}", i + 1));
                        Ok(OctaveModule {
                            weights: OctaveWeights::new(&mut mb.pp("oct"), (ch, cl), (ch, cl), k)?,
                            bn_high: BatchNorm2d::new(&mut mb.pp("bn_high"), ch)?,
                            bn_low: BatchNorm2d::new(&mut mb.pp("bn_low"), cl)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Body::Octave {
                    split_high,
                    split_low,
                    modules,
                }
            }
            HfConv::Vanilla => {
                let mix = Conv2d::pointwise(&mut b.pp("mix"), c, c, false)?;
                let modules = (0..Self::MODULES)
                    .map(|i| {
                        let mut mb = b.pp(format!("module{}", i + 1));
                        Ok(VanillaModule {
                            conv: Conv2d::new(&mut mb.pp("conv"), c, c, k, ConvGeometry::same(k, 1), true)?,
                            bn: BatchNorm2d::new(&mut mb.pp("bn"), c)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                Body::Vanilla { mix, modules }
            }
        };
        Ok(Self {
            config: config.clone(),
            stem,
            stem_bn,
            body,
        })
    }

    pub fn config(&self) -> &HfenConfig {
        &self.config
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    /// F₁ → (g₁, g₂, g₃) at F₁'s scale, /2 and /4.
    pub fn forward(&self, f1: &Tensor, mode: Mode) -> Result<[Tensor; 3]> {
        let (_, _, h, w) = f1.dims4()?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!(
                "high-frequency branch needs F1 dims divisible by 8, got {h}x{w}"
            )));
        }
        let x = self.stem_bn.forward(&self.stem.forward(f1)?, mode)?.relu()?;
        let mut outs = Vec::with_capacity(Self::MODULES);
        match &self.body {
            Body::Octave {
                split_high,
                split_low,
                modules,
            } => {
                let mut pair = OctavePair::new(split_high.forward(&x)?, downsample_avg2(&split_low.forward(&x)?)?)?;
                for (i, m) in modules.iter().enumerate() {
                    if i > 0 {
                        pair = OctavePair::new(downsample_avg2(&pair.high)?, downsample_avg2(&pair.low)?)?;
                    }
                    let out = octave_forward(&pair, &m.weights)?;
                    let high = m.bn_high.forward(&out.high, mode)?.relu()?;
                    outs.push(high.clone());
                    if i + 1 < modules.len() {
                        let low = m.bn_low.forward(&out.low, mode)?.relu()?;
                        pair = OctavePair::new(high, low)?;
                    }
                }
            }
            Body::Vanilla { mix, modules } => {
                let mut x = mix.forward(&x)?;
                for (i, m) in modules.iter().enumerate() {
                    if i > 0 {
                        x = downsample_avg2(&x)?;
                    }
                    x = m.bn.forward(&m.conv.forward(&x)?, mode)?.relu()?;
                    outs.push(x.clone());
                }
            }
        }
        let [g1, g2, g3]: [Tensor; 3] = outs.try_into().expect("three modules");
        Ok([g1, g2, g3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, ParamStore};
    use candle_core::{DType, Device};

    fn t(data: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_slice(data, shape, &Device::Cpu).unwrap()
    }

    fn vals(x: &Tensor) -> Vec<f64> {
        x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn downsample_block_mean() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2));
        assert_eq!(vals(&downsample_avg2(&x).unwrap()), vec![2.5]);
        let c = Tensor::full(0.7f64, (1, 3, 4, 6), &Device::Cpu).unwrap();
        let d = downsample_avg2(&c).unwrap();
        assert_eq!(d.dims(), &[1, 3, 2, 3]);
        assert!(vals(&d).iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(downsample_avg2(&Tensor::zeros((1, 1, 3, 4), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn upsample_replicates() {
        let x = t(&[5.0], (1, 1, 1, 1));
        assert_eq!(vals(&upsample_nearest2(&x).unwrap()), vec![5.0; 4]);
        let y = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], (1, 1, 2, 3));
        let up = upsample_nearest2(&y).unwrap();
        let mut got = vals(&up);
        got.sort_by(f64::total_cmp);
        let mut want: Vec<f64> = vals(&y).into_iter().flat_map(|v| [v; 4]).collect();
        want.sort_by(f64::total_cmp);
        assert_eq!(got, want);
        assert_eq!(vals(&downsample_avg2(&up).unwrap()), vals(&y));
    }

    #[test]
    fn octave_pair_rejects_bad_ratio() {
        let z = |h, w| Tensor::zeros((1, 2, h, w), DType::F64, &Device::Cpu).unwrap();
        assert!(OctavePair::new(z(8, 8), z(4, 4)).is_ok());
        assert!(OctavePair::new(z(8, 8), z(8, 8)).is_err());
        assert!(OctavePair::new(z(7, 8), z(3, 4)).is_err());
    }

    #[test]
    fn octave_weight_shape_mismatch() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = init_rng(0);
        let w = OctaveWeights::new(&mut Builder::new(&mut store, &mut rng), (2, 2), (2, 2), 3).unwrap();
        let pair = OctavePair::new(
            Tensor::zeros((1, 3, 8, 8), DType::F64, &Device::Cpu).unwrap(),
            Tensor::zeros((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap(),
        )
        .unwrap();
        assert!(matches!(octave_forward(&pair, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn vanilla_matches_octave_parameter_count() {
        let cfg = HfenConfig::default();
        let count = |conv| {
            let mut store = ParamStore::new(DType::F32);
            let mut rng = init_rng(0);
            Hfen::new(
                &mut Builder::new(&mut store, &mut rng),
                8,
                &HfenConfig { conv, ..cfg.clone() },
            )
            .unwrap();
            store.num_params()
        };
        assert_eq!(count(HfConv::Octave), count(HfConv::Vanilla));
    }

    #[test]
    fn hfen_rejects_indivisible_input() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = init_rng(0);
        let h = Hfen::new(&mut Builder::new(&mut store, &mut rng), 4, &HfenConfig::default()).unwrap();
        let x = Tensor::zeros((1, 4, 12, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(h.forward(&x, Mode::Eval).is_err());
    }
}
