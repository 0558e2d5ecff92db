//! Attentional feature fusion (AFF) and the feature fusion module (FFM).
//!
//! AFF blends two equally shaped maps X and Y with sigmoid weights computed
//! from their sum:
//!
//!   w   = σ(local(X + Y) ⊕ global(GAP(X + Y)))
//!   out = w ⊗ X + (1 − w) ⊗ Y
//!
//! FFM first brings a high-frequency map to the quality map's resolution and
//! width (max-pool, point-wise conv, BN, PReLU) and then applies AFF with the
//! high-frequency map as X.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm2d, Builder, Conv2d, Mode, PRelu};

/// Default channel reduction inside the attention branches.
pub const DEFAULT_REDUCTION: usize = 4;

/// How two feature streams are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Aff,
    /// Plain element-wise addition.
    Add,
}

/// Point-wise conv → BN → point-wise conv → BN.
#[derive(Debug, Clone)]
struct Branch {
    squeeze: Conv2d,
    bn1: BatchNorm2d,
    expand: Conv2d,
    bn2: BatchNorm2d,
}

impl Branch {
    fn new(b: &mut Builder, channels: usize, reduction: usize) -> Result<Self> {
        let mid = channels / reduction;
        Ok(Self {
            squeeze: Conv2d::pointwise(&mut b.pp("squeeze"), channels, mid, true)?,
            bn1: BatchNorm2d::new(&mut b.pp("bn1"), mid)?,
            expand: Conv2d::pointwise(&mut b.pp("expand"), mid, channels, true)?,
            bn2: BatchNorm2d::new(&mut b.pp("bn2"), channels)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let x = self.bn1.forward(&self.squeeze.forward(x)?, mode)?;
        self.bn2.forward(&self.expand.forward(&x)?, mode)
    }
}

/// Local (per-pixel) and global (pooled) channel-attention branches.
#[derive(Debug, Clone)]
pub struct AffParams {
    channels: usize,
    local: Branch,
    global: Branch,
}

impl AffParams {
    pub fn new(b: &mut Builder, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "AFF channels {channels} not divisible by reduction {reduction}"
            )));
        }
        Ok(Self {
            channels,
            local: Branch::new(&mut b.pp("local"), channels, reduction)?,
            global: Branch::new(&mut b.pp("global"), channels, reduction)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Kernels of the four point-wise convolutions, local first.
    pub fn kernels(&self) -> [&Conv2d; 4] {
        [
            &self.local.squeeze,
            &self.local.expand,
            &self.global.squeeze,
            &self.global.expand,
        ]
    }
}

/// w = σ(local(F) ⊕ global(GAP(F))), same shape as `f_add`, entries in (0, 1).
pub fn compute_fusion_weights(f_add: &Tensor, params: &AffParams, mode: Mode) -> Result<Tensor> {
    let (_, c, _, _) = f_add.dims4()?;
    if c != params.channels {
        return Err(Error::Shape(format!(
            "fusion weights expect {} channels, got {c}",
            params.channels
        )));
    }
    let local = params.local.forward(f_add, mode)?;
    let pooled = f_add.mean_keepdim((2, 3))?;
    let global = params.global.forward(&pooled, mode)?;
    nn::sigmoid(&local.broadcast_add(&global)?)
}

/// w ⊗ X + (1 − w) ⊗ Y, evaluated as Y + w ⊗ (X − Y) so that one weight
/// tensor drives both terms and X = Y returns X exactly.
pub fn blend(x: &Tensor, y: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok((y + (w * (x - y)?)?)?)
}

/// Attentional fusion of two equally shaped maps; X receives weight w.
pub fn aff_fuse(x: &Tensor, y: &Tensor, params: &AffParams, mode: Mode) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!(
            "aff_fuse operands {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    let w = compute_fusion_weights(&(x + y)?, params, mode)?;
    blend(x, y, &w)
}

/// Max-pool → point-wise conv → BN → PReLU, taking a high-frequency map to a
/// quality map's resolution and channel count.
#[derive(Debug, Clone)]
pub struct FfmPreprocParams {
    conv: Conv2d,
    bn: BatchNorm2d,
    prelu: PRelu,
}

impl FfmPreprocParams {
    pub fn new(b: &mut Builder, hf_channels: usize, qf_channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::pointwise(&mut b.pp("conv"), hf_channels, qf_channels, false)?,
            bn: BatchNorm2d::new(&mut b.pp("bn"), qf_channels)?,
            prelu: PRelu::new(&mut b.pp("prelu"), qf_channels)?,
        })
    }
}

/// Max pooling with kernel = stride = the integer ratio between `x` and
/// `target_hw`.
pub fn max_pool_to(x: &Tensor, (th, tw): (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 || h / th != w / tw {
        return Err(Error::Shape(format!(
            "cannot max-pool {h}x{w} to {th}x{tw} with an integer factor"
        )));
    }
    let k = h / th;
    Ok(if k == 1 { x.clone() } else { x.max_pool2d(k)? })
}

pub fn ffm_preprocess(hf: &Tensor, params: &FfmPreprocParams, target_hw: (usize, usize), mode: Mode) -> Result<Tensor> {
    let pooled = max_pool_to(hf, target_hw)?;
    let x = params.bn.forward(&params.conv.forward(&pooled)?, mode)?;
    params.prelu.forward(&x)
}

/// Injects high-frequency features into quality features.
#[derive(Debug, Clone)]
pub struct Ffm {
    pub pre: FfmPreprocParams,
    pub aff: AffParams,
    pub mode: FusionMode,
}

impl Ffm {
    pub fn new(
        b: &mut Builder,
        hf_channels: usize,
        qf_channels: usize,
        reduction: usize,
        mode: FusionMode,
    ) -> Result<Self> {
        Ok(Self {
            pre: FfmPreprocParams::new(&mut b.pp("pre"), hf_channels, qf_channels)?,
            aff: AffParams::new(&mut b.pp("aff"), qf_channels, reduction)?,
            mode,
        })
    }

    pub fn forward(&self, hf: &Tensor, qf: &Tensor, mode: Mode) -> Result<Tensor> {
        ffm(hf, qf, &self.pre, &self.aff, self.mode, mode)
    }
}

/// aff_fuse(ffm_preprocess(hf), qf), or a plain sum under [`FusionMode::Add`].
pub fn ffm(
    hf: &Tensor,
    qf: &Tensor,
    pre: &FfmPreprocParams,
    aff: &AffParams,
    fusion: FusionMode,
    mode: Mode,
) -> Result<Tensor> {
    let (_, _, h, w) = qf.dims4()?;
    let x = ffm_preprocess(hf, pre, (h, w), mode)?;
    if x.dims() != qf.dims() {
        return Err(Error::Shape(format!(
            "preprocessed high-frequency map {:?} vs quality map {:?}",
            x.dims(),
            qf.dims()
        )));
    }
    match fusion {
        FusionMode::Aff => aff_fuse(&x, qf, aff, mode),
        FusionMode::Add => Ok((x + qf)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, ParamStore};
    use candle_core::{DType, Device};

    fn aff(c: usize, seed: u64) -> (ParamStore, AffParams) {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = init_rng(seed);
        let p = AffParams::new(&mut Builder::new(&mut store, &mut rng), c, DEFAULT_REDUCTION).unwrap();
        (store, p)
    }

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = init_rng(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn zero_input_gives_half_weights() {
        let (_s, p) = aff(8, 0);
        let z = Tensor::zeros((2, 8, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let w = compute_fusion_weights(&z, &p, Mode::Eval).unwrap();
        let v = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn weights_lie_in_open_unit_interval() {
        let (_s, p) = aff(8, 1);
        let w = compute_fusion_weights(&randn((2, 8, 5, 5), 3), &p, Mode::Train).unwrap();
        let v = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn equal_operands_pass_through() {
        let (_s, p) = aff(4, 2);
        let x = randn((1, 4, 3, 3), 5);
        let out = aff_fuse(&x, &x, &p, Mode::Train).unwrap();
        assert_eq!(
            out.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn ones_and_zeros_fuse_strictly_inside() {
        let (_s, p) = aff(4, 2);
        let one = Tensor::ones((1, 4, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let zero = one.zeros_like().unwrap();
        let out = aff_fuse(&one, &zero, &p, Mode::Eval).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn shape_errors() {
        let (_s, p) = aff(4, 0);
        let a = Tensor::zeros((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 4, 4, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(aff_fuse(&a, &b, &p, Mode::Eval).is_err());
        let c = Tensor::zeros((1, 8, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(compute_fusion_weights(&c, &p, Mode::Eval).is_err());
        assert!(max_pool_to(&a, (3, 3)).is_err());
        let mut store = ParamStore::new(DType::F64);
        let mut rng = init_rng(0);
        assert!(AffParams::new(&mut Builder::new(&mut store, &mut rng), 6, 4).is_err());
    }

    #[test]
    fn max_pool_properties() {
        let c = Tensor::full(0.3f64, (1, 2, 8, 8), &Device::Cpu).unwrap();
        let p = max_pool_to(&c, (4, 4)).unwrap();
        assert!(p
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .iter()
            .all(|&v| v == 0.3));
        let x = randn((1, 2, 8, 8), 9);
        let p = max_pool_to(&x, (2, 2)).unwrap();
        for c in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let m = p
                        .get(0)
                        .unwrap()
                        .get(c)
                        .unwrap()
                        .get(oy)
                        .unwrap()
                        .get(ox)
                        .unwrap()
                        .to_scalar::<f64>()
                        .unwrap();
                    for y in 0..4 {
                        for xx in 0..4 {
                            let v = x
                                .get(0)
                                .unwrap()
                                .get(c)
                                .unwrap()
                                .get(oy * 4 + y)
                                .unwrap()
                                .get(ox * 4 + xx)
                                .unwrap()
                                .to_scalar::<f64>()
                                .unwrap();
                            assert!(m >= v);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn ffm_shape_trace_and_identity() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = init_rng(4);
        let ffm_p = Ffm::new(&mut Builder::new(&mut store, &mut rng), 8, 64, 4, FusionMode::Aff).unwrap();
        let hf = randn((1, 8, 56, 56), 1);
        let qf = randn((1, 64, 28, 28), 2);
        let out = ffm_p.forward(&hf, &qf, Mode::Eval).unwrap();
        assert_eq!(out.dims(), &[1, 64, 28, 28]);

        let pre = ffm_preprocess(&hf, &ffm_p.pre, (28, 28), Mode::Eval).unwrap();
        let same = aff_fuse(&pre, &pre, &ffm_p.aff, Mode::Eval).unwrap();
        let out2 = ffm(&hf, &pre, &ffm_p.pre, &ffm_p.aff, FusionMode::Aff, Mode::Eval).unwrap();
        assert_eq!(
            same.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            out2.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let again = ffm_p.forward(&hf, &qf, Mode::Eval).unwrap();
        assert_eq!(
            out.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            again.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }
}
