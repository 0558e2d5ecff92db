//! Quality estimation network.
//!
//! Four VAN-style stages f₁..f₄ built from large-kernel attention. The stage
//! outputs are refined by high-frequency guidance,
//!
//!   F₁ = f₁(I),  (g₁, g₂, g₃) = HFEN(F₁),  F_{i+1} = FFM(g_i, f_{i+1}(F_i)),
//!
//! then fused with the distortion embedding and regressed by an MLP head.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{aff_fuse, AffParams, Ffm, FusionMode, DEFAULT_REDUCTION};
use crate::nn::{self, BatchNorm2d, Builder, Conv2d, ConvGeometry, Linear, Mode};
use crate::octave::{Hfen, HfenConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    pub mlp_ratio: usize,
    /// Depth-wise kernel of the attention.
    pub dw_kernel: usize,
    /// Dilated depth-wise kernel and its dilation.
    pub dilated_kernel: usize,
    pub dilation: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 160, 256],
            depths: [1, 1, 1, 1],
            mlp_ratio: 2,
            dw_kernel: 5,
            dilated_kernel: 7,
            dilation: 3,
        }
    }
}

impl BackboneConfig {
    /// Total downsampling from the image to F₄.
    pub const STRIDE: usize = 32;

    /// Spatial size after stage `i` (1-based) for a square input.
    pub fn stage_size(input: usize, i: usize) -> usize {
        input / (4 << (i - 1))
    }
}

/// attn = pw(dilated_dw(dw(x))); out = x ⊗ attn.
#[derive(Debug, Clone)]
pub struct LargeKernelAttention {
    pub dw: Conv2d,
    pub dw_dilated: Conv2d,
    pub pw: Conv2d,
}

impl LargeKernelAttention {
    pub fn new(b: &mut Builder, c: usize, cfg: &BackboneConfig) -> Result<Self> {
        let dw_geom = ConvGeometry {
            groups: c,
            ..ConvGeometry::same(cfg.dw_kernel, 1)
        };
        let dil_geom = ConvGeometry {
            groups: c,
            ..ConvGeometry::same(cfg.dilated_kernel, cfg.dilation)
        };
        Ok(Self {
            dw: Conv2d::new(&mut b.pp("dw"), c, c, cfg.dw_kernel, dw_geom, true)?,
            dw_dilated: Conv2d::new(&mut b.pp("dw_dilated"), c, c, cfg.dilated_kernel, dil_geom, true)?,
            pw: Conv2d::new(&mut b.pp("pw"), c, c, 1, ConvGeometry::default(), true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let attn = self.pw.forward(&self.dw_dilated.forward(&self.dw.forward(x)?)?)?;
        Ok((x * attn)?)
    }
}

/// x + proj_out(LKA(GELU(proj_in(BN(x))))).
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub bn: BatchNorm2d,
    pub proj_in: Conv2d,
    pub lka: LargeKernelAttention,
    pub proj_out: Conv2d,
}

impl AttentionBlock {
    pub fn new(b: &mut Builder, c: usize, cfg: &BackboneConfig) -> Result<Self> {
        Ok(Self {
            bn: BatchNorm2d::new(&mut b.pp("bn"), c)?,
            proj_in: Conv2d::new(&mut b.pp("proj_in"), c, c, 1, ConvGeometry::default(), true)?,
            lka: LargeKernelAttention::new(&mut b.pp("lka"), c, cfg)?,
            proj_out: Conv2d::new(&mut b.pp("proj_out"), c, c, 1, ConvGeometry::default(), true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.proj_in.forward(&self.bn.forward(x, mode)?)?;
        let h = self.proj_out.forward(&self.lka.forward(&nn::gelu(&h)?)?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct MlpBlock {
    bn: BatchNorm2d,
    fc1: Conv2d,
    fc2: Conv2d,
}

impl MlpBlock {
    fn new(b: &mut Builder, c: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            bn: BatchNorm2d::new(&mut b.pp("bn"), c)?,
            fc1: Conv2d::new(&mut b.pp("fc1"), c, c * ratio, 1, ConvGeometry::default(), true)?,
            fc2: Conv2d::new(&mut b.pp("fc2"), c * ratio, c, 1, ConvGeometry::default(), true)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.fc1.forward(&self.bn.forward(x, mode)?)?;
        Ok((x + self.fc2.forward(&nn::gelu(&h)?)?)?)
    }
}

/// Patch embedding (×4 reduction for stage 1, ×2 after) followed by
/// attention/MLP blocks.
#[derive(Debug, Clone)]
pub struct Stage {
    index: usize,
    embed: Conv2d,
    embed_bn: BatchNorm2d,
    blocks: Vec<(AttentionBlock, MlpBlock)>,
}

impl Stage {
    /// `index` is 1-based.
    pub fn new(b: &mut Builder, index: usize, cin: usize, cfg: &BackboneConfig) -> Result<Self> {
        let c = cfg.channels[index - 1];
        let (k, geom) = if index == 1 {
            (
                7,
                ConvGeometry {
                    stride: 4,
                    padding: 3,
                    ..Default::default()
                },
            )
        } else {
            (
                3,
                ConvGeometry {
                    stride: 2,
                    padding: 1,
                    ..Default::default()
                },
            )
        };
        let embed = Conv2d::new(&mut b.pp("embed"), cin, c, k, geom, true)?;
        let embed_bn = BatchNorm2d::new(&mut b.pp("embed_bn"), c)?;
        let blocks = (0..cfg.depths[index - 1])
            .map(|j| {
                let mut bb = b.pp(format!("block{j}"));
                Ok((
                    AttentionBlock::new(&mut bb.pp("attn"), c, cfg)?,
                    MlpBlock::new(&mut bb.pp("mlp"), c, cfg.mlp_ratio)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            index,
            embed,
            embed_bn,
            blocks,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.embed.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.embed.out_channels()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let factor = if self.index == 1 { 4 } else { 2 };
        if c != self.in_channels() || h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "stage {} expects {} channels and dims divisible by {factor}, got {c}x{h}x{w}",
                self.index,
                self.in_channels()
            )));
        }
        let mut x = self.embed_bn.forward(&self.embed.forward(x)?, mode)?;
        for (attn, mlp) in &self.blocks {
            x = mlp.forward(&attn.forward(&x, mode)?, mode)?;
        }
        Ok(x)
    }
}

/// GAP → linear → GELU → linear(→1).
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpHead {
    pub fn new(b: &mut Builder, c: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut b.pp("fc1"), c, hidden)?,
            fc2: Linear::new(&mut b.pp("fc2"), hidden, 1)?,
        })
    }

    /// (B, C, H, W) → (B,) scores.
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let h = nn::gelu(&self.fc1.forward(&nn::global_avg_pool(f)?)?)?;
        Ok(self.fc2.forward(&h)?.squeeze(1)?)
    }
}

/// Projects the distortion embedding to the quality width, broadcasts it over
/// space and fuses it with AFF (embedding as X, quality map as Y).
#[derive(Debug, Clone)]
pub struct DistortionFusion {
    pub proj: Linear,
    pub aff: AffParams,
}

impl DistortionFusion {
    pub fn new(b: &mut Builder, embed_dim: usize, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&mut b.pp("proj"), embed_dim, channels)?,
            aff: AffParams::new(&mut b.pp("aff"), channels, reduction)?,
        })
    }

    /// The embedding after projection and spatial broadcast to `fq`'s shape.
    pub fn broadcast_embedding(&self, fq: &Tensor, z: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = fq.dims4()?;
        let (zb, zd) = z.dims2()?;
        if zb != b || zd != self.proj.weight.dims()[1] {
            return Err(Error::Shape(format!(
                "distortion embedding {:?} for {b} images of embedding width {}",
                z.dims(),
                self.proj.weight.dims()[1]
            )));
        }
        Ok(self
            .proj
            .forward(z)?
            .reshape((b, c, 1, 1))?
            .broadcast_as(fq.shape())?
            .contiguous()?)
    }

    pub fn forward(&self, fq: &Tensor, z: &Tensor, mode: Mode) -> Result<Tensor> {
        let zp = self.broadcast_embedding(fq, z)?;
        aff_fuse(&zp, fq, &self.aff, mode)
    }
}

pub fn fuse_distortion(fq: &Tensor, z: &Tensor, fusion: &DistortionFusion, mode: Mode) -> Result<Tensor> {
    fusion.forward(fq, z, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityNetConfig {
    pub backbone: BackboneConfig,
    pub hfen: HfenConfig,
    pub reduction: usize,
    pub head_hidden: usize,
    pub fusion: FusionMode,
    pub use_hfen: bool,
    pub use_distortion: bool,
    pub distortion_dim: usize,
}

impl Default for QualityNetConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            hfen: HfenConfig::default(),
            reduction: DEFAULT_REDUCTION,
            head_hidden: 64,
            fusion: FusionMode::Aff,
            use_hfen: true,
            use_distortion: true,
            distortion_dim: 128,
        }
    }
}

#[derive(Debug)]
pub struct QualityNet {
    config: QualityNetConfig,
    stages: Vec<Stage>,
    hfen: Option<Hfen>,
    ffms: Vec<Ffm>,
    distortion: Option<DistortionFusion>,
    head: MlpHead,
    fusion_events: AtomicUsize,
}

impl QualityNet {
    pub fn new(b: &mut Builder, config: &QualityNetConfig) -> Result<Self> {
        let ch = config.backbone.channels;
        if let Some(c) = ch.iter().find(|&&c| c % config.reduction != 0) {
            return Err(Error::InvalidArgument(format!(
                "stage width {c} not divisible by fusion reduction {}",
                config.reduction
            )));
        }
        let mut stages = Vec::with_capacity(4);
        for i in 1..=4 {
            let cin = if i == 1 { 3 } else { ch[i - 2] };
            stages.push(Stage::new(
                &mut b.pp(format!("backbone.stage{i}")),
                i,
                cin,
                &config.backbone,
            )?);
        }
        let (hfen, ffms) = if config.use_hfen {
            let hfen = Hfen::new(&mut b.pp("hfen"), ch[0], &config.hfen)?;
            let ffms = (1..=3)
                .map(|i| {
                    Ffm::new(
                        &mut b.pp(format!("ffm{i}")),
                        hfen.out_channels(),
                        ch[i],
                        config.reduction,
                        config.fusion,
                    )
                })
                .collect::<Result<_>>()?;
            (Some(hfen), ffms)
        } else {
            (None, Vec::new())
        };
        let distortion = if config.use_distortion {
            Some(DistortionFusion::new(
                &mut b.pp("distortion"),
                config.distortion_dim,
                ch[3],
                config.reduction,
            )?)
        } else {
            None
        };
        let head = MlpHead::new(&mut b.pp("head"), ch[3], config.head_hidden)?;
        Ok(Self {
            config: config.clone(),
            stages,
            hfen,
            ffms,
            distortion,
            head,
            fusion_events: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &QualityNetConfig {
        &self.config
    }

    pub fn stage(&self, i: usize) -> &Stage {
        &self.stages[i - 1]
    }

    pub fn hfen(&self) -> Option<&Hfen> {
        self.hfen.as_ref()
    }

    pub fn head(&self) -> &MlpHead {
        &self.head
    }

    pub fn distortion_fusion(&self) -> Option<&DistortionFusion> {
        self.distortion.as_ref()
    }

    /// Number of high-frequency fusions performed since construction.
    pub fn fusion_events(&self) -> usize {
        self.fusion_events.load(Ordering::Relaxed)
    }

    pub fn check_input(&self, img: &Tensor) -> Result<()> {
        let (_, c, h, w) = img.dims4()?;
        let s = BackboneConfig::STRIDE;
        if c != 3 || h < s || w < s || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "quality network expects 3-channel input with sides >= {s} and divisible by {s}, got {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    /// Stage outputs F₁..F₄ after high-frequency fusion; the last is F₄.
    pub fn trace(&self, img: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        self.check_input(img)?;
        let f1 = self.stages[0].forward(img, mode)?;
        let guidance = match &self.hfen {
            Some(h) => Some(h.forward(&f1, mode)?),
            None => None,
        };
        let mut feats = vec![f1];
        for i in 1..4 {
            let q = self.stages[i].forward(&feats[i - 1], mode)?;
            let f = match &guidance {
                Some(g) => {
                    self.fusion_events.fetch_add(1, Ordering::Relaxed);
                    self.ffms[i - 1].forward(&g[i - 1], &q, mode)?
                }
                None => q,
            };
            feats.push(f);
        }
        Ok(feats)
    }

    /// Fused quality feature F₄.
    pub fn qen_forward(&self, img: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.trace(img, mode)?.pop().expect("four stages"))
    }

    /// Scores for a (B, 3, H, W) batch. `z` is the (B, D) distortion embedding,
    /// required unless the distortion branch is disabled.
    pub fn forward(&self, img: &Tensor, z: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        let mut f = self.qen_forward(img, mode)?;
        if let Some(d) = &self.distortion {
            let z = z.ok_or_else(|| Error::MissingEncoder("distortion embedding not supplied".into()))?;
            f = d.forward(&f, z, mode)?;
        }
        self.head.forward(&f)
    }
}

pub fn mlp_head(f: &Tensor, head: &MlpHead) -> Result<Tensor> {
    head.forward(f)
}

pub fn stage_forward(net: &QualityNet, i: usize, f: &Tensor, mode: Mode) -> Result<Tensor> {
    if !(1..=4).contains(&i) {
        return Err(Error::InvalidArgument(format!("stage index {i} outside 1..=4")));
    }
    net.stage(i).forward(f, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, ParamStore};
    use candle_core::{DType, Device};

    fn small_config() -> QualityNetConfig {
        QualityNetConfig {
            backbone: BackboneConfig {
                channels: [8, 16, 16, 32],
                ..Default::default()
            },
            hfen: HfenConfig {
                channels: 8,
                ..Default::default()
            },
            head_hidden: 16,
            distortion_dim: 12,
            ..Default::default()
        }
    }

    fn build(cfg: &QualityNetConfig, dtype: DType) -> (ParamStore, QualityNet) {
        let mut store = ParamStore::new(dtype);
        let mut rng = init_rng(1);
        let net = QualityNet::new(&mut Builder::new(&mut store, &mut rng), cfg).unwrap();
        (store, net)
    }

    #[test]
    fn default_shape_trace_at_224() {
        let (_s, net) = build(&QualityNetConfig::default(), DType::F32);
        let img = Tensor::zeros((1, 3, 224, 224), DType::F32, &Device::Cpu).unwrap();
        let feats = net.trace(&img, Mode::Eval).unwrap();
        let shapes: Vec<_> = feats.iter().map(|f| f.dims().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 32, 56, 56],
                vec![1, 64, 28, 28],
                vec![1, 160, 14, 14],
                vec![1, 256, 7, 7]
            ]
        );
        let f1 = &feats[0];
        let g = net.hfen().unwrap().forward(f1, Mode::Eval).unwrap();
        assert_eq!(g[0].dims(), &[1, 8, 56, 56]);
        assert_eq!(g[1].dims(), &[1, 8, 28, 28]);
        assert_eq!(g[2].dims(), &[1, 8, 14, 14]);
        assert_eq!(net.fusion_events(), 3);
    }

    #[test]
    fn zero_input_zero_output_per_stage() {
        let (_s, net) = build(&small_config(), DType::F64);
        let x = Tensor::zeros((2, 3, 32, 32), DType::F64, &Device::Cpu).unwrap();
        for mode in [Mode::Eval, Mode::Train] {
            let y = stage_forward(&net, 1, &x, mode).unwrap();
            assert_eq!(y.dims(), &[2, 8, 8, 8]);
            assert_eq!(y.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        }
    }

    #[test]
    fn rejects_bad_input_sizes() {
        let (_s, net) = build(&small_config(), DType::F32);
        for (h, w) in [(16, 16), (48, 64), (64, 40)] {
            let x = Tensor::zeros((1, 3, h, w), DType::F32, &Device::Cpu).unwrap();
            assert!(net.qen_forward(&x, Mode::Eval).is_err(), "{h}x{w}");
        }
        assert!(stage_forward(
            &net,
            5,
            &Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap(),
            Mode::Eval
        )
        .is_err());
    }

    #[test]
    fn missing_embedding_is_reported() {
        let (_s, net) = build(&small_config(), DType::F32);
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            net.forward(&x, None, Mode::Eval),
            Err(Error::MissingEncoder(_))
        ));
        let z = Tensor::zeros((1, 7), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&x, Some(&z), Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn head_with_zero_weights_returns_bias() {
        let (_s, net) = build(&small_config(), DType::F64);
        let head = net.head();
        head.fc1.weight.set(&head.fc1.weight.zeros_like().unwrap()).unwrap();
        head.fc2.weight.set(&head.fc2.weight.zeros_like().unwrap()).unwrap();
        head.fc2
            .bias
            .set(&Tensor::new(&[0.37f64], &Device::Cpu).unwrap())
            .unwrap();
        let f = Tensor::zeros((3, 32, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let s = mlp_head(&f, head).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(s, vec![0.37; 3]);
    }
}
