//! Distortion-aware network: contrastive classes, two-scale views, NT-Xent
//! losses and the residual encoder trained with them.

use std::collections::HashMap;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_images, DatasetManifest, Domain, ImageTensor};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, BatchNorm2d, Builder, Conv2d, ConvGeometry, Linear, Mode, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewScale {
    Full,
    Half,
}

/// Class id per record: synthetic records share a class per (type, level),
/// each authentic record gets its own.
pub fn build_contrastive_classes(manifest: &DatasetManifest) -> Result<Vec<usize>> {
    let mut keys: HashMap<(String, u32), usize> = HashMap::new();
    let mut next = 0;
    let mut out = Vec::with_capacity(manifest.len());
    for (row, r) in manifest.records.iter().enumerate() {
        let id = match r.domain {
            Domain::Synthetic => {
                let (Some(t), Some(l)) = (&r.distortion_type, r.distortion_level) else {
                    return Err(Error::InvalidArgument(format!(
                        "synthetic record {} ({}) lacks distortion type or level",
                        row + 1,
                        r.path.display()
                    )));
                };
                *keys.entry((t.clone(), l)).or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            }
            Domain::Authentic => {
                next += 1;
                next - 1
            }
        };
        out.push(id);
    }
    Ok(out)
}

/// Full view (a `crop`×`crop` window at a seeded position, or the whole image)
/// and its bilinear half-scale copy.
pub fn two_scale_views(image: &ImageTensor, crop: Option<usize>, seed: u64) -> Result<(ImageTensor, ImageTensor)> {
    let full = match crop {
        Some(c) => {
            if c > image.height() || c > image.width() {
                return Err(Error::Shape(format!(
                    "crop {c} exceeds image {}x{}",
                    image.height(),
                    image.width()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let top = rng.random_range(0..=image.height() - c);
            let left = rng.random_range(0..=image.width() - c);
            image.crop(top, left, c, c)?
        }
        None => image.clone(),
    };
    if full.height() % 2 != 0 || full.width() % 2 != 0 {
        return Err(Error::Shape(format!(
            "two-scale views need even dims, got {}x{}",
            full.height(),
            full.width()
        )));
    }
    let half = full.resize_bilinear(full.height() / 2, full.width() / 2)?;
    Ok((full, half))
}

/// Embeddings with their contrastive labels.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    embeddings: Vec<Vec<f64>>,
    class_ids: Vec<usize>,
    domains: Vec<Domain>,
    scales: Vec<ViewScale>,
    temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(
        embeddings: Vec<Vec<f64>>,
        class_ids: Vec<usize>,
        domains: Vec<Domain>,
        scales: Vec<ViewScale>,
        temperature: f64,
    ) -> Result<Self> {
        let n = embeddings.len();
        if n < 2 {
            return Err(Error::InvalidArgument(
                "contrastive batch needs at least 2 items".into(),
            ));
        }
        if class_ids.len() != n || domains.len() != n || scales.len() != n {
            return Err(Error::Shape(
                "contrastive batch label lengths differ from item count".into(),
            ));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let d = embeddings[0].len();
        if embeddings
            .iter()
            .any(|z| z.len() != d || z.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidArgument(
                "embeddings must share one finite dimension".into(),
            ));
        }
        let mut members: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, &c) in class_ids.iter().enumerate() {
            members.entry(c).or_default().push(i);
        }
        for (i, dom) in domains.iter().enumerate() {
            if *dom == Domain::Authentic {
                let m = &members[&class_ids[i]];
                if m.len() > 2 || m.iter().any(|&j| domains[j] != Domain::Authentic) {
                    return Err(Error::InvalidArgument(format!(
                        "authentic item {i} must share its class only with its other view"
                    )));
                }
            }
        }
        Ok(Self {
            embeddings,
            class_ids,
            domains,
            scales,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn scale(&self, i: usize) -> ViewScale {
        self.scales[i]
    }

    fn dot(&self, i: usize, j: usize) -> f64 {
        self.embeddings[i]
            .iter()
            .zip(&self.embeddings[j])
            .map(|(a, b)| a * b)
            .sum()
    }

    /// log softmax of item i's similarities at column j, over k ≠ i.
    fn log_prob(&self, i: usize, j: usize) -> f64 {
        let logits: Vec<(usize, f64)> = (0..self.len())
            .filter(|&k| k != i)
            .map(|k| (k, self.dot(i, k) / self.temperature))
            .collect();
        let m = logits.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|&(_, v)| (v - m).exp()).sum::<f64>().ln();
        self.dot(i, j) / self.temperature - lse
    }

    fn positives(&self, i: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| j != i && self.class_ids[j] == self.class_ids[i])
            .collect()
    }
}

/// Synthetic NT-Xent for item i, averaged over its same-class positives.
pub fn ntxent_syn_loss(batch: &ContrastiveBatch, i: usize) -> Result<f64> {
    let p = batch.positives(i);
    if p.is_empty() {
        return Err(Error::InvalidArgument(format!("item {i} has no positive")));
    }
    Ok(-p.iter().map(|&j| batch.log_prob(i, j)).sum::<f64>() / p.len() as f64)
}

/// Authentic loss for item i: its single positive is the other view.
pub fn authentic_loss(batch: &ContrastiveBatch, i: usize) -> Result<f64> {
    match batch.positives(i).as_slice() {
        [j] => Ok(-batch.log_prob(i, *j)),
        [] => Err(Error::InvalidArgument(format!("item {i} has no paired view"))),
        _ => Err(Error::InvalidArgument(format!(
            "item {i} has more than one paired view"
        ))),
    }
}

/// Mean over items of the synthetic or authentic loss, by domain.
pub fn total_pretrain_loss(batch: &ContrastiveBatch) -> Result<f64> {
    let mut sum = 0.0;
    for i in 0..batch.len() {
        sum += match batch.domains[i] {
            Domain::Synthetic => ntxent_syn_loss(batch, i)?,
            Domain::Authentic => authentic_loss(batch, i)?,
        };
    }
    Ok(sum / batch.len() as f64)
}

/// Differentiable batch loss on (N, D) embeddings, equal to
/// `total_pretrain_loss` on the same inputs.
pub fn pretrain_loss_tensor(z: &Tensor, class_ids: &[usize], temperature: f64) -> Result<Tensor> {
    let (n, _) = z.dims2()?;
    if class_ids.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", class_ids.len())));
    }
    let mut weights = vec![0f64; n * n];
    let mut diag = vec![0f64; n * n];
    for i in 0..n {
        diag[i * n + i] = -1e9;
        let p: Vec<usize> = (0..n).filter(|&j| j != i && class_ids[j] == class_ids[i]).collect();
        if p.is_empty() {
            return Err(Error::InvalidArgument(format!("item {i} has no positive")));
        }
        for j in &p {
            weights[i * n + j] = 1.0 / p.len() as f64;
        }
    }
    let dev = z.device();
    let weights = Tensor::from_vec(weights, (n, n), dev)?.to_dtype(z.dtype())?;
    let diag = Tensor::from_vec(diag, (n, n), dev)?.to_dtype(z.dtype())?;
    let logits = ((z.matmul(&z.t()?)? / temperature)? + diag)?;
    let logp = candle_nn::ops::log_softmax(&logits, 1)?;
    Ok(((logp * weights)?.sum_all()? * (-1.0 / n as f64))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub channels: [usize; 4],
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            channels: [16, 32, 64, 128],
            proj_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn embed_dim(&self) -> usize {
        self.channels[3]
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResBlock {
    fn new(b: &mut Builder, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let g = |stride| ConvGeometry {
            stride,
            padding: 1,
            ..Default::default()
        };
        let shortcut = if stride != 1 || cin != cout {
            let geom = ConvGeometry {
                stride,
                ..Default::default()
            };
            Some((
                Conv2d::new(&mut b.pp("short"), cin, cout, 1, geom, false)?,
                BatchNorm2d::new(&mut b.pp("short_bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&mut b.pp("conv1"), cin, cout, 3, g(stride), false)?,
            bn1: BatchNorm2d::new(&mut b.pp("bn1"), cout)?,
            conv2: Conv2d::new(&mut b.pp("conv2"), cout, cout, 3, g(1), false)?,
            bn2: BatchNorm2d::new(&mut b.pp("bn2"), cout)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?;
        let s = match &self.shortcut {
            Some((c, bn)) => bn.forward(&c.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((h + s)?.relu()?)
    }
}

/// Residual CNN with global pooling, so any input of at least 16×16 maps to
/// a D-vector. The projection head is only used by the pretraining loss.
#[derive(Debug, Clone)]
pub struct DistortionEncoder {
    config: EncoderConfig,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<ResBlock>,
    proj1: Linear,
    proj2: Linear,
}

impl DistortionEncoder {
    pub fn new(b: &mut Builder, config: &EncoderConfig) -> Result<Self> {
        let geom = ConvGeometry {
            stride: 2,
            padding: 1,
            ..Default::default()
        };
        let stem = Conv2d::new(&mut b.pp("stem"), 3, config.stem_channels, 3, geom, false)?;
        let stem_bn = BatchNorm2d::new(&mut b.pp("stem_bn"), config.stem_channels)?;
        let mut cin = config.stem_channels;
        let mut blocks = Vec::new();
        for (i, &c) in config.channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(ResBlock::new(&mut b.pp(format!("block{i}")), cin, c, stride)?);
            cin = c;
        }
        let d = config.embed_dim();
        Ok(Self {
            config: config.clone(),
            stem,
            stem_bn,
            blocks,
            proj1: Linear::new(&mut b.pp("proj1"), d, d)?,
            proj2: Linear::new(&mut b.pp("proj2"), d, config.proj_dim)?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Pooled pre-projection feature, (B, D).
    pub fn features(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h < 16 || w < 16 {
            return Err(Error::Shape(format!(
                "encoder expects 3x>=16x>=16 input, got {c}x{h}x{w}"
            )));
        }
        let mut h = self.stem_bn.forward(&self.stem.forward(x)?, mode)?.relu()?;
        for b in &self.blocks {
            h = b.forward(&h, mode)?;
        }
        nn::global_avg_pool(&h)
    }

    /// Unit-norm embedding consumed downstream.
    pub fn embed(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        nn::l2_normalize(&self.features(x, mode)?)
    }

    /// Unit-norm projection used by the contrastive loss.
    pub fn project(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.proj1.forward(&self.features(x, mode)?)?.relu()?;
        nn::l2_normalize(&self.proj2.forward(&h)?)
    }
}

pub fn encoder_forward(encoder: &DistortionEncoder, image: &ImageTensor) -> Result<Vec<f64>> {
    let dtype = encoder.stem.weight.dtype();
    let z = encoder.embed(&image.to_tensor(dtype)?, Mode::Eval)?;
    Ok(z.squeeze(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Encoder with its own parameter store.
#[derive(Debug)]
pub struct EncoderModel {
    pub store: ParamStore,
    pub encoder: DistortionEncoder,
}

impl EncoderModel {
    pub fn new(config: &EncoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(dtype);
        let mut rng = nn::init_rng(seed);
        let encoder = DistortionEncoder::new(&mut Builder::new(&mut store, &mut rng), config)?;
        Ok(Self { store, encoder })
    }

    /// Eval-mode embeddings for whole images, one row each.
    pub fn embed_images(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|im| encoder_forward(&self.encoder, im)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub temperature: f64,
    pub steps: usize,
    /// Images per step; each contributes two views.
    pub batch_images: usize,
    pub crop: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            temperature: 0.1,
            steps: 240,
            batch_images: 24,
            crop: 64,
            lr: 1e-3,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub model: EncoderModel,
    pub losses: Vec<f64>,
}

/// Contrastive pretraining on in-memory images. Batches follow a seeded
/// shuffle; each image yields a full and a half view of one random crop.
pub fn pretrain_encoder(cfg: &PretrainConfig, images: &[ImageTensor], class_ids: &[usize]) -> Result<PretrainOutcome> {
    if images.len() != class_ids.len() || images.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pretraining needs >= 2 images with one class each, got {} images and {} classes",
            images.len(),
            class_ids.len()
        )));
    }
    if cfg.batch_images < 2 || cfg.steps == 0 || cfg.crop < 32 || cfg.crop % 2 != 0 {
        return Err(Error::Config(
            "pretraining needs batch_images >= 2, steps >= 1 and an even crop >= 32".into(),
        ));
    }
    let model = EncoderModel::new(&cfg.encoder, cfg.seed, DType::F32)?;
    let mut adam = Adam::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0_47_7a);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let bsz = cfg.batch_images.min(images.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(bsz);
        while idx.len() < bsz {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let mut fulls = Vec::with_capacity(bsz);
        let mut halves = Vec::with_capacity(bsz);
        for &i in &idx {
            let (f, h) = two_scale_views(&images[i], Some(cfg.crop), rng.random())?;
            fulls.push(f);
            halves.push(h);
        }
        let zf = model.encoder.project(&stack_images(&fulls, DType::F32)?, Mode::Train)?;
        let zh = model
            .encoder
            .project(&stack_images(&halves, DType::F32)?, Mode::Train)?;
        let z = Tensor::cat(&[&zf, &zh], 0)?;
        let labels: Vec<usize> = idx.iter().chain(idx.iter()).map(|&i| class_ids[i]).collect();
        let loss = pretrain_loss_tensor(&z, &labels, cfg.temperature)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                step,
                loss: value,
            });
        }
        adam.step(&model.store, &loss.backward()?, cfg.lr)?;
        log::debug!("pretrain step {step}: loss {value:.5}");
        losses.push(value);
    }
    Ok(PretrainOutcome { model, losses })
}

/// Softmax regression on frozen features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// K rows of D weights followed by a bias.
    weights: Vec<Vec<f64>>,
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], n_classes: usize, epochs: usize, lr: f64) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() || labels.iter().any(|&l| l >= n_classes) {
            return Err(Error::InvalidArgument(
                "probe needs one in-range label per feature".into(),
            ));
        }
        let d = features[0].len();
        let n = features.len() as f64;
        let mut w = vec![vec![0.0; d + 1]; n_classes];
        for _ in 0..epochs {
            let mut grad = vec![vec![0.0; d + 1]; n_classes];
            for (x, &y) in features.iter().zip(labels) {
                let p = softmax(&logits(&w, x));
                for (k, g) in grad.iter_mut().enumerate() {
                    let e = p[k] - if k == y { 1.0 } else { 0.0 };
                    for (gj, xj) in g.iter_mut().zip(x) {
                        *gj += e * xj;
                    }
                    g[d] += e;
                }
            }
            for (wk, gk) in w.iter_mut().zip(&grad) {
                for (a, g) in wk.iter_mut().zip(gk) {
                    *a -= lr * g / n;
                }
            }
        }
        Ok(Self { weights: w })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let l = logits(&self.weights, x);
        (0..l.len()).fold(0, |best, k| if l[k] > l[best] { k } else { best })
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / labels.len().max(1) as f64
    }
}

fn logits(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    w.iter()
        .map(|wk| wk[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + wk[d])
        .collect()
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Embedding of every manifest image with a frozen encoder.
pub fn embed_dataset(model: &EncoderModel, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
    model.embed_images(images)
}
