//! Patch sampling, training, patch-averaged prediction and the repeated
//! content-separated split protocol.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, QualityNet, QualityNetConfig};
use crate::checkpoint::Checkpoint;
use crate::contrastive::{EncoderConfig, EncoderModel};
use crate::data::{stack_images, DatasetManifest, ImageTensor};
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, DEFAULT_REDUCTION};
use crate::metrics;
use crate::nn::{init_rng, Adam, Builder, Mode, ParamStore};
use crate::octave::{HfConv, HfenConfig};

pub const QUALITY_KIND: &str = "quality";
pub const ENCODER_KIND: &str = "encoder";
const ENCODER_PREFIX: &str = "dan.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    L1,
    L2,
}

/// Widths of the quality network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    pub mlp_ratio: usize,
    pub hfen_channels: usize,
    pub head_hidden: usize,
    pub reduction: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            channels: b.channels,
            depths: b.depths,
            mlp_ratio: b.mlp_ratio,
            hfen_channels: HfenConfig::default().channels,
            head_hidden: 64,
            reduction: DEFAULT_REDUCTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    /// Divide once after the first epoch instead of every epoch.
    pub lr_step_once: bool,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patch_size: usize,
    pub patches_per_image: usize,
    /// Crops averaged per image at prediction time.
    pub test_patches: usize,
    /// Crops per image for the per-epoch validation score.
    pub val_patches: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub addition_fusion: bool,
    pub vanilla_conv: bool,
    pub no_hfen: bool,
    pub no_dan: bool,
    pub encoder_path: Option<PathBuf>,
    pub model: ModelShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 2e-5,
            lr_decay_factor: 10.0,
            lr_step_once: false,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 5,
            patch_size: 224,
            patches_per_image: 50,
            test_patches: 50,
            val_patches: 5,
            loss: LossKind::L1,
            seed: 0,
            addition_fusion: false,
            vanilla_conv: false,
            no_hfen: false,
            no_dan: false,
            encoder_path: None,
            model: ModelShape::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.initial_lr > 0.0) || !(self.lr_decay_factor > 0.0) || self.weight_decay < 0.0 {
            return bad("learning rate and decay factor must be positive, weight decay non-negative".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patches_per_image == 0 || self.test_patches == 0 {
            return bad("batch_size, epochs, patches_per_image and test_patches must be positive".into());
        }
        if self.patch_size == 0 || self.patch_size % BackboneConfig::STRIDE != 0 {
            return bad(format!(
                "patch_size {} must be a positive multiple of {}",
                self.patch_size,
                BackboneConfig::STRIDE
            ));
        }
        if self
            .model
            .channels
            .iter()
            .any(|&c| c == 0 || c % self.model.reduction.max(1) != 0)
        {
            return bad("stage widths must be positive multiples of the reduction".into());
        }
        Ok(())
    }

    pub fn net_config(&self, distortion_dim: usize) -> QualityNetConfig {
        let m = &self.model;
        QualityNetConfig {
            backbone: BackboneConfig {
                channels: m.channels,
                depths: m.depths,
                mlp_ratio: m.mlp_ratio,
                ..Default::default()
            },
            hfen: HfenConfig {
                channels: m.hfen_channels,
                conv: if self.vanilla_conv {
                    HfConv::Vanilla
                } else {
                    HfConv::Octave
                },
                ..Default::default()
            },
            reduction: m.reduction,
            head_hidden: m.head_hidden,
            fusion: if self.addition_fusion {
                FusionMode::Add
            } else {
                FusionMode::Aff
            },
            use_hfen: !self.no_hfen,
            use_distortion: !self.no_dan,
            distortion_dim,
        }
    }
}

/// lr = initial / factor^epoch, or a single division after epoch 0.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = if cfg.lr_step_once { epoch.min(1) } else { epoch };
    cfg.initial_lr / cfg.lr_decay_factor.powi(k as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl PatchSpec {
    pub fn extract(&self, image: &ImageTensor) -> Result<ImageTensor> {
        let mut p = image.crop(self.top, self.left, self.size, self.size)?;
        if self.flip_h {
            p = p.flip_horizontal();
        }
        if self.flip_v {
            p = p.flip_vertical();
        }
        Ok(p)
    }
}

fn check_patch_fits(h: usize, w: usize, size: usize) -> Result<()> {
    if h < size || w < size {
        return Err(Error::Shape(format!("image {h}x{w} smaller than patch {size}")));
    }
    Ok(())
}

/// `n` uniformly placed crops, with independent 50% flips when `flips`.
pub fn patch_specs(
    h: usize,
    w: usize,
    n: usize,
    size: usize,
    flips: bool,
    rng: &mut impl Rng,
) -> Result<Vec<PatchSpec>> {
    check_patch_fits(h, w, size)?;
    Ok((0..n)
        .map(|_| PatchSpec {
            top: rng.random_range(0..=h - size),
            left: rng.random_range(0..=w - size),
            size,
            flip_h: flips && rng.random_bool(0.5),
            flip_v: flips && rng.random_bool(0.5),
        })
        .collect())
}

/// Random flipped training patches of one image.
pub fn sample_patches(image: &ImageTensor, n: usize, size: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patch_specs(image.height(), image.width(), n, size, true, &mut rng)?
        .iter()
        .map(|s| s.extract(image))
        .collect()
}

/// Images of a manifest held in memory with their normalised targets.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageTensor>,
    pub targets: Vec<f64>,
}

impl LoadedDataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let images = manifest
            .records
            .iter()
            .map(|r| ImageTensor::load_png(&manifest.resolve(&r.path)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest.clone(), images)
    }

    pub fn from_parts(manifest: DatasetManifest, images: Vec<ImageTensor>) -> Result<Self> {
        if images.len() != manifest.len() {
            return Err(Error::Shape(format!(
                "{} images for {} records",
                images.len(),
                manifest.len()
            )));
        }
        let targets = manifest
            .records
            .iter()
            .map(|r| r.normalized_score().map(|s| s.value()))
            .collect::<Result<_>>()?;
        Ok(Self {
            manifest,
            images,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, name: &str, idx: &[usize]) -> Self {
        Self {
            manifest: self.manifest.subset(name, idx),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

/// Quality network, its parameters and, unless disabled, the frozen encoder.
#[derive(Debug)]
pub struct QualityModel {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub net: QualityNet,
    pub encoder: Option<EncoderModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QualityConfigEcho {
    train: TrainConfig,
    encoder: Option<EncoderConfig>,
}

impl QualityModel {
    pub fn new(config: &TrainConfig, encoder: Option<EncoderModel>, dtype: DType) -> Result<Self> {
        config.validate()?;
        let encoder = if config.no_dan {
            None
        } else {
            Some(encoder.ok_or_else(|| {
                Error::MissingEncoder("training with the distortion branch needs a pretrained encoder".into())
            })?)
        };
        let dim = encoder.as_ref().map_or(0, |e| e.encoder.config().embed_dim());
        let mut store = ParamStore::new(dtype);
        let mut rng = init_rng(config.seed);
        let net = QualityNet::new(&mut Builder::new(&mut store, &mut rng), &config.net_config(dim))?;
        Ok(Self {
            config: config.clone(),
            store,
            net,
            encoder,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Distortion embeddings of whole images, or `None` without the branch.
    pub fn embeddings(&self, images: &[ImageTensor]) -> Result<Option<Vec<Vec<f64>>>> {
        match &self.encoder {
            Some(e) => Ok(Some(e.embed_images(images)?)),
            None => Ok(None),
        }
    }

    fn z_tensor(&self, rows: &[&[f64]]) -> Result<Tensor> {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (rows.len(), d), &candle_core::Device::Cpu)?.to_dtype(self.dtype())?)
    }

    /// Scores for a stack of patches sharing (or not) distortion embeddings.
    pub fn score_patches(&self, patches: &[ImageTensor], z: Option<&[&[f64]]>, mode: Mode) -> Result<Tensor> {
        let x = stack_images(patches, self.dtype())?;
        let z = match z {
            Some(rows) => Some(self.z_tensor(rows)?),
            None => None,
        };
        self.net.forward(&x, z.as_ref(), mode)
    }

    pub fn to_checkpoint(&self, metadata: &impl Serialize) -> Result<Checkpoint> {
        let echo = QualityConfigEcho {
            train: self.config.clone(),
            encoder: self.encoder.as_ref().map(|e| e.encoder.config().clone()),
        };
        let mut ck = Checkpoint::from_store(QUALITY_KIND, &echo, metadata, &self.store)?;
        if let Some(e) = &self.encoder {
            if e.store.dtype() != self.dtype() {
                return Err(Error::Checkpoint("encoder and quality network dtypes differ".into()));
            }
            for (k, v) in e.store.export()? {
                ck.tensors.insert(format!("{ENCODER_PREFIX}{k}"), v);
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(QUALITY_KIND)?;
        let echo: QualityConfigEcho = ck.config_as()?;
        let (enc_tensors, own): (BTreeMap<_, _>, BTreeMap<_, _>) = ck
            .tensors
            .clone()
            .into_iter()
            .partition(|(k, _)| k.starts_with(ENCODER_PREFIX));
        let encoder = match &echo.encoder {
            Some(cfg) => {
                let e = EncoderModel::new(cfg, 0, ck.dtype)?;
                let stripped = enc_tensors
                    .into_iter()
                    .map(|(k, v)| (k[ENCODER_PREFIX.len()..].to_string(), v))
                    .collect();
                e.store.import(&stripped)?;
                Some(e)
            }
            None => None,
        };
        let model = Self::new(&echo.train, encoder, ck.dtype)?;
        model.store.import(&own)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, metadata: &impl Serialize) -> Result<()> {
        self.to_checkpoint(metadata)?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// Encoder checkpoint written by pretraining.
pub fn save_encoder(model: &EncoderModel, path: &Path, metadata: &impl Serialize) -> Result<()> {
    Checkpoint::from_store(ENCODER_KIND, model.encoder.config(), metadata, &model.store)?.write(path)
}

pub fn load_encoder(path: &Path) -> Result<EncoderModel> {
    let ck = Checkpoint::read(path).map_err(|e| match e {
        Error::Io { path, source } => Error::MissingEncoder(format!("{}: {source}", path.display())),
        other => other,
    })?;
    ck.expect_kind(ENCODER_KIND)?;
    let cfg: EncoderConfig = ck.config_as()?;
    let m = EncoderModel::new(&cfg, 0, ck.dtype)?;
    ck.apply(&m.store)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_srcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }
}

fn regression_loss(pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<Tensor> {
    let diff = (pred - target)?;
    Ok(match kind {
        LossKind::L1 => diff.abs()?.mean_all()?,
        LossKind::L2 => diff.sqr()?.mean_all()?,
    })
}

/// Loss of `model` in train mode on explicit patches and targets.
pub fn batch_loss(
    model: &QualityModel,
    patches: &[ImageTensor],
    z: Option<&[&[f64]]>,
    targets: &[f64],
) -> Result<Tensor> {
    let pred = model.score_patches(patches, z, Mode::Train)?;
    let t = Tensor::from_slice(targets, targets.len(), &candle_core::Device::Cpu)?.to_dtype(model.dtype())?;
    regression_loss(&pred, &t, model.config.loss)
}

/// Trains a fresh quality model. `val` adds a per-epoch SRCC.
pub fn train(
    cfg: &TrainConfig,
    train_set: &LoadedDataset,
    encoder: Option<EncoderModel>,
    val: Option<&LoadedDataset>,
) -> Result<(QualityModel, TrainLog)> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let model = QualityModel::new(cfg, encoder, DType::F32)?;
    let emb = model.embeddings(&train_set.images)?;
    let mut adam = Adam::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a_11_9e);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut pool = Vec::with_capacity(train_set.len() * cfg.patches_per_image);
        for (i, img) in train_set.images.iter().enumerate() {
            for s in patch_specs(
                img.height(),
                img.width(),
                cfg.patches_per_image,
                cfg.patch_size,
                true,
                &mut rng,
            )? {
                pool.push((i, s));
            }
        }
        pool.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (step, chunk) in pool.chunks(cfg.batch_size).enumerate() {
            let patches = chunk
                .iter()
                .map(|(i, s)| s.extract(&train_set.images[*i]))
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<f64> = chunk.iter().map(|(i, _)| train_set.targets[*i]).collect();
            let rows: Option<Vec<&[f64]>> = emb
                .as_ref()
                .map(|e| chunk.iter().map(|(i, _)| e[*i].as_slice()).collect());
            let loss = batch_loss(&model, &patches, rows.as_deref(), &targets)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: value,
                });
            }
            adam.step(&model.store, &loss.backward()?, lr)?;
            log.step_losses.push(value);
            sum += value * chunk.len() as f64;
            count += chunk.len();
        }
        let val_srcc = match val {
            Some(v) if v.len() >= 2 => {
                let p = predict_dataset(&model, v, cfg.val_patches.max(1), cfg.seed)?;
                metrics::srcc(&p, &v.targets).ok()
            }
            _ => None,
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: sum / count as f64,
            val_srcc,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.5} val srcc {}",
            entry.train_loss,
            val_srcc.map_or("-".into(), |s| format!("{s:.4}"))
        );
        log.epochs.push(entry);
    }
    Ok((model, log))
}

/// Mean score over `n` random crops (no flips).
pub fn predict_image(model: &QualityModel, image: &ImageTensor, z: Option<&[f64]>, n: usize, seed: u64) -> Result<f64> {
    let size = model.config.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches = patch_specs(image.height(), image.width(), n.max(1), size, false, &mut rng)?
        .iter()
        .map(|s| s.extract(image))
        .collect::<Result<Vec<_>>>()?;
    let rows: Option<Vec<&[f64]>> = z.map(|z| vec![z; patches.len()]);
    let scores = model.score_patches(&patches, rows.as_deref(), Mode::Eval)?;
    let v = scores.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Patch-averaged predictions for every image; image `i` uses seed `seed + i`.
pub fn predict_dataset(model: &QualityModel, data: &LoadedDataset, n: usize, seed: u64) -> Result<Vec<f64>> {
    let emb = model.embeddings(&data.images)?;
    data.images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let z = emb.as_ref().map(|e| e[i].as_slice());
            predict_image(model, img, z, n, seed.wrapping_add(i as u64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub n_repeats: usize,
    /// One seed per repeat; empty means `base_seed + r`.
    pub seeds: Vec<u64>,
    pub base_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            n_repeats: 10,
            seeds: Vec::new(),
            base_seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn seed(&self, r: usize) -> u64 {
        self.seeds
            .get(r)
            .copied()
            .unwrap_or(self.base_seed.wrapping_add(r as u64))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) || self.n_repeats == 0 {
            return Err(Error::Config(
                "train_fraction must lie in (0, 1) and n_repeats be positive".into(),
            ));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.n_repeats {
            return Err(Error::Config(format!(
                "{} seeds given for {} repeats",
                self.seeds.len(),
                self.n_repeats
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Record indices per repeat, separated by content group.
pub fn make_splits(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Vec<Split>> {
    spec.validate()?;
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        groups.entry(r.content_group()).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "splitting needs at least 2 content groups, found {}",
            groups.len()
        )));
    }
    let keys: Vec<&String> = groups.keys().collect();
    let g = keys.len();
    let n_train = ((g as f64 * spec.train_fraction).round() as usize).clamp(1, g - 1);
    Ok((0..spec.n_repeats)
        .map(|r| {
            let mut order = keys.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed(r)));
            let collect = |ks: &[&String]| {
                let mut v: Vec<usize> = ks.iter().flat_map(|k| groups[*k].iter().copied()).collect();
                v.sort_unstable();
                v
            };
            Split {
                train: collect(&order[..n_train]),
                test: collect(&order[n_train..]),
            }
        })
        .collect())
}

/// The splits as (train, test) manifests.
pub fn split_manifests(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
) -> Result<Vec<(DatasetManifest, DatasetManifest)>> {
    Ok(make_splits(manifest, spec)?
        .iter()
        .enumerate()
        .map(|(r, s)| {
            (
                manifest.subset(format!("{}_train{r}", manifest.name), &s.train),
                manifest.subset(format!("{}_test{r}", manifest.name), &s.test),
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: usize,
    pub srcc: f64,
    pub plcc: f64,
    pub final_loss: f64,
    pub predictions: Vec<f64>,
    pub objective: Vec<f64>,
    pub test_paths: Vec<PathBuf>,
    pub epochs: Vec<EpochLog>,
}

/// Trains on one split and scores its test side.
pub fn run_split(
    cfg: &TrainConfig,
    data: &LoadedDataset,
    split: &Split,
    index: usize,
    encoder: Option<&EncoderModel>,
) -> Result<SplitResult> {
    let tr = data.subset("train", &split.train);
    let te = data.subset("test", &split.test);
    let enc = match encoder {
        Some(e) if !cfg.no_dan => Some(clone_encoder(e)?),
        _ => None,
    };
    let (model, log) = train(cfg, &tr, enc, None)?;
    let (srcc, plcc, predictions) = metrics::evaluate_split(&model, &te, cfg.test_patches, cfg.seed)?;
    Ok(SplitResult {
        split: index,
        srcc,
        plcc,
        final_loss: log.final_loss(),
        predictions,
        objective: te.targets.clone(),
        test_paths: te.manifest.records.iter().map(|r| r.path.clone()).collect(),
        epochs: log.epochs,
    })
}

/// Deep copy of an encoder (fresh variables with the same values).
pub fn clone_encoder(e: &EncoderModel) -> Result<EncoderModel> {
    let m = EncoderModel::new(e.encoder.config(), 0, e.store.dtype())?;
    m.store.import(&e.store.export()?)?;
    Ok(m)
}

/// Runs every split in order.
pub fn run_protocol(
    cfg: &TrainConfig,
    data: &LoadedDataset,
    spec: &SplitSpec,
    encoder: Option<&EncoderModel>,
) -> Result<Vec<SplitResult>> {
    make_splits(&data.manifest, spec)?
        .iter()
        .enumerate()
        .map(|(r, s)| {
            log::info!("split {r}: {} train / {} test images", s.train.len(), s.test.len());
            run_split(cfg, data, s, r, encoder)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy::{toy_corpus_images, ToyCorpusSpec};
    use crate::data::DistortionKind;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            initial_lr: 1e-3,
            batch_size: 8,
            epochs: 1,
            patch_size: 32,
            patches_per_image: 2,
            test_patches: 2,
            model: ModelShape {
                channels: [8, 8, 8, 8],
                hfen_channels: 8,
                head_hidden: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_data() -> LoadedDataset {
        let spec = ToyCorpusSpec {
            n_refs: 3,
            kinds: vec![DistortionKind::GaussianBlur, DistortionKind::WhiteNoise],
            levels: 2,
            size: 48,
            ..Default::default()
        };
        let (m, files) = toy_corpus_images(&spec, Path::new("mem")).unwrap();
        let by_path: BTreeMap<_, _> = files.into_iter().collect();
        let images = m.records.iter().map(|r| by_path[&r.path].clone()).collect();
        LoadedDataset::from_parts(m, images).unwrap()
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 2e-5);
        assert!((lr_schedule(1, &cfg) - 2e-6).abs() < 1e-20);
        assert!((lr_schedule(3, &cfg) - 2e-8).abs() < 1e-22);
        let once = TrainConfig {
            lr_step_once: true,
            ..cfg
        };
        assert_eq!(lr_schedule(4, &once), lr_schedule(1, &once));
    }

    #[test]
    fn patches_stay_inside_and_keep_pixels() {
        let img = crate::data::toy::reference_image(40, 56, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in patch_specs(40, 56, 1000, 32, true, &mut rng).unwrap() {
            assert!(s.top + 32 <= 40 && s.left + 32 <= 56);
        }
        for p in sample_patches(&img, 20, 32, 1).unwrap() {
            assert_eq!((p.height(), p.width()), (32, 32));
        }
        let exact = crate::data::toy::reference_image(32, 32, 3);
        let sort = |v: &[f32]| {
            let mut v = v.to_vec();
            v.sort_by(f32::total_cmp);
            v
        };
        for p in sample_patches(&exact, 8, 32, 5).unwrap() {
            assert_eq!(sort(p.data()), sort(exact.data()));
            let same = [
                exact.clone(),
                exact.flip_horizontal(),
                exact.flip_vertical(),
                exact.flip_horizontal().flip_vertical(),
            ];
            assert!(same.contains(&p));
        }
        assert!(sample_patches(&exact, 1, 33, 0).is_err());
    }

    #[test]
    fn splits_are_content_separated_and_reproducible() {
        let spec = ToyCorpusSpec {
            n_refs: 10,
            kinds: vec![DistortionKind::GaussianBlur],
            levels: 2,
            size: 16,
            ..Default::default()
        };
        let (m, _) = toy_corpus_images(&spec, Path::new("r")).unwrap();
        let s = make_splits(&m, &SplitSpec::default()).unwrap();
        assert_eq!(s.len(), 10);
        for sp in &s {
            assert_eq!((sp.train.len(), sp.test.len()), (16, 4));
            let tr: std::collections::HashSet<_> = sp.train.iter().map(|&i| m.records[i].content_group()).collect();
            assert!(sp.test.iter().all(|&i| !tr.contains(&m.records[i].content_group())));
            assert!(sp.test.iter().all(|i| !sp.train.contains(i)));
        }
        assert_eq!(s, make_splits(&m, &SplitSpec::default()).unwrap());
        let one = m.subset("one", &[0, 1]);
        assert!(make_splits(&one, &SplitSpec::default()).is_err());
    }

    #[test]
    fn missing_encoder_unless_disabled() {
        let cfg = tiny_config();
        assert!(matches!(
            QualityModel::new(&cfg, None, DType::F32),
            Err(Error::MissingEncoder(_))
        ));
        let no = TrainConfig { no_dan: true, ..cfg };
        assert!(QualityModel::new(&no, None, DType::F32).is_ok());
        assert!(matches!(
            load_encoder(Path::new("/nonexistent/enc.ckpt")),
            Err(Error::MissingEncoder(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_checkpoint_round_trips() {
        let data = tiny_data();
        let enc = EncoderModel::new(&EncoderConfig::default(), 1, DType::F32).unwrap();
        let cfg = tiny_config();
        let (m1, l1) = train(&cfg, &data, Some(clone_encoder(&enc).unwrap()), None).unwrap();
        let (_, l2) = train(&cfg, &data, Some(enc), None).unwrap();
        assert!((l1.final_loss() - l2.final_loss()).abs() < 1e-6);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.ckpt");
        m1.save(&p, &()).unwrap();
        let m2 = QualityModel::load(&p).unwrap();
        let a = predict_dataset(&m1, &data, 2, 9).unwrap();
        let b = predict_dataset(&m2, &data, 2, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_dan_trains_without_encoder() {
        let data = tiny_data();
        let cfg = TrainConfig {
            no_dan: true,
            ..tiny_config()
        };
        let (_, log) = train(&cfg, &data, None, Some(&data)).unwrap();
        assert!(log.final_loss().is_finite());
        assert!(log.epochs[0].val_srcc.is_some());
    }

    #[test]
    fn single_patch_prediction_is_forward() {
        let data = tiny_data();
        let cfg = TrainConfig {
            no_dan: true,
            ..tiny_config()
        };
        let m = QualityModel::new(&cfg, None, DType::F32).unwrap();
        let img = &data.images[0];
        let p = predict_image(&m, img, None, 1, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = patch_specs(48, 48, 1, 32, false, &mut rng).unwrap()[0];
        let direct = m.score_patches(&[s.extract(img).unwrap()], None, Mode::Eval).unwrap();
        assert_eq!(p, direct.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()[0]);
    }
}
