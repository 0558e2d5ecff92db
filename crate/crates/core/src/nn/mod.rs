//! Minimal layer toolkit on top of candle tensors.
//!
//! candle provides storage and reverse-mode autodiff; this module adds
//! seeded parameter initialisation, named parameter bookkeeping for
//! checkpoints, the handful of layers the networks need, and Adam.

pub mod conv;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use conv::{conv2d, ConvGeometry};

use crate::error::{Error, Result};

/// Whether batch normalisation uses batch statistics (and updates running
/// statistics) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Named trainable parameters plus non-trainable buffers (BN running stats).
///
/// Ordered maps keep checkpoint layout and optimizer traversal stable.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// Parameters whose name starts with `prefix`.
    pub fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> {
        self.params.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, var: Var, trainable: bool) -> Result<Var> {
        let map = if trainable { &mut self.params } else { &mut self.buffers };
        if map.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        map.insert(name, var.clone());
        Ok(var)
    }

    /// Every named tensor (parameters and buffers) as f64 host data.
    pub fn export(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let data = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            out.insert(name.clone(), (var.dims().to_vec(), data));
        }
        Ok(out)
    }

    /// Overwrites every parameter and buffer from `tensors`; names and shapes
    /// must match exactly.
    pub fn import(&self, tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let (shape, data) = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {shape:?}, model shape {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_slice(data, shape.as_slice(), &Device::Cpu)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        let known = self.params.len() + self.buffers.len();
        if tensors.len() != known {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {known}",
                tensors.len()
            )));
        }
        Ok(())
    }
}

/// Creates parameters under a name prefix with a seeded generator.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Child builder with `name` appended to the prefix.
    pub fn pp(&mut self, name: impl AsRef<str>) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    fn make(&mut self, leaf: &str, shape: &[usize], data: Vec<f64>, trainable: bool) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.store.dtype)?;
        let name = self.name(leaf);
        self.store.insert(name, Var::from_tensor(&t)?, trainable)
    }

    /// Uniform in ±1/sqrt(fan_in).
    pub fn fan_in_uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.make(leaf, shape, data, true)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.make(leaf, shape, vec![value; n], true)
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.make(leaf, shape, vec![value; n], false)
    }
}

/// Seeded generator for model construction.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub geometry: ConvGeometry,
}

impl Conv2d {
    /// Kernel `k`×`k`, fan-in-scaled uniform weights, zero bias.
    pub fn new(b: &mut Builder, cin: usize, cout: usize, k: usize, geometry: ConvGeometry, bias: bool) -> Result<Self> {
        let groups = geometry.groups;
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Shape(format!(
                "conv {cin}->{cout} not divisible into {groups} groups"
            )));
        }
        let fan_in = cin / groups * k * k;
        let weight = b.fan_in_uniform("weight", &[cout, cin / groups, k, k], fan_in)?;
        Self::assemble(b, weight, bias, geometry)
    }

    fn assemble(b: &mut Builder, weight: Var, bias: bool, geometry: ConvGeometry) -> Result<Self> {
        let bias = if bias {
            Some(b.constant("bias", &[weight.dims()[0]], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias, geometry })
    }

    pub fn pointwise(b: &mut Builder, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        Self::new(b, cin, cout, 1, ConvGeometry::default(), bias)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.geometry)?;
        Ok(match &self.bias {
            Some(bias) => y.broadcast_add(&bias.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// Batch normalisation over (B, H, W) per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant("gamma", &[channels], 1.0)?,
            beta: b.constant("beta", &[channels], 0.0)?,
            running_mean: b.buffer("running_mean", &[channels], 0.0)?,
            running_var: b.buffer("running_var", &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if mode.is_train() {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 {
                (var.detach() * (n / (n - 1.0)))?
            } else {
                var.detach()
            };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&rm.detach())?;
            self.running_var.set(&rv.detach())?;
            (mean, var)
        } else {
            (
                self.running_mean.reshape((1, c, 1, 1))?,
                self.running_var.reshape((1, c, 1, 1))?,
            )
        };
        let scale = (var + self.eps)?.sqrt()?.recip()?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&scale)?;
        Ok(y.broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Per-channel PReLU: max(x, 0) + a·min(x, 0).
#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: Var,
}

impl PRelu {
    pub fn new(b: &mut Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            slope: b.constant("slope", &[channels], 0.25)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.slope.reshape((1, (), 1, 1))?;
        let neg = x.neg()?.relu()?.neg()?;
        Ok((x.relu()? + neg.broadcast_mul(&a)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(b: &mut Builder, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            weight: b.fan_in_uniform("weight", &[dout, din], din)?,
            bias: b.constant("bias", &[dout], 0.0)?,
        })
    }

    /// (B, din) -> (B, dout)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// (B, C, H, W) -> (B, C)
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean((2, 3))?)
}

/// Row-wise unit L2 normalisation of a (B, D) matrix.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update over every parameter in `store` that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (name, var) in store.params() {
            let Some(g) = grads.get(var) else { continue };
            // detached throughout, or each step's moments would keep the previous graph alive
            let g = if self.weight_decay > 0.0 {
                (g.detach() + (var.as_tensor().detach() * self.weight_decay)?)?
            } else {
                g.detach()
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (
                    ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                    ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                ),
                None => ((&g * (1.0 - self.beta1))?, (g.sqr()? * (1.0 - self.beta2))?),
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m.detach(), v.detach()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batchnorm_train_normalises_and_updates_running_stats() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = init_rng(0);
        let bn = BatchNorm2d::new(&mut Builder::new(&mut store, &mut rng).pp("bn"), 2).unwrap();
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 2, 2, 2))
            .unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let mean = y.mean((0, 2, 3)).unwrap().to_vec1::<f64>().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
        let rm = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap();
        // channel 0 holds {0,1,2,3,8,9,10,11}, mean 5.5
        assert!((rm[0] - 0.55).abs() < 1e-12);
        let eval = bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(eval.dims(), x.dims());
    }

    #[test]
    fn prelu_matches_definition() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = init_rng(0);
        let p = PRelu::new(&mut Builder::new(&mut store, &mut rng), 1).unwrap();
        let x = Tensor::new(&[-2.0f64, 0.0, 3.0], &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 1, 3))
            .unwrap();
        let y = p.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![-0.5, 0.0, 3.0]);
    }

    #[test]
    fn export_import_round_trip() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = init_rng(9);
        let mut b = Builder::new(&mut store, &mut rng);
        Conv2d::new(&mut b.pp("c"), 2, 4, 3, ConvGeometry::same(3, 1), true).unwrap();
        BatchNorm2d::new(&mut b.pp("bn"), 4).unwrap();
        let snapshot = store.export().unwrap();
        let mut other = ParamStore::new(DType::F32);
        let mut rng2 = init_rng(10);
        let mut b2 = Builder::new(&mut other, &mut rng2);
        Conv2d::new(&mut b2.pp("c"), 2, 4, 3, ConvGeometry::same(3, 1), true).unwrap();
        BatchNorm2d::new(&mut b2.pp("bn"), 4).unwrap();
        other.import(&snapshot).unwrap();
        assert_eq!(other.export().unwrap(), snapshot);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = init_rng(0);
        let w = Builder::new(&mut store, &mut rng).constant("w", &[2], 1.0).unwrap();
        let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(0.0);
        opt.step(&store, &grads, 0.1).unwrap();
        let v = w.as_tensor().to_vec1::<f64>().unwrap();
        // first Adam step has magnitude lr
        assert!((v[0] - 0.9).abs() < 1e-6);
    }
}
