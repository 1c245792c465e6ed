//! Training one path: minibatch cross-entropy with Adam or SGD.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vote::{argmax_labels, fuse_nuclei};
use crate::data::{normalize, Sample};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::mask::NUM_CLASSES;
use crate::metrics::zsi;
use crate::network::{build_network, ArchConfig, Model};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    /// SGD with heavy-ball momentum.
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(format!("unknown optimizer '{s}' (expected adam or sgd)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    /// Per-class loss weights.
    pub class_weights: [f64; NUM_CLASSES],
    /// Random horizontal and vertical flips of training samples.
    pub flips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 4,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            class_weights: [1.0; NUM_CLASSES],
            flips: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("train_config", msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("momentum", self.momentum)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1)"));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad(format!("class weights {:?} must be non-negative", self.class_weights));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("optimizer", self.optimizer);
        kv.set("lr", self.lr);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv.set("momentum", self.momentum);
        let w: Vec<String> = self.class_weights.iter().map(|w| w.to_string()).collect();
        kv.set("class_weights", w.join(","));
        kv.set("flips", self.flips);
    }

    /// Read fields present in `kv`, keeping `self`'s values for the rest.
    pub fn overlay_kv(&self, kv: &KeyValues) -> std::result::Result<Self, String> {
        let d = self;
        let class_weights = match kv.get("class_weights") {
            None => d.class_weights,
            Some(s) => {
                let parts: Vec<f64> = s
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format!("class_weights: {e}"))?;
                parts.try_into().map_err(|p: Vec<f64>| {
                    format!("class_weights: expected {NUM_CLASSES} values, got {}", p.len())
                })?
            }
        };
        Ok(TrainConfig {
            epochs: kv.parsed("epochs")?.unwrap_or(d.epochs),
            batch_size: kv.parsed("batch_size")?.unwrap_or(d.batch_size),
            optimizer: kv.parsed("optimizer")?.unwrap_or(d.optimizer),
            lr: kv.parsed("lr")?.unwrap_or(d.lr),
            beta1: kv.parsed("beta1")?.unwrap_or(d.beta1),
            beta2: kv.parsed("beta2")?.unwrap_or(d.beta2),
            eps: kv.parsed("eps")?.unwrap_or(d.eps),
            momentum: kv.parsed("momentum")?.unwrap_or(d.momentum),
            class_weights,
            flips: kv.parsed("flips")?.unwrap_or(d.flips),
        })
    }
}

/// First- and second-moment state of the optimizer.
struct Optimizer<T> {
    cfg: TrainConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: i32,
}

impl<T: Scalar> Optimizer<T> {
    fn new(cfg: &TrainConfig, model: &Model<T>) -> Self {
        let zeros = || -> Vec<Tensor<T>> {
            model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
        };
        Optimizer {
            cfg: cfg.clone(),
            m: zeros(),
            v: match cfg.optimizer {
                OptimizerKind::Adam => zeros(),
                OptimizerKind::Sgd => Vec::new(),
            },
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut Model<T>, grads: &[Tensor<T>]) {
        self.step += 1;
        let c = &self.cfg;
        let lr = T::from_f64_lossy(c.lr);
        let ids: Vec<_> = model.params.ids().collect();
        match c.optimizer {
            OptimizerKind::Adam => {
                let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
                let one = T::one();
                let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(self.step));
                let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(self.step));
                let eps = T::from_f64_lossy(c.eps);
                for (i, id) in ids.into_iter().enumerate() {
                    let p = model.params.get_mut(id).data_mut();
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (j, &g) in grads[i].data().iter().enumerate() {
                        m[j] = b1 * m[j] + (one - b1) * g;
                        v[j] = b2 * v[j] + (one - b2) * g * g;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p[j] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd => {
                let mu = T::from_f64_lossy(c.momentum);
                for (i, id) in ids.into_iter().enumerate() {
                    let p = model.params.get_mut(id).data_mut();
                    let m = self.m[i].data_mut();
                    for (j, &g) in grads[i].data().iter().enumerate() {
                        m[j] = mu * m[j] + g;
                        p[j] -= lr * m[j];
                    }
                }
            }
        }
    }
}

/// A sample resized and standardized for a given architecture.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub target: Vec<u8>,
    pub sample: Sample,
}

/// Check channels, resize to the input size and standardize.
pub fn prepare<T: Scalar>(cfg: &ArchConfig, sample: &Sample) -> Result<Prepared<T>> {
    if sample.image.shape().c != cfg.in_channels {
        return Err(Error::invalid(
            "prepare",
            format!(
                "sample {} has {} channels, the network expects {}",
                sample.id,
                sample.image.shape().c,
                cfg.in_channels
            ),
        ));
    }
    let (h, w) = cfg.input_size;
    let sample = sample.resized(h, w)?;
    Ok(Prepared {
        id: sample.id.clone(),
        image: normalize(&sample.image).cast(),
        target: sample.mask.data().to_vec(),
        sample,
    })
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Mean nucleus ZSI on the validation set, if one was given.
    pub val_zsi: Option<f64>,
}

pub struct TrainedPath<T> {
    /// Weights from [`TrainedPath::selected_epoch`].
    pub model: Model<T>,
    pub seed: u64,
    pub history: Vec<EpochLog>,
    /// Epoch whose weights were kept: the first with the highest
    /// validation ZSI, or the last epoch when there is no validation set.
    pub selected_epoch: usize,
}

impl<T: Scalar> TrainedPath<T> {
    /// Manifest entries describing the run.
    pub fn manifest(&self, kind: &str, hp: &TrainConfig) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("kind", kind);
        kv.set("seed", self.seed);
        hp.write_kv(&mut kv);
        if let Some(last) = self.history.last() {
            kv.set("final_loss", format!("{:.6}", last.loss));
        }
        kv.set("selected_epoch", self.selected_epoch);
        if let Some(z) = self.history.get(self.selected_epoch.wrapping_sub(1)).and_then(|l| l.val_zsi) {
            kv.set("selected_val_zsi", format!("{z:.6}"));
        }
        kv
    }
}

/// Mean nucleus ZSI of a single model over prepared samples.
pub fn mean_nucleus_zsi<T: Scalar>(model: &Model<T>, samples: &[Prepared<T>]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let logits = model.predict_logits(&s.image)?;
        let pred = fuse_nuclei(&argmax_labels(&logits)?);
        total += zsi(&pred, &fuse_nuclei(&s.sample.mask))?;
    }
    Ok(total / samples.len().max(1) as f64)
}

fn flip_prepared<T: Scalar>(p: &Prepared<T>, horizontal: bool, vertical: bool) -> (Tensor<T>, Vec<u8>) {
    if !horizontal && !vertical {
        return (p.image.clone(), p.target.clone());
    }
    let s = p.image.shape();
    let image = Tensor::from_fn(s, |n, c, y, x| {
        let sy = if vertical { s.h - 1 - y } else { y };
        let sx = if horizontal { s.w - 1 - x } else { x };
        p.image.at(n, c, sy, sx)
    });
    let mut target = Vec::with_capacity(p.target.len());
    for y in 0..s.h {
        let sy = if vertical { s.h - 1 - y } else { y };
        for x in 0..s.w {
            let sx = if horizontal { s.w - 1 - x } else { x };
            target.push(p.target[sy * s.w + sx]);
        }
    }
    (image, target)
}

/// Train one network from a fresh initialization.
///
/// `seed` drives both initialization and the shuffling/flip stream, so
/// identical inputs reproduce the same weights bit for bit. `on_epoch`
/// sees every epoch summary as it completes. With a validation set the
/// weights of the best-scoring epoch are returned.
pub fn train_path<T: Scalar>(
    cfg: &ArchConfig,
    train: &[Sample],
    val: &[Sample],
    hp: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainedPath<T>> {
    hp.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train_path", "training set is empty"));
    }
    let mut model = build_network::<T>(cfg, seed)?;
    let train: Vec<Prepared<T>> = train.iter().map(|s| prepare(cfg, s)).collect::<Result<_>>()?;
    let val: Vec<Prepared<T>> = val.iter().map(|s| prepare(cfg, s)).collect::<Result<_>>()?;
    let weights: Vec<T> = hp.class_weights.iter().map(|&w| T::from_f64_lossy(w)).collect();
    let mut opt = Optimizer::new(hp, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(hp.epochs);
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut target = Vec::new();
            for &i in chunk {
                let (fh, fv) = if hp.flips {
                    (rng.random_bool(0.5), rng.random_bool(0.5))
                } else {
                    (false, false)
                };
                let (img, t) = flip_prepared(&train[i], fh, fv);
                images.push(img);
                target.extend_from_slice(&t);
            }
            let batch = Tensor::stack(&images.iter().collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let x = g.constant(batch);
            let logits = model.forward(&mut g, &p, x)?;
            let loss = g.cross_entropy(logits, &target, &weights)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    path: cfg.variant.to_string(),
                    epoch,
                    batch: b + 1,
                });
            }
            g.backward(loss)?;
            let grads = model.params.grads(&g, &p);
            drop(g);
            opt.apply(&mut model, &grads);
            loss_sum += value;
            batches += 1;
        }
        let val_zsi = if val.is_empty() {
            None
        } else {
            Some(mean_nucleus_zsi(&model, &val)?)
        };
        let log = EpochLog {
            epoch,
            loss: loss_sum / batches as f64,
            val_zsi,
        };
        on_epoch(&log);
        history.push(log);
        if let Some(z) = val_zsi {
            if best.as_ref().is_none_or(|(b, _, _)| z > *b) {
                best = Some((z, epoch, model.params.clone()));
            }
        }
    }
    let selected_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => hp.epochs,
    };
    Ok(TrainedPath {
        model,
        seed,
        history,
        selected_epoch,
    })
}
