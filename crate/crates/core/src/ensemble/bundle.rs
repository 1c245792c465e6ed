//! A set of trained paths that predicts together.

use std::path::{Path, PathBuf};

use super::train::{train_path, EpochLog, TrainConfig, TrainedPath};
use super::vote::{argmax_labels, fuse_nuclei, majority_vote_counts, PATHS};
use crate::autograd::softmax_channels;
use crate::data::{normalize, Sample};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::mask::{BinaryMask, LabelMask, NUM_CLASSES};
use crate::metrics::{aggregate, MetricsReport, MetricsRow};
use crate::network::{ArchConfig, Model, Variant};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BUNDLE_FILE: &str = "bundle.txt";
/// Manifest kind of a path that is part of a voting ensemble.
pub const ENSEMBLE_KIND: &str = "D-MEM-path";
/// Manifest kind of a lone network trained for ablation.
pub const ABLATION_KIND: &str = "Unet-ablation";

pub struct BundlePath<T> {
    pub model: Model<T>,
    pub manifest: KeyValues,
}

/// Either three voting paths or a single network.
pub struct EnsembleBundle<T> {
    paths: Vec<BundlePath<T>>,
}

/// Labels and fused nuclei predicted for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub labels: LabelMask,
    pub nuclei: BinaryMask,
    /// Votes per class at every pixel; empty for a single network.
    pub votes: Vec<[u8; NUM_CLASSES]>,
}

fn path_dir(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("path{i}"))
}

impl<T: Scalar> EnsembleBundle<T> {
    pub fn new(paths: Vec<BundlePath<T>>) -> Result<Self> {
        if paths.len() != 1 && paths.len() != PATHS {
            return Err(Error::invalid(
                "ensemble_bundle",
                format!("expected 1 or {PATHS} paths, got {}", paths.len()),
            ));
        }
        let cfg = &paths[0].model.cfg;
        for p in &paths[1..] {
            let c = &p.model.cfg;
            if (c.input_size, c.in_channels, c.num_classes) != (cfg.input_size, cfg.in_channels, cfg.num_classes) {
                return Err(Error::invalid(
                    "ensemble_bundle",
                    "paths disagree on input size, channels or classes",
                ));
            }
        }
        if cfg.num_classes != NUM_CLASSES {
            return Err(Error::invalid(
                "ensemble_bundle",
                format!("networks must predict {NUM_CLASSES} classes, got {}", cfg.num_classes),
            ));
        }
        Ok(EnsembleBundle { paths })
    }

    pub fn paths(&self) -> &[BundlePath<T>] {
        &self.paths
    }

    pub fn is_ensemble(&self) -> bool {
        self.paths.len() == PATHS
    }

    pub fn kind(&self) -> &'static str {
        if self.is_ensemble() {
            "D-MEM"
        } else {
            ABLATION_KIND
        }
    }

    pub fn variants(&self) -> Vec<Variant> {
        self.paths.iter().map(|p| p.model.cfg.variant).collect()
    }

    /// Architecture shared by all paths, up to the variant.
    pub fn arch(&self) -> &ArchConfig {
        &self.paths[0].model.cfg
    }

    /// Softmax class probabilities of every path for a standardized
    /// `(1, c, h, w)` input.
    pub fn path_probabilities(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.paths
            .iter()
            .map(|p| Ok(softmax_channels(&p.model.predict_logits(input)?)))
            .collect()
    }

    /// Predict one raw `(1, c, h, w)` image, which must already have the
    /// network input size.
    pub fn predict(&self, image: &Tensor<f64>) -> Result<Prediction> {
        let cfg = self.arch();
        let s = image.shape();
        if s.n != 1 || s.c != cfg.in_channels || (s.h, s.w) != cfg.input_size {
            return Err(Error::invalid(
                "predict",
                format!(
                    "image {s} does not match the network input (1, {}, {}, {})",
                    cfg.in_channels, cfg.input_size.0, cfg.input_size.1
                ),
            ));
        }
        let input: Tensor<T> = normalize(image).cast();
        let probs = self.path_probabilities(&input)?;
        let (labels, votes) = if let [a, b, c] = &probs[..] {
            let v = majority_vote_counts([a, b, c])?;
            (v.labels, v.counts)
        } else {
            (argmax_labels(&probs[0])?, Vec::new())
        };
        let nuclei = fuse_nuclei(&labels);
        Ok(Prediction {
            labels,
            nuclei,
            votes,
        })
    }

    /// Nucleus metrics over samples, resized to the input size first.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<MetricsReport> {
        let (h, w) = self.arch().input_size;
        let rows = samples
            .iter()
            .map(|s| {
                let s = s.resized(h, w)?;
                let pred = self.predict(&s.image)?;
                MetricsRow::score(s.id.clone(), &pred.nuclei, &fuse_nuclei(&s.mask))
            })
            .collect::<Result<Vec<_>>>()?;
        aggregate(rows)
    }

    /// Write `path<i>/` directories and `bundle.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut kv = KeyValues::new();
        kv.set("format", "dmem-bundle-1");
        kv.set("kind", self.kind());
        kv.set("paths", self.paths.len());
        kv.set("precision", T::NAME);
        for (i, p) in self.paths.iter().enumerate() {
            p.model.save(&path_dir(dir, i), &p.manifest)?;
            kv.set(&format!("path{i}"), p.model.cfg.variant);
        }
        kv.save(&dir.join(BUNDLE_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file = dir.join(BUNDLE_FILE);
        let kv = KeyValues::load(&file)?;
        let n: usize = kv.require("paths").map_err(|m| Error::format(&file, m))?;
        let mut paths = Vec::with_capacity(n);
        for i in 0..n {
            let (model, manifest) = Model::load(&path_dir(dir, i))?;
            let listed: Variant = kv
                .require(&format!("path{i}"))
                .map_err(|m| Error::format(&file, m))?;
            if listed != model.cfg.variant {
                return Err(Error::format(
                    &file,
                    format!("path{i} is listed as {listed} but stores {}", model.cfg.variant),
                ));
            }
            paths.push(BundlePath { model, manifest });
        }
        Self::new(paths)
    }
}

/// Scalar type a saved bundle was trained in, `f64` when unrecorded.
pub fn stored_precision(dir: &Path) -> Result<String> {
    let kv = KeyValues::load(&dir.join(BUNDLE_FILE))?;
    Ok(kv.get("precision").unwrap_or("f64").to_string())
}

/// Which networks to train.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BundlePlan {
    /// The three variants, voting.
    Ensemble,
    /// One network of the given variant.
    Single(Variant),
}

impl BundlePlan {
    pub fn variants(&self) -> Vec<Variant> {
        match self {
            BundlePlan::Ensemble => Variant::ALL.to_vec(),
            BundlePlan::Single(v) => vec![*v],
        }
    }
}

/// Train every path of `plan`; path `i` uses seed `seed + i`.
///
/// With `parallel`, paths run on their own threads. Results do not
/// depend on the choice. `on_epoch` receives the path index with each
/// epoch summary.
#[allow(clippy::too_many_arguments)]
pub fn train_bundle<T: Scalar>(
    base: &ArchConfig,
    plan: &BundlePlan,
    train: &[Sample],
    val: &[Sample],
    hp: &TrainConfig,
    seed: u64,
    parallel: bool,
    on_epoch: &(dyn Fn(usize, Variant, &EpochLog) + Sync),
) -> Result<EnsembleBundle<T>> {
    hp.validate()?;
    let variants = plan.variants();
    let kind = match plan {
        BundlePlan::Ensemble => ENSEMBLE_KIND,
        BundlePlan::Single(_) => ABLATION_KIND,
    };
    let run = |i: usize, v: Variant| -> Result<TrainedPath<T>> {
        let cfg = base.with_variant(v);
        train_path(&cfg, train, val, hp, seed + i as u64, &mut |log| on_epoch(i, v, log))
    };
    let trained: Vec<Result<TrainedPath<T>>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = variants
                .iter()
                .enumerate()
                .map(|(i, &v)| scope.spawn(move || run(i, v)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        })
    } else {
        variants.iter().enumerate().map(|(i, &v)| run(i, v)).collect()
    };
    let mut paths = Vec::with_capacity(trained.len());
    for t in trained {
        let t = t?;
        let manifest = t.manifest(kind, hp);
        paths.push(BundlePath {
            model: t.model,
            manifest,
        });
    }
    EnsembleBundle::new(paths)
}
