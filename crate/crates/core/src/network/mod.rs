//! The U-shaped dense network and its three deformable-placement variants.
//!
//! Topology for `N` stages:
//!
//! ```text
//! stem 3x3 conv
//! N x [dense block -> (skip) -> transition down]
//! bottleneck dense block
//! N x [transition up -> concat skip -> dense block]
//! 1x1 conv -> class logits
//! ```
//!
//! Transition-up layers emit `layers_per_block * growth_rate` channels.

mod io;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::blocks::{DenseBlock, DenseBlockConfig, TransitionDown, TransitionUp};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where deformable convolutions are placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Plain,
    DeformContract,
    DeformExpand,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Plain, Variant::DeformContract, Variant::DeformExpand];

    /// Identifier used in configs, manifests and on the command line.
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::DeformContract => "deform-contract",
            Variant::DeformExpand => "deform-expand",
        }
    }

    /// Short column label for comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Plain => "Plain",
            Variant::DeformContract => "D-Con",
            Variant::DeformExpand => "D-Exp",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(Variant::Plain),
            "deform-contract" | "d-con" => Ok(Variant::DeformContract),
            "deform-expand" | "d-exp" => Ok(Variant::DeformExpand),
            other => Err(format!(
                "unknown variant {other:?} (expected plain, deform-contract or deform-expand)"
            )),
        }
    }
}

/// Architecture descriptor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub stages: usize,
    pub in_channels: usize,
    pub initial_channels: usize,
    pub growth_rate: usize,
    pub layers_per_block: usize,
    pub variant: Variant,
    pub num_classes: usize,
    pub input_size: (usize, usize),
}

impl Default for ArchConfig {
    /// Desk-scale configuration: 3 stages on 64x64 RGB inputs.
    fn default() -> Self {
        ArchConfig {
            stages: 3,
            in_channels: 3,
            initial_channels: 16,
            growth_rate: 8,
            layers_per_block: 3,
            variant: Variant::Plain,
            num_classes: 4,
            input_size: (64, 64),
        }
    }
}

impl ArchConfig {
    /// Five stages on 256x256 inputs.
    pub fn paper_scale() -> Self {
        ArchConfig {
            stages: 5,
            input_size: (256, 256),
            ..Self::default()
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        ArchConfig {
            variant,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.stages;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::invalid(
                "build_network",
                format!(
                    "input size {h}x{w} must be divisible by 2^{} = {div}",
                    self.stages
                ),
            ));
        }
        if self.in_channels == 0 || self.initial_channels == 0 || self.num_classes == 0 {
            return Err(Error::invalid("build_network", "channel counts must be positive"));
        }
        self.block(false).validate()
    }

    fn block(&self, deformable: bool) -> DenseBlockConfig {
        DenseBlockConfig {
            num_layers: self.layers_per_block,
            growth_rate: self.growth_rate,
            deformable,
        }
    }

    /// Spatial size at the bottleneck.
    pub fn bottleneck_size(&self) -> (usize, usize) {
        (self.input_size.0 >> self.stages, self.input_size.1 >> self.stages)
    }
}

/// Layer structure of a built network; parameters live in the [`Model`].
#[derive(Clone, Debug)]
pub struct Network {
    pub stem: Conv,
    pub down: Vec<(DenseBlock, TransitionDown)>,
    pub bottleneck: DenseBlock,
    /// Expansive stages, deepest first.
    pub up: Vec<(TransitionUp, DenseBlock)>,
    pub head: Conv,
}

/// Intermediate values of a network forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Contracting-stage outputs before transition down, shallowest first.
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

/// Network layout plus its named parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ArchConfig,
    pub params: ParamStore<T>,
    pub net: Network,
}

fn build_layout<T: Scalar>(cfg: &ArchConfig) -> Result<(ParamStore<T>, Network)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let stem = Conv::new(&mut store, "stem", cfg.in_channels, cfg.initial_channels, 3, 1, 1);
    let mut c = cfg.initial_channels;
    let mut skip_channels = Vec::with_capacity(cfg.stages);
    let mut down = Vec::with_capacity(cfg.stages);
    let contract_deform = cfg.variant == Variant::DeformContract;
    for i in 0..cfg.stages {
        let block = DenseBlock::new(&mut store, &format!("down{i}.block"), c, cfg.block(contract_deform))?;
        c = block.out_channels();
        skip_channels.push(c);
        let td = TransitionDown::new(&mut store, &format!("down{i}.td"), c);
        down.push((block, td));
    }
    let bottleneck = DenseBlock::new(&mut store, "bottleneck", c, cfg.block(false))?;
    c = bottleneck.out_channels();
    let expand_deform = cfg.variant == Variant::DeformExpand;
    let up_channels = cfg.layers_per_block * cfg.growth_rate;
    let mut up = Vec::with_capacity(cfg.stages);
    for i in (0..cfg.stages).rev() {
        let tu = TransitionUp::new(&mut store, &format!("up{i}.tu"), c, up_channels);
        let block = DenseBlock::new(
            &mut store,
            &format!("up{i}.block"),
            up_channels + skip_channels[i],
            cfg.block(expand_deform),
        )?;
        c = block.out_channels();
        up.push((tu, block));
    }
    let head = Conv::new(&mut store, "head", c, cfg.num_classes, 1, 1, 0);
    Ok((
        store,
        Network {
            stem,
            down,
            bottleneck,
            up,
            head,
        },
    ))
}

/// Build a network for `cfg` and initialize it from `seed`.
pub fn build_network<T: Scalar>(cfg: &ArchConfig, seed: u64) -> Result<Model<T>> {
    let (params, net) = build_layout(cfg)?;
    let mut model = Model {
        cfg: cfg.clone(),
        params,
        net,
    };
    init_parameters(&mut model, seed);
    Ok(model)
}

/// He-style init: kernels drawn from `N(0, 2 / fan_in)`, biases and every
/// offset-predictor parameter set to zero. Deterministic in `seed`.
pub fn init_parameters<T: Scalar>(model: &mut Model<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let kind = model.params.kind(id);
        let t = model.params.get_mut(id);
        match kind {
            ParamKind::Weight { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                for v in t.data_mut() {
                    *v = T::from_f64_lossy(normal.sample(&mut rng));
                }
            }
            ParamKind::Bias | ParamKind::Offset => t.data_mut().fill(T::zero()),
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    fn check_input(&self, s: crate::tensor::Shape) -> Result<()> {
        if (s.h, s.w) != self.cfg.input_size || s.c != self.cfg.in_channels {
            return Err(Error::invalid(
                "forward",
                format!(
                    "input shape {s} does not match configured {} channels at {}x{}",
                    self.cfg.in_channels, self.cfg.input_size.0, self.cfg.input_size.1
                ),
            ));
        }
        Ok(())
    }

    /// Record a forward pass on `g`, returning class logits.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.trace(g, p, x)?.logits)
    }

    pub fn trace(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<ForwardTrace> {
        self.check_input(g.shape(x))?;
        let net = &self.net;
        let mut h = net.stem.forward(g, p, x)?;
        let mut skips = Vec::with_capacity(net.down.len());
        for (block, td) in &net.down {
            h = block.forward(g, p, h)?;
            skips.push(h);
            h = td.forward(g, p, h)?;
        }
        h = net.bottleneck.forward(g, p, h)?;
        let bottleneck = h;
        for ((tu, block), skip) in net.up.iter().zip(skips.iter().rev()) {
            let u = tu.forward(g, p, h)?;
            let joined = g.concat_channels(&[u, *skip])?;
            h = block.forward(g, p, joined)?;
        }
        let logits = net.head.forward(g, p, h)?;
        Ok(ForwardTrace {
            logits,
            skips,
            bottleneck,
        })
    }

    /// Inference on a plain tensor batch.
    pub fn predict_logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let y = self.forward(&mut g, &p, x)?;
        let logits = g.value(y).clone();
        if !logits.is_finite() {
            return Err(Error::NonFinite("network logits".into()));
        }
        Ok(logits)
    }

    /// Copy every parameter whose name also exists in `other`.
    /// Returns the number of tensors copied.
    pub fn copy_shared_from(&mut self, other: &Model<T>) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in other.params.iter() {
            if let Some(id) = self.params.find(name) {
                self.params.set(id, t.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }
}

#[cfg(test)]
mod tests;
