//! Dense blocks and the resolution-changing stage connectors.

use crate::autograd::{Graph, Var};
use crate::deform::DeformConv;
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, ConvTranspose, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Shape of one dense block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseBlockConfig {
    pub num_layers: usize,
    /// Channels contributed by every layer.
    pub growth_rate: usize,
    /// Whether each layer's 3x3 convolution is deformable.
    pub deformable: bool,
}

impl DenseBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.growth_rate == 0 {
            return Err(Error::invalid(
                "dense_block",
                format!(
                    "need at least one layer and growth rate >= 1, got L={} g={}",
                    self.num_layers, self.growth_rate
                ),
            ));
        }
        Ok(())
    }

    pub fn out_channels(&self, cin: usize) -> usize {
        cin + self.num_layers * self.growth_rate
    }
}

#[derive(Clone, Debug)]
pub enum LayerConv {
    Regular(Conv),
    Deformable(DeformConv),
}

impl LayerConv {
    /// The kernel/bias pair shared by both flavours.
    pub fn conv(&self) -> &Conv {
        match self {
            LayerConv::Regular(c) => c,
            LayerConv::Deformable(d) => &d.conv,
        }
    }
}

/// One composite layer: ReLU followed by a padded 3x3 convolution
/// emitting `growth_rate` channels.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub conv: LayerConv,
}

impl DenseLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cfg: &DenseBlockConfig) -> Self {
        let conv = if cfg.deformable {
            LayerConv::Deformable(DeformConv::new(store, name, cin, cfg.growth_rate, 3))
        } else {
            LayerConv::Regular(Conv::new(store, name, cin, cfg.growth_rate, 3, 1, 1))
        };
        DenseLayer { conv }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let a = g.relu(x)?;
        match &self.conv {
            LayerConv::Regular(c) => c.forward(g, p, a),
            LayerConv::Deformable(d) => d.forward(g, p, a),
        }
    }
}

/// Intermediate values of a dense block forward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub output: Var,
    /// Input seen by each layer, i.e. `[X_0, X_1, ..., X_{l-1}]`.
    pub layer_inputs: Vec<Var>,
    pub layer_outputs: Vec<Var>,
}

/// `L` dense layers; layer `l` consumes the concatenation of the block
/// input and every earlier layer output, and the block returns the
/// concatenation of its input with all layer outputs.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
    pub cin: usize,
    pub cfg: DenseBlockConfig,
}

impl DenseBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cfg: DenseBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.num_layers)
            .map(|l| DenseLayer::new(store, &format!("{name}.layer{l}"), cin + l * cfg.growth_rate, &cfg))
            .collect();
        Ok(DenseBlock { layers, cin, cfg })
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.out_channels(self.cin)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.trace(g, p, x, None)?.output)
    }

    /// Forward pass recording every layer's input. When `ablate` names a
    /// layer, that layer's output is replaced by zeros before it is fed on.
    pub fn trace<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, ablate: Option<usize>) -> Result<BlockTrace> {
        let mut feats = vec![x];
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if feats.len() == 1 { x } else { g.concat_channels(&feats)? };
            layer_inputs.push(input);
            let mut out = layer.forward(g, p, input)?;
            if ablate == Some(l) {
                out = g.constant(Tensor::zeros(g.shape(out)));
            }
            layer_outputs.push(out);
            feats.push(out);
        }
        let output = g.concat_channels(&feats)?;
        Ok(BlockTrace {
            output,
            layer_inputs,
            layer_outputs,
        })
    }
}

/// 1x1 convolution keeping the channel count, then 2x2 max pooling.
#[derive(Clone, Debug)]
pub struct TransitionDown {
    pub conv: Conv,
}

impl TransitionDown {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        TransitionDown {
            conv: Conv::new(store, name, channels, channels, 1, 1, 0),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::invalid(
                "transition_down",
                format!("spatial dims {}x{} must be even", s.h, s.w),
            ));
        }
        let y = self.conv.forward(g, p, x)?;
        g.max_pool2d(y, 2, 2)
    }
}

/// 3x3 stride-2 transposed convolution that exactly doubles the spatial dims.
#[derive(Clone, Debug)]
pub struct TransitionUp {
    pub conv: ConvTranspose,
}

impl TransitionUp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, out_channels: usize) -> Self {
        TransitionUp {
            conv: ConvTranspose::new(store, name, cin, out_channels, 3, 2, 1, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.conv.forward(g, p, x)
    }
}
