//! Named parameter storage and the convolution layers built on it.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel, He-initialized with the given fan-in.
    Weight { fan_in: usize },
    Bias,
    /// Offset-predictor weight or bias; always starts at zero.
    Offset,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            kinds: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a zero-filled parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: Shape, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.kinds.push(kind);
        self.tensors.push(Tensor::zeros(shape));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Overwrite a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = self.tensors[id.0].shape();
        if cur != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                left: cur,
                right: value.shape(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Insert every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| graph.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    /// Gradients of every bound parameter, zeros where none flowed.
    pub fn grads(&self, graph: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(v, t)| graph.grad_tensor(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian `f64` payloads.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape().dims() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Graph variables of a [`ParamStore`] bound to one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Bind existing variables, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Regular convolution layer with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::with_kind(store, name, cin, cout, k, stride, pad, false)
    }

    /// Layer whose weight and bias are tagged [`ParamKind::Offset`].
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn with_kind<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        offset: bool,
    ) -> Self {
        let (wk, bk) = if offset {
            (ParamKind::Offset, ParamKind::Offset)
        } else {
            (ParamKind::Weight { fan_in: cin * k * k }, ParamKind::Bias)
        };
        Conv {
            weight: store.add(format!("{name}.weight"), Shape::new(cout, cin, k, k), wk),
            bias: store.add(format!("{name}.bias"), Shape::bias(cout), bk),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Transposed convolution layer with bias, kernel `(cin, cout, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Self {
        ConvTranspose {
            weight: store.add(
                format!("{name}.weight"),
                Shape::new(cin, cout, k, k),
                ParamKind::Weight { fan_in: cin * k * k },
            ),
            bias: store.add(format!("{name}.bias"), Shape::bias(cout), ParamKind::Bias),
            cin,
            cout,
            k,
            stride,
            pad,
            output_pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(
            x,
            p.var(self.weight),
            Some(p.var(self.bias)),
            self.stride,
            self.pad,
            self.output_pad,
        )
    }
}
