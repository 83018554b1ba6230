//! The three architectures: sequentially stacked GCN layers, the same stack
//! with identity skips, and several shallow stacks run side by side whose
//! outputs are summed. All three end in one shared linear classifier.
//!
//! A convolution layer computes `relu(N · dropout(H) · W + b)` where `N` is
//! the normalized propagation operator.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::graph::CsrMatrix;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Sequential { depth: usize },
    Residual { depth: usize },
    /// Path depths include the `shared_stem` layers every path starts with.
    Multipath { paths: Vec<usize>, shared_stem: usize },
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Sequential { .. } => "gcn",
            Architecture::Residual { .. } => "resgcn",
            Architecture::Multipath { .. } => "mpgcn",
        }
    }

    /// Number of distinct convolution layers.
    pub fn conv_layers(&self) -> usize {
        match self {
            Architecture::Sequential { depth } | Architecture::Residual { depth } => *depth,
            Architecture::Multipath { paths, shared_stem } => {
                shared_stem + paths.iter().map(|p| p.saturating_sub(*shared_stem)).sum::<usize>()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub in_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
    pub bias: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.in_dim == 0 || self.hidden == 0 || self.classes == 0 {
            return fail(format!(
                "in_dim, hidden and classes must be positive (got {}, {}, {})",
                self.in_dim, self.hidden, self.classes
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        match &self.arch {
            Architecture::Sequential { depth } | Architecture::Residual { depth } => {
                if *depth == 0 {
                    return fail("depth must be at least 1".into());
                }
            }
            Architecture::Multipath { paths, shared_stem } => {
                if paths.is_empty() {
                    return fail("multipath needs at least one path".into());
                }
                let min = (*shared_stem).max(1);
                if let Some((i, p)) = paths.iter().enumerate().find(|(_, &p)| p < min) {
                    return fail(format!(
                        "path {i} has depth {p}, below max(1, shared_stem = {shared_stem})"
                    ));
                }
            }
        }
        Ok(())
    }

    /// (role, fan_in, fan_out) of every convolution layer in parameter order.
    pub fn conv_layout(&self) -> Vec<(LayerRole, usize, usize)> {
        let (d, h) = (self.in_dim, self.hidden);
        let width = |first: bool| if first { d } else { h };
        match &self.arch {
            Architecture::Sequential { depth } | Architecture::Residual { depth } => (0..*depth)
                .map(|i| (LayerRole::Conv(i), width(i == 0), h))
                .collect(),
            Architecture::Multipath { paths, shared_stem } => {
                let mut out: Vec<_> = (0..*shared_stem)
                    .map(|i| (LayerRole::Stem(i), width(i == 0), h))
                    .collect();
                for (path, &depth) in paths.iter().enumerate() {
                    for position in 0..depth.saturating_sub(*shared_stem) {
                        let first = *shared_stem == 0 && position == 0;
                        out.push((LayerRole::Path { path, position }, width(first), h));
                    }
                }
                out
            }
        }
    }
}

/// Where a layer sits in its architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerRole {
    Conv(usize),
    Stem(usize),
    Path { path: usize, position: usize },
    Final,
}

impl fmt::Display for LayerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerRole::Conv(i) => write!(f, "conv{i}"),
            LayerRole::Stem(i) => write!(f, "stem{i}"),
            LayerRole::Path { path, position } => write!(f, "path{path}.conv{position}"),
            LayerRole::Final => write!(f, "final_linear"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub role: LayerRole,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Trainable weights of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub conv: Vec<Layer>,
    pub final_linear: Layer,
}

/// Identifies one tensor inside [`Parameters`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub role: LayerRole,
    pub is_bias: bool,
}

impl fmt::Display for ParamSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.role, if self.is_bias { "bias" } else { "weight" })
    }
}

/// Glorot-uniform weights and zero biases. Layers are drawn in parameter
/// order (stem, paths in declaration order, final linear), each weight in
/// row-major order, from the run's init stream.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<Parameters> {
    spec.validate()?;
    let mut rng = rng::stream(seed, Stream::Init);
    let mut layer = |role, fan_in: usize, fan_out: usize| {
        let bound = glorot_bound(fan_in, fan_out);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Layer {
            role,
            weight: Tensor::from_vec(fan_in, fan_out, data).expect("sized by construction"),
            bias: spec.bias.then(|| Tensor::zeros(1, fan_out)),
        }
    };
    let conv = spec
        .conv_layout()
        .into_iter()
        .map(|(role, i, o)| layer(role, i, o))
        .collect();
    let final_linear = layer(LayerRole::Final, spec.hidden, spec.classes);
    Ok(Parameters { conv, final_linear })
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Parameters {
    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.conv.iter().chain(std::iter::once(&self.final_linear))
    }

    /// Every tensor in a fixed order: per layer its weight then its bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers()
            .flat_map(|l| std::iter::once(&l.weight).chain(l.bias.as_ref()))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.conv
            .iter_mut()
            .chain(std::iter::once(&mut self.final_linear))
            .flat_map(|l| std::iter::once(&mut l.weight).chain(l.bias.as_mut()))
            .collect()
    }

    /// Slot descriptions aligned with [`Parameters::tensors`].
    pub fn slots(&self) -> Vec<ParamSlot> {
        self.layers()
            .flat_map(|l| {
                let w = ParamSlot {
                    role: l.role,
                    is_bias: false,
                };
                let b = l.bias.as_ref().map(|_| ParamSlot {
                    role: l.role,
                    is_bias: true,
                });
                std::iter::once(w).chain(b)
            })
            .collect()
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    /// Registers every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<'_>) -> BoundParams {
        let ids: Vec<NodeId> = self
            .tensors()
            .into_iter()
            .map(|t| tape.parameter(t.clone()))
            .collect();
        self.bind_ids(&ids)
    }

    /// Groups already-registered leaf ids (in [`Parameters::tensors`] order)
    /// by layer.
    pub fn bind_ids(&self, ids: &[NodeId]) -> BoundParams {
        let mut it = ids.iter().copied();
        let mut bind = |l: &Layer| BoundLayer {
            role: l.role,
            w: it.next().expect("one id per tensor"),
            b: l.bias.as_ref().map(|_| it.next().expect("one id per tensor")),
        };
        let conv = self.conv.iter().map(&mut bind).collect();
        let final_linear = bind(&self.final_linear);
        BoundParams {
            conv,
            final_linear,
            ids: ids.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub role: LayerRole,
    pub w: NodeId,
    pub b: Option<NodeId>,
}

/// Tape ids of a model's parameters.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub conv: Vec<BoundLayer>,
    pub final_linear: BoundLayer,
    ids: Vec<NodeId>,
}

impl BoundParams {
    /// Ids in [`Parameters::tensors`] order.
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Forward mode. Training draws dropout masks from the given stream.
pub enum Mode<'r> {
    Train(&'r mut rng::Rng),
    Eval,
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape<'_>, x: NodeId, p: f64) -> Result<NodeId> {
        match self {
            Mode::Train(rng) => tape.dropout(x, p, true, *rng),
            Mode::Eval => Ok(x),
        }
    }
}

fn conv<'g>(
    tape: &mut Tape<'g>,
    layer: &BoundLayer,
    operator: &'g CsrMatrix,
    h: NodeId,
    p: f64,
    mode: &mut Mode<'_>,
) -> Result<NodeId> {
    let run = |tape: &mut Tape<'g>, mode: &mut Mode<'_>| {
        let dropped = mode.dropout(tape, h, p)?;
        let (fan_in, fan_out) = tape.value(layer.w).shape();
        let linear = if fan_in > fan_out {
            // narrowing layer: propagate the smaller product
            let projected = tape.matmul_affine(dropped, layer.w, None)?;
            let propagated = tape.spmm(operator, projected)?;
            match layer.b {
                Some(b) => tape.add_bias(propagated, b)?,
                None => propagated,
            }
        } else {
            let propagated = tape.spmm(operator, dropped)?;
            tape.matmul_affine(propagated, layer.w, layer.b)?
        };
        tape.relu(linear)
    };
    run(tape, mode).map_err(|e| e.in_layer(layer.role.to_string()))
}

fn head(tape: &mut Tape<'_>, layer: &BoundLayer, h: NodeId) -> Result<NodeId> {
    let logits = tape
        .matmul_affine(h, layer.w, layer.b)
        .map_err(|e| e.in_layer(layer.role.to_string()))?;
    tape.log_softmax_rows(logits)
}

fn check_inputs(spec: &ModelSpec, params: &BoundParams, operator: &CsrMatrix, x: &Tensor) -> Result<()> {
    if !operator.is_square() {
        return Err(Error::NotSquare {
            rows: operator.num_rows(),
            cols: operator.num_cols(),
        });
    }
    if operator.num_rows() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "propagation operator vs features",
            lhs: (operator.num_rows(), operator.num_cols()),
            rhs: x.shape(),
        });
    }
    if x.cols() != spec.in_dim {
        return Err(Error::InvalidArgument(format!(
            "features have {} columns, spec expects {}",
            x.cols(),
            spec.in_dim
        )));
    }
    if params.conv.len() != spec.arch.conv_layers() {
        return Err(Error::InvalidArgument(format!(
            "{} conv layers bound, architecture has {}",
            params.conv.len(),
            spec.arch.conv_layers()
        )));
    }
    Ok(())
}

/// `H_l = relu(conv_l(H_{l-1}))` for every layer, then the classifier.
pub fn forward_sequential<'g>(
    tape: &mut Tape<'g>,
    spec: &ModelSpec,
    params: &BoundParams,
    operator: &'g CsrMatrix,
    x: NodeId,
    mut mode: Mode<'_>,
) -> Result<NodeId> {
    if !matches!(spec.arch, Architecture::Sequential { .. }) {
        return Err(Error::InvalidSpec("forward_sequential needs a sequential spec".into()));
    }
    check_inputs(spec, params, operator, tape.value(x))?;
    let mut h = x;
    for layer in &params.conv {
        h = conv(tape, layer, operator, h, spec.dropout, &mut mode)?;
    }
    head(tape, &params.final_linear, h)
}

/// Like the sequential stack but `H_l = relu(conv_l(H_{l-1})) + H_{l-1}` for
/// every layer after the first.
pub fn forward_residual<'g>(
    tape: &mut Tape<'g>,
    spec: &ModelSpec,
    params: &BoundParams,
    operator: &'g CsrMatrix,
    x: NodeId,
    mut mode: Mode<'_>,
) -> Result<NodeId> {
    if !matches!(spec.arch, Architecture::Residual { .. }) {
        return Err(Error::InvalidSpec("forward_residual needs a residual spec".into()));
    }
    check_inputs(spec, params, operator, tape.value(x))?;
    let mut h = x;
    for (i, layer) in params.conv.iter().enumerate() {
        let out = conv(tape, layer, operator, h, spec.dropout, &mut mode)?;
        h = if i == 0 {
            out
        } else {
            tape.elementwise_sum(&[out, h])
                .map_err(|e| e.in_layer(layer.role.to_string()))?
        };
    }
    head(tape, &params.final_linear, h)
}

/// Shared stem, then each path's own layers, then the sum of the path
/// outputs in declaration order feeds the classifier.
pub fn forward_multipath<'g>(
    tape: &mut Tape<'g>,
    spec: &ModelSpec,
    params: &BoundParams,
    operator: &'g CsrMatrix,
    x: NodeId,
    mut mode: Mode<'_>,
) -> Result<NodeId> {
    let Architecture::Multipath { paths, shared_stem } = &spec.arch else {
        return Err(Error::InvalidSpec("forward_multipath needs a multipath spec".into()));
    };
    check_inputs(spec, params, operator, tape.value(x))?;
    let mut layers = params.conv.iter();
    let mut stem = x;
    for layer in layers.by_ref().take(*shared_stem) {
        stem = conv(tape, layer, operator, stem, spec.dropout, &mut mode)?;
    }
    let mut outputs = Vec::with_capacity(paths.len());
    for &depth in paths {
        let mut h = stem;
        for layer in layers.by_ref().take(depth - shared_stem) {
            h = conv(tape, layer, operator, h, spec.dropout, &mut mode)?;
        }
        outputs.push(h);
    }
    let aggregate = tape.elementwise_sum(&outputs)?;
    head(tape, &params.final_linear, aggregate)
}

/// Dispatches on the architecture; returns the log-softmax output node.
pub fn forward<'g>(
    tape: &mut Tape<'g>,
    spec: &ModelSpec,
    params: &BoundParams,
    operator: &'g CsrMatrix,
    x: NodeId,
    mode: Mode<'_>,
) -> Result<NodeId> {
    match spec.arch {
        Architecture::Sequential { .. } => forward_sequential(tape, spec, params, operator, x, mode),
        Architecture::Residual { .. } => forward_residual(tape, spec, params, operator, x, mode),
        Architecture::Multipath { .. } => forward_multipath(tape, spec, params, operator, x, mode),
    }
}

fn layer_params(fan_in: usize, fan_out: usize, bias: bool) -> usize {
    fan_in * fan_out + if bias { fan_out } else { 0 }
}

/// Trainable scalars in the convolution layers only.
pub fn conv_param_count(spec: &ModelSpec) -> usize {
    spec.conv_layout()
        .into_iter()
        .map(|(_, i, o)| layer_params(i, o, spec.bias))
        .sum()
}

/// Trainable scalars including the final linear layer.
pub fn param_count(spec: &ModelSpec) -> usize {
    conv_param_count(spec) + layer_params(spec.hidden, spec.classes, spec.bias)
}
