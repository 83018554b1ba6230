//! Reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so every operation only refers
//! to nodes with smaller ids and a single reverse sweep visits them in
//! topological order. Only the operations the three architectures need are
//! supported.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{spmm, spmm_transpose, CsrMatrix};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<'g> {
    Leaf,
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    Spmm {
        operator: &'g CsrMatrix,
        h: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        // 0 for dropped entries, 1/(1-p) for kept ones
        mask: Vec<f64>,
    },
    Sum {
        xs: Vec<NodeId>,
    },
    LogSoftmax {
        x: NodeId,
    },
    MaskedNll {
        logp: NodeId,
        // (row, class) pairs
        targets: Vec<(usize, usize)>,
    },
}

impl Op<'_> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "matmul_affine",
            Op::AddBias { .. } => "add_bias",
            Op::Spmm { .. } => "spmm",
            Op::Relu { .. } => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Sum { .. } => "elementwise_sum",
            Op::LogSoftmax { .. } => "log_softmax_rows",
            Op::MaskedNll { .. } => "masked_nll",
        }
    }
}

#[derive(Debug)]
struct Node<'g> {
    op: Op<'g>,
    value: Cow<'g, Tensor>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<'g> {
    nodes: Vec<Node<'g>>,
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient (input features).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Cow::Owned(value), false)
    }

    /// Like [`Tape::constant`] but borrows the tensor instead of owning it.
    pub fn constant_ref(&mut self, value: &'g Tensor) -> NodeId {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    /// Leaf whose gradient is tracked (weights and biases).
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Cow::Owned(value), true)
    }

    fn push_leaf(&mut self, value: Cow<'g, Tensor>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Whether gradients flow back to `id`.
    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "node {} not on this tape ({} nodes)",
                id.0,
                self.nodes.len()
            )))
        }
    }

    fn push(&mut self, op: Op<'g>, value: Tensor, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|&i| self.requires_grad(i));
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// `x · w (+ b)`, with `b` a 1×cols(w) row broadcast over the rows of `x`.
    pub fn matmul_affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        self.check_id(x)?;
        self.check_id(w)?;
        let mut value = self.value(x).matmul(self.value(w)).map_err(|_| Error::ShapeMismatch {
            op: "matmul_affine",
            lhs: self.value(x).shape(),
            rhs: self.value(w).shape(),
        })?;
        if let Some(b) = b {
            self.check_id(b)?;
            let bias = self.value(b);
            if bias.shape() != (1, value.cols()) {
                return Err(Error::ShapeMismatch {
                    op: "matmul_affine bias",
                    lhs: (1, value.cols()),
                    rhs: bias.shape(),
                });
            }
            for r in 0..value.rows() {
                for (v, bj) in value.row_mut(r).iter_mut().zip(bias.data()) {
                    *v += bj;
                }
            }
        }
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Op::Affine { x, w, b }, value, &inputs)
    }

    /// Adds the `1×cols` row `b` to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        self.check_id(b)?;
        let bias = self.value(b);
        let mut value = self.value(x).clone();
        if bias.shape() != (1, value.cols()) {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: value.shape(),
                rhs: bias.shape(),
            });
        }
        for r in 0..value.rows() {
            for (v, bj) in value.row_mut(r).iter_mut().zip(bias.data()) {
                *v += bj;
            }
        }
        self.push(Op::AddBias { x, b }, value, &[x, b])
    }

    /// `operator · h` with a constant sparse operator.
    pub fn spmm(&mut self, operator: &'g CsrMatrix, h: NodeId) -> Result<NodeId> {
        self.check_id(h)?;
        let value = spmm(operator, self.value(h))?;
        self.push(Op::Spmm { operator, h }, value, &[h])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = v.max(0.0);
        }
        self.push(Op::Relu { x }, value, &[x])
    }

    /// Inverted dropout. Returns `x` itself when not training or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: NodeId,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        self.check_id(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let input = self.value(x);
        let mut mask: Vec<f64> = (0..input.data().len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = input.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_vec(input.rows(), input.cols(), data)?;
        if !self.requires_grad(x) {
            // only backward reads the mask
            mask = Vec::new();
        }
        self.push(Op::Dropout { x, mask }, value, &[x])
    }

    pub fn elementwise_sum(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("elementwise_sum of no inputs".into()))?;
        self.check_id(first)?;
        let mut value = self.value(first).clone();
        for &x in rest {
            self.check_id(x)?;
            value.add_assign(self.value(x)).map_err(|_| Error::ShapeMismatch {
                op: "elementwise_sum",
                lhs: self.value(first).shape(),
                rhs: self.value(x).shape(),
            })?;
        }
        self.push(Op::Sum { xs: xs.to_vec() }, value, xs)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let input = self.value(x);
        if input.cols() == 0 {
            return Err(Error::InvalidArgument("log_softmax over zero columns".into()));
        }
        let mut value = input.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_norm = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= log_norm;
            }
        }
        self.push(Op::LogSoftmax { x }, value, &[x])
    }

    /// Mean negative log-likelihood over the rows in `mask`; `labels` is
    /// indexed by row.
    pub fn masked_nll(&mut self, logp: NodeId, labels: &[usize], mask: &[usize]) -> Result<NodeId> {
        self.check_id(logp)?;
        if mask.is_empty() {
            return Err(Error::InvalidArgument("masked_nll with empty mask".into()));
        }
        let lp = self.value(logp);
        let mut targets = Vec::with_capacity(mask.len());
        let mut total = 0.0;
        for &row in mask {
            if row >= lp.rows() || row >= labels.len() {
                return Err(Error::InvalidArgument(format!(
                    "mask row {row} out of range ({} rows)",
                    lp.rows()
                )));
            }
            let class = labels[row];
            if class >= lp.cols() {
                return Err(Error::InvalidArgument(format!(
                    "label {class} of row {row} out of range for {} classes",
                    lp.cols()
                )));
            }
            total += lp.get(row, class);
            targets.push((row, class));
        }
        let value = Tensor::from_vec(1, 1, vec![-total / mask.len() as f64])?;
        self.push(Op::MaskedNll { logp, targets }, value, &[logp])
    }

    /// Reverse sweep from a scalar `root`. Gradients accumulate across every
    /// consumer of a node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.check_id(root)?;
        if self.value(root).shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(1, 1, 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut contributions: Vec<(NodeId, Tensor)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    if self.requires_grad(*x) {
                        contributions.push((*x, g.matmul_t(self.value(*w))?));
                    }
                    if self.requires_grad(*w) {
                        contributions.push((*w, self.value(*x).t_matmul(&g)?));
                    }
                    if let Some(b) = b {
                        if self.requires_grad(*b) {
                            contributions.push((*b, g.column_sums()));
                        }
                    }
                }
                Op::AddBias { x, b } => {
                    if self.requires_grad(*x) {
                        contributions.push((*x, g.clone()));
                    }
                    if self.requires_grad(*b) {
                        contributions.push((*b, g.column_sums()));
                    }
                }
                Op::Spmm { operator, h } => {
                    if self.requires_grad(*h) {
                        contributions.push((*h, spmm_transpose(operator, &g)?));
                    }
                }
                Op::Relu { x } => {
                    if self.requires_grad(*x) {
                        let mut dx = g.clone();
                        for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                            if v <= 0.0 {
                                *d = 0.0;
                            }
                        }
                        contributions.push((*x, dx));
                    }
                }
                Op::Dropout { x, mask } => {
                    if self.requires_grad(*x) {
                        let mut dx = g.clone();
                        for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                            *d *= m;
                        }
                        contributions.push((*x, dx));
                    }
                }
                Op::Sum { xs } => {
                    for &x in xs {
                        if self.requires_grad(x) {
                            contributions.push((x, g.clone()));
                        }
                    }
                }
                Op::LogSoftmax { x } => {
                    if self.requires_grad(*x) {
                        let y = &node.value;
                        let mut dx = g.clone();
                        for r in 0..dx.rows() {
                            let total: f64 = g.row(r).iter().sum();
                            for (d, yv) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                                *d -= yv.exp() * total;
                            }
                        }
                        contributions.push((*x, dx));
                    }
                }
                Op::MaskedNll { logp, targets } => {
                    if self.requires_grad(*logp) {
                        let (rows, cols) = self.value(*logp).shape();
                        let mut dx = Tensor::zeros(rows, cols);
                        let scale = -g.get(0, 0) / targets.len() as f64;
                        for &(r, c) in targets {
                            dx.set(r, c, dx.get(r, c) + scale);
                        }
                        contributions.push((*logp, dx));
                    }
                }
            }
            for (target, contribution) in contributions {
                if !contribution.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("backward of {}", node.op.name()),
                    });
                }
                match &mut grads[target.0] {
                    Some(existing) => existing.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
            // leaves keep their gradient for the caller
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of the leaves reached by a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when no path from the root reaches it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, with zeros for unreached nodes.
    pub fn get_or_zeros(&self, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
}

/// Relative error normalized by `max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares tape gradients of `loss_fn` with central differences over every
/// entry of every parameter. `loss_fn` must be deterministic: it receives a
/// fresh tape and the ids of `params` registered on it, and returns a scalar.
pub fn check_gradients<'g, F>(params: &[Tensor], eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'g>, &[NodeId]) -> Result<NodeId>,
{
    let entries: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.data().len()).map(move |e| (p, e)))
        .collect();
    check_entries(params, eps, &entries, loss_fn)
}

/// Like [`check_gradients`] but checks at most `count` entries chosen
/// uniformly without replacement from a seeded stream.
pub fn check_gradients_sampled<'g, F>(
    params: &[Tensor],
    eps: f64,
    count: usize,
    seed: u64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'g>, &[NodeId]) -> Result<NodeId>,
{
    use rand::seq::SliceRandom;
    let mut entries: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.data().len()).map(move |e| (p, e)))
        .collect();
    if entries.len() > count {
        let mut rng = crate::rng::stream(seed, crate::rng::Stream::GradCheck);
        entries.shuffle(&mut rng);
        entries.truncate(count);
        entries.sort_unstable();
    }
    check_entries(params, eps, &entries, loss_fn)
}

fn check_entries<'g, F>(
    params: &[Tensor],
    eps: f64,
    entries: &[(usize, usize)],
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'g>, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.parameter(v.clone())).collect();
        let root = loss_fn(&mut tape, &ids)?;
        let loss = tape.value(root).get(0, 0);
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "loss".into() });
        }
        Ok(loss)
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|v| tape.parameter(v.clone())).collect();
    let root = loss_fn(&mut tape, &ids)?;
    if !tape.value(root).get(0, 0).is_finite() {
        return Err(Error::NonFinite { op: "loss".into() });
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.get_or_zeros(id)).collect();

    let mut perturbed = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        entries_checked: 0,
        worst: (0, 0),
    };
    for &(p, e) in entries {
        let original = params[p].data()[e];
        perturbed[p].data_mut()[e] = original + eps;
        let plus = evaluate(&perturbed)?;
        perturbed[p].data_mut()[e] = original - eps;
        let minus = evaluate(&perturbed)?;
        perturbed[p].data_mut()[e] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[p].data()[e], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (p, e);
        }
        report.entries_checked += 1;
    }
    Ok(report)
}
