//! Finite-difference verification of every tape operation and of complete
//! models on a small block-model graph.

use std::fmt;

use rand::Rng as _;

use crate::autodiff::{check_gradients, GradCheckReport, NodeId, Tape};
use crate::data::{generate_sbm, SbmParams};
use crate::error::Result;
use crate::graph::propagation_operator;
use crate::model::{forward, init_params, Architecture, ModelSpec, Mode};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Bound for single operations evaluated away from ReLU kinks.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Bound for whole models, where a perturbation may cross a kink.
pub const MODEL_TOLERANCE: f64 = 1e-4;

const OP_EPS: f64 = 1e-5;
const MODEL_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:>6} entries  max_rel_error {:.3e}  (< {:e})  {}",
            self.name,
            self.report.entries_checked,
            self.report.max_rel_error,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn uniform(rows: usize, cols: usize, rng: &mut rng::Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).expect("length matches shape")
}

/// Entries in `±[0.1, 1)`, clear of the ReLU kink at zero.
fn off_kink(rows: usize, cols: usize, rng: &mut rng::Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("length matches shape")
}

/// Reduces `y` to `Σ c_ij · y_ij` through two fixed random contractions.
fn probe<'g>(tape: &mut Tape<'g>, y: NodeId, left: &Tensor, right: &Tensor) -> Result<NodeId> {
    let r = tape.constant(right.clone());
    let col = tape.matmul_affine(y, r, None)?;
    let l = tape.constant(left.clone());
    tape.matmul_affine(l, col, None)
}

fn probe_weights(rows: usize, cols: usize, rng: &mut rng::Rng) -> (Tensor, Tensor) {
    (uniform(1, rows, rng), uniform(cols, 1, rng))
}

/// Runs every check and returns one outcome per operation or model.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = rng::stream(seed, Stream::GradCheck);
    let graph = generate_sbm(&SbmParams {
        blocks: 3,
        per_block: 4,
        p_intra: 0.8,
        p_inter: 0.1,
        features: 6,
        seed,
    })?;
    let operator = propagation_operator(&graph.graph)?;
    let n = graph.num_nodes();
    let mut out = Vec::new();
    let mut op = |name: &str, report: GradCheckReport| {
        out.push(CheckOutcome {
            name: name.to_string(),
            tolerance: OP_TOLERANCE,
            report,
        })
    };

    let (l, r) = probe_weights(5, 4, &mut rng);
    let params = [uniform(5, 3, &mut rng), uniform(3, 4, &mut rng), uniform(1, 4, &mut rng)];
    op(
        "matmul_affine",
        check_gradients(&params, OP_EPS, |t, p| {
            let y = t.matmul_affine(p[0], p[1], Some(p[2]))?;
            probe(t, y, &l, &r)
        })?,
    );

    let (l, r) = probe_weights(5, 4, &mut rng);
    let params = [uniform(5, 4, &mut rng), uniform(1, 4, &mut rng)];
    op(
        "add_bias",
        check_gradients(&params, OP_EPS, |t, p| {
            let y = t.add_bias(p[0], p[1])?;
            probe(t, y, &l, &r)
        })?,
    );

    let (l, r) = probe_weights(n, 3, &mut rng);
    let params = [uniform(n, 3, &mut rng)];
    op(
        "spmm",
        check_gradients(&params, OP_EPS, |t, p| {
            let y = t.spmm(&operator, p[0])?;
            probe(t, y, &l, &r)
        })?,
    );

    let (l, r) = probe_weights(6, 4, &mut rng);
    let params = [off_kink(6, 4, &mut rng)];
    op(
        "relu",
        check_gradients(&params, OP_EPS, |t, p| {
            let y = t.relu(p[0])?;
            probe(t, y, &l, &r)
        })?,
    );

    let params = [uniform(6, 4, &mut rng)];
    op(
        "dropout",
        check_gradients(&params, OP_EPS, |t, p| {
            let mut mask_rng = rng::stream(seed, Stream::Dropout);
            let y = t.dropout(p[0], 0.5, true, &mut mask_rng)?;
            probe(t, y, &l, &r)
        })?,
    );

    let params = [uniform(6, 4, &mut rng), uniform(6, 4, &mut rng), uniform(6, 4, &mut rng)];
    op(
        "elementwise_sum",
        check_gradients(&params, OP_EPS, |t, p| {
            let y = t.elementwise_sum(p)?;
            probe(t, y, &l, &r)
        })?,
    );

    let params = [uniform(6, 4, &mut rng)];
    op(
        "log_softmax_rows",
        check_gradients(&params, OP_EPS, |t, p| {
            let y = t.log_softmax_rows(p[0])?;
            probe(t, y, &l, &r)
        })?,
    );

    let labels = [0, 3, 1, 2, 2, 0];
    let params = [uniform(6, 4, &mut rng)];
    op(
        "masked_nll",
        check_gradients(&params, OP_EPS, |t, p| {
            let y = t.log_softmax_rows(p[0])?;
            t.masked_nll(y, &labels, &[0, 2, 3, 5])
        })?,
    );

    let archs = [
        ("gcn depth 3", Architecture::Sequential { depth: 3 }),
        ("resgcn depth 3", Architecture::Residual { depth: 3 }),
        (
            "mpgcn paths [1,2]",
            Architecture::Multipath {
                paths: vec![1, 2],
                shared_stem: 0,
            },
        ),
    ];
    let all: Vec<usize> = (0..n).collect();
    for (name, arch) in archs {
        let spec = ModelSpec {
            arch,
            in_dim: graph.num_features(),
            hidden: 5,
            classes: graph.num_classes,
            dropout: 0.5,
            bias: true,
        };
        let params = init_params(&spec, seed)?;
        let report = check_gradients(&params.tensors().into_iter().cloned().collect::<Vec<_>>(), MODEL_EPS, |t, p| {
            let bound = params.bind_ids(p);
            let x = t.constant(graph.features.clone());
            let mut mask_rng = rng::stream(seed, Stream::Dropout);
            let logp = forward(t, &spec, &bound, &operator, x, Mode::Train(&mut mask_rng))?;
            t.masked_nll(logp, &graph.labels, &all)
        })?;
        out.push(CheckOutcome {
            name: format!("model {name}"),
            tolerance: MODEL_TOLERANCE,
            report,
        });
    }
    Ok(out)
}
