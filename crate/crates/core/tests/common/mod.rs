//! Dense reference implementation and random model generators shared by the
//! integration tests. Nothing here touches the tape or the sparse types.

#![allow(dead_code)]

use mpgcn::autodiff::Tape;
use mpgcn::graph::{propagation_operator, EdgeList};
use mpgcn::model::{forward, init_params, Architecture, Mode, ModelSpec, Parameters};
use mpgcn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub type Dense = Vec<Vec<f64>>;

pub fn to_dense(t: &Tensor) -> Dense {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// `D^-1/2 (A + I) D^-1/2` built entry by entry from the edge list.
pub fn dense_operator(n: usize, edges: &[(usize, usize)]) -> Dense {
    let mut a = vec![vec![0.0; n]; n];
    for &(s, t) in edges {
        a[s][t] = 1.0;
        a[t][s] = 1.0;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    (0..n)
        .map(|i| (0..n).map(|j| a[i][j] / (deg[i] * deg[j]).sqrt()).collect())
        .collect()
}

pub fn matmul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Dense, b: &Dense) -> Dense {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn affine(h: &Dense, w: &Tensor, b: Option<&Tensor>) -> Dense {
    let mut out = matmul(h, &to_dense(w));
    if let Some(b) = b {
        for row in &mut out {
            for (j, v) in row.iter_mut().enumerate() {
                *v += b.get(0, j);
            }
        }
    }
    out
}

fn conv(op: &Dense, h: &Dense, w: &Tensor, b: Option<&Tensor>) -> Dense {
    affine(&matmul(op, h), w, b)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect()
}

fn log_softmax(z: Dense) -> Dense {
    z.into_iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            r.into_iter().map(|v| v - lse).collect()
        })
        .collect()
}

/// Evaluation-mode log-probabilities computed without the library's
/// forward code.
pub fn dense_forward(spec: &ModelSpec, params: &Parameters, op: &Dense, x: &Dense) -> Dense {
    let layer = |i: usize| (&params.conv[i].weight, params.conv[i].bias.as_ref());
    let hidden = match &spec.arch {
        Architecture::Sequential { depth } => {
            let mut h = x.clone();
            for i in 0..*depth {
                let (w, b) = layer(i);
                h = conv(op, &h, w, b);
            }
            h
        }
        Architecture::Residual { depth } => {
            let mut h = x.clone();
            for i in 0..*depth {
                let (w, b) = layer(i);
                let out = conv(op, &h, w, b);
                h = if i == 0 { out } else { add(&out, &h) };
            }
            h
        }
        Architecture::Multipath { paths, shared_stem } => {
            let mut next = 0;
            let mut stem = x.clone();
            for _ in 0..*shared_stem {
                let (w, b) = layer(next);
                stem = conv(op, &stem, w, b);
                next += 1;
            }
            let mut total: Option<Dense> = None;
            for &p in paths {
                let mut h = stem.clone();
                for _ in *shared_stem..p {
                    let (w, b) = layer(next);
                    h = conv(op, &h, w, b);
                    next += 1;
                }
                total = Some(match total {
                    None => h,
                    Some(t) => add(&t, &h),
                });
            }
            total.expect("at least one path")
        }
    };
    let f = &params.final_linear;
    log_softmax(affine(&hidden, &f.weight, f.bias.as_ref()))
}

/// A random graph, features, spec and parameters.
pub struct Trial {
    pub graph: EdgeList,
    pub features: Tensor,
    pub spec: ModelSpec,
    pub params: Parameters,
}

pub fn random_arch(rng: &mut impl Rng) -> Architecture {
    let kind = rng.random_range(0..3);
    random_arch_of(kind, rng)
}

/// `kind` 0, 1, 2 selects sequential, residual or multipath.
pub fn random_arch_of(kind: usize, rng: &mut impl Rng) -> Architecture {
    match kind {
        0 => Architecture::Sequential { depth: rng.random_range(1..=4) },
        1 => Architecture::Residual { depth: rng.random_range(1..=4) },
        _ => {
            let shared_stem = rng.random_range(0..=2);
            let count = rng.random_range(1..=3);
            let paths = (0..count)
                .map(|_| rng.random_range(shared_stem.max(1)..=shared_stem + 3))
                .collect();
            Architecture::Multipath { paths, shared_stem }
        }
    }
}

pub fn random_trial(seed: u64, max_nodes: usize) -> Trial {
    trial_with(seed, max_nodes, None)
}

pub fn random_trial_of_kind(seed: u64, max_nodes: usize, kind: usize) -> Trial {
    trial_with(seed, max_nodes, Some(kind))
}

fn trial_with(seed: u64, max_nodes: usize, kind: Option<usize>) -> Trial {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_nodes);
    let density: f64 = rng.random_range(0.0..0.5);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                edges.push((i, j));
            }
        }
    }
    let spec = ModelSpec {
        arch: match kind {
            Some(k) => random_arch_of(k, &mut rng),
            None => random_arch(&mut rng),
        },
        in_dim: rng.random_range(1..=6),
        hidden: rng.random_range(1..=6),
        classes: rng.random_range(2..=4),
        dropout: 0.5,
        bias: rng.random_bool(0.7),
    };
    let mut params = init_params(&spec, seed).expect("valid spec");
    for layer in params.conv.iter_mut().chain(std::iter::once(&mut params.final_linear)) {
        if let Some(b) = layer.bias.as_mut() {
            for v in b.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    let features = Tensor::from_vec(
        n,
        spec.in_dim,
        (0..n * spec.in_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("sized by construction");
    Trial {
        graph: EdgeList::new(n, edges),
        features,
        spec,
        params,
    }
}

/// Evaluation-mode log-probabilities from the library.
pub fn library_forward(trial: &Trial) -> Tensor {
    let op = propagation_operator(&trial.graph).expect("valid graph");
    let mut tape = Tape::new();
    let bound = trial.params.bind(&mut tape);
    let x = tape.constant(trial.features.clone());
    let out = forward(&mut tape, &trial.spec, &bound, &op, x, Mode::Eval).expect("forward");
    tape.value(out).clone()
}

/// Largest absolute difference between the library and the dense oracle.
pub fn oracle_gap(trial: &Trial) -> f64 {
    let ours = library_forward(trial);
    let op = dense_operator(trial.graph.num_nodes, &trial.graph.edges);
    let reference = dense_forward(&trial.spec, &trial.params, &op, &to_dense(&trial.features));
    let mut gap: f64 = 0.0;
    for (r, row) in reference.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            gap = gap.max((ours.get(r, c) - v).abs());
        }
    }
    gap
}
