//! Sparse adjacency storage and the normalized propagation operator
//! `D^-1/2 (A + I) D^-1/2` used by every convolution layer.

use crate::error::{Error, Result};
use crate::tensor::{axpy, Tensor};

/// Undirected edge list as ingested from disk or a generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeList {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

impl EdgeList {
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>) -> Self {
        EdgeList { num_nodes, edges }
    }

    /// Same undirected graph with each edge stored once as `(min, max)`,
    /// sorted.
    pub fn canonical(&self) -> EdgeList {
        let mut edges: Vec<_> = self.edges.iter().map(|&(s, t)| (s.min(t), s.max(t))).collect();
        edges.sort_unstable();
        edges.dedup();
        EdgeList::new(self.num_nodes, edges)
    }

    /// Upper-triangle edges of a symmetric adjacency, in canonical order.
    pub fn from_adjacency(a: &CsrMatrix) -> EdgeList {
        let edges = (0..a.num_rows())
            .flat_map(|r| a.row(r).filter(move |&(c, _)| c >= r).map(move |(c, _)| (r, c)))
            .collect();
        EdgeList::new(a.num_rows(), edges)
    }
}

/// Compressed sparse row matrix.
///
/// Invariants: `row_offsets` is non-decreasing, starts at 0 and ends at
/// `col_indices.len() == values.len()`; columns within a row are strictly
/// increasing and `< num_cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    num_rows: usize,
    num_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Assembles a matrix from raw parts, checking every structural invariant.
    pub fn from_parts(
        num_rows: usize,
        num_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("csr: {msg}")));
        if row_offsets.len() != num_rows + 1 {
            return bad(format!(
                "row_offsets has length {}, expected {}",
                row_offsets.len(),
                num_rows + 1
            ));
        }
        if row_offsets[0] != 0 {
            return bad("row_offsets[0] != 0".into());
        }
        if row_offsets[num_rows] != col_indices.len() || col_indices.len() != values.len() {
            return bad("row_offsets, col_indices and values disagree on nnz".into());
        }
        for r in 0..num_rows {
            let (lo, hi) = (row_offsets[r], row_offsets[r + 1]);
            if lo > hi {
                return bad(format!("row_offsets decreases at row {r}"));
            }
            let cols = &col_indices[lo..hi];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row {r} columns not strictly increasing"));
            }
            if cols.last().is_some_and(|&c| c >= num_cols) {
                return bad(format!("row {r} has a column >= {num_cols}"));
            }
        }
        Ok(CsrMatrix {
            num_rows,
            num_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            num_rows: n,
            num_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(num_rows: usize, num_cols: usize) -> Self {
        CsrMatrix {
            num_rows,
            num_cols,
            row_offsets: vec![0; num_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Keeps the nonzero entries of a dense matrix.
    pub fn from_dense(dense: &Tensor) -> Self {
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for r in 0..dense.rows() {
            for (c, &v) in dense.row(r).iter().enumerate() {
                if v != 0.0 {
                    col_indices.push(c);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        CsrMatrix {
            num_rows: dense.rows(),
            num_cols: dense.cols(),
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.num_rows, self.num_cols);
        for r in 0..self.num_rows {
            for (c, v) in self.row(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn num_cols(&self) -> usize {
        self.num_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_square(&self) -> bool {
        self.num_rows == self.num_cols
    }

    /// Stored `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_offsets[r]..self.row_offsets[r + 1];
        self.col_indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Stored value at `(r, c)`, if any.
    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        let range = self.row_offsets[r]..self.row_offsets[r + 1];
        self.col_indices[range.clone()]
            .binary_search(&c)
            .ok()
            .map(|k| self.values[range.start + k])
    }

    /// True when every stored `(i, j)` has a stored `(j, i)` of equal value.
    pub fn is_symmetric(&self) -> bool {
        self.is_square()
            && (0..self.num_rows).all(|r| self.row(r).all(|(c, v)| self.get(c, r) == Some(v)))
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.values[self.row_offsets[r]..self.row_offsets[r + 1]]
            .iter()
            .sum()
    }
}

/// Symmetric binary adjacency from an undirected edge list. Duplicates
/// collapse and an input self-loop is stored once.
pub fn build_csr(edges: &EdgeList) -> Result<CsrMatrix> {
    let n = edges.num_nodes;
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, t) in &edges.edges {
        if s >= n || t >= n {
            return Err(Error::EdgeOutOfRange {
                source_id: s,
                target_id: t,
                num_nodes: n,
            });
        }
        neighbors[s].push(t);
        if s != t {
            neighbors[t].push(s);
        }
    }
    let mut row_offsets = Vec::with_capacity(n + 1);
    row_offsets.push(0);
    let mut col_indices = Vec::new();
    for mut row in neighbors {
        row.sort_unstable();
        row.dedup();
        col_indices.extend(row);
        row_offsets.push(col_indices.len());
    }
    let values = vec![1.0; col_indices.len()];
    Ok(CsrMatrix {
        num_rows: n,
        num_cols: n,
        row_offsets,
        col_indices,
        values,
    })
}

/// Sets every diagonal entry to 1.0, overwriting existing diagonal values.
pub fn add_self_loops(a: &CsrMatrix) -> Result<CsrMatrix> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            rows: a.num_rows,
            cols: a.num_cols,
        });
    }
    let mut row_offsets = Vec::with_capacity(a.num_rows + 1);
    row_offsets.push(0);
    let mut col_indices = Vec::with_capacity(a.nnz() + a.num_rows);
    let mut values = Vec::with_capacity(a.nnz() + a.num_rows);
    for r in 0..a.num_rows {
        let mut placed = false;
        for (c, v) in a.row(r) {
            if !placed && c >= r {
                col_indices.push(r);
                values.push(1.0);
                placed = true;
                if c == r {
                    continue;
                }
            }
            col_indices.push(c);
            values.push(v);
        }
        if !placed {
            col_indices.push(r);
            values.push(1.0);
        }
        row_offsets.push(col_indices.len());
    }
    Ok(CsrMatrix {
        num_rows: a.num_rows,
        num_cols: a.num_cols,
        row_offsets,
        col_indices,
        values,
    })
}

/// `D^-1/2 Â D^-1/2` with `D` the row sums of `Â`. Keeps the sparsity pattern.
pub fn symmetric_normalize(a_hat: &CsrMatrix) -> Result<CsrMatrix> {
    if !a_hat.is_square() {
        return Err(Error::NotSquare {
            rows: a_hat.num_rows,
            cols: a_hat.num_cols,
        });
    }
    let mut degrees = Vec::with_capacity(a_hat.num_rows);
    for r in 0..a_hat.num_rows {
        if let Some((c, v)) = a_hat.row(r).find(|&(_, v)| v < 0.0) {
            return Err(Error::NegativeEntry {
                row: r,
                col: c,
                value: v,
            });
        }
        let deg = a_hat.row_sum(r);
        if deg <= 0.0 {
            return Err(Error::ZeroRowSum { row: r });
        }
        degrees.push(deg);
    }
    let mut values = a_hat.values.clone();
    for r in 0..a_hat.num_rows {
        for k in a_hat.row_offsets[r]..a_hat.row_offsets[r + 1] {
            values[k] /= (degrees[r] * degrees[a_hat.col_indices[k]]).sqrt();
        }
    }
    Ok(CsrMatrix {
        values,
        ..a_hat.clone()
    })
}

/// The propagation operator of a graph: `symmetric_normalize(add_self_loops(build_csr(edges)))`.
pub fn propagation_operator(edges: &EdgeList) -> Result<CsrMatrix> {
    symmetric_normalize(&add_self_loops(&build_csr(edges)?)?)
}

/// Sparse-dense product `a · x`. Each output row is accumulated in stored
/// column order, so results are bitwise reproducible.
pub fn spmm(a: &CsrMatrix, x: &Tensor) -> Result<Tensor> {
    if a.num_cols != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "spmm",
            lhs: (a.num_rows, a.num_cols),
            rhs: x.shape(),
        });
    }
    let mut out = Tensor::zeros(a.num_rows, x.cols());
    for r in 0..a.num_rows {
        let out_row = out.row_mut(r);
        for (c, v) in a.row(r) {
            axpy(v, x.row(c), out_row);
        }
    }
    Ok(out)
}

/// `aᵀ · x`, used for the backward pass of [`spmm`] on non-symmetric operators.
pub fn spmm_transpose(a: &CsrMatrix, x: &Tensor) -> Result<Tensor> {
    if a.num_rows != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "spmm_transpose",
            lhs: (a.num_cols, a.num_rows),
            rhs: x.shape(),
        });
    }
    let mut out = Tensor::zeros(a.num_cols, x.cols());
    for r in 0..a.num_rows {
        let x_row = x.row(r);
        for (c, v) in a.row(r) {
            axpy(v, x_row, out.row_mut(c));
        }
    }
    Ok(out)
}
