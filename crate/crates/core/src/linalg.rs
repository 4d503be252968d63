//! Sparse storage and direct solvers.
//!
//! All sparse matrices live in compressed sparse row form. Factorisations are
//! banded (Cholesky for SPD input, LU with partial pivoting otherwise) after an
//! optional reverse Cuthill-McKee reordering. On the structured meshes used in
//! this crate the band is `O(sqrt(N))`, which keeps a factorisation at
//! `O(N^2)` work and makes every solve deterministic.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is singular: zero pivot at row {pivot}")]
    Singular { pivot: usize },
    #[error("matrix is not positive definite: non-positive pivot at row {pivot}")]
    NotPositiveDefinite { pivot: usize },
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("invalid CSR structure: {0}")]
    InvalidStructure(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense coefficient vector.
pub type DenseVector = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from raw CSR arrays, checking every structural invariant.
    pub fn try_from_parts(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 {
            return Err(LinalgError::InvalidStructure(format!(
                "row_offsets has length {}, expected {}",
                row_offsets.len(),
                n_rows + 1
            )));
        }
        if col_indices.len() != values.len() {
            return Err(LinalgError::InvalidStructure(
                "col_indices and values differ in length".into(),
            ));
        }
        if row_offsets[0] != 0 || row_offsets[n_rows] != col_indices.len() {
            return Err(LinalgError::InvalidStructure(
                "row_offsets must start at 0 and end at nnz".into(),
            ));
        }
        for r in 0..n_rows {
            let (lo, hi) = (row_offsets[r], row_offsets[r + 1]);
            if lo > hi {
                return Err(LinalgError::InvalidStructure(format!(
                    "row_offsets decreases at row {r}"
                )));
            }
            for k in lo..hi {
                if col_indices[k] >= n_cols {
                    return Err(LinalgError::InvalidStructure(format!(
                        "column {} out of range in row {r}",
                        col_indices[k]
                    )));
                }
                if k > lo && col_indices[k] <= col_indices[k - 1] {
                    return Err(LinalgError::InvalidStructure(format!(
                        "columns not strictly increasing in row {r}"
                    )));
                }
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Compresses coordinate triplets; duplicate entries are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, c, _) in triplets {
            if r >= n_rows {
                return Err(LinalgError::IndexOutOfRange {
                    index: r,
                    dim: n_rows,
                });
            }
            if c >= n_cols {
                return Err(LinalgError::IndexOutOfRange {
                    index: c,
                    dim: n_cols,
                });
            }
            counts[r + 1] += 1;
        }
        for r in 0..n_rows {
            counts[r + 1] += counts[r];
        }
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        let mut next = counts.clone();
        for &(r, c, v) in triplets {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }

        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_offsets.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..n_rows {
            scratch.clear();
            scratch.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            scratch.sort_by_key(|&(c, _)| c);
            for &(c, v) in &scratch {
                if col_indices.len() > row_offsets[r] && *col_indices.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_indices.push(c);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Converts a row-major dense matrix, keeping only nonzero entries.
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut triplets = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n_rows, n_cols, &triplets).expect("dense input is well formed")
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
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

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Column indices and values stored in row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    /// Entry `(i, j)`, zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn spmv(&self, x: &[f64]) -> Result<DenseVector> {
        if x.len() != self.n_cols {
            return Err(LinalgError::DimensionMismatch {
                op: "spmv",
                expected: self.n_cols,
                got: x.len(),
            });
        }
        Ok((0..self.n_rows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum()
            })
            .collect())
    }

    /// `y = Aᵀ x`.
    pub fn spmv_transpose(&self, x: &[f64]) -> Result<DenseVector> {
        if x.len() != self.n_rows {
            return Err(LinalgError::DimensionMismatch {
                op: "spmv_transpose",
                expected: self.n_rows,
                got: x.len(),
            });
        }
        let mut y = vec![0.0; self.n_cols];
        for (i, &xi) in x.iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                y[j] += v * xi;
            }
        }
        Ok(y)
    }

    pub fn transpose(&self) -> Self {
        let mut triplets = Vec::with_capacity(self.nnz());
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            triplets.extend(cols.iter().zip(vals).map(|(&j, &v)| (j, i, v)));
        }
        Self::from_triplets(self.n_cols, self.n_rows, &triplets).expect("transpose is well formed")
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// `self + alpha * other` on the union sparsity pattern.
    pub fn add_scaled(&self, other: &CsrMatrix, alpha: f64) -> Result<Self> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(LinalgError::DimensionMismatch {
                op: "add_scaled",
                expected: self.n_rows * self.n_cols,
                got: other.n_rows * other.n_cols,
            });
        }
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for i in 0..self.n_rows {
            let (c, v) = self.row(i);
            triplets.extend(c.iter().zip(v).map(|(&j, &x)| (i, j, x)));
            let (c, v) = other.row(i);
            triplets.extend(c.iter().zip(v).map(|(&j, &x)| (i, j, alpha * x)));
        }
        Self::from_triplets(self.n_rows, self.n_cols, &triplets)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (i, row) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                row[j] += v;
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        (0..self.n_rows).all(|i| {
            let (cols, vals) = self.row(i);
            cols.iter()
                .zip(vals)
                .all(|(&j, &v)| (v - self.get(j, i)).abs() <= tol)
        })
    }

    /// Submatrix on the given rows and columns, re-indexed to local positions.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut col_map = vec![usize::MAX; self.n_cols];
        for (k, &c) in cols.iter().enumerate() {
            col_map[c] = k;
        }
        let mut triplets = Vec::new();
        for (r_local, &r) in rows.iter().enumerate() {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                if col_map[c] != usize::MAX {
                    triplets.push((r_local, col_map[c], v));
                }
            }
        }
        Self::from_triplets(rows.len(), cols.len(), &triplets).expect("submatrix is well formed")
    }
}

/// Requested factorisation kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    /// Symmetric positive definite input.
    Cholesky,
    /// General square input, partial pivoting.
    Lu,
}

/// Row/column ordering applied before factorising.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ordering {
    Natural,
    /// Reverse Cuthill-McKee, kept only if it narrows the band.
    #[default]
    Auto,
}

#[derive(Debug, Clone)]
enum BandFactors {
    Cholesky {
        p: usize,
        width: usize,
        data: Vec<f64>,
    },
    Lu {
        p: usize,
        q: usize,
        width: usize,
        data: Vec<f64>,
        pivots: Vec<usize>,
    },
}

/// A banded direct factorisation of a square sparse matrix.
#[derive(Debug, Clone)]
pub struct Factorization {
    n: usize,
    kind: FactorKind,
    /// `perm[new] = old`.
    perm: Vec<usize>,
    factors: BandFactors,
}

pub fn factorize(a: &CsrMatrix, kind: FactorKind) -> Result<Factorization> {
    factorize_with(a, kind, Ordering::default())
}

pub fn factorize_with(a: &CsrMatrix, kind: FactorKind, ordering: Ordering) -> Result<Factorization> {
    if a.n_rows != a.n_cols {
        return Err(LinalgError::NotSquare {
            rows: a.n_rows,
            cols: a.n_cols,
        });
    }
    let n = a.n_rows;
    let natural: Vec<usize> = (0..n).collect();
    let perm = match ordering {
        Ordering::Natural => natural,
        Ordering::Auto => {
            let rcm = reverse_cuthill_mckee(a);
            if bandwidths(a, &rcm).0 + bandwidths(a, &rcm).1
                < bandwidths(a, &natural).0 + bandwidths(a, &natural).1
            {
                rcm
            } else {
                natural
            }
        }
    };
    let (p, q) = bandwidths(a, &perm);
    let mut inv = vec![0usize; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let tiny = (n.max(1) as f64) * f64::EPSILON * a.max_abs();

    let factors = match kind {
        FactorKind::Cholesky => {
            let p = p.max(q);
            let width = p + 1;
            // row i holds columns i-p ..= i at offset col + p - i
            let mut data = vec![0.0; n * width];
            for old_i in 0..n {
                let i = inv[old_i];
                let (cols, vals) = a.row(old_i);
                for (&old_j, &v) in cols.iter().zip(vals) {
                    let j = inv[old_j];
                    if j <= i {
                        data[i * width + j + p - i] += v;
                    }
                }
            }
            for i in 0..n {
                let lo = i.saturating_sub(p);
                for j in lo..=i {
                    let klo = lo.max(j.saturating_sub(p));
                    let mut s = data[i * width + j + p - i];
                    for k in klo..j {
                        s -= data[i * width + k + p - i] * data[j * width + k + p - j];
                    }
                    if i == j {
                        if s <= tiny {
                            return Err(LinalgError::NotPositiveDefinite { pivot: perm[i] });
                        }
                        data[i * width + p] = s.sqrt();
                    } else {
                        data[i * width + j + p - i] = s / data[j * width + p];
                    }
                }
            }
            BandFactors::Cholesky { p, width, data }
        }
        FactorKind::Lu => {
            let width = 2 * p + q + 1;
            // row i holds columns i-p ..= i+p+q at offset col + p - i
            let mut data = vec![0.0; n * width];
            let idx = |i: usize, j: usize| i * width + j + p - i;
            for old_i in 0..n {
                let i = inv[old_i];
                let (cols, vals) = a.row(old_i);
                for (&old_j, &v) in cols.iter().zip(vals) {
                    data[idx(i, inv[old_j])] += v;
                }
            }
            let mut pivots = vec![0usize; n];
            for k in 0..n {
                let lmax = (k + p).min(n - 1);
                let umax = (k + p + q).min(n - 1);
                let mut piv = k;
                let mut best = data[idx(k, k)].abs();
                for i in k + 1..=lmax {
                    let v = data[idx(i, k)].abs();
                    if v > best {
                        best = v;
                        piv = i;
                    }
                }
                if best <= tiny {
                    return Err(LinalgError::Singular { pivot: perm[k] });
                }
                pivots[k] = piv;
                if piv != k {
                    for j in k..=umax {
                        data.swap(idx(k, j), idx(piv, j));
                    }
                }
                let diag = data[idx(k, k)];
                for i in k + 1..=lmax {
                    let l = data[idx(i, k)] / diag;
                    data[idx(i, k)] = l;
                    if l != 0.0 {
                        for j in k + 1..=umax {
                            data[idx(i, j)] -= l * data[idx(k, j)];
                        }
                    }
                }
            }
            BandFactors::Lu {
                p,
                q,
                width,
                data,
                pivots,
            }
        }
    };
    Ok(Factorization {
        n,
        kind,
        perm,
        factors,
    })
}

impl Factorization {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> FactorKind {
        self.kind
    }

    fn check_len(&self, len: usize, op: &'static str) -> Result<()> {
        if len != self.n {
            return Err(LinalgError::DimensionMismatch {
                op,
                expected: self.n,
                got: len,
            });
        }
        Ok(())
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<DenseVector> {
        self.check_len(b.len(), "solve")?;
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        self.solve_permuted(&mut y, false);
        Ok(self.unpermute(&y))
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<DenseVector> {
        self.check_len(b.len(), "solve_transpose")?;
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        self.solve_permuted(&mut y, true);
        Ok(self.unpermute(&y))
    }

    fn unpermute(&self, y: &[f64]) -> DenseVector {
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    fn solve_permuted(&self, b: &mut [f64], transpose: bool) {
        let n = self.n;
        match &self.factors {
            BandFactors::Cholesky { p, width, data } => {
                let (p, w) = (*p, *width);
                // L y = b
                for i in 0..n {
                    let lo = i.saturating_sub(p);
                    let mut s = b[i];
                    for k in lo..i {
                        s -= data[i * w + k + p - i] * b[k];
                    }
                    b[i] = s / data[i * w + p];
                }
                // Lᵀ x = y
                for i in (0..n).rev() {
                    let hi = (i + p).min(n - 1);
                    let mut s = b[i];
                    for k in i + 1..=hi {
                        s -= data[k * w + i + p - k] * b[k];
                    }
                    b[i] = s / data[i * w + p];
                }
            }
            BandFactors::Lu {
                p,
                q,
                width,
                data,
                pivots,
            } => {
                let (p, q, w) = (*p, *q, *width);
                let idx = |i: usize, j: usize| i * w + j + p - i;
                if !transpose {
                    for k in 0..n {
                        let piv = pivots[k];
                        if piv != k {
                            b.swap(k, piv);
                        }
                        let bk = b[k];
                        for i in k + 1..=(k + p).min(n - 1) {
                            b[i] -= data[idx(i, k)] * bk;
                        }
                    }
                    for k in (0..n).rev() {
                        let mut s = b[k];
                        for j in k + 1..=(k + p + q).min(n - 1) {
                            s -= data[idx(k, j)] * b[j];
                        }
                        b[k] = s / data[idx(k, k)];
                    }
                } else {
                    // Uᵀ y = b
                    for k in 0..n {
                        let mut s = b[k];
                        for j in k.saturating_sub(p + q)..k {
                            s -= data[idx(j, k)] * b[j];
                        }
                        b[k] = s / data[idx(k, k)];
                    }
                    for k in (0..n).rev() {
                        let mut s = b[k];
                        for i in k + 1..=(k + p).min(n - 1) {
                            s -= data[idx(i, k)] * b[i];
                        }
                        b[k] = s;
                        let piv = pivots[k];
                        if piv != k {
                            b.swap(k, piv);
                        }
                    }
                }
            }
        }
    }

    /// `Pᵀ L x` for a Cholesky factorisation `P A Pᵀ = L Lᵀ`, so that
    /// `x ~ N(0, I)` maps to a draw from `N(0, A)`.
    pub fn cholesky_lower_mul(&self, x: &[f64]) -> Result<DenseVector> {
        self.check_len(x.len(), "cholesky_lower_mul")?;
        let BandFactors::Cholesky { p, width, data } = &self.factors else {
            return Err(LinalgError::InvalidStructure(
                "cholesky_lower_mul needs a Cholesky factorisation".into(),
            ));
        };
        let (p, w) = (*p, *width);
        let y: Vec<f64> = (0..self.n)
            .map(|i| {
                (i.saturating_sub(p)..=i)
                    .map(|k| data[i * w + k + p - i] * x[k])
                    .sum()
            })
            .collect();
        Ok(self.unpermute(&y))
    }

    /// Row `i` of `A⁻¹`, computed as `A⁻ᵀ e_i`.
    pub fn precision_row(&self, i: usize) -> Result<DenseVector> {
        if i >= self.n {
            return Err(LinalgError::IndexOutOfRange {
                index: i,
                dim: self.n,
            });
        }
        let mut e = vec![0.0; self.n];
        e[i] = 1.0;
        self.solve_transpose(&e)
    }
}

pub fn solve(f: &Factorization, b: &[f64]) -> Result<DenseVector> {
    f.solve(b)
}

pub fn precision_row(f: &Factorization, i: usize) -> Result<DenseVector> {
    f.precision_row(i)
}

/// Lower and upper bandwidth of `P A Pᵀ` for `perm[new] = old`.
fn bandwidths(a: &CsrMatrix, perm: &[usize]) -> (usize, usize) {
    let mut inv = vec![0usize; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let (mut lower, mut upper) = (0usize, 0usize);
    for old_i in 0..a.n_rows {
        let i = inv[old_i];
        for &old_j in a.row(old_i).0 {
            let j = inv[old_j];
            if j < i {
                lower = lower.max(i - j);
            } else {
                upper = upper.max(j - i);
            }
        }
    }
    (lower, upper)
}

/// Reverse Cuthill-McKee ordering on the symmetrised pattern of `a`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.n_rows;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for &j in a.row(i).0 {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));
    for &start in &by_degree {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let head = order.len();
        order.push(start);
        let mut cursor = head;
        while cursor < order.len() {
            let v = order[cursor];
            cursor += 1;
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (degree[u], u));
            for u in next {
                visited[u] = true;
                order.push(u);
            }
        }
    }
    order.reverse();
    order
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn spmv_identity_and_zero() {
        let i3 = CsrMatrix::identity(3);
        assert_eq!(i3.spmv(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let z = CsrMatrix::zeros(3, 3);
        assert_eq!(z.spmv(&[4.0, -1.0, 2.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn spmv_rejects_bad_length() {
        let err = CsrMatrix::identity(3).spmv(&[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, LinalgError::DimensionMismatch { .. }));
    }

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let m = CsrMatrix::from_triplets(2, 3, &[(1, 2, 1.0), (0, 1, 2.0), (1, 0, 3.0), (1, 2, 4.0)])
            .unwrap();
        assert_eq!(m.row_offsets(), &[0, 1, 3]);
        assert_eq!(m.col_indices(), &[1, 0, 2]);
        assert_eq!(m.values(), &[2.0, 3.0, 5.0]);
    }

    #[test]
    fn structure_validation() {
        assert!(CsrMatrix::try_from_parts(2, 2, vec![0, 1, 2], vec![1, 1], vec![1.0, 1.0]).is_ok());
        assert!(CsrMatrix::try_from_parts(1, 2, vec![0, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::try_from_parts(1, 2, vec![0, 1], vec![2], vec![1.0]).is_err());
    }

    #[test]
    fn identity_solve_returns_rhs() {
        for kind in [FactorKind::Cholesky, FactorKind::Lu] {
            let f = factorize(&CsrMatrix::identity(4), kind).unwrap();
            assert_eq!(f.solve(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![1.0, -2.0, 3.0, 0.5]);
        }
    }

    #[test]
    fn spd_two_by_two_hand_elimination() {
        // [[4,1],[1,3]] x = (1,2): det 11, x = (3-2, 8-1)/11
        let a = CsrMatrix::from_dense(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        for kind in [FactorKind::Cholesky, FactorKind::Lu] {
            let x = factorize(&a, kind).unwrap().solve(&[1.0, 2.0]).unwrap();
            assert_close(&x, &[1.0 / 11.0, 7.0 / 11.0], 1e-15);
        }
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let a = CsrMatrix::from_dense(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(
            factorize(&a, FactorKind::Lu),
            Err(LinalgError::Singular { .. })
        ));
        assert!(matches!(
            factorize(&a, FactorKind::Cholesky),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
        let z = CsrMatrix::from_dense(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(
            factorize_with(&z, FactorKind::Lu, Ordering::Natural).unwrap_err(),
            LinalgError::Singular { pivot: 1 }
        );
    }

    #[test]
    fn lu_needs_pivoting() {
        let a = CsrMatrix::from_dense(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let f = factorize(&a, FactorKind::Lu).unwrap();
        assert_close(&f.solve(&[2.0, 3.0]).unwrap(), &[3.0, 2.0], 1e-15);
        assert_close(&f.solve_transpose(&[2.0, 3.0]).unwrap(), &[3.0, 2.0], 1e-15);
    }

    #[test]
    fn precision_row_diagonal() {
        let a = CsrMatrix::from_diagonal(&[2.0, 4.0]);
        let f = factorize(&a, FactorKind::Cholesky).unwrap();
        assert_close(&f.precision_row(0).unwrap(), &[0.5, 0.0], 1e-15);
        assert_eq!(
            f.precision_row(2).unwrap_err(),
            LinalgError::IndexOutOfRange { index: 2, dim: 2 }
        );
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = CsrMatrix::from_triplets(
            5,
            5,
            &[(0, 4, 1.0), (4, 0, 1.0), (1, 3, 1.0), (2, 2, 1.0), (0, 0, 1.0)],
        )
        .unwrap();
        let mut p = reverse_cuthill_mckee(&a);
        p.sort_unstable();
        assert_eq!(p, vec![0, 1, 2, 3, 4]);
    }
}
