//! Standard-form linear programs `min cᵀx  s.t.  Ax ≥ b, x ≥ 0` and a
//! revised simplex solver for them.

mod eta;
pub mod lpfile;
pub mod simplex;

use std::collections::HashMap;
use std::fmt::Debug;
use std::hash::Hash;

use thiserror::Error;

pub use simplex::{dual_values, solve, solve_with, SolveOutcome, SolveStatus, SolverOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("non-finite coefficient in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("duplicate {what} key: {key}")]
    DuplicateKey { what: &'static str, key: String },
    #[error("iteration limit of {0} reached without convergence")]
    IterationLimit(usize),
    #[error("basis became numerically singular during refactorization")]
    SingularBasis,
    #[error("dual values requested for a {0:?} outcome")]
    NotOptimal(SolveStatus),
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn empty(n_cols: usize) -> Self {
        CsrMatrix { n_rows: 0, n_cols, row_ptr: vec![0], col_idx: Vec::new(), vals: Vec::new() }
    }

    /// Appends a row. Duplicate column entries are summed; exact zeros are dropped.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        let mut row: Vec<(usize, f64)> = entries.to_vec();
        row.sort_by_key(|&(j, _)| j);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for (j, v) in row {
            assert!(j < self.n_cols, "column {j} out of range {}", self.n_cols);
            match merged.last_mut() {
                Some((lj, lv)) if *lj == j => *lv += v,
                _ => merged.push((j, v)),
            }
        }
        for (j, v) in merged {
            if v != 0.0 {
                self.col_idx.push(j);
                self.vals.push(v);
            }
        }
        self.row_ptr.push(self.col_idx.len());
        self.n_rows += 1;
    }

    pub fn from_dense(rows: &[Vec<f64>], n_cols: usize) -> Self {
        let mut m = CsrMatrix::empty(n_cols);
        for r in rows {
            let entries: Vec<(usize, f64)> = r.iter().copied().enumerate().collect();
            m.push_row(&entries);
        }
        m
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[s..e].iter().copied().zip(self.vals[s..e].iter().copied())
    }

    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        self.row(i).map(|(j, v)| v * x[j]).sum()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row_dot(i, x)).collect()
    }

    /// `Aᵀy`.
    pub fn tmul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                for (j, v) in self.row(i) {
                    out[j] += v * yi;
                }
            }
        }
        out
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map(|(_, v)| v).unwrap_or(0.0)
    }

    /// Column-major copy as (row index, value) lists.
    pub fn columns(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cols = vec![Vec::new(); self.n_cols];
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                cols[j].push((i, v));
            }
        }
        cols
    }

    /// Returns a copy with columns reordered so that new column `k` is old column `perm[k]`.
    pub fn permute_columns(&self, perm: &[usize]) -> CsrMatrix {
        let mut inv = vec![0; perm.len()];
        for (k, &old) in perm.iter().enumerate() {
            inv[old] = k;
        }
        let mut m = CsrMatrix::empty(self.n_cols);
        for i in 0..self.n_rows {
            let entries: Vec<(usize, f64)> = self.row(i).map(|(j, v)| (inv[j], v)).collect();
            m.push_row(&entries);
        }
        m
    }
}

/// Bijection between keys and dense indices `0..len`.
#[derive(Debug, Clone)]
pub struct KeyIndex<K> {
    keys: Vec<K>,
    lookup: HashMap<K, usize>,
}

impl<K: Clone + Eq + Hash + Debug> KeyIndex<K> {
    pub fn new() -> Self {
        KeyIndex { keys: Vec::new(), lookup: HashMap::new() }
    }

    pub fn from_keys(keys: Vec<K>, what: &'static str) -> Result<Self, LpError> {
        let mut idx = KeyIndex::new();
        for k in keys {
            idx.insert(k, what)?;
        }
        Ok(idx)
    }

    pub fn insert(&mut self, key: K, what: &'static str) -> Result<usize, LpError> {
        if self.lookup.contains_key(&key) {
            return Err(LpError::DuplicateKey { what, key: format!("{key:?}") });
        }
        let i = self.keys.len();
        self.lookup.insert(key.clone(), i);
        self.keys.push(key);
        Ok(i)
    }

    pub fn get(&self, key: &K) -> Option<usize> {
        self.lookup.get(key).copied()
    }

    pub fn key(&self, i: usize) -> &K {
        &self.keys[i]
    }

    pub fn keys(&self) -> &[K] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

impl<K: Clone + Eq + Hash + Debug> Default for KeyIndex<K> {
    fn default() -> Self {
        Self::new()
    }
}

/// `min cᵀx  s.t.  Ax ≥ b, x ≥ 0` with keyed rows and columns.
#[derive(Debug, Clone)]
pub struct StandardFormLp<C, R> {
    pub c: Vec<f64>,
    pub a: CsrMatrix,
    pub b: Vec<f64>,
    pub col_index: KeyIndex<C>,
    pub row_index: KeyIndex<R>,
}

impl<C: Clone + Eq + Hash + Debug, R: Clone + Eq + Hash + Debug> StandardFormLp<C, R> {
    pub fn new(
        c: Vec<f64>,
        a: CsrMatrix,
        b: Vec<f64>,
        col_index: KeyIndex<C>,
        row_index: KeyIndex<R>,
    ) -> Result<Self, LpError> {
        let lp = StandardFormLp { c, a, b, col_index, row_index };
        lp.check()?;
        Ok(lp)
    }

    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    pub fn check(&self) -> Result<(), LpError> {
        if self.a.n_cols() != self.c.len() || self.col_index.len() != self.c.len() {
            return Err(LpError::Dimension(format!(
                "c has {} entries, A has {} columns, {} column keys",
                self.c.len(),
                self.a.n_cols(),
                self.col_index.len()
            )));
        }
        if self.a.n_rows() != self.b.len() || self.row_index.len() != self.b.len() {
            return Err(LpError::Dimension(format!(
                "b has {} entries, A has {} rows, {} row keys",
                self.b.len(),
                self.a.n_rows(),
                self.row_index.len()
            )));
        }
        if let Some(i) = self.c.iter().position(|v| !v.is_finite()) {
            return Err(LpError::NonFinite { what: "c", index: i });
        }
        if let Some(i) = self.b.iter().position(|v| !v.is_finite()) {
            return Err(LpError::NonFinite { what: "b", index: i });
        }
        if let Some(i) = self.a.vals.iter().position(|v| !v.is_finite()) {
            return Err(LpError::NonFinite { what: "A", index: i });
        }
        Ok(())
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.c.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    /// Row activities `Ax`.
    pub fn activities(&self, x: &[f64]) -> Vec<f64> {
        self.a.mul_vec(x)
    }
}

impl StandardFormLp<usize, usize> {
    /// Unkeyed LP with integer row/column labels, mostly for tests and tools.
    pub fn from_dense(c: Vec<f64>, a: &[Vec<f64>], b: Vec<f64>) -> Result<Self, LpError> {
        let n = c.len();
        let m = b.len();
        if a.len() != m || a.iter().any(|r| r.len() != n) {
            return Err(LpError::Dimension("dense matrix shape does not match c/b".into()));
        }
        StandardFormLp::new(
            c,
            CsrMatrix::from_dense(a, n),
            b,
            KeyIndex::from_keys((0..n).collect(), "column")?,
            KeyIndex::from_keys((0..m).collect(), "row")?,
        )
    }
}
