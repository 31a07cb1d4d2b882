//! Dense matrix primitives shared by the rest of the crate.
//!
//! Everything is `f64`. Matrices are plain [`nalgebra::DMatrix`] values; the
//! helpers here add the conventions the models rely on: descending singular
//! values with stable tie order, a relative zero tolerance for rank decisions,
//! the simplex ETF, Schatten quasi-norms, and the `DUFM` binary container.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DufmError, Result};

pub type Matrix = DMatrix<f64>;

/// Relative cutoff used for every rank decision unless overridden.
pub const DEFAULT_RELATIVE_ZERO_TOL: f64 = 1e-9;

const SVD_MAX_ITERS: usize = 100_000;

/// Magic bytes opening every binary matrix record.
pub const CONTAINER_MAGIC: &[u8; 4] = b"DUFM";

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DufmError::NumericFailure {
            context: format!("{what}: non-finite entry"),
            input_hash: matrix_hash(m),
        })
    }
}

/// FNV-1a over the shape and the raw bits of the entries (column-major).
pub fn matrix_hash(m: &Matrix) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(PRIME);
        }
    };
    eat(&(m.nrows() as u64).to_le_bytes());
    eat(&(m.ncols() as u64).to_le_bytes());
    for x in m.iter() {
        eat(&x.to_bits().to_le_bytes());
    }
    h
}

/// The standard simplex ETF `I_K - (1/K) 1 1^T`.
pub fn simplex_etf(k: usize) -> Result<Matrix> {
    if k < 2 {
        return Err(DufmError::dim(format!("simplex ETF needs K >= 2, got {k}")));
    }
    let kf = k as f64;
    Ok(Matrix::from_fn(
        k,
        k,
        |i, j| {
            if i == j {
                1.0 - 1.0 / kf
            } else {
                -1.0 / kf
            }
        },
    ))
}

/// Orthogonal `K x K` matrix whose last column is `1/sqrt(K)`, so that
/// `Q diag(1,..,1,0) Q^T` is the simplex ETF. Columns are Helmert contrasts.
pub fn simplex_diagonalizer(k: usize) -> Result<Matrix> {
    if k < 2 {
        return Err(DufmError::dim(format!("simplex diagonalizer needs K >= 2, got {k}")));
    }
    let mut q = Matrix::zeros(k, k);
    for j in 0..k - 1 {
        // contrast j: first j+1 entries equal, entry j+1 balances them
        let n = (j + 1) as f64;
        let norm = (n * (n + 1.0)).sqrt();
        for i in 0..=j {
            q[(i, j)] = 1.0 / norm;
        }
        q[(j + 1, j)] = -n / norm;
    }
    let c = 1.0 / (k as f64).sqrt();
    for i in 0..k {
        q[(i, k - 1)] = c;
    }
    Ok(q)
}

/// Thin SVD with singular values sorted in descending order.
///
/// `left` is `m x min(m,n)`, `right` is `n x min(m,n)`; `A = left * diag(s) * right^T`.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub left: Matrix,
    pub singular_values: Vec<f64>,
    pub right: Matrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        let mut scaled = self.left.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        scaled * self.right.transpose()
    }

    pub fn spectrum(&self) -> Spectrum {
        Spectrum::new(self.singular_values.clone())
    }
}

fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // stable: equal values keep the kernel's order
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    ensure_finite(a, "svd")?;
    let raw = a
        .clone()
        .try_svd(true, true, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or_else(|| DufmError::NumericFailure {
            context: "svd did not converge".into(),
            input_hash: matrix_hash(a),
        })?;
    let u = raw.u.expect("requested U");
    let v_t = raw.v_t.expect("requested V^T");
    let s = raw.singular_values;
    let order = descending_order(s.as_slice());
    let r = order.len();
    let mut left = Matrix::zeros(a.nrows(), r);
    let mut right = Matrix::zeros(a.ncols(), r);
    let mut values = Vec::with_capacity(r);
    for (dst, &src) in order.iter().enumerate() {
        left.set_column(dst, &u.column(src));
        right.set_column(dst, &v_t.row(src).transpose());
        values.push(s[src].max(0.0));
    }
    Ok(SvdFactors {
        left,
        singular_values: values,
        right,
    })
}

/// Descending singular values only.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    ensure_finite(a, "singular_values")?;
    let s = a
        .clone()
        .try_svd(false, false, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or_else(|| DufmError::NumericFailure {
            context: "singular values did not converge".into(),
            input_hash: matrix_hash(a),
        })?
        .singular_values;
    let mut v: Vec<f64> = s.iter().map(|x| x.max(0.0)).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(v)
}

/// Descending non-negative values with the cutoff below which a value is
/// treated as rank-excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub zero_tolerance: f64,
}

impl Spectrum {
    /// Uses the default relative tolerance `1e-9 * max(values)`.
    pub fn new(mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| b.total_cmp(a));
        let top = values.first().copied().unwrap_or(0.0);
        Spectrum {
            values,
            zero_tolerance: DEFAULT_RELATIVE_ZERO_TOL * top,
        }
    }

    pub fn with_tolerance(mut values: Vec<f64>, zero_tolerance: f64) -> Self {
        values.sort_by(|a, b| b.total_cmp(a));
        Spectrum { values, zero_tolerance }
    }

    pub fn of(a: &Matrix) -> Result<Self> {
        Ok(Spectrum::new(singular_values(a)?))
    }

    pub fn is_nonzero(&self, v: f64) -> bool {
        v > self.zero_tolerance && v > 0.0
    }

    pub fn nonzero(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied().filter(|v| self.is_nonzero(*v))
    }

    pub fn rank(&self) -> usize {
        self.nonzero().count()
    }

    pub fn largest(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    /// `sum_i s_i^q` over the values above the zero tolerance.
    pub fn power_sum(&self, q: f64) -> f64 {
        self.nonzero().map(|s| s.powf(q)).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Spectrum {
            values: self.values.iter().map(|v| v * c).collect(),
            zero_tolerance: self.zero_tolerance * c,
        }
    }
}

pub fn check_schatten_exponent(q: f64) -> Result<()> {
    if q > 0.0 && q <= 2.0 {
        Ok(())
    } else {
        Err(DufmError::param(format!(
            "Schatten exponent must lie in (0, 2], got {q}"
        )))
    }
}

/// `sum_i s_i^q` over the singular values of `a` above the default zero tolerance.
pub fn schatten_quasi_norm(a: &Matrix, q: f64) -> Result<f64> {
    check_schatten_exponent(q)?;
    Ok(Spectrum::of(a)?.power_sum(q))
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        std * z
    })
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian with sign correction).
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    let g = gaussian_matrix(n, n, 1.0, rng);
    let qr = g.qr();
    let (mut q, r) = qr.unpack();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `diag(values)` padded into a `rows x cols` matrix.
pub fn rect_diag(rows: usize, cols: usize, values: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for (i, v) in values.iter().enumerate().take(rows.min(cols)) {
        m[(i, i)] = *v;
    }
    m
}

/// Embed `m` in the top-left corner of a `rows x cols` zero matrix.
pub fn embed(m: &Matrix, rows: usize, cols: usize) -> Matrix {
    let mut out = Matrix::zeros(rows, cols);
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out
}

pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(DufmError::dim("matrix must have at least one row and one column"));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(DufmError::Format("ragged rows in matrix".into()));
    }
    let m = Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
    ensure_finite(&m, "from_rows")?;
    Ok(m)
}

pub fn matrix_to_json(m: &Matrix) -> String {
    serde_json::to_string(&to_rows(m)).expect("f64 rows serialize")
}

pub fn matrix_from_json(s: &str) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(s)?;
    from_rows(&rows)
}

/// Write one record: `"DUFM"`, `u32` rows, `u32` cols, row-major little-endian `f64`s.
pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    let rows = u32::try_from(m.nrows()).map_err(|_| DufmError::dim("too many rows for container"))?;
    let cols = u32::try_from(m.ncols()).map_err(|_| DufmError::dim("too many columns for container"))?;
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read one record; `Ok(None)` on a clean end of stream.
pub fn read_matrix<R: Read>(r: &mut R) -> Result<Option<Matrix>> {
    let mut magic = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut magic[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(DufmError::Format("truncated container header".into()));
        }
        filled += n;
    }
    if &magic != CONTAINER_MAGIC {
        return Err(DufmError::Format("bad magic bytes, expected DUFM".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u32::from_le_bytes(word) as usize;
    if rows == 0 || cols == 0 {
        return Err(DufmError::Format("empty matrix in container".into()));
    }
    let mut m = Matrix::zeros(rows, cols);
    let mut buf = [0u8; 8];
    for i in 0..rows {
        for j in 0..cols {
            r.read_exact(&mut buf)?;
            m[(i, j)] = f64::from_le_bytes(buf);
        }
    }
    ensure_finite(&m, "container payload")?;
    Ok(Some(m))
}
