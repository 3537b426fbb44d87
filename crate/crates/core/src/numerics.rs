//! Dense row-major matrices, SVD-backed rank decisions, and seeded random streams.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Relative tolerance for rank and null-space decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Dense real matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Mat {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Mat> {
        if data.len() != rows * cols {
            return Err(dim_err("Mat::from_vec", rows * cols, data.len()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {pos} of a {rows}x{cols} matrix")));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(dim_err("Mat::from_rows", format!("{cols} columns"), format!("row {i} with {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Mat {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Mat {
        let n = values.len();
        let mut m = Mat::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Square sub-block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat {
        Mat::from_fn(rows, cols, |i, j| self.get(r0 + i, c0 + j))
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, b: &Mat) {
        for i in 0..b.rows {
            for j in 0..b.cols {
                self.set(r0 + i, c0 + j, b.get(i, j));
            }
        }
    }

    pub fn matmul(&self, b: &Mat) -> Result<Mat> {
        matmul(self, b)
    }

    /// `self · bᵀ` without materializing the transpose.
    pub fn matmul_t(&self, b: &Mat) -> Result<Mat> {
        if self.cols != b.cols {
            return Err(dim_err("matmul_t", format!("{} columns", self.cols), b.cols));
        }
        let mut out = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..b.rows {
                out.data[i * b.rows + j] = dot(a, b.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · b` without materializing the transpose.
    pub fn t_matmul(&self, b: &Mat) -> Result<Mat> {
        if self.rows != b.rows {
            return Err(dim_err("t_matmul", format!("{} rows", self.rows), b.rows));
        }
        let mut out = Mat::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let br = b.row(k);
            for (i, &aki) in a.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for (oj, bj) in o.iter_mut().zip(br) {
                    *oj += aki * bj;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, b: &Mat) -> Result<Mat> {
        self.zip_with(b, "add", |x, y| x + y)
    }

    pub fn sub(&self, b: &Mat) -> Result<Mat> {
        self.zip_with(b, "sub", |x, y| x - y)
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add_assign(&mut self, b: &Mat) -> Result<()> {
        self.check_same(b, "add_assign")?;
        for (x, y) in self.data.iter_mut().zip(&b.data) {
            *x += y;
        }
        Ok(())
    }

    /// `self += s · b`.
    pub fn axpy(&mut self, s: f64, b: &Mat) -> Result<()> {
        self.check_same(b, "axpy")?;
        for (x, y) in self.data.iter_mut().zip(&b.data) {
            *x += s * y;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, b: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        self.check_same(b, op)?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    fn check_same(&self, b: &Mat, op: &'static str) -> Result<()> {
        if self.shape() != b.shape() {
            return Err(dim_err(op, format!("{:?}", self.shape()), format!("{:?}", b.shape())));
        }
        Ok(())
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Per-column mean.
    pub fn col_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let n = self.rows.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Per-column population standard deviation.
    pub fn col_stds(&self) -> Vec<f64> {
        let mu = self.col_means();
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for ((o, v), m) in out.iter_mut().zip(self.row(i)).zip(&mu) {
                *o += (v - m) * (v - m);
            }
        }
        let n = self.rows.max(1) as f64;
        out.iter_mut().for_each(|v| *v = (*v / n).sqrt());
        out
    }

    /// Appends a constant column of ones.
    pub fn with_ones_column(&self) -> Mat {
        Mat::from_fn(self.rows, self.cols + 1, |i, j| if j < self.cols { self.get(i, j) } else { 1.0 })
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Mat {
        Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    /// Writes the repo-wide CSV matrix format.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::with_capacity(self.data.len() * 26 + 32);
        let _ = writeln!(s, "# rows={} cols={}", self.rows, self.cols);
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{v:.16e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv_str(text: &str) -> Result<Mat> {
        let mut lines = text.split('\n');
        let header = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))?;
        let (rows, cols) = parse_header(header)?;
        let mut data = Vec::with_capacity(rows * cols);
        for (i, line) in lines.take(rows).enumerate() {
            let before = data.len();
            if cols > 0 {
                for tok in line.split(',') {
                    let v: f64 = tok
                        .trim()
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad number {tok:?} on data line {i}")))?;
                    data.push(v);
                }
            }
            if data.len() - before != cols {
                return Err(Error::Parse(format!("data line {i}: expected {cols} values, found {}", data.len() - before)));
            }
        }
        if data.len() != rows * cols {
            return Err(Error::Parse(format!("expected {rows} data lines")));
        }
        Mat::from_vec(rows, cols, data)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Mat> {
        Mat::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = || Error::Parse(format!("bad CSV header {line:?}"));
    let rest = line.strip_prefix("# ").ok_or_else(bad)?;
    let mut parts = rest.split_whitespace();
    let rows = parts
        .next()
        .and_then(|p| p.strip_prefix("rows="))
        .and_then(|p| p.parse().ok())
        .ok_or_else(bad)?;
    let cols = parts
        .next()
        .and_then(|p| p.strip_prefix("cols="))
        .and_then(|p| p.parse().ok())
        .ok_or_else(bad)?;
    Ok((rows, cols))
}

impl From<Mat> for Vec<Vec<f64>> {
    fn from(m: Mat) -> Self {
        m.to_rows()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Mat {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Mat> {
        Mat::from_rows(&rows)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Standard matrix product.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(dim_err("matmul", format!("{} rows in rhs", a.cols), b.rows));
    }
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (oj, bkj) in o.iter_mut().zip(b.row(k)) {
                *oj += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Singular values in descending order.
pub fn singular_values(m: &Mat) -> Vec<f64> {
    if m.rows == 0 || m.cols == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.to_nalgebra().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Ratio of largest to smallest singular value; infinite when rank deficient.
pub fn condition_number(m: &Mat) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Numerical rank with singular values compared against `tol · σ_max`.
pub fn rank(m: &Mat, tol: f64) -> usize {
    let s = singular_values(m);
    let Some(&smax) = s.first() else { return 0 };
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > tol * smax).count()
}

/// Orthonormal basis of the numerical null space, returned as column vectors.
///
/// A vector is in the null space when `‖Mv‖ ≤ tol·σ_max·‖v‖`. The zero matrix yields the
/// standard basis.
pub fn null_space(m: &Mat, tol: f64) -> Result<Vec<Vec<f64>>> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("null_space tolerance must be positive, got {tol}")));
    }
    let n = m.cols;
    if m.max_abs() == 0.0 || m.rows == 0 {
        return Ok((0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect());
    }
    // Pad with zero rows so the SVD returns a full n×n right factor.
    let padded = if m.rows < n {
        let mut p = Mat::zeros(n, n);
        p.data[..m.data.len()].copy_from_slice(&m.data);
        p
    } else {
        m.clone()
    };
    let svd = padded.to_nalgebra().svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Singular("SVD did not produce V".into()))?;
    let sv = &svd.singular_values;
    let smax = sv.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut idx: Vec<usize> = (0..sv.len()).filter(|&k| sv[k] <= tol * smax).collect();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|k| vt.row(k).iter().copied().collect()).collect())
}

/// Minimum-norm least-squares solution of `a·X ≈ b`.
pub fn least_squares(a: &Mat, b: &Mat) -> Result<Mat> {
    least_squares_tol(a, b, DEFAULT_RANK_TOL)
}

/// As [`least_squares`], discarding singular values below `tol · σ_max`.
pub fn least_squares_tol(a: &Mat, b: &Mat, tol: f64) -> Result<Mat> {
    if a.rows != b.rows {
        return Err(dim_err("least_squares", format!("{} rows", a.rows), b.rows));
    }
    if a.max_abs() == 0.0 || a.rows == 0 || a.cols == 0 {
        return Ok(Mat::zeros(a.cols, b.cols));
    }
    let svd = a.to_nalgebra().svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Singular("SVD failed".into())),
    };
    let s = &svd.singular_values;
    let smax = s.iter().fold(0.0f64, |acc, &v| acc.max(v));
    let bn = b.to_nalgebra();
    let mut utb = u.transpose() * bn;
    for k in 0..s.len() {
        let inv = if s[k] > tol * smax { 1.0 / s[k] } else { 0.0 };
        for j in 0..utb.ncols() {
            utb[(k, j)] *= inv;
        }
    }
    Ok(Mat::from_nalgebra(&(vt.transpose() * utb)))
}

pub fn determinant(m: &Mat) -> Result<f64> {
    if !m.is_square() {
        return Err(dim_err("determinant", "square matrix", format!("{:?}", m.shape())));
    }
    Ok(m.to_nalgebra().determinant())
}

/// Inverse of a square matrix; errors when `|det| ≤ 1e-10` or the factorization fails.
pub fn inverse(m: &Mat) -> Result<Mat> {
    if !m.is_square() {
        return Err(dim_err("inverse", "square matrix", format!("{:?}", m.shape())));
    }
    let det = determinant(m)?;
    if !(det.abs() > 1e-10) {
        return Err(Error::Singular(format!("|det| = {:e}", det.abs())));
    }
    m.to_nalgebra()
        .try_inverse()
        .map(|inv| Mat::from_nalgebra(&inv))
        .ok_or_else(|| Error::Singular("LU inverse failed".into()))
}

/// Q factor of a QR decomposition with the signs of diag(R) made positive, giving a
/// Haar-distributed rotation when the input is Gaussian.
pub fn orthonormalize(m: &Mat) -> Mat {
    let qr = m.to_nalgebra().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols().min(r.nrows()) {
        if r[(j, j)] < 0.0 {
            for i in 0..q.nrows() {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Mat::from_nalgebra(&q)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic random stream keyed by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id selecting the ChaCha stream, so equal keys give
/// equal sequences and distinct ids give independent ones. Normals come from Box–Muller.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> RngStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Independent child stream for a labelled sub-task (e.g. one epoch).
    pub fn child(&self, label: u64) -> RngStream {
        RngStream::new(self.seed, splitmix64(self.stream_id ^ splitmix64(label.wrapping_add(0x5151))))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Matrix of iid standard normal entries.
pub fn gaussian(rng: &mut RngStream, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols).map(|_| rng.standard_normal()).collect();
    Mat { rows, cols, data }
}
