//! Dense row-major matrices and the scene-shaped views built on them.
//!
//! Every per-state tensor in the crate is a [`Mat`] whose rows enumerate
//! states in `(batch, time, agent)` order, as described by [`Layout`].

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// `out = alpha * a(m×k) * b(k×n) + beta * out`, where either operand may be
/// read transposed. Strides are expressed on the stored (untransposed) data.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    a_cols: usize,
    b: &[f64],
    b_trans: bool,
    b_cols: usize,
    beta: f64,
    out: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, a_cols) } else { (a_cols, 1) };
    let (rsb, csb) = if b_trans { (1, b_cols) } else { (b_cols, 1) };
    // SAFETY: the slices outlive the call and the strides stay inside them for
    // the (m, k, n) extents asserted below.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain `a * b`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions");
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(
        a.rows, a.cols, b.cols, 1.0, &a.data, false, a.cols, &b.data, false, b.cols, 0.0,
        &mut out.data,
    );
    out
}

/// Row ordering of a state tensor: row `(b * t + ti) * n + ni`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub time: usize,
    pub agents: usize,
}

impl Layout {
    pub fn new(batch: usize, time: usize, agents: usize) -> Self {
        Layout {
            batch,
            time,
            agents,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.time * self.agents
    }

    #[inline]
    pub fn row(&self, b: usize, t: usize, n: usize) -> usize {
        (b * self.time + t) * self.agents + n
    }

    /// Groups of rows that a sequence operator runs along, in sequence order.
    pub fn groups(&self, axis: Axis) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        match axis {
            Axis::Time => {
                for b in 0..self.batch {
                    for n in 0..self.agents {
                        out.push((0..self.time).map(|t| self.row(b, t, n)).collect());
                    }
                }
            }
            Axis::Agent => {
                for b in 0..self.batch {
                    for t in 0..self.time {
                        out.push((0..self.agents).map(|n| self.row(b, t, n)).collect());
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Sequences over timesteps, one per (batch, agent).
    Time,
    /// Sets over agents, one per (batch, timestep).
    Agent,
}

/// A `T × N × 2` tensor of per-state planar quantities (positions, noise,
/// per-coordinate variances).
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    t: usize,
    n: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(t: usize, n: usize) -> Self {
        Field {
            t,
            n,
            data: vec![0.0; t * n * 2],
        }
    }

    pub fn filled(t: usize, n: usize, v: f64) -> Self {
        Field {
            t,
            n,
            data: vec![v; t * n * 2],
        }
    }

    pub fn from_vec(t: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != t * n * 2 {
            return Err(Error::dim(format!(
                "{} values cannot fill a {t}x{n}x2 field",
                data.len()
            )));
        }
        Ok(Field { t, n, data })
    }

    pub fn from_fn(t: usize, n: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(t * n * 2);
        for ti in 0..t {
            for ni in 0..n {
                for c in 0..2 {
                    data.push(f(ti, ni, c));
                }
            }
        }
        Field { t, n, data }
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn agents(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.t, self.n)
    }

    #[inline]
    pub fn get(&self, t: usize, n: usize) -> [f64; 2] {
        let i = (t * self.n + n) * 2;
        [self.data[i], self.data[i + 1]]
    }

    #[inline]
    pub fn set(&mut self, t: usize, n: usize, v: [f64; 2]) {
        let i = (t * self.n + n) * 2;
        self.data[i] = v[0];
        self.data[i + 1] = v[1];
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn check_same_shape(&self, other: &Field, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Elementwise combination of two equally shaped fields.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Field {
            t: self.t,
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            t: self.t,
            n: self.n,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rows ordered `(t, n)`, two columns.
    pub fn to_mat(&self) -> Mat {
        Mat {
            rows: self.t * self.n,
            cols: 2,
            data: self.data.clone(),
        }
    }

    /// Rounds every entry to the nearest `f32`, the precision of all on-disk
    /// formats.
    pub fn quantize_f32(&self) -> Field {
        self.map(|v| v as f32 as f64)
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
