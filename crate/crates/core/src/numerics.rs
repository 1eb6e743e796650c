//! Dense row-major matrices, seeded random sources and the central
//! finite-difference oracle used to check analytic gradients.
//!
//! All randomness flows through [`RngState`], a ChaCha8 stream identified by
//! `(seed, word position)`. ChaCha8 is fully specified and produces the same
//! words on every platform, and the word position can be stored in a
//! checkpoint and restored exactly.

use std::ops::Range;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// Builds a matrix, rejecting a wrong data length or any NaN/Inf entry.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Mat::new", rows * cols, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "matrix entry ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for results of arithmetic on finite inputs.
    /// Callers that can overflow check [`Mat::check_finite`] themselves.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Stacks equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Mat::from_rows",
                    cols,
                    format!("row {i} of length {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn row_vector(v: &[f64]) -> Result<Self> {
        Self::new(1, v.len(), v.to_vec())
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

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Sets one entry; the value must be finite.
    pub fn set(&mut self, r: usize, c: usize, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::non_finite(format!("matrix entry ({r}, {c})")));
        }
        self.data[r * self.cols + c] = v;
        Ok(())
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, stage: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::non_finite(stage))
        }
    }

    /// Copies the column range `cols` of every row into a new matrix.
    pub fn columns(&self, cols: Range<usize>) -> Mat {
        assert!(cols.end <= self.cols, "column range out of bounds");
        let w = cols.len();
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[cols.clone()]);
        }
        Mat::from_parts(self.rows, w, data)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hcat(parts: &[&Mat]) -> Result<Mat> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::shape("Mat::hcat", rows, bad.rows));
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Mat::from_parts(rows, cols, data))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vcat(parts: &[&Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if let Some(bad) = parts.iter().find(|m| m.cols != cols) {
            return Err(Error::shape("Mat::vcat", cols, bad.cols));
        }
        let mut data = Vec::new();
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Mat::from_parts(data.len() / cols.max(1), cols, data))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat::from_parts(idx.len(), self.cols, data)
    }

    pub fn row_range(&self, rows: Range<usize>) -> Mat {
        Mat::from_parts(
            rows.len(),
            self.cols,
            self.data[rows.start * self.cols..rows.end * self.cols].to_vec(),
        )
    }

    /// Largest elementwise absolute difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
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

/// `c = alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
pub(crate) fn gemm(alpha: f64, a: &Mat, trans_a: bool, b: &Mat, trans_b: bool, beta: f64, c: &mut Mat) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: the strides above describe exactly the row-major buffers of `a`,
    // `b` and `c`, whose lengths match the asserted shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

#[cfg(test)]
pub(crate) fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    c
}

/// Seeded ChaCha8 stream. `(seed, position)` identifies the state exactly.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

/// Serializable form of [`RngState`]. The word position is a decimal string
/// because it is a 128-bit counter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub position: String,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Independent child stream with seed `parent seed XOR stream_id`.
    pub fn fork(&self, stream_id: u64) -> RngState {
        RngState::new(self.seed ^ stream_id)
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            position: self.position().to_string(),
        }
    }

    pub fn restore(snap: &RngSnapshot) -> Result<Self> {
        let pos: u128 = snap
            .position
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad rng position {:?}", snap.position)))?;
        let mut state = RngState::new(snap.seed);
        state.rng.set_word_pos(pos);
        Ok(state)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`. Uses u64 so results do not depend on
    /// the platform's pointer width.
    pub fn int_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        self.rng.random_range(lo..=hi)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

/// i.i.d. `N(0, sigma²)` samples. `sigma = 0` yields zeros without touching
/// the stream.
pub fn gaussian(rng: &mut RngState, rows: usize, cols: usize, sigma: f64) -> Result<Mat> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(Mat::zeros(rows, cols));
    }
    let data = (0..rows * cols).map(|_| sigma * rng.standard_normal()).collect();
    Ok(Mat::from_parts(rows, cols, data))
}

/// Direction drawn uniformly from the unit sphere in `d` dimensions.
pub fn random_unit_vector(rng: &mut RngState, d: usize) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::InvalidArgument("random_unit_vector needs d >= 1".into()));
    }
    loop {
        let mut p: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            p.iter_mut().for_each(|v| *v /= norm);
            return Ok(p);
        }
    }
}

/// Index-array permutation: `apply(u)[j] = u[forward[j]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
}

impl Permutation {
    pub fn new(forward: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; forward.len()];
        for &i in &forward {
            if i >= forward.len() || seen[i] {
                return Err(Error::InvalidArgument(format!(
                    "permutation index {i} repeated or out of range 0..{}",
                    forward.len()
                )));
            }
            seen[i] = true;
        }
        Ok(Self { forward })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            forward: (0..d).collect(),
        }
    }

    /// Skips the bijection check. Only for building deliberately broken
    /// fixtures; a non-bijective map makes `invert` lossy.
    #[doc(hidden)]
    pub fn from_indices_unchecked(forward: Vec<usize>) -> Self {
        Self { forward }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.forward
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.forward.len(), "permutation length");
        self.forward.iter().map(|&i| v[i]).collect()
    }

    pub fn invert(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.forward.len(), "permutation length");
        let mut out = vec![0.0; v.len()];
        for (j, &i) in self.forward.iter().enumerate() {
            out[i] = v[j];
        }
        out
    }

    /// Applies the permutation to the columns of every row.
    pub fn apply_rows(&self, m: &Mat) -> Mat {
        assert_eq!(m.cols(), self.forward.len(), "permutation length");
        let mut out = Mat::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let src = m.row(r);
            for (dst, &i) in out.row_mut(r).iter_mut().zip(&self.forward) {
                *dst = src[i];
            }
        }
        out
    }

    pub fn invert_rows(&self, m: &Mat) -> Mat {
        assert_eq!(m.cols(), self.forward.len(), "permutation length");
        let mut out = Mat::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let src = m.row(r);
            let dst = out.row_mut(r);
            for (j, &i) in self.forward.iter().enumerate() {
                dst[i] = src[j];
            }
        }
        out
    }
}

/// Fisher–Yates shuffle of `0..d`.
pub fn random_permutation(rng: &mut RngState, d: usize) -> Result<Permutation> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "random_permutation needs d >= 2, got {d}"
        )));
    }
    let mut idx: Vec<usize> = (0..d).collect();
    shuffle(rng, &mut idx);
    Ok(Permutation { forward: idx })
}

pub fn shuffle<T>(rng: &mut RngState, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.int_inclusive(0, i as u64) as usize;
        items.swap(i, j);
    }
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every
/// coordinate of `at`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, at: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite difference step must be > 0, got {h}"
        )));
    }
    let mut p = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = p[i];
        p[i] = orig + h;
        let plus = f(&p);
        p[i] = orig - h;
        let minus = f(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteProbe { index: i });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

pub(crate) fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Quantile with linear interpolation between order statistics
/// (position `p * (n - 1)` in the sorted sample).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p)
}

pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
