//! Sliced Wasserstein distance between two equally sized samples.
//!
//! Both samples are projected onto `m` random unit directions; each
//! projection is a 1-D transport problem solved exactly by sorting. The
//! distance is the mean over projections of the mean squared difference of
//! the sorted projections.

use crate::error::{Error, Result};
use crate::numerics::{gemm, random_unit_vector, Mat, RngState};

pub const DEFAULT_PROJECTIONS: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwdConfig {
    pub projections: usize,
    pub seed: u64,
}

impl SwdConfig {
    pub fn new(projections: usize, seed: u64) -> Result<Self> {
        if projections == 0 {
            return Err(Error::InvalidArgument("need at least one projection".into()));
        }
        Ok(Self { projections, seed })
    }

    pub fn draw(&self, dim: usize) -> Result<Projections> {
        Projections::draw(&mut RngState::new(self.seed), self.projections, dim)
    }
}

/// Unit directions stored column-wise in a `dim x m` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections {
    dirs: Mat,
}

impl Projections {
    pub fn draw(rng: &mut RngState, m: usize, dim: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("need at least one projection".into()));
        }
        let mut dirs = Mat::zeros(dim, m);
        for k in 0..m {
            let p = random_unit_vector(rng, dim)?;
            for (i, v) in p.into_iter().enumerate() {
                dirs.as_mut_slice()[i * m + k] = v;
            }
        }
        Ok(Self { dirs })
    }

    pub fn from_directions(dirs: &[Vec<f64>]) -> Result<Self> {
        let m = dirs.len();
        let dim = dirs.first().map_or(0, |d| d.len());
        if m == 0 || dim == 0 {
            return Err(Error::InvalidArgument("empty projection set".into()));
        }
        let mut mat = Mat::zeros(dim, m);
        for (k, d) in dirs.iter().enumerate() {
            if d.len() != dim {
                return Err(Error::shape("projection direction", dim, d.len()));
            }
            for (i, &v) in d.iter().enumerate() {
                mat.as_mut_slice()[i * m + k] = v;
            }
        }
        Ok(Self { dirs: mat })
    }

    pub fn count(&self) -> usize {
        self.dirs.cols()
    }

    pub fn dim(&self) -> usize {
        self.dirs.rows()
    }

    pub fn direction(&self, k: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| self.dirs.get(i, k)).collect()
    }

    fn project(&self, a: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), self.count());
        gemm(1.0, a, false, &self.dirs, false, 0.0, &mut out);
        out
    }
}

fn check_pair(a: &Mat, b: &Mat, proj: &Projections) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "swd samples",
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    if a.rows() == 0 {
        return Err(Error::InvalidArgument("swd needs at least one sample".into()));
    }
    if a.cols() != proj.dim() {
        return Err(Error::shape("swd projection dimension", proj.dim(), a.cols()));
    }
    Ok(())
}

/// Row order sorting column `k` of `proj` ascending. Stable, so ties keep
/// their original row order.
fn sorted_order(proj: &Mat, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..proj.rows()).collect();
    idx.sort_by(|&i, &j| proj.get(i, k).total_cmp(&proj.get(j, k)));
    idx
}

/// Distance under an explicit projection set.
pub fn swd_with(a: &Mat, b: &Mat, proj: &Projections) -> Result<f64> {
    check_pair(a, b, proj)?;
    let n = a.rows();
    let pa = proj.project(a);
    let pb = proj.project(b);
    let mut total = 0.0;
    for k in 0..proj.count() {
        let ia = sorted_order(&pa, k);
        let ib = sorted_order(&pb, k);
        let s: f64 = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| (pa.get(i, k) - pb.get(j, k)).powi(2))
            .sum();
        total += s / n as f64;
    }
    Ok(total / proj.count() as f64)
}

/// Distance and both gradients under an explicit projection set. The sort
/// permutations are held fixed, which is exact away from ties.
pub fn swd_grad_with(a: &Mat, b: &Mat, proj: &Projections) -> Result<(f64, Mat, Mat)> {
    check_pair(a, b, proj)?;
    let n = a.rows();
    let m = proj.count();
    let pa = proj.project(a);
    let pb = proj.project(b);
    // residuals in projection space, scattered back to the original rows
    let mut ra = Mat::zeros(n, m);
    let mut rb = Mat::zeros(n, m);
    let mut total = 0.0;
    let coef = 2.0 / (n as f64 * m as f64);
    for k in 0..m {
        let ia = sorted_order(&pa, k);
        let ib = sorted_order(&pb, k);
        let mut s = 0.0;
        for (&i, &j) in ia.iter().zip(&ib) {
            let diff = pa.get(i, k) - pb.get(j, k);
            s += diff * diff;
            ra.as_mut_slice()[i * m + k] = coef * diff;
            rb.as_mut_slice()[j * m + k] = -coef * diff;
        }
        total += s / n as f64;
    }
    let mut ga = Mat::zeros(n, a.cols());
    let mut gb = Mat::zeros(n, b.cols());
    gemm(1.0, &ra, false, &proj.dirs, true, 0.0, &mut ga);
    gemm(1.0, &rb, false, &proj.dirs, true, 0.0, &mut gb);
    Ok((total / m as f64, ga, gb))
}

/// Projections are drawn from `cfg.seed`, so repeated calls agree.
pub fn swd(a: &Mat, b: &Mat, cfg: &SwdConfig) -> Result<f64> {
    swd_with(a, b, &cfg.draw(a.cols())?)
}

/// Gradients `(dS/dA, dS/dB)` under the same projections as [`swd`].
pub fn swd_grad(a: &Mat, b: &Mat, cfg: &SwdConfig) -> Result<(Mat, Mat)> {
    let (_, ga, gb) = swd_grad_with(a, b, &cfg.draw(a.cols())?)?;
    Ok((ga, gb))
}

/// Exact squared 2-Wasserstein distance between two 1-D empirical
/// distributions with equal counts.
pub fn exact_w2sq_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("exact_w2sq_1d", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}
