//! Affine coupling block with a closed-form inverse.
//!
//! The input is shuffled by a fixed permutation and split into halves
//! `u1 | u2`. Two affine stages follow:
//!
//! ```text
//! v1 = cexp(s2(u2)) * u1 + t2(u2)
//! v2 = cexp(s1(v1)) * u2 + t1(v1)
//! ```
//!
//! and the inverse runs them backwards:
//!
//! ```text
//! u2 = (v2 - t1(v1)) / cexp(s1(v1))
//! u1 = (v1 - t2(u2)) / cexp(s2(u2))
//! ```
//!
//! `s1, t1, s2, t2` are small two-layer perceptrons. They never need to be
//! inverted, so the block is bijective for any finite parameters.

use crate::error::{Error, Result};
use crate::numerics::{gaussian, gemm, random_permutation, Mat, Permutation, RngState};

/// Negative-side slope of the leaky rectifier inside every subnet.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Bounded exponential `exp(c * atan(x))`, always in `(e^{-c pi/2}, e^{c pi/2})`.
#[inline]
pub fn cexp(x: f64, c: f64) -> f64 {
    (c * x.atan()).exp()
}

/// `d/dx cexp(x) = cexp(x) * c / (1 + x^2)`.
#[inline]
pub fn cexp_derivative(x: f64, c: f64) -> f64 {
    cexp(x, c) * c / (1.0 + x * x)
}

/// `x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Mat::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows(), self.weight.cols());
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm(1.0, x, false, &self.weight, false, 1.0, &mut out);
        out
    }
}

/// Two affine stages with a leaky rectifier between them:
/// `width -> hidden -> width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Subnet {
    pub hidden: Affine,
    pub output: Affine,
}

/// Intermediates of one subnet evaluation, kept for the backward pass.
#[derive(Clone, Debug)]
struct SubnetCache {
    pre: Mat,
    act: Mat,
}

impl Subnet {
    pub fn zeros(width: usize, hidden: usize) -> Self {
        Self {
            hidden: Affine::zeros(width, hidden),
            output: Affine::zeros(hidden, width),
        }
    }

    /// Hidden weights `~ N(0, 1/fan_in)`, everything else zero, so the
    /// subnet initially outputs exactly zero.
    pub fn init(width: usize, hidden: usize, rng: &mut RngState) -> Result<Self> {
        let mut net = Self::zeros(width, hidden);
        net.hidden.weight = gaussian(rng, width, hidden, 1.0 / (width as f64).sqrt())?;
        Ok(net)
    }

    pub fn width(&self) -> usize {
        self.hidden.weight.rows()
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in serialization order: hidden weight, hidden bias,
    /// output weight, output bias.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.hidden.weight.as_slice(),
            &self.hidden.bias,
            self.output.weight.as_slice(),
            &self.output.bias,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.hidden.weight.as_mut_slice(),
            &mut self.hidden.bias,
            self.output.weight.as_mut_slice(),
            &mut self.output.bias,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.width(), self.hidden_width())
    }

    fn forward(&self, x: &Mat) -> (Mat, SubnetCache) {
        let pre = self.hidden.apply(x);
        let mut act = pre.clone();
        for v in act.as_mut_slice() {
            if *v <= 0.0 {
                *v *= LEAKY_SLOPE;
            }
        }
        let out = self.output.apply(&act);
        (out, SubnetCache { pre, act })
    }

    /// Accumulates parameter gradients into `grads` and input gradients into
    /// `grad_input`.
    fn backward(&self, input: &Mat, cache: &SubnetCache, grad_out: &Mat, grads: &mut Subnet, grad_input: &mut Mat) {
        gemm(1.0, &cache.act, true, grad_out, false, 1.0, &mut grads.output.weight);
        add_column_sums(&mut grads.output.bias, grad_out);

        let mut grad_pre = Mat::zeros(grad_out.rows(), self.hidden_width());
        gemm(1.0, grad_out, false, &self.output.weight, true, 0.0, &mut grad_pre);
        for (g, &p) in grad_pre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            if p <= 0.0 {
                *g *= LEAKY_SLOPE;
            }
        }

        gemm(1.0, input, true, &grad_pre, false, 1.0, &mut grads.hidden.weight);
        add_column_sums(&mut grads.hidden.bias, &grad_pre);
        gemm(1.0, &grad_pre, false, &self.hidden.weight, true, 1.0, grad_input);
    }
}

fn add_column_sums(acc: &mut [f64], m: &Mat) {
    for r in 0..m.rows() {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
}

/// Which way a cache was recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Everything the backward pass of one coupling evaluation needs. The field
/// meanings are the same in both directions: `u1, u2` are the permuted
/// input-side halves and `v1` the first output-side half.
#[derive(Clone, Debug)]
pub struct CouplingCache {
    direction: Direction,
    width: usize,
    u1: Mat,
    u2: Mat,
    v1: Mat,
    s2: SubnetCache,
    t2: SubnetCache,
    s2_out: Mat,
    scale2: Mat,
    s1: SubnetCache,
    t1: SubnetCache,
    s1_out: Mat,
    scale1: Mat,
}

impl CouplingCache {
    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn batch(&self) -> usize {
        self.u1.rows()
    }

    /// Elementwise multipliers applied in the two stages.
    pub fn scales(&self) -> (&Mat, &Mat) {
        (&self.scale2, &self.scale1)
    }
}

/// Parameter gradients of one coupling block, shaped like its subnets.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingGrads {
    pub s1: Subnet,
    pub t1: Subnet,
    pub s2: Subnet,
    pub t2: Subnet,
}

impl CouplingGrads {
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        [&self.s1, &self.t1, &self.s2, &self.t2]
            .into_iter()
            .flat_map(|s| s.tensors())
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        [&mut self.s1, &mut self.t1, &mut self.s2, &mut self.t2]
            .into_iter()
            .flat_map(|s| s.tensors_mut())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    perm: Permutation,
    s1: Subnet,
    t1: Subnet,
    s2: Subnet,
    t2: Subnet,
    clamp: f64,
}

impl CouplingLayer {
    /// Random permutation and identity-initialized subnets.
    pub fn new(width: usize, hidden: usize, clamp: f64, rng: &mut RngState) -> Result<Self> {
        check_width(width)?;
        let perm = random_permutation(rng, width)?;
        let half = width / 2;
        let s1 = Subnet::init(half, hidden, rng)?;
        let t1 = Subnet::init(half, hidden, rng)?;
        let s2 = Subnet::init(half, hidden, rng)?;
        let t2 = Subnet::init(half, hidden, rng)?;
        Self::from_parts(perm, [s1, t1, s2, t2], clamp)
    }

    /// Identity permutation and all-zero subnets: the identity map.
    pub fn identity(width: usize, hidden: usize, clamp: f64) -> Result<Self> {
        check_width(width)?;
        let half = width / 2;
        let zero = Subnet::zeros(half, hidden);
        Self::from_parts(
            Permutation::identity(width),
            [zero.clone(), zero.clone(), zero.clone(), zero],
            clamp,
        )
    }

    /// Assembles a layer from a permutation and subnets ordered `s1, t1, s2, t2`.
    pub fn from_parts(perm: Permutation, subnets: [Subnet; 4], clamp: f64) -> Result<Self> {
        let width = perm.len();
        check_width(width)?;
        if !(clamp > 0.0) || !clamp.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "clamp constant must be > 0, got {clamp}"
            )));
        }
        let [s1, t1, s2, t2] = subnets;
        let hidden = s1.hidden_width();
        for net in [&s1, &t1, &s2, &t2] {
            if net.width() != width / 2
                || net.output.weight.cols() != width / 2
                || net.hidden_width() != hidden
                || net.output.weight.rows() != hidden
                || net.hidden.bias.len() != hidden
                || net.output.bias.len() != width / 2
            {
                return Err(Error::Dimension(format!(
                    "subnet shapes do not match width {width} / hidden {hidden}"
                )));
            }
            if net.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::non_finite("subnet parameters"));
            }
        }
        Ok(Self {
            perm,
            s1,
            t1,
            s2,
            t2,
            clamp,
        })
    }

    pub fn width(&self) -> usize {
        self.perm.len()
    }

    pub fn hidden_width(&self) -> usize {
        self.s1.hidden_width()
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    pub fn permutation(&self) -> &Permutation {
        &self.perm
    }

    pub fn subnets(&self) -> [&Subnet; 4] {
        [&self.s1, &self.t1, &self.s2, &self.t2]
    }

    pub fn param_count(&self) -> usize {
        self.subnets().iter().map(|s| s.param_count()).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.subnets().into_iter().flat_map(|s| s.tensors())
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        [&mut self.s1, &mut self.t1, &mut self.s2, &mut self.t2]
            .into_iter()
            .flat_map(|s| s.tensors_mut())
    }

    pub fn zero_grads(&self) -> CouplingGrads {
        CouplingGrads {
            s1: self.s1.zeros_like(),
            t1: self.t1.zeros_like(),
            s2: self.s2.zeros_like(),
            t2: self.t2.zeros_like(),
        }
    }

    fn check_input(&self, m: &Mat, context: &'static str) -> Result<()> {
        if m.cols() != self.width() {
            return Err(Error::shape(context, self.width(), m.cols()));
        }
        Ok(())
    }

    fn scale(&self, s: &Mat) -> Mat {
        let c = self.clamp;
        let data = s.as_slice().iter().map(|&x| cexp(x, c)).collect();
        Mat::from_parts(s.rows(), s.cols(), data)
    }

    /// Forward map on a batch (one sample per row).
    pub fn forward(&self, u: &Mat) -> Result<(Mat, CouplingCache)> {
        self.check_input(u, "CouplingLayer::forward")?;
        let half = self.width() / 2;
        let shuffled = self.perm.apply_rows(u);
        let u1 = shuffled.columns(0..half);
        let u2 = shuffled.columns(half..2 * half);

        let (s2_out, s2) = self.s2.forward(&u2);
        s2_out.check_finite("s2")?;
        let (t2_out, t2) = self.t2.forward(&u2);
        t2_out.check_finite("t2")?;
        let scale2 = self.scale(&s2_out);
        let v1 = affine_combine(&scale2, &u1, &t2_out);

        let (s1_out, s1) = self.s1.forward(&v1);
        s1_out.check_finite("s1")?;
        let (t1_out, t1) = self.t1.forward(&v1);
        t1_out.check_finite("t1")?;
        let scale1 = self.scale(&s1_out);
        let v2 = affine_combine(&scale1, &u2, &t1_out);

        let v = Mat::hcat(&[&v1, &v2])?;
        v.check_finite("coupling output")?;
        let cache = CouplingCache {
            direction: Direction::Forward,
            width: self.width(),
            u1,
            u2,
            v1,
            s2,
            t2,
            s2_out,
            scale2,
            s1,
            t1,
            s1_out,
            scale1,
        };
        Ok((v, cache))
    }

    /// Exact inverse of [`CouplingLayer::forward`]; the permutation is undone last.
    pub fn inverse(&self, v: &Mat) -> Result<(Mat, CouplingCache)> {
        self.check_input(v, "CouplingLayer::inverse")?;
        let half = self.width() / 2;
        let v1 = v.columns(0..half);
        let v2 = v.columns(half..2 * half);

        let (s1_out, s1) = self.s1.forward(&v1);
        s1_out.check_finite("s1")?;
        let (t1_out, t1) = self.t1.forward(&v1);
        t1_out.check_finite("t1")?;
        let scale1 = self.scale(&s1_out);
        let u2 = affine_uncombine(&v2, &t1_out, &scale1);

        let (s2_out, s2) = self.s2.forward(&u2);
        s2_out.check_finite("s2")?;
        let (t2_out, t2) = self.t2.forward(&u2);
        t2_out.check_finite("t2")?;
        let scale2 = self.scale(&s2_out);
        let u1 = affine_uncombine(&v1, &t2_out, &scale2);

        let u = self.perm.invert_rows(&Mat::hcat(&[&u1, &u2])?);
        u.check_finite("coupling inverse output")?;
        let cache = CouplingCache {
            direction: Direction::Inverse,
            width: self.width(),
            u1,
            u2,
            v1,
            s2,
            t2,
            s2_out,
            scale2,
            s1,
            t1,
            s1_out,
            scale1,
        };
        Ok((u, cache))
    }

    /// Vector-Jacobian product through whichever direction produced `cache`.
    /// Returns the gradient with respect to that call's input and adds the
    /// parameter gradients into `grads`.
    pub fn vjp(&self, cache: &CouplingCache, upstream: &Mat, grads: &mut CouplingGrads) -> Result<Mat> {
        if cache.width != self.width() {
            return Err(Error::CacheMismatch(format!(
                "cache width {} vs layer width {}",
                cache.width,
                self.width()
            )));
        }
        if upstream.shape() != (cache.batch(), self.width()) {
            return Err(Error::shape(
                "CouplingLayer::vjp upstream",
                format!("{}x{}", cache.batch(), self.width()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        match cache.direction {
            Direction::Forward => Ok(self.vjp_forward(cache, upstream, grads)),
            Direction::Inverse => Ok(self.vjp_inverse(cache, upstream, grads)),
        }
    }

    fn vjp_forward(&self, cache: &CouplingCache, upstream: &Mat, grads: &mut CouplingGrads) -> Mat {
        let half = self.width() / 2;
        let c = self.clamp;
        let n = cache.batch();
        let g1 = upstream.columns(0..half);
        let g2 = upstream.columns(half..2 * half);

        // v2 = scale1 * u2 + t1(v1)
        let mut g_u2 = Mat::zeros(n, half);
        let mut g_s1 = Mat::zeros(n, half);
        for i in 0..n * half {
            let g = g2.as_slice()[i];
            let e = cache.scale1.as_slice()[i];
            let s = cache.s1_out.as_slice()[i];
            g_u2.as_mut_slice()[i] = g * e;
            g_s1.as_mut_slice()[i] = g * cache.u2.as_slice()[i] * e * c / (1.0 + s * s);
        }
        let mut g_v1 = g1;
        self.s1.backward(&cache.v1, &cache.s1, &g_s1, &mut grads.s1, &mut g_v1);
        self.t1.backward(&cache.v1, &cache.t1, &g2, &mut grads.t1, &mut g_v1);

        // v1 = scale2 * u1 + t2(u2)
        let mut g_u1 = Mat::zeros(n, half);
        let mut g_s2 = Mat::zeros(n, half);
        for i in 0..n * half {
            let g = g_v1.as_slice()[i];
            let e = cache.scale2.as_slice()[i];
            let s = cache.s2_out.as_slice()[i];
            g_u1.as_mut_slice()[i] = g * e;
            g_s2.as_mut_slice()[i] = g * cache.u1.as_slice()[i] * e * c / (1.0 + s * s);
        }
        self.s2.backward(&cache.u2, &cache.s2, &g_s2, &mut grads.s2, &mut g_u2);
        self.t2.backward(&cache.u2, &cache.t2, &g_v1, &mut grads.t2, &mut g_u2);

        let g_shuffled = Mat::hcat(&[&g_u1, &g_u2]).expect("equal batch");
        self.perm.invert_rows(&g_shuffled)
    }

    fn vjp_inverse(&self, cache: &CouplingCache, upstream: &Mat, grads: &mut CouplingGrads) -> Mat {
        let half = self.width() / 2;
        let c = self.clamp;
        let n = cache.batch();
        let g_shuffled = self.perm.apply_rows(upstream);
        let g_u1 = g_shuffled.columns(0..half);
        let mut g_u2 = g_shuffled.columns(half..2 * half);

        // u1 = (v1 - t2(u2)) / scale2
        let mut g_v1 = Mat::zeros(n, half);
        let mut g_t2 = Mat::zeros(n, half);
        let mut g_s2 = Mat::zeros(n, half);
        for i in 0..n * half {
            let g = g_u1.as_slice()[i];
            let e = cache.scale2.as_slice()[i];
            let s = cache.s2_out.as_slice()[i];
            g_v1.as_mut_slice()[i] = g / e;
            g_t2.as_mut_slice()[i] = -g / e;
            g_s2.as_mut_slice()[i] = -g * cache.u1.as_slice()[i] * c / (1.0 + s * s);
        }
        self.s2.backward(&cache.u2, &cache.s2, &g_s2, &mut grads.s2, &mut g_u2);
        self.t2.backward(&cache.u2, &cache.t2, &g_t2, &mut grads.t2, &mut g_u2);

        // u2 = (v2 - t1(v1)) / scale1
        let mut g_v2 = Mat::zeros(n, half);
        let mut g_t1 = Mat::zeros(n, half);
        let mut g_s1 = Mat::zeros(n, half);
        for i in 0..n * half {
            let g = g_u2.as_slice()[i];
            let e = cache.scale1.as_slice()[i];
            let s = cache.s1_out.as_slice()[i];
            g_v2.as_mut_slice()[i] = g / e;
            g_t1.as_mut_slice()[i] = -g / e;
            g_s1.as_mut_slice()[i] = -g * cache.u2.as_slice()[i] * c / (1.0 + s * s);
        }
        self.s1.backward(&cache.v1, &cache.s1, &g_s1, &mut grads.s1, &mut g_v1);
        self.t1.backward(&cache.v1, &cache.t1, &g_t1, &mut grads.t1, &mut g_v1);

        Mat::hcat(&[&g_v1, &g_v2]).expect("equal batch")
    }
}

fn check_width(width: usize) -> Result<()> {
    if width < 2 || !width.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "coupling width must be even and >= 2, got {width}"
        )));
    }
    Ok(())
}

fn affine_combine(scale: &Mat, x: &Mat, shift: &Mat) -> Mat {
    let data = scale
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .zip(shift.as_slice())
        .map(|((e, x), t)| e * x + t)
        .collect();
    Mat::from_parts(x.rows(), x.cols(), data)
}

fn affine_uncombine(y: &Mat, shift: &Mat, scale: &Mat) -> Mat {
    let data = y
        .as_slice()
        .iter()
        .zip(shift.as_slice())
        .zip(scale.as_slice())
        .map(|((y, t), e)| (y - t) / e)
        .collect();
    Mat::from_parts(y.rows(), y.cols(), data)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    /// Layer with every parameter drawn from `N(0, sigma^2)`.
    pub(crate) fn random_layer(
        width: usize,
        hidden: usize,
        clamp: f64,
        sigma: f64,
        rng: &mut RngState,
    ) -> CouplingLayer {
        let mut layer = CouplingLayer::new(width, hidden, clamp, rng).unwrap();
        for t in layer.tensors_mut() {
            for v in t.iter_mut() {
                *v = sigma * rng.standard_normal();
            }
        }
        layer
    }

    fn flat_params(layer: &CouplingLayer) -> Vec<f64> {
        layer.tensors().flat_map(|t| t.iter().copied()).collect()
    }

    fn with_params(layer: &CouplingLayer, p: &[f64]) -> CouplingLayer {
        let mut out = layer.clone();
        let mut it = p.iter();
        for t in out.tensors_mut() {
            for v in t.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        out
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = a.iter().chain(b).map(|v| v.abs()).fold(1e-12, f64::max);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn cexp_values() {
        for c in [0.5, 1.0, 2.0, 3.7] {
            assert_eq!(cexp(0.0, c), 1.0);
        }
        assert!((cexp(1e300, 2.0) - std::f64::consts::PI.exp()).abs() < 1e-12);
        assert!((std::f64::consts::PI.exp() - 23.1407).abs() < 1e-4);
        for c in [0.5, 2.0] {
            let g = finite_diff_grad(|p| cexp(p[0], c), &[0.0], 1e-5).unwrap();
            assert!((g[0] - c).abs() < 1e-8);
            assert!((cexp_derivative(0.0, c) - c).abs() < 1e-15);
        }
        // monotone and bounded
        let xs: Vec<f64> = (-50..=50).map(|i| i as f64 * 0.7).collect();
        for w in xs.windows(2) {
            assert!(cexp(w[1], 2.0) > cexp(w[0], 2.0));
        }
    }

    #[test]
    fn zero_layer_is_identity_both_ways() {
        let layer = CouplingLayer::identity(6, 5, 2.0).unwrap();
        let u = Mat::from_rows(&[[1.0, -2.0, 3.0, 0.5, 9.0, -7.0]]).unwrap();
        let (v, _) = layer.forward(&u).unwrap();
        assert_eq!(v, u);
        let (back, _) = layer.inverse(&u).unwrap();
        assert_eq!(back, u);
    }

    #[test]
    fn odd_or_tiny_width_rejected() {
        let mut rng = RngState::new(1);
        assert!(CouplingLayer::new(5, 4, 2.0, &mut rng).is_err());
        assert!(CouplingLayer::identity(0, 4, 2.0).is_err());
        assert!(CouplingLayer::identity(4, 4, 0.0).is_err());
    }

    #[test]
    fn small_round_trip() {
        let mut rng = RngState::new(7);
        let layer = random_layer(4, 8, 2.0, 0.5, &mut rng);
        let u = Mat::from_rows(&[[1.0, 2.0, 3.0, 4.0]]).unwrap();
        let (v, _) = layer.forward(&u).unwrap();
        let (back, _) = layer.inverse(&v).unwrap();
        assert!(back.max_abs_diff(&u) < 1e-12);
    }

    #[test]
    fn scales_stay_inside_clamp_bounds() {
        let mut rng = RngState::new(12);
        let c = 2.0;
        // large parameters push the subnets into saturation
        let layer = random_layer(16, 8, c, 10.0, &mut rng);
        let u = gaussian(&mut rng, 32, 16, 5.0).unwrap();
        let (_, cache) = layer.forward(&u).unwrap();
        let hi = (c * std::f64::consts::FRAC_PI_2).exp();
        let (a, b) = cache.scales();
        for &e in a.as_slice().iter().chain(b.as_slice()) {
            assert!(e > 1.0 / hi && e < hi, "scale {e}");
        }
    }

    #[test]
    fn constant_translation() {
        let sigma = 0.375;
        let mut t2 = Subnet::zeros(1, 3);
        t2.output.bias = vec![sigma];
        let zero = Subnet::zeros(1, 3);
        let layer =
            CouplingLayer::from_parts(Permutation::identity(2), [zero.clone(), zero.clone(), zero, t2], 2.0).unwrap();
        let u = Mat::from_rows(&[[1.25, -4.0], [0.0, 3.0]]).unwrap();
        let (v, _) = layer.forward(&u).unwrap();
        assert_eq!(v.get(0, 0), 1.25 + sigma);
        assert_eq!(v.get(1, 0), sigma);
        assert_eq!(v.get(0, 1), -4.0);
    }

    #[test]
    fn thousand_random_inverse_round_trips() {
        let mut rng = RngState::new(2024);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let layer = random_layer(256, 16, 2.0, 0.2, &mut rng);
            let v = gaussian(&mut rng, 1, 256, 2.0).unwrap();
            let (u, _) = layer.inverse(&v).unwrap();
            let (again, _) = layer.forward(&u).unwrap();
            worst = worst.max(again.max_abs_diff(&v));
        }
        assert!(worst < 1e-9, "worst round-trip error {worst}");
    }

    #[test]
    fn vjp_zero_upstream_gives_zero() {
        let mut rng = RngState::new(3);
        let layer = random_layer(8, 6, 2.0, 0.5, &mut rng);
        let u = gaussian(&mut rng, 3, 8, 1.0).unwrap();
        let (_, cache) = layer.forward(&u).unwrap();
        let mut grads = layer.zero_grads();
        let g = layer.vjp(&cache, &Mat::zeros(3, 8), &mut grads).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        assert!(grads.tensors().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn vjp_rejects_wrong_upstream_or_cache() {
        let mut rng = RngState::new(3);
        let layer = random_layer(8, 6, 2.0, 0.5, &mut rng);
        let other = random_layer(4, 6, 2.0, 0.5, &mut rng);
        let u = gaussian(&mut rng, 3, 8, 1.0).unwrap();
        let (_, cache) = layer.forward(&u).unwrap();
        let mut grads = layer.zero_grads();
        assert!(layer.vjp(&cache, &Mat::zeros(2, 8), &mut grads).is_err());
        let mut og = other.zero_grads();
        assert!(matches!(
            other.vjp(&cache, &Mat::zeros(3, 4), &mut og),
            Err(Error::CacheMismatch(_))
        ));
    }

    fn check_direction(direction: Direction, seed: u64) {
        let mut rng = RngState::new(seed);
        let layer = random_layer(8, 6, 2.0, 0.4, &mut rng);
        let u = gaussian(&mut rng, 1, 8, 1.0).unwrap();
        let run = |l: &CouplingLayer, x: &Mat| match direction {
            Direction::Forward => l.forward(x).unwrap(),
            Direction::Inverse => l.inverse(x).unwrap(),
        };
        let loss = |l: &CouplingLayer, x: &Mat| run(l, x).0.as_slice().iter().sum::<f64>();

        let (_, cache) = run(&layer, &u);
        assert_eq!(cache.direction(), direction);
        let mut grads = layer.zero_grads();
        let g_u = layer
            .vjp(&cache, &Mat::new(1, 8, vec![1.0; 8]).unwrap(), &mut grads)
            .unwrap();

        let fd_u = finite_diff_grad(|p| loss(&layer, &Mat::row_vector(p).unwrap()), u.as_slice(), 1e-6).unwrap();
        let e = rel_err(g_u.as_slice(), &fd_u);
        assert!(e < 1e-6, "{direction:?} input grad rel err {e}");

        let p0 = flat_params(&layer);
        let fd_p = finite_diff_grad(|p| loss(&with_params(&layer, p), &u), &p0, 1e-6).unwrap();
        let analytic: Vec<f64> = grads.tensors().flat_map(|t| t.iter().copied()).collect();
        let e = rel_err(&analytic, &fd_p);
        assert!(e < 1e-6, "{direction:?} param grad rel err {e}");
    }

    #[test]
    fn vjp_matches_finite_differences_forward() {
        check_direction(Direction::Forward, 21);
        check_direction(Direction::Forward, 22);
    }

    #[test]
    fn vjp_matches_finite_differences_inverse() {
        check_direction(Direction::Inverse, 31);
        check_direction(Direction::Inverse, 32);
    }
}
