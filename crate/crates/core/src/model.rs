//! The stacked invertible network and its dimension budget.
//!
//! Input side: `[x | x_pad]`. Output side: `[z | yz_pad | y]`. Both sides
//! have `d_total` columns. The output layout is fixed and stored in every
//! checkpoint.

use serde::{Deserialize, Serialize};

use crate::coupling::CouplingCache;
use crate::coupling::{CouplingGrads, CouplingLayer, Direction};
use crate::error::{Error, Result};
use crate::numerics::{gaussian, Mat, RngState};

pub const DEFAULT_D_X: usize = 144;
pub const DEFAULT_D_Y: usize = 185;
pub const DEFAULT_D_Z: usize = 9;
pub const DEFAULT_D_TOTAL: usize = 256;

/// Widths of the input features, labels, nuisance variables and the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DimSpec {
    pub d_x: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub d_total: usize,
}

impl Default for DimSpec {
    fn default() -> Self {
        Self {
            d_x: DEFAULT_D_X,
            d_y: DEFAULT_D_Y,
            d_z: DEFAULT_D_Z,
            d_total: DEFAULT_D_TOTAL,
        }
    }
}

impl DimSpec {
    pub fn new(d_x: usize, d_y: usize, d_z: usize, d_total: usize) -> Result<Self> {
        let spec = Self { d_x, d_y, d_z, d_total };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_total < 2 || !self.d_total.is_multiple_of(2) {
            return Err(Error::Dimension(format!("d_total must be even, got {}", self.d_total)));
        }
        if self.d_x == 0 || self.d_y == 0 {
            return Err(Error::Dimension("d_x and d_y must be positive".into()));
        }
        if self.d_x > self.d_total {
            return Err(Error::Dimension(format!(
                "d_x {} exceeds d_total {}",
                self.d_x, self.d_total
            )));
        }
        if self.d_y + self.d_z > self.d_total {
            return Err(Error::Dimension(format!(
                "d_y + d_z = {} exceeds d_total {}",
                self.d_y + self.d_z,
                self.d_total
            )));
        }
        Ok(())
    }

    pub fn d_xpad(&self) -> usize {
        self.d_total - self.d_x
    }

    pub fn d_yzpad(&self) -> usize {
        self.d_total - self.d_y - self.d_z
    }

    pub fn z_cols(&self) -> std::ops::Range<usize> {
        0..self.d_z
    }

    pub fn yzpad_cols(&self) -> std::ops::Range<usize> {
        self.d_z..self.d_z + self.d_yzpad()
    }

    pub fn y_cols(&self) -> std::ops::Range<usize> {
        self.d_z + self.d_yzpad()..self.d_total
    }
}

/// Split network output `[z | yz_pad | y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputParts {
    pub z: Mat,
    pub yz_pad: Mat,
    pub y: Mat,
}

/// Split network input `[x | x_pad]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputParts {
    pub x: Mat,
    pub x_pad: Mat,
}

/// Layer caches of one pass through the whole stack.
#[derive(Clone, Debug)]
pub struct ModelCache {
    direction: Direction,
    layers: Vec<CouplingCache>,
}

impl ModelCache {
    pub fn direction(&self) -> Direction {
        self.direction
    }
}

/// Parameter gradients for every layer, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<CouplingGrads>,
}

impl ModelGrads {
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| l.tensors())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Adds `other` scaled by `alpha` into `self`.
    pub fn add_scaled(&mut self, other: &ModelGrads, alpha: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (ta, tb) in a.tensors_mut().zip(b.tensors()) {
                for (x, y) in ta.iter_mut().zip(tb) {
                    *x += alpha * y;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnModel {
    spec: DimSpec,
    layers: Vec<CouplingLayer>,
}

impl InnModel {
    /// Fresh model: random permutations, identity-initialized subnets.
    pub fn new(spec: DimSpec, n_layers: usize, hidden: usize, clamp: f64, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        if n_layers == 0 || hidden == 0 {
            return Err(Error::InvalidArgument(
                "need at least one layer and one hidden unit".into(),
            ));
        }
        let layers = (0..n_layers)
            .map(|_| CouplingLayer::new(spec.d_total, hidden, clamp, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, layers })
    }

    pub fn from_layers(spec: DimSpec, layers: Vec<CouplingLayer>) -> Result<Self> {
        spec.validate()?;
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.width() != spec.d_total {
                return Err(Error::Dimension(format!(
                    "layer {i} width {} != d_total {}",
                    l.width(),
                    spec.d_total
                )));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &DimSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn hidden_width(&self) -> usize {
        self.layers[0].hidden_width()
    }

    pub fn clamp(&self) -> f64 {
        self.layers[0].clamp()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| l.tensors())
    }

    /// All parameters flattened: layer-major, subnets `s1, t1, s2, t2`, and
    /// per subnet hidden weight, hidden bias, output weight, output bias.
    pub fn params_flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(
                "InnModel::set_params_flat",
                self.param_count(),
                params.len(),
            ));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("model parameters"));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for t in layer.tensors_mut() {
                t.copy_from_slice(&params[offset..offset + t.len()]);
                offset += t.len();
            }
        }
        Ok(())
    }

    /// Adds `N(0, sigma^2)` noise to every parameter.
    pub fn perturb(&mut self, rng: &mut RngState, sigma: f64) {
        for layer in &mut self.layers {
            for t in layer.tensors_mut() {
                for v in t.iter_mut() {
                    *v += sigma * rng.standard_normal();
                }
            }
        }
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            layers: self.layers.iter().map(|l| l.zero_grads()).collect(),
        }
    }

    /// `f` on full-width rows.
    pub fn forward_full(&self, input: &Mat) -> Result<(Mat, ModelCache)> {
        self.check_width(input, "InnModel::forward")?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = input.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&h)?;
            caches.push(cache);
            h = out;
        }
        Ok((
            h,
            ModelCache {
                direction: Direction::Forward,
                layers: caches,
            },
        ))
    }

    /// `f^{-1}` on full-width rows.
    pub fn inverse_full(&self, output: &Mat) -> Result<(Mat, ModelCache)> {
        self.check_width(output, "InnModel::inverse")?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = output.clone();
        for layer in self.layers.iter().rev() {
            let (out, cache) = layer.inverse(&h)?;
            caches.push(cache);
            h = out;
        }
        caches.reverse();
        Ok((
            h,
            ModelCache {
                direction: Direction::Inverse,
                layers: caches,
            },
        ))
    }

    /// Pulls `upstream` (gradient w.r.t. the pass output) back through the
    /// pass recorded in `cache`. `direction` must match the recorded pass.
    pub fn vjp(&self, direction: Direction, cache: &ModelCache, upstream: &Mat, grads: &mut ModelGrads) -> Result<Mat> {
        if cache.direction != direction {
            return Err(Error::CacheMismatch(format!(
                "expected a {direction:?} cache, got {:?}",
                cache.direction
            )));
        }
        if cache.layers.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::CacheMismatch(format!(
                "cache has {} layers, model has {}",
                cache.layers.len(),
                self.layers.len()
            )));
        }
        if cache.layers.iter().any(|c| c.direction() != direction) {
            return Err(Error::CacheMismatch("mixed-direction layer caches".into()));
        }
        let mut g = upstream.clone();
        match direction {
            Direction::Forward => {
                for ((layer, c), lg) in self.layers.iter().zip(&cache.layers).zip(&mut grads.layers).rev() {
                    g = layer.vjp(c, &g, lg)?;
                }
            }
            Direction::Inverse => {
                for ((layer, c), lg) in self.layers.iter().zip(&cache.layers).zip(&mut grads.layers) {
                    g = layer.vjp(c, &g, lg)?;
                }
            }
        }
        Ok(g)
    }

    fn check_width(&self, m: &Mat, context: &'static str) -> Result<()> {
        if m.cols() != self.spec.d_total {
            return Err(Error::shape(context, self.spec.d_total, m.cols()));
        }
        Ok(())
    }

    /// Splits full-width output rows into `[z | yz_pad | y]`.
    pub fn split_output(&self, out: &Mat) -> OutputParts {
        OutputParts {
            z: out.columns(self.spec.z_cols()),
            yz_pad: out.columns(self.spec.yzpad_cols()),
            y: out.columns(self.spec.y_cols()),
        }
    }

    pub fn split_input(&self, input: &Mat) -> InputParts {
        InputParts {
            x: input.columns(0..self.spec.d_x),
            x_pad: input.columns(self.spec.d_x..self.spec.d_total),
        }
    }

    /// `[z; yz_pad; y] = f([x; x_pad])`, one frame per row.
    pub fn forward(&self, x: &Mat, x_pad: &Mat) -> Result<OutputParts> {
        check_cols(x, self.spec.d_x, "x")?;
        check_cols(x_pad, self.spec.d_xpad(), "x_pad")?;
        check_rows(x, x_pad)?;
        let (out, _) = self.forward_full(&Mat::hcat(&[x, x_pad])?)?;
        Ok(self.split_output(&out))
    }

    /// `[x; x_pad] = f^{-1}([z; yz_pad; y])`.
    pub fn inverse(&self, z: &Mat, yz_pad: &Mat, y: &Mat) -> Result<InputParts> {
        check_cols(z, self.spec.d_z, "z")?;
        check_cols(yz_pad, self.spec.d_yzpad(), "yz_pad")?;
        check_cols(y, self.spec.d_y, "y")?;
        check_rows(z, yz_pad)?;
        check_rows(z, y)?;
        let (input, _) = self.inverse_full(&Mat::hcat(&[z, yz_pad, y])?)?;
        Ok(self.split_input(&input))
    }

    /// Generative use: `z ~ N(0, I)`, zero padding, returns the `x` part of
    /// `f^{-1}([z; 0; y])`.
    pub fn sample(&self, y: &Mat, rng: &mut RngState) -> Result<Mat> {
        check_cols(y, self.spec.d_y, "y")?;
        if !y.is_finite() {
            return Err(Error::non_finite("sample labels"));
        }
        let z = gaussian(rng, y.rows(), self.spec.d_z, 1.0)?;
        let pad = Mat::zeros(y.rows(), self.spec.d_yzpad());
        Ok(self.inverse(&z, &pad, y)?.x)
    }

    /// Training-time input padding `~ N(0, eps^2)`.
    pub fn pad_for_training(&self, rows: usize, rng: &mut RngState, eps: f64) -> Result<Mat> {
        gaussian(rng, rows, self.spec.d_xpad(), eps)
    }

    /// Inference-time input padding: exact zeros.
    pub fn pad_for_inference(&self, rows: usize) -> Mat {
        Mat::zeros(rows, self.spec.d_xpad())
    }

    /// Forward with zero padding, the inference configuration.
    pub fn predict(&self, x: &Mat) -> Result<OutputParts> {
        self.forward(x, &self.pad_for_inference(x.rows()))
    }
}

fn check_cols(m: &Mat, expected: usize, what: &'static str) -> Result<()> {
    if m.cols() != expected {
        return Err(Error::shape(what, expected, m.cols()));
    }
    Ok(())
}

fn check_rows(a: &Mat, b: &Mat) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::shape("row count", a.rows(), b.rows()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn small_spec() -> DimSpec {
        DimSpec::new(5, 3, 2, 10).unwrap()
    }

    fn random_model(spec: DimSpec, seed: u64, sigma: f64) -> InnModel {
        let mut rng = RngState::new(seed);
        let mut m = InnModel::new(spec, 3, 6, 2.0, &mut rng).unwrap();
        m.perturb(&mut rng, sigma);
        m
    }

    #[test]
    fn default_budget() {
        let spec = DimSpec::default();
        assert_eq!(spec.d_xpad(), 112);
        assert_eq!(spec.d_yzpad(), 62);
        assert_eq!(spec.d_x + spec.d_xpad(), 256);
        assert_eq!(spec.d_z + spec.d_yzpad() + spec.d_y, 256);
        assert!(DimSpec::new(144, 185, 9, 255).is_err());
        assert!(DimSpec::new(300, 185, 9, 256).is_err());
        assert!(DimSpec::new(144, 250, 9, 256).is_err());
    }

    #[test]
    fn identity_init_is_a_pure_permutation() {
        let spec = DimSpec::default();
        let model = InnModel::new(spec, 5, 8, 2.0, &mut RngState::new(1)).unwrap();
        let mut rng = RngState::new(2);
        let x = gaussian(&mut rng, 4, spec.d_x, 1.0).unwrap();
        let pad = model.pad_for_training(4, &mut rng, 0.01).unwrap();
        let full = Mat::hcat(&[&x, &pad]).unwrap();
        let (out, _) = model.forward_full(&full).unwrap();
        let mut expected = full.clone();
        for layer in model.layers() {
            expected = layer.permutation().apply_rows(&expected);
        }
        assert_eq!(out, expected);
        let back = model
            .inverse(
                &model.split_output(&out).z,
                &model.split_output(&out).yz_pad,
                &model.split_output(&out).y,
            )
            .unwrap();
        assert_eq!(back.x, x);
        assert_eq!(back.x_pad, pad);
    }

    #[test]
    fn forward_inverse_round_trip() {
        let spec = small_spec();
        let model = random_model(spec, 8, 0.1);
        let mut rng = RngState::new(9);
        let x = gaussian(&mut rng, 20, spec.d_x, 1.0).unwrap();
        let pad = model.pad_for_training(20, &mut rng, 0.01).unwrap();
        let out = model.forward(&x, &pad).unwrap();
        let back = model.inverse(&out.z, &out.yz_pad, &out.y).unwrap();
        let err = back.x.max_abs_diff(&x).max(back.x_pad.max_abs_diff(&pad));
        assert!(err < 1e-9, "round trip error {err:e}");
    }

    #[test]
    fn batch_equals_single_frames() {
        let spec = small_spec();
        let model = random_model(spec, 10, 0.5);
        let x = gaussian(&mut RngState::new(3), 6, spec.d_x, 1.0).unwrap();
        let pad = model.pad_for_inference(6);
        let batch = model.forward(&x, &pad).unwrap();
        for r in 0..6 {
            let one = model.forward(&x.row_range(r..r + 1), &pad.row_range(r..r + 1)).unwrap();
            assert_eq!(one.y.row(0), batch.y.row(r));
            assert_eq!(one.z.row(0), batch.z.row(r));
        }
        // permuting the batch permutes the outputs
        let order = [5, 2, 0, 1, 4, 3];
        let shuffled = model.forward(&x.select_rows(&order), &pad).unwrap();
        assert_eq!(shuffled.y, batch.y.select_rows(&order));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let spec = small_spec();
        let model = random_model(spec, 1, 0.1);
        let x = Mat::zeros(2, spec.d_x + 1);
        assert!(model.forward(&x, &Mat::zeros(2, spec.d_xpad())).is_err());
        assert!(model
            .inverse(&Mat::zeros(2, 2), &Mat::zeros(2, 4), &Mat::zeros(2, 3))
            .is_err());
        assert!(model.sample(&Mat::zeros(1, 4), &mut RngState::new(0)).is_err());
    }

    #[test]
    fn sampling_determinism() {
        let spec = small_spec();
        let model = random_model(spec, 4, 0.5);
        let y = Mat::from_rows(&[[1.0, 0.0, 2.0]]).unwrap();
        let a = model.sample(&y, &mut RngState::new(5)).unwrap();
        let b = model.sample(&y, &mut RngState::new(5)).unwrap();
        let c = model.sample(&y, &mut RngState::new(6)).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&c) > 0.0);
    }

    #[test]
    fn padding_modes() {
        let model = InnModel::new(DimSpec::default(), 1, 2, 2.0, &mut RngState::new(0)).unwrap();
        let zero = model.pad_for_inference(3);
        assert_eq!(zero.shape(), (3, 112));
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));
        let pads = model.pad_for_training(1000, &mut RngState::new(4), 0.01).unwrap();
        let vals = pads.as_slice();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(vals.len() > 100_000);
        assert!((std - 0.01).abs() < 0.001, "std {std}");
    }

    #[test]
    fn vjp_direction_must_match() {
        let spec = small_spec();
        let model = random_model(spec, 2, 0.3);
        let input = gaussian(&mut RngState::new(1), 2, 10, 1.0).unwrap();
        let (_, cache) = model.forward_full(&input).unwrap();
        let mut g = model.zero_grads();
        assert!(matches!(
            model.vjp(Direction::Inverse, &cache, &Mat::zeros(2, 10), &mut g),
            Err(Error::CacheMismatch(_))
        ));
    }

    #[test]
    fn model_vjp_matches_finite_differences() {
        let spec = small_spec();
        let model = random_model(spec, 14, 0.4);
        let mut rng = RngState::new(15);
        let input = gaussian(&mut rng, 3, 10, 1.0).unwrap();
        let weights = gaussian(&mut rng, 3, 10, 1.0).unwrap();
        let loss = |m: &InnModel, inverse: bool| -> f64 {
            let out = if inverse {
                m.inverse_full(&input)
            } else {
                m.forward_full(&input)
            }
            .unwrap()
            .0;
            out.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum()
        };
        for (inverse, dir) in [(false, Direction::Forward), (true, Direction::Inverse)] {
            let (_, cache) = if inverse {
                model.inverse_full(&input)
            } else {
                model.forward_full(&input)
            }
            .unwrap();
            let mut grads = model.zero_grads();
            model.vjp(dir, &cache, &weights, &mut grads).unwrap();
            let p0 = model.params_flat();
            let fd = finite_diff_grad(
                |p| {
                    let mut m = model.clone();
                    m.set_params_flat(p).unwrap();
                    loss(&m, inverse)
                },
                &p0,
                1e-6,
            )
            .unwrap();
            let analytic = grads.to_flat();
            let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let err = analytic.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
            assert!(err < 1e-6, "{dir:?}: {err}");
        }
    }
}
