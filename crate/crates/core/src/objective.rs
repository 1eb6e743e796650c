//! The six-term training objective and its gradient.
//!
//! One update runs three passes over a batch `(X, Y)`:
//!
//! 1. forward on `[X | x_pad]` giving `(Z^, YZpad^, Y^)`; terms `L_y`,
//!    `L_yzpad` and `L_yz = SWD([Y | Z], [Y^ | Z^])`, where `Y^` inside `L_yz`
//!    is treated as a constant;
//! 2. inverse on `[Z^ | yz_pad | Y^]` giving `(X^, Xpad^)`; terms `L_xhat`
//!    and `L_xpad`;
//! 3. inverse on `[Z' | 0 | Y]` giving `X_sam`; term `L_xsam = SWD(X, X_sam)`.
//!
//! Pass 2 consumes outputs of pass 1, so its gradient flows back through
//! pass 1 as well.

use std::fmt::Write as _;

use crate::coupling::Direction;
use crate::error::{Error, Result};
use crate::model::{InnModel, ModelGrads};
use crate::numerics::{gaussian, median, Mat, RngState};
use crate::swd::{swd_grad_with, swd_with, Projections, DEFAULT_PROJECTIONS};

pub const TERM_NAMES: [&str; 6] = ["L_y", "L_xhat", "L_yz", "L_xsam", "L_xpad", "L_yzpad"];

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub y: f64,
    pub xhat: f64,
    pub yz: f64,
    pub xsam: f64,
    pub xpad: f64,
    pub yzpad: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::from_array([1.0; 6])
    }
}

impl LossWeights {
    pub fn from_array(w: [f64; 6]) -> Self {
        Self {
            y: w[0],
            xhat: w[1],
            yz: w[2],
            xsam: w[3],
            xpad: w[4],
            yzpad: w[5],
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.y, self.xhat, self.yz, self.xsam, self.xpad, self.yzpad]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and >= 0: {w:?}"
            )));
        }
        if self.y <= 0.0 {
            return Err(Error::InvalidArgument("the label weight must be > 0".into()));
        }
        Ok(())
    }
}

/// Raw term values in [`TERM_NAMES`] order, their weighted versions and
/// the weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub raw: [f64; 6],
    pub weighted: [f64; 6],
    pub total: f64,
}

impl LossBreakdown {
    fn new(raw: [f64; 6], weights: &LossWeights) -> Result<Self> {
        for (v, name) in raw.iter().zip(TERM_NAMES) {
            if !v.is_finite() {
                return Err(Error::non_finite(name));
            }
        }
        let w = weights.as_array();
        let mut weighted = [0.0; 6];
        for i in 0..6 {
            weighted[i] = w[i] * raw[i];
        }
        let total = weighted.iter().sum();
        Ok(Self { raw, weighted, total })
    }

    pub fn l_y(&self) -> f64 {
        self.raw[0]
    }

    pub fn csv_header() -> String {
        let mut s = String::from("step");
        for n in TERM_NAMES {
            let _ = write!(s, ",{n}");
        }
        for n in TERM_NAMES {
            let _ = write!(s, ",w_{n}");
        }
        s.push_str(",total");
        s
    }

    /// `step`, six raw terms, six weighted terms, total.
    pub fn csv_row(&self, step: u64) -> String {
        let mut s = step.to_string();
        for v in self.raw.iter().chain(&self.weighted) {
            let _ = write!(s, ",{v:e}");
        }
        let _ = write!(s, ",{:e}", self.total);
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// Standard deviation of the training padding noise.
    pub pad_noise: f64,
    /// Projection count shared by both distribution terms.
    pub projections: usize,
    /// Block gradients of `L_yz` through `Y^`.
    pub detach_yhat: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            pad_noise: 0.01,
            projections: DEFAULT_PROJECTIONS,
            detach_yhat: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Mat,
    pub y: Mat,
}

impl Batch {
    pub fn new(x: Mat, y: Mat) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::shape("batch rows", x.rows(), y.rows()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Every random quantity one update consumes.
#[derive(Clone, Debug)]
pub struct StepNoise {
    pub x_pad: Mat,
    pub yz_pad: Mat,
    /// Proposal draws matched against `Z^` in `L_yz`.
    pub z_latent: Mat,
    /// Proposal draws fed to the sampling pass.
    pub z_sample: Mat,
    pub proj_yz: Projections,
    pub proj_x: Projections,
}

impl StepNoise {
    pub fn draw(model: &InnModel, n: usize, cfg: &ObjectiveConfig, rng: &mut RngState) -> Result<Self> {
        let spec = model.spec();
        let x_pad = gaussian(rng, n, spec.d_xpad(), cfg.pad_noise)?;
        let yz_pad = gaussian(rng, n, spec.d_yzpad(), cfg.pad_noise)?;
        let z_latent = gaussian(rng, n, spec.d_z, 1.0)?;
        let z_sample = gaussian(rng, n, spec.d_z, 1.0)?;
        let proj_yz = Projections::draw(rng, cfg.projections, spec.d_y + spec.d_z)?;
        let proj_x = Projections::draw(rng, cfg.projections, spec.d_x)?;
        Ok(Self {
            x_pad,
            yz_pad,
            z_latent,
            z_sample,
            proj_yz,
            proj_x,
        })
    }
}

pub(crate) fn mse(a: &Mat, b: &Mat) -> f64 {
    let n = a.as_slice().len();
    if n == 0 {
        return 0.0;
    }
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n as f64
}

/// Writes `scale * 2 (pred - target) / len` into columns `cols` of `g`.
fn add_mse_grad(g: &mut Mat, cols: std::ops::Range<usize>, pred: &Mat, target: &Mat, scale: f64) {
    let n = pred.as_slice().len();
    if n == 0 || scale == 0.0 {
        return;
    }
    let k = 2.0 * scale / n as f64;
    for r in 0..pred.rows() {
        let (p, t) = (pred.row(r), target.row(r));
        let dst = &mut g.row_mut(r)[cols.clone()];
        for c in 0..dst.len() {
            dst[c] += k * (p[c] - t[c]);
        }
    }
}

fn add_block(g: &mut Mat, cols: std::ops::Range<usize>, src: &Mat, src_cols: std::ops::Range<usize>, scale: f64) {
    for r in 0..g.rows() {
        let s = &src.row(r)[src_cols.clone()];
        let d = &mut g.row_mut(r)[cols.clone()];
        for (a, b) in d.iter_mut().zip(s) {
            *a += scale * b;
        }
    }
}

fn check_batch(model: &InnModel, batch: &Batch) -> Result<()> {
    let spec = model.spec();
    if batch.x.cols() != spec.d_x || batch.y.cols() != spec.d_y {
        return Err(Error::Dimension(format!(
            "batch is {}+{} wide, model expects {}+{}",
            batch.x.cols(),
            batch.y.cols(),
            spec.d_x,
            spec.d_y
        )));
    }
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(
            "distribution terms need a batch of at least 2".into(),
        ));
    }
    Ok(())
}

/// Objective value for fixed noise. `frozen_yhat`, when given, replaces `Y^`
/// inside `L_yz` only; evaluating with `Y^` frozen at a base point gives a
/// function whose derivative there is the stop-gradient objective's.
pub fn evaluate(
    model: &InnModel,
    batch: &Batch,
    noise: &StepNoise,
    weights: &LossWeights,
    frozen_yhat: Option<&Mat>,
) -> Result<LossBreakdown> {
    check_batch(model, batch)?;
    let spec = *model.spec();
    let n = batch.len();

    let (out1, _) = model.forward_full(&Mat::hcat(&[&batch.x, &noise.x_pad])?)?;
    let p1 = model.split_output(&out1);
    let l_y = mse(&p1.y, &batch.y);
    let l_yzpad = mse(&p1.yz_pad, &noise.yz_pad);
    let y_for_swd = frozen_yhat.unwrap_or(&p1.y);
    let l_yz = swd_with(
        &Mat::hcat(&[&batch.y, &noise.z_latent])?,
        &Mat::hcat(&[y_for_swd, &p1.z])?,
        &noise.proj_yz,
    )?;

    let (in2, _) = model.inverse_full(&Mat::hcat(&[&p1.z, &noise.yz_pad, &p1.y])?)?;
    let p2 = model.split_input(&in2);
    let l_xhat = mse(&p2.x, &batch.x);
    let l_xpad = mse(&p2.x_pad, &noise.x_pad);

    let zero_pad = Mat::zeros(n, spec.d_yzpad());
    let (in3, _) = model.inverse_full(&Mat::hcat(&[&noise.z_sample, &zero_pad, &batch.y])?)?;
    let x_sam = in3.columns(0..spec.d_x);
    let l_xsam = swd_with(&batch.x, &x_sam, &noise.proj_x)?;

    LossBreakdown::new([l_y, l_xhat, l_yz, l_xsam, l_xpad, l_yzpad], weights)
}

/// Loss breakdown and parameter gradients of the weighted objective for
/// fixed noise.
pub fn losses_and_grads(
    model: &InnModel,
    batch: &Batch,
    noise: &StepNoise,
    weights: &LossWeights,
    detach_yhat: bool,
) -> Result<(LossBreakdown, ModelGrads)> {
    check_batch(model, batch)?;
    let spec = *model.spec();
    let n = batch.len();
    let mut grads = model.zero_grads();

    // pass 1: forward
    let (out1, cache1) = model.forward_full(&Mat::hcat(&[&batch.x, &noise.x_pad])?)?;
    let p1 = model.split_output(&out1);
    let l_y = mse(&p1.y, &batch.y);
    let l_yzpad = mse(&p1.yz_pad, &noise.yz_pad);
    let (l_yz, _, g_yz) = swd_grad_with(
        &Mat::hcat(&[&batch.y, &noise.z_latent])?,
        &Mat::hcat(&[&p1.y, &p1.z])?,
        &noise.proj_yz,
    )?;

    let mut g_out1 = Mat::zeros(n, spec.d_total);
    add_mse_grad(&mut g_out1, spec.y_cols(), &p1.y, &batch.y, weights.y);
    add_mse_grad(&mut g_out1, spec.yzpad_cols(), &p1.yz_pad, &noise.yz_pad, weights.yzpad);
    add_block(
        &mut g_out1,
        spec.z_cols(),
        &g_yz,
        spec.d_y..spec.d_y + spec.d_z,
        weights.yz,
    );
    if !detach_yhat {
        add_block(&mut g_out1, spec.y_cols(), &g_yz, 0..spec.d_y, weights.yz);
    }

    // pass 2: reconstruction through the inverse
    let (in2, cache2) = model.inverse_full(&Mat::hcat(&[&p1.z, &noise.yz_pad, &p1.y])?)?;
    let p2 = model.split_input(&in2);
    let l_xhat = mse(&p2.x, &batch.x);
    let l_xpad = mse(&p2.x_pad, &noise.x_pad);
    let mut g_in2 = Mat::zeros(n, spec.d_total);
    add_mse_grad(&mut g_in2, 0..spec.d_x, &p2.x, &batch.x, weights.xhat);
    add_mse_grad(
        &mut g_in2,
        spec.d_x..spec.d_total,
        &p2.x_pad,
        &noise.x_pad,
        weights.xpad,
    );
    let g_out2 = model.vjp(Direction::Inverse, &cache2, &g_in2, &mut grads)?;
    add_block(&mut g_out1, spec.z_cols(), &g_out2, spec.z_cols(), 1.0);
    add_block(&mut g_out1, spec.y_cols(), &g_out2, spec.y_cols(), 1.0);

    // pass 3: sampling
    let zero_pad = Mat::zeros(n, spec.d_yzpad());
    let (in3, cache3) = model.inverse_full(&Mat::hcat(&[&noise.z_sample, &zero_pad, &batch.y])?)?;
    let x_sam = in3.columns(0..spec.d_x);
    let (l_xsam, _, g_sam) = swd_grad_with(&batch.x, &x_sam, &noise.proj_x)?;
    let mut g_in3 = Mat::zeros(n, spec.d_total);
    add_block(&mut g_in3, 0..spec.d_x, &g_sam, 0..spec.d_x, weights.xsam);
    model.vjp(Direction::Inverse, &cache3, &g_in3, &mut grads)?;

    model.vjp(Direction::Forward, &cache1, &g_out1, &mut grads)?;

    let breakdown = LossBreakdown::new([l_y, l_xhat, l_yz, l_xsam, l_xpad, l_yzpad], weights)?;
    if !grads.is_finite() {
        return Err(Error::non_finite("objective gradient"));
    }
    Ok((breakdown, grads))
}

/// Draws fresh noise for one update from `rng` and returns the losses and
/// gradients.
pub fn joint_step_losses(
    model: &InnModel,
    batch: &Batch,
    weights: &LossWeights,
    cfg: &ObjectiveConfig,
    rng: &mut RngState,
) -> Result<(LossBreakdown, ModelGrads)> {
    check_batch(model, batch)?;
    let noise = StepNoise::draw(model, batch.len(), cfg, rng)?;
    losses_and_grads(model, batch, &noise, weights, cfg.detach_yhat)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub weights: LossWeights,
    pub medians: [f64; 6],
    /// Terms whose median was zero; their weight was set to 1.
    pub flagged: Vec<&'static str>,
}

/// Balances term magnitudes: `w_i = median(L_y) / median(L_i)` over the
/// probe batches, so every weighted term starts near the label term.
pub fn calibrate_weights(
    model: &InnModel,
    batches: &[Batch],
    cfg: &ObjectiveConfig,
    rng: &mut RngState,
) -> Result<Calibration> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("calibration needs at least one batch".into()));
    }
    let mut per_term: [Vec<f64>; 6] = Default::default();
    for batch in batches {
        let noise = StepNoise::draw(model, batch.len(), cfg, rng)?;
        let b = evaluate(model, batch, &noise, &LossWeights::default(), None)?;
        for (acc, v) in per_term.iter_mut().zip(b.raw) {
            acc.push(v);
        }
    }
    let medians = per_term.map(|v| median(&v));
    Ok(weights_from_medians(medians))
}

pub fn weights_from_medians(medians: [f64; 6]) -> Calibration {
    let target = if medians[0] > 0.0 { medians[0] } else { 1.0 };
    let mut w = [1.0; 6];
    let mut flagged = Vec::new();
    for i in 0..6 {
        if medians[i] > 0.0 && medians[i].is_finite() {
            w[i] = target / medians[i];
        } else {
            flagged.push(TERM_NAMES[i]);
        }
    }
    Calibration {
        weights: LossWeights::from_array(w),
        medians,
        flagged,
    }
}
