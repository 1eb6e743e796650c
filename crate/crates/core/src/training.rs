//! Adam, the training loop and the gradient check.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datagen::{read_frames, FramesFile};
use crate::error::{Error, Result};
use crate::evaluation::{framewise_prf, predict_labels, DEFAULT_ACTIVITY_THRESHOLD};
use crate::model::{DimSpec, InnModel};
use crate::numerics::{finite_diff_grad, gaussian, shuffle, Mat, RngState};
use crate::objective::{
    calibrate_weights, evaluate, joint_step_losses, losses_and_grads, mse, Batch, Calibration, LossBreakdown,
    LossWeights, ObjectiveConfig, StepNoise, TERM_NAMES,
};

pub const LOSS_LOG: &str = "loss_log.csv";
pub const BREAKDOWN_LOG: &str = "loss_breakdown.csv";
pub const VALIDATION_LOG: &str = "validation.csv";
pub const FINAL_CHECKPOINT: &str = "final.innckpt";
pub const BEST_CHECKPOINT: &str = "best.innckpt";

pub const DEFAULT_GRAD_CLIP: f64 = 10.0;

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const CALIBRATION_STREAM: u64 = 3;
const RECALIBRATION_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Standard deviation of the padding noise.
    pub pad_noise: f64,
    pub swd_projections: usize,
    pub seed: u64,
    /// Write `epoch_NNN.innckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub calibration_batches: usize,
    pub layers: usize,
    pub hidden: usize,
    pub clamp: f64,
    /// Phase level above which a key counts as active in validation F1.
    pub activity_threshold: f64,
    /// Largest global L2 norm a gradient may have before it is rescaled;
    /// 0 disables.
    pub grad_clip: f64,
    /// Re-measure the loss weights on the current model after this epoch;
    /// 0 keeps the initial weights.
    pub recalibrate_after: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            pad_noise: 0.01,
            swd_projections: 128,
            seed: 0,
            checkpoint_every: 0,
            calibration_batches: 8,
            layers: 5,
            hidden: 64,
            clamp: 2.0,
            activity_threshold: DEFAULT_ACTIVITY_THRESHOLD,
            grad_clip: DEFAULT_GRAD_CLIP,
            recalibrate_after: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0".into());
        }
        if !(self.pad_noise >= 0.0 && self.pad_noise.is_finite()) {
            return bad("pad_noise must be >= 0".into());
        }
        if self.swd_projections == 0 || self.calibration_batches == 0 {
            return bad("swd_projections and calibration_batches must be >= 1".into());
        }
        if self.layers == 0 || self.hidden == 0 {
            return bad("layers and hidden must be >= 1".into());
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return bad("clamp must be > 0".into());
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip must be >= 0".into());
        }
        if !self.activity_threshold.is_finite() {
            return bad("activity_threshold must be finite".into());
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            pad_noise: self.pad_noise,
            projections: self.swd_projections,
            detach_yhat: true,
        }
    }
}

/// Optimizer state saved in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Bias-corrected adaptive-moment optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamMoments,
    beta1_pow: f64,
    beta2_pow: f64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            state: AdamMoments {
                step: 0,
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
            },
            beta1_pow: 1.0,
            beta2_pow: 1.0,
        }
    }

    pub fn from_config(n_params: usize, cfg: &TrainConfig) -> Self {
        Self::new(n_params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// Resumes from saved moments.
    pub fn with_moments(mut self, moments: AdamMoments) -> Result<Self> {
        if moments.m.len() != self.state.m.len() || moments.v.len() != self.state.v.len() {
            return Err(Error::shape("Adam moments", self.state.m.len(), moments.m.len()));
        }
        // same products the update loop would have accumulated
        self.beta1_pow = 1.0;
        self.beta2_pow = 1.0;
        for _ in 0..moments.step {
            self.beta1_pow *= self.beta1;
            self.beta2_pow *= self.beta2;
        }
        self.state = moments;
        Ok(self)
    }

    pub fn moments(&self) -> &AdamMoments {
        &self.state
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let n = self.state.m.len();
        if params.len() != n || grads.len() != n {
            return Err(Error::shape("Adam::update", n, grads.len()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::non_finite(format!("gradient coordinate {i}")));
        }
        self.state.step += 1;
        self.beta1_pow *= self.beta1;
        self.beta2_pow *= self.beta2;
        let c1 = 1.0 - self.beta1_pow;
        let c2 = 1.0 - self.beta2_pow;
        let AdamMoments { m, v, .. } = &mut self.state;
        for i in 0..n {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Rescales `grads` to L2 norm `max` if it is larger; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max > 0.0 && norm > max {
        let k = max / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: InnModel,
    pub adam: Adam,
    pub weights: LossWeights,
    pub rng: RngState,
    pub step: u64,
    pub grad_clip: f64,
}

impl TrainState {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            pad_noise: cfg.pad_noise,
            seed: cfg.seed,
            rng: Some(self.rng.snapshot()),
            step: self.step,
            weights: self.weights,
            optimizer: Some(self.adam.moments().clone()),
        }
    }

    /// One update on `batch`.
    pub fn step(&mut self, batch: &Batch, obj: &ObjectiveConfig) -> Result<LossBreakdown> {
        let (losses, grads) = joint_step_losses(&self.model, batch, &self.weights, obj, &mut self.rng)?;
        if !losses.total.is_finite() {
            return Err(Error::non_finite(format!("total loss at step {}", self.step)));
        }
        let mut flat = grads.to_flat();
        clip_grad_norm(&mut flat, self.grad_clip);
        let mut params = self.model.params_flat();
        self.adam.update(&mut params, &flat)?;
        self.model.set_params_flat(&params)?;
        self.step += 1;
        Ok(losses)
    }
}

/// Validation numbers after one epoch; epoch 0 is the initial model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_l_y: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub calibration: Calibration,
    pub recalibration: Option<Calibration>,
    pub history: Vec<EpochRecord>,
}

fn check_dims(file: &FramesFile, spec: &DimSpec, path: &Path) -> Result<()> {
    let h = &file.header;
    if h.d_x != spec.d_x || h.d_y != spec.d_y {
        return Err(Error::Dimension(format!(
            "{}: frames have d_x={} d_y={}, model expects d_x={} d_y={}",
            path.display(),
            h.d_x,
            h.d_y,
            spec.d_x,
            spec.d_y
        )));
    }
    if h.n_frames < 2 {
        return Err(Error::InvalidArgument(format!(
            "{}: need at least 2 frames",
            path.display()
        )));
    }
    Ok(())
}

/// Label MSE and mean framewise F1 of the model on a frames file.
pub fn validation_metrics(model: &InnModel, file: &FramesFile, threshold: f64) -> Result<(f64, f64)> {
    let pred = predict_labels(model, &file.x)?;
    let prf = framewise_prf(&pred, &file.y, &file.piece_ranges(), threshold)?;
    Ok((mse(&pred, &file.y), prf.mean.f1))
}

/// Batches in a fixed order, taking row indices from `order`. A trailing
/// batch of one row is dropped since the distribution terms need two.
fn batches<'a>(file: &'a FramesFile, order: &'a [usize], size: usize) -> impl Iterator<Item = Batch> + 'a {
    order.chunks(size).filter(|c| c.len() >= 2).map(|idx| Batch {
        x: file.x.select_rows(idx),
        y: file.y.select_rows(idx),
    })
}

struct Logs {
    loss: BufWriter<fs::File>,
    breakdown: BufWriter<fs::File>,
    validation: BufWriter<fs::File>,
}

impl Logs {
    fn create(dir: &Path) -> Result<Self> {
        let mut loss = BufWriter::new(fs::File::create(dir.join(LOSS_LOG))?);
        writeln!(loss, "step,{},total", TERM_NAMES.join(","))?;
        let mut breakdown = BufWriter::new(fs::File::create(dir.join(BREAKDOWN_LOG))?);
        writeln!(breakdown, "{}", LossBreakdown::csv_header())?;
        let mut validation = BufWriter::new(fs::File::create(dir.join(VALIDATION_LOG))?);
        writeln!(validation, "epoch,val_L_y,val_F1")?;
        Ok(Self {
            loss,
            breakdown,
            validation,
        })
    }

    fn step(&mut self, step: u64, b: &LossBreakdown) -> Result<()> {
        write!(self.loss, "{step}")?;
        for v in b.raw {
            write!(self.loss, ",{v:e}")?;
        }
        writeln!(self.loss, ",{:e}", b.total)?;
        writeln!(self.breakdown, "{}", b.csv_row(step))?;
        Ok(())
    }

    fn epoch(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.validation, "{},{:e},{:e}", r.epoch, r.val_l_y, r.val_f1)?;
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        self.loss.flush()?;
        self.breakdown.flush()?;
        self.validation.flush()?;
        Ok(())
    }
}

/// The untrained model `train` starts from.
pub fn initial_model(cfg: &TrainConfig, spec: DimSpec) -> Result<InnModel> {
    let root = RngState::new(cfg.seed);
    InnModel::new(spec, cfg.layers, cfg.hidden, cfg.clamp, &mut root.fork(INIT_STREAM))
}

/// Loss weights `train` uses: medians over `calibration_batches` shuffled
/// training batches.
pub fn initial_calibration(cfg: &TrainConfig, model: &InnModel, train_set: &FramesFile) -> Result<Calibration> {
    calibrate_on(cfg, model, train_set, CALIBRATION_STREAM)
}

fn calibrate_on(cfg: &TrainConfig, model: &InnModel, train_set: &FramesFile, stream: u64) -> Result<Calibration> {
    let mut rng = RngState::new(cfg.seed).fork(stream);
    let mut order: Vec<usize> = (0..train_set.n_frames()).collect();
    shuffle(&mut rng, &mut order);
    let probe: Vec<Batch> = batches(train_set, &order, cfg.batch_size)
        .take(cfg.calibration_batches)
        .collect();
    calibrate_weights(model, &probe, &cfg.objective(), &mut rng)
}

/// Trains from frames files and writes checkpoints and logs to `out_dir`.
///
/// The model is initialized from `fork(1)` of the seed, batches and step
/// noise come from `fork(2)` and weight calibration from `fork(3)`.
pub fn train(
    cfg: &TrainConfig,
    spec: DimSpec,
    train_path: &Path,
    valid_path: &Path,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    spec.validate()?;
    let train_set = read_frames(train_path)?;
    check_dims(&train_set, &spec, train_path)?;
    let valid_set = read_frames(valid_path)?;
    check_dims(&valid_set, &spec, valid_path)?;
    train_on(cfg, spec, &train_set, &valid_set, out_dir)
}

pub fn train_on(
    cfg: &TrainConfig,
    spec: DimSpec,
    train_set: &FramesFile,
    valid_set: &FramesFile,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_dims(train_set, &spec, Path::new("training frames"))?;
    check_dims(valid_set, &spec, Path::new("validation frames"))?;
    fs::create_dir_all(out_dir)?;
    let obj = cfg.objective();
    let root = RngState::new(cfg.seed);

    let model = initial_model(cfg, spec)?;
    let calibration = initial_calibration(cfg, &model, train_set)?;
    log_calibration(&calibration);
    let mut recalibration = None;

    let n_params = model.param_count();
    let mut state = TrainState {
        model,
        adam: Adam::from_config(n_params, cfg),
        weights: calibration.weights,
        rng: root.fork(TRAIN_STREAM),
        step: 0,
        grad_clip: cfg.grad_clip,
    };
    let mut logs = Logs::create(out_dir)?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let final_path = out_dir.join(FINAL_CHECKPOINT);

    let (l_y, f1) = validation_metrics(&state.model, valid_set, cfg.activity_threshold)?;
    let first = EpochRecord {
        epoch: 0,
        val_l_y: l_y,
        val_f1: f1,
    };
    logs.epoch(&first)?;
    let mut history = vec![first];
    let (mut best_epoch, mut best_l_y) = (0, l_y);
    state.checkpoint(cfg).save(&best_path)?;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.n_frames()).collect();
        shuffle(&mut state.rng, &mut order);
        for batch in batches(train_set, &order, cfg.batch_size) {
            let losses = match state.step(&batch, &obj) {
                Ok(l) => l,
                Err(e) => {
                    logs.flush()?;
                    warn!("aborting at step {}: {e}", state.step);
                    return Err(e);
                }
            };
            logs.step(state.step, &losses)?;
        }
        let (l_y, f1) = validation_metrics(&state.model, valid_set, cfg.activity_threshold)?;
        let rec = EpochRecord {
            epoch,
            val_l_y: l_y,
            val_f1: f1,
        };
        logs.epoch(&rec)?;
        history.push(rec);
        info!("epoch {epoch}: val L_y {l_y:.5} F1 {f1:.4} step {}", state.step);
        if epoch == cfg.recalibrate_after {
            let cal = calibrate_on(cfg, &state.model, train_set, RECALIBRATION_STREAM)?;
            log_calibration(&cal);
            state.weights = cal.weights;
            recalibration = Some(cal);
        }
        let ck = state.checkpoint(cfg);
        if l_y < best_l_y {
            best_l_y = l_y;
            best_epoch = epoch;
            ck.save(&best_path)?;
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            ck.save(&out_dir.join(format!("epoch_{epoch:03}.innckpt")))?;
        }
    }
    logs.flush()?;
    state.checkpoint(cfg).save(&final_path)?;
    Ok(TrainReport {
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        best_epoch,
        calibration,
        recalibration,
        history,
    })
}

fn log_calibration(cal: &Calibration) {
    if !cal.flagged.is_empty() {
        warn!("zero calibration median for {:?}; weight left at 1", cal.flagged);
    }
    info!("loss weights {:?}", cal.weights.as_array());
}

/// Miniature problem for checking analytic gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub spec: DimSpec,
    pub layers: usize,
    pub hidden: usize,
    pub batch: usize,
    pub projections: usize,
    /// Scale of the parameter noise added after initialization, so no
    /// subnet sits at its all-zero starting point.
    pub perturb: f64,
    pub pad_noise: f64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            spec: DimSpec {
                d_x: 4,
                d_y: 3,
                d_z: 2,
                d_total: 8,
            },
            layers: 2,
            hidden: 4,
            batch: 4,
            projections: 8,
            perturb: 0.4,
            pad_noise: 0.1,
            step: 1e-6,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub n_params: usize,
    /// `max |analytic - numeric| / max |numeric|`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_with(cfg, |_| {})
}

/// Like [`grad_check`], with `tamper` applied to the analytic gradient
/// before comparison.
pub fn grad_check_with(cfg: &GradCheckConfig, tamper: impl FnOnce(&mut [f64])) -> Result<GradCheckReport> {
    let mut rng = RngState::new(cfg.seed);
    let mut model = InnModel::new(cfg.spec, cfg.layers, cfg.hidden, 2.0, &mut rng)?;
    model.perturb(&mut rng, cfg.perturb);
    let batch = Batch::new(
        gaussian(&mut rng, cfg.batch, cfg.spec.d_x, 1.0)?,
        gaussian(&mut rng, cfg.batch, cfg.spec.d_y, 1.0)?,
    )?;
    let obj = ObjectiveConfig {
        pad_noise: cfg.pad_noise,
        projections: cfg.projections,
        detach_yhat: true,
    };
    let noise = StepNoise::draw(&model, cfg.batch, &obj, &mut rng)?;
    let weights = LossWeights::from_array([1.0, 0.7, 1.3, 0.9, 2.0, 1.5]);

    let (_, grads) = losses_and_grads(&model, &batch, &noise, &weights, true)?;
    let mut analytic = grads.to_flat();
    tamper(&mut analytic);

    // the label block inside the latent-matching term is a constant for
    // the gradient, so the reference freezes it at the base point
    let input = Mat::hcat(&[&batch.x, &noise.x_pad])?;
    let frozen = model.split_output(&model.forward_full(&input)?.0).y;
    let base = model.params_flat();
    let mut probe = model.clone();
    let mut failure = None;
    let numeric = finite_diff_grad(
        |p| {
            if let Err(e) = probe.set_params_flat(p) {
                failure.get_or_insert(e);
                return f64::NAN;
            }
            match evaluate(&probe, &batch, &noise, &weights, Some(&frozen)) {
                Ok(b) => b.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &base,
        cfg.step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let numeric = numeric?;

    let scale = numeric.iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
    let (mut worst_index, mut worst) = (0, 0.0);
    for (i, (a, f)) in analytic.iter().zip(&numeric).enumerate() {
        let d = (a - f).abs();
        if !(d <= worst) {
            worst = d;
            worst_index = i;
        }
    }
    let max_rel_error = worst / scale;
    Ok(GradCheckReport {
        seed: cfg.seed,
        n_params: base.len(),
        max_rel_error,
        worst_index,
        tolerance: cfg.tolerance,
        passed: max_rel_error < cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_split, CorpusSpec, Split};

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut adam = Adam::new(3, 1e-3, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.update(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step(), 1);
    }

    #[test]
    fn quadratic_converges() {
        let mut adam = Adam::new(1, 0.05, 0.9, 0.999, 1e-8);
        let mut p = [0.0];
        let mut hit = None;
        for i in 1..=2000 {
            let g = 2.0 * (p[0] - 3.0);
            adam.update(&mut p, &[g]).unwrap();
            if (p[0] - 3.0).abs() < 1e-3 && hit.is_none() {
                hit = Some(i);
            }
        }
        assert!(hit.is_some());
        assert!((p[0] - 3.0).abs() < 1e-3, "p = {}", p[0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(2, 0.01, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0, 0.0];
        adam.update(&mut p, &[5.0, -0.1]).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut adam = Adam::new(2, 0.01, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0, 0.0];
        let err = adam.update(&mut p, &[0.0, f64::NAN]).unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(adam.step(), 0);
    }

    #[test]
    fn resumed_moments_continue_identically() {
        let mut a = Adam::new(2, 0.01, 0.9, 0.999, 1e-8);
        let mut p = vec![0.3, 0.4];
        for k in 0..5 {
            a.update(&mut p, &[k as f64, 1.0]).unwrap();
        }
        let mut b = Adam::new(2, 0.01, 0.9, 0.999, 1e-8)
            .with_moments(a.moments().clone())
            .unwrap();
        let mut q = p.clone();
        a.update(&mut p, &[0.7, -0.2]).unwrap();
        b.update(&mut q, &[0.7, -0.2]).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn clipping_rescales_only_large_gradients() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        clip_grad_norm(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = vec![3.0, 4.0];
        clip_grad_norm(&mut g, 0.0);
        assert_eq!(g, vec![3.0, 4.0]);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_config_key_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(ok.epochs, 3);
        assert_eq!(ok.batch_size, 64);
    }

    #[test]
    fn grad_check_passes_on_three_seeds() {
        for seed in [1, 2, 3] {
            let r = grad_check(&GradCheckConfig {
                seed,
                ..GradCheckConfig::default()
            })
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn grad_check_catches_corruption() {
        let r = grad_check_with(&GradCheckConfig::default(), |g| {
            let i = g.len() / 2;
            g[i] += 1e-2 * (1.0 + g[i].abs());
        })
        .unwrap();
        assert!(!r.passed, "{r:?}");
    }

    fn tiny_spec() -> (CorpusSpec, DimSpec, TrainConfig) {
        let corpus = CorpusSpec {
            train_pieces: 3,
            valid_pieces: 1,
            test_pieces: 1,
            piece_seconds: 4.0,
            ..CorpusSpec::default()
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            layers: 2,
            hidden: 16,
            swd_projections: 16,
            calibration_batches: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        (corpus, DimSpec::default(), cfg)
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint() {
        let (corpus, spec, mut cfg) = tiny_spec();
        cfg.epochs = 0;
        let tr = generate_split(&corpus, Split::Train, 1).unwrap();
        let va = generate_split(&corpus, Split::Valid, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rep = train_on(&cfg, spec, &tr, &va, dir.path()).unwrap();
        let ck = Checkpoint::load(&rep.final_checkpoint).unwrap();
        assert_eq!(ck.step, 0);
        let init = InnModel::new(
            spec,
            cfg.layers,
            cfg.hidden,
            cfg.clamp,
            &mut RngState::new(cfg.seed).fork(1),
        )
        .unwrap();
        assert_eq!(ck.model, init);
        let log = fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
        assert_eq!(log, "step,L_y,L_xhat,L_yz,L_xsam,L_xpad,L_yzpad,total\n");
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let (corpus, spec, cfg) = tiny_spec();
        let tr = generate_split(&corpus, Split::Train, 2).unwrap();
        let va = generate_split(&corpus, Split::Valid, 2).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = train_on(&cfg, spec, &tr, &va, a.path()).unwrap();
        train_on(&cfg, spec, &tr, &va, b.path()).unwrap();
        for name in [
            FINAL_CHECKPOINT,
            BEST_CHECKPOINT,
            LOSS_LOG,
            BREAKDOWN_LOG,
            VALIDATION_LOG,
        ] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
        let steps_per_epoch = tr.n_frames().div_ceil(cfg.batch_size) as u64;
        let ck = Checkpoint::load(&ra.final_checkpoint).unwrap();
        assert_eq!(ck.step, 2 * steps_per_epoch);
        assert_eq!(ck.optimizer.unwrap().step, ck.step);
        let log = fs::read_to_string(a.path().join(BREAKDOWN_LOG)).unwrap();
        assert_eq!(log.lines().count() as u64, 1 + ck.step);
        assert_eq!(ra.history.len(), 3);
    }

    #[test]
    fn wrong_feature_width_rejected() {
        let (corpus, _, cfg) = tiny_spec();
        let tr = generate_split(&corpus, Split::Train, 2).unwrap();
        let spec = DimSpec::new(100, 185, 9, 256).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            train_on(&cfg, spec, &tr, &tr, dir.path()),
            Err(Error::Dimension(_))
        ));
    }
}
