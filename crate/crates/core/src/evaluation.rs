//! Framewise metrics, denoising, round-trip diagnostics and the
//! single-note concept probe.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::datagen::{phase_col, FramesFile, N_INSTRUMENTS, N_KEYS};
use crate::error::{Error, Result};
use crate::model::{InnModel, OutputParts};
use crate::numerics::{gaussian, quantile_sorted, Mat, RngState};

pub const DEFAULT_ACTIVITY_THRESHOLD: f64 = 0.5;
pub const PROBE_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];
pub const DEFAULT_PROBE_SAMPLES: usize = 30;
pub const ROUNDTRIP_TOLERANCE: f64 = 1e-9;

/// Rows per network call when running over whole files.
const CHUNK: usize = 1024;

fn stack(parts: Vec<Mat>, cols: usize) -> Result<Mat> {
    if parts.is_empty() {
        return Ok(Mat::zeros(0, cols));
    }
    Mat::vcat(&parts.iter().collect::<Vec<_>>())
}

/// Forward pass with zero padding over every row of `x`, in chunks.
pub fn encode(model: &InnModel, x: &Mat) -> Result<OutputParts> {
    let spec = model.spec();
    let (mut z, mut pad, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for start in (0..x.rows()).step_by(CHUNK) {
        let out = model.predict(&x.row_range(start..(start + CHUNK).min(x.rows())))?;
        z.push(out.z);
        pad.push(out.yz_pad);
        y.push(out.y);
    }
    Ok(OutputParts {
        z: stack(z, spec.d_z)?,
        yz_pad: stack(pad, spec.d_yzpad())?,
        y: stack(y, spec.d_y)?,
    })
}

/// Forward predictions `Y^` for every row of `x`, with zero padding.
pub fn predict_labels(model: &InnModel, x: &Mat) -> Result<Mat> {
    Ok(encode(model, x)?.y)
}

/// Inverse pass on `[z | 0 | y]`, in chunks; returns the feature part.
pub fn resynthesize(model: &InnModel, z: &Mat, y: &Mat) -> Result<Mat> {
    if z.rows() != y.rows() {
        return Err(Error::shape("resynthesize rows", y.rows(), z.rows()));
    }
    let mut parts = Vec::new();
    for start in (0..y.rows()).step_by(CHUNK) {
        let r = start..(start + CHUNK).min(y.rows());
        let pad = Mat::zeros(r.len(), model.spec().d_yzpad());
        parts.push(model.inverse(&z.row_range(r.clone()), &pad, &y.row_range(r))?.x);
    }
    stack(parts, model.spec().d_x)
}

/// One generated frame per label row, with fresh `z ~ N(0, I)`.
pub fn sample_frames(model: &InnModel, y: &Mat, rng: &mut RngState) -> Result<Mat> {
    let z = gaussian(rng, y.rows(), model.spec().d_z, 1.0)?;
    resynthesize(model, &z, y)
}

/// Zeroes phase and velocity entries with magnitude below `threshold`.
/// The instrument block is left alone.
pub fn denoise(y: &Mat, threshold: f64) -> Result<Mat> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be >= 0, got {threshold}"
        )));
    }
    if y.cols() < N_INSTRUMENTS {
        return Err(Error::Dimension(format!("label matrix has only {} columns", y.cols())));
    }
    let mut out = y.clone();
    for r in 0..out.rows() {
        for v in &mut out.row_mut(r)[N_INSTRUMENTS..] {
            if v.abs() < threshold {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// From cell counts. A piece silent in both prediction and truth is a
    /// perfect score.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        if tp + fp + fn_ == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrfReport {
    pub per_piece: Vec<Prf>,
    /// Unweighted mean over pieces of each measure.
    pub mean: Prf,
}

/// Piano-roll P/R/F1 per piece, averaged over pieces. A key is active when
/// its phase entry exceeds `threshold`.
pub fn framewise_prf(pred: &Mat, truth: &Mat, pieces: &[Range<usize>], threshold: f64) -> Result<PrfReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "framewise_prf",
            format!("{:?}", truth.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    if pred.cols() < N_INSTRUMENTS + N_KEYS {
        return Err(Error::Dimension(format!(
            "label matrix has only {} columns",
            pred.cols()
        )));
    }
    if pieces.is_empty() {
        return Err(Error::InvalidArgument("framewise_prf needs at least one piece".into()));
    }
    let mut per_piece = Vec::with_capacity(pieces.len());
    for range in pieces {
        if range.end > pred.rows() || range.start > range.end {
            return Err(Error::InvalidArgument(format!(
                "piece {range:?} outside {} frames",
                pred.rows()
            )));
        }
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for r in range.clone() {
            for key in 0..N_KEYS {
                let p = pred.get(r, phase_col(key)) > threshold;
                let t = truth.get(r, phase_col(key)) > threshold;
                match (p, t) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
        }
        per_piece.push(Prf::from_counts(tp, fp, fn_));
    }
    let n = per_piece.len() as f64;
    let mean = Prf {
        precision: per_piece.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: per_piece.iter().map(|p| p.recall).sum::<f64>() / n,
        f1: per_piece.iter().map(|p| p.f1).sum::<f64>() / n,
    };
    Ok(PrfReport { per_piece, mean })
}

pub fn write_prf_csv(path: &Path, report: &PrfReport) -> Result<()> {
    let mut s = String::from("piece,precision,recall,f1\n");
    for (i, p) in report.per_piece.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{}", p.precision, p.recall, p.f1);
    }
    let m = &report.mean;
    let _ = writeln!(s, "mean,{},{},{}", m.precision, m.recall, m.f1);
    fs::write(path, s)?;
    Ok(())
}

/// Anything that can draw feature frames for given labels.
pub trait Sampler {
    fn sample_frames(&self, y: &Mat, rng: &mut RngState) -> Result<Mat>;
}

impl Sampler for InnModel {
    fn sample_frames(&self, y: &Mat, rng: &mut RngState) -> Result<Mat> {
        self.sample(y, rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub key: usize,
    /// Reference rows the probe compared against.
    pub frames: Vec<usize>,
    /// `distances[t][s]`: distance of sample `s` at frame `t`.
    pub distances: Vec<Vec<f64>>,
    /// Per frame, the [`PROBE_QUANTILES`] of the distances over samples.
    pub quantiles: Vec<[f64; 5]>,
    /// The same quantiles over every (frame, sample) pair.
    pub pooled: [f64; 5],
}

impl ProbeReport {
    pub fn median(&self) -> f64 {
        self.pooled[2]
    }
}

/// Reference rows in which `key` sounds alone.
pub fn isolated_frames(reference: &FramesFile, key: usize) -> Vec<usize> {
    (0..reference.n_frames())
        .filter(|&r| {
            let row = reference.y.row(r);
            row[phase_col(key)] > 0.0 && (0..N_KEYS).all(|k| k == key || row[phase_col(k)] == 0.0)
        })
        .collect()
}

/// Draws `n_samples` frames per reference frame of an isolated `key` using
/// the reference labels, and measures the Euclidean distance of each to
/// the reference features.
pub fn concept_probe(
    sampler: &impl Sampler,
    key: usize,
    reference: &FramesFile,
    n_samples: usize,
    rng: &mut RngState,
) -> Result<ProbeReport> {
    if key >= N_KEYS {
        return Err(Error::InvalidLabel(format!("key {key} out of range 0..88")));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let frames = isolated_frames(reference, key);
    if frames.is_empty() {
        return Err(Error::KeyAbsent { key });
    }
    let y = reference.y.select_rows(&frames);
    let x_ref = reference.x.select_rows(&frames);
    let mut distances = vec![Vec::with_capacity(n_samples); frames.len()];
    for _ in 0..n_samples {
        let x = sampler.sample_frames(&y, rng)?;
        if x.shape() != x_ref.shape() {
            return Err(Error::shape(
                "probe sample",
                format!("{:?}", x_ref.shape()),
                format!("{:?}", x.shape()),
            ));
        }
        for (t, d) in distances.iter_mut().enumerate() {
            let dist = x
                .row(t)
                .iter()
                .zip(x_ref.row(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d.push(dist);
        }
    }
    let quantiles = distances.iter().map(|d| quantiles_of(d)).collect();
    let pooled = quantiles_of(&distances.concat());
    if !pooled.iter().all(|v| v.is_finite()) {
        return Err(Error::non_finite("probe distances"));
    }
    Ok(ProbeReport {
        key,
        frames,
        distances,
        quantiles,
        pooled,
    })
}

fn quantiles_of(values: &[f64]) -> [f64; 5] {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    PROBE_QUANTILES.map(|p| quantile_sorted(&sorted, p))
}

pub fn write_probe_csv(path: &Path, report: &ProbeReport) -> Result<()> {
    let mut s = String::from("frame,q05,q25,q50,q75,q95\n");
    for (t, q) in report.quantiles.iter().enumerate() {
        let _ = writeln!(s, "{t},{},{},{},{},{}", q[0], q[1], q[2], q[3], q[4]);
    }
    let q = &report.pooled;
    let _ = writeln!(s, "pooled,{},{},{},{},{}", q[0], q[1], q[2], q[3], q[4]);
    fs::write(path, s)?;
    Ok(())
}

/// Sample-count histogram, `bins` distance rows (largest on top) by one
/// column per frame.
pub fn probe_heatmap(report: &ProbeReport, bins: usize) -> Result<Mat> {
    let bins = bins.max(1);
    let top = report.distances.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let mut img = Mat::zeros(bins, report.distances.len());
    for (t, d) in report.distances.iter().enumerate() {
        for &v in d {
            let b = if top > 0.0 {
                ((v / top) * bins as f64) as usize
            } else {
                0
            };
            let row = bins - 1 - b.min(bins - 1);
            img.set(row, t, img.get(row, t) + 1.0)?;
        }
    }
    Ok(img)
}

/// Binary greyscale image, values scaled linearly from the matrix range to
/// 0..=255.
pub fn write_pgm(path: &Path, img: &Mat) -> Result<()> {
    let (lo, hi) = img
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", img.cols(), img.rows()).into_bytes();
    out.extend(
        img.as_slice()
            .iter()
            .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundtripReport {
    /// `max |x - x^|` over features and padding.
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub flagged: bool,
}

/// Forward then inverse on every row, predictions left intact.
pub fn roundtrip_report(model: &InnModel, x: &Mat) -> Result<RoundtripReport> {
    let mut worst = 0.0f64;
    for start in (0..x.rows()).step_by(CHUNK) {
        let rows = x.row_range(start..(start + CHUNK).min(x.rows()));
        let pad = model.pad_for_inference(rows.rows());
        let out = model.forward(&rows, &pad)?;
        let back = model.inverse(&out.z, &out.yz_pad, &out.y)?;
        worst = worst.max(back.x.max_abs_diff(&rows)).max(back.x_pad.max_abs_diff(&pad));
    }
    Ok(RoundtripReport {
        max_abs_diff: worst,
        tolerance: ROUNDTRIP_TOLERANCE,
        flagged: !(worst < ROUNDTRIP_TOLERANCE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::CouplingLayer;
    use crate::datagen::{derive_labels, probe_reference, CorpusSpec, NoteEvent, D_LABEL};
    use crate::model::DimSpec;
    use crate::numerics::Permutation;
    use proptest::prelude::*;

    fn roll(active: &[(usize, usize)], rows: usize) -> Mat {
        let mut m = Mat::zeros(rows, D_LABEL);
        for &(r, k) in active {
            m.set(r, phase_col(k), 5.0).unwrap();
        }
        m
    }

    #[test]
    fn zero_threshold_is_identity() {
        let y = gaussian(&mut RngState::new(1), 4, D_LABEL, 1.0).unwrap();
        assert_eq!(denoise(&y, 0.0).unwrap(), y);
    }

    #[test]
    fn large_threshold_clears_notes() {
        let y = gaussian(&mut RngState::new(2), 4, D_LABEL, 1.0).unwrap();
        let d = denoise(&y, 1e9).unwrap();
        for r in 0..4 {
            assert_eq!(&d.row(r)[..N_INSTRUMENTS], &y.row(r)[..N_INSTRUMENTS]);
            assert!(d.row(r)[N_INSTRUMENTS..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn perfect_prediction() {
        let y = roll(&[(0, 3), (1, 4), (1, 60)], 3);
        let r = framewise_prf(&y, &y, &[0..3], 0.5).unwrap();
        assert_eq!(r.mean, Prf::from_counts(3, 0, 0));
        assert_eq!(r.mean.f1, 1.0);
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let y = roll(&[(0, 3)], 2);
        let r = framewise_prf(&Mat::zeros(2, D_LABEL), &y, &[0..2], 0.5).unwrap();
        assert_eq!(r.mean.recall, 0.0);
        assert_eq!(r.mean.f1, 0.0);
    }

    #[test]
    fn one_hit_one_miss_one_false_alarm() {
        let truth = roll(&[(0, 0), (1, 1)], 2);
        let pred = roll(&[(0, 0), (0, 1)], 2);
        let r = framewise_prf(&pred, &truth, &[0..2], 0.5).unwrap();
        assert_eq!(r.mean.precision, 0.5);
        assert_eq!(r.mean.recall, 0.5);
        assert_eq!(r.mean.f1, 0.5);
    }

    #[test]
    fn pieces_are_averaged() {
        let truth = roll(&[(0, 0), (1, 1)], 2);
        let pred = roll(&[(0, 0)], 2);
        let r = framewise_prf(&pred, &truth, &[0..1, 1..2], 0.5).unwrap();
        assert_eq!(r.per_piece[0].f1, 1.0);
        assert_eq!(r.per_piece[1].f1, 0.0);
        assert_eq!(r.mean.f1, 0.5);
    }

    #[test]
    fn swapping_roles_swaps_precision_and_recall() {
        let a = roll(&[(0, 0), (0, 1), (1, 2)], 2);
        let b = roll(&[(0, 0), (1, 3)], 2);
        let ab = framewise_prf(&a, &b, &[0..2], 0.5).unwrap().mean;
        let ba = framewise_prf(&b, &a, &[0..2], 0.5).unwrap().mean;
        assert_eq!(ab.precision, ba.recall);
        assert_eq!(ab.recall, ba.precision);
    }

    struct Oracle<'a>(&'a FramesFile);

    impl Sampler for Oracle<'_> {
        fn sample_frames(&self, y: &Mat, _: &mut RngState) -> Result<Mat> {
            let rows: Vec<usize> = (0..y.rows())
                .map(|i| (0..self.0.n_frames()).find(|&r| self.0.y.row(r) == y.row(i)).unwrap())
                .collect();
            Ok(self.0.x.select_rows(&rows))
        }
    }

    #[test]
    fn oracle_sampler_has_zero_distance() {
        let reference = probe_reference(&CorpusSpec::default(), 1).unwrap();
        let r = concept_probe(&Oracle(&reference), 40, &reference, 5, &mut RngState::new(0)).unwrap();
        assert!(r.quantiles.iter().all(|q| q.iter().all(|&v| v == 0.0)));
        assert_eq!(r.frames.len(), 25);
    }

    #[test]
    fn missing_key_is_an_error() {
        let notes = [NoteEvent {
            key: 10,
            onset: 0.0,
            offset: 0.5,
            velocity: 90,
        }];
        let y = derive_labels(&notes, 0, 25.0, 20).unwrap();
        let x = Mat::zeros(20, 144);
        let f = FramesFile::from_pieces(vec![(0, x, y)], 25.0, 0).unwrap();
        let model = InnModel::new(DimSpec::default(), 1, 4, 2.0, &mut RngState::new(0)).unwrap();
        let err = concept_probe(&model, 11, &f, 3, &mut RngState::new(0)).unwrap_err();
        assert!(matches!(err, Error::KeyAbsent { key: 11 }));
    }

    #[test]
    fn probe_is_monotone_and_deterministic() {
        let reference = probe_reference(&CorpusSpec::default(), 1).unwrap();
        let mut model = InnModel::new(DimSpec::default(), 2, 8, 2.0, &mut RngState::new(5)).unwrap();
        model.perturb(&mut RngState::new(6), 0.02);
        let a = concept_probe(&model, 30, &reference, 7, &mut RngState::new(3)).unwrap();
        let b = concept_probe(&model, 30, &reference, 7, &mut RngState::new(3)).unwrap();
        assert_eq!(a, b);
        for q in a.quantiles.iter().chain([&a.pooled]) {
            assert!(q.windows(2).all(|w| w[0] <= w[1]));
        }
        let img = probe_heatmap(&a, 16).unwrap();
        assert_eq!(img.shape(), (16, a.frames.len()));
        assert_eq!(img.as_slice().iter().sum::<f64>(), (7 * a.frames.len()) as f64);
    }

    #[test]
    fn roundtrip_is_tight_and_broken_permutation_is_flagged() {
        let spec = DimSpec::default();
        let mut rng = RngState::new(8);
        let mut model = InnModel::new(spec, 2, 8, 2.0, &mut rng).unwrap();
        model.perturb(&mut rng, 0.05);
        let x = gaussian(&mut rng, 50, spec.d_x, 1.0).unwrap();
        assert!(!roundtrip_report(&model, &x).unwrap().flagged);

        let mut layers = model.layers().to_vec();
        let mut idx = layers[0].permutation().indices().to_vec();
        idx[1] = idx[0];
        let [s1, t1, s2, t2] = layers[0].subnets().map(|s| s.clone());
        layers[0] = CouplingLayer::from_parts(Permutation::from_indices_unchecked(idx), [s1, t1, s2, t2], 2.0).unwrap();
        let broken = InnModel::from_layers(spec, layers).unwrap();
        let r = roundtrip_report(&broken, &x).unwrap();
        assert!(r.flagged);
        assert!(r.max_abs_diff > 1e-3);
    }

    #[test]
    fn chunked_passes_match_whole_batch() {
        let spec = DimSpec::default();
        let mut rng = RngState::new(12);
        let mut model = InnModel::new(spec, 2, 8, 2.0, &mut rng).unwrap();
        model.perturb(&mut rng, 0.05);
        let x = gaussian(&mut rng, CHUNK + 7, spec.d_x, 1.0).unwrap();
        let whole = model.predict(&x).unwrap();
        let parts = encode(&model, &x).unwrap();
        assert_eq!(parts, whole);
        let back = resynthesize(&model, &parts.z, &parts.y).unwrap();
        let pad = Mat::zeros(x.rows(), spec.d_yzpad());
        assert_eq!(back, model.inverse(&parts.z, &pad, &parts.y).unwrap().x);
        let a = sample_frames(&model, &parts.y, &mut RngState::new(1)).unwrap();
        let b = model.sample(&parts.y, &mut RngState::new(1)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = Mat::from_fn(3, 4, |r, c| (r * 4 + c) as f64).unwrap();
        write_pgm(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(bytes.len(), 11 + 12);
        assert_eq!(*bytes.last().unwrap(), 255);
        assert_eq!(bytes[11], 0);
    }

    proptest! {
        #[test]
        fn denoise_is_idempotent(seed in 0u64..500, theta in 0.0f64..2.0) {
            let y = gaussian(&mut RngState::new(seed), 3, D_LABEL, 1.0).unwrap();
            let once = denoise(&y, theta).unwrap();
            prop_assert_eq!(denoise(&once, theta).unwrap(), once);
        }

        #[test]
        fn piece_order_does_not_matter(seed in 0u64..200) {
            let mut rng = RngState::new(seed);
            let a = gaussian(&mut rng, 6, D_LABEL, 3.0).unwrap();
            let b = gaussian(&mut rng, 6, D_LABEL, 3.0).unwrap();
            let fwd = framewise_prf(&a, &b, &[0..2, 2..3, 3..6], 0.5).unwrap();
            let rev = framewise_prf(&a, &b, &[3..6, 0..2, 2..3], 0.5).unwrap();
            prop_assert!((fwd.mean.f1 - rev.mean.f1).abs() < 1e-15);
        }
    }
}
