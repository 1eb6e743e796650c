//! Labels from note events, a toy harmonic synthesizer, and the FRM1
//! frames file.
//!
//! Label layout per frame: `[instrument one-hot | phase per key | velocity
//! per key]`, 9 + 88 + 88 = 185 columns.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat, RngState};

pub const N_INSTRUMENTS: usize = 9;
pub const N_KEYS: usize = 88;
pub const D_LABEL: usize = N_INSTRUMENTS + 2 * N_KEYS;
pub const D_FEATURES: usize = 144;
pub const DEFAULT_FPS: f64 = 25.0;

pub const PHASE_PEAK: f64 = 5.0;
pub const PHASE_DECAY: f64 = 0.99;

const FRAMES_MAGIC: &[u8; 4] = b"FRM1";
const NOISE_FLOOR: f64 = 0.01;
const BINS_PER_SEMITONE: f64 = 1.25;
const PARTIALS: usize = 4;
const SPREAD: [f64; 3] = [0.25, 0.5, 0.25];

/// Per-instrument gain of each partial. The fundamental is never altered so
/// every instrument keeps the same pitch peak.
const PARTIAL_MODULATION: [[f64; PARTIALS]; N_INSTRUMENTS] = [
    [1.0, 1.0, 1.0, 1.0],
    [1.0, 1.5, 0.6, 1.2],
    [1.0, 0.5, 1.4, 0.7],
    [1.0, 1.3, 1.3, 0.4],
    [1.0, 0.8, 0.5, 1.6],
    [1.0, 1.6, 1.0, 0.5],
    [1.0, 0.4, 0.8, 1.5],
    [1.0, 1.2, 1.6, 1.1],
    [1.0, 0.7, 0.4, 0.9],
];

pub fn phase_col(key: usize) -> usize {
    N_INSTRUMENTS + key
}

pub fn velocity_col(key: usize) -> usize {
    N_INSTRUMENTS + N_KEYS + key
}

/// Note-phase curve value `tau` frames after onset.
/// Repeated multiplication rather than `powi`, whose rounding may differ
/// between constant-folded and runtime evaluation.
pub fn phase_curve(tau: usize) -> f64 {
    (0..tau).fold(PHASE_PEAK, |v, _| v * PHASE_DECAY)
}

/// Frame index holding time `t`. The epsilon keeps times that are exact
/// frame multiples in decimal from landing one frame early.
pub fn frame_index(t: f64, fps: f64) -> usize {
    (t * fps + 1e-9).floor().max(0.0) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    /// Piano key, 0 is MIDI note 21.
    pub key: u8,
    pub onset: f64,
    pub offset: f64,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn validate(&self) -> Result<()> {
        if self.key as usize >= N_KEYS {
            return Err(Error::InvalidLabel(format!("key {} out of range 0..88", self.key)));
        }
        if self.velocity > 127 {
            return Err(Error::InvalidLabel(format!(
                "velocity {} out of range 0..=127",
                self.velocity
            )));
        }
        if !(self.onset.is_finite() && self.offset.is_finite()) || self.offset <= self.onset || self.onset < 0.0 {
            return Err(Error::InvalidLabel(format!(
                "note on {} off {} is not a positive interval",
                self.onset, self.offset
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PedalEvent {
    pub time: f64,
    pub value: u8,
}

pub fn pedal_engaged(value: u8) -> bool {
    value > 64
}

/// `[start, release)` intervals with the sustain pedal held. A pedal still
/// down at the end of the events releases at `track_end`.
pub fn sustain_intervals(pedals: &[PedalEvent], track_end: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut down: Option<f64> = None;
    for p in pedals {
        match (down, pedal_engaged(p.value)) {
            (None, true) => down = Some(p.time),
            (Some(start), false) => {
                out.push((start, p.time));
                down = None;
            }
            _ => {}
        }
    }
    if let Some(start) = down {
        out.push((start, track_end.max(start)));
    }
    out
}

/// Extends every note released while the pedal is held to the pedal
/// release.
pub fn apply_sustain(notes: &[NoteEvent], pedals: &[PedalEvent], track_end: f64) -> Result<Vec<NoteEvent>> {
    if pedals.windows(2).any(|w| w[1].time < w[0].time) {
        return Err(Error::InvalidArgument("pedal events must be sorted by time".into()));
    }
    let intervals = sustain_intervals(pedals, track_end);
    Ok(notes
        .iter()
        .map(|n| {
            let mut n = *n;
            if let Some(&(_, release)) = intervals.iter().find(|(s, r)| *s <= n.offset && n.offset < *r) {
                n.offset = n.offset.max(release);
            }
            n
        })
        .collect())
}

/// Label matrix `n_frames x 185` for one instrument.
///
/// A note occupies frames `[onset_frame, offset_frame)`. A re-strike of a
/// sounding key ends the earlier note at the new onset.
pub fn derive_labels(notes: &[NoteEvent], instrument: usize, fps: f64, n_frames: usize) -> Result<Mat> {
    if instrument >= N_INSTRUMENTS {
        return Err(Error::InvalidLabel(format!(
            "instrument {instrument} out of range 0..9"
        )));
    }
    if !(fps > 0.0) {
        return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    for n in notes {
        n.validate()?;
    }
    let mut y = Mat::zeros(n_frames, D_LABEL);
    for r in 0..n_frames {
        y.row_mut(r)[instrument] = 1.0;
    }
    let mut per_key: Vec<Vec<(usize, usize, u8)>> = vec![Vec::new(); N_KEYS];
    for n in notes {
        per_key[n.key as usize].push((frame_index(n.onset, fps), frame_index(n.offset, fps), n.velocity));
    }
    for (key, spans) in per_key.iter_mut().enumerate() {
        spans.sort_by_key(|s| s.0);
        for i in 0..spans.len() {
            let (on, off, vel) = spans[i];
            let end = spans.get(i + 1).map_or(off, |next| off.min(next.0)).min(n_frames);
            let mut phase = PHASE_PEAK;
            for f in on..end {
                let row = y.row_mut(f);
                row[phase_col(key)] = phase;
                phase *= PHASE_DECAY;
                row[velocity_col(key)] = vel as f64 / 127.0;
            }
        }
    }
    Ok(y)
}

/// Typed view of one label row.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLabel {
    pub instrument: usize,
    pub phase: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl FrameLabel {
    pub fn silent(instrument: usize) -> Self {
        Self {
            instrument,
            phase: vec![0.0; N_KEYS],
            velocity: vec![0.0; N_KEYS],
        }
    }

    /// Reads a 185-wide row; the instrument is the arg-max of the one-hot
    /// block.
    pub fn from_row(row: &[f64]) -> Result<Self> {
        if row.len() != D_LABEL {
            return Err(Error::shape("FrameLabel::from_row", D_LABEL, row.len()));
        }
        let instrument = argmax(&row[..N_INSTRUMENTS]);
        Ok(Self {
            instrument,
            phase: row[N_INSTRUMENTS..N_INSTRUMENTS + N_KEYS].to_vec(),
            velocity: row[N_INSTRUMENTS + N_KEYS..].to_vec(),
        })
    }

    pub fn to_row(&self) -> Vec<f64> {
        let mut row = vec![0.0; D_LABEL];
        row[self.instrument] = 1.0;
        row[N_INSTRUMENTS..N_INSTRUMENTS + N_KEYS].copy_from_slice(&self.phase);
        row[N_INSTRUMENTS + N_KEYS..].copy_from_slice(&self.velocity);
        row
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Feature bin of partial `k` (1-based) of `key`.
pub fn partial_bin(key: usize, k: usize) -> usize {
    let semis = key as f64 + 12.0 * (k as f64).log2();
    1 + (semis * BINS_PER_SEMITONE).round() as usize
}

pub fn fundamental_bin(key: usize) -> usize {
    partial_bin(key, 1)
}

/// Noise-free linear mix for one label row.
pub fn harmonic_mix(y: &FrameLabel) -> Vec<f64> {
    let modulation = &PARTIAL_MODULATION[y.instrument.min(N_INSTRUMENTS - 1)];
    let mut mix = vec![0.0; D_FEATURES];
    for key in 0..N_KEYS {
        let phase = y.phase[key];
        if phase <= 0.0 {
            continue;
        }
        let amp = y.velocity[key] * phase / PHASE_PEAK;
        for k in 1..=PARTIALS {
            let a = amp * modulation[k - 1] / k as f64;
            let centre = partial_bin(key, k);
            for (j, w) in SPREAD.iter().enumerate() {
                if let Some(b) = (centre + j).checked_sub(1).filter(|&b| b < D_FEATURES) {
                    mix[b] += w * a;
                }
            }
        }
    }
    mix
}

/// One feature frame: harmonic mix plus a small noise floor, compressed
/// with `log(1 + .)`.
pub fn synth_frame(y: &FrameLabel, rng: &mut RngState) -> Vec<f64> {
    harmonic_mix(y)
        .into_iter()
        .map(|m| {
            let v = m + NOISE_FLOOR * rng.standard_normal();
            v.max(0.0).ln_1p()
        })
        .collect()
}

/// Synthesizes every row of a label matrix.
pub fn synth_frames(y: &Mat, rng: &mut RngState) -> Result<Mat> {
    let mut x = Vec::with_capacity(y.rows() * D_FEATURES);
    for r in 0..y.rows() {
        x.extend(synth_frame(&FrameLabel::from_row(y.row(r))?, rng));
    }
    Mat::new(y.rows(), D_FEATURES, x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PieceInfo {
    pub start: usize,
    pub len: usize,
    pub instrument: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramesHeader {
    pub n_frames: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub fps: f64,
    /// Set when every piece uses the same instrument.
    pub instrument: Option<usize>,
    pub seed: u64,
    pub pieces: Vec<PieceInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramesFile {
    pub header: FramesHeader,
    pub x: Mat,
    pub y: Mat,
}

impl FramesFile {
    /// Concatenates pieces, each given as `(instrument, x, y)`.
    pub fn from_pieces(pieces: Vec<(usize, Mat, Mat)>, fps: f64, seed: u64) -> Result<Self> {
        let d_x = pieces.first().map_or(D_FEATURES, |p| p.1.cols());
        let d_y = pieces.first().map_or(D_LABEL, |p| p.2.cols());
        let mut infos = Vec::with_capacity(pieces.len());
        let mut start = 0;
        for (instrument, x, y) in &pieces {
            if x.rows() != y.rows() {
                return Err(Error::shape("piece rows", x.rows(), y.rows()));
            }
            infos.push(PieceInfo {
                start,
                len: x.rows(),
                instrument: *instrument,
            });
            start += x.rows();
        }
        let xs: Vec<&Mat> = pieces.iter().map(|p| &p.1).collect();
        let ys: Vec<&Mat> = pieces.iter().map(|p| &p.2).collect();
        let (x, y) = if pieces.is_empty() {
            (Mat::zeros(0, d_x), Mat::zeros(0, d_y))
        } else {
            (Mat::vcat(&xs)?, Mat::vcat(&ys)?)
        };
        let first = infos.first().map(|p| p.instrument);
        let instrument = first.filter(|i| infos.iter().all(|p| p.instrument == *i));
        let file = Self {
            header: FramesHeader {
                n_frames: start,
                d_x,
                d_y,
                fps,
                instrument,
                seed,
                pieces: infos,
            },
            x,
            y,
        };
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if self.x.shape() != (h.n_frames, h.d_x) {
            return Err(Error::shape(
                "frames X",
                format!("{}x{}", h.n_frames, h.d_x),
                format!("{:?}", self.x.shape()),
            ));
        }
        if self.y.shape() != (h.n_frames, h.d_y) {
            return Err(Error::shape(
                "frames Y",
                format!("{}x{}", h.n_frames, h.d_y),
                format!("{:?}", self.y.shape()),
            ));
        }
        validate_pieces(h)
    }

    pub fn n_frames(&self) -> usize {
        self.header.n_frames
    }

    /// Row ranges of the pieces, or one range over everything when the
    /// header lists none.
    pub fn piece_ranges(&self) -> Vec<std::ops::Range<usize>> {
        if self.header.pieces.is_empty() {
            return vec![0..self.n_frames()];
        }
        self.header.pieces.iter().map(|p| p.start..p.start + p.len).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&self.header)?;
        let payload = 4 * (self.x.as_slice().len() + self.y.as_slice().len());
        let mut out = Vec::with_capacity(8 + header.len() + payload);
        out.extend_from_slice(FRAMES_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.x.as_slice().iter().chain(self.y.as_slice()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let p = || path.to_path_buf();
        if bytes.len() < 4 || &bytes[..4] != FRAMES_MAGIC {
            return Err(Error::BadMagic {
                path: p(),
                expected: "FRM1",
            });
        }
        let need = |offset: usize, n: usize| -> Result<()> {
            if bytes.len() < offset + n {
                Err(Error::Truncated {
                    path: p(),
                    offset: bytes.len() as u64,
                    needed: (offset + n - bytes.len()) as u64,
                })
            } else {
                Ok(())
            }
        };
        need(4, 4)?;
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        need(8, hlen)?;
        let header: FramesHeader = serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| Error::Format {
            path: p(),
            message: format!("header: {e}"),
        })?;
        validate_pieces(&header).map_err(|e| Error::Format {
            path: p(),
            message: e.to_string(),
        })?;
        let nx = header.n_frames.checked_mul(header.d_x);
        let ny = header.n_frames.checked_mul(header.d_y);
        let (nx, ny) = match (nx, ny) {
            (Some(a), Some(b)) if a.checked_add(b).and_then(|t| t.checked_mul(4)).is_some() => (a, b),
            _ => {
                return Err(Error::Format {
                    path: p(),
                    message: "header sizes overflow".into(),
                })
            }
        };
        let start = 8 + hlen;
        need(start, 4 * (nx + ny))?;
        if bytes.len() != start + 4 * (nx + ny) {
            return Err(Error::Format {
                path: p(),
                message: format!("{} trailing bytes after payload", bytes.len() - start - 4 * (nx + ny)),
            });
        }
        let read = |from: usize, n: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = bytes[from..from + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format {
                    path: p(),
                    message: "non-finite value in payload".into(),
                });
            }
            Ok(vals)
        };
        let x = Mat::new(header.n_frames, header.d_x, read(start, nx)?)?;
        let y = Mat::new(header.n_frames, header.d_y, read(start + 4 * nx, ny)?)?;
        Ok(Self { header, x, y })
    }
}

fn validate_pieces(h: &FramesHeader) -> Result<()> {
    let mut next = 0;
    for p in &h.pieces {
        if p.start != next {
            return Err(Error::InvalidArgument(format!(
                "piece starts at {} but {} expected",
                p.start, next
            )));
        }
        next += p.len;
    }
    if !h.pieces.is_empty() && next != h.n_frames {
        return Err(Error::InvalidArgument(format!(
            "pieces cover {next} frames of {}",
            h.n_frames
        )));
    }
    Ok(())
}

pub fn write_frames(path: &Path, file: &FramesFile) -> Result<()> {
    fs::write(path, file.to_bytes()?)?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<FramesFile> {
    let bytes = fs::read(path)?;
    FramesFile::from_bytes(&bytes, path)
}

/// Exact byte size of a frames file with the given header.
pub fn frames_file_size(header: &FramesHeader) -> Result<usize> {
    let hlen = serde_json::to_vec(header)?.len();
    Ok(8 + hlen + 4 * header.n_frames * (header.d_x + header.d_y))
}

/// Sparse label export: one `frame,key,phase,velocity` row per sounding
/// key.
pub fn write_label_csv(path: &Path, y: &Mat) -> Result<()> {
    if y.cols() != D_LABEL {
        return Err(Error::Dimension(format!(
            "label matrix has {} columns, expected {D_LABEL}",
            y.cols()
        )));
    }
    let mut out = String::from("frame,key,phase,velocity\n");
    for f in 0..y.rows() {
        let row = y.row(f);
        for key in 0..N_KEYS {
            let (ph, vel) = (row[phase_col(key)], row[velocity_col(key)]);
            if ph != 0.0 || vel != 0.0 {
                out.push_str(&format!("{f},{key},{ph},{vel}\n"));
            }
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a label CSV into the phase and velocity blocks of an
/// `n_frames x 185` matrix whose instrument block is taken from
/// `instruments`.
pub fn read_label_csv(path: &Path, instruments: &[usize]) -> Result<Mat> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "frame,key,phase,velocity" => {}
        _ => return Err(bad(1, "expected header frame,key,phase,velocity".into())),
    }
    let mut y = Mat::zeros(instruments.len(), D_LABEL);
    for (r, &inst) in instruments.iter().enumerate() {
        if inst >= N_INSTRUMENTS {
            return Err(Error::InvalidLabel(format!("instrument {inst} out of range")));
        }
        y.row_mut(r)[inst] = 1.0;
    }
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(i + 1, format!("expected 4 fields, got {}", fields.len())));
        }
        let frame: usize = fields[0].parse().map_err(|e| bad(i + 1, format!("frame: {e}")))?;
        let key: usize = fields[1].parse().map_err(|e| bad(i + 1, format!("key: {e}")))?;
        let phase: f64 = fields[2].parse().map_err(|e| bad(i + 1, format!("phase: {e}")))?;
        let vel: f64 = fields[3].parse().map_err(|e| bad(i + 1, format!("velocity: {e}")))?;
        if frame >= y.rows() || key >= N_KEYS {
            return Err(bad(i + 1, format!("frame {frame} or key {key} out of range")));
        }
        if !phase.is_finite() || !vel.is_finite() {
            return Err(bad(i + 1, "non-finite value".into()));
        }
        let row = y.row_mut(frame);
        row[phase_col(key)] = phase;
        row[velocity_col(key)] = vel;
    }
    Ok(y)
}

/// Random-piece generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub train_pieces: usize,
    pub valid_pieces: usize,
    pub test_pieces: usize,
    pub piece_seconds: f64,
    pub fps: f64,
    /// Inclusive key range.
    pub key_lo: u8,
    pub key_hi: u8,
    pub max_polyphony: usize,
    /// Mean note starts per second.
    pub onset_rate: f64,
    pub min_duration: f64,
    pub max_duration: f64,
    pub min_velocity: u8,
    pub max_velocity: u8,
    pub train_instruments: Vec<usize>,
    pub test_instrument: usize,
    pub sustain: bool,
    pub probe_instrument: usize,
    pub probe_seconds: f64,
    pub probe_velocity: u8,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            train_pieces: 40,
            valid_pieces: 2,
            test_pieces: 10,
            piece_seconds: 60.0,
            fps: DEFAULT_FPS,
            key_lo: 20,
            key_hi: 70,
            max_polyphony: 4,
            onset_rate: 3.0,
            min_duration: 0.1,
            max_duration: 2.0,
            min_velocity: 30,
            max_velocity: 127,
            train_instruments: vec![0, 1, 2],
            test_instrument: 3,
            sustain: false,
            probe_instrument: 0,
            probe_seconds: 1.0,
            probe_velocity: 100,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.key_lo > self.key_hi || self.key_hi as usize >= N_KEYS {
            return bad("key range must satisfy key_lo <= key_hi < 88");
        }
        if self.max_polyphony == 0 {
            return bad("max_polyphony must be at least 1");
        }
        if !(self.fps > 0.0 && self.piece_seconds > 0.0 && self.onset_rate > 0.0) {
            return bad("fps, piece_seconds and onset_rate must be positive");
        }
        if !(self.min_duration > 0.0 && self.min_duration <= self.max_duration) {
            return bad("durations must satisfy 0 < min_duration <= max_duration");
        }
        if self.min_velocity > self.max_velocity || self.max_velocity > 127 {
            return bad("velocities must satisfy min_velocity <= max_velocity <= 127");
        }
        if self.train_instruments.is_empty() {
            return bad("train_instruments must not be empty");
        }
        let all = self
            .train_instruments
            .iter()
            .chain([&self.test_instrument, &self.probe_instrument]);
        if all.clone().any(|&i| i >= N_INSTRUMENTS) {
            return bad("instrument ids must be < 9");
        }
        if self.train_instruments.contains(&self.test_instrument) {
            return bad("test_instrument must not be a training instrument");
        }
        if !(self.probe_seconds > 0.0) {
            return bad("probe_seconds must be positive");
        }
        Ok(())
    }

    pub fn frames_per_piece(&self) -> usize {
        (self.piece_seconds * self.fps).round() as usize
    }
}

/// Random notes for one piece. Keys already sounding are not re-struck and
/// a note is dropped when it would push any frame past the polyphony
/// limit.
pub fn random_piece(spec: &CorpusSpec, rng: &mut RngState) -> (Vec<NoteEvent>, Vec<PedalEvent>) {
    let n_frames = spec.frames_per_piece();
    let end = n_frames as f64 / spec.fps;
    let pedals = if spec.sustain {
        random_pedals(end, rng)
    } else {
        Vec::new()
    };
    let intervals = sustain_intervals(&pedals, end);

    let mut count = vec![0usize; n_frames];
    let mut busy = vec![vec![false; n_frames]; N_KEYS];
    let mut notes = Vec::new();
    let mut t = 0.0;
    loop {
        t += -(1.0 - rng.uniform()).ln() / spec.onset_rate;
        if t >= end {
            break;
        }
        let key = rng.int_inclusive(spec.key_lo as u64, spec.key_hi as u64) as usize;
        let dur = rng.uniform_range(spec.min_duration, spec.max_duration);
        let velocity = rng.int_inclusive(spec.min_velocity as u64, spec.max_velocity as u64) as u8;
        let mut off = (t + dur).min(end);
        if let Some(&(_, release)) = intervals.iter().find(|(s, r)| *s <= off && off < *r) {
            off = off.max(release);
        }
        if off <= t {
            continue;
        }
        let (a, b) = (frame_index(t, spec.fps), frame_index(off, spec.fps).min(n_frames));
        if a >= b || (a..b).any(|f| busy[key][f] || count[f] >= spec.max_polyphony) {
            continue;
        }
        for f in a..b {
            busy[key][f] = true;
            count[f] += 1;
        }
        notes.push(NoteEvent {
            key: key as u8,
            onset: t,
            offset: (t + dur).min(end),
            velocity,
        });
    }
    (notes, pedals)
}

fn random_pedals(end: f64, rng: &mut RngState) -> Vec<PedalEvent> {
    let mut out = Vec::new();
    let mut t = rng.uniform_range(0.0, 4.0);
    while t < end {
        out.push(PedalEvent { time: t, value: 127 });
        t += rng.uniform_range(0.5, 3.0);
        out.push(PedalEvent {
            time: t.min(end),
            value: 0,
        });
        t += rng.uniform_range(1.0, 6.0);
    }
    out
}

/// Notes, labels and features of one piece.
pub fn render_piece(spec: &CorpusSpec, instrument: usize, rng: &mut RngState) -> Result<(Mat, Mat)> {
    let n_frames = spec.frames_per_piece();
    let (notes, pedals) = random_piece(spec, rng);
    let notes = apply_sustain(&notes, &pedals, n_frames as f64 / spec.fps)?;
    let y = derive_labels(&notes, instrument, spec.fps, n_frames)?;
    let x = synth_frames(&y, rng)?;
    Ok((x, y))
}

/// One isolated note per key, each piece one note followed by a short
/// silence.
pub fn probe_reference(spec: &CorpusSpec, seed: u64) -> Result<FramesFile> {
    let note_frames = (spec.probe_seconds * spec.fps).round().max(1.0) as usize;
    let n_frames = note_frames + 5;
    let base = RngState::new(seed).fork(PROBE_STREAM);
    let mut pieces = Vec::with_capacity(N_KEYS);
    for key in 0..N_KEYS {
        let note = NoteEvent {
            key: key as u8,
            onset: 0.0,
            offset: note_frames as f64 / spec.fps,
            velocity: spec.probe_velocity,
        };
        let y = derive_labels(&[note], spec.probe_instrument, spec.fps, n_frames)?;
        let x = synth_frames(&y, &mut base.fork(key as u64))?;
        pieces.push((spec.probe_instrument, x, y));
    }
    FramesFile::from_pieces(pieces, spec.fps, seed)
}

const PROBE_STREAM: u64 = 0x5052_4f42_4500_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    TestSeen,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Valid, Split::TestSeen, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.frm",
            Split::Valid => "valid.frm",
            Split::TestSeen => "test_seen.frm",
            Split::Test => "test.frm",
        }
    }

    fn stream(self) -> u64 {
        (self as u64 + 1) << 32
    }
}

/// Builds one split. Piece `i` draws from its own stream forked from the
/// corpus seed, so pieces are independent of each other and of the order
/// they are rendered in.
pub fn generate_split(spec: &CorpusSpec, split: Split, seed: u64) -> Result<FramesFile> {
    spec.validate()?;
    let (count, instruments): (usize, Vec<usize>) = match split {
        Split::Train => (spec.train_pieces, spec.train_instruments.clone()),
        Split::Valid => (spec.valid_pieces, spec.train_instruments.clone()),
        Split::TestSeen => (spec.test_pieces, spec.train_instruments.clone()),
        Split::Test => (spec.test_pieces, vec![spec.test_instrument]),
    };
    let root = RngState::new(seed);
    let mut pieces = Vec::with_capacity(count);
    for i in 0..count {
        let instrument = instruments[i % instruments.len()];
        let mut rng = root.fork(split.stream() | i as u64);
        let (x, y) = render_piece(spec, instrument, &mut rng)?;
        pieces.push((instrument, x, y));
    }
    FramesFile::from_pieces(pieces, spec.fps, seed)
}

pub const PROBE_FILE: &str = "probe_reference.frm";

/// Writes every split plus the probe reference into `out_dir` and returns
/// the written paths.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for split in Split::ALL {
        let path = out_dir.join(split.file_name());
        write_frames(&path, &generate_split(spec, split, seed)?)?;
        written.push(path);
    }
    let path = out_dir.join(PROBE_FILE);
    write_frames(&path, &probe_reference(spec, seed)?)?;
    written.push(path);
    Ok(written)
}
