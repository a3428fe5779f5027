//! Motion ingestion, preprocessing, windowing and synthetic motion.

use std::f64::consts::TAU;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::kinematics::{Representation, SkeletonTopology, NUM_CHAINS};

/// Subjects of the standard H3.6m split; `S5` is held out for testing.
pub const TRAIN_SUBJECTS: [&str; 6] = ["S1", "S6", "S7", "S8", "S9", "S11"];
pub const TEST_SUBJECT: &str = "S5";

pub const STD_FLOOR: f64 = 1e-8;

/// Time-ordered pose matrix; row `i` is frame `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Mat,
    pub fps: f64,
    pub action: Option<String>,
    pub subject: Option<String>,
    pub representation: Representation,
}

impl MotionSequence {
    pub fn new(frames: Mat, fps: f64) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::InvalidArgument("motion sequence has no frames".into()));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("motion sequence contains non-finite values".into()));
        }
        Ok(Self {
            frames,
            fps,
            action: None,
            subject: None,
            representation: Representation::ExpmapAngles,
        })
    }

    pub fn with_labels(mut self, subject: impl Into<String>, action: impl Into<String>) -> Self {
        self.subject = Some(subject.into());
        self.action = Some(action.into());
        self
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Reads one frame per line of comma-separated numbers.
pub fn load_motion_csv(path: &Path, fps: f64) -> Result<MotionSequence> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let mut count = 0;
        for field in line.split(',') {
            let field = field.trim();
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("non-numeric field `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite field `{field}`")));
            }
            values.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(parse_err(format!("expected {w} fields, found {count}")));
            }
            _ => {}
        }
        rows += 1;
    }
    let Some(width) = width else {
        return Err(Error::Empty(path.to_path_buf()));
    };
    let frames = Mat::from_shape_vec((rows, width), values).expect("row lengths checked");
    MotionSequence::new(frames, fps)
}

/// Writes frames in the same layout `load_motion_csv` reads.
pub fn write_motion_csv(path: &Path, frames: &Mat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for row in frames.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Keeps every `factor`-th frame starting at frame 0.
pub fn downsample(seq: &MotionSequence, factor: usize) -> Result<MotionSequence> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsample factor must be >= 1".into()));
    }
    Ok(MotionSequence {
        frames: seq.frames.slice(s![..;factor, ..]).to_owned(),
        fps: seq.fps / factor as f64,
        ..seq.clone()
    })
}

/// Per-dimension z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant_dims: Vec<usize>,
}

impl NormalizationStats {
    /// Mean and population standard deviation over every training frame.
    pub fn fit(train: &[MotionSequence]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::InvalidArgument("normalization needs at least one sequence".into()))?;
        let dim = first.dim();
        let mut count = 0usize;
        let mut sum = vec![0.0; dim];
        for seq in train {
            if seq.dim() != dim {
                return Err(Error::dim("fit_normalization", dim, seq.dim()));
            }
            for row in seq.frames.rows() {
                for (acc, v) in sum.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            count += seq.len();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; dim];
        for seq in train {
            for row in seq.frames.rows() {
                for ((acc, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let mut std = Vec::with_capacity(dim);
        let mut constant_dims = Vec::new();
        for (d, s) in sq.iter().enumerate() {
            let sd = (s / count as f64).sqrt();
            if sd < STD_FLOOR {
                constant_dims.push(d);
                std.push(1.0);
            } else {
                std.push(sd);
            }
        }
        Ok(Self {
            mean,
            std,
            constant_dims,
        })
    }

    fn is_constant(&self, d: usize) -> bool {
        self.constant_dims.binary_search(&d).is_ok()
    }

    pub fn apply(&self, frames: &Mat) -> Mat {
        let mut out = frames.clone();
        for (d, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            if !self.is_constant(d) {
                let (m, s) = (self.mean[d], self.std[d]);
                col.mapv_inplace(|v| (v - m) / s);
            }
        }
        out
    }

    pub fn invert(&self, frames: &Mat) -> Mat {
        let mut out = frames.clone();
        for (d, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            if !self.is_constant(d) {
                let (m, s) = (self.mean[d], self.std[d]);
                col.mapv_inplace(|v| v * s + m);
            }
        }
        out
    }

    pub fn apply_seq(&self, seq: &MotionSequence) -> MotionSequence {
        MotionSequence {
            frames: self.apply(&seq.frames),
            ..seq.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub observed_len: usize,
    pub predict_len: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            observed_len: 25,
            predict_len: 25,
            stride: 1,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.observed_len == 0 || self.predict_len == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument(
                "window lengths and stride must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.observed_len + self.predict_len
    }

    /// Start frames of every window that fits in `n` frames.
    pub fn starts(&self, n: usize) -> Vec<usize> {
        let total = self.total_len();
        if n < total {
            return Vec::new();
        }
        (0..=n - total).step_by(self.stride).collect()
    }
}

/// An observation window and the future that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub observed: Mat,
    pub future: Mat,
}

pub fn cut_windows(seq: &MotionSequence, cfg: &WindowConfig) -> Vec<Window> {
    let t = cfg.observed_len;
    cfg.starts(seq.len())
        .into_iter()
        .map(|start| Window {
            observed: seq.frames.slice(s![start..start + t, ..]).to_owned(),
            future: seq.frames.slice(s![start + t..start + cfg.total_len(), ..]).to_owned(),
        })
        .collect()
}

/// Time-major batch: `observed[k]` and `future[k]` are `batch x D` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub observed: Vec<Mat>,
    pub future: Vec<Mat>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.observed.first().map_or(0, Mat::nrows)
    }

    pub fn last_observed(&self) -> &Mat {
        self.observed.last().expect("batch has observed frames")
    }

    /// Rows `start..start+len` of every frame.
    pub fn rows(&self, start: usize, len: usize) -> Batch {
        let cut = |frames: &[Mat]| {
            frames
                .iter()
                .map(|f| f.slice(s![start..start + len, ..]).to_owned())
                .collect()
        };
        Batch {
            observed: cut(&self.observed),
            future: cut(&self.future),
        }
    }
}

const WINDOW_MAGIC: &[u8; 8] = b"AMGWIN\0\0";
const WINDOW_VERSION: u32 = 1;

/// A flat store of equally sized windows with their action labels.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub observed_len: usize,
    pub predict_len: usize,
    pub dim: usize,
    windows: Vec<Mat>,
    labels: Vec<String>,
}

impl WindowSet {
    pub fn new(observed_len: usize, predict_len: usize, dim: usize) -> Self {
        Self {
            observed_len,
            predict_len,
            dim,
            windows: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_sequences(seqs: &[MotionSequence], cfg: &WindowConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = seqs.first().map_or(0, MotionSequence::dim);
        let mut set = Self::new(cfg.observed_len, cfg.predict_len, dim);
        for seq in seqs {
            let label = seq.action.clone().unwrap_or_default();
            for start in cfg.starts(seq.len()) {
                set.push(seq.frames.slice(s![start..start + cfg.total_len(), ..]).to_owned(), &label)?;
            }
        }
        Ok(set)
    }

    pub fn push(&mut self, window: Mat, label: &str) -> Result<()> {
        if window.dim() != (self.observed_len + self.predict_len, self.dim) {
            return Err(Error::dim(
                "window set",
                (self.observed_len + self.predict_len) * self.dim,
                window.len(),
            ));
        }
        self.windows.push(window);
        self.labels.push(label.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window(&self, i: usize) -> &Mat {
        &self.windows[i]
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let b = indices.len();
        let gather = |k: usize| {
            let mut m = Mat::zeros((b, self.dim));
            for (row, &i) in indices.iter().enumerate() {
                m.row_mut(row).assign(&self.windows[i].row(k));
            }
            m
        };
        Batch {
            observed: (0..self.observed_len).map(gather).collect(),
            future: (self.observed_len..self.observed_len + self.predict_len)
                .map(gather)
                .collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        let file = fs::File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        w.write_all(WINDOW_MAGIC).map_err(io)?;
        w.write_all(&WINDOW_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes()).map_err(io)?;
        for v in [self.observed_len, self.predict_len, self.dim] {
            w.write_all(&(v as u32).to_le_bytes()).map_err(io)?;
        }
        for label in &self.labels {
            w.write_all(&(label.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(label.as_bytes()).map_err(io)?;
        }
        for win in &self.windows {
            for v in win.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bad = |message: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cur = ByteCursor::new(&bytes);
        if cur.take(8).ok_or_else(|| bad("truncated"))? != WINDOW_MAGIC {
            return Err(bad("not a window store"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated"))?;
        if version != WINDOW_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = cur.u64().ok_or_else(|| bad("truncated"))? as usize;
        let t = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
        let horizon = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
        let dim = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
        let mut set = Self::new(t, horizon, dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let len = cur.u32().ok_or_else(|| bad("truncated"))? as usize;
            let raw = cur.take(len).ok_or_else(|| bad("truncated"))?;
            labels.push(String::from_utf8(raw.to_vec()).map_err(|_| bad("label is not utf-8"))?);
        }
        for label in labels {
            let mut data = Vec::with_capacity((t + horizon) * dim);
            for _ in 0..(t + horizon) * dim {
                data.push(cur.f64().ok_or_else(|| bad("truncated"))?);
            }
            set.push(Mat::from_shape_vec((t + horizon, dim), data).expect("sized"), &label)?;
        }
        if !cur.is_done() {
            return Err(bad("trailing bytes"));
        }
        Ok(set)
    }
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(out)
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parameters of a seeded sum-of-sinusoids motion.
///
/// Per-dimension amplitudes and phases come from `structure_seed`, so two
/// sequences of the same action share their shape; the per-sequence seed
/// only draws a global phase and an amplitude scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Base period in frames.
    pub period: f64,
    pub harmonics: usize,
    pub amplitude: f64,
    pub chain_gain: [f64; NUM_CHAINS],
    pub chain_phase: [f64; NUM_CHAINS],
    pub structure_seed: u64,
    /// Relative amplitude jitter between sequences.
    pub jitter: f64,
    pub fps: f64,
}

impl SynthSpec {
    pub fn walking() -> Self {
        Self {
            period: 28.0,
            harmonics: 2,
            amplitude: 0.5,
            chain_gain: [0.4, 0.8, 0.8, 1.0, 1.0],
            chain_phase: [0.0, TAU / 2.0, 0.0, 0.0, TAU / 2.0],
            structure_seed: 11,
            jitter: 0.1,
            fps: 25.0,
        }
    }

    pub fn eating() -> Self {
        Self {
            period: 40.0,
            harmonics: 2,
            amplitude: 0.4,
            chain_gain: [0.3, 1.0, 0.6, 0.15, 0.15],
            chain_phase: [0.0, 0.0, 1.3, 0.4, 2.1],
            structure_seed: 23,
            jitter: 0.1,
            fps: 25.0,
        }
    }

    /// Same motion sampled at another frame rate.
    pub fn at_fps(mut self, fps: f64) -> Self {
        self.period *= fps / self.fps;
        self.fps = fps;
        self
    }
}

pub fn synthesize_motion(
    topology: &SkeletonTopology,
    n_frames: usize,
    seed: u64,
    spec: &SynthSpec,
) -> Result<MotionSequence> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("n_frames must be >= 1".into()));
    }
    let dim = topology.pose_dim();
    let mut structure = ChaCha8Rng::seed_from_u64(spec.structure_seed);
    let mut chain_of_col = vec![0usize; dim];
    for chain in crate::kinematics::ChainId::all() {
        for &c in topology.chain_columns(chain) {
            chain_of_col[c] = chain.index();
        }
    }
    let mut offset = vec![0.0; dim];
    let mut amp = vec![vec![0.0; spec.harmonics]; dim];
    let mut phase = vec![vec![0.0; spec.harmonics]; dim];
    for d in 0..dim {
        offset[d] = structure.random_range(-0.5..0.5) * spec.amplitude;
        for h in 0..spec.harmonics {
            let gain = spec.chain_gain[chain_of_col[d]];
            amp[d][h] = gain * spec.amplitude * structure.random_range(0.2..1.0) / (h + 1) as f64;
            phase[d][h] = structure.random_range(0.0..TAU);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = rng.random_range(0.0..TAU);
    let scale = 1.0 + spec.jitter * rng.random_range(-1.0..1.0);
    let omega = TAU / spec.period;
    let frames = Mat::from_shape_fn((n_frames, dim), |(i, d)| {
        let base = omega * i as f64 + theta + spec.chain_phase[chain_of_col[d]];
        let wave: f64 = (0..spec.harmonics)
            .map(|h| amp[d][h] * ((h + 1) as f64 * base + phase[d][h]).sin())
            .sum();
        offset[d] + scale * wave
    });
    MotionSequence::new(frames, spec.fps)
}

/// Two-action synthetic dataset over the standard seven subjects.
pub fn synthetic_testbed(
    topology: &SkeletonTopology,
    n_frames: usize,
    seed: u64,
) -> Result<Vec<MotionSequence>> {
    synthetic_testbed_at(topology, n_frames, seed, 25.0)
}

/// [`synthetic_testbed`] sampled at `fps`.
pub fn synthetic_testbed_at(
    topology: &SkeletonTopology,
    n_frames: usize,
    seed: u64,
    fps: f64,
) -> Result<Vec<MotionSequence>> {
    let actions = [("walking", SynthSpec::walking().at_fps(fps)), ("eating", SynthSpec::eating().at_fps(fps))];
    let mut out = Vec::new();
    let subjects = std::iter::once(TEST_SUBJECT).chain(TRAIN_SUBJECTS);
    for (si, subject) in subjects.enumerate() {
        for (ai, (action, spec)) in actions.iter().enumerate() {
            let s = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((si * 31 + ai) as u64);
            out.push(synthesize_motion(topology, n_frames, s, spec)?.with_labels(subject, *action));
        }
    }
    Ok(out)
}

/// Splits by the held-out test subject.
pub fn split_subjects(seqs: Vec<MotionSequence>) -> (Vec<MotionSequence>, Vec<MotionSequence>) {
    seqs.into_iter()
        .partition(|s| s.subject.as_deref() != Some(TEST_SUBJECT))
}

/// Loads `root/<subject>/<action>[_<n>].{csv,txt}` files, downsampling each.
pub fn load_dataset_dir(root: &Path, raw_fps: f64, factor: usize) -> Result<Vec<MotionSequence>> {
    let mut subjects: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(format!("listing {}", root.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subjects.sort();
    let mut out = Vec::new();
    for dir in subjects {
        let subject = dir.file_name().unwrap().to_string_lossy().to_string();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "txt")))
            .collect();
        files.sort();
        for file in files {
            let stem = file.file_stem().unwrap().to_string_lossy().to_string();
            let action = match stem.rsplit_once('_') {
                Some((a, n)) if n.chars().all(|c| c.is_ascii_digit()) => a.to_string(),
                _ => stem.clone(),
            };
            let seq = load_motion_csv(&file, raw_fps)?;
            out.push(downsample(&seq, factor)?.with_labels(subject.clone(), action));
        }
    }
    if out.is_empty() {
        return Err(Error::Empty(root.to_path_buf()));
    }
    Ok(out)
}
