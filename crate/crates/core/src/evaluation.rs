//! Horizon errors, the zero-velocity baseline, the benchmark protocol and
//! the ablation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::checkpoint::ModelBundle;
use crate::data::{MotionSequence, WindowConfig};
use crate::error::{Error, Result};
use crate::kinematics::{Representation, SkeletonTopology};
use crate::model::{AmGanModel, Architecture, ModelConfig};
use crate::training::{PreparedData, StepRecord, TrainConfig, Trainer};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    pub ms: u32,
    /// 1-based frame index into the predicted window.
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSet {
    pub fps: f64,
    pub horizons: Vec<Horizon>,
}

impl HorizonSet {
    /// Fails unless every horizon lands exactly on a frame.
    pub fn new(ms: &[u32], fps: f64) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        let mut horizons = Vec::with_capacity(ms.len());
        for &m in ms {
            let f = m as f64 * fps / 1000.0;
            let r = f.round();
            if (f - r).abs() > 1e-9 || r < 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "{m} ms at {fps} fps is frame {f}, not a whole frame"
                )));
            }
            horizons.push(Horizon { ms: m, frame: r as usize });
        }
        Ok(Self { fps, horizons })
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.horizons.iter().map(|h| h.frame)
    }

    pub fn max_frame(&self) -> usize {
        self.frames().max().unwrap_or(0)
    }
}

impl Default for HorizonSet {
    fn default() -> Self {
        Self::new(&[80, 160, 320, 400, 1000], 25.0).expect("standard horizons are whole frames")
    }
}

fn check_frame(pred: &Mat, truth: &Mat, frame_idx: usize) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(Error::dim("horizon error", truth.len(), pred.len()));
    }
    if frame_idx == 0 || frame_idx > pred.nrows() {
        return Err(Error::InvalidArgument(format!(
            "frame index {frame_idx} outside 1..={}",
            pred.nrows()
        )));
    }
    Ok(())
}

/// Euclidean norm of the angle difference at 1-based `frame_idx`.
pub fn angle_error(pred: &Mat, truth: &Mat, frame_idx: usize) -> Result<f64> {
    check_frame(pred, truth, frame_idx)?;
    let k = frame_idx - 1;
    Ok((&pred.row(k) - &truth.row(k)).mapv(|v| v * v).sum().sqrt())
}

/// Mean angle error over a batch of `T x D` windows.
pub fn mae(preds: &[Mat], truths: &[Mat], frame_idx: usize, representation: Representation) -> Result<f64> {
    if representation == Representation::Coords3d {
        return Err(Error::Representation(
            "mean angle error is undefined for 3-D coordinates".into(),
        ));
    }
    batch_mean(preds, truths, |p, t| angle_error(p, t, frame_idx))
}

/// Mean squared coordinate error at `frame_idx`, for coordinate data.
pub fn coordinate_mse(preds: &[Mat], truths: &[Mat], frame_idx: usize) -> Result<f64> {
    batch_mean(preds, truths, |p, t| {
        check_frame(p, t, frame_idx)?;
        let k = frame_idx - 1;
        Ok((&p.row(k) - &t.row(k)).mapv(|v| v * v).mean().unwrap_or(0.0))
    })
}

fn batch_mean(preds: &[Mat], truths: &[Mat], f: impl Fn(&Mat, &Mat) -> Result<f64>) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::dim("evaluation batch", truths.len(), preds.len()));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no windows to evaluate".into()));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        total += f(p, t)?;
    }
    Ok(total / preds.len() as f64)
}

/// Repeats the last observed frame `horizon` times.
pub fn zero_velocity_baseline(observed: &Mat, horizon: usize) -> Result<Mat> {
    if observed.nrows() == 0 {
        return Err(Error::InvalidArgument("zero-velocity baseline needs an observed frame".into()));
    }
    let last = observed.row(observed.nrows() - 1);
    Ok(Mat::from_shape_fn((horizon, observed.ncols()), |(_, d)| last[d]))
}

/// Seeded choice of test windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestProtocol {
    pub windows_per_action: usize,
    pub seed: u64,
}

impl Default for TestProtocol {
    fn default() -> Self {
        Self {
            windows_per_action: 8,
            seed: 1234,
        }
    }
}

/// One test window: sequence index within the action and start frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestOffset {
    pub sequence: usize,
    pub start: usize,
}

pub struct TestWindows {
    pub offsets: BTreeMap<String, Vec<TestOffset>>,
    /// `(action, observed, future)` per window, raw values.
    pub windows: Vec<(String, Mat, Mat)>,
}

/// Picks `windows_per_action` windows per action from the test sequences.
pub fn select_test_windows(
    test: &[MotionSequence],
    window: &WindowConfig,
    protocol: &TestProtocol,
) -> Result<TestWindows> {
    window.validate()?;
    let mut by_action: BTreeMap<String, Vec<&MotionSequence>> = BTreeMap::new();
    for s in test {
        by_action.entry(s.action.clone().unwrap_or_default()).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut offsets = BTreeMap::new();
    let mut windows = Vec::new();
    for (action, seqs) in by_action {
        let candidates: Vec<TestOffset> = seqs
            .iter()
            .enumerate()
            .flat_map(|(i, s)| window.starts(s.len()).into_iter().map(move |start| TestOffset { sequence: i, start }))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let chosen: Vec<TestOffset> = (0..protocol.windows_per_action)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect();
        for o in &chosen {
            let f = &seqs[o.sequence].frames;
            let t = window.observed_len;
            windows.push((
                action.clone(),
                f.slice(ndarray::s![o.start..o.start + t, ..]).to_owned(),
                f.slice(ndarray::s![o.start + t..o.start + window.total_len(), ..]).to_owned(),
            ));
        }
        offsets.insert(action, chosen);
    }
    if windows.is_empty() {
        return Err(Error::InvalidArgument("test set yields no windows".into()));
    }
    Ok(TestWindows { offsets, windows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MeanAngleError,
    CoordinateMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub action: String,
    pub ms: u32,
    pub frame: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub method: String,
    pub metric: Metric,
    pub horizons: HorizonSet,
    pub cells: Vec<ReportCell>,
    pub checkpoint_hash: Option<String>,
    pub config: Option<serde_json::Value>,
    pub protocol: TestProtocol,
    pub windows: WindowConfig,
    pub test_offsets: BTreeMap<String, Vec<TestOffset>>,
}

impl EvalReport {
    pub fn actions(&self) -> Vec<&str> {
        let mut a: Vec<&str> = self.cells.iter().map(|c| c.action.as_str()).collect();
        a.dedup();
        a
    }

    pub fn value(&self, action: &str, ms: u32) -> Option<f64> {
        self.cells.iter().find(|c| c.action == action && c.ms == ms).map(|c| c.value)
    }

    /// Mean over actions at the horizon with the given 1-based frame.
    pub fn average_at_frame(&self, frame: usize) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.frame == frame).map(|c| c.value).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Markdown table: one row per action, one column per horizon.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let metric = match self.metric {
            Metric::MeanAngleError => "MAE",
            Metric::CoordinateMse => "coordinate MSE",
        };
        let _ = writeln!(out, "{} ({metric})\n", self.method);
        out.push_str("| Action |");
        for h in &self.horizons.horizons {
            let _ = write!(out, " {} ms |", h.ms);
        }
        out.push_str("\n|---|");
        for _ in &self.horizons.horizons {
            out.push_str("---|");
        }
        out.push('\n');
        for action in self.actions() {
            let _ = write!(out, "| {action} |");
            for h in &self.horizons.horizons {
                match self.value(action, h.ms) {
                    Some(v) => {
                        let _ = write!(out, " {v:.3} |");
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// What produces the predictions being scored.
pub enum Method<'a> {
    Model(&'a ModelBundle),
    ZeroVelocity,
    /// Returns the true future; useful as a protocol check.
    GroundTruth,
}

impl Method<'_> {
    fn name(&self) -> String {
        match self {
            Method::Model(b) => match b.model.config.architecture {
                Architecture::Composite => "AM-GAN".into(),
                Architecture::SingleGan => "single GAN".into(),
            },
            Method::ZeroVelocity => "zero-velocity".into(),
            Method::GroundTruth => "ground truth".into(),
        }
    }
}

/// Deterministic per-action, per-horizon error table.
pub fn benchmark(
    method: &Method,
    test: &[MotionSequence],
    window: &WindowConfig,
    protocol: &TestProtocol,
    horizons: &HorizonSet,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    if horizons.max_frame() > window.predict_len {
        return Err(Error::InvalidArgument(format!(
            "horizon frame {} exceeds the predicted length {}",
            horizons.max_frame(),
            window.predict_len
        )));
    }
    let representation = test[0].representation;
    let selected = select_test_windows(test, window, protocol)?;
    let observed: Vec<Mat> = selected.windows.iter().map(|(_, o, _)| o.clone()).collect();
    let preds: Vec<Mat> = match method {
        Method::Model(bundle) => {
            if bundle.model.predict_len() < window.predict_len {
                return Err(Error::InvalidArgument(format!(
                    "model predicts {} frames, protocol needs {}",
                    bundle.model.predict_len(),
                    window.predict_len
                )));
            }
            bundle.predict_many(&observed)?
        }
        Method::ZeroVelocity => observed
            .iter()
            .map(|o| zero_velocity_baseline(o, window.predict_len))
            .collect::<Result<_>>()?,
        Method::GroundTruth => selected.windows.iter().map(|(_, _, f)| f.clone()).collect(),
    };
    let metric = match representation {
        Representation::ExpmapAngles => Metric::MeanAngleError,
        Representation::Coords3d => Metric::CoordinateMse,
    };
    let mut cells = Vec::new();
    for action in selected.offsets.keys() {
        let idx: Vec<usize> = (0..selected.windows.len()).filter(|&i| &selected.windows[i].0 == action).collect();
        let p: Vec<Mat> = idx
            .iter()
            .map(|&i| preds[i].slice(ndarray::s![..window.predict_len, ..]).to_owned())
            .collect();
        let t: Vec<Mat> = idx.iter().map(|&i| selected.windows[i].2.clone()).collect();
        for h in &horizons.horizons {
            let value = match metric {
                Metric::MeanAngleError => mae(&p, &t, h.frame, representation)?,
                Metric::CoordinateMse => coordinate_mse(&p, &t, h.frame)?,
            };
            cells.push(ReportCell {
                action: action.clone(),
                ms: h.ms,
                frame: h.frame,
                value,
            });
        }
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method: method.name(),
        metric,
        horizons: horizons.clone(),
        cells,
        checkpoint_hash: None,
        config: None,
        protocol: *protocol,
        windows: *window,
        test_offsets: selected.offsets,
    })
}

/// First 16 hex digits of the SHA-256 of a file.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Complete,
    RemoveLocalCritics,
    RemoveGlobalCritic,
    RemoveSubgans,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Complete,
        Variant::RemoveLocalCritics,
        Variant::RemoveGlobalCritic,
        Variant::RemoveSubgans,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Complete => "complete",
            Variant::RemoveLocalCritics => "remove_local_critics",
            Variant::RemoveGlobalCritic => "remove_global_critic",
            Variant::RemoveSubgans => "remove_subgans",
        }
    }

    /// Model and training settings for this variant.
    pub fn apply(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        let mut t = train.clone();
        match self {
            Variant::Complete => {}
            Variant::RemoveLocalCritics => {
                // The stability term is a variance of the local critics'
                // losses, so it goes with them.
                t.weights.alpha = 0.0;
                t.weights.beta = 0.0;
                t.update_local_critics = false;
            }
            Variant::RemoveGlobalCritic => {
                t.weights.lambda = 0.0;
                t.update_global_critic = false;
            }
            Variant::RemoveSubgans => {
                m.architecture = Architecture::SingleGan;
            }
        }
        (m, t)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Everything needed to train and score one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub window: WindowConfig,
    pub protocol: TestProtocol,
    pub horizons: HorizonSet,
}

pub struct ExperimentOutcome {
    pub bundle: ModelBundle,
    pub records: Vec<StepRecord>,
    pub report: EvalReport,
}

/// Initializes from `train.seed` and trains on `data.train`.
pub fn train_model(
    exp: &Experiment,
    topology: &SkeletonTopology,
    data: &PreparedData,
    dir: Option<&Path>,
) -> Result<(ModelBundle, Vec<StepRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(exp.train.seed);
    let model_cfg = ModelConfig {
        predict_len: exp.window.predict_len,
        ..exp.model.clone()
    };
    let model = AmGanModel::new(topology.clone(), model_cfg, &mut rng)?;
    let mut trainer = Trainer::new(model, exp.train.clone(), exp.window)?;
    trainer.normalization = Some(data.normalization.clone());
    let records = trainer.run(&data.train, dir)?;
    Ok((trainer.bundle(), records))
}

/// [`train_model`], then benchmarks on the test split.
pub fn train_and_benchmark(
    exp: &Experiment,
    topology: &SkeletonTopology,
    data: &PreparedData,
    dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    let (bundle, records) = train_model(exp, topology, data, dir)?;
    let mut report = benchmark(&Method::Model(&bundle), &data.test, &exp.window, &exp.protocol, &exp.horizons)?;
    report.config = Some(serde_json::json!({
        "model": bundle.model.config,
        "train": exp.train,
    }));
    if let Some(d) = dir {
        report.checkpoint_hash = Some(file_hash(&d.join("final.ckpt"))?);
    }
    Ok(ExperimentOutcome {
        bundle,
        records,
        report,
    })
}

/// Trains and benchmarks one ablation variant under the base settings.
pub fn ablation_run(
    base: &Experiment,
    variant: Variant,
    topology: &SkeletonTopology,
    data: &PreparedData,
    dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    let (model, train) = variant.apply(&base.model, &base.train);
    let exp = Experiment {
        model,
        train,
        ..base.clone()
    };
    let mut out = train_and_benchmark(&exp, topology, data, dir)?;
    out.report.method = format!("{} ({})", out.report.method, variant.name());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn horizons_at_25_fps() {
        let h = HorizonSet::default();
        assert_eq!(h.frames().collect::<Vec<_>>(), vec![2, 4, 8, 10, 25]);
        assert!(HorizonSet::new(&[80], 30.0).is_err());
        assert!(HorizonSet::new(&[1000], 30.0).is_ok());
    }

    #[test]
    fn mae_examples() {
        let t = Mat::zeros((3, 4));
        assert_eq!(mae(&[t.clone()], &[t.clone()], 2, Representation::ExpmapAngles).unwrap(), 0.0);
        let mut p = t.clone();
        p[[1, 0]] = 3.0;
        p[[1, 1]] = 4.0;
        assert_eq!(mae(&[p], &[t.clone()], 2, Representation::ExpmapAngles).unwrap(), 5.0);
        let mut a = t.clone();
        a[[0, 2]] = 1.0;
        let mut b = t.clone();
        b[[0, 2]] = -3.0;
        assert_eq!(mae(&[a, b], &[t.clone(), t.clone()], 1, Representation::ExpmapAngles).unwrap(), 2.0);
        assert!(mae(&[t.clone()], &[t.clone()], 4, Representation::ExpmapAngles).is_err());
        assert!(mae(&[t.clone()], &[t.clone()], 0, Representation::ExpmapAngles).is_err());
        assert!(matches!(
            mae(&[t.clone()], &[t], 1, Representation::Coords3d),
            Err(Error::Representation(_))
        ));
    }

    #[test]
    fn zero_velocity_examples() {
        let obs = array![[1.0, 2.0], [3.0, 4.0]];
        let out = zero_velocity_baseline(&obs, 3).unwrap();
        assert_eq!(out, array![[3.0, 4.0], [3.0, 4.0], [3.0, 4.0]]);
        let still = Mat::from_elem((3, 2), 0.5);
        let pred = zero_velocity_baseline(&Mat::from_elem((2, 2), 0.5), 3).unwrap();
        assert_eq!(mae(&[pred], &[still], 3, Representation::ExpmapAngles).unwrap(), 0.0);
    }

    fn synthetic_test() -> Vec<MotionSequence> {
        let topo = SkeletonTopology::default_h36m();
        let (_, test) = crate::data::split_subjects(crate::data::synthetic_testbed(&topo, 120, 3).unwrap());
        test
    }

    #[test]
    fn zero_velocity_is_wrong_on_periodic_motion() {
        let test = synthetic_test();
        let window = WindowConfig::default();
        let r = benchmark(&Method::ZeroVelocity, &test, &window, &TestProtocol::default(), &HorizonSet::default())
            .unwrap();
        assert!(r.average_at_frame(10).unwrap() > 0.0);
    }

    #[test]
    fn ground_truth_report_is_zero_and_complete() {
        let test = synthetic_test();
        let window = WindowConfig::default();
        let horizons = HorizonSet::default();
        let r = benchmark(&Method::GroundTruth, &test, &window, &TestProtocol::default(), &horizons).unwrap();
        assert_eq!(r.cells.len(), 2 * horizons.horizons.len());
        assert!(r.cells.iter().all(|c| c.value == 0.0));
        let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let table = r.to_markdown();
        assert!(table.contains("| walking |") && table.contains("1000 ms"));
    }

    #[test]
    fn benchmark_is_deterministic() {
        let test = synthetic_test();
        let w = WindowConfig::default();
        let a = benchmark(&Method::ZeroVelocity, &test, &w, &TestProtocol::default(), &HorizonSet::default()).unwrap();
        let b = benchmark(&Method::ZeroVelocity, &test, &w, &TestProtocol::default(), &HorizonSet::default()).unwrap();
        assert_eq!(a, b);
        assert!(benchmark(&Method::ZeroVelocity, &[], &w, &TestProtocol::default(), &HorizonSet::default()).is_err());
    }

    #[test]
    fn variants_parse_and_apply() {
        assert_eq!("remove_subgans".parse::<Variant>().unwrap(), Variant::RemoveSubgans);
        assert!(matches!("nope".parse::<Variant>(), Err(Error::UnknownVariant(_))));
        let (m, t) = Variant::RemoveLocalCritics.apply(&ModelConfig::default(), &TrainConfig::default());
        assert_eq!(t.weights.alpha, 0.0);
        assert!(!t.update_local_critics);
        assert_eq!(m, ModelConfig::default());
        let (_, t) = Variant::RemoveGlobalCritic.apply(&ModelConfig::default(), &TrainConfig::default());
        assert_eq!(t.weights.lambda, 0.0);
        let (m, _) = Variant::RemoveSubgans.apply(&ModelConfig::default(), &TrainConfig::default());
        assert_eq!(m.architecture, Architecture::SingleGan);
        let (m, t) = Variant::Complete.apply(&ModelConfig::default(), &TrainConfig::default());
        assert_eq!((m, t), (ModelConfig::default(), TrainConfig::default()));
    }

    fn window() -> impl Strategy<Value = Mat> {
        prop::collection::vec(-3.0f64..3.0, 6).prop_map(|v| Mat::from_shape_vec((2, 3), v).unwrap())
    }

    proptest! {
        #[test]
        fn angle_error_is_a_metric(a in window(), b in window(), c in window()) {
            let ab = angle_error(&a, &b, 2).unwrap();
            let ba = angle_error(&b, &a, 2).unwrap();
            let bc = angle_error(&b, &c, 2).unwrap();
            let ac = angle_error(&a, &c, 2).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
