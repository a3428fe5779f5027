//! Run configuration: one TOML document covering data, model, training,
//! evaluation and transfer settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::TransferConfig;
use crate::data::{load_dataset_dir, synthetic_testbed, MotionSequence, WindowConfig};
use crate::error::{Error, Result};
use crate::evaluation::{Experiment, HorizonSet, TestProtocol};
use crate::kinematics::SkeletonTopology;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const RUN_DIR_ENV: &str = "AMGAN_RUN_DIR";

/// Where motion comes from. Without `root` the synthetic two-action
/// testbed is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub raw_fps: f64,
    pub downsample: usize,
    pub synthetic_frames: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            raw_fps: 50.0,
            downsample: 2,
            synthetic_frames: 400,
            synthetic_seed: 7,
        }
    }
}

impl DataConfig {
    pub fn fps(&self) -> f64 {
        if self.root.is_some() {
            self.raw_fps / self.downsample as f64
        } else {
            25.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub horizons_ms: Vec<u32>,
    pub protocol: TestProtocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons_ms: vec![80, 160, 320, 400, 1000],
            protocol: TestProtocol::default(),
        }
    }
}

/// Training of the one-frame model used for action transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NextPoseConfig {
    pub max_steps: u64,
    pub learning_rate: f64,
    pub kl_coef: f64,
}

impl Default for NextPoseConfig {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            learning_rate: 1e-3,
            kl_coef: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds model initialization and training.
    pub seed: u64,
    /// Topology file; the bundled 25-joint skeleton when absent.
    pub topology: Option<PathBuf>,
    /// Output root; falls back to `$AMGAN_RUN_DIR`, then `runs`.
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub transfer: TransferConfig,
    pub next_pose: NextPoseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            topology: None,
            output_dir: None,
            data: DataConfig::default(),
            window: WindowConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            transfer: TransferConfig::default(),
            next_pose: NextPoseConfig::default(),
        }
    }
}

/// Keys owned elsewhere: the seed is top-level and the horizon is `window.predict_len`.
const DERIVED_KEYS: [(&str, &str); 2] = [("train.seed", "seed"), ("model.predict_len", "window.predict_len")];

fn schema() -> toml::Value {
    let full = RunConfig {
        topology: Some(PathBuf::new()),
        output_dir: Some(PathBuf::new()),
        data: DataConfig {
            root: Some(PathBuf::new()),
            ..DataConfig::default()
        },
        ..RunConfig::default()
    };
    toml::Value::try_from(full).expect("config serializes")
}

fn unknown_keys(doc: &toml::Value, schema: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (Some(d), Some(s)) = (doc.as_table(), schema.as_table()) else {
        return;
    };
    for (k, v) in d {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if let Some((_, owner)) = DERIVED_KEYS.iter().find(|(d, _)| *d == key) {
            out.push(format!("{key}: unknown key (set `{owner}` instead)"));
            continue;
        }
        match s.get(k) {
            Some(sv) => unknown_keys(v, sv, &key, out),
            None => out.push(format!("{key}: unknown key")),
        }
    }
}

impl RunConfig {
    /// Parses, rejecting every unknown key and every invalid value at once.
    /// Relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let doc: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(vec![format!("syntax: {}", e.message())]))?;
        let mut unknown = Vec::new();
        unknown_keys(&doc, &schema(), "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(unknown));
        }
        let mut cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.resolve_paths(base_dir);
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.topology, &mut self.output_dir, &mut self.data.root]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Copies the owning keys into the sections that also carry them.
    pub fn sync(&mut self) {
        self.train.seed = self.seed;
        self.model.predict_len = self.window.predict_len;
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, m) in self.train.problems() {
            out.push(format!("train.{k}: {m}"));
        }
        if let Err(Error::Config(m)) = self.model.validate() {
            out.extend(m);
        }
        for (k, v) in [
            ("window.observed_len", self.window.observed_len),
            ("window.predict_len", self.window.predict_len),
            ("window.stride", self.window.stride),
            ("data.downsample", self.data.downsample),
            ("data.synthetic_frames", self.data.synthetic_frames),
            ("eval.protocol.windows_per_action", self.eval.protocol.windows_per_action),
            ("transfer.n_transition_frames", self.transfer.n_transition_frames),
        ] {
            if v == 0 {
                out.push(format!("{k}: must be >= 1"));
            }
        }
        if !(self.data.raw_fps.is_finite() && self.data.raw_fps > 0.0) {
            out.push(format!("data.raw_fps: must be positive, got {}", self.data.raw_fps));
        }
        if !(self.next_pose.learning_rate.is_finite() && self.next_pose.learning_rate >= 0.0) {
            out.push(format!(
                "next_pose.learning_rate: must be non-negative, got {}",
                self.next_pose.learning_rate
            ));
        }
        if !(self.next_pose.kl_coef.is_finite() && self.next_pose.kl_coef >= 0.0) {
            out.push(format!("next_pose.kl_coef: must be non-negative, got {}", self.next_pose.kl_coef));
        }
        if self.data.downsample > 0 && self.data.raw_fps > 0.0 {
            if let Err(e) = HorizonSet::new(&self.eval.horizons_ms, self.data.fps()) {
                out.push(format!("eval.horizons_ms: {e}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Snapshot text that parses back to `self`.
    pub fn to_toml(&self) -> Result<String> {
        let mut v = toml::Value::try_from(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for (key, _) in DERIVED_KEYS {
            let (section, field) = key.split_once('.').expect("dotted");
            if let Some(t) = v.get_mut(section).and_then(|s| s.as_table_mut()) {
                t.remove(field);
            }
        }
        toml::to_string(&v).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    /// `explicit`, else `output_dir`, else `$AMGAN_RUN_DIR`, else `runs`.
    pub fn run_dir(&self, explicit: Option<&Path>) -> PathBuf {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn load_topology(&self) -> Result<SkeletonTopology> {
        match &self.topology {
            Some(p) => SkeletonTopology::load(p),
            None => Ok(SkeletonTopology::default_h36m()),
        }
    }

    /// Raw motion at the working frame rate.
    pub fn load_sequences(&self, topology: &SkeletonTopology) -> Result<Vec<MotionSequence>> {
        let seqs = match &self.data.root {
            Some(root) => load_dataset_dir(root, self.data.raw_fps, self.data.downsample)?,
            None => synthetic_testbed(topology, self.data.synthetic_frames, self.data.synthetic_seed)?,
        };
        if let Some(s) = seqs.iter().find(|s| s.dim() != topology.pose_dim()) {
            return Err(Error::dim("motion width", topology.pose_dim(), s.dim()));
        }
        Ok(seqs)
    }

    pub fn horizons(&self) -> Result<HorizonSet> {
        HorizonSet::new(&self.eval.horizons_ms, self.data.fps())
    }

    pub fn experiment(&self) -> Result<Experiment> {
        Ok(Experiment {
            model: self.model.clone(),
            train: self.train.clone(),
            window: self.window,
            protocol: self.eval.protocol,
            horizons: self.horizons()?,
        })
    }

    /// Next-pose settings derived from the main ones.
    pub fn next_pose_train(&self) -> (WindowConfig, TrainConfig) {
        let window = WindowConfig {
            predict_len: 1,
            ..self.window
        };
        let mut train = self.train.clone().next_pose();
        train.max_steps = self.next_pose.max_steps;
        train.learning_rate = self.next_pose.learning_rate;
        train.weights.kl_coef = self.next_pose.kl_coef;
        (window, train)
    }
}
