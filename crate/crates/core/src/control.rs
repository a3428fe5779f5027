//! Action transfer through latent interpolation and per-chain control by
//! swapping chain predictions between action-specific models.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::checkpoint::{Container, ModelBundle};
use crate::data::{split_subjects, MotionSequence, NormalizationStats, WindowConfig};
use crate::evaluation::{train_model, Experiment};
use crate::error::{Error, Result};
use crate::kinematics::{ChainId, SkeletonTopology, NUM_CHAINS};
use crate::model::{AmGanModel, ModelConfig};
use crate::training::{prepare_data_with, PreparedData, StepRecord, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Linear,
    /// Great-circle interpolation; falls back to linear for (anti)parallel codes.
    Spherical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub n_transition_frames: usize,
    pub schedule: Schedule,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            n_transition_frames: 6,
            schedule: Schedule::Linear,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_transition_frames == 0 {
            return Err(Error::Config(vec!["transfer.n_transition_frames must be >= 1".into()]));
        }
        Ok(())
    }

    /// `k / (K + 1)` for `k = 1..=K`.
    pub fn lambdas(&self) -> Vec<f64> {
        let k = self.n_transition_frames;
        (1..=k).map(|i| i as f64 / (k + 1) as f64).collect()
    }
}

/// Point at fraction `lambda` between `z1` and `z2`.
pub fn interpolate_at(z1: &[f64], z2: &[f64], lambda: f64, schedule: Schedule) -> Result<Vec<f64>> {
    if z1.len() != z2.len() {
        return Err(Error::dim("interpolate latents", z1.len(), z2.len()));
    }
    let lerp = || z1.iter().zip(z2).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
    match schedule {
        Schedule::Linear => Ok(lerp()),
        Schedule::Spherical => {
            let n1 = z1.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n2 = z2.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n1 == 0.0 || n2 == 0.0 {
                return Ok(lerp());
            }
            let cos = (z1.iter().zip(z2).map(|(a, b)| a * b).sum::<f64>() / (n1 * n2)).clamp(-1.0, 1.0);
            let omega = cos.acos();
            let sin = omega.sin();
            if sin.abs() < 1e-9 {
                return Ok(lerp());
            }
            let (w1, w2) = (((1.0 - lambda) * omega).sin() / sin, (lambda * omega).sin() / sin);
            Ok(z1.iter().zip(z2).map(|(a, b)| w1 * a + w2 * b).collect())
        }
    }
}

/// The `K` latents strictly between `z1` and `z2`.
pub fn interpolate_latents(z1: &[f64], z2: &[f64], cfg: &TransferConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    cfg.lambdas()
        .into_iter()
        .map(|l| interpolate_at(z1, z2, l, cfg.schedule))
        .collect()
}

/// A model that predicts a single future pose, used to generate transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct NextPoseVae {
    pub bundle: ModelBundle,
    pub trained_steps: u64,
}

impl NextPoseVae {
    pub fn new(bundle: ModelBundle, trained_steps: u64) -> Result<Self> {
        if bundle.model.predict_len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "next-pose model must predict 1 frame, got {}",
                bundle.model.predict_len()
            )));
        }
        Ok(Self { bundle, trained_steps })
    }

    /// Loads a training checkpoint, recovering the step count from its header.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let steps = c.header.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        Self::new(ModelBundle::restore(&c, path)?, steps)
    }

    pub fn observed_len(&self) -> usize {
        self.bundle.window.observed_len
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.trained_steps == 0 {
            return Err(Error::InvalidArgument("next-pose model is untrained".into()));
        }
        Ok(())
    }
}

/// Default next-pose architecture: the sequence model with a one-frame horizon.
pub fn next_pose_config(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        predict_len: 1,
        ..base.clone()
    }
}

/// Trains a next-pose model on data windowed with `predict_len = 1`.
pub fn train_next_pose(
    topology: &SkeletonTopology,
    model: &ModelConfig,
    train: &TrainConfig,
    data: &PreparedData,
    window: WindowConfig,
    dir: Option<&Path>,
) -> Result<(NextPoseVae, Vec<StepRecord>)> {
    if window.predict_len != 1 || data.train.predict_len != 1 {
        return Err(Error::InvalidArgument("next-pose training needs predict_len = 1 windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let m = AmGanModel::new(topology.clone(), next_pose_config(model), &mut rng)?;
    let mut trainer = Trainer::new(m, train.clone(), window)?;
    trainer.normalization = Some(data.normalization.clone());
    let records = trainer.run(&data.train, dir)?;
    let steps = trainer.step;
    Ok((NextPoseVae::new(trainer.bundle(), steps)?, records))
}

fn last_rows(seq: &Mat, n: usize, what: &str) -> Result<Mat> {
    if seq.nrows() < n {
        return Err(Error::InvalidArgument(format!(
            "{what} has {} frames, need at least {n}",
            seq.nrows()
        )));
    }
    Ok(seq.slice(s![seq.nrows() - n.., ..]).to_owned())
}

fn frames_of(seq: &Mat) -> Vec<Mat> {
    seq.rows().into_iter().map(|r| r.to_owned().insert_axis(Axis(0))).collect()
}

/// Generates `K` raw transition poses from the end of `source` into the
/// window `target` (both raw, at least `t` frames; the last `t` are used).
///
/// Each transition pose decodes an interpolated latent mean with a seed
/// frame interpolated at the same fraction between the two windows' last
/// frames.
pub fn action_transfer(vae: &NextPoseVae, source: &Mat, target: &Mat, cfg: &TransferConfig) -> Result<Mat> {
    vae.ensure_trained()?;
    cfg.validate()?;
    let t = vae.observed_len();
    let model = &vae.bundle.model;
    let dim = model.topology().pose_dim();
    for (name, m) in [("source", source), ("target", target)] {
        if m.ncols() != dim {
            return Err(Error::dim(if name == "source" { "transfer source" } else { "transfer target" }, dim, m.ncols()));
        }
    }
    let src = model.generator_inputs(&frames_of(&vae.bundle.normalize(&last_rows(source, t, "source")?)))?;
    let tgt = model.generator_inputs(&frames_of(&vae.bundle.normalize(&last_rows(target, t, "target")?)))?;
    let mut per_gen = Vec::with_capacity(model.generators.len());
    for ((gen, a), b) in model.generators.iter().zip(&src).zip(&tgt) {
        let z1: Vec<f64> = gen.encode(a)?.mean.iter().copied().collect();
        let z2: Vec<f64> = gen.encode(b)?.mean.iter().copied().collect();
        let seed1: Vec<f64> = a.last().expect("t >= 1").iter().copied().collect();
        let seed2: Vec<f64> = b.last().expect("t >= 1").iter().copied().collect();
        per_gen.push((gen, z1, z2, seed1, seed2));
    }
    let mut out = Vec::with_capacity(cfg.n_transition_frames);
    for lambda in cfg.lambdas() {
        let mut chains = Vec::with_capacity(per_gen.len());
        for (gen, z1, z2, seed1, seed2) in &per_gen {
            let z = interpolate_at(z1, z2, lambda, cfg.schedule)?;
            let seed = interpolate_at(seed1, seed2, lambda, Schedule::Linear)?;
            let z = Mat::from_shape_vec((1, z.len()), z).expect("row");
            let seed = Mat::from_shape_vec((1, seed.len()), seed).expect("row");
            chains.push(gen.decode(&z, &seed, 1)?);
        }
        let pose = match &model.aggregator {
            Some(agg) => agg.aggregate(&chains)?.remove(0),
            None => chains.remove(0).remove(0),
        };
        out.push(vae.bundle.denormalize(&pose));
    }
    let views: Vec<_> = out.iter().map(|m| m.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("equal widths"))
}

/// Transition frames plus the full spliced sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub transition: Mat,
    /// `source ‖ transition ‖ target[target_start..]`.
    pub spliced: Mat,
}

/// Transfers from the end of `source` into `target` at frame `target_start`:
/// the `t` frames before `target_start` form the target window and the
/// frames from `target_start` on are appended after the transition.
pub fn transfer_sequence(
    vae: &NextPoseVae,
    source: &Mat,
    target: &Mat,
    target_start: usize,
    cfg: &TransferConfig,
) -> Result<Transfer> {
    let t = vae.observed_len();
    if target_start < t || target_start > target.nrows() {
        return Err(Error::InvalidArgument(format!(
            "target start {target_start} must lie in [{t}, {}]",
            target.nrows()
        )));
    }
    let window = target.slice(s![target_start - t..target_start, ..]).to_owned();
    let transition = action_transfer(vae, source, &window, cfg)?;
    let spliced = splice(source, &transition, &target.slice(s![target_start.., ..]).to_owned())?;
    Ok(Transfer { transition, spliced })
}

/// `source ‖ transition ‖ target` along time.
pub fn splice(source: &Mat, transition: &Mat, target: &Mat) -> Result<Mat> {
    concatenate(Axis(0), &[source.view(), transition.view(), target.view()])
        .map_err(|e| Error::InvalidArgument(format!("splice: {e}")))
}

/// Squared Euclidean distance between consecutive frames.
pub fn frame_jumps(seq: &Mat) -> Vec<f64> {
    (1..seq.nrows())
        .map(|i| {
            seq.row(i)
                .iter()
                .zip(seq.row(i - 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub checkpoint: PathBuf,
    pub topology_hash: String,
}

/// On-disk registry: action label to checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryManifest {
    pub actions: BTreeMap<String, ManifestEntry>,
}

impl RegistryManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {}", path.display(), e.message())]))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Per-action sequence models sharing one topology.
#[derive(Debug, Clone, Default)]
pub struct ActionModelRegistry {
    models: BTreeMap<String, ModelBundle>,
    topology_hash: Option<String>,
}

impl ActionModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, action: impl Into<String>, bundle: ModelBundle) -> Result<()> {
        let hash = bundle.model.topology().hash();
        if let Some(h) = &self.topology_hash {
            if *h != hash {
                return Err(Error::TopologyMismatch {
                    expected: h.clone(),
                    found: hash,
                });
            }
        }
        if !bundle.model.is_composite() {
            return Err(Error::InvalidArgument("control needs per-chain generators".into()));
        }
        self.topology_hash = Some(hash);
        self.models.insert(action.into(), bundle);
        Ok(())
    }

    pub fn get(&self, action: &str) -> Result<&ModelBundle> {
        self.models.get(action).ok_or_else(|| Error::UnknownAction(action.to_string()))
    }

    pub fn actions(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn topology_hash(&self) -> Option<&str> {
        self.topology_hash.as_deref()
    }

    /// Loads every checkpoint in the manifest, checking recorded hashes.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = RegistryManifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut reg = Self::new();
        for (action, entry) in manifest.actions {
            let path = base.join(&entry.checkpoint);
            let bundle = ModelBundle::load(&path)?;
            let found = bundle.model.topology().hash();
            if found != entry.topology_hash {
                return Err(Error::TopologyMismatch {
                    expected: entry.topology_hash,
                    found,
                });
            }
            reg.insert(action, bundle)?;
        }
        Ok(reg)
    }
}

/// Trains one sequence model per action. All models share statistics
/// fitted on every training-subject sequence so their chains are
/// interchangeable. With `dir`, each model goes to `dir/<action>/` and the
/// manifest to `dir/registry.toml`.
pub fn train_action_models(
    topology: &SkeletonTopology,
    exp: &Experiment,
    seqs: Vec<MotionSequence>,
    dir: Option<&Path>,
) -> Result<(ActionModelRegistry, RegistryManifest)> {
    let (train, _) = split_subjects(seqs.clone());
    let stats = NormalizationStats::fit(&train)?;
    let mut actions: Vec<String> = seqs.iter().filter_map(|s| s.action.clone()).collect();
    actions.sort();
    actions.dedup();
    if actions.is_empty() {
        return Err(Error::InvalidArgument("sequences carry no action labels".into()));
    }
    let mut registry = ActionModelRegistry::new();
    let mut manifest = RegistryManifest::default();
    for action in actions {
        let subset: Vec<MotionSequence> = seqs.iter().filter(|s| s.action.as_deref() == Some(&action)).cloned().collect();
        let data = prepare_data_with(subset, &exp.window, Some(stats.clone()))?;
        let sub = dir.map(|d| d.join(&action));
        let (bundle, _) = train_model(exp, topology, &data, sub.as_deref())?;
        manifest.actions.insert(
            action.clone(),
            ManifestEntry {
                checkpoint: PathBuf::from(&action).join("final.ckpt"),
                topology_hash: topology.hash(),
            },
        );
        registry.insert(action, bundle)?;
    }
    if let Some(d) = dir {
        manifest.write(&d.join("registry.toml"))?;
    }
    Ok((registry, manifest))
}

/// Result of [`fine_grained_control`], in normalized model space except `pose`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    /// The base model's own chain predictions, `T x d_j` each.
    pub base_chains: Vec<Mat>,
    /// Chains fed to the aggregator after substitution.
    pub mixed_chains: Vec<Mat>,
    /// Raw `T x D` pose sequence.
    pub pose: Mat,
}

fn stack(frames: &[Mat]) -> Mat {
    let views: Vec<_> = frames.iter().map(|m| m.view()).collect();
    concatenate(Axis(0), &views).expect("equal widths")
}

fn noise_mats(noise: &[Vec<f64>], latent: usize) -> Result<Vec<Mat>> {
    if noise.len() != NUM_CHAINS {
        return Err(Error::dim("control noise", NUM_CHAINS, noise.len()));
    }
    noise
        .iter()
        .map(|n| {
            if n.len() != latent {
                return Err(Error::dim("control noise", latent, n.len()));
            }
            Ok(Mat::from_shape_vec((1, n.len()), n.clone()).expect("row"))
        })
        .collect()
}

/// Runs the base action's model, replaces the chains named in `overrides`
/// with the corresponding chains predicted by the donor action's model on
/// the same observation and noise, and aggregates with the base aggregator.
///
/// A donor with different normalization statistics has its chain mapped
/// through raw space into the base model's normalized space.
pub fn fine_grained_control(
    registry: &ActionModelRegistry,
    observed: &Mat,
    base_action: &str,
    overrides: &BTreeMap<ChainId, String>,
    noise: &[Vec<f64>],
) -> Result<ControlOutput> {
    let base = registry.get(base_action)?;
    let model = &base.model;
    let t = base.window.observed_len;
    let observed = last_rows(observed, t, "observation")?;
    let noise = noise_mats(noise, model.latent_dim())?;
    let run = |bundle: &ModelBundle| -> Result<Vec<Vec<Mat>>> {
        bundle
            .model
            .chain_predictions(&frames_of(&bundle.normalize(&observed)), &noise)
    };
    let base_chains = run(base)?;
    let mut mixed = base_chains.clone();
    let mut donors: BTreeMap<&str, Vec<Vec<Mat>>> = BTreeMap::new();
    for (chain, action) in overrides {
        let donor = registry.get(action)?;
        if donor.model.predict_len() != model.predict_len() {
            return Err(Error::dim("donor horizon", model.predict_len(), donor.model.predict_len()));
        }
        if !donors.contains_key(action.as_str()) {
            donors.insert(action, run(donor)?);
        }
        let j = chain.index();
        let predicted = &donors[action.as_str()][j];
        mixed[j] = if donor.normalization == base.normalization {
            predicted.clone()
        } else {
            let cols = model.topology().chain_columns(*chain);
            predicted
                .iter()
                .map(|f| remap_chain(f, cols, donor, base))
                .collect()
        };
    }
    let agg = model.aggregator.as_ref().expect("registry holds composite models");
    let pose = stack(&agg.aggregate(&mixed)?);
    Ok(ControlOutput {
        base_chains: base_chains.iter().map(|c| stack(c)).collect(),
        mixed_chains: mixed.iter().map(|c| stack(c)).collect(),
        pose: base.denormalize(&pose),
    })
}

fn remap_chain(frame: &Mat, cols: &[usize], from: &ModelBundle, to: &ModelBundle) -> Mat {
    let d = from.model.topology().pose_dim();
    let mut full = Mat::zeros((frame.nrows(), d));
    for (k, &c) in cols.iter().enumerate() {
        full.column_mut(c).assign(&frame.column(k));
    }
    let moved = to.normalize(&from.denormalize(&full));
    Mat::from_shape_fn(frame.dim(), |(r, k)| moved[[r, cols[k]]])
}

/// Parses `chain=action` overrides; chains are 1-based ids or labels.
pub fn parse_override(text: &str) -> Result<(ChainId, String)> {
    let (chain, action) = text
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override `{text}` is not chain=action")))?;
    let chain = chain.trim();
    let id = match chain.parse::<u8>() {
        Ok(n) => ChainId::new(n)?,
        Err(_) => ChainId::all()
            .find(|c| c.label() == chain)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown chain `{chain}`")))?,
    };
    let action = action.trim();
    if action.is_empty() {
        return Err(Error::InvalidArgument(format!("override `{text}` has no action")));
    }
    Ok((id, action.to_string()))
}
