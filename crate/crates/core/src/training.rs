//! Adversarial training: interleaved critic and generator updates with
//! seeded sampling, a line-delimited loss log and resumable checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::autodiff::{Eval, Graph, Mat, Tape};
use crate::checkpoint::{Container, ModelBundle};
use crate::data::{split_subjects, Batch, MotionSequence, NormalizationStats, WindowConfig, WindowSet};
use crate::error::{Error, Result};
use crate::losses::{
    consistency_node, flatten_frames, ground_truth_node, kl_node, stability_node, weighted_sum_node, wgan_node,
    LossRecord, LossWeights,
};
use crate::model::AmGanModel;
use crate::nn::Critic;
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Critic updates per generator update.
    pub n_critic: usize,
    /// Number of generator updates.
    pub max_steps: u64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Generator steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub update_local_critics: bool,
    pub update_global_critic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 16,
            n_critic: 5,
            max_steps: 5000,
            seed: 0,
            weights: LossWeights::default(),
            checkpoint_interval: 1000,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_epsilon: 1e-8,
            update_local_critics: true,
            update_global_critic: true,
        }
    }
}

impl TrainConfig {
    /// Supervised next-pose training: ground truth and KL only, no critics.
    pub fn next_pose(self) -> Self {
        Self {
            weights: LossWeights {
                alpha: 0.0,
                beta: 0.0,
                lambda: 0.0,
                mu: 0.0,
                kl_coef: 1e-3,
                ..self.weights
            },
            update_local_critics: false,
            update_global_critic: false,
            ..self
        }
    }

    /// Offending fields as `(key, message)` pairs, keys relative to the section.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut positive = |k: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                out.push((k.to_string(), format!("must be positive, got {v}")));
            }
        };
        positive("batch_size", self.batch_size as f64);
        positive("n_critic", self.n_critic as f64);
        positive("adam_epsilon", self.adam_epsilon);
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            out.push(("learning_rate".into(), format!("must be non-negative, got {}", self.learning_rate)));
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                out.push((k.into(), format!("must lie in [0, 1), got {v}")));
            }
        }
        for (k, m) in self.weights.problems() {
            out.push((format!("weights.{k}"), m));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.into_iter().map(|(k, m)| format!("train.{k} {m}")).collect()))
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Losses of the last critic update of this step.
    pub critic: LossRecord,
    pub generator: LossRecord,
    pub local_critic_updates: u64,
    pub global_critic_updates: u64,
}

/// Training data after normalization, with the held-out test sequences.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: WindowSet,
    /// Raw (unnormalized) test-subject sequences.
    pub test: Vec<MotionSequence>,
    pub normalization: NormalizationStats,
}

/// Splits by subject, fits statistics on the training subjects and cuts
/// normalized training windows.
pub fn prepare_data(seqs: Vec<MotionSequence>, window: &WindowConfig) -> Result<PreparedData> {
    prepare_data_with(seqs, window, None)
}

/// [`prepare_data`] with optional fixed statistics, so models trained on
/// different subsets share one normalized space.
pub fn prepare_data_with(
    seqs: Vec<MotionSequence>,
    window: &WindowConfig,
    stats: Option<NormalizationStats>,
) -> Result<PreparedData> {
    let (train, test) = split_subjects(seqs);
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training-subject sequences".into()));
    }
    let normalization = match stats {
        Some(s) => s,
        None => NormalizationStats::fit(&train)?,
    };
    let normalized: Vec<_> = train.iter().map(|s| normalization.apply_seq(s)).collect();
    let windows = WindowSet::from_sequences(&normalized, window)?;
    if windows.is_empty() {
        return Err(Error::InvalidArgument("training data yields no windows".into()));
    }
    Ok(PreparedData {
        train: windows,
        test,
        normalization,
    })
}

pub struct Trainer {
    pub model: AmGanModel,
    pub config: TrainConfig,
    pub normalization: Option<NormalizationStats>,
    pub window: WindowConfig,
    pub step: u64,
    pub local_critic_updates: u64,
    pub global_critic_updates: u64,
    rng: ChaCha8Rng,
    generator_opt: Adam,
    local_opts: Vec<Adam>,
    global_opt: Adam,
}

fn stack_rows(frames: &[Mat]) -> Mat {
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("frames share a width")
}

fn mean_score(critic: &Critic, x: &Mat) -> f64 {
    let mut g = Eval::new();
    let xn = g.constant(x.clone());
    let s = critic.score_flat(&mut g, &xn);
    s.mean().unwrap_or(0.0)
}

fn all_finite(grads: &[Mat]) -> bool {
    grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
}

/// One critic update maximizing `wgan - gp_coef * penalty`; returns both terms.
fn update_critic(
    critic: &mut Critic,
    opt: &mut Adam,
    real: &Mat,
    fake: &Mat,
    eps: &[f64],
    gp_coef: f64,
    step: u64,
    label: &str,
) -> Result<(f64, f64)> {
    let (wgan, mut grads) = {
        let mut t = Tape::new();
        let r = t.constant(real.clone());
        let f = t.constant(fake.clone());
        let w = wgan_node(&mut t, critic, &r, &f);
        let neg = t.affine(&w, -1.0, 0.0);
        let g = t.backward(neg);
        let grads: Vec<Mat> = critic.params().iter().map(|p| g.get_or_zero(p)).collect();
        (t.scalar(&w), grads)
    };
    let penalty = critic.gradient_penalty(real, fake, eps);
    for (g, pg) in grads.iter_mut().zip(&penalty.grads) {
        g.scaled_add(gp_coef, pg);
    }
    if !wgan.is_finite() || !penalty.value.is_finite() || !all_finite(&grads) {
        return Err(Error::NonFinite {
            step,
            detail: format!("{label} critic: wgan {wgan}, penalty {}", penalty.value),
        });
    }
    opt.step(critic.params_mut(), &grads);
    Ok((wgan, penalty.value))
}

impl Trainer {
    pub fn new(model: AmGanModel, config: TrainConfig, window: WindowConfig) -> Result<Self> {
        config.validate()?;
        if window.predict_len != model.predict_len() {
            return Err(Error::dim("window predict_len", model.predict_len(), window.predict_len));
        }
        let adam = config.adam();
        let generator_opt = Adam::new(adam, &model.generator_params());
        let local_opts = model.local_critics.iter().map(|c| Adam::new(adam, &c.params())).collect();
        let global_opt = Adam::new(adam, &model.global_critic.params());
        // Separate stream from the one used for initialization.
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5DEE_CE66_D1CE_5EED);
        Ok(Self {
            model,
            config,
            normalization: None,
            window,
            step: 0,
            local_critic_updates: 0,
            global_critic_updates: 0,
            rng,
            generator_opt,
            local_opts,
            global_opt,
        })
    }

    fn noise(&mut self, rows: usize) -> Vec<Mat> {
        let l = self.model.latent_dim();
        (0..self.model.generators.len())
            .map(|_| Mat::from_shape_simple_fn((rows, l), || self.rng.sample(StandardNormal)))
            .collect()
    }

    fn uniform(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.random::<f64>()).collect()
    }

    pub fn sample_batch(&mut self, data: &WindowSet) -> Batch {
        let idx: Vec<usize> = (0..self.config.batch_size)
            .map(|_| self.rng.random_range(0..data.len()))
            .collect();
        data.batch(&idx)
    }

    fn critics_active(&self) -> bool {
        (self.config.update_local_critics && !self.model.local_critics.is_empty()) || self.config.update_global_critic
    }

    /// Generated chain and pose futures for a batch (values only).
    fn generate(&self, batch: &Batch, noise: &[Mat]) -> Result<(Vec<Vec<Mat>>, Vec<Mat>)> {
        let mut g = Eval::new();
        let out = self.model.forward(&mut g, &batch.observed, noise)?;
        let chains = out
            .chains
            .into_iter()
            .map(|c| c.into_iter().map(|n| (*n).clone()).collect())
            .collect();
        let pose = out.pose.into_iter().map(|n| (*n).clone()).collect();
        Ok((chains, pose))
    }

    fn critic_update(&mut self, batch: &Batch, fake_chains: &[Vec<Mat>], fake_pose: &[Mat]) -> Result<LossRecord> {
        let w = self.config.weights;
        let rows = batch.size();
        let mut rec = LossRecord::default();
        if self.config.update_local_critics && !self.model.local_critics.is_empty() {
            let real_chains = self.model.generator_inputs(&batch.future)?;
            for j in 0..self.model.local_critics.len() {
                let real = flatten_frames(&real_chains[j]);
                let fake = flatten_frames(&fake_chains[j]);
                let eps = self.uniform(rows);
                let (wgan, gp) = update_critic(
                    &mut self.model.local_critics[j],
                    &mut self.local_opts[j],
                    &real,
                    &fake,
                    &eps,
                    w.gp_coef,
                    self.step + 1,
                    &format!("local {}", j + 1),
                )?;
                rec.chain_wgan.push(wgan);
                rec.gp_local.push(gp);
            }
            self.local_critic_updates += 1;
        }
        if self.config.update_global_critic {
            let real = flatten_frames(&batch.future);
            let fake = flatten_frames(fake_pose);
            let eps = self.uniform(rows);
            let (wgan, gp) = update_critic(
                &mut self.model.global_critic,
                &mut self.global_opt,
                &real,
                &fake,
                &eps,
                w.gp_coef,
                self.step + 1,
                "global",
            )?;
            rec.pose_wgan = wgan;
            rec.gp_global = gp;
            self.global_critic_updates += 1;
        }
        Ok(rec)
    }

    /// One update of every enabled critic on `batch`; generators untouched.
    pub fn critic_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        let noise = self.noise(batch.size());
        let (chains, pose) = self.generate(batch, &noise)?;
        self.critic_update(batch, &chains, &pose)
    }

    /// One update of the generators and aggregator; critics untouched.
    /// Terms whose weight is zero are not evaluated and read 0.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        let noise = self.noise(batch.size());
        let w = self.config.weights;
        let step = self.step + 1;
        let (rec, grads) = {
            let model = &self.model;
            let mut t = Tape::new();
            let out = model.forward(&mut t, &batch.observed, &noise)?;
            let mut rec = LossRecord::default();
            let mut terms = Vec::new();

            if model.is_composite() {
                let real_chains = model.generator_inputs(&batch.future)?;
                let adversarial = w.alpha > 0.0 || w.beta > 0.0;
                let mut wgans = Vec::new();
                let mut gts = Vec::new();
                for (j, fake) in out.chains.iter().enumerate() {
                    if adversarial {
                        let critic = &model.local_critics[j];
                        let real_mean = mean_score(critic, &flatten_frames(&real_chains[j]));
                        let flat = t.concat_cols(fake);
                        let scores = critic.score_flat(&mut t, &flat);
                        let fake_mean = t.mean(&scores);
                        wgans.push(t.affine(&fake_mean, -1.0, real_mean));
                    } else {
                        wgans.push(t.constant(Mat::zeros((1, 1))));
                    }
                    let pred = t.concat_rows(fake);
                    let truth = t.constant(stack_rows(&real_chains[j]));
                    gts.push(ground_truth_node(&mut t, &pred, &truth));
                }
                let stability = stability_node(&mut t, &wgans);
                rec.stability = t.scalar(&stability);
                for (cw, gt) in wgans.iter().zip(&gts) {
                    let local = weighted_sum_node(
                        &mut t,
                        &[(w.alpha, cw.clone()), (w.beta, stability.clone()), (w.gamma, gt.clone())],
                    );
                    rec.chain_wgan.push(t.scalar(cw));
                    rec.ground_truth.push(t.scalar(gt));
                    rec.local.push(t.scalar(&local));
                    terms.push((1.0, local));
                }
            }

            let pose_wgan = if w.lambda > 0.0 {
                let real_mean = mean_score(&model.global_critic, &flatten_frames(&batch.future));
                let flat = t.concat_cols(&out.pose);
                let scores = model.global_critic.score_flat(&mut t, &flat);
                let fake_mean = t.mean(&scores);
                t.affine(&fake_mean, -1.0, real_mean)
            } else {
                t.constant(Mat::zeros((1, 1)))
            };
            let last = t.constant(batch.last_observed().clone());
            let consistency = consistency_node(&mut t, &out.pose, &last);
            let pred = t.concat_rows(&out.pose);
            let truth = t.constant(stack_rows(&batch.future));
            let gt = ground_truth_node(&mut t, &pred, &truth);
            let global = weighted_sum_node(
                &mut t,
                &[(w.lambda, pose_wgan.clone()), (w.mu, consistency.clone()), (w.eta, gt.clone())],
            );
            rec.pose_wgan = t.scalar(&pose_wgan);
            rec.consistency = t.scalar(&consistency);
            rec.pose_ground_truth = t.scalar(&gt);
            rec.global = t.scalar(&global);
            terms.push((1.0, global));

            let kls: Vec<_> = out.codes.iter().map(|(m, lv)| kl_node(&mut t, m, lv)).collect();
            let kl_row = t.concat_cols(&kls);
            let kl = t.sum(&kl_row);
            rec.kl = t.scalar(&kl);
            if w.kl_coef > 0.0 {
                terms.push((w.kl_coef, kl));
            }

            let total = weighted_sum_node(&mut t, &terms);
            rec.total = t.scalar(&total);
            let g = t.backward(total);
            let grads: Vec<Mat> = model.generator_params().iter().map(|p| g.get_or_zero(p)).collect();
            (rec, grads)
        };
        if !rec.is_finite() || !all_finite(&grads) {
            return Err(Error::NonFinite {
                step,
                detail: format!("generator losses {}", serde_json::to_string(&rec).unwrap_or_default()),
            });
        }
        self.generator_opt.step(self.model.generator_params_mut(), &grads);
        Ok(rec)
    }

    /// `n_critic` critic updates on fresh batches, then one generator update.
    pub fn train_step(&mut self, data: &WindowSet) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let mut critic = LossRecord::default();
        if self.critics_active() {
            let n = self.config.n_critic;
            let b = self.config.batch_size;
            let batches: Vec<Batch> = (0..n).map(|_| self.sample_batch(data)).collect();
            // The generators are fixed during the critic phase, so all fakes
            // come from one batched forward pass.
            let joined = Batch {
                observed: (0..batches[0].observed.len())
                    .map(|k| stack_rows(&batches.iter().map(|x| x.observed[k].clone()).collect::<Vec<_>>()))
                    .collect(),
                future: Vec::new(),
            };
            let noise = self.noise(n * b);
            let (chains, pose) = self.generate(&joined, &noise)?;
            for (i, batch) in batches.iter().enumerate() {
                let cut = |f: &Mat| f.slice(ndarray::s![i * b..(i + 1) * b, ..]).to_owned();
                let fake_chains: Vec<Vec<Mat>> = chains.iter().map(|c| c.iter().map(cut).collect()).collect();
                let fake_pose: Vec<Mat> = pose.iter().map(cut).collect();
                critic = self.critic_update(batch, &fake_chains, &fake_pose)?;
            }
        }
        let batch = self.sample_batch(data);
        let generator = self.generator_step(&batch)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            critic,
            generator,
            local_critic_updates: self.local_critic_updates,
            global_critic_updates: self.global_critic_updates,
        })
    }

    pub fn bundle(&self) -> ModelBundle {
        ModelBundle {
            model: self.model.clone(),
            normalization: self.normalization.clone(),
            window: self.window,
        }
    }

    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(&(&self.config, &self.model.config, &self.window)).unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(json!({
            "kind": "training",
            "step": self.step,
            "config_hash": self.config_hash(),
            "train_config": self.config,
            "rng": self.rng,
            "local_critic_updates": self.local_critic_updates,
            "global_critic_updates": self.global_critic_updates,
        }));
        self.bundle().store(&mut c)?;
        let groups = std::iter::once(("generator", &self.generator_opt, self.model.generator_params()))
            .chain(
                self.local_opts
                    .iter()
                    .zip(&self.model.local_critics)
                    .map(|(o, c)| ("local", o, c.params())),
            )
            .chain(std::iter::once(("global", &self.global_opt, self.model.global_critic.params())));
        let mut steps = serde_json::Map::new();
        for (group, opt, params) in groups {
            for ((p, m), v) in params.iter().zip(&opt.m).zip(&opt.v) {
                c.push(format!("adam.m.{}", p.name), m.clone());
                c.push(format!("adam.v.{}", p.name), v.clone());
            }
            steps.insert(params[0].name.clone(), json!(opt.t));
            let _ = group;
        }
        c.header["adam_steps"] = serde_json::Value::Object(steps);
        c.write(path)
    }

    /// Restores a trainer saved by [`Trainer::save`], ready to continue.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if c.header.get("kind").and_then(|k| k.as_str()) != Some("training") {
            return Err(bad("not a training checkpoint".into()));
        }
        let bundle = ModelBundle::restore(&c, path)?;
        let field = |k: &str| c.header.get(k).cloned().ok_or_else(|| bad(format!("missing {k}")));
        let config: TrainConfig = serde_json::from_value(field("train_config")?).map_err(|e| bad(e.to_string()))?;
        let mut t = Trainer::new(bundle.model, config, bundle.window)?;
        t.normalization = bundle.normalization;
        t.step = field("step")?.as_u64().ok_or_else(|| bad("bad step".into()))?;
        t.local_critic_updates = field("local_critic_updates")?.as_u64().unwrap_or(0);
        t.global_critic_updates = field("global_critic_updates")?.as_u64().unwrap_or(0);
        t.rng = serde_json::from_value(field("rng")?).map_err(|e| bad(e.to_string()))?;
        let steps = field("adam_steps")?;
        let restore = |opt: &mut Adam, params: Vec<&crate::autodiff::Param>| -> Result<()> {
            opt.t = steps.get(&params[0].name).and_then(|v| v.as_u64()).unwrap_or(0);
            for (i, p) in params.iter().enumerate() {
                let m = c.get(&format!("adam.m.{}", p.name));
                let v = c.get(&format!("adam.v.{}", p.name));
                match (m, v) {
                    (Some(m), Some(v)) if m.dim() == p.value.dim() && v.dim() == p.value.dim() => {
                        opt.m[i] = m.clone();
                        opt.v[i] = v.clone();
                    }
                    _ => return Err(bad(format!("missing optimizer state for {}", p.name))),
                }
            }
            Ok(())
        };
        restore(&mut t.generator_opt, t.model.generator_params())?;
        for (opt, critic) in t.local_opts.iter_mut().zip(&t.model.local_critics) {
            restore(opt, critic.params())?;
        }
        restore(&mut t.global_opt, t.model.global_critic.params())?;
        Ok(t)
    }

    /// Trains until `config.max_steps`. With `dir`, appends to
    /// `dir/losses.jsonl`, writes `dir/checkpoints/step_NNNNNN.ckpt` every
    /// `checkpoint_interval` steps and `dir/final.ckpt` at the end. On a
    /// non-finite loss the run halts and earlier checkpoints are kept.
    pub fn run(&mut self, data: &WindowSet, dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let mut log = match dir {
            Some(d) => {
                fs::create_dir_all(d.join("checkpoints"))
                    .map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
                let path = d.join("losses.jsonl");
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
                Some((path, file))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.step < self.config.max_steps {
            let record = match self.train_step(data) {
                Ok(r) => r,
                Err(e) => {
                    if let Some((path, file)) = &mut log {
                        let line = json!({ "step": self.step + 1, "error": e.to_string() });
                        writeln!(file, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
                    }
                    return Err(e);
                }
            };
            if let Some((path, file)) = &mut log {
                let line = serde_json::to_string(&record)?;
                writeln!(file, "{line}")
                    .map_err(|e| Error::io(format!("step {}: writing {}", record.step, path.display()), e))?;
            }
            records.push(record);
            if let Some(d) = dir {
                let interval = self.config.checkpoint_interval;
                if interval > 0 && self.step % interval == 0 {
                    self.save(&checkpoint_path(d, self.step))?;
                }
            }
        }
        if let Some(d) = dir {
            self.save(&d.join("final.ckpt"))?;
        }
        Ok(records)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

/// Reads a loss log written by [`Trainer::run`], skipping diagnostic lines.
pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Ok(r) = serde_json::from_str::<StepRecord>(line) {
            out.push(r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Param;
    use crate::kinematics::SkeletonTopology;
    use crate::model::ModelConfig;

    fn setup(seed: u64, horizon: usize) -> (Trainer, WindowSet) {
        let topo = SkeletonTopology::default_h36m();
        let seqs = crate::data::synthetic_testbed(&topo, 60, 1).unwrap();
        let window = WindowConfig {
            observed_len: 4,
            predict_len: horizon,
            stride: 5,
        };
        let data = prepare_data(seqs, &window).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            predict_len: horizon,
            ..ModelConfig::small(8, 4)
        };
        let model = AmGanModel::new(topo, cfg, &mut rng).unwrap();
        let config = TrainConfig {
            batch_size: 4,
            n_critic: 2,
            max_steps: 3,
            seed,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, config, window).unwrap();
        t.normalization = Some(data.normalization);
        (t, data.train)
    }

    fn snapshot(params: Vec<&Param>) -> Vec<Mat> {
        params.into_iter().map(|p| p.value.clone()).collect()
    }

    #[test]
    fn critic_step_leaves_generators() {
        let (mut t, data) = setup(1, 3);
        let batch = t.sample_batch(&data);
        let gens = snapshot(t.model.generator_params());
        let critics = snapshot(t.model.critic_params());
        let rec = t.critic_step(&batch).unwrap();
        assert_eq!(rec.chain_wgan.len(), 5);
        assert_eq!(snapshot(t.model.generator_params()), gens);
        assert_ne!(snapshot(t.model.critic_params()), critics);
    }

    #[test]
    fn generator_step_leaves_critics() {
        let (mut t, data) = setup(1, 3);
        let batch = t.sample_batch(&data);
        let gens = snapshot(t.model.generator_params());
        let critics = snapshot(t.model.critic_params());
        let rec = t.generator_step(&batch).unwrap();
        assert!(rec.is_finite());
        assert_eq!(snapshot(t.model.critic_params()), critics);
        assert_ne!(snapshot(t.model.generator_params()), gens);
    }

    #[test]
    fn frozen_batch_ground_truth_descends() {
        let (mut t, data) = setup(2, 3);
        t.config.batch_size = 16;
        let batch = t.sample_batch(&data);
        let gt: Vec<f64> = (0..150)
            .map(|_| t.generator_step(&batch).unwrap().pose_ground_truth)
            .collect();
        let means: Vec<f64> = gt.chunks(50).map(|c| c.iter().sum::<f64>() / 50.0).collect();
        assert!(means[1] < means[0] && means[2] < means[1], "{means:?}");
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut t, data) = setup(1, 3);
        t.config.learning_rate = 0.0;
        let mut t = Trainer::new(t.model.clone(), t.config.clone(), t.window).unwrap();
        let all = snapshot(t.model.params());
        t.train_step(&data).unwrap();
        assert_eq!(snapshot(t.model.params()), all);
    }

    #[test]
    fn same_seed_same_losses() {
        let (mut a, data) = setup(3, 2);
        let (mut b, _) = setup(3, 2);
        let ra = a.run(&data, None).unwrap();
        let rb = b.run(&data, None).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let (mut t, data) = setup(2, 2);
        t.config.max_steps = 0;
        let init = t.bundle();
        assert!(t.run(&data, Some(dir.path())).unwrap().is_empty());
        assert_eq!(ModelBundle::load(&dir.path().join("final.ckpt")).unwrap(), init);
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let dir = tempfile::tempdir().unwrap();
        let (mut full, data) = setup(4, 2);
        full.config.max_steps = 4;
        let unbroken = full.run(&data, None).unwrap();

        let (mut first, _) = setup(4, 2);
        first.config.max_steps = 2;
        first.config.checkpoint_interval = 2;
        first.run(&data, Some(dir.path())).unwrap();
        let mut resumed = Trainer::load(&checkpoint_path(dir.path(), 2)).unwrap();
        resumed.config.max_steps = 4;
        let rest = resumed.run(&data, None).unwrap();
        assert_eq!(rest, unbroken[2..].to_vec());
    }

    #[test]
    fn non_finite_halts_and_keeps_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (mut t, data) = setup(5, 2);
        t.config.checkpoint_interval = 1;
        t.config.max_steps = 1;
        t.run(&data, Some(dir.path())).unwrap();
        fs::remove_file(dir.path().join("final.ckpt")).unwrap();
        t.model.generators[0].output_head.bias.value.fill(f64::NAN);
        t.config.max_steps = 3;
        let err = t.run(&data, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 2, .. }), "{err}");
        assert!(checkpoint_path(dir.path(), 1).exists());
        assert!(!dir.path().join("final.ckpt").exists());
        let log = fs::read_to_string(dir.path().join("losses.jsonl")).unwrap();
        assert!(log.lines().last().unwrap().contains("error"));
        assert_eq!(read_loss_log(&dir.path().join("losses.jsonl")).unwrap().len(), 1);
    }

    #[test]
    fn disabled_local_critics_are_not_updated() {
        let (mut t, data) = setup(6, 2);
        t.config.update_local_critics = false;
        let locals: Vec<Mat> = t.model.local_critics.iter().flat_map(|c| snapshot(c.params())).collect();
        let rec = t.train_step(&data).unwrap();
        assert_eq!(rec.local_critic_updates, 0);
        assert_eq!(rec.global_critic_updates, 2);
        let after: Vec<Mat> = t.model.local_critics.iter().flat_map(|c| snapshot(c.params())).collect();
        assert_eq!(after, locals);
    }

    #[test]
    fn config_problems_are_named() {
        let c = TrainConfig {
            learning_rate: -1.0,
            n_critic: 0,
            ..TrainConfig::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("train.learning_rate") && msg.contains("train.n_critic"), "{msg}");
    }
}
