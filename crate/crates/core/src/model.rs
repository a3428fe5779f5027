//! Per-chain recurrent VAE generators, the aggregation layer and the critics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, Graph, Mat, Param, Unary};
use crate::error::{Error, Result};
use crate::kinematics::{SkeletonTopology, NUM_CHAINS};
use crate::nn::{Activation, Critic, GruCell, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Five chain generators joined by the aggregation layer.
    Composite,
    /// One whole-pose generator judged by the global critic only.
    SingleGan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub latent_dim: usize,
    pub aggregator_hidden: usize,
    pub local_critic_width: usize,
    pub global_critic_width: usize,
    pub critic_activation: Activation,
    pub predict_len: usize,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: 1024,
            decoder_hidden: 1024,
            latent_dim: 128,
            aggregator_hidden: 1024,
            local_critic_width: 512,
            global_critic_width: 1024,
            critic_activation: Activation::LeakyRelu { slope: 0.2 },
            predict_len: 25,
            architecture: Architecture::Composite,
        }
    }
}

impl ModelConfig {
    /// Every width set to `hidden`, for CPU-sized experiments.
    pub fn small(hidden: usize, latent_dim: usize) -> Self {
        Self {
            encoder_hidden: hidden,
            decoder_hidden: hidden,
            latent_dim,
            aggregator_hidden: hidden,
            local_critic_width: hidden,
            global_critic_width: hidden,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("encoder_hidden", self.encoder_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("latent_dim", self.latent_dim),
            ("aggregator_hidden", self.aggregator_hidden),
            ("local_critic_width", self.local_critic_width),
            ("global_critic_width", self.global_critic_width),
            ("predict_len", self.predict_len),
        ];
        let bad: Vec<String> = sizes
            .iter()
            .filter(|(_, v)| *v == 0)
            .map(|(k, _)| format!("model.{k} must be >= 1"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Posterior parameters and the sample drawn from them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mean: Mat,
    pub logvar: Mat,
    pub sample: Mat,
}

/// `mean + exp(logvar / 2) * noise`.
pub fn reparameterize(code: &LatentCode, noise: &Mat) -> Result<Mat> {
    if noise.dim() != code.mean.dim() {
        return Err(Error::dim("reparameterize", code.mean.len(), noise.len()));
    }
    let std = code.logvar.mapv(|v| (0.5 * v).exp());
    Ok(&code.mean + &(&std * noise))
}

/// Recurrent VAE for one chain: GRU encoder to a Gaussian latent, GRU
/// decoder that rolls out residual frames autoregressively.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub encoder: GruCell,
    pub mean_head: Linear,
    pub logvar_head: Linear,
    pub latent_to_hidden: Linear,
    pub decoder: GruCell,
    pub output_head: Linear,
}

impl Generator {
    /// The residual output head starts at zero, so an untrained generator
    /// repeats its seed frame instead of drifting.
    pub fn new<R: Rng>(name: &str, dim: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            encoder: GruCell::new(&format!("{name}.encoder"), dim, cfg.encoder_hidden, rng),
            mean_head: Linear::new(&format!("{name}.mean_head"), cfg.encoder_hidden, cfg.latent_dim, rng),
            logvar_head: Linear::new(&format!("{name}.logvar_head"), cfg.encoder_hidden, cfg.latent_dim, rng),
            latent_to_hidden: Linear::new(&format!("{name}.latent_to_hidden"), cfg.latent_dim, cfg.decoder_hidden, rng),
            decoder: GruCell::new(&format!("{name}.decoder"), dim, cfg.decoder_hidden, rng),
            output_head: Linear {
                weight: Param::zeros(format!("{name}.output_head.weight"), cfg.decoder_hidden, dim),
                bias: Param::zeros(format!("{name}.output_head.bias"), 1, dim),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.output_head.output_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean_head.output_dim()
    }

    pub fn encode_nodes<'p, G: Graph<'p>>(
        &'p self,
        g: &mut G,
        observed: &[G::Node],
    ) -> (G::Node, G::Node) {
        let rows = g.value(&observed[0]).nrows();
        let cell = self.encoder.bind(g);
        let stacked = g.concat_rows(observed);
        let projected = cell.project(g, &stacked);
        let mut h = g.constant(Mat::zeros((rows, self.encoder.hidden_dim())));
        for k in 0..observed.len() {
            let p = g.slice_rows(&projected, k * rows, rows);
            h = cell.step(g, &p, &h);
        }
        let mean = self.mean_head.forward(g, &h);
        let logvar = self.logvar_head.forward(g, &h);
        (mean, logvar)
    }

    pub fn sample_nodes<'p, G: Graph<'p>>(
        g: &mut G,
        mean: &G::Node,
        logvar: &G::Node,
        noise: &Mat,
    ) -> G::Node {
        let half = g.affine(logvar, 0.5, 0.0);
        let std = g.unary(&half, Unary::Exp);
        let eps = g.constant(noise.clone());
        let spread = g.mul(&std, &eps);
        g.add(mean, &spread)
    }

    pub fn decode_nodes<'p, G: Graph<'p>>(
        &'p self,
        g: &mut G,
        z: &G::Node,
        seed: &G::Node,
        steps: usize,
    ) -> Vec<G::Node> {
        let mut h = self.latent_to_hidden.forward(g, z);
        let cell = self.decoder.bind(g);
        let mut prev = seed.clone();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let p = cell.project(g, &prev);
            h = cell.step(g, &p, &h);
            let delta = self.output_head.forward(g, &h);
            prev = g.add(&prev, &delta);
            out.push(prev.clone());
        }
        out
    }

    fn check_frames(&self, frames: &[Mat], context: &'static str) -> Result<()> {
        let Some(first) = frames.first() else {
            return Err(Error::InvalidArgument(format!("{context}: no frames")));
        };
        for f in frames {
            if f.ncols() != self.dim() {
                return Err(Error::dim(context, self.dim(), f.ncols()));
            }
            if f.nrows() != first.nrows() {
                return Err(Error::dim(context, first.nrows(), f.nrows()));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{context}: non-finite input")));
            }
        }
        Ok(())
    }

    /// Encodes time-major `rows x d` frames; `sample` is set to the mean.
    pub fn encode(&self, observed: &[Mat]) -> Result<LatentCode> {
        self.check_frames(observed, "encode")?;
        let mut g = Eval::new();
        let nodes: Vec<_> = observed.iter().map(|f| g.constant(f.clone())).collect();
        let (mean, logvar) = self.encode_nodes(&mut g, &nodes);
        Ok(LatentCode {
            mean: (*mean).clone(),
            logvar: (*logvar).clone(),
            sample: (*mean).clone(),
        })
    }

    pub fn decode(&self, z: &Mat, seed: &Mat, steps: usize) -> Result<Vec<Mat>> {
        if steps == 0 {
            return Err(Error::InvalidArgument("decode needs at least one step".into()));
        }
        if z.ncols() != self.latent_dim() {
            return Err(Error::dim("decode latent", self.latent_dim(), z.ncols()));
        }
        self.check_frames(std::slice::from_ref(seed), "decode seed")?;
        let mut g = Eval::new();
        let zn = g.constant(z.clone());
        let sn = g.constant(seed.clone());
        Ok(self
            .decode_nodes(&mut g, &zn, &sn, steps)
            .into_iter()
            .map(|n| (*n).clone())
            .collect())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.encoder.params();
        out.extend(self.mean_head.params());
        out.extend(self.logvar_head.params());
        out.extend(self.latent_to_hidden.params());
        out.extend(self.decoder.params());
        out.extend(self.output_head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.encoder.params_mut();
        out.extend(self.mean_head.params_mut());
        out.extend(self.logvar_head.params_mut());
        out.extend(self.latent_to_hidden.params_mut());
        out.extend(self.decoder.params_mut());
        out.extend(self.output_head.params_mut());
        out
    }
}

/// Frame-wise map from concatenated chain frames to the pose layout:
/// a linear path plus one tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    pub skip: Param,
    pub hidden: Linear,
    pub output: Linear,
}

impl Aggregator {
    /// `layout[k]` is the pose column of concatenated column `k`; the linear
    /// path starts as that permutation.
    pub fn new<R: Rng>(layout: &[usize], hidden: usize, rng: &mut R) -> Self {
        let n = layout.len();
        let mut skip = Mat::zeros((n, n));
        for (k, &c) in layout.iter().enumerate() {
            skip[[k, c]] = 1.0;
        }
        Self {
            skip: Param::new("aggregator.skip", skip),
            hidden: Linear::new("aggregator.hidden", n, hidden, rng),
            output: Linear::new("aggregator.output", hidden, n, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.skip.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.skip.value.ncols()
    }

    pub fn forward<'p, G: Graph<'p>>(&'p self, g: &mut G, x: &G::Node) -> G::Node {
        let skip = g.param(&self.skip);
        let linear = g.matmul(x, &skip);
        let a = self.hidden.forward(g, x);
        let h = g.unary(&a, Unary::Tanh);
        let nonlinear = self.output.forward(g, &h);
        g.add(&linear, &nonlinear)
    }

    /// Aggregates time-major chain predictions `chains[j][k]` frame by frame.
    pub fn aggregate_nodes<'p, G: Graph<'p>>(&'p self, g: &mut G, chains: &[Vec<G::Node>]) -> Vec<G::Node> {
        let steps = chains[0].len();
        let rows = g.value(&chains[0][0]).nrows();
        let per_frame: Vec<G::Node> = (0..steps)
            .map(|k| {
                let parts: Vec<G::Node> = chains.iter().map(|c| c[k].clone()).collect();
                g.concat_cols(&parts)
            })
            .collect();
        let stacked = g.concat_rows(&per_frame);
        let out = self.forward(g, &stacked);
        (0..steps).map(|k| g.slice_rows(&out, k * rows, rows)).collect()
    }

    pub fn aggregate(&self, chains: &[Vec<Mat>]) -> Result<Vec<Mat>> {
        let Some(first) = chains.first().and_then(|c| c.first()) else {
            return Err(Error::InvalidArgument("aggregate: no chain frames".into()));
        };
        let steps = chains[0].len();
        let width: usize = chains.iter().map(|c| c.first().map_or(0, Mat::ncols)).sum();
        if width != self.input_dim() {
            return Err(Error::dim("aggregate", self.input_dim(), width));
        }
        for c in chains {
            if c.len() != steps {
                return Err(Error::dim("aggregate frames", steps, c.len()));
            }
            if c.iter().any(|f| f.nrows() != first.nrows()) {
                return Err(Error::dim("aggregate rows", first.nrows(), c[0].nrows()));
            }
        }
        let mut g = Eval::new();
        let nodes: Vec<Vec<_>> = chains
            .iter()
            .map(|c| c.iter().map(|f| g.constant(f.clone())).collect())
            .collect();
        Ok(self
            .aggregate_nodes(&mut g, &nodes)
            .into_iter()
            .map(|n| (*n).clone())
            .collect())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.skip];
        out.extend(self.hidden.params());
        out.extend(self.output.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.skip];
        out.extend(self.hidden.params_mut());
        out.extend(self.output.params_mut());
        out
    }
}

/// Intermediate and final outputs of one forward pass.
pub struct Forward<N> {
    /// `(mean, logvar)` per generator.
    pub codes: Vec<(N, N)>,
    /// `chains[j][k]`: generator `j`, predicted frame `k`.
    pub chains: Vec<Vec<N>>,
    pub pose: Vec<N>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmGanModel {
    pub config: ModelConfig,
    topology: SkeletonTopology,
    pub generators: Vec<Generator>,
    pub aggregator: Option<Aggregator>,
    pub local_critics: Vec<Critic>,
    pub global_critic: Critic,
}

impl AmGanModel {
    pub fn new<R: Rng>(topology: SkeletonTopology, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let horizon = config.predict_len;
        let act = config.critic_activation;
        let (generators, aggregator, local_critics) = match config.architecture {
            Architecture::Composite => {
                let dims = topology.chain_dims();
                let gens = (0..NUM_CHAINS)
                    .map(|j| Generator::new(&format!("gen{}", j + 1), dims[j], &config, rng))
                    .collect();
                let agg = Aggregator::new(&topology.concat_layout(), config.aggregator_hidden, rng);
                let critics = (0..NUM_CHAINS)
                    .map(|j| {
                        Critic::new(&format!("local{}", j + 1), horizon * dims[j], config.local_critic_width, act, rng)
                    })
                    .collect();
                (gens, Some(agg), critics)
            }
            Architecture::SingleGan => (
                vec![Generator::new("gen", topology.pose_dim(), &config, rng)],
                None,
                Vec::new(),
            ),
        };
        let global_critic = Critic::new(
            "global",
            horizon * topology.pose_dim(),
            config.global_critic_width,
            act,
            rng,
        );
        Ok(Self {
            config,
            topology,
            generators,
            aggregator,
            local_critics,
            global_critic,
        })
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topology
    }

    pub fn predict_len(&self) -> usize {
        self.config.predict_len
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn is_composite(&self) -> bool {
        self.aggregator.is_some()
    }

    /// Splits time-major pose frames into per-generator inputs.
    pub fn generator_inputs(&self, frames: &[Mat]) -> Result<Vec<Vec<Mat>>> {
        if !self.is_composite() {
            for f in frames {
                if f.ncols() != self.topology.pose_dim() {
                    return Err(Error::dim("model input", self.topology.pose_dim(), f.ncols()));
                }
            }
            return Ok(vec![frames.to_vec()]);
        }
        let mut out = vec![Vec::with_capacity(frames.len()); NUM_CHAINS];
        for f in frames {
            for (j, chain) in self.topology.split_frames(f)?.into_iter().enumerate() {
                out[j].push(chain);
            }
        }
        Ok(out)
    }

    /// Full prediction path on any backend.
    pub fn forward<'p, G: Graph<'p>>(
        &'p self,
        g: &mut G,
        observed: &[Mat],
        noise: &[Mat],
    ) -> Result<Forward<G::Node>> {
        if observed.is_empty() {
            return Err(Error::InvalidArgument("observed sequence is empty".into()));
        }
        let inputs = self.generator_inputs(observed)?;
        if noise.len() != self.generators.len() {
            return Err(Error::dim("noise per generator", self.generators.len(), noise.len()));
        }
        let rows = observed[0].nrows();
        let mut codes = Vec::with_capacity(inputs.len());
        let mut chains = Vec::with_capacity(inputs.len());
        for ((gen, frames), eps) in self.generators.iter().zip(&inputs).zip(noise) {
            gen.check_frames(frames, "forward")?;
            if eps.dim() != (rows, gen.latent_dim()) {
                return Err(Error::dim("noise", rows * gen.latent_dim(), eps.len()));
            }
            let nodes: Vec<_> = frames.iter().map(|f| g.constant(f.clone())).collect();
            let (mean, logvar) = gen.encode_nodes(g, &nodes);
            let z = Generator::sample_nodes(g, &mean, &logvar, eps);
            let seed = nodes.last().expect("non-empty").clone();
            chains.push(gen.decode_nodes(g, &z, &seed, self.config.predict_len));
            codes.push((mean, logvar));
        }
        let pose = match &self.aggregator {
            Some(agg) => agg.aggregate_nodes(g, &chains),
            None => chains[0].clone(),
        };
        Ok(Forward { codes, chains, pose })
    }

    pub fn zero_noise(&self, rows: usize) -> Vec<Mat> {
        vec![Mat::zeros((rows, self.latent_dim())); self.generators.len()]
    }

    /// Per-generator predicted frames (pre-aggregation).
    pub fn chain_predictions(&self, observed: &[Mat], noise: &[Mat]) -> Result<Vec<Vec<Mat>>> {
        let mut g = Eval::new();
        let out = self.forward(&mut g, observed, noise)?;
        Ok(out
            .chains
            .into_iter()
            .map(|c| c.into_iter().map(|n| (*n).clone()).collect())
            .collect())
    }

    /// Time-major batched prediction.
    pub fn predict_batch(&self, observed: &[Mat], noise: &[Mat]) -> Result<Vec<Mat>> {
        let mut g = Eval::new();
        let out = self.forward(&mut g, observed, noise)?;
        Ok(out.pose.into_iter().map(|n| (*n).clone()).collect())
    }

    /// Predicts `predict_len x D` future frames from a `t x D` observation.
    /// `noise[j]` is generator `j`'s latent noise (length `latent_dim`).
    pub fn predict_sequence(&self, observed: &Mat, noise: &[Vec<f64>]) -> Result<Mat> {
        let frames: Vec<Mat> = observed.rows().into_iter().map(|r| r.to_owned().insert_axis(ndarray::Axis(0))).collect();
        let noise: Vec<Mat> = noise
            .iter()
            .map(|n| Mat::from_shape_vec((1, n.len()), n.clone()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let pose = self.predict_batch(&frames, &noise)?;
        let views: Vec<_> = pose.iter().map(|m| m.view()).collect();
        Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths"))
    }

    /// Parameters optimised by the generator step.
    pub fn generator_params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.generators.iter().flat_map(Generator::params).collect();
        if let Some(a) = &self.aggregator {
            out.extend(a.params());
        }
        out
    }

    pub fn generator_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.generators.iter_mut().flat_map(Generator::params_mut).collect();
        if let Some(a) = &mut self.aggregator {
            out.extend(a.params_mut());
        }
        out
    }

    pub fn critic_params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.local_critics.iter().flat_map(Critic::params).collect();
        out.extend(self.global_critic.params());
        out
    }

    /// Every parameter, in checkpoint order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.generator_params();
        out.extend(self.critic_params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.generators.iter_mut().flat_map(Generator::params_mut).collect();
        if let Some(a) = &mut self.aggregator {
            out.extend(a.params_mut());
        }
        for c in &mut self.local_critics {
            out.extend(c.params_mut());
        }
        out.extend(self.global_critic.params_mut());
        out
    }
}
