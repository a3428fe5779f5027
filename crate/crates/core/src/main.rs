use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use amgan::checkpoint::ModelBundle;
use amgan::config::{RunConfig, RUN_DIR_ENV};
use amgan::control::{
    fine_grained_control, parse_override, train_action_models, train_next_pose, transfer_sequence,
    ActionModelRegistry, NextPoseVae,
};
use amgan::autodiff::Mat;
use amgan::data::{downsample, load_motion_csv, synthetic_testbed_at, write_motion_csv};
use amgan::evaluation::{ablation_run, benchmark, file_hash, train_model, EvalReport, Method, Variant};
use amgan::kinematics::{SkeletonTopology, NUM_CHAINS};
use amgan::render::{render_sequence, RenderConfig};
use amgan::training::{prepare_data, prepare_data_with};
use amgan::{Error, Result};

#[derive(Parser)]
#[command(name = "amgan", version, about = "Controllable human motion prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for all outputs.
    #[arg(long, env = RUN_DIR_ENV)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize and window the training data into a binary cache.
    Ingest(Common),
    /// Train a sequence model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Ablation variant to train instead of the complete model.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Predict the future of a motion CSV.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Observed motion; its last frames are used.
        #[arg(long)]
        source: PathBuf,
    },
    /// Train the one-frame model used by `transfer`.
    NextPose(Common),
    /// Splice two motions with generated transition frames.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Next-pose checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Frame of `target` where the spliced continuation begins
        /// (default: the observed length).
        #[arg(long)]
        target_start: Option<usize>,
    },
    /// Train one model per action and write a registry manifest.
    TrainActions(Common),
    /// Predict with some chains taken from other actions' models.
    Control {
        #[command(flatten)]
        common: Common,
        /// Registry manifest.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        base: String,
        /// `chain=action`, chain as id 1-5 or label; repeatable.
        #[arg(long = "override")]
        overrides: Vec<String>,
    },
    /// Benchmark a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and benchmark one ablation variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: String,
    },
    /// Render a motion CSV to numbered PNG frames.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
    },
    /// Write a synthetic dataset in the `subject/action.csv` layout.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Frames per sequence at the raw frame rate.
        #[arg(long, default_value_t = 120)]
        frames: usize,
        /// Digits after the decimal point.
        #[arg(long, default_value_t = 6)]
        decimals: i32,
    },
}

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    topology: SkeletonTopology,
}

impl Run {
    fn start(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
            cfg.sync();
        }
        let dir = cfg.run_dir(common.out.as_deref());
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            context: format!("creating {}", dir.display()),
            source: e,
        })?;
        write(&dir.join("config.toml"), &cfg.to_toml()?)?;
        let topology = cfg.load_topology()?;
        Ok(Self { cfg, dir, topology })
    }

    /// Reads a motion CSV in the dataset's raw format, at the working rate.
    fn read_motion(&self, path: &Path) -> Result<Mat> {
        let seq = load_motion_csv(path, self.cfg.data.raw_fps)?;
        let factor = if self.cfg.data.root.is_some() { self.cfg.data.downsample } else { 1 };
        Ok(downsample(&seq, factor)?.frames)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    write(&dir.join(format!("{stem}.json")), &report.to_json()?)?;
    write(&dir.join(format!("{stem}.md")), &report.to_markdown())?;
    println!("{}", report.to_markdown());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(common) => {
            let r = Run::start(&common)?;
            let data = prepare_data(r.cfg.load_sequences(&r.topology)?, &r.cfg.window)?;
            data.train.write(&r.dir.join("windows.bin"))?;
            write(&r.dir.join("normalization.json"), &serde_json::to_string_pretty(&data.normalization)?)?;
            info!("{} training windows", data.train.len());
        }
        Command::Train { common, variant } => {
            let r = Run::start(&common)?;
            let mut exp = r.cfg.experiment()?;
            if let Some(v) = variant {
                let (m, t) = v.parse::<Variant>()?.apply(&exp.model, &exp.train);
                exp.model = m;
                exp.train = t;
            }
            let data = prepare_data(r.cfg.load_sequences(&r.topology)?, &r.cfg.window)?;
            let (_, records) = train_model(&exp, &r.topology, &data, Some(&r.dir))?;
            info!("trained {} steps into {}", records.len(), r.dir.display());
        }
        Command::Predict {
            common,
            checkpoint,
            source,
        } => {
            let r = Run::start(&common)?;
            let bundle = ModelBundle::load_for(&checkpoint, &r.topology)?;
            let seq = r.read_motion(&source)?;
            let t = bundle.window.observed_len;
            if seq.nrows() < t {
                return Err(Error::InvalidArgument(format!(
                    "{} has {} frames, need {t}",
                    source.display(),
                    seq.nrows()
                )));
            }
            let observed = seq.slice(ndarray::s![seq.nrows() - t.., ..]).to_owned();
            write_motion_csv(&r.dir.join("prediction.csv"), &bundle.predict(&observed)?)?;
        }
        Command::NextPose(common) => {
            let r = Run::start(&common)?;
            let (window, train) = r.cfg.next_pose_train();
            let data = prepare_data(r.cfg.load_sequences(&r.topology)?, &window)?;
            train_next_pose(&r.topology, &r.cfg.model, &train, &data, window, Some(&r.dir))?;
        }
        Command::Transfer {
            common,
            checkpoint,
            source,
            target,
            target_start,
        } => {
            let r = Run::start(&common)?;
            let vae = NextPoseVae::load(&checkpoint)?;
            if vae.bundle.model.topology().hash() != r.topology.hash() {
                return Err(Error::TopologyMismatch {
                    expected: r.topology.hash(),
                    found: vae.bundle.model.topology().hash(),
                });
            }
            let src = r.read_motion(&source)?;
            let tgt = r.read_motion(&target)?;
            let start = target_start.unwrap_or(vae.observed_len());
            let out = transfer_sequence(&vae, &src, &tgt, start, &r.cfg.transfer)?;
            write_motion_csv(&r.dir.join("transition.csv"), &out.transition)?;
            write_motion_csv(&r.dir.join("transfer.csv"), &out.spliced)?;
        }
        Command::TrainActions(common) => {
            let r = Run::start(&common)?;
            let exp = r.cfg.experiment()?;
            let (reg, _) = train_action_models(&r.topology, &exp, r.cfg.load_sequences(&r.topology)?, Some(&r.dir))?;
            info!("registered actions: {}", reg.actions().collect::<Vec<_>>().join(", "));
        }
        Command::Control {
            common,
            checkpoint,
            source,
            base,
            overrides,
        } => {
            let r = Run::start(&common)?;
            let reg = ActionModelRegistry::load(&checkpoint)?;
            if reg.topology_hash() != Some(r.topology.hash().as_str()) {
                return Err(Error::TopologyMismatch {
                    expected: r.topology.hash(),
                    found: reg.topology_hash().unwrap_or("none").to_string(),
                });
            }
            let mut map = BTreeMap::new();
            for o in &overrides {
                let (chain, action) = parse_override(o)?;
                map.insert(chain, action);
            }
            let seq = r.read_motion(&source)?;
            let latent = reg.get(&base)?.model.latent_dim();
            let out = fine_grained_control(&reg, &seq, &base, &map, &vec![vec![0.0; latent]; NUM_CHAINS])?;
            write_motion_csv(&r.dir.join("control.csv"), &out.pose)?;
        }
        Command::Eval { common, checkpoint } => {
            let r = Run::start(&common)?;
            let bundle = ModelBundle::load_for(&checkpoint, &r.topology)?;
            let stats = bundle.normalization.clone();
            let data = prepare_data_with(r.cfg.load_sequences(&r.topology)?, &bundle.window, stats)?;
            let horizons = r.cfg.horizons()?;
            let protocol = r.cfg.eval.protocol;
            let mut report = benchmark(&Method::Model(&bundle), &data.test, &bundle.window, &protocol, &horizons)?;
            report.checkpoint_hash = Some(file_hash(&checkpoint)?);
            report.config = Some(serde_json::json!({ "model": bundle.model.config }));
            write_report(&r.dir, "eval", &report)?;
            let zv = benchmark(&Method::ZeroVelocity, &data.test, &bundle.window, &protocol, &horizons)?;
            write_report(&r.dir, "eval_zero_velocity", &zv)?;
        }
        Command::Ablate { common, variant } => {
            let r = Run::start(&common)?;
            let variant: Variant = variant.parse()?;
            let data = prepare_data(r.cfg.load_sequences(&r.topology)?, &r.cfg.window)?;
            let out = ablation_run(&r.cfg.experiment()?, variant, &r.topology, &data, Some(&r.dir))?;
            write_report(&r.dir, "report", &out.report)?;
        }
        Command::Render { common, source } => {
            let r = Run::start(&common)?;
            // rendered as given, one image per row
            let seq = load_motion_csv(&source, r.cfg.data.fps())?;
            let files = render_sequence(&seq.frames, &r.topology, &r.dir.join("frames"), &RenderConfig::default())?;
            info!("wrote {} frames", files.len());
        }
        Command::Synth {
            common,
            frames,
            decimals,
        } => {
            let r = Run::start(&common)?;
            let scale = 10f64.powi(decimals);
            let seqs = synthetic_testbed_at(&r.topology, frames, r.cfg.data.synthetic_seed, r.cfg.data.raw_fps)?;
            let n = seqs.len();
            for seq in seqs {
                let sub = r.dir.join(seq.subject.as_deref().unwrap_or("unknown"));
                fs::create_dir_all(&sub).map_err(|e| Error::Io {
                    context: format!("creating {}", sub.display()),
                    source: e,
                })?;
                let path = sub.join(format!("{}.csv", seq.action.as_deref().unwrap_or("motion")));
                write_motion_csv(&path, &seq.frames.mapv(|v| (v * scale).round() / scale))?;
            }
            info!("wrote {n} sequences");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
