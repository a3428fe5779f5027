//! Binary checkpoint container: a JSON header plus named `f64` blocks.
//!
//! Layout (little endian): magic `AMGANCKP`, `u32` version, `u64` header
//! length, header JSON, `u32` block count, then per block `u32` name length,
//! name, `u32` rows, `u32` cols and `rows * cols` values.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::Mat;
use crate::data::{ByteCursor, NormalizationStats, WindowConfig};
use crate::error::{Error, Result};
use crate::kinematics::SkeletonTopology;
use crate::model::{AmGanModel, ModelConfig};

const MAGIC: &[u8; 8] = b"AMGANCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub header: Value,
    blocks: Vec<(String, Mat)>,
}

impl Container {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat) {
        self.blocks.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|(n, _)| n.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        // Write to a sibling file first so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("partial");
        {
            let file = fs::File::create(&tmp).map_err(io)?;
            let mut w = BufWriter::new(file);
            let header = serde_json::to_vec(&self.header)?;
            w.write_all(MAGIC).map_err(io)?;
            w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
            w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&header).map_err(io)?;
            w.write_all(&(self.blocks.len() as u32).to_le_bytes()).map_err(io)?;
            for (name, m) in &self.blocks {
                w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
                w.write_all(name.as_bytes()).map_err(io)?;
                w.write_all(&(m.nrows() as u32).to_le_bytes()).map_err(io)?;
                w.write_all(&(m.ncols() as u32).to_le_bytes()).map_err(io)?;
                for v in m.iter() {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
            w.flush().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bad = |message: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        let mut cur = ByteCursor::new(&bytes);
        let truncated = || bad("truncated");
        if cur.take(8).ok_or_else(truncated)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = cur.u32().ok_or_else(truncated)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = cur.u64().ok_or_else(truncated)? as usize;
        let header: Value =
            serde_json::from_slice(cur.take(len).ok_or_else(truncated)?).map_err(|e| bad(&e.to_string()))?;
        let n = cur.u32().ok_or_else(truncated)?;
        let mut out = Self::new(header);
        for _ in 0..n {
            let name_len = cur.u32().ok_or_else(truncated)? as usize;
            let name = String::from_utf8(cur.take(name_len).ok_or_else(truncated)?.to_vec())
                .map_err(|_| bad("block name is not utf-8"))?;
            let rows = cur.u32().ok_or_else(truncated)? as usize;
            let cols = cur.u32().ok_or_else(truncated)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(cur.f64().ok_or_else(truncated)?);
            }
            out.push(name, Mat::from_shape_vec((rows, cols), data).expect("sized"));
        }
        if !cur.is_done() {
            return Err(bad("trailing bytes"));
        }
        Ok(out)
    }
}

/// A trained model with what is needed to run it on raw motion.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: AmGanModel,
    pub normalization: Option<NormalizationStats>,
    pub window: WindowConfig,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    topology: String,
    topology_hash: String,
    model_config: ModelConfig,
    window: WindowConfig,
    constant_dims: Option<Vec<usize>>,
}

impl ModelBundle {
    /// Adds the model's header entries and parameter blocks.
    pub fn store(&self, c: &mut Container) -> Result<()> {
        let header = ModelHeader {
            topology: self.model.topology().to_text(),
            topology_hash: self.model.topology().hash(),
            model_config: self.model.config.clone(),
            window: self.window,
            constant_dims: self.normalization.as_ref().map(|n| n.constant_dims.clone()),
        };
        if !c.header.is_object() {
            c.header = json!({});
        }
        c.header["model"] = serde_json::to_value(header)?;
        for p in self.model.params() {
            c.push(format!("param.{}", p.name), p.value.clone());
        }
        if let Some(n) = &self.normalization {
            c.push("norm.mean", Mat::from_shape_vec((1, n.mean.len()), n.mean.clone()).expect("row"));
            c.push("norm.std", Mat::from_shape_vec((1, n.std.len()), n.std.clone()).expect("row"));
        }
        Ok(())
    }

    pub fn restore(c: &Container, path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let header: ModelHeader = serde_json::from_value(
            c.header
                .get("model")
                .cloned()
                .ok_or_else(|| bad("no model section".into()))?,
        )
        .map_err(|e| bad(e.to_string()))?;
        let topology = SkeletonTopology::parse(&header.topology, path)?;
        if topology.hash() != header.topology_hash {
            return Err(Error::TopologyMismatch {
                expected: header.topology_hash,
                found: topology.hash(),
            });
        }
        // Placeholder weights; every parameter is overwritten below.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = AmGanModel::new(topology, header.model_config, &mut rng)?;
        for p in model.params_mut() {
            let block = c
                .get(&format!("param.{}", p.name))
                .ok_or_else(|| bad(format!("missing parameter {}", p.name)))?;
            if block.dim() != p.value.dim() {
                return Err(bad(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    block.dim(),
                    p.value.dim()
                )));
            }
            p.value.assign(block);
        }
        let normalization = match (c.get("norm.mean"), c.get("norm.std"), header.constant_dims) {
            (Some(m), Some(s), Some(constant_dims)) => Some(NormalizationStats {
                mean: m.iter().copied().collect(),
                std: s.iter().copied().collect(),
                constant_dims,
            }),
            _ => None,
        };
        Ok(Self {
            model,
            normalization,
            window: header.window,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(json!({ "kind": "model" }));
        self.store(&mut c)?;
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::restore(&Container::read(path)?, path)
    }

    /// Loads and checks the checkpoint was trained on `topology`.
    pub fn load_for(path: &Path, topology: &SkeletonTopology) -> Result<Self> {
        let b = Self::load(path)?;
        let found = b.model.topology().hash();
        if found != topology.hash() {
            return Err(Error::TopologyMismatch {
                expected: topology.hash(),
                found,
            });
        }
        Ok(b)
    }

    /// Normalizes raw frames (identity without statistics).
    pub fn normalize(&self, frames: &Mat) -> Mat {
        match &self.normalization {
            Some(n) => n.apply(frames),
            None => frames.clone(),
        }
    }

    pub fn denormalize(&self, frames: &Mat) -> Mat {
        match &self.normalization {
            Some(n) => n.invert(frames),
            None => frames.clone(),
        }
    }

    /// Mean-latent prediction of `predict_len` raw frames from raw observations.
    pub fn predict(&self, observed: &Mat) -> Result<Mat> {
        let zero = vec![vec![0.0; self.model.latent_dim()]; self.model.generators.len()];
        let out = self.model.predict_sequence(&self.normalize(observed), &zero)?;
        Ok(self.denormalize(&out))
    }

    /// Batched [`ModelBundle::predict`] over equally long observations.
    pub fn predict_many(&self, observed: &[Mat]) -> Result<Vec<Mat>> {
        let Some(first) = observed.first() else {
            return Ok(Vec::new());
        };
        let (t, d) = first.dim();
        if observed.iter().any(|o| o.dim() != (t, d)) {
            return Err(Error::InvalidArgument("observations differ in shape".into()));
        }
        let normalized: Vec<Mat> = observed.iter().map(|o| self.normalize(o)).collect();
        let frames: Vec<Mat> = (0..t)
            .map(|k| Mat::from_shape_fn((observed.len(), d), |(b, c)| normalized[b][[k, c]]))
            .collect();
        let pose = self.model.predict_batch(&frames, &self.model.zero_noise(observed.len()))?;
        Ok((0..observed.len())
            .map(|b| {
                let seq = Mat::from_shape_fn((pose.len(), d), |(k, c)| pose[k][[b, c]]);
                self.denormalize(&seq)
            })
            .collect())
    }
}
