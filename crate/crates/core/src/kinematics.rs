//! Skeleton topology, the five-chain partition and forward kinematics.

use std::fmt;
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub const NUM_CHAINS: usize = 5;
pub const DOF_PER_JOINT: usize = 3;

const DEFAULT_TOPOLOGY: &str = include_str!("../assets/topology/h36m25.txt");

/// Kinematic chain identifier, 1 through 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ChainId(u8);

impl ChainId {
    pub const TORSO: ChainId = ChainId(1);
    pub const LEFT_ARM: ChainId = ChainId(2);
    pub const RIGHT_ARM: ChainId = ChainId(3);
    pub const LEFT_LEG: ChainId = ChainId(4);
    pub const RIGHT_LEG: ChainId = ChainId(5);

    pub fn new(id: u8) -> Result<Self> {
        if (1..=NUM_CHAINS as u8).contains(&id) {
            Ok(ChainId(id))
        } else {
            Err(Error::Chains(format!("chain id {id} outside 1..=5")))
        }
    }

    /// Zero-based position in chain-ordered collections.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Self {
        assert!(index < NUM_CHAINS);
        ChainId(index as u8 + 1)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = ChainId> {
        (1..=NUM_CHAINS as u8).map(ChainId)
    }

    pub fn label(self) -> &'static str {
        match self.0 {
            1 => "torso",
            2 => "left_arm",
            3 => "right_arm",
            4 => "left_leg",
            _ => "right_leg",
        }
    }
}

impl TryFrom<u8> for ChainId {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        ChainId::new(v)
    }
}

impl From<ChainId> for u8 {
    fn from(c: ChainId) -> u8 {
        c.0
    }
}

impl fmt::Display for ChainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    ExpmapAngles,
    Coords3d,
}

/// Joint tree plus its disjoint assignment to the five kinematic chains.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    joint_names: Vec<String>,
    parent_index: Vec<Option<usize>>,
    bone_offsets: Vec<[f64; 3]>,
    chain_assignment: Vec<ChainId>,
    root: usize,
    /// Pose columns of each chain, in joint storage order.
    chain_columns: [Vec<usize>; NUM_CHAINS],
}

impl SkeletonTopology {
    pub fn new(
        joint_names: Vec<String>,
        parent_index: Vec<Option<usize>>,
        bone_offsets: Vec<[f64; 3]>,
        chain_assignment: Vec<ChainId>,
    ) -> Result<Self> {
        let n = joint_names.len();
        if n == 0 {
            return Err(Error::Topology("no joints".into()));
        }
        if parent_index.len() != n || bone_offsets.len() != n || chain_assignment.len() != n {
            return Err(Error::Topology(
                "joint names, parents, offsets and chains must have equal length".into(),
            ));
        }
        let roots: Vec<usize> = (0..n).filter(|&j| parent_index[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::Topology(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        for (j, p) in parent_index.iter().enumerate() {
            if let Some(p) = p {
                if *p >= n {
                    return Err(Error::Topology(format!(
                        "joint {} has parent {p} out of range",
                        joint_names[j]
                    )));
                }
            }
        }
        // Every ancestor walk must reach the root within n steps.
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parent_index[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(Error::Topology(format!(
                        "cycle through joint {}",
                        joint_names[start]
                    )));
                }
            }
        }
        if chain_assignment[root] != ChainId::TORSO {
            return Err(Error::Topology("root joint must belong to chain 1".into()));
        }
        let mut chain_columns: [Vec<usize>; NUM_CHAINS] = Default::default();
        for (j, c) in chain_assignment.iter().enumerate() {
            chain_columns[c.index()].extend(j * DOF_PER_JOINT..(j + 1) * DOF_PER_JOINT);
        }
        if let Some(empty) = chain_columns.iter().position(Vec::is_empty) {
            return Err(Error::Topology(format!(
                "chain {} has no joints",
                ChainId::from_index(empty)
            )));
        }
        Ok(Self {
            joint_names,
            parent_index,
            bone_offsets,
            chain_assignment,
            root,
            chain_columns,
        })
    }

    /// The bundled 25-joint skeleton.
    pub fn default_h36m() -> Self {
        Self::parse(DEFAULT_TOPOLOGY, Path::new("<builtin>")).expect("bundled topology is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading topology {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    /// Parses `name parent ox oy oz chain` records; `#` starts a comment and
    /// a negative parent marks the root.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut names = Vec::new();
        let mut parents = Vec::new();
        let mut offsets = Vec::new();
        let mut chains = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", fields.len())));
            }
            let parent: i64 = fields[1]
                .parse()
                .map_err(|_| err(format!("bad parent index `{}`", fields[1])))?;
            let mut off = [0.0; 3];
            for (k, f) in fields[2..5].iter().enumerate() {
                off[k] = f.parse().map_err(|_| err(format!("bad offset `{f}`")))?;
            }
            let chain: u8 = fields[5]
                .parse()
                .map_err(|_| err(format!("bad chain id `{}`", fields[5])))?;
            names.push(fields[0].to_string());
            parents.push(usize::try_from(parent).ok());
            offsets.push(off);
            chains.push(ChainId::new(chain).map_err(|e| err(e.to_string()))?);
        }
        Self::new(names, parents, offsets, chains)
    }

    /// Canonical text form; `parse(to_text())` reproduces the topology.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for j in 0..self.num_joints() {
            let p = self.parent_index[j].map_or(-1, |p| p as i64);
            let o = self.bone_offsets[j];
            out.push_str(&format!(
                "{} {} {:?} {:?} {:?} {}\n",
                self.joint_names[j], p, o[0], o[1], o[2], self.chain_assignment[j]
            ));
        }
        out
    }

    /// Stable identifier of the topology, used to match checkpoints.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn dof_per_joint(&self) -> usize {
        DOF_PER_JOINT
    }

    pub fn pose_dim(&self) -> usize {
        self.num_joints() * DOF_PER_JOINT
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent_index[joint]
    }

    pub fn bone_offset(&self, joint: usize) -> [f64; 3] {
        self.bone_offsets[joint]
    }

    pub fn chain_of(&self, joint: usize) -> ChainId {
        self.chain_assignment[joint]
    }

    pub fn chain_joints(&self, chain: ChainId) -> Vec<usize> {
        (0..self.num_joints())
            .filter(|&j| self.chain_assignment[j] == chain)
            .collect()
    }

    /// Pose-vector columns owned by `chain`.
    pub fn chain_columns(&self, chain: ChainId) -> &[usize] {
        &self.chain_columns[chain.index()]
    }

    pub fn chain_dim(&self, chain: ChainId) -> usize {
        self.chain_columns[chain.index()].len()
    }

    pub fn chain_dims(&self) -> [usize; NUM_CHAINS] {
        std::array::from_fn(|i| self.chain_columns[i].len())
    }

    /// For each column of the chain-concatenated layout (chain 1 first), the
    /// pose column it came from.
    pub fn concat_layout(&self) -> Vec<usize> {
        self.chain_columns.iter().flatten().copied().collect()
    }

    /// Splits a `rows x D` frame matrix into five `rows x d_j` chain matrices.
    pub fn split_frames(&self, frames: &Mat) -> Result<Vec<Mat>> {
        if frames.ncols() != self.pose_dim() {
            return Err(Error::dim("split_frames", self.pose_dim(), frames.ncols()));
        }
        Ok(self
            .chain_columns
            .iter()
            .map(|cols| frames.select(ndarray::Axis(1), cols))
            .collect())
    }

    /// Inverse of [`split_frames`](Self::split_frames).
    pub fn merge_frames(&self, chains: &[Mat]) -> Result<Mat> {
        if chains.len() != NUM_CHAINS {
            return Err(Error::Chains(format!(
                "expected {NUM_CHAINS} chains, got {}",
                chains.len()
            )));
        }
        let rows = chains[0].nrows();
        let mut out = Mat::zeros((rows, self.pose_dim()));
        for (cols, chain) in self.chain_columns.iter().zip(chains) {
            if chain.ncols() != cols.len() {
                return Err(Error::dim("merge_frames", cols.len(), chain.ncols()));
            }
            if chain.nrows() != rows {
                return Err(Error::dim("merge_frames rows", rows, chain.nrows()));
            }
            for (k, &c) in cols.iter().enumerate() {
                out.column_mut(c).assign(&chain.column(k));
            }
        }
        Ok(out)
    }
}

/// A single whole-body pose vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub values: Vec<f64>,
    pub representation: Representation,
}

impl Pose {
    pub fn new(values: Vec<f64>, representation: Representation) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("pose contains non-finite values".into()));
        }
        Ok(Self {
            values,
            representation,
        })
    }
}

/// The restriction of a pose to one chain's joints.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainVector {
    pub chain: ChainId,
    pub values: Vec<f64>,
}

pub fn split_pose(pose: &Pose, topology: &SkeletonTopology) -> Result<Vec<ChainVector>> {
    if pose.values.len() != topology.pose_dim() {
        return Err(Error::dim("split_pose", topology.pose_dim(), pose.values.len()));
    }
    Ok(ChainId::all()
        .map(|chain| ChainVector {
            chain,
            values: topology
                .chain_columns(chain)
                .iter()
                .map(|&c| pose.values[c])
                .collect(),
        })
        .collect())
}

pub fn merge_chains(
    chains: &[ChainVector],
    topology: &SkeletonTopology,
    representation: Representation,
) -> Result<Pose> {
    let mut slots: [Option<&ChainVector>; NUM_CHAINS] = Default::default();
    for cv in chains {
        let slot = &mut slots[cv.chain.index()];
        if slot.is_some() {
            return Err(Error::Chains(format!("duplicate chain {}", cv.chain)));
        }
        *slot = Some(cv);
    }
    let mut values = vec![0.0; topology.pose_dim()];
    for (i, slot) in slots.iter().enumerate() {
        let chain = ChainId::from_index(i);
        let cv = slot.ok_or_else(|| Error::Chains(format!("missing chain {chain}")))?;
        let cols = topology.chain_columns(chain);
        if cv.values.len() != cols.len() {
            return Err(Error::dim("merge_chains", cols.len(), cv.values.len()));
        }
        for (&c, &v) in cols.iter().zip(&cv.values) {
            values[c] = v;
        }
    }
    Ok(Pose {
        values,
        representation,
    })
}

/// World-space joint positions of an exponential-map pose.
///
/// The root sits at `root_translation` and is oriented by its own joint
/// angles; each child is placed at its parent's position plus the parent's
/// global rotation applied to the child's bone offset.
pub fn forward_kinematics(
    pose: &Pose,
    topology: &SkeletonTopology,
    root_translation: [f64; 3],
) -> Result<Vec<[f64; 3]>> {
    if pose.representation != Representation::ExpmapAngles {
        return Err(Error::Representation(
            "forward kinematics needs exponential-map angles; coordinates need no FK".into(),
        ));
    }
    if pose.values.len() != topology.pose_dim() {
        return Err(Error::dim(
            "forward_kinematics",
            topology.pose_dim(),
            pose.values.len(),
        ));
    }
    let n = topology.num_joints();
    let mut rotation: Vec<Option<Rotation3<f64>>> = vec![None; n];
    let mut position: Vec<Vector3<f64>> = vec![Vector3::zeros(); n];

    fn solve(
        j: usize,
        pose: &Pose,
        topology: &SkeletonTopology,
        root_translation: &[f64; 3],
        rotation: &mut [Option<Rotation3<f64>>],
        position: &mut [Vector3<f64>],
    ) -> Rotation3<f64> {
        if let Some(r) = rotation[j] {
            return r;
        }
        let a = &pose.values[j * DOF_PER_JOINT..(j + 1) * DOF_PER_JOINT];
        let local = Rotation3::from_scaled_axis(Vector3::new(a[0], a[1], a[2]));
        let global = match topology.parent(j) {
            None => {
                position[j] = Vector3::from(*root_translation);
                local
            }
            Some(p) => {
                let parent_rot = solve(p, pose, topology, root_translation, rotation, position);
                position[j] = position[p] + parent_rot * Vector3::from(topology.bone_offset(j));
                parent_rot * local
            }
        };
        rotation[j] = Some(global);
        global
    }

    for j in 0..n {
        solve(
            j,
            pose,
            topology,
            &root_translation,
            &mut rotation,
            &mut position,
        );
    }
    Ok(position.iter().map(|p| [p.x, p.y, p.z]).collect())
}
