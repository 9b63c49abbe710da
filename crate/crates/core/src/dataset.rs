//! Line-delimited dataset files: one JSON header line, then one record per
//! line. Floats are written with 17 significant digits so a write/read cycle
//! is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    fmt_f64, forward_kinematics, project, Camera, Observation, PoseMixture, PoseSequence, Skeleton,
};
use crate::rng::{derive, domain};
use crate::so3::Rotation;

pub const DATASET_FORMAT: &str = "so3mar-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub joints: usize,
    pub bones: usize,
    pub skeleton_hash: String,
    pub conditional: bool,
    pub count: usize,
    pub seed: u64,
    pub world: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub theta: Vec<Rotation>,
    pub beta: Vec<f64>,
    pub pi: Camera,
    pub j3d: Vec<[f64; 3]>,
    /// NaN at hidden keypoints.
    pub j2d: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    /// Mixture mode the pose was drawn from, when known.
    pub mode: Option<usize>,
}

impl Record {
    /// Builds a record from a pose, filling joints and keypoints by forward
    /// kinematics and projection.
    pub fn from_pose(
        pose: &PoseSequence,
        visible: Vec<bool>,
        mode: Option<usize>,
        skel: &Skeleton,
    ) -> Result<Self> {
        let j3d = forward_kinematics(&pose.theta, &pose.beta, skel)?;
        let full = project(&j3d, &pose.pi)?;
        if visible.len() != full.len() {
            return Err(Error::InvalidArgument("visibility length differs from joint count".into()));
        }
        let j2d = full
            .iter()
            .zip(&visible)
            .map(|(p, v)| if *v { *p } else { [f64::NAN; 2] })
            .collect();
        Ok(Record {
            theta: pose.theta.clone(),
            beta: pose.beta.clone(),
            pi: pose.pi,
            j3d,
            j2d,
            visible,
            mode,
        })
    }

    pub fn observation(&self) -> Observation {
        Observation {
            keypoints: self.j2d.clone(),
            visible: self.visible.clone(),
        }
    }

    pub fn pose(&self) -> PoseSequence {
        PoseSequence {
            theta: self.theta.clone(),
            pi: self.pi,
            beta: self.beta.clone(),
        }
    }

    fn to_line(&self) -> String {
        let mut s = String::with_capacity(8192);
        let floats = |s: &mut String, xs: &mut dyn Iterator<Item = f64>| {
            let mut first = true;
            for x in xs {
                if !first {
                    s.push(',');
                }
                first = false;
                s.push_str(&fmt_f64(x));
            }
        };
        s.push_str("{\"theta\":[");
        floats(&mut s, &mut self.theta.iter().flat_map(|r| r.to_row_major()));
        s.push_str("],\"beta\":[");
        floats(&mut s, &mut self.beta.iter().copied());
        let _ = write!(
            s,
            "],\"pi\":{{\"s\":{},\"tx\":{},\"ty\":{}}},\"j3d\":[",
            fmt_f64(self.pi.s),
            fmt_f64(self.pi.tx),
            fmt_f64(self.pi.ty)
        );
        floats(&mut s, &mut self.j3d.iter().flatten().copied());
        s.push_str("],\"j2d\":[");
        for (i, (p, v)) in self.j2d.iter().zip(&self.visible).enumerate() {
            if i > 0 {
                s.push(',');
            }
            if *v {
                let _ = write!(s, "[{},{}]", fmt_f64(p[0]), fmt_f64(p[1]));
            } else {
                s.push_str("null");
            }
        }
        s.push_str("],\"visible\":[");
        for (i, v) in self.visible.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(if *v { "true" } else { "false" });
        }
        s.push(']');
        if let Some(m) = self.mode {
            let _ = write!(s, ",\"mode\":{m}");
        }
        s.push('}');
        s
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    theta: Vec<f64>,
    beta: Vec<f64>,
    pi: Camera,
    j3d: Vec<f64>,
    j2d: Vec<Option<[f64; 2]>>,
    visible: Vec<bool>,
    #[serde(default)]
    mode: Option<usize>,
}

impl RawRecord {
    fn into_record(self, joints: usize, bones: usize) -> std::result::Result<Record, String> {
        if self.theta.len() != 9 * joints {
            return Err(format!("theta has {} values, expected {}", self.theta.len(), 9 * joints));
        }
        if self.beta.len() != bones {
            return Err(format!("beta has {} values, expected {bones}", self.beta.len()));
        }
        if self.j3d.len() != 3 * joints || self.j2d.len() != joints || self.visible.len() != joints {
            return Err("joint arrays have the wrong length".into());
        }
        if !(self.pi.s > 0.0) {
            return Err(format!("camera scale {} is not positive", self.pi.s));
        }
        let theta = self
            .theta
            .chunks(9)
            .map(|c| Rotation::from_row_major(c).map_err(|e| e.to_string()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut j2d = Vec::with_capacity(joints);
        for (p, v) in self.j2d.iter().zip(&self.visible) {
            match (p, v) {
                (Some(p), true) => j2d.push(*p),
                (None, false) => j2d.push([f64::NAN; 2]),
                _ => return Err("keypoint presence disagrees with its visibility flag".into()),
            }
        }
        Ok(Record {
            theta,
            beta: self.beta,
            pi: self.pi,
            j3d: self.j3d.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            j2d,
            visible: self.visible,
            mode: self.mode,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, records: Vec<Record>) -> Self {
        let mut header = header;
        header.count = records.len();
        Dataset { header, records }
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn from_text(text: &str, location: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::format(location, "empty dataset file"))?;
        let header: DatasetHeader = serde_json::from_str(first)
            .map_err(|e| Error::format(format!("{location}:1"), e.to_string()))?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::format(
                format!("{location}:1"),
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let mut records = Vec::with_capacity(header.count);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let at = format!("{location}:{}", i + 1);
            let raw: RawRecord =
                serde_json::from_str(line).map_err(|e| Error::format(&at, e.to_string()))?;
            records.push(
                raw.into_record(header.joints, header.bones)
                    .map_err(|e| Error::format(&at, e))?,
            );
        }
        if records.len() != header.count {
            return Err(Error::format(
                location,
                format!("header declares {} records, found {}", header.count, records.len()),
            ));
        }
        Ok(Dataset { header, records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_text(&text, &path.display().to_string())
    }

    pub fn check_skeleton(&self, skel: &Skeleton) -> Result<()> {
        let h = &self.header;
        if h.joints != skel.num_joints() || h.bones != skel.num_bones() || h.skeleton_hash != skel.hash()
        {
            return Err(Error::Incompatible(format!(
                "dataset skeleton {} ({} joints) does not match {} ({} joints)",
                h.skeleton_hash,
                h.joints,
                skel.hash(),
                skel.num_joints()
            )));
        }
        Ok(())
    }
}

/// Which keypoints are hidden in each record.
#[derive(Clone, Debug, PartialEq)]
pub enum Occlusion {
    None,
    Fixed(Vec<usize>),
    /// Each keypoint hidden independently with this probability.
    Random(f64),
}

impl Occlusion {
    /// `none`, `fixed:18,20,22` or `random:0.25`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(Occlusion::None);
        }
        if let Some(list) = s.strip_prefix("fixed:") {
            let joints = list
                .split(',')
                .filter(|x| !x.trim().is_empty())
                .map(|x| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad joint index {x:?} in occlusion")))
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(Occlusion::Fixed(joints));
        }
        if let Some(p) = s.strip_prefix("random:") {
            let p: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad occlusion probability {p:?}")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("occlusion probability {p} outside [0, 1]")));
            }
            return Ok(Occlusion::Random(p));
        }
        Err(Error::Config(format!(
            "occlusion must be none, fixed:<joints> or random:<p>, got {s:?}"
        )))
    }

    pub fn draw<R: Rng + ?Sized>(&self, joints: usize, rng: &mut R) -> Result<Vec<bool>> {
        Ok(match self {
            Occlusion::None => vec![true; joints],
            Occlusion::Fixed(hidden) => {
                let mut v = vec![true; joints];
                for &j in hidden {
                    if j >= joints {
                        return Err(Error::Config(format!("occluded joint {j} out of range")));
                    }
                    v[j] = false;
                }
                v
            }
            Occlusion::Random(p) => (0..joints).map(|_| !rng.random_bool(*p)).collect(),
        })
    }
}

/// Distribution of the non-pose record fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NuisanceSpec {
    pub beta_std: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub shift: f64,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        NuisanceSpec {
            beta_std: 0.05,
            scale_min: 0.8,
            scale_max: 1.2,
            shift: 0.1,
        }
    }
}

pub struct DatasetSpec<'a> {
    pub world_name: &'a str,
    pub mixture: &'a PoseMixture,
    pub skeleton: &'a Skeleton,
    pub nuisance: NuisanceSpec,
    pub occlusion: Occlusion,
    pub conditional: bool,
}

/// Draws `n` records; record `i` uses its own stream derived from `(seed, i)`.
pub fn build_dataset(spec: &DatasetSpec, n: usize, seed: u64) -> Result<Dataset> {
    build_dataset_from(spec, n, seed, 0)
}

/// As [`build_dataset`] with record streams starting at `first_index`, so
/// several corpora can share one seed without repeating draws.
pub fn build_dataset_from(spec: &DatasetSpec, n: usize, seed: u64, first_index: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one record".into()));
    }
    let skel = spec.skeleton;
    if spec.mixture.num_joints() != skel.num_joints() {
        return Err(Error::Incompatible("mixture and skeleton joint counts differ".into()));
    }
    let nu = spec.nuisance;
    if !(nu.scale_min > 0.0 && nu.scale_max >= nu.scale_min && nu.beta_std >= 0.0 && nu.shift >= 0.0) {
        return Err(Error::Config(format!("invalid nuisance ranges {nu:?}")));
    }
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = derive(seed, domain::DATASET, first_index + i as u64);
        let (mode, theta) = spec.mixture.sample(&mut rng)?;
        let beta = (0..skel.num_bones())
            .map(|_| nu.beta_std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let pi = Camera {
            s: nu.scale_min + (nu.scale_max - nu.scale_min) * rng.random::<f64>(),
            tx: nu.shift * (2.0 * rng.random::<f64>() - 1.0),
            ty: nu.shift * (2.0 * rng.random::<f64>() - 1.0),
        };
        let visible = spec.occlusion.draw(skel.num_joints(), &mut rng)?;
        let pose = PoseSequence { theta, pi, beta };
        records.push(Record::from_pose(&pose, visible, Some(mode), skel)?);
    }
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        joints: skel.num_joints(),
        bones: skel.num_bones(),
        skeleton_hash: skel.hash(),
        conditional: spec.conditional,
        count: n,
        seed,
        world: spec.world_name.into(),
    };
    Ok(Dataset::new(header, records))
}
