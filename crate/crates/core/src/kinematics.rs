//! Kinematic chain, forward kinematics, orthographic camera and the
//! synthetic pose distributions used as training and evaluation worlds.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::so3::{exp_map, sample_tangent, Rotation};

pub const NUM_JOINTS: usize = 24;

/// Tree of joints with rest-pose offsets from each parent.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    offsets: Vec<Vector3<f64>>,
}

const SMPL_LIKE: [(&str, i32, [f64; 3]); NUM_JOINTS] = [
    ("pelvis", -1, [0.0, 0.0, 0.0]),
    ("left_hip", 0, [0.09, -0.08, 0.0]),
    ("right_hip", 0, [-0.09, -0.08, 0.0]),
    ("spine1", 0, [0.0, 0.11, 0.0]),
    ("left_knee", 1, [0.01, -0.38, 0.0]),
    ("right_knee", 2, [-0.01, -0.38, 0.0]),
    ("spine2", 3, [0.0, 0.13, 0.0]),
    ("left_ankle", 4, [0.0, -0.40, 0.0]),
    ("right_ankle", 5, [0.0, -0.40, 0.0]),
    ("spine3", 6, [0.0, 0.05, 0.0]),
    ("left_foot", 7, [0.03, -0.05, 0.0]),
    ("right_foot", 8, [-0.03, -0.05, 0.0]),
    ("neck", 9, [0.0, 0.21, 0.0]),
    ("left_collar", 9, [0.07, 0.12, 0.0]),
    ("right_collar", 9, [-0.07, 0.12, 0.0]),
    ("head", 12, [0.0, 0.09, 0.0]),
    ("left_shoulder", 13, [0.10, 0.03, 0.0]),
    ("right_shoulder", 14, [-0.10, 0.03, 0.0]),
    ("left_elbow", 16, [0.26, 0.0, 0.0]),
    ("right_elbow", 17, [-0.26, 0.0, 0.0]),
    ("left_wrist", 18, [0.25, 0.0, 0.0]),
    ("right_wrist", 19, [-0.25, 0.0, 0.0]),
    ("left_hand", 20, [0.08, 0.0, 0.0]),
    ("right_hand", 21, [-0.08, 0.0, 0.0]),
];

impl Default for Skeleton {
    /// 24 joints in SMPL order, T-pose lying in the image (`z = 0`) plane,
    /// `+y` up and the subject's left along `+x`.
    fn default() -> Self {
        Skeleton {
            names: SMPL_LIKE.iter().map(|(n, _, _)| n.to_string()).collect(),
            parent: SMPL_LIKE
                .iter()
                .map(|(_, p, _)| usize::try_from(*p).ok())
                .collect(),
            offsets: SMPL_LIKE
                .iter()
                .map(|(_, _, o)| Vector3::new(o[0], o[1], o[2]))
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JointLine {
    joint: usize,
    name: String,
    parent: i64,
    offset: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct SkeletonHeader {
    format: String,
    version: u32,
    joints: usize,
}

pub const SKELETON_FORMAT: &str = "so3mar-skeleton";

impl Skeleton {
    /// Validates the tree: one root at index 0, parents precede children,
    /// non-root offsets have positive length.
    pub fn new(
        names: Vec<String>,
        parent: Vec<Option<usize>>,
        offsets: Vec<Vector3<f64>>,
    ) -> Result<Self> {
        let j = parent.len();
        if j == 0 || names.len() != j || offsets.len() != j {
            return Err(Error::InvalidArgument("skeleton arrays disagree in length".into()));
        }
        if parent[0].is_some() {
            return Err(Error::InvalidArgument("joint 0 must be the root".into()));
        }
        for (i, p) in parent.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "joint {i} needs a parent with a smaller index"
                    )))
                }
            }
            let len = offsets[i].norm();
            if !(len > 0.0 && len.is_finite()) {
                return Err(Error::InvalidArgument(format!("joint {i} has bone length {len}")));
            }
        }
        Ok(Skeleton {
            names,
            parent,
            offsets,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.parent.len()
    }

    /// One bone per non-root joint; bone `j − 1` ends at joint `j`.
    pub fn num_bones(&self) -> usize {
        self.parent.len() - 1
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parent[j]
    }

    pub fn offset(&self, j: usize) -> &Vector3<f64> {
        &self.offsets[j]
    }

    pub fn name(&self, j: usize) -> &str {
        &self.names[j]
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_joints()).filter(move |&c| self.parent[c] == Some(j))
    }

    /// Whether `j` lies in the subtree rooted at `root` (inclusive).
    pub fn in_subtree(&self, mut j: usize, root: usize) -> bool {
        loop {
            if j == root {
                return true;
            }
            match self.parent[j] {
                Some(p) => j = p,
                None => return false,
            }
        }
    }

    pub fn to_text(&self) -> String {
        let header = SkeletonHeader {
            format: SKELETON_FORMAT.into(),
            version: 1,
            joints: self.num_joints(),
        };
        let mut s = serde_json::to_string(&header).expect("header serializes");
        s.push('\n');
        for j in 0..self.num_joints() {
            let o = &self.offsets[j];
            s.push_str(&format!(
                "{{\"joint\":{j},\"name\":\"{}\",\"parent\":{},\"offset\":[{},{},{}]}}\n",
                self.names[j],
                self.parent[j].map_or(-1, |p| p as i64),
                fmt_f64(o[0]),
                fmt_f64(o[1]),
                fmt_f64(o[2]),
            ));
        }
        s
    }

    pub fn from_text(text: &str, location: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::format(location, "empty skeleton file"))?;
        let header: SkeletonHeader = serde_json::from_str(first)
            .map_err(|e| Error::format(format!("{location}:1"), e.to_string()))?;
        if header.format != SKELETON_FORMAT || header.version != 1 {
            return Err(Error::format(
                format!("{location}:1"),
                format!("unsupported skeleton format {} v{}", header.format, header.version),
            ));
        }
        let (mut names, mut parent, mut offsets) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines {
            let at = format!("{location}:{}", i + 1);
            let jl: JointLine =
                serde_json::from_str(line).map_err(|e| Error::format(&at, e.to_string()))?;
            if jl.joint != names.len() {
                return Err(Error::format(at, format!("expected joint {}", names.len())));
            }
            names.push(jl.name);
            parent.push(usize::try_from(jl.parent).ok());
            offsets.push(Vector3::from(jl.offset));
        }
        if names.len() != header.joints {
            return Err(Error::format(
                location,
                format!("header says {} joints, found {}", header.joints, names.len()),
            ));
        }
        Skeleton::new(names, parent, offsets)
    }

    /// Hex digest of the canonical text form (first 16 characters of SHA-256).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

/// Scientific notation with 17 significant digits; parses back bit-exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Orthographic camera: `(u, v) = s·(x, y) + (tx, ty)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub s: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Camera {
    pub const IDENTITY: Camera = Camera {
        s: 1.0,
        tx: 0.0,
        ty: 0.0,
    };
}

/// Joint rotations (local, relative to the parent frame), camera and
/// per-bone log-scales.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub theta: Vec<Rotation>,
    pub pi: Camera,
    pub beta: Vec<f64>,
}

/// 2D keypoints with visibility; hidden keypoints hold NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub keypoints: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl Observation {
    pub fn new(j2d: &[[f64; 2]], visible: Vec<bool>) -> Result<Self> {
        if j2d.len() != visible.len() {
            return Err(Error::InvalidArgument("keypoint and flag counts differ".into()));
        }
        let keypoints = j2d
            .iter()
            .zip(&visible)
            .map(|(p, v)| if *v { *p } else { [f64::NAN; 2] })
            .collect();
        Ok(Observation { keypoints, visible })
    }

    pub fn num_joints(&self) -> usize {
        self.visible.len()
    }

    pub fn keypoint(&self, j: usize) -> Option<[f64; 2]> {
        self.visible[j].then_some(self.keypoints[j])
    }
}

/// Global joint rotations and positions. Root sits at the origin.
pub fn forward_kinematics_full(
    theta: &[Rotation],
    beta: &[f64],
    skel: &Skeleton,
) -> Result<(Vec<Matrix3<f64>>, Vec<Vector3<f64>>)> {
    let j = skel.num_joints();
    if theta.len() != j || beta.len() != skel.num_bones() {
        return Err(Error::Shape {
            op: "forward_kinematics",
            detail: format!("{} rotations and {} bone scales for {j} joints", theta.len(), beta.len()),
        });
    }
    let mut g = Vec::with_capacity(j);
    let mut p = Vec::with_capacity(j);
    g.push(*theta[0].matrix());
    p.push(Vector3::zeros());
    for i in 1..j {
        let par = skel.parent[i].expect("non-root has a parent");
        let gp: Matrix3<f64> = g[par];
        p.push(p[par] + gp * (skel.offsets[i] * beta[i - 1].exp()));
        g.push(gp * theta[i].matrix());
    }
    Ok((g, p))
}

pub fn forward_kinematics(theta: &[Rotation], beta: &[f64], skel: &Skeleton) -> Result<Vec<[f64; 3]>> {
    let (_, p) = forward_kinematics_full(theta, beta, skel)?;
    Ok(p.iter().map(|v| [v[0], v[1], v[2]]).collect())
}

pub fn project(j3d: &[[f64; 3]], pi: &Camera) -> Result<Vec<[f64; 2]>> {
    if !(pi.s > 0.0) {
        return Err(Error::InvalidArgument(format!("camera scale {} must be positive", pi.s)));
    }
    Ok(j3d
        .iter()
        .map(|p| [pi.s * p[0] + pi.tx, pi.s * p[1] + pi.ty])
        .collect())
}

/// Reflection through the image plane, `diag(1, 1, −1)`.
pub fn depth_mirror() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0))
}

/// `S θ_j S` for every joint. With all rest offsets in the image plane this
/// mirrors every joint position in depth and leaves the 2D projection unchanged.
pub fn mirror_pose(theta: &[Rotation]) -> Vec<Rotation> {
    let s = depth_mirror();
    theta
        .iter()
        .map(|r| Rotation::from_matrix_unchecked(s * r.matrix() * s))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mode {
    pub means: Vec<Rotation>,
    /// Per-axis standard deviation of the tangent perturbation (radians).
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseMixture {
    pub modes: Vec<Mode>,
    pub weights: Vec<f64>,
}

impl PoseMixture {
    pub fn new(modes: Vec<Mode>, weights: Vec<f64>) -> Result<Self> {
        if modes.is_empty() || modes.len() != weights.len() {
            return Err(Error::InvalidArgument("mixture needs one weight per mode".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mixture weights {weights:?} must sum to 1")));
        }
        let j = modes[0].means.len();
        for m in &modes {
            if m.means.len() != j || !(m.std >= 0.0) {
                return Err(Error::InvalidArgument("malformed mixture mode".into()));
            }
        }
        Ok(PoseMixture { modes, weights })
    }

    pub fn num_joints(&self) -> usize {
        self.modes[0].means.len()
    }

    /// Draws a mode index and a pose `mean_j · Exp(w_j)` with `w_j ~ N(0, std² I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, Vec<Rotation>)> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.modes.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let mode = &self.modes[k];
        let mut out = Vec::with_capacity(mode.means.len());
        for m in &mode.means {
            let w = sample_tangent(mode.std, rng)?;
            out.push(m.compose(&exp_map(&w)));
        }
        Ok((k, out))
    }
}

pub fn sample_pose<R: Rng + ?Sized>(mix: &PoseMixture, rng: &mut R) -> Result<Vec<Rotation>> {
    Ok(mix.sample(rng)?.1)
}

/// Joints whose rotation differs between the two benchmark modes.
pub const AMBIGUOUS_JOINTS: [usize; 2] = [16, 18];
/// Keypoints hidden in the occluded benchmark split: the left arm below the shoulder.
pub const OCCLUDED_ARM: [usize; 3] = [18, 20, 22];

pub const BENCHMARK_SHOULDER: f64 = 0.9;
pub const BENCHMARK_ELBOW: f64 = -0.6;
pub const BENCHMARK_STD: f64 = 0.08;

/// Two equally likely poses that differ only in the left arm, which swings
/// towards or away from the camera. The modes are depth mirrors of each
/// other, so any pose and its mirror project to identical keypoints.
pub fn ambiguity_benchmark(std: f64) -> Result<PoseMixture> {
    let mut a = vec![Rotation::identity(); NUM_JOINTS];
    a[AMBIGUOUS_JOINTS[0]] = Rotation::rot_y(BENCHMARK_SHOULDER);
    a[AMBIGUOUS_JOINTS[1]] = Rotation::rot_y(BENCHMARK_ELBOW);
    let b = mirror_pose(&a);
    PoseMixture::new(
        vec![Mode { means: a, std }, Mode { means: b, std }],
        vec![0.5, 0.5],
    )
}

/// A single fixed pose (zero spread).
pub fn point_mass(theta: Vec<Rotation>) -> Result<PoseMixture> {
    PoseMixture::new(vec![Mode { means: theta, std: 0.0 }], vec![1.0])
}

/// The exact posterior support given the keypoints of `theta` under the
/// benchmark: the pose itself and its depth mirror.
pub fn posterior_modes(theta: &[Rotation]) -> [Vec<Rotation>; 2] {
    [theta.to_vec(), mirror_pose(theta)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::{geodesic_distance, TangentVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close3(a: &[f64; 3], b: &Vector3<f64>, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() < tol)
    }

    #[test]
    fn rest_pose_is_cumulative_offsets() {
        let skel = Skeleton::default();
        let p = forward_kinematics(&vec![Rotation::identity(); 24], &[0.0; 23], &skel).unwrap();
        for j in 0..24 {
            let mut expect = Vector3::zeros();
            let mut k = j;
            while let Some(par) = skel.parent(k) {
                expect += skel.offset(k);
                k = par;
            }
            assert!(close3(&p[j], &expect, 1e-15));
        }
    }

    #[test]
    fn root_rotation_is_rigid() {
        let skel = Skeleton::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mix = ambiguity_benchmark(0.3).unwrap();
        let theta = sample_pose(&mix, &mut rng).unwrap();
        let beta: Vec<f64> = (0..23).map(|i| 0.01 * i as f64).collect();
        let r = exp_map(&TangentVector::new(0.3, -1.1, 0.7));
        let mut rotated = theta.clone();
        rotated[0] = r.compose(&theta[0]);
        let p = forward_kinematics(&theta, &beta, &skel).unwrap();
        let q = forward_kinematics(&rotated, &beta, &skel).unwrap();
        for (a, b) in p.iter().zip(&q) {
            let ra = r.rotate(&Vector3::from(*a));
            assert!(close3(b, &ra, 1e-9));
        }
    }

    #[test]
    fn doubling_one_bone_shifts_its_subtree() {
        let skel = Skeleton::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = sample_pose(&ambiguity_benchmark(0.4).unwrap(), &mut rng).unwrap();
        let bone_joint = 18;
        let mut beta = vec![0.0; 23];
        beta[bone_joint - 1] = 2f64.ln();
        let p = forward_kinematics(&theta, &beta, &skel).unwrap();
        // independent recomputation with the doubled base length
        let mut offsets: Vec<_> = (0..24).map(|j| *skel.offset(j)).collect();
        offsets[bone_joint] *= 2.0;
        let names = (0..24).map(|j| skel.name(j).to_string()).collect();
        let parents = (0..24).map(|j| skel.parent(j)).collect();
        let doubled = Skeleton::new(names, parents, offsets).unwrap();
        let q = forward_kinematics(&theta, &[0.0; 23], &doubled).unwrap();
        let base = forward_kinematics(&theta, &[0.0; 23], &skel).unwrap();
        let (g, _) = forward_kinematics_full(&theta, &[0.0; 23], &skel).unwrap();
        let shift = g[16] * skel.offset(bone_joint);
        for j in 0..24 {
            assert!(close3(&p[j], &Vector3::from(q[j]), 1e-12));
            let expect = if skel.in_subtree(j, bone_joint) {
                Vector3::from(base[j]) + shift
            } else {
                Vector3::from(base[j])
            };
            assert!(close3(&p[j], &expect, 1e-12));
        }
    }

    #[test]
    fn projection_examples() {
        let pts = vec![[0.1, -0.2, 5.0], [0.3, 0.4, -1.0]];
        let id = project(&pts, &Camera::IDENTITY).unwrap();
        assert_eq!(id, vec![[0.1, -0.2], [0.3, 0.4]]);
        let deeper = vec![[0.1, -0.2, -3.0], [0.3, 0.4, 8.0]];
        assert_eq!(project(&deeper, &Camera::IDENTITY).unwrap(), id);
        let two = project(&pts, &Camera { s: 2.0, tx: 0.0, ty: 0.0 }).unwrap();
        assert_eq!(two, vec![[0.2, -0.4], [0.6, 0.8]]);
        assert!(project(&pts, &Camera { s: 0.0, tx: 0.0, ty: 0.0 }).is_err());
    }

    #[test]
    fn mirrored_poses_share_keypoints() {
        let skel = Skeleton::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mix = ambiguity_benchmark(BENCHMARK_STD).unwrap();
        let cam = Camera { s: 1.1, tx: 0.05, ty: -0.02 };
        for _ in 0..50 {
            let theta = sample_pose(&mix, &mut rng).unwrap();
            let [a, b] = posterior_modes(&theta);
            let pa = forward_kinematics(&a, &[0.0; 23], &skel).unwrap();
            let pb = forward_kinematics(&b, &[0.0; 23], &skel).unwrap();
            let ua = project(&pa, &cam).unwrap();
            let ub = project(&pb, &cam).unwrap();
            for (x, y) in ua.iter().zip(&ub) {
                assert!((x[0] - y[0]).abs() < 1e-12 && (x[1] - y[1]).abs() < 1e-12);
            }
            for &j in &AMBIGUOUS_JOINTS {
                assert!(geodesic_distance(&a[j], &b[j]) > 0.6);
            }
        }
    }

    #[test]
    fn depth_swing_keeps_keypoint() {
        // a small swing of the straight arm about the image-plane y axis moves
        // the wrist in depth to first order and in the image only to second order
        let skel = Skeleton::default();
        let mut theta = vec![Rotation::identity(); 24];
        let base = forward_kinematics(&theta, &[0.0; 23], &skel).unwrap();
        let delta = 1e-4;
        theta[18] = Rotation::rot_y(delta);
        let moved = forward_kinematics(&theta, &[0.0; 23], &skel).unwrap();
        let uv_a = project(&base, &Camera::IDENTITY).unwrap();
        let uv_b = project(&moved, &Camera::IDENTITY).unwrap();
        let duv = (uv_a[20][0] - uv_b[20][0]).hypot(uv_a[20][1] - uv_b[20][1]);
        let dz = (base[20][2] - moved[20][2]).abs();
        assert!(dz > 0.2 * delta);
        assert!(duv < 1e-3 * dz);
    }

    #[test]
    fn mixture_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mix = ambiguity_benchmark(0.0).unwrap();
        let theta = sample_pose(&mix, &mut rng).unwrap();
        assert!(mix.modes.iter().any(|m| m.means == theta));

        let single = point_mass(vec![Rotation::rot_z(0.2); 24]).unwrap();
        for _ in 0..20 {
            assert_eq!(single.sample(&mut rng).unwrap().0, 0);
        }

        let skewed = PoseMixture::new(mix.modes.clone(), vec![0.3, 0.7]).unwrap();
        let n = 10_000;
        let hits = (0..n).filter(|_| skewed.sample(&mut rng).unwrap().0 == 0).count();
        assert!((hits as f64 / n as f64 - 0.3).abs() < 0.02);
        assert!(PoseMixture::new(mix.modes.clone(), vec![0.3, 0.6]).is_err());
    }

    #[test]
    fn skeleton_text_round_trip() {
        let skel = Skeleton::default();
        let text = skel.to_text();
        let back = Skeleton::from_text(&text, "mem").unwrap();
        assert_eq!(back, skel);
        assert_eq!(back.hash(), skel.hash());
        assert_eq!(skel.hash().len(), 16);
        let broken = text.replacen("\"parent\":0", "\"parent\":5", 1);
        assert!(Skeleton::from_text(&broken, "mem").is_err());
    }

    #[test]
    fn skeleton_validation() {
        let names = vec!["a".to_string(), "b".to_string()];
        let offs = vec![Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0)];
        assert!(Skeleton::new(names.clone(), vec![None, Some(0)], offs.clone()).is_ok());
        assert!(Skeleton::new(names.clone(), vec![None, Some(1)], offs.clone()).is_err());
        assert!(Skeleton::new(names.clone(), vec![None, None], offs).is_err());
        let zero = vec![Vector3::zeros(); 2];
        assert!(Skeleton::new(names, vec![None, Some(0)], zero).is_err());
    }
}
