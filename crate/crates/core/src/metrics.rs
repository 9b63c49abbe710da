//! Pose-estimation and generation metrics.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, fmt_f64, PoseSequence, Skeleton};
use crate::so3::{geodesic_distance, Rotation};

fn check_pair(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "joint metric",
            detail: format!("{} predicted vs {} ground-truth joints", pred.len(), gt.len()),
        });
    }
    if pred.iter().chain(gt).flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("joint positions"));
    }
    Ok(())
}

/// Subtracts joint 0 from every joint.
pub fn root_align(joints: &[[f64; 3]]) -> Vec<Vector3<f64>> {
    let root = joints.first().map_or(Vector3::zeros(), |r| Vector3::from(*r));
    joints.iter().map(|p| Vector3::from(*p) - root).collect()
}

fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

/// Root-aligned mean per-joint error, millimetres (inputs in metres).
pub fn mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(1000.0 * mean_distance(&root_align(pred), &root_align(gt)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaResult {
    pub mm: f64,
    /// Covariance was rank-deficient and only translation was aligned.
    pub fallback: bool,
}

/// Similarity transform `(s, R, t)` minimising `Σ‖s R p + t − g‖²`.
pub fn umeyama(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Option<(f64, Matrix3<f64>, Vector3<f64>)> {
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<Vector3<f64>>() / n;
    let mg = gt.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (pc, gc) = (p - mp, g - mg);
        h += gc * pc.transpose();
        var_p += pc.norm_squared();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv = svd.singular_values;
    if var_p <= 1e-24 || sv[order[1]] <= 1e-12 * sv[order[0]].max(1e-300) {
        return None;
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let r = u * d * v_t;
    let s = (0..3).map(|i| sv[i] * d[(i, i)]).sum::<f64>() / var_p;
    let t = mg - s * r * mp;
    Some((s, r, t))
}

/// MPJPE after optimal similarity alignment of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<PaResult> {
    check_pair(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::InvalidArgument("Procrustes alignment needs at least 3 joints".into()));
    }
    let p: Vec<Vector3<f64>> = pred.iter().map(|x| Vector3::from(*x)).collect();
    let g: Vec<Vector3<f64>> = gt.iter().map(|x| Vector3::from(*x)).collect();
    match umeyama(&p, &g) {
        Some((s, r, t)) => {
            let aligned: Vec<_> = p.iter().map(|x| s * r * x + t).collect();
            Ok(PaResult {
                mm: 1000.0 * mean_distance(&aligned, &g),
                fallback: false,
            })
        }
        None => {
            let n = p.len() as f64;
            let shift = (g.iter().sum::<Vector3<f64>>() - p.iter().sum::<Vector3<f64>>()) / n;
            let aligned: Vec<_> = p.iter().map(|x| x + shift).collect();
            Ok(PaResult {
                mm: 1000.0 * mean_distance(&aligned, &g),
                fallback: true,
            })
        }
    }
}

/// Root-aligned joints flattened to `3J` values.
pub fn joint_features(joints: &[[f64; 3]]) -> Vec<f64> {
    root_align(joints).iter().flat_map(|v| [v.x, v.y, v.z]).collect()
}

/// Root-aligned FK joints of a pose, flattened to `3J` values.
pub fn pose_features(pose: &PoseSequence, skel: &Skeleton) -> Result<Vec<f64>> {
    Ok(joint_features(&forward_kinematics(&pose.theta, &pose.beta, skel)?))
}

/// Mean pairwise mean-per-joint distance between joint sets, centimetres.
pub fn apd_joints(samples: &[Vec<[f64; 3]>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!("APD needs at least 2 samples, got {}", samples.len())));
    }
    let joints: Vec<_> = samples.iter().map(|s| root_align(s)).collect();
    if joints.iter().any(|j| j.len() != joints[0].len()) {
        return Err(Error::Shape {
            op: "apd",
            detail: "samples differ in joint count".into(),
        });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..joints.len() {
        for b in a + 1..joints.len() {
            total += mean_distance(&joints[a], &joints[b]);
            pairs += 1;
        }
    }
    Ok(100.0 * total / pairs as f64)
}

/// APD of poses through forward kinematics.
pub fn apd(samples: &[PoseSequence], skel: &Skeleton) -> Result<f64> {
    let joints = samples
        .iter()
        .map(|s| forward_kinematics(&s.theta, &s.beta, skel))
        .collect::<Result<Vec<_>>>()?;
    apd_joints(&joints)
}

fn moments(set: &[Vec<f64>], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = set.len();
    if n < dim + 2 {
        return Err(Error::InvalidArgument(format!("FID needs at least {} samples of dimension {dim}, got {n}", dim + 2)));
    }
    let mut x = DMatrix::zeros(n, dim);
    for (i, row) in set.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::Shape {
                op: "fid",
                detail: format!("feature {i} has {} entries, expected {dim}", row.len()),
            });
        }
        for (k, v) in row.iter().enumerate() {
            x[(i, k)] = *v;
        }
    }
    let mean = x.row_mean().transpose();
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = x.transpose() * &x / (n - 1) as f64;
    Ok((mean, cov))
}

const PSD_TOL: f64 = -1e-8;

fn psd_sqrt(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(&l) = eig.eigenvalues.iter().find(|&&l| l < PSD_TOL) {
        return Err(Error::NotPsd(l));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    Ok((root, roots))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = a.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(Error::InvalidArgument("empty feature set".into()));
    }
    let (mu_a, cov_a) = moments(a, dim)?;
    let (mu_b, cov_b) = moments(b, dim)?;
    let (root_a, _) = psd_sqrt(&cov_a)?;
    let inner = &root_a * &cov_b * &root_a;
    let (_, cross) = psd_sqrt(&inner)?;
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross.sum();
    Ok(d.max(0.0))
}

/// Minimum of `metric` over the hypotheses.
pub fn best_of_q<T, F>(hypotheses: &[T], mut metric: F) -> Result<f64>
where
    F: FnMut(&T) -> Result<f64>,
{
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("best-of-Q needs at least one hypothesis".into()));
    }
    let mut best = f64::INFINITY;
    for h in hypotheses {
        best = best.min(metric(h)?);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    pub fraction: f64,
    /// Samples within the threshold of each mode.
    pub hits: Vec<usize>,
}

/// Mean geodesic distance over `joints` between two poses.
pub fn subset_distance(a: &[Rotation], b: &[Rotation], joints: &[usize]) -> f64 {
    joints
        .iter()
        .map(|&j| geodesic_distance(&a[j], &b[j]))
        .sum::<f64>()
        / joints.len() as f64
}

pub fn mode_coverage(samples: &[Vec<Rotation>], modes: &[Vec<Rotation>], joints: &[usize], threshold: f64) -> Result<Coverage> {
    if modes.is_empty() || joints.is_empty() {
        return Err(Error::InvalidArgument("coverage needs modes and joints".into()));
    }
    let hits: Vec<usize> = modes
        .iter()
        .map(|m| samples.iter().filter(|s| subset_distance(s, m, joints) < threshold).count())
        .collect();
    let covered = hits.iter().filter(|&&h| h > 0).count();
    Ok(Coverage {
        fraction: covered as f64 / modes.len() as f64,
        hits,
    })
}

/// Mean and 95% normal-approximation half-width; the half-width is NaN
/// for fewer than two items.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

impl MetricRow {
    pub fn from_items(name: &str, values: &[f64]) -> Self {
        let (mean, ci95) = mean_ci95(values);
        MetricRow {
            name: name.to_string(),
            mean,
            ci95,
            n: values.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub q: usize,
    pub rows: Vec<MetricRow>,
    /// Items where Procrustes fell back to translation-only alignment.
    pub pa_fallbacks: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "metric,mean,ci95,n,q";

    pub fn row(&self, name: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.name, fmt_f64(r.mean), fmt_f64(r.ci95), r.n, self.q));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("Q = {}\n", self.q);
        for r in &self.rows {
            out.push_str(&format!("{:<12} {:>10.4} ± {:.4}  (n={})\n", r.name, r.mean, r.ci95, r.n));
        }
        if self.pa_fallbacks > 0 {
            out.push_str(&format!("PA alignment fell back to translation-only on {} items\n", self.pa_fallbacks));
        }
        out
    }
}
