//! Rotation group machinery: hat/vee, exponential and logarithm maps,
//! composition, geodesic distance, projection and tangent-space noise.
//!
//! Rotations are stored as 3×3 matrices. Tangent vectors are axis-angle
//! 3-vectors (direction = axis, norm = angle in radians).

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Below this angle the exp/log maps switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-4;
/// Within this distance of π the log map extracts the axis from `R + Rᵀ`.
pub const NEAR_PI: f64 = 1e-6;

/// Element of so(3) in axis-angle coordinates.
#[derive(Clone, Copy, PartialEq)]
pub struct TangentVector(pub Vector3<f64>);

impl TangentVector {
    pub const ZERO: TangentVector = TangentVector(Vector3::new(0.0, 0.0, 0.0));

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        TangentVector(Vector3::new(x, y, z))
    }

    pub fn from_slice(v: &[f64]) -> Self {
        TangentVector(Vector3::new(v[0], v[1], v[2]))
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn scale(&self, s: f64) -> Self {
        TangentVector(self.0 * s)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }
}

impl fmt::Debug for TangentVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TangentVector[{}, {}, {}]", self.0.x, self.0.y, self.0.z)
    }
}

impl std::ops::Neg for TangentVector {
    type Output = TangentVector;
    fn neg(self) -> Self {
        TangentVector(-self.0)
    }
}

/// A skew-symmetric matrix produced by [`hat`]; antisymmetric by construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkewMatrix(Matrix3<f64>);

impl SkewMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// A 3×3 special-orthogonal matrix.
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.0;
        write!(
            f,
            "Rotation[[{:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}]]",
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)]
        )
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

impl Rotation {
    /// Tolerance used by [`Rotation::from_matrix`] for orthogonality and determinant.
    pub const TOLERANCE: f64 = 1e-9;

    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Checked constructor.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("rotation matrix"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if ortho > Self::TOLERANCE || (det - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "not a rotation: |MᵀM - I| = {ortho:e}, det = {det}"
            )));
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix that the caller knows to be a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Row-major 9 entries.
    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::InvalidArgument(format!(
                "expected 9 entries, got {}",
                v.len()
            )));
        }
        Self::from_matrix(Matrix3::from_row_slice(v))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn rot_x(angle: f64) -> Self {
        exp_map(&TangentVector::new(angle, 0.0, 0.0))
    }

    pub fn rot_y(angle: f64) -> Self {
        exp_map(&TangentVector::new(0.0, angle, 0.0))
    }

    pub fn rot_z(angle: f64) -> Self {
        exp_map(&TangentVector::new(0.0, 0.0, angle))
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        compose(self, other)
    }

    pub fn inverse(&self) -> Rotation {
        inverse(self)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Frobenius distance of `RᵀR` from the identity plus determinant error.
    pub fn drift(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
            + (self.0.determinant() - 1.0).abs()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        compose(&self, &rhs)
    }
}

impl std::ops::Mul for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        compose(self, rhs)
    }
}

/// Skew-symmetric matrix with `hat(v) · w = v × w`.
pub fn hat(v: &TangentVector) -> Result<SkewMatrix> {
    if !v.is_finite() {
        return Err(Error::NonFinite("tangent vector"));
    }
    Ok(SkewMatrix(hat_unchecked(&v.0)))
}

pub(crate) fn hat_unchecked(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(s: &SkewMatrix) -> TangentVector {
    let m = &s.0;
    TangentVector::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula.
pub fn exp_map(v: &TangentVector) -> Rotation {
    let theta2 = v.0.norm_squared();
    let theta = theta2.sqrt();
    let k = hat_unchecked(&v.0);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Principal-branch logarithm, `‖result‖ ∈ [0, π]`.
///
/// At an angle of exactly π the axis sign is chosen so that the first
/// nonzero component is positive.
pub fn log_map(r: &Rotation) -> TangentVector {
    let m = &r.0;
    let s = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    ) * 0.5;
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin_theta = s.norm();
    let theta = sin_theta.atan2(c);

    if theta < SMALL_ANGLE {
        return TangentVector(s * (1.0 + theta * theta / 6.0));
    }
    if std::f64::consts::PI - theta >= NEAR_PI {
        return TangentVector(s * (theta / sin_theta));
    }

    // (R + Rᵀ)/2 - cos θ I = (1 - cos θ) n nᵀ
    let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * c;
    let i = (0..3)
        .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
        .unwrap_or(0);
    let mut axis = sym.column(i).into_owned();
    let n = axis.norm();
    if n == 0.0 {
        return TangentVector::ZERO;
    }
    axis /= n;
    let d = axis.dot(&s);
    if d.abs() > 1e-14 {
        if d < 0.0 {
            axis = -axis;
        }
    } else if let Some(first) = axis.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            axis = -axis;
        }
    }
    TangentVector(axis * theta)
}

pub fn compose(a: &Rotation, b: &Rotation) -> Rotation {
    Rotation(a.0 * b.0)
}

pub fn inverse(r: &Rotation) -> Rotation {
    Rotation(r.0.transpose())
}

/// Rotation angle of `aᵀb`, in `[0, π]`.
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    log_map(&Rotation(a.0.transpose() * b.0)).norm()
}

/// Isotropic tangent Gaussian with per-axis standard deviation `std`.
pub fn sample_tangent<R: Rng + ?Sized>(std: f64, rng: &mut R) -> Result<TangentVector> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise std must be finite and non-negative, got {std}"
        )));
    }
    let x: f64 = rng.sample(StandardNormal);
    let y: f64 = rng.sample(StandardNormal);
    let z: f64 = rng.sample(StandardNormal);
    Ok(TangentVector::new(x * std, y * std, z * std))
}

/// `exp_map(w)` with `w ~ N(0, std² I₃)`.
pub fn sample_tangent_gaussian<R: Rng + ?Sized>(std: f64, rng: &mut R) -> Result<Rotation> {
    Ok(exp_map(&sample_tangent(std, rng)?))
}

/// Nearest rotation in Frobenius norm (polar factor with a determinant guard).
pub fn project_to_so3(m: &Matrix3<f64>) -> Result<Rotation> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("matrix"));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Singular),
    };
    let sv = svd.singular_values;
    let max = sv.max();
    let min = sv.min();
    if max == 0.0 || min <= 1e-12 * max {
        return Err(Error::Singular);
    }
    let d = (u * v_t).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    Ok(Rotation(u * correction * v_t))
}

/// Projection of the entrywise average, the chordal L2 mean.
pub fn chordal_mean(rotations: &[Rotation]) -> Result<Rotation> {
    if rotations.is_empty() {
        return Err(Error::InvalidArgument("chordal mean of empty set".into()));
    }
    let sum = rotations
        .iter()
        .fold(Matrix3::zeros(), |acc, r| acc + r.0);
    project_to_so3(&(sum / rotations.len() as f64))
}

/// Root-mean-square geodesic distance to the chordal mean.
pub fn geodesic_std(rotations: &[Rotation]) -> Result<f64> {
    let mean = chordal_mean(rotations)?;
    let ms = rotations
        .iter()
        .map(|r| geodesic_distance(&mean, r).powi(2))
        .sum::<f64>()
        / rotations.len() as f64;
    Ok(ms.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn hat_examples() {
        let z = hat(&TangentVector::ZERO).unwrap();
        assert_eq!(*z.matrix(), Matrix3::zeros());
        let x = hat(&TangentVector::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(
            *x.matrix(),
            Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
        );
        assert!(hat(&TangentVector::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn hat_is_cross_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v = sample_tangent(1.0, &mut rng).unwrap();
            let w = sample_tangent(1.0, &mut rng).unwrap();
            let h = hat(&v).unwrap();
            assert!((h.matrix() * w.0 - v.0.cross(&w.0)).norm() < 1e-14);
            assert_eq!(vee(&h), v);
            assert_eq!(h.matrix() + h.matrix().transpose(), Matrix3::zeros());
        }
    }

    #[test]
    fn exp_examples() {
        assert_eq!(exp_map(&TangentVector::ZERO), Rotation::identity());
        let q = exp_map(&TangentVector::new(0.0, 0.0, FRAC_PI_2));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(close(q.matrix(), &expected, 1e-15));
        let h = exp_map(&TangentVector::new(PI, 0.0, 0.0));
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        assert!(close(h.matrix(), &expected, 1e-15));
    }

    #[test]
    fn log_examples() {
        assert_eq!(log_map(&Rotation::identity()), TangentVector::ZERO);
        let v = TangentVector::new(0.3, -0.2, 0.1);
        assert!((log_map(&exp_map(&v)).0 - v.0).norm() < 1e-9);
        let half = Rotation::from_matrix(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)))
            .unwrap();
        let l = log_map(&half);
        assert!((l.0 - Vector3::new(PI, 0.0, 0.0)).norm() < 1e-12, "{l:?}");
        // axis sign convention at exactly π
        let yz = exp_map(&TangentVector::new(0.0, -PI, 0.0));
        let l = log_map(&yz);
        assert!((l.0 - Vector3::new(0.0, PI, 0.0)).norm() < 1e-12, "{l:?}");
    }

    #[test]
    fn log_near_pi_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..2000 {
            let axis = sample_tangent(1.0, &mut rng).unwrap();
            let axis = axis.scale(1.0 / axis.norm());
            let gap = [0.0, 1e-12, 1e-9, 1e-7, 5e-7, 2e-6, 1e-4, 1e-2][k % 8];
            let r = exp_map(&axis.scale(PI - gap));
            let back = exp_map(&log_map(&r));
            assert!(close(back.matrix(), r.matrix(), 1e-7), "gap {gap}");
            assert!(log_map(&r).norm() <= PI + 1e-15);
        }
    }

    #[test]
    fn small_angle_branch_is_accurate() {
        for &a in &[1e-12, 1e-8, 5e-5, 9.9e-5, 1.01e-4, 1e-3] {
            let v = TangentVector::new(a, -0.5 * a, 0.25 * a);
            let back = log_map(&exp_map(&v));
            assert!((back.0 - v.0).norm() <= 1e-15 + 1e-9 * a, "angle {a}");
        }
    }

    #[test]
    fn compose_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = sample_tangent(1.0, &mut rng).unwrap();
        let r = exp_map(&v);
        assert!(close(compose(&Rotation::identity(), &r).matrix(), r.matrix(), 0.0 + 1e-15));
        assert!(close(inverse(&r).matrix(), exp_map(&-v).matrix(), 1e-14));
        assert!(close(
            compose(&r, &inverse(&r)).matrix(),
            &Matrix3::identity(),
            1e-9
        ));
        let rz = Rotation::rot_z(FRAC_PI_2);
        assert!(close(
            compose(&rz, &rz).matrix(),
            Rotation::rot_z(PI).matrix(),
            1e-12
        ));
    }

    #[test]
    fn geodesic_examples() {
        let r = Rotation::rot_x(0.7);
        assert_eq!(geodesic_distance(&r, &r), 0.0);
        let d = geodesic_distance(&Rotation::identity(), &Rotation::rot_z(FRAC_PI_2));
        assert!((d - FRAC_PI_2).abs() < 1e-14);
    }

    #[test]
    fn triangle_inequality_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let a = sample_tangent_gaussian(2.0, &mut rng).unwrap();
            let b = sample_tangent_gaussian(2.0, &mut rng).unwrap();
            let c = sample_tangent_gaussian(2.0, &mut rng).unwrap();
            let ab = geodesic_distance(&a, &b);
            let bc = geodesic_distance(&b, &c);
            let ac = geodesic_distance(&a, &c);
            assert!(ac <= ab + bc + 1e-9);
            assert!((ab - geodesic_distance(&b, &a)).abs() < 1e-12);
        }
    }

    #[test]
    fn tangent_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            assert_eq!(
                sample_tangent_gaussian(0.0, &mut rng).unwrap(),
                Rotation::identity()
            );
        }
        assert!(sample_tangent_gaussian(-1.0, &mut rng).is_err());
        let a = sample_tangent_gaussian(0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_tangent_gaussian(0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_angle_matches_norm_simulation() {
        // Oracle: direct simulation of ‖N(0, 0.1² I₃)‖ with an independent stream.
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mean_angle: f64 = (0..n)
            .map(|_| log_map(&sample_tangent_gaussian(0.1, &mut rng).unwrap()).norm())
            .sum::<f64>()
            / n as f64;
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(60);
        let oracle: f64 = (0..n)
            .map(|_| {
                let x: f64 = oracle_rng.sample(StandardNormal);
                let y: f64 = oracle_rng.sample(StandardNormal);
                let z: f64 = oracle_rng.sample(StandardNormal);
                0.1 * (x * x + y * y + z * z).sqrt()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean_angle - oracle).abs() / oracle < 0.02);
        // analytic value 0.1·√(8/π)
        assert!((oracle - 0.1 * (8.0 / PI).sqrt()).abs() < 0.002);
    }

    #[test]
    fn project_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = sample_tangent_gaussian(1.5, &mut rng).unwrap();
        let p = project_to_so3(r.matrix()).unwrap();
        assert!(close(p.matrix(), r.matrix(), 1e-12));
        let p = project_to_so3(&(r.matrix() * 1.1)).unwrap();
        assert!(close(p.matrix(), r.matrix(), 1e-12));
        let perturbed = r.matrix() + Matrix3::from_fn(|i, j| 1e-6 * ((i * 3 + j) as f64 - 4.0));
        let p = project_to_so3(&perturbed).unwrap();
        assert!(Rotation::from_matrix(*p.matrix()).is_ok());
        assert!(matches!(
            project_to_so3(&Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0)),
            Err(Error::Singular)
        ));
    }

    #[test]
    fn chordal_mean_of_identical_is_itself() {
        let r = Rotation::rot_y(0.4);
        let m = chordal_mean(&[r, r, r]).unwrap();
        assert!(close(m.matrix(), r.matrix(), 1e-12));
        assert!(geodesic_std(&[r, r]).unwrap() < 1e-7);
    }
}
