//! Standalone numerical checks with measured errors, run by `so3mar oracle`.

use std::fmt;

use rand::Rng;

use crate::dataset::{build_dataset, DatasetSpec, NuisanceSpec, Occlusion, Record};
use crate::diffusion::{forward_noise, predict_x0, reverse_step_with_noise, timestep_subsequence, Schedule, Variant};
use crate::error::Result;
use crate::kinematics::{
    ambiguity_benchmark, forward_kinematics, mirror_pose, posterior_modes, project, Camera, Skeleton, AMBIGUOUS_JOINTS,
    BENCHMARK_STD, OCCLUDED_ARM,
};
use crate::model::{Model, ModelConfig};
use crate::nn::gradcheck::gradient_check;
use crate::nn::graph::Graph;
use crate::rng::{derive, domain};
use crate::so3::{exp_map, geodesic_distance, log_map, sample_tangent, Rotation, TangentVector};
use crate::training::{compute_loss, prepare_batch, Lambdas, SampleDraw};

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl Measurement {
    fn new(name: &str, value: f64, tolerance: f64) -> Self {
        Measurement {
            name: name.to_string(),
            value,
            tolerance,
        }
    }

    pub fn passes(&self) -> bool {
        self.value < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub check: String,
    pub measurements: Vec<Measurement>,
    pub notes: Vec<String>,
}

impl CheckReport {
    pub fn passes(&self) -> bool {
        self.measurements.iter().all(Measurement::passes)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.measurements {
            let verdict = if m.passes() { "PASS" } else { "FAIL" };
            writeln!(f, "{verdict} {} {}: {:.3e} (tolerance {:.0e})", self.check, m.name, m.value, m.tolerance)?;
        }
        for n in &self.notes {
            writeln!(f, "  {n}")?;
        }
        Ok(())
    }
}

/// Tangent vector with uniform direction and norm uniform in `[0, max_norm)`.
pub fn random_tangent<R: Rng + ?Sized>(max_norm: f64, rng: &mut R) -> Result<TangentVector> {
    let dir = sample_tangent(1.0, rng)?;
    let n = dir.norm().max(1e-300);
    Ok(dir.scale(rng.random_range(0.0..max_norm) / n))
}

pub fn exp_log(n: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = derive(seed, domain::ORACLE, 0);
    let (mut round, mut inverse) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let v = random_tangent(std::f64::consts::PI, &mut rng)?;
        let back = log_map(&exp_map(&v));
        round = round.max((0..3).map(|i| (back.as_array()[i] - v.as_array()[i]).abs()).fold(0.0, f64::max));
        let r = exp_map(&v);
        let again = exp_map(&log_map(&r));
        inverse = inverse.max((again.matrix() - r.matrix()).abs().max());
    }
    Ok(CheckReport {
        check: "exp-log".into(),
        measurements: vec![
            Measurement::new("max |Log(Exp v) - v|", round, 1e-9),
            Measurement::new("max |Exp(Log R) - R|", inverse, 1e-7),
        ],
        notes: vec![format!("{n} tangents, norms uniform in [0, pi)")],
    })
}

/// Full training-loss gradient of a small random model against central
/// differences on `entries` parameter entries.
pub fn grad(entries: usize, seed: u64) -> Result<CheckReport> {
    let mut measurements = Vec::new();
    for variant in [Variant::So3, Variant::Euclidean] {
        let cfg = ModelConfig {
            variant,
            width: 8,
            heads: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            den_width: 8,
            den_blocks: 1,
            time_dim: 4,
            diffusion_steps: 50,
            ..ModelConfig::default()
        };
        let skel = Skeleton::default();
        let mut model = Model::new(cfg, skel.clone(), seed)?;
        let mix = ambiguity_benchmark(0.3)?;
        let spec = DatasetSpec {
            world_name: "benchmark",
            mixture: &mix,
            skeleton: &skel,
            nuisance: NuisanceSpec::default(),
            occlusion: Occlusion::Random(0.3),
            conditional: true,
        };
        let ds = build_dataset(&spec, 2, seed)?;
        let mut rng = derive(seed, domain::ORACLE, 1);
        let recs: Vec<&Record> = ds.records.iter().collect();
        let draws: Vec<_> = (0..2)
            .map(|_| SampleDraw::draw(24, variant, 50, (0.5, 1.0), &mut rng))
            .collect();
        let prep = prepare_batch(&model, &recs, &draws, true)?;
        let lambdas = Lambdas {
            diff: 1.0,
            j3d: 1.0,
            j2d: 1.0,
        };
        // the loss reads parameters through the graph, so the store can be
        // detached while it is perturbed
        let mut store = std::mem::take(&mut model.store);
        let report = gradient_check(
            &mut store,
            &|g: &mut Graph| Ok(compute_loss(g, &model, &prep, lambdas)?.total),
            Some(entries),
            &mut rng,
        )?;
        model.store = store;
        measurements.push(Measurement::new(
            &format!("{} loss max relative error over {} entries", variant.name(), report.checked),
            report.max_rel,
            1e-4,
        ));
    }
    Ok(CheckReport {
        check: "grad".into(),
        measurements,
        notes: vec![],
    })
}

/// Inversion of the forward process and an `η = 0` chain driven by the
/// denoiser that returns the recorded noise exactly.
pub fn reverse_consistency(n: usize, steps: usize, seed: u64) -> Result<CheckReport> {
    let sched = Schedule::new(crate::diffusion::DEFAULT_T, crate::diffusion::DEFAULT_ALPHA_MAX)?;
    let mut rng = derive(seed, domain::ORACLE, 2);
    let (mut inv, mut chain) = (0.0f64, 0.0f64);
    let times = timestep_subsequence(sched.len(), steps)?;
    for _ in 0..n {
        let x0 = exp_map(&random_tangent(3.0, &mut rng)?);
        let eps = exp_map(&sample_tangent(1.0, &mut rng)?);
        let t = rng.random_range(1..=sched.len());
        let x_t = forward_noise(&x0, t, &eps, &sched)?;
        let back = predict_x0(&x_t, &log_map(&eps), t, &sched)?;
        inv = inv.max(geodesic_distance(&back, &x0));

        let mut x = forward_noise(&x0, times[0], &eps, &sched)?;
        for (i, &t) in times.iter().enumerate() {
            let t_prev = times.get(i + 1).copied().unwrap_or(0);
            let recorded = log_map(&x0.inverse().compose(&x)).scale(1.0 / sched.alpha(t)?.sqrt());
            x = reverse_step_with_noise(&x, &recorded, t, t_prev, 0.0, &sched, &TangentVector::ZERO)?;
        }
        chain = chain.max(geodesic_distance(&x, &x0));
    }
    Ok(CheckReport {
        check: "reverse-consistency".into(),
        measurements: vec![
            Measurement::new("max geodesic |predict_x0(forward_noise(x0)) - x0|", inv, 1e-7),
            Measurement::new(&format!("max geodesic error of {steps}-step eta=0 chain"), chain, 1e-5),
        ],
        notes: vec![format!("{n} cases")],
    })
}

fn keypoints(theta: &[Rotation], skel: &Skeleton) -> Result<Vec<[f64; 2]>> {
    let beta = vec![0.0; skel.num_bones()];
    project(&forward_kinematics(theta, &beta, skel)?, &Camera::IDENTITY)
}

fn max_gap(a: &[[f64; 2]], b: &[[f64; 2]], hidden: &[usize]) -> f64 {
    a.iter()
        .zip(b)
        .enumerate()
        .filter(|(j, _)| !hidden.contains(j))
        .map(|(_, (p, q))| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()))
        .fold(0.0, f64::max)
}

/// Enumerates the benchmark modes and reports which of them explain each
/// mode's keypoints, with and without the occluded arm; then checks the
/// mirror construction on random poses.
pub fn posterior(n: usize, seed: u64) -> Result<CheckReport> {
    let skel = Skeleton::default();
    let mix = ambiguity_benchmark(BENCHMARK_STD)?;
    let means: Vec<&Vec<Rotation>> = mix.modes.iter().map(|m| &m.means).collect();
    let kps = means.iter().map(|m| keypoints(m, &skel)).collect::<Result<Vec<_>>>()?;
    let mut notes = Vec::new();
    let mut wrong_sets = 0usize;
    for (split, hidden) in [("full", &[][..]), ("occluded", &OCCLUDED_ARM[..])] {
        for (a, ka) in kps.iter().enumerate() {
            let set: Vec<usize> = (0..kps.len()).filter(|&b| max_gap(ka, &kps[b], hidden) < 1e-9).collect();
            notes.push(format!("{split}: keypoints of mode {a} are explained by modes {set:?}"));
            if set != [0, 1] {
                wrong_sets += 1;
            }
        }
    }
    let sep = AMBIGUOUS_JOINTS
        .iter()
        .map(|&j| geodesic_distance(&means[0][j], &means[1][j]))
        .sum::<f64>()
        / AMBIGUOUS_JOINTS.len() as f64;
    notes.push(format!("mean geodesic separation of the modes on ambiguous joints: {sep:.4} rad"));

    let mut rng = derive(seed, domain::ORACLE, 3);
    let mut gap = 0.0f64;
    for _ in 0..n {
        let (_, theta) = mix.sample(&mut rng)?;
        let [p, m] = posterior_modes(&theta);
        gap = gap.max(max_gap(&keypoints(&p, &skel)?, &keypoints(&m, &skel)?, &[]));
        debug_assert_eq!(m, mirror_pose(&theta));
    }
    Ok(CheckReport {
        check: "posterior".into(),
        measurements: vec![
            Measurement::new("modes with a wrong posterior set", wrong_sets as f64, 0.5),
            Measurement::new("max keypoint gap between a pose and its mirror", gap, 1e-12),
        ],
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in [
            exp_log(2000, 1).unwrap(),
            grad(30, 2).unwrap(),
            reverse_consistency(50, 20, 3).unwrap(),
            posterior(100, 4).unwrap(),
        ] {
            assert!(r.passes(), "{r}");
        }
    }

    #[test]
    fn posterior_set_is_both_modes() {
        let r = posterior(10, 0).unwrap();
        assert!(r.notes.iter().filter(|n| n.ends_with("[0, 1]")).count() == 4, "{r}");
    }
}
