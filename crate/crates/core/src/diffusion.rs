//! Forward noising and DDIM-style reverse sampling constrained to SO(3).
//!
//! Noise is scaled in the tangent space: `x_t = x_0 · Exp(√α_t · Log ε)`.
//! The reverse update composes the predicted clean rotation, the direction
//! back towards `x_t`, and fresh tangent noise of size `σ_t`.
//!
//! A Euclidean variant over the nine matrix entries is provided for
//! ablations; it shares the schedule and the step structure and projects
//! its final state back onto SO(3).

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{self, exp_map, log_map, project_to_so3, Rotation, TangentVector};

/// Default terminal tangent variance; `√4.41 = 2.1` rad.
pub const DEFAULT_ALPHA_MAX: f64 = 4.41;
pub const DEFAULT_T: usize = 1000;

/// Monotone tangent-variance table `α_0 = 0 < α_1 < … < α_T = alpha_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    alpha: Vec<f64>,
}

impl Schedule {
    /// Quadratic schedule `α_t = alpha_max · (t/T)²`.
    pub fn new(steps: usize, alpha_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if !(alpha_max > 0.0) || !alpha_max.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha_max must be positive, got {alpha_max}"
            )));
        }
        let t_max = steps as f64;
        let alpha = (0..=steps)
            .map(|t| {
                let r = t as f64 / t_max;
                alpha_max * r * r
            })
            .collect();
        Ok(Schedule { alpha })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alpha
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, max: self.len() })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_max(&self) -> f64 {
        self.alpha[self.len()]
    }
}

pub fn make_schedule(steps: usize, alpha_max: f64) -> Result<Schedule> {
    Schedule::new(steps, alpha_max)
}

/// Which space the diffusion runs in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Tangent-space noise composed on the group.
    #[default]
    So3,
    /// Additive noise on the nine matrix entries.
    Euclidean,
}

impl Variant {
    /// Dimension of the noise / network output.
    pub fn noise_dim(self) -> usize {
        match self {
            Variant::So3 => 3,
            Variant::Euclidean => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::So3 => "so3",
            Variant::Euclidean => "euclidean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "so3" => Ok(Variant::So3),
            "euclidean" => Ok(Variant::Euclidean),
            other => Err(Error::Config(format!(
                "unknown diffusion variant '{other}' (expected so3 or euclidean)"
            ))),
        }
    }
}

/// `x_t = x_0 · Exp(√α_t · Log ε)`.
pub fn forward_noise(x0: &Rotation, t: usize, eps: &Rotation, sched: &Schedule) -> Result<Rotation> {
    let a = sched.alpha(t)?;
    Ok(x0.compose(&exp_map(&log_map(eps).scale(a.sqrt()))))
}

/// `η · √(α_prev (α_t − α_prev) / α_t)`.
pub fn sigma_ddim(t: usize, t_prev: usize, eta: f64, sched: &Schedule) -> Result<f64> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "t_prev ({t_prev}) must be below t ({t})"
        )));
    }
    let a_t = sched.alpha(t)?;
    let a_prev = sched.alpha(t_prev)?;
    if a_t <= 0.0 {
        return Err(Error::InvalidArgument(format!("alpha_{t} = 0")));
    }
    if eta == 0.0 || a_prev == 0.0 {
        return Ok(0.0);
    }
    Ok(eta * (a_prev * (a_t - a_prev) / a_t).sqrt())
}

/// `x_t · Exp(√α_t · ε̂)⁻¹`.
pub fn predict_x0(
    x_t: &Rotation,
    eps_hat: &TangentVector,
    t: usize,
    sched: &Schedule,
) -> Result<Rotation> {
    let a = sched.alpha(t)?;
    Ok(x_t.compose(&exp_map(&eps_hat.scale(a.sqrt())).inverse()))
}

/// One reverse update; `noise` is the tangent vector `w` of `ε' = Exp(w)`.
pub fn reverse_step_with_noise(
    x_t: &Rotation,
    eps_hat: &TangentVector,
    t: usize,
    t_prev: usize,
    eta: f64,
    sched: &Schedule,
    noise: &TangentVector,
) -> Result<Rotation> {
    let sigma = sigma_ddim(t, t_prev, eta, sched)?;
    let a_prev = sched.alpha(t_prev)?;
    let mut resid = a_prev - sigma * sigma;
    if resid < 0.0 {
        if resid < -1e-12 {
            return Err(Error::NegativeVariance(resid));
        }
        resid = 0.0;
    }
    let x0 = predict_x0(x_t, eps_hat, t, sched)?;
    let towards = exp_map(&eps_hat.scale(resid.sqrt()));
    let mut out = x0.compose(&towards);
    if sigma > 0.0 {
        let wrapped = log_map(&exp_map(noise));
        out = out.compose(&exp_map(&wrapped.scale(sigma)));
    }
    Ok(out)
}

/// One reverse update drawing fresh noise from `rng` (only when `σ_t > 0`).
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<R: Rng + ?Sized>(
    x_t: &Rotation,
    eps_hat: &TangentVector,
    t: usize,
    t_prev: usize,
    eta: f64,
    sched: &Schedule,
    rng: &mut R,
) -> Result<Rotation> {
    let noise = if sigma_ddim(t, t_prev, eta, sched)? > 0.0 {
        so3::sample_tangent(1.0, rng)?
    } else {
        TangentVector::ZERO
    };
    reverse_step_with_noise(x_t, eps_hat, t, t_prev, eta, sched, &noise)
}

/// Decreasing, uniformly spaced timesteps `T = t_0 > t_1 > … > t_{steps-1} ≥ 1`;
/// the chain ends with a final update to `t = 0`.
pub fn timestep_subsequence(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!(
            "sampling steps must be in 1..={total}, got {steps}"
        )));
    }
    Ok((0..steps)
        .map(|i| (total * (steps - i) + steps / 2) / steps)
        .collect())
}

/// Pre-drawn randomness for a batch of chains: initial tangent draws and,
/// when `eta > 0`, one tangent draw per row per step.
#[derive(Clone, Debug)]
pub struct ChainNoise {
    pub dim: usize,
    pub init: Vec<f64>,
    pub steps: Vec<Vec<f64>>,
}

impl ChainNoise {
    pub fn draw<R: Rng + ?Sized>(
        variant: Variant,
        rows: usize,
        steps: usize,
        stochastic: bool,
        rng: &mut R,
    ) -> Self {
        let dim = variant.noise_dim();
        let mut gauss = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let init = gauss(rows * dim);
        let steps = if stochastic {
            (0..steps).map(|_| gauss(rows * dim)).collect()
        } else {
            Vec::new()
        };
        ChainNoise { dim, init, steps }
    }

    pub fn rows(&self) -> usize {
        self.init.len() / self.dim
    }

    /// Concatenates per-hypothesis noise blocks row-wise, step by step.
    pub fn concat(parts: &[ChainNoise]) -> Self {
        let dim = parts.first().map_or(3, |p| p.dim);
        let init = parts.iter().flat_map(|p| p.init.iter().copied()).collect();
        let n_steps = parts.first().map_or(0, |p| p.steps.len());
        let steps = (0..n_steps)
            .map(|s| {
                parts
                    .iter()
                    .flat_map(|p| p.steps[s].iter().copied())
                    .collect()
            })
            .collect();
        ChainNoise { dim, init, steps }
    }
}

/// Runs `rows` independent reverse chains in lockstep.
///
/// `denoise(states, t)` receives the current states (row-major 3×3 entries)
/// and returns `rows × noise_dim` predictions. Returned states are rotations.
pub fn sample_chains<F>(
    variant: Variant,
    mut denoise: F,
    noise: &ChainNoise,
    steps: usize,
    eta: f64,
    sched: &Schedule,
) -> Result<Vec<Rotation>>
where
    F: FnMut(&[[f64; 9]], usize) -> Result<Vec<f64>>,
{
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be >= 0, got {eta}")));
    }
    let times = timestep_subsequence(sched.len(), steps)?;
    let stochastic = eta > 0.0;
    if stochastic && noise.steps.len() < steps {
        return Err(Error::InvalidArgument(
            "chain noise lacks per-step draws for eta > 0".into(),
        ));
    }
    let rows = noise.rows();
    let dim = variant.noise_dim();
    let sqrt_a_max = sched.alpha_max().sqrt();

    let mut states: Vec<[f64; 9]> = match variant {
        Variant::So3 => (0..rows)
            .map(|r| {
                let w = TangentVector::from_slice(&noise.init[r * 3..r * 3 + 3]);
                exp_map(&w.scale(sqrt_a_max)).to_row_major()
            })
            .collect(),
        Variant::Euclidean => (0..rows)
            .map(|r| {
                let mut s = [0.0; 9];
                for (k, v) in s.iter_mut().enumerate() {
                    *v = sqrt_a_max * noise.init[r * 9 + k];
                }
                s
            })
            .collect(),
    };

    for (i, &t) in times.iter().enumerate() {
        let t_prev = times.get(i + 1).copied().unwrap_or(0);
        let pred = denoise(&states, t)?;
        if pred.len() != rows * dim {
            return Err(Error::Shape {
                op: "sample_chains",
                detail: format!("denoiser returned {} values for {rows} rows", pred.len()),
            });
        }
        if pred.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("denoiser output"));
        }
        let step_noise = if stochastic { Some(&noise.steps[i]) } else { None };
        for (r, state) in states.iter_mut().enumerate() {
            let eps = &pred[r * dim..(r + 1) * dim];
            let w = step_noise.map(|n| &n[r * dim..(r + 1) * dim]);
            *state = match variant {
                Variant::So3 => {
                    let x_t = Rotation::from_matrix_unchecked(Matrix3::from_row_slice(state));
                    let w = w.map_or(TangentVector::ZERO, TangentVector::from_slice);
                    let next = reverse_step_with_noise(
                        &x_t,
                        &TangentVector::from_slice(eps),
                        t,
                        t_prev,
                        eta,
                        sched,
                        &w,
                    )?;
                    project_to_so3(next.matrix())?.to_row_major()
                }
                Variant::Euclidean => euclidean::reverse_step(state, eps, t, t_prev, eta, sched, w)?,
            };
        }
    }

    states
        .iter()
        .map(|s| match variant {
            Variant::So3 => Ok(Rotation::from_matrix_unchecked(Matrix3::from_row_slice(s))),
            Variant::Euclidean => project_to_so3(&Matrix3::from_row_slice(s)),
        })
        .collect()
}

/// Single-token chain: draws `x_T = Exp(√α_T w)` and iterates reverse steps.
pub fn sample_chain<L, F, R>(
    mut denoise: F,
    latent: &L,
    steps: usize,
    eta: f64,
    sched: &Schedule,
    rng: &mut R,
) -> Result<Rotation>
where
    F: FnMut(&Rotation, &L, usize) -> TangentVector,
    R: Rng + ?Sized,
{
    let noise = ChainNoise::draw(Variant::So3, 1, steps, eta > 0.0, rng);
    let out = sample_chains(
        Variant::So3,
        |states, t| {
            let x = Rotation::from_matrix_unchecked(Matrix3::from_row_slice(&states[0]));
            Ok(denoise(&x, latent, t).as_array().to_vec())
        },
        &noise,
        steps,
        eta,
        sched,
    )?;
    Ok(out[0])
}

/// Additive diffusion on the nine matrix entries.
pub mod euclidean {
    use super::*;

    pub fn forward_noise(x0: &[f64; 9], t: usize, w: &[f64], sched: &Schedule) -> Result<[f64; 9]> {
        let s = sched.alpha(t)?.sqrt();
        let mut out = *x0;
        for (o, n) in out.iter_mut().zip(w) {
            *o += s * n;
        }
        Ok(out)
    }

    pub fn predict_x0(x_t: &[f64; 9], eps_hat: &[f64], t: usize, sched: &Schedule) -> Result<[f64; 9]> {
        let s = sched.alpha(t)?.sqrt();
        let mut out = *x_t;
        for (o, e) in out.iter_mut().zip(eps_hat) {
            *o -= s * e;
        }
        Ok(out)
    }

    pub fn reverse_step(
        x_t: &[f64; 9],
        eps_hat: &[f64],
        t: usize,
        t_prev: usize,
        eta: f64,
        sched: &Schedule,
        noise: Option<&[f64]>,
    ) -> Result<[f64; 9]> {
        let sigma = sigma_ddim(t, t_prev, eta, sched)?;
        let resid = sched.alpha(t_prev)? - sigma * sigma;
        if resid < -1e-12 {
            return Err(Error::NegativeVariance(resid));
        }
        let dir = resid.max(0.0).sqrt();
        let mut out = predict_x0(x_t, eps_hat, t, sched)?;
        for k in 0..9 {
            out[k] += dir * eps_hat[k];
            if let Some(n) = noise {
                out[k] += sigma * n[k];
            }
        }
        Ok(out)
    }
}
