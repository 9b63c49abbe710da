//! Masked-autoregressive generation: joints are revealed in random order
//! over `K` passes of the sequence model, each revealed joint drawn by its
//! own reverse diffusion chain.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffusion::{sample_chains, ChainNoise};
use crate::error::{Error, Result};
use crate::kinematics::{Observation, PoseSequence};
use crate::model::Model;
use crate::nn::tensor::Tensor;
use crate::rng::{derive, domain};
use crate::sequence::{condition_encoder, CondToken, LatentOutput, TokenSequence};
use crate::so3::Rotation;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationConfig {
    pub k: usize,
    pub steps: usize,
    pub eta: f64,
    pub conditional: bool,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.k == 0 || self.k > joints {
            return Err(Error::InvalidArgument(format!(
                "autoregressive steps K={} must lie in 1..={joints}",
                self.k
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("diffusion steps must be >= 1".into()));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::InvalidArgument(format!("eta must be >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    /// Joints revealed at each pass.
    pub chunks: Vec<Vec<usize>>,
    /// Pose after each pass; joints not yet revealed hold the identity.
    pub intermediates: Vec<PoseSequence>,
}

/// Uniform permutation of `0..joints` cut into `k` contiguous chunks whose
/// sizes differ by at most one (larger chunks first).
pub fn choose_order<R: Rng + ?Sized>(joints: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > joints {
        return Err(Error::InvalidArgument(format!("cannot split {joints} joints into {k} chunks")));
    }
    let mut perm: Vec<usize> = (0..joints).collect();
    perm.shuffle(rng);
    let (base, extra) = (joints / k, joints % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for c in 0..k {
        let len = base + usize::from(c < extra);
        out.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

/// Generates one hypothesis per entry of `indices`; hypothesis `i` uses the
/// stream `(seed, i)` alone, so results do not depend on batching.
pub fn generate_indices(
    model: &Model,
    cond: Option<&Observation>,
    cfg: &GenerationConfig,
    indices: &[u64],
) -> Result<Vec<(PoseSequence, GenerationTrace)>> {
    match (cfg.conditional, cond) {
        (true, Some(obs)) => {
            if obs.num_joints() != model.skeleton.num_joints() {
                return Err(Error::Incompatible(format!(
                    "observation has {} joints, model expects {}",
                    obs.num_joints(),
                    model.skeleton.num_joints()
                )));
            }
            generate_with_tokens(model, condition_encoder(obs), cfg, indices)
        }
        (false, None) => generate_with_tokens(model, Vec::new(), cfg, indices),
        (true, None) => Err(Error::InvalidArgument("conditional generation needs an observation".into())),
        (false, Some(_)) => Err(Error::InvalidArgument(
            "unconditional generation takes no observation".into(),
        )),
    }
}

pub fn generate(
    model: &Model,
    cond: Option<&Observation>,
    cfg: &GenerationConfig,
    count: usize,
) -> Result<Vec<(PoseSequence, GenerationTrace)>> {
    let indices: Vec<u64> = (0..count as u64).collect();
    generate_indices(model, cond, cfg, &indices)
}

/// Shared path for both modes; unconditional generation is the special case
/// of an empty condition-token list.
pub fn generate_with_tokens(
    model: &Model,
    cond: Vec<CondToken>,
    cfg: &GenerationConfig,
    indices: &[u64],
) -> Result<Vec<(PoseSequence, GenerationTrace)>> {
    let j = model.skeleton.num_joints();
    cfg.validate(j)?;
    let variant = model.cfg.variant;
    let stochastic = cfg.eta > 0.0;
    let q = indices.len();

    let mut rngs: Vec<_> = indices
        .iter()
        .map(|&i| derive(cfg.seed, domain::GENERATE, i))
        .collect();
    let orders = rngs
        .iter_mut()
        .map(|r| choose_order(j, cfg.k, r))
        .collect::<Result<Vec<_>>>()?;
    let mut tokens: Vec<TokenSequence> = (0..q).map(|_| TokenSequence::masked(j, cond.clone())).collect();
    let mut traces: Vec<GenerationTrace> = orders
        .iter()
        .map(|o| GenerationTrace {
            chunks: o.clone(),
            intermediates: Vec::with_capacity(cfg.k),
        })
        .collect();
    let mut last: Vec<LatentOutput> = Vec::new();

    for step in 0..cfg.k {
        let latents = model.seq.infer(&model.store, &tokens)?;
        let chunk_len = orders[0][step].len();
        let width = model.cfg.width;
        let mut z = Vec::with_capacity(q * chunk_len * width);
        for (h, lat) in latents.iter().enumerate() {
            for &jj in &orders[h][step] {
                z.extend_from_slice(lat.z.row(jj));
            }
        }
        let z = Tensor::from_vec(q * chunk_len, width, z)?;
        let noise: Vec<ChainNoise> = rngs
            .iter_mut()
            .map(|r| ChainNoise::draw(variant, chunk_len, cfg.steps, stochastic, r))
            .collect();
        let noise = ChainNoise::concat(&noise);
        let drawn = sample_chains(
            variant,
            |states, t| model.den.predict(&model.store, states, &z, t),
            &noise,
            cfg.steps,
            cfg.eta,
            &model.schedule,
        )?;
        for (h, trace) in traces.iter_mut().enumerate() {
            for (c, &jj) in orders[h][step].iter().enumerate() {
                tokens[h].known[jj] = Some(drawn[h * chunk_len + c]);
            }
            trace.intermediates.push(PoseSequence {
                theta: tokens[h]
                    .known
                    .iter()
                    .map(|r| r.unwrap_or_else(Rotation::identity))
                    .collect(),
                pi: latents[h].pi,
                beta: latents[h].beta.clone(),
            });
        }
        last = latents;
    }

    Ok(tokens
        .into_iter()
        .zip(last)
        .zip(traces)
        .map(|((tok, lat), trace)| {
            let pose = PoseSequence {
                theta: tok.known.into_iter().map(|r| r.expect("every joint revealed")).collect(),
                pi: lat.pi,
                beta: lat.beta,
            };
            (pose, trace)
        })
        .collect())
}
