//! Training objective (diffusion + 3D joints + 2D keypoints), masking policy
//! and the optimization loop.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::KeyValues;
use crate::dataset::{Dataset, Record};
use crate::diffusion::{euclidean, forward_noise, Variant};
use crate::error::{Error, Result};
use crate::kinematics::{fmt_f64, Skeleton};
use crate::model::{Model, ModelConfig};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::AdamConfig;
use crate::nn::tensor::Tensor;
use crate::rng::{derive, domain};
use crate::sequence::{condition_encoder, TokenSequence};
use crate::so3::{exp_map, log_map, TangentVector};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_diff: f64,
    pub lambda_3d: f64,
    pub lambda_2d: f64,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
    pub p_uncond: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub checkpoint_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_diff: 1.0,
            lambda_3d: 1.0,
            lambda_2d: 1.0,
            mask_ratio_min: 0.7,
            mask_ratio_max: 1.0,
            p_uncond: 0.5,
            lr: 1e-3,
            batch_size: 32,
            steps: 2000,
            seed: 0,
            grad_clip: 1.0,
            checkpoint_every: 500,
            model: ModelConfig::default(),
        }
    }
}

pub const TRAIN_KEYS: [&str; 22] = [
    "lambda_diff",
    "lambda_3d",
    "lambda_2d",
    "mask_ratio_min",
    "mask_ratio_max",
    "p_uncond",
    "lr",
    "batch_size",
    "steps",
    "seed",
    "grad_clip",
    "checkpoint_every",
    "variant",
    "width",
    "heads",
    "enc_blocks",
    "dec_blocks",
    "den_width",
    "den_blocks",
    "time_dim",
    "diffusion_steps",
    "alpha_max",
];

impl TrainConfig {
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let variant: String = kv.get("variant")?;
        let cfg = TrainConfig {
            lambda_diff: kv.get("lambda_diff")?,
            lambda_3d: kv.get("lambda_3d")?,
            lambda_2d: kv.get("lambda_2d")?,
            mask_ratio_min: kv.get("mask_ratio_min")?,
            mask_ratio_max: kv.get("mask_ratio_max")?,
            p_uncond: kv.get("p_uncond")?,
            lr: kv.get("lr")?,
            batch_size: kv.get("batch_size")?,
            steps: kv.get("steps")?,
            seed: kv.get("seed")?,
            grad_clip: kv.get("grad_clip")?,
            checkpoint_every: kv.get("checkpoint_every")?,
            model: ModelConfig {
                variant: Variant::parse(&variant)?,
                width: kv.get("width")?,
                heads: kv.get("heads")?,
                enc_blocks: kv.get("enc_blocks")?,
                dec_blocks: kv.get("dec_blocks")?,
                den_width: kv.get("den_width")?,
                den_blocks: kv.get("den_blocks")?,
                time_dim: kv.get("time_dim")?,
                diffusion_steps: kv.get("diffusion_steps")?,
                alpha_max: kv.get("alpha_max")?,
            },
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KeyValues::parse(text)?)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let vals: [String; 22] = [
            self.lambda_diff.to_string(),
            self.lambda_3d.to_string(),
            self.lambda_2d.to_string(),
            self.mask_ratio_min.to_string(),
            self.mask_ratio_max.to_string(),
            self.p_uncond.to_string(),
            self.lr.to_string(),
            self.batch_size.to_string(),
            self.steps.to_string(),
            self.seed.to_string(),
            self.grad_clip.to_string(),
            self.checkpoint_every.to_string(),
            m.variant.name().to_string(),
            m.width.to_string(),
            m.heads.to_string(),
            m.enc_blocks.to_string(),
            m.dec_blocks.to_string(),
            m.den_width.to_string(),
            m.den_blocks.to_string(),
            m.time_dim.to_string(),
            m.diffusion_steps.to_string(),
            m.alpha_max.to_string(),
        ];
        TRAIN_KEYS
            .iter()
            .zip(vals)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if [self.lambda_diff, self.lambda_3d, self.lambda_2d]
            .iter()
            .any(|l| !(*l >= 0.0))
        {
            return bad("loss weights must be non-negative".into());
        }
        if !(0.0 <= self.mask_ratio_min && self.mask_ratio_min <= self.mask_ratio_max && self.mask_ratio_max == 1.0)
        {
            return bad(format!(
                "mask ratio range [{}, {}] must lie in [0, 1] and include 1",
                self.mask_ratio_min, self.mask_ratio_max
            ));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return bad(format!("p_uncond {} outside [0, 1]", self.p_uncond));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("lr and batch_size must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0".into());
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            diff: self.lambda_diff,
            j3d: self.lambda_3d,
            j2d: self.lambda_2d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambdas {
    pub diff: f64,
    pub j3d: f64,
    pub j2d: f64,
}

/// Revealed-slot flags: `round(r·J)` slots masked with `r ~ U(min, max)`,
/// the masked subset uniform among subsets of that size.
pub fn sample_mask<R: Rng + ?Sized>(joints: usize, rng: &mut R, ratio: (f64, f64)) -> Vec<bool> {
    let r = if ratio.1 > ratio.0 {
        rng.random_range(ratio.0..=ratio.1)
    } else {
        ratio.0
    };
    let count = ((r * joints as f64).round() as usize).min(joints);
    let mut revealed = vec![true; joints];
    for j in sample_indices(rng, joints, count) {
        revealed[j] = false;
    }
    revealed
}

/// Per-sample randomness of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraw {
    pub revealed: Vec<bool>,
    pub t: usize,
    /// `J × noise_dim` Gaussian draws; `ε_j = Exp(w_j)` for the SO(3) variant.
    pub noise: Vec<f64>,
}

impl SampleDraw {
    pub fn draw<R: Rng + ?Sized>(
        joints: usize,
        variant: Variant,
        diffusion_steps: usize,
        ratio: (f64, f64),
        rng: &mut R,
    ) -> Self {
        let revealed = sample_mask(joints, rng, ratio);
        let t = rng.random_range(1..=diffusion_steps);
        let noise = (0..joints * variant.noise_dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        SampleDraw { revealed, t, noise }
    }
}

/// Constant inputs of one batch, computed outside the graph.
pub struct PreparedBatch {
    pub conditional: bool,
    pub tokens: Vec<TokenSequence>,
    /// `(sample, joint)` of every masked slot, in row order.
    pub masked: Vec<(usize, usize)>,
    pub timesteps: Vec<usize>,
    pub x_t: Tensor,
    pub target: Tensor,
    /// `−√α_t` per masked row, repeated over the noise dimension.
    pub neg_sqrt_alpha: Tensor,
    pub gt_theta: Tensor,
    pub gt_j3d: Tensor,
    pub gt_j2d: Tensor,
    pub j2d_weight: Tensor,
    pub visible_keypoints: usize,
}

pub fn prepare_batch(
    model: &Model,
    records: &[&Record],
    draws: &[SampleDraw],
    conditional: bool,
) -> Result<PreparedBatch> {
    let j = model.skeleton.num_joints();
    let variant = model.cfg.variant;
    let dim = variant.noise_dim();
    let n = records.len();
    if draws.len() != n {
        return Err(Error::InvalidArgument("one draw per record required".into()));
    }
    let mut tokens = Vec::with_capacity(n);
    let mut masked = Vec::new();
    let mut timesteps = Vec::new();
    let (mut x_t, mut target, mut nsa) = (Vec::new(), Vec::new(), Vec::new());
    let mut gt_theta = Vec::with_capacity(n * j * 9);
    let mut gt_j3d = Vec::with_capacity(n * j * 3);
    let mut gt_j2d = Vec::with_capacity(n * j * 2);
    let mut weight = Vec::with_capacity(n * j * 2);
    let mut visible_keypoints = 0;
    for (b, (rec, d)) in records.iter().zip(draws).enumerate() {
        if rec.theta.len() != j || d.revealed.len() != j || d.noise.len() != j * dim {
            return Err(Error::Shape {
                op: "prepare_batch",
                detail: format!("record {b} does not match {j} joints"),
            });
        }
        let cond = if conditional {
            condition_encoder(&rec.observation())
        } else {
            Vec::new()
        };
        tokens.push(TokenSequence::from_pose(&rec.theta, &d.revealed, cond));
        let sa = model.schedule.alpha(d.t)?.sqrt();
        for jj in 0..j {
            gt_theta.extend_from_slice(&rec.theta[jj].to_row_major());
            gt_j3d.extend_from_slice(&rec.j3d[jj]);
            if d.revealed[jj] {
                continue;
            }
            masked.push((b, jj));
            timesteps.push(d.t);
            let w = &d.noise[jj * dim..(jj + 1) * dim];
            match variant {
                Variant::So3 => {
                    let eps = exp_map(&TangentVector::from_slice(w));
                    x_t.extend_from_slice(&forward_noise(&rec.theta[jj], d.t, &eps, &model.schedule)?.to_row_major());
                    target.extend_from_slice(&log_map(&eps).as_array());
                }
                Variant::Euclidean => {
                    let x0 = rec.theta[jj].to_row_major();
                    x_t.extend_from_slice(&euclidean::forward_noise(&x0, d.t, w, &model.schedule)?);
                    target.extend_from_slice(w);
                }
            }
            nsa.extend(std::iter::repeat_n(-sa, dim));
        }
        for jj in 0..j {
            let v = conditional && rec.visible[jj];
            let p = if v { rec.j2d[jj] } else { [0.0, 0.0] };
            gt_j2d.extend_from_slice(&p);
            let w = if v { 1.0 } else { 0.0 };
            weight.extend_from_slice(&[w, w]);
            visible_keypoints += v as usize;
        }
    }
    let m = masked.len();
    Ok(PreparedBatch {
        conditional,
        tokens,
        timesteps,
        x_t: Tensor::from_vec(m, 9, x_t)?,
        target: Tensor::from_vec(m, dim, target)?,
        neg_sqrt_alpha: Tensor::from_vec(m, dim, nsa)?,
        masked,
        gt_theta: Tensor::from_vec(n * j, 9, gt_theta)?,
        gt_j3d: Tensor::from_vec(n, 3 * j, gt_j3d)?,
        gt_j2d: Tensor::from_vec(n, 2 * j, gt_j2d)?,
        j2d_weight: Tensor::from_vec(n, 2 * j, weight)?,
        visible_keypoints,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_diff: Var,
    pub l_3d: Var,
    pub l_2d: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub l_diff: f64,
    pub l_3d: f64,
    pub l_2d: f64,
    pub total: f64,
}

impl LossValues {
    pub fn read(g: &Graph, v: &LossVars) -> Self {
        LossValues {
            l_diff: g.value(v.l_diff).item(),
            l_3d: g.value(v.l_3d).item(),
            l_2d: g.value(v.l_2d).item(),
            total: g.value(v.total).item(),
        }
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{}",
            fmt_f64(self.l_diff),
            fmt_f64(self.l_3d),
            fmt_f64(self.l_2d),
            fmt_f64(self.total)
        )
    }
}

pub const METRICS_HEADER: &str = "step,l_diff,l_3d,l_2d,total";

/// Differentiable forward kinematics for a batch: `theta` is `(n·J) × 9`
/// sample-major, `log_beta` is `n × B`. Returns `n × 3J` joint positions.
pub fn fk_graph(g: &mut Graph, skel: &Skeleton, theta: Var, log_beta: Var, n: usize) -> Result<Var> {
    let j = skel.num_joints();
    let scale = g.exp(log_beta);
    let mut glob: Vec<Option<Var>> = vec![None; j];
    let mut pos: Vec<Var> = Vec::with_capacity(j);
    let joint_rows = |jj: usize| (0..n).map(|b| b * j + jj).collect::<Vec<_>>();
    glob[0] = Some(g.gather_rows(theta, joint_rows(0))?);
    pos.push(g.input(Tensor::zeros(n, 3)));
    for jj in 1..j {
        let par = skel.parent(jj).expect("non-root joint has a parent");
        let gp = glob[par].expect("parents precede children");
        let s = g.slice_cols(scale, jj - 1, 1)?;
        let o = skel.offset(jj);
        let off = g.input(Tensor::row_vector(vec![o[0], o[1], o[2]]));
        let bone = g.matmul(s, off)?;
        let rel = g.rot_vec(gp, bone)?;
        let p = g.add(pos[par], rel)?;
        pos.push(p);
        if skel.children(jj).next().is_some() {
            let th = g.gather_rows(theta, joint_rows(jj))?;
            glob[jj] = Some(g.rot_mul(gp, th)?);
        }
    }
    g.concat_cols(&pos)
}

/// Loss terms from a noise prediction `eps_hat` (one row per masked slot,
/// `None` when nothing is masked) and the regression head `n × (3 + B)`.
pub fn assemble_loss(
    g: &mut Graph,
    model: &Model,
    prep: &PreparedBatch,
    eps_hat: Option<Var>,
    head: Var,
    lambdas: Lambdas,
) -> Result<LossVars> {
    let skel = &model.skeleton;
    let j = skel.num_joints();
    let n = prep.tokens.len();
    let m = prep.masked.len();

    let (l_diff, theta) = match eps_hat {
        Some(e) if m > 0 => {
            let tgt = g.input(prep.target.clone());
            let d = g.sub(e, tgt)?;
            let d = g.square(d);
            let s = g.sum(d);
            let l_diff = g.scale(s, 1.0 / m as f64);

            let xt = g.input(prep.x_t.clone());
            let f = g.input(prep.neg_sqrt_alpha.clone());
            let step = g.mul(e, f)?;
            let x0 = match model.cfg.variant {
                Variant::So3 => {
                    let r = g.so3_exp(step)?;
                    g.rot_mul(xt, r)?
                }
                Variant::Euclidean => g.add(xt, step)?,
            };
            let gt = g.input(prep.gt_theta.clone());
            let pool = g.concat_rows(&[x0, gt])?;
            let mut index: Vec<usize> = (0..n * j).map(|r| m + r).collect();
            for (row, &(b, jj)) in prep.masked.iter().enumerate() {
                index[b * j + jj] = row;
            }
            (l_diff, g.gather_rows(pool, index)?)
        }
        _ => (g.input(Tensor::scalar(0.0)), g.input(prep.gt_theta.clone())),
    };

    let log_beta = g.slice_cols(head, 3, skel.num_bones())?;
    let p = fk_graph(g, skel, theta, log_beta, n)?;
    let gt3 = g.input(prep.gt_j3d.clone());
    let d = g.sub(p, gt3)?;
    let d = g.abs(d);
    let s = g.sum(d);
    let l_3d = g.scale(s, 1.0 / (n * j) as f64);

    let l_2d = if prep.conditional && prep.visible_keypoints > 0 {
        // columns x_j and y_j of the joint matrix, interleaved as (u_j, v_j)
        let mut sel = Tensor::zeros(3 * j, 2 * j);
        let mut is_u = Tensor::zeros(1, 2 * j);
        for jj in 0..j {
            sel.set(3 * jj, 2 * jj, 1.0);
            sel.set(3 * jj + 1, 2 * jj + 1, 1.0);
            is_u.set(0, 2 * jj, 1.0);
        }
        let sel = g.input(sel);
        let xy = g.matmul(p, sel)?;
        let scale = model.seq.camera_scale(g, head)?;
        let ones = g.input(Tensor::filled(1, 2 * j, 1.0));
        let scale = g.matmul(scale, ones)?;
        let uv = g.mul(xy, scale)?;
        let tx = g.slice_cols(head, 1, 1)?;
        let ty = g.slice_cols(head, 2, 1)?;
        let is_u = g.input(is_u);
        let is_v = g.input(Tensor::row_vector((0..2 * j).map(|c| (c % 2) as f64).collect()));
        let tu = g.matmul(tx, is_u)?;
        let tv = g.matmul(ty, is_v)?;
        let uv = g.add(uv, tu)?;
        let uv = g.add(uv, tv)?;
        let tgt = g.input(prep.gt_j2d.clone());
        let d = g.sub(uv, tgt)?;
        let d = g.abs(d);
        let w = g.input(prep.j2d_weight.clone());
        let d = g.mul(d, w)?;
        let s = g.sum(d);
        Some(g.scale(s, 1.0 / prep.visible_keypoints as f64))
    } else {
        None
    };

    let a = g.scale(l_diff, lambdas.diff);
    let b = g.scale(l_3d, lambdas.j3d);
    let mut total = g.add(a, b)?;
    let l_2d = match l_2d {
        Some(l) => {
            let c = g.scale(l, lambdas.j2d);
            total = g.add(total, c)?;
            l
        }
        None => g.input(Tensor::scalar(0.0)),
    };
    Ok(LossVars {
        l_diff,
        l_3d,
        l_2d,
        total,
    })
}

pub fn compute_loss(g: &mut Graph, model: &Model, prep: &PreparedBatch, lambdas: Lambdas) -> Result<LossVars> {
    let out = model.seq.forward(g, &prep.tokens)?;
    let j = model.skeleton.num_joints();
    let eps_hat = if prep.masked.is_empty() {
        None
    } else {
        let rows = prep.masked.iter().map(|&(b, jj)| b * j + jj).collect();
        let z = g.gather_rows(out.z, rows)?;
        let xt = g.input(prep.x_t.clone());
        Some(model.den.forward(g, xt, z, &prep.timesteps)?)
    };
    assemble_loss(g, model, prep, eps_hat, out.head, lambdas)
}

fn check_dataset(ds: &Dataset, skel: &Skeleton, what: &str) -> Result<()> {
    ds.check_skeleton(skel)?;
    if ds.records.is_empty() {
        return Err(Error::Incompatible(format!("{what} dataset is empty")));
    }
    Ok(())
}

/// Draws the batch for `step` from the seed alone, so runs can resume.
pub fn draw_batch<'d>(
    cfg: &TrainConfig,
    model: &Model,
    cond: &'d Dataset,
    uncond: &'d Dataset,
    step: u64,
) -> (bool, Vec<&'d Record>, Vec<SampleDraw>) {
    let mut rng = derive(cfg.seed, domain::TRAIN_STEP, step);
    let conditional = !rng.random_bool(cfg.p_uncond);
    let ds = if conditional { cond } else { uncond };
    let j = model.skeleton.num_joints();
    let mut records = Vec::with_capacity(cfg.batch_size);
    let mut draws = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        records.push(&ds.records[rng.random_range(0..ds.records.len())]);
        draws.push(SampleDraw::draw(
            j,
            model.cfg.variant,
            model.cfg.diffusion_steps,
            (cfg.mask_ratio_min, cfg.mask_ratio_max),
            &mut rng,
        ));
    }
    (conditional, records, draws)
}

/// One optimizer update; returns the losses before the update.
pub fn train_step(
    cfg: &TrainConfig,
    model: &mut Model,
    cond: &Dataset,
    uncond: &Dataset,
    step: u64,
) -> Result<LossValues> {
    let (conditional, records, draws) = draw_batch(cfg, model, cond, uncond, step);
    let prep = prepare_batch(model, &records, &draws, conditional)?;
    let (values, grads) = {
        let mut g = Graph::new(&model.store);
        let loss = compute_loss(&mut g, model, &prep, cfg.lambdas())?;
        let values = LossValues::read(&g, &loss);
        if !values.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        (values, g.backward(loss.total)?)
    };
    model.store.zero_grads();
    model.store.accumulate(&grads, 1.0);
    if cfg.grad_clip > 0.0 {
        model.store.clip_grad_norm(cfg.grad_clip);
    }
    model.store.adam_step(&AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    Ok(values)
}

/// Runs steps `model.store.adam_steps() .. cfg.steps`, calling `on_step`
/// after each update with the step index, its losses and the model.
pub fn train<F>(cfg: &TrainConfig, model: &mut Model, cond: &Dataset, uncond: &Dataset, mut on_step: F) -> Result<()>
where
    F: FnMut(u64, &LossValues, &Model) -> Result<()>,
{
    cfg.validate()?;
    if model.cfg != cfg.model {
        return Err(Error::Incompatible("model does not match the training config".into()));
    }
    if cfg.p_uncond < 1.0 {
        check_dataset(cond, &model.skeleton, "conditional")?;
    }
    if cfg.p_uncond > 0.0 {
        check_dataset(uncond, &model.skeleton, "unconditional")?;
    }
    for step in model.store.adam_steps()..cfg.steps {
        let values = train_step(cfg, model, cond, uncond, step)?;
        on_step(step, &values, model)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, DatasetSpec, NuisanceSpec, Occlusion};
    use crate::kinematics::{ambiguity_benchmark, Camera};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(variant: Variant) -> Model {
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
        Model::new(cfg, Skeleton::default(), 11).unwrap()
    }

    fn data(n: usize, occ: Occlusion, conditional: bool, seed: u64) -> Dataset {
        let mix = ambiguity_benchmark(0.2).unwrap();
        let skel = Skeleton::default();
        let spec = DatasetSpec {
            world_name: "benchmark",
            mixture: &mix,
            skeleton: &skel,
            nuisance: NuisanceSpec::default(),
            occlusion: occ,
            conditional,
        };
        build_dataset(&spec, n, seed).unwrap()
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_mask(24, &mut rng, (1.0, 1.0)).iter().all(|v| !v));
        assert!(sample_mask(24, &mut rng, (0.0, 0.0)).iter().all(|v| *v));
        let n = 10_000;
        let total: usize = (0..n)
            .map(|_| sample_mask(24, &mut rng, (0.7, 1.0)).iter().filter(|v| !**v).count())
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean / (0.85 * 24.0) - 1.0).abs() < 0.02, "{mean}");
    }

    fn oracle_check(variant: Variant) {
        let model = tiny_model(variant);
        let ds = data(4, Occlusion::Random(0.3), true, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let recs: Vec<&Record> = ds.records.iter().collect();
        let draws: Vec<_> = (0..4)
            .map(|_| SampleDraw::draw(24, variant, 50, (0.5, 1.0), &mut rng))
            .collect();
        let prep = prepare_batch(&model, &recs, &draws, true).unwrap();
        let mut g = Graph::new(&model.store);
        let eps = g.input(prep.target.clone());
        let head: Vec<f64> = recs
            .iter()
            .flat_map(|r| {
                let Camera { s, tx, ty } = r.pi;
                [s.ln(), tx, ty].into_iter().chain(r.beta.iter().copied())
            })
            .collect();
        let head = g.input(Tensor::from_vec(4, 26, head).unwrap());
        let l = assemble_loss(&mut g, &model, &prep, Some(eps), head, Lambdas { diff: 1.0, j3d: 1.0, j2d: 1.0 }).unwrap();
        let v = LossValues::read(&g, &l);
        assert!(v.l_diff.abs() < 1e-12);
        assert!(v.l_3d < 1e-6, "{v:?}");
        assert!(v.l_2d < 1e-6, "{v:?}");
    }

    #[test]
    fn oracle_prediction_gives_zero_loss() {
        oracle_check(Variant::So3);
        oracle_check(Variant::Euclidean);
    }

    #[test]
    fn unconditional_batches_ignore_keypoints() {
        let model = tiny_model(Variant::So3);
        let ds = data(3, Occlusion::None, false, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let recs: Vec<&Record> = ds.records.iter().collect();
        let draws: Vec<_> = (0..3)
            .map(|_| SampleDraw::draw(24, Variant::So3, 50, (0.7, 1.0), &mut rng))
            .collect();
        let prep = prepare_batch(&model, &recs, &draws, false).unwrap();
        let mut g = Graph::new(&model.store);
        let l = compute_loss(&mut g, &model, &prep, Lambdas { diff: 1.0, j3d: 1.0, j2d: 5.0 }).unwrap();
        let v = LossValues::read(&g, &l);
        assert_eq!(v.l_2d, 0.0);
        assert!((v.total - (v.l_diff + v.l_3d)).abs() < 1e-12);
        assert!(v.l_diff >= 0.0 && v.l_3d >= 0.0);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        for variant in [Variant::So3, Variant::Euclidean] {
            let mut model = tiny_model(variant);
            let ds = data(2, Occlusion::Random(0.3), true, 7);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let recs: Vec<&Record> = ds.records.iter().collect();
            let draws: Vec<_> = (0..2)
                .map(|_| SampleDraw::draw(24, variant, 50, (0.5, 1.0), &mut rng))
                .collect();
            let prep = prepare_batch(&model, &recs, &draws, true).unwrap();
            let lambdas = Lambdas { diff: 1.0, j3d: 1.0, j2d: 1.0 };
            let loss = |m: &Model| {
                let mut g = Graph::new(&m.store);
                let l = compute_loss(&mut g, m, &prep, lambdas).unwrap();
                (g.value(l.total).item(), g.backward(l.total).unwrap())
            };
            let (_, grads) = loss(&model);
            // eight scalar parameters spread over both networks
            let ids: Vec<_> = model.store.ids().collect();
            let mut checked = 0;
            let mut pick = ChaCha8Rng::seed_from_u64(5);
            while checked < 8 {
                let id = ids[pick.random_range(0..ids.len())];
                let k = pick.random_range(0..model.store.value(id).data().len());
                let an = grads.get(id).map_or(0.0, |t| t.data()[k]);
                if an.abs() < 1e-6 {
                    continue;
                }
                let orig = model.store.value(id).data()[k];
                let h = 1e-5;
                model.store.value_mut(id).data_mut()[k] = orig + h;
                let lp = loss(&model).0;
                model.store.value_mut(id).data_mut()[k] = orig - h;
                let lm = loss(&model).0;
                model.store.value_mut(id).data_mut()[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                assert!(rel < 1e-4, "{} [{k}]: {an} vs {fd}", model.store.name(id));
                checked += 1;
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cond = data(16, Occlusion::Random(0.25), true, 8);
        let uncond = data(16, Occlusion::None, false, 9);
        let cfg = TrainConfig {
            batch_size: 4,
            steps: 6,
            model: tiny_model(Variant::So3).cfg,
            ..TrainConfig::default()
        };
        let run = |stop: u64| {
            let mut m = tiny_model(Variant::So3);
            let mut log = Vec::new();
            let c = TrainConfig { steps: stop, ..cfg };
            train(&c, &mut m, &cond, &uncond, |s, v, _| {
                log.push(v.csv_row(s));
                Ok(())
            })
            .unwrap();
            (m, log)
        };
        let (a, la) = run(6);
        let (b, lb) = run(6);
        assert_eq!(la, lb);
        assert_eq!(a.store, b.store);

        let (mut half, mut lh) = run(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.ckpt");
        half.save(&p, &[]).unwrap();
        half = Model::load(&p).unwrap().0;
        train(&cfg, &mut half, &cond, &uncond, |s, v, _| {
            lh.push(v.csv_row(s));
            Ok(())
        })
        .unwrap();
        assert_eq!(lh, la);
        assert_eq!(half.store, a.store);
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let missing = cfg.to_text().replace("p_uncond = 0.5\n", "");
        let err = TrainConfig::parse(&missing).unwrap_err().to_string();
        assert!(err.contains("p_uncond"));
        let extra = format!("{}bogus = 1\n", cfg.to_text());
        assert!(TrainConfig::parse(&extra).unwrap_err().to_string().contains("bogus"));
        let bad = cfg.to_text().replace("mask_ratio_max = 1", "mask_ratio_max = 0.9");
        assert!(TrainConfig::parse(&bad).is_err());
    }
}
