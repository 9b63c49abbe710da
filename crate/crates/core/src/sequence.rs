//! Masked encoder/decoder over pose tokens, condition tokens and a global
//! camera/shape token. Produces one latent per joint plus the camera and
//! bone-scale regression.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{Camera, Observation};
use crate::nn::graph::{Graph, Segment, Var};
use crate::nn::layers::{lookup, LayerNorm, Linear, TransformerBlock};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::Tensor;
use crate::so3::Rotation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub joints: usize,
    pub bones: usize,
    pub width: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.width == 0 || self.heads == 0 {
            return Err(Error::Config("sequence model sizes must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// One condition token: a keypoint, present or hidden.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CondToken {
    pub joint: usize,
    pub uv: Option<[f64; 2]>,
}

/// Stand-in for image features: one token per keypoint.
pub fn condition_encoder(obs: &Observation) -> Vec<CondToken> {
    (0..obs.num_joints())
        .map(|j| CondToken {
            joint: j,
            uv: obs.keypoint(j),
        })
        .collect()
}

/// Model input for one sample. `known[j]` is `None` for masked slots.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub known: Vec<Option<Rotation>>,
    pub cond: Vec<CondToken>,
}

impl TokenSequence {
    pub fn masked(joints: usize, cond: Vec<CondToken>) -> Self {
        TokenSequence {
            known: vec![None; joints],
            cond,
        }
    }

    pub fn from_pose(theta: &[Rotation], revealed: &[bool], cond: Vec<CondToken>) -> Self {
        TokenSequence {
            known: theta
                .iter()
                .zip(revealed)
                .map(|(r, v)| v.then_some(*r))
                .collect(),
            cond,
        }
    }
}

/// Graph handles for a batch forward pass.
pub struct BatchOutput {
    /// `(batch·J) × width`, sample-major.
    pub z: Var,
    /// `batch × (3 + B)`: log-scale, tx, ty, then per-bone log-scales.
    pub head: Var,
}

/// Plain-value latents for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentOutput {
    pub z: Tensor,
    pub pi: Camera,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SequenceModel {
    cfg: SequenceConfig,
    pose_embed: Linear,
    pos_enc: ParamId,
    pos_dec: ParamId,
    global: ParamId,
    cond_embed: Linear,
    invisible: ParamId,
    cond_pos: ParamId,
    mask: ParamId,
    enc: Vec<TransformerBlock>,
    enc_norm: LayerNorm,
    bridge: Linear,
    dec: Vec<TransformerBlock>,
    dec_norm: LayerNorm,
    head1: Linear,
    head2: Linear,
}

impl SequenceModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: SequenceConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (j, d) = (cfg.joints, cfg.width);
        let table = |store: &mut ParamStore, name: &str, rows: usize, rng: &mut R| {
            store.add(format!("{prefix}.{name}"), Tensor::randn(rows, d, 0.5, rng))
        };
        let pos_enc = table(store, "pos_enc", j, rng)?;
        let pos_dec = table(store, "pos_dec", j, rng)?;
        let global = table(store, "global", 1, rng)?;
        let invisible = table(store, "invisible", 1, rng)?;
        let cond_pos = table(store, "cond_pos", j, rng)?;
        let mask = table(store, "mask", 1, rng)?;
        let pose_embed = Linear::new(store, &format!("{prefix}.pose_embed"), 9, d, 1.0, rng)?;
        let cond_embed = Linear::new(store, &format!("{prefix}.cond_embed"), 2, d, 1.0, rng)?;
        let enc = (0..cfg.enc_blocks)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.enc{i}"), d, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = LayerNorm::new(store, &format!("{prefix}.enc_norm"), d)?;
        let bridge = Linear::new(store, &format!("{prefix}.bridge"), d, d, 1.0, rng)?;
        let dec = (0..cfg.dec_blocks)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.dec{i}"), d, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(store, &format!("{prefix}.dec_norm"), d)?;
        let head1 = Linear::new(store, &format!("{prefix}.head1"), d, d, 1.0, rng)?;
        let head2 = Linear::new(store, &format!("{prefix}.head2"), d, 3 + cfg.bones, 0.1, rng)?;
        Ok(SequenceModel {
            cfg,
            pose_embed,
            pos_enc,
            pos_dec,
            global,
            cond_embed,
            invisible,
            cond_pos,
            mask,
            enc,
            enc_norm,
            bridge,
            dec,
            dec_norm,
            head1,
            head2,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str, cfg: SequenceConfig) -> Result<Self> {
        cfg.validate()?;
        let p = |name: &str| lookup(store, &format!("{prefix}.{name}"));
        let lin = |name: &str| Linear::from_store(store, &format!("{prefix}.{name}"));
        let model = SequenceModel {
            cfg,
            pose_embed: lin("pose_embed")?,
            pos_enc: p("pos_enc")?,
            pos_dec: p("pos_dec")?,
            global: p("global")?,
            cond_embed: lin("cond_embed")?,
            invisible: p("invisible")?,
            cond_pos: p("cond_pos")?,
            mask: p("mask")?,
            enc: (0..cfg.enc_blocks)
                .map(|i| TransformerBlock::from_store(store, &format!("{prefix}.enc{i}"), cfg.heads))
                .collect::<Result<Vec<_>>>()?,
            enc_norm: LayerNorm::from_store(store, &format!("{prefix}.enc_norm"))?,
            bridge: lin("bridge")?,
            dec: (0..cfg.dec_blocks)
                .map(|i| TransformerBlock::from_store(store, &format!("{prefix}.dec{i}"), cfg.heads))
                .collect::<Result<Vec<_>>>()?,
            dec_norm: LayerNorm::from_store(store, &format!("{prefix}.dec_norm"))?,
            head1: lin("head1")?,
            head2: lin("head2")?,
        };
        let (rows, cols) = store.value(model.pos_enc).shape();
        if rows != cfg.joints || cols != cfg.width || model.head2.out_dim != 3 + cfg.bones {
            return Err(Error::Incompatible(format!(
                "sequence model parameters do not match config {cfg:?}"
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &SequenceConfig {
        &self.cfg
    }

    /// Embedding of a single pose token: `W·vec(θ) + b + pos[j]`.
    pub fn embed_pose_token(&self, store: &ParamStore, theta: &Rotation, joint: usize) -> Result<Vec<f64>> {
        if joint >= self.cfg.joints {
            return Err(Error::InvalidArgument(format!(
                "joint {joint} out of range for {} joints",
                self.cfg.joints
            )));
        }
        let mut g = Graph::new(store);
        let x = g.input(Tensor::row_vector(theta.to_row_major().to_vec()));
        let e = self.pose_embed.forward(&mut g, x)?;
        let pos = g.param(self.pos_enc);
        let p = g.gather_rows(pos, vec![joint])?;
        let out = g.add(e, p)?;
        Ok(g.value(out).data().to_vec())
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.known.len() != self.cfg.joints {
            return Err(Error::Shape {
                op: "sequence_model",
                detail: format!("{} pose slots, expected {}", seq.known.len(), self.cfg.joints),
            });
        }
        for c in &seq.cond {
            if c.joint >= self.cfg.joints {
                return Err(Error::InvalidArgument(format!("condition joint {} out of range", c.joint)));
            }
            if let Some(uv) = c.uv {
                if !(uv[0].is_finite() && uv[1].is_finite()) {
                    return Err(Error::NonFinite("condition keypoint"));
                }
            }
        }
        Ok(())
    }

    /// Encodes and decodes a batch of sequences in one graph.
    pub fn forward(&self, g: &mut Graph, batch: &[TokenSequence]) -> Result<BatchOutput> {
        let j = self.cfg.joints;
        for s in batch {
            self.check(s)?;
        }

        // Token pools: visible pose tokens, visible and hidden condition tokens.
        let mut pose_vals = Vec::new();
        let mut pose_joints = Vec::new();
        let mut cv_vals = Vec::new();
        let mut cv_joints = Vec::new();
        let mut ci_joints = Vec::new();
        for s in batch {
            for (jj, r) in s.known.iter().enumerate() {
                if let Some(r) = r {
                    pose_vals.extend_from_slice(&r.to_row_major());
                    pose_joints.push(jj);
                }
            }
            for c in &s.cond {
                match c.uv {
                    Some(uv) => {
                        cv_vals.extend_from_slice(&uv);
                        cv_joints.push(c.joint);
                    }
                    None => ci_joints.push(c.joint),
                }
            }
        }
        let mut parts = vec![g.param(self.global)];
        let pose_base = 1;
        if !pose_joints.is_empty() {
            let x = g.input(Tensor::from_vec(pose_joints.len(), 9, pose_vals)?);
            let e = self.pose_embed.forward(g, x)?;
            let pos = g.param(self.pos_enc);
            let p = g.gather_rows(pos, pose_joints.clone())?;
            parts.push(g.add(e, p)?);
        }
        let cv_base = pose_base + pose_joints.len();
        let cpos = g.param(self.cond_pos);
        if !cv_joints.is_empty() {
            let x = g.input(Tensor::from_vec(cv_joints.len(), 2, cv_vals)?);
            let e = self.cond_embed.forward(g, x)?;
            let p = g.gather_rows(cpos, cv_joints.clone())?;
            parts.push(g.add(e, p)?);
        }
        let ci_base = cv_base + cv_joints.len();
        if !ci_joints.is_empty() {
            let inv = g.param(self.invisible);
            let e = g.gather_rows(inv, vec![0; ci_joints.len()])?;
            let p = g.gather_rows(cpos, ci_joints.clone())?;
            parts.push(g.add(e, p)?);
        }
        let pool = g.concat_rows(&parts)?;

        // Encoder sequences: [global, visible pose tokens, condition tokens].
        let mut enc_index = Vec::new();
        let mut enc_segments = Vec::with_capacity(batch.len());
        // Per sample: encoder row of the global token, of each visible slot,
        // and of each condition token.
        let mut layout = Vec::with_capacity(batch.len());
        let (mut next_pose, mut next_cv, mut next_ci) = (pose_base, cv_base, ci_base);
        for s in batch {
            let start = enc_index.len();
            let global_row = enc_index.len();
            enc_index.push(0);
            let mut slot_rows = vec![None; j];
            for (jj, r) in s.known.iter().enumerate() {
                if r.is_some() {
                    slot_rows[jj] = Some(enc_index.len());
                    enc_index.push(next_pose);
                    next_pose += 1;
                }
            }
            let mut cond_rows = Vec::with_capacity(s.cond.len());
            for c in &s.cond {
                cond_rows.push(enc_index.len());
                if c.uv.is_some() {
                    enc_index.push(next_cv);
                    next_cv += 1;
                } else {
                    enc_index.push(next_ci);
                    next_ci += 1;
                }
            }
            enc_segments.push(Segment {
                start,
                len: enc_index.len() - start,
            });
            layout.push((global_row, slot_rows, cond_rows));
        }
        let mut h = g.gather_rows(pool, enc_index)?;
        for blk in &self.enc {
            h = blk.forward(g, h, &enc_segments)?;
        }
        let h = self.enc_norm.forward(g, h)?;
        let h = self.bridge.forward(g, h)?;

        // Decoder sequences: [global, J slots, condition tokens], with the
        // learned mask vector in hidden slots and slot positions re-added.
        let enc_rows = g.shape(h).0;
        let mask = g.param(self.mask);
        let pool = g.concat_rows(&[h, mask])?;
        let mut dec_index = Vec::new();
        let mut pos_index = Vec::new();
        let mut dec_segments = Vec::with_capacity(batch.len());
        let mut z_rows = Vec::with_capacity(batch.len() * j);
        let mut global_rows = Vec::with_capacity(batch.len());
        for (global_row, slot_rows, cond_rows) in &layout {
            let start = dec_index.len();
            global_rows.push(dec_index.len());
            dec_index.push(*global_row);
            pos_index.push(0);
            for (jj, row) in slot_rows.iter().enumerate() {
                z_rows.push(dec_index.len());
                dec_index.push(row.unwrap_or(enc_rows));
                pos_index.push(1 + jj);
            }
            for &row in cond_rows {
                dec_index.push(row);
                pos_index.push(0);
            }
            dec_segments.push(Segment {
                start,
                len: dec_index.len() - start,
            });
        }
        let x = g.gather_rows(pool, dec_index)?;
        let zero = g.input(Tensor::zeros(1, self.cfg.width));
        let pd = g.param(self.pos_dec);
        let pos_table = g.concat_rows(&[zero, pd])?;
        let pos = g.gather_rows(pos_table, pos_index)?;
        let mut h = g.add(x, pos)?;
        for blk in &self.dec {
            h = blk.forward(g, h, &dec_segments)?;
        }
        let h = self.dec_norm.forward(g, h)?;
        let z = g.gather_rows(h, z_rows)?;
        let gl = g.gather_rows(h, global_rows)?;
        let gl = self.head1.forward(g, gl)?;
        let gl = g.silu(gl);
        let head = self.head2.forward(g, gl)?;
        Ok(BatchOutput { z, head })
    }

    /// Camera scale `s = exp(head[0])` as an `batch × 1` graph node.
    pub fn camera_scale(&self, g: &mut Graph, head: Var) -> Result<Var> {
        let o = g.slice_cols(head, 0, 1)?;
        Ok(g.exp(o))
    }

    /// Inference over plain values.
    pub fn infer(&self, store: &ParamStore, batch: &[TokenSequence]) -> Result<Vec<LatentOutput>> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, batch)?;
        let (j, d, b) = (self.cfg.joints, self.cfg.width, self.cfg.bones);
        let z = g.value(out.z);
        let head = g.value(out.head);
        let mut res = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let zi = Tensor::from_vec(j, d, z.data()[i * j * d..(i + 1) * j * d].to_vec())?;
            let h = head.row(i);
            res.push(LatentOutput {
                z: zi,
                pi: Camera {
                    s: h[0].exp(),
                    tx: h[1],
                    ty: h[2],
                },
                beta: h[3..3 + b].to_vec(),
            });
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::{exp_map, TangentVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> SequenceConfig {
        SequenceConfig {
            joints: 5,
            bones: 4,
            width: 8,
            heads: 2,
            enc_blocks: 1,
            dec_blocks: 1,
        }
    }

    fn model(seed: u64) -> (ParamStore, SequenceModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = SequenceModel::new(&mut store, "seq", small(), &mut rng).unwrap();
        (store, m)
    }

    fn random_theta(rng: &mut ChaCha8Rng, n: usize) -> Vec<Rotation> {
        (0..n)
            .map(|_| exp_map(&crate::so3::sample_tangent(0.8, rng).unwrap()))
            .collect()
    }

    fn obs_tokens() -> Vec<CondToken> {
        vec![
            CondToken { joint: 0, uv: Some([0.1, 0.2]) },
            CondToken { joint: 1, uv: None },
            CondToken { joint: 2, uv: Some([-0.3, 0.5]) },
            CondToken { joint: 3, uv: Some([0.0, -0.4]) },
            CondToken { joint: 4, uv: None },
        ]
    }

    #[test]
    fn pose_token_embedding() {
        let (store, m) = model(1);
        let r = exp_map(&TangentVector::new(0.1, 0.2, 0.3));
        let a = m.embed_pose_token(&store, &r, 0).unwrap();
        let b = m.embed_pose_token(&store, &r, 1).unwrap();
        assert_eq!(a.len(), 8);
        assert_ne!(a, b);
        assert_eq!(a, m.embed_pose_token(&store, &r, 0).unwrap());
        assert!(m.embed_pose_token(&store, &r, 5).is_err());
    }

    #[test]
    fn fully_masked_is_deterministic_and_positive_scale() {
        let (store, m) = model(2);
        let seq = TokenSequence::masked(5, vec![]);
        let a = m.infer(&store, &[seq.clone(), seq.clone()]).unwrap();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[0].z.shape(), (5, 8));
        assert!(a[0].pi.s > 0.0);
        assert_eq!(a[0].beta.len(), 4);
    }

    #[test]
    fn masked_values_are_never_read() {
        let (store, m) = model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let theta = random_theta(&mut rng, 5);
        let revealed = [true, false, true, false, false];
        let a = TokenSequence::from_pose(&theta, &revealed, obs_tokens());
        let mut other = theta.clone();
        other[1] = Rotation::identity();
        other[3] = Rotation::rot_x(2.0);
        let b = TokenSequence::from_pose(&other, &revealed, obs_tokens());
        assert_eq!(m.infer(&store, &[a]).unwrap(), m.infer(&store, &[b]).unwrap());
    }

    #[test]
    fn condition_order_does_not_matter() {
        let (store, m) = model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let theta = random_theta(&mut rng, 5);
        let revealed = [false, true, false, false, true];
        let a = TokenSequence::from_pose(&theta, &revealed, obs_tokens());
        let mut perm = obs_tokens();
        perm.reverse();
        perm.swap(0, 2);
        let b = TokenSequence::from_pose(&theta, &revealed, perm);
        let (x, y) = (&m.infer(&store, &[a]).unwrap()[0], &m.infer(&store, &[b]).unwrap()[0]);
        for (p, q) in x.z.data().iter().zip(y.z.data()) {
            assert!((p - q).abs() < 1e-9);
        }
        assert!((x.pi.s - y.pi.s).abs() < 1e-9);
    }

    #[test]
    fn batching_matches_single_samples() {
        let (store, m) = model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let t1 = random_theta(&mut rng, 5);
        let t2 = random_theta(&mut rng, 5);
        let s1 = TokenSequence::from_pose(&t1, &[true, false, true, true, false], obs_tokens());
        let s2 = TokenSequence::from_pose(&t2, &[false; 5], vec![]);
        let both = m.infer(&store, &[s1.clone(), s2.clone()]).unwrap();
        let one = m.infer(&store, &[s1]).unwrap();
        let two = m.infer(&store, &[s2]).unwrap();
        for (a, b) in [(&both[0], &one[0]), (&both[1], &two[0])] {
            for (p, q) in a.z.data().iter().zip(b.z.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn visible_slot_latent_depends_on_its_rotation() {
        let (store, m) = model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let theta = random_theta(&mut rng, 5);
        let revealed = [true, true, false, true, false];
        let base = m.infer(&store, &[TokenSequence::from_pose(&theta, &revealed, vec![])]).unwrap();
        let mut moved = theta.clone();
        moved[1] = moved[1].compose(&exp_map(&TangentVector::new(1e-4, 0.0, 0.0)));
        let after = m.infer(&store, &[TokenSequence::from_pose(&moved, &revealed, vec![])]).unwrap();
        let d: f64 = base[0].z.row(1).iter().zip(after[0].z.row(1)).map(|(a, b)| (a - b).abs()).sum();
        assert!(d > 0.0);
    }

    #[test]
    fn sequence_model_gradients() {
        let (mut store, m) = model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let theta = random_theta(&mut rng, 5);
        let seqs = vec![
            TokenSequence::from_pose(&theta, &[true, false, true, false, false], obs_tokens()),
            TokenSequence::masked(5, vec![]),
        ];
        let wz = Tensor::randn(10, 8, 1.0, &mut rng);
        let wh = Tensor::randn(2, 7, 1.0, &mut rng);
        let build = |g: &mut Graph| {
            let out = m.forward(g, &seqs).unwrap();
            let a = g.input(wz.clone());
            let z = g.mul(out.z, a).unwrap();
            let b = g.input(wh.clone());
            let h = g.mul(out.head, b).unwrap();
            let z = g.sum(z);
            let h = g.sum(h);
            g.add(z, h).unwrap()
        };
        crate::nn::graph::tests::check_gradients(&mut store, &build, 1e-4);
    }
}
