//! The full generator: sequence model, denoiser, noise schedule and
//! skeleton, with checkpoint persistence.

use std::collections::BTreeMap;
use std::path::Path;

use crate::diffusion::{Schedule, Variant};
use crate::error::{Error, Result};
use crate::kinematics::Skeleton;
use crate::nn::denoiser::{DenoiserConfig, DenoiserNet};
use crate::nn::params::ParamStore;
use crate::rng::{derive, domain};
use crate::sequence::{SequenceConfig, SequenceModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub width: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub den_width: usize,
    pub den_blocks: usize,
    pub time_dim: usize,
    pub diffusion_steps: usize,
    pub alpha_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::So3,
            width: 64,
            heads: 4,
            enc_blocks: 4,
            dec_blocks: 4,
            den_width: 128,
            den_blocks: 3,
            time_dim: 32,
            diffusion_steps: crate::diffusion::DEFAULT_T,
            alpha_max: crate::diffusion::DEFAULT_ALPHA_MAX,
        }
    }
}

impl ModelConfig {
    pub fn sequence(&self, skel: &Skeleton) -> SequenceConfig {
        SequenceConfig {
            joints: skel.num_joints(),
            bones: skel.num_bones(),
            width: self.width,
            heads: self.heads,
            enc_blocks: self.enc_blocks,
            dec_blocks: self.dec_blocks,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            width: self.den_width,
            blocks: self.den_blocks,
            latent_dim: self.width,
            time_dim: self.time_dim,
            out_dim: self.variant.noise_dim(),
        }
    }

    fn to_pairs(self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.name().to_string()),
            ("width", self.width.to_string()),
            ("heads", self.heads.to_string()),
            ("enc_blocks", self.enc_blocks.to_string()),
            ("dec_blocks", self.dec_blocks.to_string()),
            ("den_width", self.den_width.to_string()),
            ("den_blocks", self.den_blocks.to_string()),
            ("time_dim", self.time_dim.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("alpha_max", format!("{:e}", self.alpha_max)),
        ]
    }

    fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T> {
            m.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("checkpoint metadata", format!("missing or bad {k}")))
        }
        let variant: String = get(m, "variant")?;
        Ok(ModelConfig {
            variant: Variant::parse(&variant)?,
            width: get(m, "width")?,
            heads: get(m, "heads")?,
            enc_blocks: get(m, "enc_blocks")?,
            dec_blocks: get(m, "dec_blocks")?,
            den_width: get(m, "den_width")?,
            den_blocks: get(m, "den_blocks")?,
            time_dim: get(m, "time_dim")?,
            diffusion_steps: get(m, "diffusion_steps")?,
            alpha_max: get(m, "alpha_max")?,
        })
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub skeleton: Skeleton,
    pub store: ParamStore,
    pub seq: SequenceModel,
    pub den: DenoiserNet,
    pub schedule: Schedule,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(o) => out.push(o),
                None => {}
            }
        } else {
            out.push(c);
        }
    }
    out
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, skeleton: Skeleton, seed: u64) -> Result<Self> {
        let schedule = Schedule::new(cfg.diffusion_steps, cfg.alpha_max)?;
        let mut store = ParamStore::new();
        let mut rng = derive(seed, domain::INIT, 0);
        let seq = SequenceModel::new(&mut store, "seq", cfg.sequence(&skeleton), &mut rng)?;
        let den = DenoiserNet::new(&mut store, "den", cfg.denoiser(), &mut rng)?;
        Ok(Model {
            cfg,
            skeleton,
            store,
            seq,
            den,
            schedule,
        })
    }

    pub fn from_store(cfg: ModelConfig, skeleton: Skeleton, store: ParamStore) -> Result<Self> {
        let schedule = Schedule::new(cfg.diffusion_steps, cfg.alpha_max)?;
        let seq = SequenceModel::from_store(&store, "seq", cfg.sequence(&skeleton))?;
        let den = DenoiserNet::from_store(&store, "den", cfg.denoiser())?;
        Ok(Model {
            cfg,
            skeleton,
            store,
            seq,
            den,
            schedule,
        })
    }

    pub fn metadata(&self, extra: &[(&str, String)]) -> String {
        let mut lines: Vec<String> = self
            .cfg
            .to_pairs()
            .into_iter()
            .chain(extra.iter().map(|(k, v)| (*k, v.clone())))
            .map(|(k, v)| format!("{k}={}", escape(&v)))
            .collect();
        lines.push(format!("skeleton={}", escape(&self.skeleton.to_text())));
        lines.join("\n")
    }

    pub fn save(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        self.store.save(path, &self.metadata(extra))
    }

    /// Loads a checkpoint; returns the model and every metadata entry.
    pub fn load(path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
        let (store, meta) = ParamStore::load(path)?;
        let map: BTreeMap<String, String> = meta
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), unescape(v)))
            .collect();
        let cfg = ModelConfig::from_map(&map)?;
        let skel_text = map
            .get("skeleton")
            .ok_or_else(|| Error::format(path.display().to_string(), "checkpoint lacks skeleton"))?;
        let skeleton = Skeleton::from_text(skel_text, "checkpoint skeleton")?;
        Ok((Model::from_store(cfg, skeleton, store)?, map))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig {
            width: 8,
            heads: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            den_width: 8,
            den_blocks: 1,
            time_dim: 4,
            diffusion_steps: 20,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, Skeleton::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p, &[("note", "a\nb".to_string())]).unwrap();
        let (back, meta) = Model::load(&p).unwrap();
        assert_eq!(back.cfg, cfg);
        assert_eq!(back.store, m.store);
        assert_eq!(back.skeleton, m.skeleton);
        assert_eq!(meta["note"], "a\nb");
        let again = Model::new(cfg, Skeleton::default(), 3).unwrap();
        assert_eq!(again.store, m.store);
    }
}
