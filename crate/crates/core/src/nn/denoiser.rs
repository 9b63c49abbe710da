//! Noise predictor ε_φ(x_t, t, z): a residual MLP over the flattened noisy
//! rotation, conditioned on the diffusion step through AdaLN and on the
//! per-token latent by concatenation before every block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::layers::{time_embedding, AdaLn, LayerNorm, Linear};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub width: usize,
    pub blocks: usize,
    pub latent_dim: usize,
    pub time_dim: usize,
    /// 3 for tangent-space noise, 9 for the flat-matrix variant.
    pub out_dim: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.blocks == 0 || self.latent_dim == 0 {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "denoiser time_dim must be even, got {}",
                self.time_dim
            )));
        }
        if self.out_dim != 3 && self.out_dim != 9 {
            return Err(Error::Config(format!("denoiser out_dim {} not in {{3, 9}}", self.out_dim)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm: AdaLn,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct DenoiserNet {
    cfg: DenoiserConfig,
    input: Linear,
    time: Linear,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
}

impl DenoiserNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: DenoiserConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let input = Linear::new(store, &format!("{prefix}.in"), 9 + cfg.latent_dim, w, 1.0, rng)?;
        let time = Linear::new(store, &format!("{prefix}.time"), cfg.time_dim, w, 1.0, rng)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let name = format!("{prefix}.block{i}");
            blocks.push(Block {
                norm: AdaLn::new(store, &format!("{name}.ada"), w, w)?,
                fc1: Linear::new(store, &format!("{name}.fc1"), w + cfg.latent_dim, w, 1.0, rng)?,
                fc2: Linear::new(store, &format!("{name}.fc2"), w, w, 0.5, rng)?,
            });
        }
        let final_norm = LayerNorm::new(store, &format!("{prefix}.norm"), w)?;
        let head = Linear::new(store, &format!("{prefix}.head"), w, cfg.out_dim, 0.1, rng)?;
        Ok(DenoiserNet {
            cfg,
            input,
            time,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let name = format!("{prefix}.block{i}");
                Ok(Block {
                    norm: AdaLn::from_store(store, &format!("{name}.ada"))?,
                    fc1: Linear::from_store(store, &format!("{name}.fc1"))?,
                    fc2: Linear::from_store(store, &format!("{name}.fc2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = DenoiserNet {
            cfg,
            input: Linear::from_store(store, &format!("{prefix}.in"))?,
            time: Linear::from_store(store, &format!("{prefix}.time"))?,
            blocks,
            final_norm: LayerNorm::from_store(store, &format!("{prefix}.norm"))?,
            head: Linear::from_store(store, &format!("{prefix}.head"))?,
        };
        if net.input.in_dim != 9 + cfg.latent_dim || net.head.out_dim != cfg.out_dim {
            return Err(Error::Incompatible(format!(
                "denoiser parameters do not match config {cfg:?}"
            )));
        }
        Ok(net)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// `x` is `n × 9` (row-major noisy matrices), `z` is `n × latent_dim`,
    /// `t` holds one timestep per row. Returns `n × out_dim`.
    pub fn forward(&self, g: &mut Graph, x: Var, z: Var, t: &[usize]) -> Result<Var> {
        let (n, xc) = g.shape(x);
        let (zn, zc) = g.shape(z);
        if xc != 9 || zn != n || zc != self.cfg.latent_dim || t.len() != n {
            return Err(Error::Shape {
                op: "denoiser",
                detail: format!("x {n}x{xc}, z {zn}x{zc}, {} timesteps", t.len()),
            });
        }
        let mut temb = Tensor::zeros(n, self.cfg.time_dim);
        for (r, &ti) in t.iter().enumerate() {
            temb.row_mut(r).copy_from_slice(&time_embedding(ti, self.cfg.time_dim)?);
        }
        let temb = g.input(temb);
        let c = self.time.forward(g, temb)?;
        let c = g.silu(c);

        let xz = g.concat_cols(&[x, z])?;
        let mut h = self.input.forward(g, xz)?;
        for b in &self.blocks {
            let u = b.norm.forward(g, h, c)?;
            let uz = g.concat_cols(&[u, z])?;
            let u = b.fc1.forward(g, uz)?;
            let u = g.silu(u);
            let u = b.fc2.forward(g, u)?;
            h = g.add(h, u)?;
        }
        let h = self.final_norm.forward(g, h)?;
        self.head.forward(g, h)
    }

    /// Inference helper over plain arrays.
    pub fn predict(
        &self,
        store: &ParamStore,
        x: &[[f64; 9]],
        z: &Tensor,
        t: usize,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let xs = Tensor::from_vec(x.len(), 9, x.iter().flatten().copied().collect())?;
        let xv = g.input(xs);
        let zv = g.input(z.clone());
        let out = self.forward(&mut g, xv, zv, &vec![t; x.len()])?;
        Ok(g.value(out).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DenoiserConfig {
        DenoiserConfig {
            width: 8,
            blocks: 2,
            latent_dim: 4,
            time_dim: 6,
            out_dim: 3,
        }
    }

    #[test]
    fn output_dim_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = DenoiserNet::new(&mut store, "den", cfg(), &mut rng).unwrap();
        let x = [[1.0, 0., 0., 0., 1., 0., 0., 0., 1.]; 3];
        let z = Tensor::randn(3, 4, 1.0, &mut rng);
        let a = net.predict(&store, &x, &z, 17).unwrap();
        let b = net.predict(&store, &x, &z, 17).unwrap();
        assert_eq!(a.len(), 9);
        assert_eq!(a, b);
        let again = DenoiserNet::from_store(&store, "den", cfg()).unwrap();
        assert_eq!(again.predict(&store, &x, &z, 17).unwrap(), a);
        assert!(net.predict(&store, &x, &Tensor::zeros(2, 4), 1).is_err());
        let bad = DenoiserConfig { time_dim: 5, ..cfg() };
        assert!(DenoiserNet::new(&mut ParamStore::new(), "d", bad, &mut rng).is_err());
    }

    #[test]
    fn denoiser_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = DenoiserNet::new(&mut store, "den", cfg(), &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let (r, c) = store.value(id).shape();
            let noise = Tensor::randn(r, c, 0.2, &mut rng);
            store.value_mut(id).add_assign(&noise);
        }
        let x = Tensor::randn(3, 9, 1.0, &mut rng);
        let z = Tensor::randn(3, 4, 1.0, &mut rng);
        let target = Tensor::randn(3, 3, 1.0, &mut rng);
        let build = |g: &mut Graph| {
            let xv = g.input(x.clone());
            let zv = g.input(z.clone());
            let y = net.forward(g, xv, zv, &[1, 50, 999]).unwrap();
            let tv = g.input(target.clone());
            let d = g.sub(y, tv).unwrap();
            let d = g.square(d);
            g.sum(d)
        };
        crate::nn::graph::tests::check_gradients(&mut store, &build, 1e-4);
    }
}
