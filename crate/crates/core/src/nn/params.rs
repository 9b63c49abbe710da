//! Named parameter tensors with gradients and Adam moments, plus the
//! binary checkpoint container.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "SO3MARCK"
//! version    u32      = 1
//! meta_len   u32      length of the UTF-8 metadata block
//! meta       bytes    `key=value` lines
//! adam_step  u64
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes, rows u32, cols u32,
//!   value, first moment, second moment: rows·cols f64 each
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SO3MARCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Gradients for every parameter touched by a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let (r, c) = value.shape();
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.data().len()).sum()
    }

    pub fn adam_steps(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Adds `scale · g` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (e, g) in self.entries.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (a, b) in e.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.grad.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales the stored gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if max_norm > 0.0 && norm > max_norm {
            let s = max_norm / norm;
            for e in &mut self.entries {
                e.grad.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    /// Bias-corrected Adam update from the stored gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            let g = e.grad.data();
            let m = e.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = e.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (e.m.data(), e.v.data());
            for ((p, mi), vi) in e.value.data_mut().iter_mut().zip(m).zip(v) {
                let mh = mi / c1;
                let vh = vi / c2;
                *p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }

    pub fn save(&self, path: &Path, metadata: &str) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, metadata)
            .map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W, metadata: &str) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(metadata.len() as u32).to_le_bytes())?;
        w.write_all(metadata.as_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.value.rows() as u32).to_le_bytes())?;
            w.write_all(&(e.value.cols() as u32).to_le_bytes())?;
            for t in [&e.value, &e.m, &e.v] {
                for x in t.data() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Reads a checkpoint; returns the store and its metadata block.
    pub fn load(path: &Path) -> Result<(ParamStore, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
            .map_err(|e| Error::format(path.display().to_string(), e))
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::result::Result<(ParamStore, String), String> {
        fn read_u32<R: Read>(r: &mut R) -> std::result::Result<u32, String> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| e.to_string())?;
            Ok(u32::from_le_bytes(b))
        }
        fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::result::Result<Vec<f64>, String> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(|e| e.to_string())?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        }
        fn read_string<R: Read>(r: &mut R, n: usize) -> std::result::Result<String, String> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|e| e.to_string())?;
            String::from_utf8(buf).map_err(|e| e.to_string())
        }

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != CHECKPOINT_MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let meta_len = read_u32(r)? as usize;
        let metadata = read_string(r, meta_len)?;
        let mut step = [0u8; 8];
        r.read_exact(&mut step).map_err(|e| e.to_string())?;
        let step = u64::from_le_bytes(step);
        let count = read_u32(r)? as usize;
        let mut store = ParamStore::new();
        store.step = step;
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = read_string(r, name_len)?;
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            let n = rows * cols;
            let value = Tensor::from_vec(rows, cols, read_f64s(r, n)?).map_err(|e| e.to_string())?;
            let m = Tensor::from_vec(rows, cols, read_f64s(r, n)?).map_err(|e| e.to_string())?;
            let v = Tensor::from_vec(rows, cols, read_f64s(r, n)?).map_err(|e| e.to_string())?;
            let id = store.add(name, value).map_err(|e| e.to_string())?;
            store.entries[id.0].m = m;
            store.entries[id.0].v = v;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| e.to_string())?;
        if !rest.is_empty() {
            return Err(format!("{} trailing bytes", rest.len()));
        }
        Ok((store, metadata))
    }

    /// Copies values (and optimizer state) from `other`, matching by name and shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for e in &mut self.entries {
            let src = other
                .id(&e.name)
                .map(|id| &other.entries[id.0])
                .ok_or_else(|| Error::Incompatible(format!("missing tensor {}", e.name)))?;
            if src.value.shape() != e.value.shape() {
                return Err(Error::Incompatible(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name,
                    src.value.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.value.clone();
            e.m = src.m.clone();
            e.v = src.v.clone();
        }
        self.step = other.step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_grad(g: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::filled(2, 2, 0.5)).unwrap();
        s.entries[0].grad.fill(g);
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = store_with_grad(0.0);
        let before = s.value(id).clone();
        for _ in 0..10 {
            s.adam_step(&AdamConfig::default());
        }
        assert_eq!(s.value(id), &before);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let (mut s, id) = store_with_grad(3.0);
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut last = s.value(id).get(0, 0);
        for k in 0..200 {
            s.adam_step(&cfg);
            let now = s.value(id).get(0, 0);
            if k > 100 {
                assert!(((last - now) - 0.01).abs() < 1e-6);
            }
            last = now;
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(1, 1)).unwrap();
        assert!(s.add("a", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let (mut s, _) = store_with_grad(1.0);
        s.add("b", Tensor::from_vec(1, 3, vec![1.0, -2.5, 1e-300]).unwrap())
            .unwrap();
        s.adam_step(&AdamConfig::default());
        let mut buf = Vec::new();
        s.write_to(&mut buf, "variant=so3\n").unwrap();
        let (back, meta) = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(meta, "variant=so3\n");
        assert_eq!(back.adam_steps(), 1);
        for id in s.ids() {
            assert_eq!(s.value(id), back.value(id));
            assert_eq!(s.entries[id.0].m, back.entries[id.0].m);
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(ParamStore::read_from(&mut bad.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 3];
        assert!(ParamStore::read_from(&mut &truncated[..]).is_err());
    }
}
