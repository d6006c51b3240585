//! Named parameter storage, initialization, optimizer and weight files.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferId(pub(crate) usize);

/// Trainable parameters plus non-trainable state (running statistics,
/// power-iteration vectors) of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<(String, Tensor<T>)>,
    buffers: Buffers<T>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Buffers<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Element> Buffers<T> {
    pub fn get(&self, id: BufferId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Buffers {
                entries: Vec::new(),
            },
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push((name.into(), value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.entries.push((name.into(), value));
        BufferId(self.buffers.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].1
    }

    pub fn buffers(&self) -> &Buffers<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut Buffers<T> {
        &mut self.buffers
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameter ids in store order, matching gradient vectors.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Names and shapes of every parameter and buffer, in order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .chain(&self.buffers.entries)
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    /// Inserts every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Collects the gradients of bound parameters, zeros where none arrived.
    pub fn collect_grads(&self, grads: &Gradients<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(vars)
            .map(|((_, t), &v)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let conv = |e: &Vec<(String, Tensor<T>)>| {
            e.iter()
                .map(|(n, t)| (n.clone(), t.cast::<U>()))
                .collect::<Vec<_>>()
        };
        ParamStore {
            params: conv(&self.params),
            buffers: Buffers {
                entries: conv(&self.buffers.entries),
            },
        }
    }

    /// Writes all parameters and buffers as a little-endian `f32` blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        let all: Vec<_> = self
            .params
            .iter()
            .map(|e| (0u8, e))
            .chain(self.buffers.entries.iter().map(|e| (1u8, e)))
            .collect();
        out.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (kind, (name, t)) in all {
            out.push(kind);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        crate::io::write_atomic(path, &out)
    }

    /// Overwrites this store's values from a blob written by [`save`](Self::save).
    /// Names, order and shapes must match exactly.
    pub fn load_from(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::load(path, e))?
            .read_to_end(&mut bytes)?;
        let mut r = ByteReader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(Error::load(path, "not a weights file"));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::load(
                path,
                format!("weights format {version}, expected {WEIGHTS_VERSION}"),
            ));
        }
        let count = r.u32()? as usize;
        if count != self.params.len() + self.buffers.entries.len() {
            return Err(Error::load(
                path,
                format!(
                    "{count} tensors, architecture has {}",
                    self.params.len() + self.buffers.entries.len()
                ),
            ));
        }
        let n_params = self.params.len();
        for i in 0..count {
            let kind = r.take(1)?[0];
            let name_len = r.u32()? as usize;
            let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data: Vec<T> = raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let slot = if i < n_params {
                &mut self.params[i]
            } else {
                &mut self.buffers.entries[i - n_params]
            };
            if kind != u8::from(i >= n_params) || slot.0 != name || slot.1.shape() != shape.as_slice() {
                return Err(Error::load(
                    path,
                    format!(
                        "tensor {i} is `{name}` {shape:?}, expected `{}` {:?}",
                        slot.0,
                        slot.1.shape()
                    ),
                ));
            }
            slot.1 = Tensor::from_vec(&shape, data)?;
        }
        Ok(())
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"EXGW";
const WEIGHTS_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::load(self.path, "truncated weights file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Xavier-uniform initialization for a weight with the given fans.
pub fn xavier_uniform<T: Element>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> Tensor<T> {
    let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape and data agree")
}

/// Adam with bias correction; one instance per parameter store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let lr = T::from_f64(self.lr * c2.sqrt() / c1);
        let eps = T::from_f64(self.eps * c2.sqrt());
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &g), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::ONE - b1) * g;
                *vv = b2 * *vv + (T::ONE - b2) * g * g;
                *pv -= lr * *mv / (vv.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.add("w", xavier_uniform(&mut rng, &[3, 2], 2, 3, 1.0));
        s.add("b", Tensor::zeros(&[3]));
        s.add_buffer("running_mean", Tensor::full(&[3], 0.5));
        s
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let s = store();
        s.save(&path).unwrap();
        let mut t = store();
        t.get_mut(ParamId(0)).data_mut()[0] = 42.0;
        t.load_from(&path).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn load_rejects_other_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        store().save(&path).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("w", Tensor::zeros(&[2, 2]));
        assert!(other.load_from(&path).is_err());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(store().load_from(&path).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::full(&[2], 3.0));
        let mut opt = Adam::new(&s, 0.05, 0.9, 0.999);
        for _ in 0..2000 {
            let g: Vec<f64> = s.get(id).data().iter().map(|&x| 2.0 * (x - 1.0)).collect();
            opt.step(&mut s, &[Tensor::from_vec(&[2], g).unwrap()]);
        }
        assert!(s.get(id).data().iter().all(|&x| (x - 1.0).abs() < 1e-3));
    }
}
