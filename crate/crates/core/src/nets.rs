//! Encoder, conditional generator and ordinal projection discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::BinIndex;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{AffineNorm, Bound, Conv, DiscBlock, EncBlock, GenBlock, Linear, Mode, Norm, Table};
use crate::param::ParamStore;
use crate::tensor::{Element, Tensor};

/// Architecture hyper-parameters. Parameter shapes are a pure function of it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub image_channels: usize,
    pub image_size: usize,
    /// Number of condition bins.
    pub bins: usize,
    /// Width of the encoder stem; doubles at every downsampling.
    pub base_channels: usize,
    /// Downsampling steps of the encoder (and upsampling steps of the generator).
    pub down_steps: usize,
    /// Residual blocks in the generator, at least `down_steps`.
    pub gen_blocks: usize,
    pub disc_channels: usize,
    /// Residual blocks in the discriminator, at least `down_steps`.
    pub disc_blocks: usize,
    pub spectral_norm: bool,
}

impl NetConfig {
    /// Desk-scale default for 32x32 grayscale images.
    pub fn desk(bins: usize) -> Self {
        Self {
            image_channels: 1,
            image_size: 32,
            bins,
            base_channels: 8,
            down_steps: 2,
            gen_blocks: 3,
            disc_channels: 16,
            disc_blocks: 3,
            spectral_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.bins < 2 {
            return fail(format!("need at least 2 bins, got {}", self.bins));
        }
        if self.image_channels == 0 || self.base_channels == 0 || self.disc_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.down_steps == 0 || self.image_size % (1 << self.down_steps) != 0 {
            return fail(format!(
                "image size {} is not divisible by 2^{}",
                self.image_size, self.down_steps
            ));
        }
        if self.gen_blocks < self.down_steps || self.disc_blocks < self.down_steps {
            return fail("generator and discriminator need at least down_steps blocks".into());
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_size, self.image_size]
    }

    /// Shape of one latent code `E(x)`: a spatial feature map.
    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.image_size >> self.down_steps;
        [self.base_channels << self.down_steps, s, s]
    }

    /// Dimension of the discriminator feature vector `phi(x)`.
    pub fn feature_dim(&self) -> usize {
        self.disc_channels << (self.down_steps - 1)
    }
}

fn check_images<T: Element>(x: &Tensor<T>, shape: [usize; 3], what: &str) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != shape {
        return Err(Error::Shape(format!("{what}: expected [N, {shape:?}], got {s:?}")));
    }
    if s[0] == 0 {
        return Err(Error::Shape(format!("{what}: empty batch")));
    }
    if !x.all_finite() {
        return Err(Error::Contract(format!("{what}: non-finite input")));
    }
    Ok(())
}

/// Downsampling residual encoder `E`.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub store: ParamStore<T>,
    cfg: NetConfig,
    stem: Conv,
    blocks: Vec<EncBlock>,
    out_norm: AffineNorm,
}

impl<T: Element> Encoder<T> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut ch = cfg.base_channels;
        let stem = Conv::new(&mut store, &mut rng, "enc.stem", cfg.image_channels, ch, 3, false, 1.0);
        let mut blocks = Vec::new();
        for i in 0..cfg.down_steps {
            blocks.push(EncBlock::new(&mut store, &mut rng, &format!("enc.block{i}"), ch, ch * 2));
            ch *= 2;
        }
        let out_norm = AffineNorm::new(&mut store, "enc.out", ch);
        Ok(Self {
            store,
            cfg: cfg.clone(),
            stem,
            blocks,
            out_norm,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn forward(&self, g: &mut Graph<T>, b: &mut Bound<T>, x: Var) -> Result<Var> {
        let s = &self.store;
        let mut h = self.stem.forward(s, g, b, x)?;
        for blk in &self.blocks {
            h = blk.forward(s, g, b, h)?;
        }
        self.out_norm.forward(s, g, b, h)
    }

    /// Inference-mode `E(x)` for a batch of images.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_images(x, self.cfg.image_shape(), "encode")?;
        let mut g = Graph::new();
        let mut b = Bound::new(&self.store, &mut g, Mode::EVAL);
        let xv = g.constant(x.clone());
        let z = self.forward(&mut g, &mut b, xv)?;
        Ok(g.value(z).clone())
    }
}

/// Upsampling residual generator `G(z, k)` with conditional batch norm.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub store: ParamStore<T>,
    cfg: NetConfig,
    blocks: Vec<GenBlock>,
    out_norm: Norm,
    out_conv: Conv,
}

impl<T: Element> Generator<T> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut ch = cfg.latent_shape()[0];
        let mut blocks = Vec::new();
        for i in 0..cfg.gen_blocks {
            let up = i < cfg.down_steps;
            let out = if up { ch / 2 } else { ch };
            blocks.push(GenBlock::new(&mut store, &mut rng, &format!("gen.block{i}"), ch, out, cfg.bins, up));
            ch = out;
        }
        let out_norm = Norm::new(&mut store, "gen.out_bn", ch);
        let out_conv = Conv::new(&mut store, &mut rng, "gen.out", ch, cfg.image_channels, 3, false, 1.0);
        Ok(Self {
            store,
            cfg: cfg.clone(),
            blocks,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// `G(z, k)` with the output squashed into `[0, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, b: &mut Bound<T>, z: Var, ks: &[usize]) -> Result<Var> {
        if let Some(&k) = ks.iter().find(|&&k| k >= self.cfg.bins) {
            return Err(Error::Contract(format!(
                "condition {k} outside [0, {}]",
                self.cfg.bins - 1
            )));
        }
        let s = &self.store;
        let mut h = z;
        for blk in &self.blocks {
            h = blk.forward(s, g, b, h, ks)?;
        }
        h = self.out_norm.forward(s, g, b, h)?;
        h = g.relu(h);
        h = self.out_conv.forward(s, g, b, h)?;
        Ok(g.sigmoid(h))
    }

    /// Inference-mode generation; one condition per latent.
    pub fn generate(&self, z: &Tensor<T>, ks: &[BinIndex]) -> Result<Tensor<T>> {
        check_images(z, self.cfg.latent_shape(), "generate")?;
        if ks.len() != z.batch() {
            return Err(Error::Shape(format!(
                "{} conditions for {} latents",
                ks.len(),
                z.batch()
            )));
        }
        let ks: Vec<usize> = ks.iter().map(|k| k.0).collect();
        let mut g = Graph::new();
        let mut b = Bound::new(&self.store, &mut g, Mode::EVAL);
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, &mut b, zv, &ks)?;
        Ok(g.value(out).clone())
    }

    /// Every conditional (scale, shift) table, for structural tests.
    pub fn condition_tables(&self) -> Vec<crate::param::ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.cond_norms())
            .flat_map(|n| {
                let (g, b) = n.tables();
                [g, b]
            })
            .collect()
    }
}

/// Projection discriminator `D(x, k) = psi(phi(x)) + sum_{i<k} v_i . phi(x)`.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub store: ParamStore<T>,
    cfg: NetConfig,
    blocks: Vec<DiscBlock>,
    head: Linear,
    ordinal: Table,
}

impl<T: Element> Discriminator<T> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sn = cfg.spectral_norm;
        let mut blocks = Vec::new();
        let mut cin = cfg.image_channels;
        let mut ch = cfg.disc_channels;
        for i in 0..cfg.disc_blocks {
            let down = i < cfg.down_steps;
            blocks.push(DiscBlock::new(&mut store, &mut rng, &format!("disc.block{i}"), cin, ch, down, i == 0, sn));
            cin = ch;
            if down && i + 1 < cfg.down_steps {
                ch *= 2;
            }
        }
        debug_assert_eq!(cin, cfg.feature_dim());
        let head = Linear::new(&mut store, &mut rng, "disc.psi", cin, 1, true, sn);
        let ordinal = Table::new(&mut store, &mut rng, "disc.ordinal", cfg.bins - 1, cin, sn);
        Ok(Self {
            store,
            cfg: cfg.clone(),
            blocks,
            head,
            ordinal,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Feature network `phi`: residual blocks, ReLU, spatial sum pooling.
    pub fn features(&self, g: &mut Graph<T>, b: &mut Bound<T>, x: Var) -> Result<Var> {
        let s = &self.store;
        let mut h = x;
        for blk in &self.blocks {
            h = blk.forward(s, g, b, h)?;
        }
        h = g.relu(h);
        g.sum_spatial(h)
    }

    /// Scores `[N, 1]` for images `x` under conditions `ks`.
    pub fn forward(&self, g: &mut Graph<T>, b: &mut Bound<T>, x: Var, ks: &[usize]) -> Result<Var> {
        if let Some(&k) = ks.iter().find(|&&k| k >= self.cfg.bins) {
            return Err(Error::Contract(format!(
                "condition {k} outside [0, {}]",
                self.cfg.bins - 1
            )));
        }
        let phi = self.features(g, b, x)?;
        let psi = self.head.forward(&self.store, g, b, phi)?;
        let table = self.ordinal.forward(&self.store, g, b)?;
        let r = g.ordinal_project(phi, table, ks)?;
        g.add(psi, r)
    }

    /// Inference-mode `phi(x)` as `[N, F]`.
    pub fn feature_vectors(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_images(x, self.cfg.image_shape(), "discriminator")?;
        let mut g = Graph::new();
        let mut b = Bound::new(&self.store, &mut g, Mode::EVAL);
        let xv = g.constant(x.clone());
        let phi = self.features(&mut g, &mut b, xv)?;
        Ok(g.value(phi).clone())
    }

    /// The effective ordinal vectors `v_0 .. v_{N-2}` as `[N-1, F]`.
    pub fn ordinal_vectors(&self) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut b = Bound::new(&self.store, &mut g, Mode::EVAL);
        let t = self.ordinal.forward(&self.store, &mut g, &mut b)?;
        Ok(g.value(t).clone())
    }

    /// Parameter holding the raw ordinal table.
    pub fn ordinal_param(&self) -> crate::param::ParamId {
        self.ordinal.param()
    }

    /// Ordinal ratio `r(c = k | x) = sum_{i<k} v_i . phi(x)` for one feature vector.
    pub fn ordinal_ratio(&self, features: &[T], k: BinIndex) -> Result<T> {
        let v = self.ordinal_vectors()?;
        let f = self.cfg.feature_dim();
        if features.len() != f {
            return Err(Error::Shape(format!("expected {f} features, got {}", features.len())));
        }
        if k.0 >= self.cfg.bins {
            return Err(Error::Contract(format!("bin {} outside [0, {}]", k.0, self.cfg.bins - 1)));
        }
        Ok((0..k.0).fold(T::ZERO, |acc, i| {
            acc + v.data()[i * f..][..f]
                .iter()
                .zip(features)
                .fold(T::ZERO, |a, (&x, &y)| a + x * y)
        }))
    }

    /// Inference-mode scores, one per image.
    pub fn discriminate(&self, x: &Tensor<T>, ks: &[BinIndex]) -> Result<Vec<T>> {
        check_images(x, self.cfg.image_shape(), "discriminate")?;
        if ks.len() != x.batch() {
            return Err(Error::Shape("one condition per image".into()));
        }
        let ks: Vec<usize> = ks.iter().map(|k| k.0).collect();
        let mut g = Graph::new();
        let mut b = Bound::new(&self.store, &mut g, Mode::EVAL);
        let xv = g.constant(x.clone());
        let d = self.forward(&mut g, &mut b, xv, &ks)?;
        Ok(g.value(d).data().to_vec())
    }
}
