//! Adversarial training of the explainer against a frozen classifier, plus
//! bundle checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blackbox::{predict_batched, BlackBox};
use crate::conditioning::{BinIndex, ConditionSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{apply_updates, Bound, BufferUpdate, Mode};
use crate::losses::{self, KlDirection, LossTerms, LossWeights, TermVars};
use crate::nets::{Discriminator, Encoder, Generator, NetConfig};
use crate::param::Adam;
use crate::synthdata::LabeledImageDataset;
use crate::tensor::{Element, Tensor};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub delta: f64,
    pub weights: LossWeights,
    pub kl_direction: KlDirection,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub d_steps: usize,
    pub steps: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    /// Any loss above this aborts training.
    pub divergence_threshold: f64,
    /// Batches used to re-estimate normalization statistics after training.
    pub calibration_batches: usize,
    pub base_channels: usize,
    pub down_steps: usize,
    pub gen_blocks: usize,
    pub disc_channels: usize,
    pub disc_blocks: usize,
    pub spectral_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::desk(10);
        Self {
            delta: 0.1,
            weights: LossWeights {
                rec: 3.0,
                ..LossWeights::default()
            },
            kl_direction: KlDirection::TargetFirst,
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.0,
            beta2: 0.9,
            batch_size: 32,
            d_steps: 1,
            steps: 3000,
            seed: 0,
            checkpoint_interval: 1000,
            divergence_threshold: 1e4,
            calibration_batches: 20,
            base_channels: net.base_channels,
            down_steps: net.down_steps,
            gen_blocks: net.gen_blocks,
            disc_channels: net.disc_channels,
            disc_blocks: net.disc_blocks,
            spectral_norm: net.spectral_norm,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.d_steps == 0 {
            return Err(Error::Config("need at least one discriminator step per generator step".into()));
        }
        for (n, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{n} must be non-negative, got {v}")));
            }
        }
        for (n, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{n} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::Config("divergence threshold must be positive".into()));
        }
        ConditionSpec::new(self.delta)?;
        Ok(())
    }

    pub fn condition_spec(&self) -> Result<ConditionSpec> {
        ConditionSpec::new(self.delta)
    }

    pub fn net_config(&self, image_shape: [usize; 3]) -> Result<NetConfig> {
        if image_shape[1] != image_shape[2] {
            return Err(Error::Config(format!("images must be square, got {image_shape:?}")));
        }
        let cfg = NetConfig {
            image_channels: image_shape[0],
            image_size: image_shape[1],
            bins: self.condition_spec()?.bins(),
            base_channels: self.base_channels,
            down_steps: self.down_steps,
            gen_blocks: self.gen_blocks,
            disc_channels: self.disc_channels,
            disc_blocks: self.disc_blocks,
            spectral_norm: self.spectral_norm,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Checkpoint manifest of an [`ExplainerBundle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub delta: f64,
    pub bins: usize,
    pub image_shape: [usize; 3],
    pub net: NetConfig,
    pub spectral_norm: bool,
    pub training_step: usize,
    pub seed: u64,
    pub format_version: u32,
}

/// Encoder, generator and discriminator trained together for one classifier.
#[derive(Clone, Debug)]
pub struct ExplainerBundle {
    pub encoder: Encoder<f32>,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub spec: ConditionSpec,
    pub manifest: BundleManifest,
}

impl ExplainerBundle {
    pub fn new(net: &NetConfig, delta: f64, seed: u64) -> Result<Self> {
        let spec = ConditionSpec::new(delta)?;
        if spec.bins() != net.bins {
            return Err(Error::Config(format!(
                "delta {delta} gives {} bins but the networks have {}",
                spec.bins(),
                net.bins
            )));
        }
        Ok(Self {
            encoder: Encoder::new(net, seed)?,
            generator: Generator::new(net, seed.wrapping_add(1))?,
            discriminator: Discriminator::new(net, seed.wrapping_add(2))?,
            spec,
            manifest: BundleManifest {
                delta,
                bins: spec.bins(),
                image_shape: net.image_shape(),
                net: net.clone(),
                spectral_norm: net.spectral_norm,
                training_step: 0,
                seed,
                format_version: BUNDLE_FORMAT_VERSION,
            },
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.manifest.image_shape
    }

    /// `G(E(x), k)` for a batch of queries, one condition each.
    pub fn generate(&self, x: &Tensor<f32>, ks: &[BinIndex]) -> Result<Tensor<f32>> {
        let z = self.encoder.encode(x)?;
        self.generator.generate(&z, ks)
    }
}

const ENCODER_FILE: &str = "encoder.bin";
const GENERATOR_FILE: &str = "generator.bin";
const DISCRIMINATOR_FILE: &str = "discriminator.bin";

/// Writes the bundle into `dir` (weights plus `manifest.json`).
pub fn save_bundle(bundle: &ExplainerBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    bundle.encoder.store.save(&dir.join(ENCODER_FILE))?;
    bundle.generator.store.save(&dir.join(GENERATOR_FILE))?;
    bundle.discriminator.store.save(&dir.join(DISCRIMINATOR_FILE))?;
    crate::io::write_json_atomic(&dir.join("manifest.json"), &bundle.manifest)
}

pub fn load_bundle(dir: &Path) -> Result<ExplainerBundle> {
    let path = dir.join("manifest.json");
    let m: BundleManifest = crate::io::read_manifest(&path)?;
    let bad = |field: &str, reason: String| Error::Manifest {
        path: path.clone(),
        field: field.into(),
        reason,
    };
    if m.format_version != BUNDLE_FORMAT_VERSION {
        return Err(bad(
            "format_version",
            format!("expected {BUNDLE_FORMAT_VERSION}, found {}", m.format_version),
        ));
    }
    let spec = ConditionSpec::new(m.delta).map_err(|e| bad("delta", e.to_string()))?;
    if spec.bins() != m.bins || m.net.bins != m.bins {
        return Err(bad("bins", format!("delta {} implies {} bins, found {}", m.delta, spec.bins(), m.bins)));
    }
    if m.net.image_shape() != m.image_shape {
        return Err(bad("image_shape", "does not match the network configuration".into()));
    }
    if m.net.spectral_norm != m.spectral_norm {
        return Err(bad("spectral_norm", "does not match the network configuration".into()));
    }
    let mut b = ExplainerBundle::new(&m.net, m.delta, m.seed)?;
    b.encoder.store.load_from(&dir.join(ENCODER_FILE))?;
    b.generator.store.load_from(&dir.join(GENERATOR_FILE))?;
    b.discriminator.store.load_from(&dir.join(DISCRIMINATOR_FILE))?;
    b.manifest = m;
    Ok(b)
}

/// Where training writes its side outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// `step,loss_name,value` rows, one per step and loss.
    pub metrics: Option<PathBuf>,
    /// Checkpoints go to `<dir>/step-NNNNNN`.
    pub checkpoints: Option<PathBuf>,
}

pub const LOSS_NAMES: [&str; 6] = ["d_loss", "g_adv", "kl", "rec", "cyc", "g_total"];

/// Losses of one generator step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub d_loss: f64,
    pub terms: LossTerms,
    pub g_total: f64,
}

impl StepLosses {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("d_loss", self.d_loss),
            ("g_adv", self.terms.cgan),
            ("kl", self.terms.kl),
            ("rec", self.terms.rec),
            ("cyc", self.terms.cyc),
            ("g_total", self.g_total),
        ]
    }
}

/// Generator-side graph before the discriminator term is attached.
pub struct GeneratorForward<T> {
    pub fake: Var,
    pub kl: Var,
    pub rec: Var,
    pub cyc: Var,
    pub enc_vars: Vec<Var>,
    pub gen_vars: Vec<Var>,
    pub enc_updates: Vec<BufferUpdate<T>>,
    pub gen_updates: Vec<BufferUpdate<T>>,
}

/// The complete generator objective.
pub struct GeneratorGraph<T> {
    pub forward: GeneratorForward<T>,
    pub terms: TermVars,
    pub total: Var,
}

/// Everything the generator objective needs about one batch.
pub struct Batch<'a, T> {
    pub x: &'a Tensor<T>,
    /// `c_f(x, 0)` per image.
    pub c0: &'a [usize],
    /// Sampled target bins.
    pub k: &'a [usize],
    /// Target posterior of each `k`.
    pub targets: &'a [f64],
}

/// Fakes `G(E(x), k)`, reconstructions `G(E(x), c0)`, cycles
/// `G(E(fake), c0)` and the KL, reconstruction and cycle terms. Running
/// statistic updates of the cycle pass are dropped so they track real
/// images only.
pub fn generator_forward<T: Element>(
    g: &mut Graph<T>,
    enc: &Encoder<T>,
    gen: &Generator<T>,
    bb: &dyn BlackBox<T>,
    batch: &Batch<'_, T>,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<GeneratorForward<T>> {
    let n = batch.x.batch();
    let mut be = Bound::new(&enc.store, g, mode);
    let mut bg = Bound::new(&gen.store, g, mode);
    let x = g.constant(batch.x.clone());
    let z = enc.forward(g, &mut be, x)?;
    let zz = g.concat(&[z, z])?;
    let ks: Vec<usize> = batch.k.iter().chain(batch.c0).copied().collect();
    let out = gen.forward(g, &mut bg, zz, &ks)?;
    let fake = g.slice(out, 0, n)?;
    let rec_img = g.slice(out, n, n)?;

    let (enc_keep, gen_keep) = (be.updates.len(), bg.updates.len());
    let z2 = enc.forward(g, &mut be, fake)?;
    let cyc_img = gen.forward(g, &mut bg, z2, batch.c0)?;
    be.updates.truncate(enc_keep);
    bg.updates.truncate(gen_keep);

    let kl = match bb.logit_graph(g, fake)? {
        Some(z) => losses::kl_term_logits(g, z, batch.targets, cfg.kl_direction)?,
        None => {
            let q = bb.posterior_graph(g, fake)?;
            losses::kl_term(g, q, batch.targets, cfg.kl_direction)?
        }
    };
    let rec = g.mean_abs_diff(rec_img, x)?;
    let cyc = g.mean_abs_diff(cyc_img, x)?;
    Ok(GeneratorForward {
        fake,
        kl,
        rec,
        cyc,
        enc_vars: be.vars,
        gen_vars: bg.vars,
        enc_updates: be.updates,
        gen_updates: bg.updates,
    })
}

/// Attaches `-D(fake, k)` with the discriminator frozen and sums the terms.
pub fn finish_generator_objective<T: Element>(
    g: &mut Graph<T>,
    disc: &Discriminator<T>,
    forward: GeneratorForward<T>,
    k: &[usize],
    weights: &LossWeights,
) -> Result<GeneratorGraph<T>> {
    let mut bd = Bound::new(&disc.store, g, Mode::EVAL);
    let d_fake = disc.forward(g, &mut bd, forward.fake, k)?;
    let cgan = losses::hinge_g(g, d_fake);
    let terms = TermVars {
        cgan,
        kl: forward.kl,
        rec: forward.rec,
        cyc: forward.cyc,
    };
    let total = losses::total(g, &terms, weights)?;
    Ok(GeneratorGraph { forward, terms, total })
}

/// Value of the full generator objective and its gradients with respect to
/// every encoder and generator parameter, in store order. Batch statistics
/// are used for normalization; the discriminator is frozen.
pub fn generator_objective<T: Element>(
    enc: &Encoder<T>,
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    bb: &dyn BlackBox<T>,
    batch: &Batch<'_, T>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let fwd = generator_forward(&mut g, enc, gen, bb, batch, cfg, Mode::TRAIN)?;
    let gg = finish_generator_objective(&mut g, disc, fwd, batch.k, &cfg.weights)?;
    let value = g.scalar(gg.total).to_f64();
    let grads = g.backward(gg.total)?;
    Ok((
        value,
        enc.store.collect_grads(&grads, &gg.forward.enc_vars),
        gen.store.collect_grads(&grads, &gg.forward.gen_vars),
    ))
}

/// Holds the networks, optimizers and sampling state of a training run.
pub struct ExplainerTrainer<'a> {
    pub bundle: ExplainerBundle,
    bb: &'a dyn BlackBox<f32>,
    cfg: TrainConfig,
    images: Tensor<f32>,
    c0: Vec<usize>,
    opt_e: Adam<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> ExplainerTrainer<'a> {
    pub fn new(images: &Tensor<f32>, bb: &'a dyn BlackBox<f32>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if images.shape().len() != 4 || images.batch() == 0 {
            return Err(Error::Training("training set is empty".into()));
        }
        let shape = [images.shape()[1], images.shape()[2], images.shape()[3]];
        if bb.input_shape() != shape {
            return Err(Error::Contract(format!(
                "classifier expects {:?}, data is {shape:?}",
                bb.input_shape()
            )));
        }
        let net = cfg.net_config(shape)?;
        let bundle = ExplainerBundle::new(&net, cfg.delta, cfg.seed)?;
        let spec = bundle.spec;
        let fx = predict_batched(bb, images, 256)?;
        let c0 = fx
            .iter()
            .map(|&p| spec.bin_index(f64::from(p).clamp(0.0, 1.0)).map(|k| k.0))
            .collect::<Result<Vec<_>>>()?;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        Ok(Self {
            opt_e: Adam::new(&bundle.encoder.store, cfg.lr_g, b1, b2),
            opt_g: Adam::new(&bundle.generator.store, cfg.lr_g, b1, b2),
            opt_d: Adam::new(&bundle.discriminator.store, cfg.lr_d, b1, b2),
            bundle,
            bb,
            cfg: cfg.clone(),
            images: images.clone(),
            c0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11),
            order: Vec::new(),
            cursor: usize::MAX,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn next_indices(&mut self) -> Vec<usize> {
        let n = self.images.batch();
        let bs = self.cfg.batch_size.min(n);
        if self.cursor.saturating_add(bs) > self.order.len() {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + bs].to_vec();
        self.cursor += bs;
        idx
    }

    fn sample_bins(&mut self, n: usize) -> Vec<usize> {
        let bins = self.bundle.spec.bins();
        (0..n).map(|_| self.rng.gen_range(0..bins)).collect()
    }

    fn targets(&self, k: &[usize]) -> Vec<f64> {
        k.iter()
            .map(|&k| self.bundle.spec.bin_target_posterior(BinIndex(k)).expect("sampled in range"))
            .collect()
    }

    /// One hinge update of the discriminator on real images at `c0` and
    /// fixed fakes at `k`. Touches only discriminator state.
    pub fn discriminator_step(&mut self, x: &Tensor<f32>, c0: &[usize], fake: &Tensor<f32>, k: &[usize]) -> Result<f64> {
        let disc = &self.bundle.discriminator;
        let mut g = Graph::new();
        let mut b = Bound::new(&disc.store, &mut g, Mode::TRAIN);
        let both = g.constant(Tensor::stack(&[x, fake])?);
        let ks: Vec<usize> = c0.iter().chain(k).copied().collect();
        let scores = disc.forward(&mut g, &mut b, both, &ks)?;
        let n = x.batch();
        let real = g.slice(scores, 0, n)?;
        let fk = g.slice(scores, n, fake.batch())?;
        let loss = losses::hinge_d(&mut g, real, fk)?;
        let value = f64::from(g.scalar(loss));
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = g.backward(loss)?;
        let grads = disc.store.collect_grads(&grads, &b.vars);
        let disc = &mut self.bundle.discriminator;
        self.opt_d.step(&mut disc.store, &grads);
        apply_updates(&mut disc.store, b.updates);
        Ok(value)
    }

    /// One encoder/generator update against the current discriminator.
    /// Touches only encoder and generator state. The discriminator sees the
    /// batch's fakes first when `d_first` is set.
    pub fn generator_step(&mut self, x: &Tensor<f32>, c0: &[usize], k: &[usize], d_first: bool) -> Result<StepLosses> {
        let targets = self.targets(k);
        let batch = Batch { x, c0, k, targets: &targets };
        let mut g = Graph::new();
        let b = &self.bundle;
        let fwd = generator_forward(&mut g, &b.encoder, &b.generator, self.bb, &batch, &self.cfg, Mode::TRAIN)?;
        let d_loss = if d_first {
            let fake = g.value(fwd.fake).clone();
            self.discriminator_step(x, c0, &fake, k)?
        } else {
            f64::NAN
        };
        let gg = finish_generator_objective(&mut g, &self.bundle.discriminator, fwd, k, &self.cfg.weights)?;
        let losses = StepLosses {
            d_loss,
            terms: gg.terms.values(&g),
            g_total: f64::from(g.scalar(gg.total)),
        };
        if !losses.named()[1..].iter().all(|(_, v)| v.is_finite()) {
            return Ok(losses);
        }
        let grads = g.backward(gg.total)?;
        let b = &mut self.bundle;
        let ge = b.encoder.store.collect_grads(&grads, &gg.forward.enc_vars);
        let gn = b.generator.store.collect_grads(&grads, &gg.forward.gen_vars);
        self.opt_e.step(&mut b.encoder.store, &ge);
        self.opt_g.step(&mut b.generator.store, &gn);
        apply_updates(&mut b.encoder.store, gg.forward.enc_updates);
        apply_updates(&mut b.generator.store, gg.forward.gen_updates);
        Ok(losses)
    }

    /// Fakes from the current networks without touching any state.
    fn sample_fakes(&self, x: &Tensor<f32>, k: &[usize]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let peek = Mode {
            grad: false,
            batch_stats: true,
        };
        let mut be = Bound::new(&self.bundle.encoder.store, &mut g, peek);
        let mut bg = Bound::new(&self.bundle.generator.store, &mut g, peek);
        let xv = g.constant(x.clone());
        let z = self.bundle.encoder.forward(&mut g, &mut be, xv)?;
        let out = self.bundle.generator.forward(&mut g, &mut bg, z, k)?;
        Ok(g.value(out).clone())
    }

    /// `d_steps` discriminator updates followed by one generator update.
    pub fn step(&mut self) -> Result<StepLosses> {
        for _ in 1..self.cfg.d_steps {
            let idx = self.next_indices();
            let x = self.images.select(&idx);
            let c0: Vec<usize> = idx.iter().map(|&i| self.c0[i]).collect();
            let k = self.sample_bins(idx.len());
            let fake = self.sample_fakes(&x, &k)?;
            self.discriminator_step(&x, &c0, &fake, &k)?;
        }
        let idx = self.next_indices();
        let x = self.images.select(&idx);
        let c0: Vec<usize> = idx.iter().map(|&i| self.c0[i]).collect();
        let k = self.sample_bins(idx.len());
        let losses = self.generator_step(&x, &c0, &k, true)?;
        self.bundle.manifest.training_step += 1;
        Ok(losses)
    }

    /// Re-estimates normalization running statistics as plain averages of
    /// batch statistics under the training-time input distribution.
    pub fn recalibrate(&mut self, batches: usize) -> Result<()> {
        if batches == 0 {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xca1b);
        let n = self.images.batch();
        let bs = self.cfg.batch_size.min(n);
        let bins = self.bundle.spec.bins();
        let mut enc_acc: Vec<Vec<BufferUpdate<f32>>> = Vec::new();
        let mut gen_acc: Vec<Vec<BufferUpdate<f32>>> = Vec::new();
        for _ in 0..batches {
            let idx: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..n)).collect();
            let x = self.images.select(&idx);
            let c0: Vec<usize> = idx.iter().map(|&i| self.c0[i]).collect();
            let k: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..bins)).collect();
            let mut g = Graph::new();
            let b = &self.bundle;
            let mut be = Bound::new(&b.encoder.store, &mut g, Mode::CALIBRATE);
            let mut bg = Bound::new(&b.generator.store, &mut g, Mode::CALIBRATE);
            let xv = g.constant(x);
            let z = b.encoder.forward(&mut g, &mut be, xv)?;
            let zz = g.concat(&[z, z])?;
            let ks: Vec<usize> = k.iter().chain(&c0).copied().collect();
            b.generator.forward(&mut g, &mut bg, zz, &ks)?;
            enc_acc.push(be.updates);
            gen_acc.push(bg.updates);
        }
        apply_updates(&mut self.bundle.encoder.store, average_updates(enc_acc));
        apply_updates(&mut self.bundle.generator.store, average_updates(gen_acc));
        Ok(())
    }
}

/// Turns per-batch EMA updates into one overwrite with their mean.
fn average_updates<T: Element>(runs: Vec<Vec<BufferUpdate<T>>>) -> Vec<BufferUpdate<T>> {
    let count = T::from_f64(runs.len() as f64);
    let mut iter = runs.into_iter();
    let Some(first) = iter.next() else { return Vec::new() };
    let mut acc: Vec<(crate::param::BufferId, Vec<T>)> = first
        .into_iter()
        .filter_map(|u| match u {
            BufferUpdate::Ema { id, value, .. } => Some((id, value)),
            BufferUpdate::Set { .. } => None,
        })
        .collect();
    for run in iter {
        let vals = run.into_iter().filter_map(|u| match u {
            BufferUpdate::Ema { value, .. } => Some(value),
            BufferUpdate::Set { .. } => None,
        });
        for ((_, a), v) in acc.iter_mut().zip(vals) {
            for (x, y) in a.iter_mut().zip(v) {
                *x += y;
            }
        }
    }
    acc.into_iter()
        .map(|(id, v)| BufferUpdate::Set {
            id,
            value: v.into_iter().map(|x| x / count).collect(),
        })
        .collect()
}

/// Trains an explainer for `bb` on the training split of `ds`.
pub fn train_explainer(
    ds: &LabeledImageDataset,
    bb: &dyn BlackBox<f32>,
    cfg: &TrainConfig,
    out: &TrainOutputs,
) -> Result<ExplainerBundle> {
    let train = ds.indices(crate::synthdata::Split::Train);
    let idx = if train.is_empty() { (0..ds.len()).collect() } else { train };
    if idx.is_empty() {
        return Err(Error::Training("dataset is empty".into()));
    }
    train_on_images(&ds.images.select(&idx), bb, cfg, out)
}

/// [`train_explainer`] on a plain image tensor.
pub fn train_on_images(
    images: &Tensor<f32>,
    bb: &dyn BlackBox<f32>,
    cfg: &TrainConfig,
    out: &TrainOutputs,
) -> Result<ExplainerBundle> {
    let frozen = BlackBoxFingerprint::of(bb, images)?;
    let mut tr = ExplainerTrainer::new(images, bb, cfg)?;
    let mut metrics = match &out.metrics {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
            let mut w = std::io::BufWriter::new(fs::File::create(p)?);
            writeln!(w, "step,loss_name,value")?;
            Some(w)
        }
        None => None,
    };
    let mut last_good = String::from("none (initial weights)");
    for step in 1..=cfg.steps {
        let l = tr.step()?;
        if let Some(w) = metrics.as_mut() {
            for (name, v) in l.named() {
                writeln!(w, "{step},{name},{v}")?;
            }
        }
        if let Some((name, v)) = l
            .named()
            .into_iter()
            .find(|(_, v)| !v.is_finite() || v.abs() > cfg.divergence_threshold)
        {
            if let Some(w) = metrics.as_mut() {
                w.flush()?;
            }
            return Err(Error::Diverged {
                step,
                loss: name.into(),
                value: v,
                checkpoint: last_good,
            });
        }
        if step % 100 == 0 {
            log::info!(
                "step {step}: d {:.3} adv {:.3} kl {:.4} rec {:.4} cyc {:.4}",
                l.d_loss,
                l.terms.cgan,
                l.terms.kl,
                l.terms.rec,
                l.terms.cyc
            );
        }
        if let Some(dir) = &out.checkpoints {
            if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
                let path = dir.join(format!("step-{step:06}"));
                save_checkpoint(&tr.bundle, &path)?;
                last_good = path.display().to_string();
            }
        }
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    if cfg.steps > 0 {
        tr.recalibrate(cfg.calibration_batches)?;
    }
    if BlackBoxFingerprint::of(bb, images)? != frozen {
        return Err(Error::Contract("classifier outputs changed during training".into()));
    }
    Ok(tr.bundle)
}

/// Writes a checkpoint into a scratch directory and renames it into place.
fn save_checkpoint(bundle: &ExplainerBundle, path: &Path) -> Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    save_bundle(bundle, &tmp)?;
    if path.exists() {
        fs::remove_dir_all(path)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Classifier outputs on a few probe images, to detect parameter drift.
#[derive(PartialEq)]
struct BlackBoxFingerprint(Vec<u32>);

impl BlackBoxFingerprint {
    fn of(bb: &dyn BlackBox<f32>, images: &Tensor<f32>) -> Result<Self> {
        let n = images.batch().min(8);
        let idx: Vec<usize> = (0..n).collect();
        let p = bb.predict_posterior(&images.select(&idx))?;
        Ok(Self(p.iter().map(|v| v.to_bits()).collect()))
    }
}
