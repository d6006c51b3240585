//! Quantitative evaluation of explainers.

use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blackbox::{predict_batched, BlackBox, OracleClassifier};
use crate::conditioning::BinIndex;
use crate::error::{Error, Result};
use crate::explain::{sweep_many, Explainer, SaliencyMap, CHUNK};
use crate::graph::Graph;
use crate::stats::{mean, paired_t_test, pearson, spearman, std_dev, welch_t_test, TTest};
use crate::tensor::Tensor;
use crate::trainer::ExplainerBundle;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Posterior group boundaries for FID.
pub const ABSENT_BELOW: f64 = 0.1;
pub const PRESENT_FROM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Compatibility,
    SelfConsistency,
    Fid,
    Closeness,
    Identity,
    PixelFlip,
    Confounding,
    FlipMatrix,
    Measurement,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::Compatibility,
        Metric::SelfConsistency,
        Metric::Fid,
        Metric::Closeness,
        Metric::Identity,
        Metric::PixelFlip,
        Metric::Confounding,
        Metric::FlipMatrix,
        Metric::Measurement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Compatibility => "compatibility",
            Metric::SelfConsistency => "self_consistency",
            Metric::Fid => "fid",
            Metric::Closeness => "closeness",
            Metric::Identity => "identity",
            Metric::PixelFlip => "pixel_flip",
            Metric::Confounding => "confounding",
            Metric::FlipMatrix => "flip_matrix",
            Metric::Measurement => "measurement",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown metric `{s}`; valid metrics: {}", valid.join(", ")))
        })
    }
}

// ---------------------------------------------------------------- compatibility

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bin: usize,
    pub condition_posterior: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityCurve {
    pub bins: Vec<BinStats>,
    /// `None` when either side is constant.
    pub spearman: Option<f64>,
    pub mean_abs_deviation: f64,
    pub queries: usize,
}

impl CompatibilityCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,condition_posterior,mean,std,count\n");
        for b in &self.bins {
            s.push_str(&format!("{},{},{},{},{}\n", b.bin, b.condition_posterior, b.mean, b.std, b.count));
        }
        s
    }
}

/// Sweeps every query and compares actual to requested posteriors.
pub fn compatibility_curve(e: &dyn Explainer, bb: &dyn BlackBox<f32>, images: &Tensor<f32>) -> Result<CompatibilityCurve> {
    if images.batch() == 0 {
        return Err(Error::Validation("compatibility curve needs at least one query".into()));
    }
    let bins = e.spec().bins();
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); bins];
    let (mut cond, mut actual) = (Vec::new(), Vec::new());
    for series in sweep_many(e, bb, images)? {
        for entry in series.entries {
            per_bin[entry.bin.0].push(entry.actual_posterior);
            cond.push(entry.condition_posterior);
            actual.push(entry.actual_posterior);
        }
    }
    let bins = per_bin
        .iter()
        .enumerate()
        .map(|(k, v)| {
            Ok(BinStats {
                bin: k,
                condition_posterior: e.spec().bin_target_posterior(BinIndex(k))?,
                mean: mean(v),
                std: std_dev(v),
                count: v.len(),
            })
        })
        .collect::<Result<_>>()?;
    let mad = cond.iter().zip(&actual).map(|(c, a)| (a - c).abs()).sum::<f64>() / cond.len() as f64;
    Ok(CompatibilityCurve {
        bins,
        spearman: spearman(&cond, &actual),
        mean_abs_deviation: mad,
        queries: images.batch(),
    })
}

// ---------------------------------------------------------------- self-consistency

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistency {
    /// Mean `L1(x, I_f(x, 0))`.
    pub reconstruction: f64,
    /// Mean over bins `k` of `L1(x, G(E(G(E(x), k)), c_f(x, 0)))`.
    pub cycle: f64,
    pub queries: usize,
}

fn mean_l1(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.numel() as f64
}

pub fn self_consistency(e: &dyn Explainer, bb: &dyn BlackBox<f32>, images: &Tensor<f32>) -> Result<SelfConsistency> {
    if images.batch() == 0 {
        return Err(Error::Validation("self-consistency needs at least one query".into()));
    }
    let fx = predict_batched(bb, images, CHUNK)?;
    let c0: Vec<BinIndex> = fx.iter().map(|&p| e.spec().shift_condition(p as f64, 0.0)).collect();
    let rec = e.generate(images, &c0)?;
    let bins = e.spec().bins();
    let all = e.generate_all_bins(images)?;
    let back: Vec<BinIndex> = c0.iter().flat_map(|&k| std::iter::repeat(k).take(bins)).collect();
    let cyc = e.generate(&all, &back)?;
    let idx: Vec<usize> = (0..images.batch()).flat_map(|i| std::iter::repeat(i).take(bins)).collect();
    Ok(SelfConsistency {
        reconstruction: mean_l1(&rec, images),
        cycle: mean_l1(&cyc, &images.select(&idx)),
        queries: images.batch(),
    })
}

// ---------------------------------------------------------------- FID

const FID_REGULARIZATION: f64 = 1e-6;

fn moments(x: &[Vec<f64>], what: &str) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if x.len() < 2 {
        return Err(Error::Validation(format!("fid: {what} set needs at least 2 samples, got {}", x.len())));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|v| v.len() != d) {
        return Err(Error::Shape(format!("fid: inconsistent feature dimension in the {what} set")));
    }
    let n = x.len() as f64;
    let mut mu = vec![0.0; d];
    for v in x {
        for (m, a) in mu.iter_mut().zip(v) {
            *m += a;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut cov = DMatrix::zeros(d, d);
    for v in x {
        let c: Vec<f64> = v.iter().zip(&mu).map(|(a, m)| a - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += FID_REGULARIZATION;
    }
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = moments(real, "real")?;
    let (m2, s2) = moments(fake, "fake")?;
    if m1.len() != m2.len() {
        return Err(Error::Shape(format!("fid: feature dimensions {} and {}", m1.len(), m2.len())));
    }
    let diff: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b) * (a - b)).sum();
    // Tr (S1 S2)^1/2 = Tr (S1^1/2 S2 S1^1/2)^1/2, the latter symmetric
    let r = psd_sqrt(&s1);
    let mut inner = &r * &s2 * &r;
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((diff + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Maps images to fixed-length feature vectors.
pub trait FeatureEmbedder: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, x: &Tensor<f32>) -> Result<Vec<Vec<f64>>>;
}

/// Two strided convolutions with frozen random weights, globally pooled.
#[derive(Clone, Debug)]
pub struct RandomConvEmbedder {
    shape: [usize; 3],
    seed: u64,
    layers: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl RandomConvEmbedder {
    pub const CHANNELS: [usize; 2] = [32, 64];

    pub fn new(shape: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = shape[0];
        let mut layers = Vec::new();
        for &cout in &Self::CHANNELS {
            let fan_in = (cin * 9) as f64;
            let w: Vec<f32> = (0..cout * cin * 9)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * (2.0 / fan_in).sqrt()) as f32
                })
                .collect();
            let b: Vec<f32> = (0..cout).map(|_| rng.gen_range(-0.1..0.1)).collect();
            layers.push((
                Tensor::from_vec(&[cout, cin, 3, 3], w).expect("sized"),
                Tensor::from_vec(&[cout], b).expect("sized"),
            ));
            cin = cout;
        }
        Self { shape, seed, layers }
    }
}

impl FeatureEmbedder for RandomConvEmbedder {
    fn name(&self) -> String {
        format!("random-conv(seed={})", self.seed)
    }

    fn dim(&self) -> usize {
        Self::CHANNELS[1]
    }

    fn embed(&self, x: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        if x.shape().len() != 4 || x.shape()[1..] != self.shape {
            return Err(Error::Contract(format!("embedder expects [N, {:?}], got {:?}", self.shape, x.shape())));
        }
        let mut out = Vec::with_capacity(x.batch());
        for start in (0..x.batch()).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(x.batch())).collect();
            let mut g = Graph::new();
            let mut h = g.constant(x.select(&idx));
            for (w, b) in &self.layers {
                let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
                h = g.conv2d(h, w, Some(b), 2, 1)?;
                h = g.relu(h);
            }
            out.extend(pooled(g.value(h)));
        }
        Ok(out)
    }
}

/// Spatial mean per channel.
fn pooled(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let hw = t.item_len() / c;
    (0..n)
        .map(|i| {
            (0..c)
                .map(|ch| t.data()[(i * c + ch) * hw..][..hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64)
                .collect()
        })
        .collect()
}

/// The bundle's encoder, spatially pooled.
pub struct EncoderEmbedder<'a>(pub &'a ExplainerBundle);

impl FeatureEmbedder for EncoderEmbedder<'_> {
    fn name(&self) -> String {
        "bundle-encoder".into()
    }

    fn dim(&self) -> usize {
        self.0.manifest.net.latent_shape()[0]
    }

    fn embed(&self, x: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        Ok(pooled(&self.0.embed(x)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    /// Real and generated images with posterior in `[0.9, 1]`.
    pub present: Option<f64>,
    /// Posterior in `[0, 0.1)`.
    pub absent: Option<f64>,
    pub overall: f64,
    pub embedder: String,
    pub note: String,
}

fn select_features(f: &[Vec<f64>], post: &[f64], keep: impl Fn(f64) -> bool) -> Vec<Vec<f64>> {
    f.iter().zip(post).filter(|(_, &p)| keep(p)).map(|(v, _)| v.clone()).collect()
}

/// FID per posterior group; a group with fewer than two members on either side is `None`.
pub fn fid_report(
    embedder: &dyn FeatureEmbedder,
    real: &Tensor<f32>,
    real_posteriors: &[f64],
    fake: &Tensor<f32>,
    fake_posteriors: &[f64],
) -> Result<FidReport> {
    if real.batch() != real_posteriors.len() || fake.batch() != fake_posteriors.len() {
        return Err(Error::Shape("fid: one posterior per image required".into()));
    }
    let (fr, ff) = (embedder.embed(real)?, embedder.embed(fake)?);
    let group = |keep: &dyn Fn(f64) -> bool| {
        let (a, b) = (select_features(&fr, real_posteriors, keep), select_features(&ff, fake_posteriors, keep));
        (a.len() >= 2 && b.len() >= 2).then(|| fid(&a, &b)).transpose()
    };
    Ok(FidReport {
        present: group(&|p| p >= PRESENT_FROM)?,
        absent: group(&|p| p < ABSENT_BELOW)?,
        overall: fid(&fr, &ff)?,
        embedder: embedder.name(),
        note: "features from a fixed toolkit embedder; values are comparable only within this toolkit".into(),
    })
}

// ---------------------------------------------------------------- closeness

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn flat_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.batch())
        .map(|i| t.data()[i * t.item_len()..][..t.item_len()].iter().map(|&v| v as f64).collect())
        .collect()
}

/// Core of [`latent_space_closeness`]. `explanations[d][i]` embeds the
/// explanation of query `i` at the `d`-th shift.
///
/// A pair passes when its own distance is strictly below the distance from the
/// explanation to every other query's explanation at the same shift.
pub fn closeness_fraction(queries: &[Vec<f64>], explanations: &[Vec<Vec<f64>>]) -> Result<f64> {
    let n = queries.len();
    if n < 2 {
        return Err(Error::Validation("latent closeness needs at least 2 queries".into()));
    }
    if explanations.is_empty() || explanations.iter().any(|e| e.len() != n) {
        return Err(Error::Shape("latent closeness: one explanation per query and shift".into()));
    }
    let mut pass = 0usize;
    for ex in explanations {
        // pairwise distances between explanations at this shift
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = l2(&ex[i], &ex[j]);
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        for i in 0..n {
            let own = l2(&queries[i], &ex[i]);
            let nearest = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).fold(f64::INFINITY, f64::min);
            pass += usize::from(own < nearest);
        }
    }
    Ok(pass as f64 / (n * explanations.len()) as f64)
}

/// Embeds queries and their explanations at each shift and applies
/// [`closeness_fraction`].
pub fn latent_space_closeness(
    e: &dyn Explainer,
    bb: &dyn BlackBox<f32>,
    images: &Tensor<f32>,
    deltas: &[f64],
) -> Result<f64> {
    if images.batch() < 2 {
        return Err(Error::Validation("latent closeness needs at least 2 queries".into()));
    }
    let q = flat_rows(&e.embed(images)?);
    let fx = predict_batched(bb, images, CHUNK)?;
    let mut ex = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let ks: Vec<BinIndex> = fx.iter().map(|&p| e.spec().shift_condition(p as f64, d)).collect();
        let gen = e.generate(images, &ks)?;
        ex.push(flat_rows(&e.embed(&gen)?));
    }
    closeness_fraction(&q, &ex)
}

// ---------------------------------------------------------------- identity

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine distance of {} and {} dims", a.len(), b.len())));
    }
    let (na, nb) = (a.iter().map(|v| v * v).sum::<f64>().sqrt(), b.iter().map(|v| v * v).sum::<f64>().sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Validation("cosine distance of a zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub mean_distance: f64,
    pub accuracy: f64,
    pub threshold: f64,
    pub pairs: usize,
    pub embedder: String,
}

pub const DEFAULT_VERIFICATION_THRESHOLD: f64 = 0.5;

/// Cosine-distance verification of `(real[i], fake[i])` pairs.
pub fn identity_verification(
    embedder: &dyn FeatureEmbedder,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    threshold: f64,
) -> Result<IdentityReport> {
    if real.batch() != fake.batch() || real.batch() == 0 {
        return Err(Error::Shape(format!("identity: {} real vs {} generated images", real.batch(), fake.batch())));
    }
    let (a, b) = (embedder.embed(real)?, embedder.embed(fake)?);
    let d = a.iter().zip(&b).map(|(x, y)| cosine_distance(x, y)).collect::<Result<Vec<_>>>()?;
    Ok(IdentityReport {
        mean_distance: mean(&d),
        accuracy: d.iter().filter(|&&v| v < threshold).count() as f64 / d.len() as f64,
        threshold,
        pairs: d.len(),
        embedder: embedder.name(),
    })
}

// ---------------------------------------------------------------- pixel flipping

pub fn default_flip_fractions() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.05).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelFlipCurve {
    pub fractions: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub random_accuracy: Vec<f64>,
    pub seed: u64,
}

impl PixelFlipCurve {
    /// Trapezoid area divided by the fraction span, i.e. the mean accuracy.
    pub fn auc(&self) -> f64 {
        normalized_area(&self.fractions, &self.accuracy)
    }

    pub fn random_auc(&self) -> f64 {
        normalized_area(&self.fractions, &self.random_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,accuracy,random_accuracy\n");
        for i in 0..self.fractions.len() {
            s.push_str(&format!("{},{},{}\n", self.fractions[i], self.accuracy[i], self.random_accuracy[i]));
        }
        s
    }
}

fn normalized_area(x: &[f64], y: &[f64]) -> f64 {
    if x.len() < 2 {
        return y.first().copied().unwrap_or(0.0);
    }
    let area: f64 = x.windows(2).zip(y.windows(2)).map(|(a, b)| (a[1] - a[0]) * (b[0] + b[1]) / 2.0).sum();
    area / (x[x.len() - 1] - x[0])
}

fn flip_accuracy(
    bb: &dyn BlackBox<f32>,
    images: &Tensor<f32>,
    labels: &[u8],
    rankings: &[Vec<usize>],
    noise: &[Vec<f32>],
    fraction: f64,
) -> Result<f64> {
    let c = images.shape()[1];
    let hw = images.item_len() / c;
    let count = ((fraction * hw as f64).round() as usize).min(hw);
    let mut x = images.clone();
    let item = images.item_len();
    for (i, img) in x.data_mut().chunks_exact_mut(item).enumerate() {
        for &p in &rankings[i][..count] {
            for ch in 0..c {
                img[ch * hw + p] = noise[i][ch * hw + p];
            }
        }
    }
    let post = predict_batched(bb, &x, CHUNK)?;
    Ok(crate::blackbox::accuracy(&post, labels, 0.5))
}

/// Accuracy as the most salient pixels are replaced with uniform noise,
/// alongside a random-ranking baseline sharing the same noise.
pub fn pixel_flip_curve(
    maps: &[SaliencyMap],
    images: &Tensor<f32>,
    labels: &[u8],
    bb: &dyn BlackBox<f32>,
    fractions: &[f64],
    seed: u64,
) -> Result<PixelFlipCurve> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::Validation(format!("pixel-flip fraction {f} outside [0, 1]")));
    }
    let n = images.batch();
    if maps.len() != n || labels.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} maps and {} labels for {n} images", maps.len(), labels.len())));
    }
    bb.check_input(images)?;
    let hw = images.shape()[2] * images.shape()[3];
    if maps.iter().any(|m| m.values.len() != hw) {
        return Err(Error::Shape("saliency map size differs from the images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Vec<f32>> = (0..n).map(|_| (0..images.item_len()).map(|_| rng.gen::<f32>()).collect()).collect();
    let model: Vec<Vec<usize>> = maps.iter().map(|m| m.ranking()).collect();
    let random: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let mut p: Vec<usize> = (0..hw).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let mut curve = PixelFlipCurve {
        fractions: fractions.to_vec(),
        accuracy: Vec::new(),
        random_accuracy: Vec::new(),
        seed,
    };
    for &f in fractions {
        curve.accuracy.push(flip_accuracy(bb, images, labels, &model, &noise, f)?);
        curve.random_accuracy.push(flip_accuracy(bb, images, labels, &random, &noise, f)?);
    }
    Ok(curve)
}

// ---------------------------------------------------------------- confounding

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extreme {
    /// Last bin, posterior near 1.
    Positive,
    /// First bin, posterior near 0.
    Negative,
}

impl Extreme {
    pub fn bin(self, e: &dyn Explainer) -> BinIndex {
        match self {
            Extreme::Positive => e.spec().last(),
            Extreme::Negative => BinIndex(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfoundingReport {
    pub target: Extreme,
    pub fraction: f64,
    pub queries: usize,
    /// Oracle predictions over the generations: `[attribute = 0, attribute = 1]`.
    pub oracle_counts: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfoundingSummary {
    pub positive: ConfoundingReport,
    pub negative: ConfoundingReport,
    /// Mean of the two fractions.
    pub overall: f64,
}

/// Fraction of counterfactuals at `target` whose oracle-predicted attribute
/// differs from the query's true attribute.
pub fn confounding_metric(
    e: &dyn Explainer,
    oracle: &OracleClassifier,
    floor: f64,
    images: &Tensor<f32>,
    attribute: &[u8],
    target: Extreme,
) -> Result<ConfoundingReport> {
    if oracle.accuracy < floor {
        return Err(Error::OracleBelowFloor {
            accuracy: oracle.accuracy,
            floor,
        });
    }
    if attribute.len() != images.batch() || attribute.is_empty() {
        return Err(Error::Shape(format!("{} attribute labels for {} images", attribute.len(), images.batch())));
    }
    let ks = vec![target.bin(e); images.batch()];
    let gen = e.generate(images, &ks)?;
    let pred = oracle.predict(&gen)?;
    let flips = pred.iter().zip(attribute).filter(|(p, a)| p != a).count();
    let ones = pred.iter().filter(|&&p| p == 1).count();
    Ok(ConfoundingReport {
        target,
        fraction: flips as f64 / pred.len() as f64,
        queries: pred.len(),
        oracle_counts: [pred.len() - ones, ones],
    })
}

pub fn confounding_summary(
    e: &dyn Explainer,
    oracle: &OracleClassifier,
    floor: f64,
    images: &Tensor<f32>,
    attribute: &[u8],
) -> Result<ConfoundingSummary> {
    let positive = confounding_metric(e, oracle, floor, images, attribute, Extreme::Positive)?;
    let negative = confounding_metric(e, oracle, floor, images, attribute, Extreme::Negative)?;
    let overall = (positive.fraction + negative.fraction) / 2.0;
    Ok(ConfoundingSummary {
        positive,
        negative,
        overall,
    })
}

// ---------------------------------------------------------------- flip matrix

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipMatrix {
    pub targets: Vec<String>,
    pub attributes: Vec<String>,
    /// `values[row][col]`.
    pub values: Vec<Vec<f64>>,
}

/// Counterfactuals at the extreme opposite each query's prediction.
fn opposite_extremes(e: &dyn Explainer, bb: &dyn BlackBox<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let fx = predict_batched(bb, images, CHUNK)?;
    let ks: Vec<BinIndex> = fx
        .iter()
        .map(|&p| if p >= 0.5 { BinIndex(0) } else { e.spec().last() })
        .collect();
    e.generate(images, &ks)
}

/// Rows are explained targets, columns attributes; each cell is the fraction
/// of counterfactuals whose oracle prediction differs from the query's.
pub fn class_flip_matrix(
    explainers: &[(&str, &dyn Explainer, &dyn BlackBox<f32>)],
    oracles: &[(&str, &OracleClassifier)],
    attributes: &[&str],
    images: &Tensor<f32>,
) -> Result<FlipMatrix> {
    if images.batch() == 0 {
        return Err(Error::Validation("flip matrix needs at least one query".into()));
    }
    let cols = attributes
        .iter()
        .map(|a| {
            oracles
                .iter()
                .find(|(name, _)| name == a)
                .map(|(_, o)| *o)
                .ok_or_else(|| Error::Config(format!("no oracle for attribute `{a}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let before = cols.iter().map(|o| o.predict(images)).collect::<Result<Vec<_>>>()?;
    let mut values = Vec::new();
    for (_, e, bb) in explainers {
        let gen = opposite_extremes(*e, *bb, images)?;
        let mut row = Vec::new();
        for (o, b) in cols.iter().zip(&before) {
            let after = o.predict(&gen)?;
            row.push(after.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / b.len() as f64);
        }
        values.push(row);
    }
    Ok(FlipMatrix {
        targets: explainers.iter().map(|(n, _, _)| n.to_string()).collect(),
        attributes: attributes.iter().map(|s| s.to_string()).collect(),
        values,
    })
}

// ---------------------------------------------------------------- measurement

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

fn group(name: &str, v: &[f64]) -> GroupStats {
    GroupStats {
        name: name.into(),
        n: v.len(),
        mean: if v.is_empty() { f64::NAN } else { mean(v) },
        std: std_dev(v),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementReport {
    /// `None` when the measurements (or conditions) are constant.
    pub pearson: Option<f64>,
    pub undefined: bool,
    pub points: usize,
    pub groups: Vec<GroupStats>,
    /// Real negatives against their positive counterfactuals.
    pub paired_negative: Option<TTest>,
    /// Real positives against their negative counterfactuals.
    pub paired_positive: Option<TTest>,
    /// Real positives against generated positives.
    pub welch_positive: Option<TTest>,
    /// Real negatives against generated negatives.
    pub welch_negative: Option<TTest>,
}

/// Correlates a measurement of every swept image with its condition
/// posterior and compares real and counterfactual groups.
pub fn measurement_correlation(
    e: &dyn Explainer,
    bb: &dyn BlackBox<f32>,
    measure: &dyn Fn(&[f32]) -> f64,
    images: &Tensor<f32>,
) -> Result<MeasurementReport> {
    if images.batch() == 0 {
        return Err(Error::Validation("measurement correlation needs at least one query".into()));
    }
    let item = images.item_len();
    let series = sweep_many(e, bb, images)?;
    let (mut cond, mut meas) = (Vec::new(), Vec::new());
    let (mut real_neg, mut cf_pos, mut real_pos, mut cf_neg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let last = e.spec().bins() - 1;
    for s in &series {
        for (k, entry) in s.entries.iter().enumerate() {
            cond.push(entry.condition_posterior);
            meas.push(measure(&s.images.data()[k * item..][..item]));
        }
        let base = meas.len() - s.entries.len();
        let own = measure(s.query.data());
        if s.query_posterior < 0.5 {
            real_neg.push(own);
            cf_pos.push(meas[base + last]);
        } else {
            real_pos.push(own);
            cf_neg.push(meas[base]);
        }
    }
    let r = pearson(&cond, &meas);
    Ok(MeasurementReport {
        pearson: r,
        undefined: r.is_none(),
        points: meas.len(),
        groups: vec![
            group("real_negative", &real_neg),
            group("real_positive", &real_pos),
            group("generated_positive", &cf_pos),
            group("generated_negative", &cf_neg),
        ],
        paired_negative: paired_t_test(&real_neg, &cf_pos).ok(),
        paired_positive: paired_t_test(&real_pos, &cf_neg).ok(),
        welch_positive: welch_t_test(&real_pos, &cf_pos).ok(),
        welch_negative: welch_t_test(&real_neg, &cf_neg).ok(),
    })
}

// ---------------------------------------------------------------- report

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compatibility: Option<CompatibilityCurve>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub self_consistency: Option<SelfConsistency>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<FidReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_closeness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identity: Option<IdentityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_flip: Option<PixelFlipCurve>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confounding: Option<ConfoundingSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flip_matrix: Option<FlipMatrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measurement: Option<MeasurementReport>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::{ConstantBlackBox, ConvClassifier};
    use crate::conditioning::ConditionSpec;
    use crate::explain::{saliency_many, ConstantExplainer, IdentityExplainer, MeanPixelBlackBox, PosteriorFillExplainer};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_images(n: usize, shape: [usize; 3], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * shape.iter().product::<usize>();
        Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], (0..len).map(|_| rng.gen()).collect()).unwrap()
    }

    fn spec() -> ConditionSpec {
        ConditionSpec::new(0.1).unwrap()
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        let err = "bogus".parse::<Metric>().unwrap_err().to_string();
        assert!(err.contains("compatibility") && err.contains("measurement"));
    }

    #[test]
    fn compatibility_of_stubs() {
        let shape = [1, 4, 4];
        let x = rand_images(6, shape, 1);
        let perfect = compatibility_curve(&PosteriorFillExplainer { shape, spec: spec() }, &MeanPixelBlackBox { shape }, &x).unwrap();
        assert!((perfect.spearman.unwrap() - 1.0).abs() < 1e-12);
        assert!(perfect.mean_abs_deviation < 1e-6);
        assert_eq!(perfect.bins.len(), 10);
        assert!(perfect.bins.iter().all(|b| b.count == 6 && b.std < 1e-6));
        let ident = compatibility_curve(&IdentityExplainer { shape, spec: spec() }, &MeanPixelBlackBox { shape }, &x).unwrap();
        // per query the actual posterior is constant, so ranks only reflect query order
        assert!(ident.spearman.unwrap().abs() < 1e-12);
        assert!(compatibility_curve(&IdentityExplainer { shape, spec: spec() }, &MeanPixelBlackBox { shape }, &Tensor::zeros(&[0, 1, 4, 4])).is_err());
    }

    #[test]
    fn identity_stub_is_perfectly_self_consistent() {
        let shape = [1, 4, 4];
        let x = rand_images(5, shape, 6);
        let r = self_consistency(&IdentityExplainer { shape, spec: spec() }, &MeanPixelBlackBox { shape }, &x).unwrap();
        assert_eq!((r.reconstruction, r.cycle), (0.0, 0.0));
        let c = ConstantExplainer { shape, spec: spec(), value: 0.0 };
        let r = self_consistency(&c, &MeanPixelBlackBox { shape }, &x).unwrap();
        let m = x.data().iter().map(|&v| v as f64).sum::<f64>() / x.numel() as f64;
        assert!((r.reconstruction - m).abs() < 1e-6 && (r.cycle - m).abs() < 1e-6);
    }

    #[test]
    fn fid_closed_forms() {
        let a: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        assert!(fid(&a, &a).unwrap().abs() < 1e-4);
        let zeros = vec![vec![0.0]; 10];
        let ones = vec![vec![1.0]; 10];
        assert!((fid(&zeros, &ones).unwrap() - 1.0).abs() < 1e-9);
        assert!(fid(&zeros[..1], &ones).is_err());
        assert!(fid(&a, &ones).is_err());
    }

    #[test]
    fn fid_of_one_dimensional_gaussians() {
        // (mu1 - mu2)^2 + (s1 - s2)^2 for 1-D Gaussians: N(0, 1) vs N(2, 0.25) -> 4.25
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<Vec<f64>> = (0..20000).map(|_| vec![StandardNormal.sample(&mut rng)]).collect();
        let b: Vec<Vec<f64>> = (0..20000).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            vec![2.0 + 0.5 * z]
        }).collect();
        let v = fid(&a, &b).unwrap();
        assert!((v - 4.25).abs() < 0.1, "{v}");
    }

    #[test]
    fn fid_matches_reference_in_two_dimensions() {
        // scipy.linalg.sqrtm reference on the same fixed points
        let a = vec![vec![0.0, 1.0], vec![2.0, 0.5], vec![1.0, 3.0], vec![4.0, 2.0], vec![3.0, 3.5]];
        let b = vec![vec![1.0, 0.0], vec![0.5, 2.0], vec![2.5, 1.5], vec![3.0, 0.5]];
        assert!((fid(&a, &b).unwrap() - FID_2D).abs() < 1e-6);
    }

    const FID_2D: f64 = 1.560_197_208_959_615_4;

    #[test]
    fn closeness_controls() {
        let shape = [1, 3, 3];
        let x = rand_images(5, shape, 2);
        let bb = ConstantBlackBox { shape, p: 0.5 };
        let id = IdentityExplainer { shape, spec: spec() };
        assert_eq!(latent_space_closeness(&id, &bb, &x, &[-0.3, 0.0, 0.3]).unwrap(), 1.0);
        let c = ConstantExplainer { shape, spec: spec(), value: 0.5 };
        assert_eq!(latent_space_closeness(&c, &bb, &x, &[0.3]).unwrap(), 0.0);
        assert!(latent_space_closeness(&id, &bb, &x.select(&[0]), &[0.0]).is_err());
    }

    fn brute_force(q: &[Vec<f64>], ex: &[Vec<Vec<f64>>]) -> f64 {
        let n = q.len();
        let mut pass = 0;
        for e in ex {
            for i in 0..n {
                let own = l2(&q[i], &e[i]);
                let mut ok = true;
                for j in 0..n {
                    if j != i && own >= l2(&e[i], &e[j]) {
                        ok = false;
                    }
                }
                pass += ok as usize;
            }
        }
        pass as f64 / (n * ex.len()) as f64
    }

    #[test]
    fn closeness_hand_built() {
        let q = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]];
        // query 0's explanation drifts towards query 1's explanation
        let ex = vec![vec![vec![6.0, 0.0], vec![10.0, 1.0], vec![0.0, 9.0]]];
        assert_eq!(closeness_fraction(&q, &ex).unwrap(), 2.0 / 3.0);
        assert_eq!(brute_force(&q, &ex), 2.0 / 3.0);
    }

    proptest! {
        #[test]
        fn closeness_matches_brute_force(
            n in 2usize..8,
            shifts in 1usize..4,
            vals in proptest::collection::vec(-3i32..4, 8 * 4 * 3 * 2),
        ) {
            // small integer grid so ties occur
            let mut it = vals.into_iter().map(f64::from);
            let q: Vec<Vec<f64>> = (0..n).map(|_| vec![it.next().unwrap(), it.next().unwrap()]).collect();
            let ex: Vec<Vec<Vec<f64>>> = (0..shifts)
                .map(|_| (0..n).map(|_| vec![it.next().unwrap(), it.next().unwrap()]).collect())
                .collect();
            prop_assert_eq!(closeness_fraction(&q, &ex).unwrap(), brute_force(&q, &ex));
        }

        #[test]
        fn fid_is_symmetric_and_self_zero(v in proptest::collection::vec(-5.0f64..5.0, 24..60)) {
            let pts: Vec<Vec<f64>> = v.chunks_exact(3).map(|c| c.to_vec()).collect();
            let (a, b) = pts.split_at(pts.len() / 2);
            prop_assert!(fid(a, a).unwrap().abs() < 1e-4);
            prop_assert!((fid(a, b).unwrap() - fid(b, a).unwrap()).abs() < 1e-6);
            prop_assert!(fid(a, b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn cosine_cases() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 1.0], &[-2.0, -2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn identity_of_identical_images() {
        let shape = [1, 8, 8];
        let x = rand_images(4, shape, 3);
        let emb = RandomConvEmbedder::new(shape, 0);
        let r = identity_verification(&emb, &x, &x, DEFAULT_VERIFICATION_THRESHOLD).unwrap();
        assert!(r.mean_distance.abs() < 1e-9);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(emb.embed(&x).unwrap()[0].len(), emb.dim());
    }

    #[test]
    fn pixel_flip_controls() {
        let shape = [1, 8, 8];
        let x = rand_images(6, shape, 4);
        let labels = vec![1, 0, 1, 1, 0, 0];
        let clf = ConvClassifier::<f32>::new(shape, [4, 4, 4], 1).unwrap();
        let e = IdentityExplainer { shape, spec: spec() };
        let maps = saliency_many(&e, &x).unwrap();
        let fr = default_flip_fractions();
        let curve = pixel_flip_curve(&maps, &x, &labels, &clf, &fr, 7).unwrap();
        let base = crate::blackbox::accuracy(&clf.predict_posterior(&x).unwrap(), &labels, 0.5);
        assert_eq!(curve.accuracy[0], base);
        assert_eq!(curve.random_accuracy[0], base);
        let constant = ConstantBlackBox { shape, p: 0.8 };
        let full = pixel_flip_curve(&maps, &x, &labels, &constant, &[0.0, 1.0], 7).unwrap();
        assert_eq!(full.accuracy, vec![0.5, 0.5]);
        assert!(pixel_flip_curve(&maps, &x, &labels, &clf, &[1.5], 7).is_err());
        assert_eq!(curve, pixel_flip_curve(&maps, &x, &labels, &clf, &fr, 7).unwrap());
    }

    #[test]
    fn normalized_area_is_mean_of_flat_curve() {
        assert!((normalized_area(&[0.0, 0.25, 0.5], &[0.8, 0.8, 0.8]) - 0.8).abs() < 1e-12);
        assert!((normalized_area(&[0.0, 0.5], &[1.0, 0.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn measurement_of_stubs() {
        let shape = [1, 4, 4];
        let x = rand_images(6, shape, 5);
        let mean_pixel = |img: &[f32]| img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
        let e = PosteriorFillExplainer { shape, spec: spec() };
        let r = measurement_correlation(&e, &MeanPixelBlackBox { shape }, &mean_pixel, &x).unwrap();
        assert!((r.pearson.unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(r.points, 60);
        let flat = measurement_correlation(&e, &MeanPixelBlackBox { shape }, &|_: &[f32]| 3.0, &x).unwrap();
        assert!(flat.undefined && flat.pearson.is_none());
    }

    #[test]
    fn report_serializes_with_schema_version() {
        let r = EvalReport::new();
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, format!("{{\"schema_version\":{REPORT_SCHEMA_VERSION}}}"));
        let back: EvalReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
