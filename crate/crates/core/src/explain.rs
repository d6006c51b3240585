//! Counterfactual explanations: single shifts, full sweeps over every bin and
//! saliency maps from the two extremes.

use serde::{Deserialize, Serialize};

use crate::blackbox::{predict_batched, BlackBox};
use crate::conditioning::{BinIndex, ConditionSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::ExplainerBundle;

/// Largest batch pushed through the networks at once.
pub const CHUNK: usize = 64;

/// Anything that maps (query, condition bin) to an image.
///
/// [`ExplainerBundle`] is the real implementation; the stubs below exist for
/// controls in the evaluation suite.
pub trait Explainer: Send + Sync {
    fn image_shape(&self) -> [usize; 3];
    fn spec(&self) -> &ConditionSpec;
    /// Embedding used for latent-space closeness.
    fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
    /// One generation per query, each with its own condition.
    fn generate(&self, x: &Tensor<f32>, ks: &[BinIndex]) -> Result<Tensor<f32>>;

    /// Every bin for every query, query-major: `[n * bins, C, H, W]`.
    fn generate_all_bins(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let bins = self.spec().bins();
        let idx: Vec<usize> = (0..x.batch()).flat_map(|i| std::iter::repeat(i).take(bins)).collect();
        let ks: Vec<BinIndex> = (0..x.batch()).flat_map(|_| self.spec().all_bins()).collect();
        self.generate(&x.select(&idx), &ks)
    }
}

impl Explainer for ExplainerBundle {
    fn image_shape(&self) -> [usize; 3] {
        ExplainerBundle::image_shape(self)
    }

    fn spec(&self) -> &ConditionSpec {
        &self.spec
    }

    fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        chunked(x, |c| self.encoder.encode(c))
    }

    fn generate(&self, x: &Tensor<f32>, ks: &[BinIndex]) -> Result<Tensor<f32>> {
        if ks.len() != x.batch() {
            return Err(Error::Shape(format!("{} conditions for {} queries", ks.len(), x.batch())));
        }
        let mut parts = Vec::new();
        for start in (0..x.batch()).step_by(CHUNK) {
            let end = (start + CHUNK).min(x.batch());
            let idx: Vec<usize> = (start..end).collect();
            parts.push(ExplainerBundle::generate(self, &x.select(&idx), &ks[start..end])?);
        }
        stack_or_empty(parts, x)
    }

    fn generate_all_bins(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let z = self.embed(x)?;
        let bins = self.spec.bins();
        let mut parts = Vec::new();
        // whole queries per chunk so each latent is replicated once
        let per = (CHUNK / bins).max(1);
        for start in (0..z.batch()).step_by(per) {
            let end = (start + per).min(z.batch());
            let idx: Vec<usize> = (start..end).flat_map(|i| std::iter::repeat(i).take(bins)).collect();
            let ks: Vec<BinIndex> = (start..end).flat_map(|_| self.spec.all_bins()).collect();
            parts.push(self.generator.generate(&z.select(&idx), &ks)?);
        }
        stack_or_empty(parts, x)
    }
}

fn chunked(x: &Tensor<f32>, f: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>) -> Result<Tensor<f32>> {
    if x.batch() <= CHUNK {
        return f(x);
    }
    let mut parts = Vec::new();
    for start in (0..x.batch()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(x.batch())).collect();
        parts.push(f(&x.select(&idx))?);
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Tensor::stack(&refs)
}

fn stack_or_empty(parts: Vec<Tensor<f32>>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    if parts.is_empty() {
        return Ok(x.clone());
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Tensor::stack(&refs)
}

/// Returns the query unchanged for every condition.
#[derive(Clone, Debug)]
pub struct IdentityExplainer {
    pub shape: [usize; 3],
    pub spec: ConditionSpec,
}

impl Explainer for IdentityExplainer {
    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }
    fn spec(&self) -> &ConditionSpec {
        &self.spec
    }
    fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_queries(x, self.shape)?;
        Ok(x.clone())
    }
    fn generate(&self, x: &Tensor<f32>, ks: &[BinIndex]) -> Result<Tensor<f32>> {
        check_generate(self, x, ks)?;
        Ok(x.clone())
    }
}

/// Returns the same constant image for everything.
#[derive(Clone, Debug)]
pub struct ConstantExplainer {
    pub shape: [usize; 3],
    pub spec: ConditionSpec,
    pub value: f32,
}

impl Explainer for ConstantExplainer {
    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }
    fn spec(&self) -> &ConditionSpec {
        &self.spec
    }
    fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_queries(x, self.shape)?;
        Ok(x.clone())
    }
    fn generate(&self, x: &Tensor<f32>, ks: &[BinIndex]) -> Result<Tensor<f32>> {
        check_generate(self, x, ks)?;
        Ok(Tensor::full(x.shape(), self.value))
    }
}

/// Fills the image with the bin's target posterior. Paired with
/// [`MeanPixelBlackBox`] every generation lands exactly on its condition.
#[derive(Clone, Debug)]
pub struct PosteriorFillExplainer {
    pub shape: [usize; 3],
    pub spec: ConditionSpec,
}

impl Explainer for PosteriorFillExplainer {
    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }
    fn spec(&self) -> &ConditionSpec {
        &self.spec
    }
    fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_queries(x, self.shape)?;
        Ok(x.clone())
    }
    fn generate(&self, x: &Tensor<f32>, ks: &[BinIndex]) -> Result<Tensor<f32>> {
        check_generate(self, x, ks)?;
        let item = x.item_len();
        let mut data = Vec::with_capacity(x.numel());
        for &k in ks {
            let p = self.spec.bin_target_posterior(k)? as f32;
            data.extend(std::iter::repeat(p).take(item));
        }
        Tensor::from_vec(x.shape(), data)
    }
}

/// Posterior equal to the mean pixel value.
#[derive(Clone, Debug)]
pub struct MeanPixelBlackBox {
    pub shape: [usize; 3],
}

impl BlackBox<f32> for MeanPixelBlackBox {
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn posterior_graph(&self, g: &mut crate::graph::Graph<f32>, x: crate::graph::Var) -> Result<crate::graph::Var> {
        let n = g.value(x).batch();
        let flat = g.reshape(x, &[n, self.shape.iter().product()])?;
        let w = Tensor::full(&[1, self.shape.iter().product()], 1.0 / self.shape.iter().product::<usize>() as f32);
        let w = g.constant(w);
        let y = g.linear(flat, w, None)?;
        g.reshape(y, &[n])
    }
}

fn check_queries(x: &Tensor<f32>, shape: [usize; 3]) -> Result<()> {
    if x.shape().len() != 4 || x.shape()[1..] != shape {
        return Err(Error::Contract(format!(
            "queries of shape {:?} do not match the explainer input {shape:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn check_generate(e: &dyn Explainer, x: &Tensor<f32>, ks: &[BinIndex]) -> Result<()> {
    check_queries(x, e.image_shape())?;
    if ks.len() != x.batch() {
        return Err(Error::Shape(format!("{} conditions for {} queries", ks.len(), x.batch())));
    }
    ks.iter().try_for_each(|&k| e.spec().check(k))
}

fn check_pair(e: &dyn Explainer, bb: &dyn BlackBox<f32>, x: &Tensor<f32>) -> Result<()> {
    if e.image_shape() != bb.input_shape() {
        return Err(Error::Contract(format!(
            "explainer input {:?} differs from black-box input {:?}",
            e.image_shape(),
            bb.input_shape()
        )));
    }
    check_queries(x, e.image_shape())
}

/// Accepts `[C, H, W]` or a single-item batch.
fn as_batch(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    match x.shape().len() {
        3 => x.clone().reshape(&[1, x.shape()[0], x.shape()[1], x.shape()[2]]),
        4 => Ok(x.clone()),
        _ => Err(Error::Contract(format!("expected an image, got shape {:?}", x.shape()))),
    }
}

/// `I_f(x, delta)` for every query in the batch, with `f` of each result.
pub fn explain(
    e: &dyn Explainer,
    bb: &dyn BlackBox<f32>,
    x: &Tensor<f32>,
    delta: f64,
) -> Result<(Tensor<f32>, Vec<f64>)> {
    let x = as_batch(x)?;
    check_pair(e, bb, &x)?;
    if !delta.is_finite() {
        return Err(Error::Validation(format!("delta must be finite, got {delta}")));
    }
    let fx = predict_batched(bb, &x, CHUNK)?;
    let ks: Vec<BinIndex> = fx.iter().map(|&p| e.spec().shift_condition(p as f64, delta)).collect();
    let out = e.generate(&x, &ks)?;
    let post = predict_batched(bb, &out, CHUNK)?;
    Ok((out, post.into_iter().map(f64::from).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesEntry {
    pub bin: BinIndex,
    pub condition_posterior: f64,
    pub actual_posterior: f64,
}

/// Progressive exaggeration of one query over all bins, in bin order.
#[derive(Clone, Debug)]
pub struct ExplanationSeries {
    pub query: Tensor<f32>,
    pub query_posterior: f64,
    /// `[bins, C, H, W]`.
    pub images: Tensor<f32>,
    pub entries: Vec<SeriesEntry>,
}

impl ExplanationSeries {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image(&self, k: usize) -> Tensor<f32> {
        self.images.item(k)
    }

    /// `bin,condition_posterior,actual_posterior` rows with header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,condition_posterior,actual_posterior\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.bin.0, e.condition_posterior, e.actual_posterior));
        }
        s
    }
}

pub fn sweep(e: &dyn Explainer, bb: &dyn BlackBox<f32>, x: &Tensor<f32>) -> Result<ExplanationSeries> {
    let x = as_batch(x)?;
    if x.batch() != 1 {
        return Err(Error::Contract(format!("sweep takes one query, got {}", x.batch())));
    }
    Ok(sweep_many(e, bb, &x)?.pop().expect("one series"))
}

/// [`sweep`] for a batch of queries.
pub fn sweep_many(e: &dyn Explainer, bb: &dyn BlackBox<f32>, x: &Tensor<f32>) -> Result<Vec<ExplanationSeries>> {
    check_pair(e, bb, x)?;
    let bins = e.spec().bins();
    let fx = predict_batched(bb, x, CHUNK)?;
    let all = e.generate_all_bins(x)?;
    let post = predict_batched(bb, &all, CHUNK)?;
    let mut out = Vec::with_capacity(x.batch());
    for i in 0..x.batch() {
        let idx: Vec<usize> = (i * bins..(i + 1) * bins).collect();
        let entries = e
            .spec()
            .all_bins()
            .zip(&post[i * bins..(i + 1) * bins])
            .map(|(k, &p)| {
                Ok(SeriesEntry {
                    bin: k,
                    condition_posterior: e.spec().bin_target_posterior(k)?,
                    actual_posterior: p as f64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ExplanationSeries {
            query: x.item(i),
            query_posterior: fx[i] as f64,
            images: all.select(&idx),
            entries,
        });
    }
    Ok(out)
}

/// Per-pixel relevance in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    /// The raw map was constant, so `values` is all zeros.
    pub degenerate: bool,
}

impl SaliencyMap {
    /// Min-max normalizes a raw `height * width` map.
    pub fn from_raw(height: usize, width: usize, raw: Vec<f32>) -> Result<Self> {
        if raw.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} map", raw.len())));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("saliency contains non-finite values".into()));
        }
        let lo = raw.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if raw.is_empty() || hi <= lo {
            return Ok(Self {
                height,
                width,
                values: vec![0.0; raw.len()],
                degenerate: true,
            });
        }
        let values = raw.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect();
        Ok(Self {
            height,
            width,
            values,
            degenerate: false,
        })
    }

    pub fn renormalized(&self) -> Result<Self> {
        Self::from_raw(self.height, self.width, self.values.clone())
    }

    /// Pixel indices sorted by decreasing relevance, ties by position.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        idx
    }
}

/// `|x_{k=0} - x_{k=N-1}|`, channel-averaged and normalized.
pub fn saliency_from_extremes(e: &dyn Explainer, x: &Tensor<f32>) -> Result<SaliencyMap> {
    let x = as_batch(x)?;
    Ok(saliency_many(e, &x)?.pop().expect("one map"))
}

pub fn saliency_many(e: &dyn Explainer, x: &Tensor<f32>) -> Result<Vec<SaliencyMap>> {
    check_queries(x, e.image_shape())?;
    let [c, h, w] = e.image_shape();
    let n = x.batch();
    let idx: Vec<usize> = (0..n).flat_map(|i| [i, i]).collect();
    let ks: Vec<BinIndex> = (0..n).flat_map(|_| [BinIndex(0), e.spec().last()]).collect();
    let gen = e.generate(&x.select(&idx), &ks)?;
    let d = gen.data();
    let item = c * h * w;
    (0..n)
        .map(|i| {
            let lo = &d[2 * i * item..][..item];
            let hi = &d[(2 * i + 1) * item..][..item];
            let raw = (0..h * w)
                .map(|p| (0..c).map(|ch| (lo[ch * h * w + p] - hi[ch * h * w + p]).abs()).sum::<f32>() / c as f32)
                .collect();
            SaliencyMap::from_raw(h, w, raw)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::ConstantBlackBox;
    use crate::nets::NetConfig;
    use proptest::prelude::*;

    fn conditioned_bundle() -> ExplainerBundle {
        let mut b = tiny_bundle();
        for (i, id) in b.generator.condition_tables().into_iter().enumerate() {
            for (j, v) in b.generator.store.get_mut(id).data_mut().iter_mut().enumerate() {
                *v = ((i * 7 + j * 13) % 11) as f32 / 10.0 - 0.5;
            }
        }
        b
    }

    fn tiny_bundle() -> ExplainerBundle {
        let net = NetConfig {
            image_channels: 1,
            image_size: 8,
            bins: 4,
            base_channels: 4,
            down_steps: 1,
            gen_blocks: 1,
            disc_channels: 4,
            disc_blocks: 1,
            spectral_norm: true,
        };
        ExplainerBundle::new(&net, 0.25, 3).unwrap()
    }

    fn queries(n: usize, seed: u64) -> Tensor<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, 1, 8, 8], (0..n * 64).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn untrained_bundle_gives_valid_images() {
        let b = tiny_bundle();
        let bb = ConstantBlackBox { shape: [1, 8, 8], p: 0.3 };
        let x = queries(3, 0);
        let (img, post) = explain(&b, &bb, &x, 0.4).unwrap();
        assert_eq!(img.shape(), &[3, 1, 8, 8]);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(post, vec![0.30000001192092896; 3]);
        let (again, _) = explain(&b, &bb, &x, 0.4).unwrap();
        assert_eq!(img, again);
    }

    #[test]
    fn explain_uses_the_shifted_bin() {
        let spec = ConditionSpec::new(0.1).unwrap();
        let e = PosteriorFillExplainer { shape: [1, 4, 4], spec };
        let bb = MeanPixelBlackBox { shape: [1, 4, 4] };
        let x = Tensor::full(&[2, 1, 4, 4], 0.42f32);
        let (_, post) = explain(&e, &bb, &x, 0.3).unwrap();
        // f(x) = 0.42 -> 0.72 -> bin 7, centre 0.75
        for p in post {
            assert!((p - 0.75).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let b = tiny_bundle();
        let bb = ConstantBlackBox { shape: [1, 4, 4], p: 0.3 };
        assert!(matches!(explain(&b, &bb, &queries(1, 0), 0.1), Err(Error::Contract(_))));
        let bb = ConstantBlackBox { shape: [1, 8, 8], p: 0.3 };
        let wrong = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(matches!(explain(&b, &bb, &wrong, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn sweep_covers_bins_in_order() {
        let b = conditioned_bundle();
        let bb = ConstantBlackBox { shape: [1, 8, 8], p: 0.6 };
        let x = queries(1, 5);
        let s = sweep(&b, &bb, &x).unwrap();
        assert_eq!(s.len(), 4);
        let bins: Vec<usize> = s.entries.iter().map(|e| e.bin.0).collect();
        assert_eq!(bins, vec![0, 1, 2, 3]);
        let conds: Vec<f64> = s.entries.iter().map(|e| e.condition_posterior).collect();
        assert_eq!(conds, vec![0.125, 0.375, 0.625, 0.875]);
        let again = sweep(&b, &bb, &x).unwrap();
        assert_eq!(s.images, again.images);
        // batched sweep agrees with one-at-a-time generation
        for k in 0..4 {
            let one = Explainer::generate(&b, &x, &[BinIndex(k)]).unwrap();
            assert!(one.max_abs_diff(&s.image(k)) < 1e-6);
        }
        assert!(s.to_csv().starts_with("bin,condition_posterior,actual_posterior\n0,0.125,0.6"));
    }

    #[test]
    fn sweep_many_matches_single_sweeps() {
        let b = conditioned_bundle();
        let bb = ConstantBlackBox { shape: [1, 8, 8], p: 0.6 };
        let x = queries(20, 9);
        let many = sweep_many(&b, &bb, &x).unwrap();
        assert_eq!(many.len(), 20);
        for i in [0, 7, 19] {
            let one = sweep(&b, &bb, &x.item(i)).unwrap();
            assert!(one.images.max_abs_diff(&many[i].images) < 1e-6);
        }
    }

    #[test]
    fn identical_extremes_give_degenerate_saliency() {
        let e = IdentityExplainer { shape: [1, 8, 8], spec: ConditionSpec::new(0.1).unwrap() };
        let s = saliency_from_extremes(&e, &queries(1, 1)).unwrap();
        assert!(s.degenerate);
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saliency_is_normalized() {
        let s = saliency_from_extremes(&conditioned_bundle(), &queries(1, 2)).unwrap();
        assert!(!s.degenerate);
        assert_eq!(s.values.len(), 64);
        let lo = s.values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = s.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn saliency_of_fill_explainer_is_flat() {
        // both extremes are constant images, so the difference is constant
        let e = PosteriorFillExplainer { shape: [2, 3, 3], spec: ConditionSpec::new(0.2).unwrap() };
        let s = saliency_from_extremes(&e, &Tensor::zeros(&[2, 3, 3])).unwrap();
        assert!(s.degenerate);
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(raw in proptest::collection::vec(-5.0f32..5.0, 1..50)) {
            let n = raw.len();
            let s = SaliencyMap::from_raw(1, n, raw).unwrap();
            let t = s.renormalized().unwrap();
            prop_assert_eq!(&s.values, &t.values);
            prop_assert!(s.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
