//! The frozen classifier under explanation, reference classifiers and the
//! attribute oracles used for bias detection.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Bound, Conv, Linear, Mode};
use crate::param::{Adam, ParamStore};
use crate::synthdata::{LabeledImageDataset, Split};
use crate::tensor::{Element, Tensor};

/// A differentiable posterior `f: image -> [0, 1]` with frozen parameters.
pub trait BlackBox<T: Element>: Send + Sync {
    /// Expected `[C, H, W]` of a single input.
    fn input_shape(&self) -> [usize; 3];

    /// Posteriors `[N]` of the images `x` as graph nodes, differentiable in `x`.
    fn posterior_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;

    /// Logits `[N]` with `posterior = sigmoid(logit)`, for models that have
    /// them. Training prefers these because their gradients survive a
    /// saturated sigmoid.
    fn logit_graph(&self, _g: &mut Graph<T>, _x: Var) -> Result<Option<Var>> {
        Ok(None)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape() || s[0] == 0 {
            return Err(Error::Contract(format!(
                "classifier expects [N, {:?}], got {s:?}",
                self.input_shape()
            )));
        }
        Ok(())
    }

    /// One posterior per image.
    fn predict_posterior(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let p = self.posterior_graph(&mut g, xv)?;
        Ok(g.value(p).data().to_vec())
    }

    /// `d f(x_i) / d x_i` for every image, same shape as `x`.
    fn posterior_gradient(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let p = self.posterior_graph(&mut g, xv)?;
        let n = T::from_f64(x.batch() as f64);
        // images are independent, so the gradient of the batch sum splits per image
        let m = g.mean(p);
        let s = g.scale(m, n);
        let grads = g.backward(s)?;
        Ok(grads.get_or_zeros(xv, x.shape()))
    }
}

/// Posteriors for a large batch, evaluated in chunks.
pub fn predict_batched<T: Element>(bb: &dyn BlackBox<T>, x: &Tensor<T>, chunk: usize) -> Result<Vec<T>> {
    let n = x.batch();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        out.extend(bb.predict_posterior(&x.select(&idx))?);
    }
    Ok(out)
}

/// Always answers `p`.
#[derive(Clone, Debug)]
pub struct ConstantBlackBox {
    pub shape: [usize; 3],
    pub p: f64,
}

impl<T: Element> BlackBox<T> for ConstantBlackBox {
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn posterior_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let n = g.value(x).batch();
        let zero = g.scale(x, T::ZERO);
        let flat = g.reshape(zero, &[n, self.shape.iter().product()])?;
        let w = g.constant(Tensor::zeros(&[1, self.shape.iter().product()]));
        let z = g.linear(flat, w, None)?;
        let p = g.add_scalar(z, T::from_f64(self.p));
        g.reshape(p, &[n])
    }
}

/// `sigmoid(w . x + b)`.
#[derive(Clone, Debug)]
pub struct LinearLogitBlackBox<T> {
    pub shape: [usize; 3],
    pub w: Vec<T>,
    pub b: T,
}

impl<T: Element> BlackBox<T> for LinearLogitBlackBox<T> {
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn posterior_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let z = self.logit_graph(g, x)?.expect("linear model has logits");
        Ok(g.sigmoid(z))
    }

    fn logit_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Option<Var>> {
        let n = g.value(x).batch();
        let d = self.w.len();
        let flat = g.reshape(x, &[n, d])?;
        let w = g.constant(Tensor::from_vec(&[1, d], self.w.clone())?);
        let b = g.constant(Tensor::from_vec(&[1], vec![self.b])?);
        let z = g.linear(flat, w, Some(b))?;
        g.reshape(z, &[n]).map(Some)
    }
}

/// Wraps a plain function; it has no gradient.
pub struct FnBlackBox<F> {
    pub shape: [usize; 3],
    pub f: F,
}

impl<T: Element, F: Fn(&[T]) -> f64 + Send + Sync> BlackBox<T> for FnBlackBox<F> {
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn posterior_graph(&self, _g: &mut Graph<T>, _x: Var) -> Result<Var> {
        Err(Error::Unsupported("wrapped function is not differentiable".into()))
    }

    fn predict_posterior(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.check_input(x)?;
        let d = x.item_len();
        Ok(x.data()
            .chunks(d)
            .map(|img| T::from_f64((self.f)(img).clamp(0.0, 1.0)))
            .collect())
    }
}

pub const CLASSIFIER_ARCHITECTURE: &str = "conv3-gap-sigmoid";
pub const CLASSIFIER_FORMAT_VERSION: u32 = 1;

/// Hyper-parameters of the reference classifier and its training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Widths of the three convolution blocks.
    pub channels: [usize; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: [8, 16, 32],
            epochs: 1,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Checkpoint manifest of a classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierManifest {
    pub architecture_id: String,
    pub input_shape: [usize; 3],
    pub channels: [usize; 3],
    pub target_attribute: String,
    pub validation_accuracy: f64,
    pub seed: u64,
    pub format_version: u32,
}

/// Three conv-ReLU-pool blocks, global average pooling and a sigmoid head.
#[derive(Clone, Debug)]
pub struct ConvClassifier<T> {
    store: ParamStore<T>,
    convs: Vec<Conv>,
    head: Linear,
    pub manifest: ClassifierManifest,
}

impl<T: Element> ConvClassifier<T> {
    pub fn new(input_shape: [usize; 3], channels: [usize; 3], seed: u64) -> Result<Self> {
        if input_shape[1] % 4 != 0 || input_shape[2] % 4 != 0 || input_shape[1] < 4 {
            return Err(Error::Config(format!("input {input_shape:?} must be divisible by 4")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = input_shape[0];
        let mut convs = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv::new(&mut store, &mut rng, &format!("clf.conv{i}"), cin, c, 3, false, std::f64::consts::SQRT_2));
            cin = c;
        }
        let head = Linear::new(&mut store, &mut rng, "clf.head", cin, 1, true, false);
        Ok(Self {
            store,
            convs,
            head,
            manifest: ClassifierManifest {
                architecture_id: CLASSIFIER_ARCHITECTURE.into(),
                input_shape,
                channels,
                target_attribute: String::new(),
                validation_accuracy: f64::NAN,
                seed,
                format_version: CLASSIFIER_FORMAT_VERSION,
            },
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Logits `[N, 1]`.
    fn logits(&self, g: &mut Graph<T>, b: &mut Bound<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&self.store, g, b, h)?;
            h = g.relu(h);
            if i + 1 < self.convs.len() {
                h = g.avg_pool2(h)?;
            }
        }
        let [_, _, hh, ww] = g.value(h).dims4()?;
        let s = g.sum_spatial(h)?;
        let s = g.scale(s, T::from_f64(1.0 / (hh * ww) as f64));
        self.head.forward(&self.store, g, b, s)
    }

    pub fn cast<U: Element>(&self) -> ConvClassifier<U> {
        ConvClassifier {
            store: self.store.cast(),
            convs: self.convs.clone(),
            head: self.head.clone(),
            manifest: self.manifest.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.store.save(&dir.join("weights.bin"))?;
        crate::io::write_json_atomic(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let m: ClassifierManifest = crate::io::read_manifest(&path)?;
        if m.format_version != CLASSIFIER_FORMAT_VERSION {
            return Err(Error::Manifest {
                path,
                field: "format_version".into(),
                reason: format!("expected {CLASSIFIER_FORMAT_VERSION}, found {}", m.format_version),
            });
        }
        if m.architecture_id != CLASSIFIER_ARCHITECTURE {
            return Err(Error::Manifest {
                path,
                field: "architecture_id".into(),
                reason: format!("unknown architecture `{}`", m.architecture_id),
            });
        }
        let mut c = Self::new(m.input_shape, m.channels, m.seed)?;
        c.store.load_from(&dir.join("weights.bin"))?;
        c.manifest = m;
        Ok(c)
    }
}

impl<T: Element> BlackBox<T> for ConvClassifier<T> {
    fn input_shape(&self) -> [usize; 3] {
        self.manifest.input_shape
    }

    fn posterior_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let z = self.logit_graph(g, x)?.expect("classifier has logits");
        Ok(g.sigmoid(z))
    }

    fn logit_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Option<Var>> {
        let n = g.value(x).batch();
        let mut b = Bound::new(&self.store, g, Mode::EVAL);
        let z = self.logits(g, &mut b, x)?;
        g.reshape(z, &[n]).map(Some)
    }
}

/// Fraction of `labels` matched by thresholding `posteriors` at `threshold`.
pub fn accuracy(posteriors: &[f32], labels: &[u8], threshold: f64) -> f64 {
    let hits = posteriors
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (f64::from(p) > threshold) == (y == 1))
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Trains a [`ConvClassifier`] for `attribute` on the train split and
/// reports its accuracy on the validation split.
pub fn train_reference_classifier(
    ds: &LabeledImageDataset,
    attribute: &str,
    cfg: &ClassifierConfig,
) -> Result<ConvClassifier<f32>> {
    let labels = ds.attribute(attribute)?;
    let train = ds.indices(Split::Train);
    let val = ds.indices(Split::Val);
    let ones = train.iter().filter(|&&i| labels[i] == 1).count();
    if train.is_empty() || ones == 0 || ones == train.len() {
        return Err(Error::Training(format!(
            "attribute `{attribute}` needs both classes in the training split ({ones} of {} positive)",
            train.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("classifier epochs and batch size must be positive".into()));
    }
    let mut clf = ConvClassifier::<f32>::new(ds.image_shape(), cfg.channels, cfg.seed)?;
    let mut opt = Adam::new(&clf.store, cfg.lr, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order = train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = ds.images.select(batch);
            let y: Vec<f32> = batch.iter().map(|&i| labels[i] as f32).collect();
            let mut g = Graph::new();
            let mut b = Bound::new(&clf.store, &mut g, Mode::TRAIN);
            let xv = g.constant(x);
            let z = clf.logits(&mut g, &mut b, xv)?;
            let loss = g.bce_with_logits(z, &y)?;
            let l = g.scalar(loss);
            if !l.is_finite() {
                return Err(Error::Training(format!("classifier loss became {l} in epoch {epoch}")));
            }
            total += l as f64 * batch.len() as f64;
            let grads = g.backward(loss)?;
            let grads = clf.store.collect_grads(&grads, &b.vars);
            opt.step(&mut clf.store, &grads);
        }
        log::debug!("classifier `{attribute}` epoch {epoch}: loss {:.4}", total / order.len() as f64);
    }
    let eval = if val.is_empty() { &train } else { &val };
    let p = predict_batched(&clf, &ds.images.select(eval), 256)?;
    let y: Vec<u8> = eval.iter().map(|&i| labels[i]).collect();
    clf.manifest.target_attribute = attribute.to_string();
    clf.manifest.validation_accuracy = accuracy(&p, &y, 0.5);
    log::info!(
        "classifier `{attribute}`: validation accuracy {:.4}",
        clf.manifest.validation_accuracy
    );
    Ok(clf)
}

/// Size report of [`build_biased_split`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasedSplitReport {
    pub kept: usize,
    pub dropped: usize,
    /// `P(confounder = 1 | target = 0)` in the result.
    pub confounder_rate_negative: f64,
}

/// Drops every `target = 1, confounder = 0` sample so that the target
/// implies the confounder.
pub fn build_biased_split(
    ds: &LabeledImageDataset,
    target: &str,
    confounder: &str,
) -> Result<(LabeledImageDataset, BiasedSplitReport)> {
    let t = ds.attribute(target)?;
    let c = ds.attribute(confounder)?;
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| t[i] == 0 || c[i] == 1).collect();
    let positives = keep.iter().filter(|&&i| t[i] == 1).count();
    if positives == 0 || positives == keep.len() {
        return Err(Error::Validation(format!(
            "no usable samples: {positives} of {} kept samples have `{target}` = 1",
            keep.len()
        )));
    }
    let neg: Vec<usize> = keep.iter().copied().filter(|&i| t[i] == 0).collect();
    let rate = neg.iter().filter(|&&i| c[i] == 1).count() as f64 / neg.len() as f64;
    let report = BiasedSplitReport {
        kept: keep.len(),
        dropped: ds.len() - keep.len(),
        confounder_rate_negative: rate,
    };
    Ok((ds.subset(&keep), report))
}

/// Classifier for a confounding attribute, trusted only above an accuracy floor.
#[derive(Clone, Debug)]
pub struct OracleClassifier {
    pub classifier: ConvClassifier<f32>,
    pub attribute: String,
    pub threshold: f64,
    pub accuracy: f64,
}

impl OracleClassifier {
    /// Wraps a trained classifier, refusing it below `floor`.
    pub fn from_classifier(classifier: ConvClassifier<f32>, threshold: f64, floor: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!("oracle threshold {threshold} outside (0, 1)")));
        }
        let accuracy = classifier.manifest.validation_accuracy;
        if !(accuracy >= floor) {
            return Err(Error::OracleBelowFloor { accuracy, floor });
        }
        Ok(Self {
            attribute: classifier.manifest.target_attribute.clone(),
            classifier,
            threshold,
            accuracy,
        })
    }

    /// Predicted attribute values.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<u8>> {
        let p = predict_batched(&self.classifier, x, 256)?;
        Ok(p.iter().map(|&v| (f64::from(v) > self.threshold) as u8).collect())
    }
}

pub const DEFAULT_ORACLE_FLOOR: f64 = 0.95;

pub fn train_oracle(
    ds: &LabeledImageDataset,
    attribute: &str,
    cfg: &ClassifierConfig,
    floor: f64,
) -> Result<OracleClassifier> {
    let clf = train_reference_classifier(ds, attribute, cfg)?;
    OracleClassifier::from_classifier(clf, 0.5, floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_synthetic, CorrelationMode, SynthFactorSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_images(n: usize, shape: [usize; 3], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * shape.iter().product::<usize>();
        Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], (0..len).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn constant_stub() {
        let bb = ConstantBlackBox {
            shape: [1, 4, 4],
            p: 0.7,
        };
        let x = rand_images(3, [1, 4, 4], 1);
        let p = BlackBox::<f64>::predict_posterior(&bb, &x).unwrap();
        assert!(p.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let grad = bb.posterior_gradient(&x).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            bb.predict_posterior(&Tensor::<f64>::zeros(&[1, 1, 4, 5])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn linear_logit_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bb = LinearLogitBlackBox {
            shape: [1, 4, 4],
            w: w.clone(),
            b: 0.1,
        };
        let x = rand_images(2, [1, 4, 4], 3);
        let grad = bb.posterior_gradient(&x).unwrap();
        for i in 0..2 {
            let z: f64 = w.iter().zip(&x.data()[i * 16..][..16]).map(|(a, b)| a * b).sum::<f64>() + 0.1;
            let s = 1.0 / (1.0 + (-z).exp());
            for j in 0..16 {
                assert!((grad.data()[i * 16 + j] - s * (1.0 - s) * w[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_classifier_gradient_matches_finite_differences() {
        let clf = ConvClassifier::<f64>::new([1, 8, 8], [3, 4, 5], 4).unwrap();
        let x = rand_images(1, [1, 8, 8], 5);
        let grad = clf.posterior_gradient(&x).unwrap();
        let h = 1e-4;
        for j in 0..64 {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let fd = (clf.predict_posterior(&xp).unwrap()[0] - clf.predict_posterior(&xm).unwrap()[0]) / (2.0 * h);
            let a = grad.data()[j];
            assert!((a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-6), "pixel {j}: {a} vs {fd}");
        }
    }

    #[test]
    fn non_differentiable_wrapper_is_unsupported() {
        let bb = FnBlackBox {
            shape: [1, 2, 2],
            f: |img: &[f64]| img.iter().sum::<f64>() / 4.0,
        };
        let x = rand_images(2, [1, 2, 2], 1);
        assert_eq!(bb.predict_posterior(&x).unwrap().len(), 2);
        assert!(matches!(bb.posterior_gradient(&x), Err(Error::Unsupported(_))));
    }

    #[test]
    fn batching_consistency() {
        let clf = ConvClassifier::<f64>::new([1, 8, 8], [3, 4, 5], 4).unwrap();
        let x = rand_images(5, [1, 8, 8], 6);
        let all = clf.predict_posterior(&x).unwrap();
        for i in 0..5 {
            let one = clf.predict_posterior(&x.item(i)).unwrap()[0];
            assert!((one - all[i]).abs() < 1e-12);
        }
        assert_eq!(predict_batched(&clf, &x, 2).unwrap(), all);
    }

    fn dataset(n: usize, mode: CorrelationMode) -> LabeledImageDataset {
        generate_synthetic(&SynthFactorSpec {
            samples: n,
            mode,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn biased_split_filters_membership_only() {
        let ds = dataset(2000, CorrelationMode::Independent);
        let (b, report) = build_biased_split(&ds, "target", "confounder").unwrap();
        let t = b.attribute("target").unwrap();
        let c = b.attribute("confounder").unwrap();
        assert!(t.iter().zip(&c).all(|(&t, &c)| t == 0 || c == 1));
        assert!((report.confounder_rate_negative - 0.5).abs() < 0.1);
        assert_eq!(report.kept, b.len());
        for (k, name) in b.filenames.iter().enumerate() {
            let i = ds.filenames.iter().position(|f| f == name).unwrap();
            assert_eq!(b.images.item(k), ds.images.item(i));
        }
        let mut no_conf = ds.clone();
        no_conf.attribute_names[1] = "other".into();
        assert!(build_biased_split(&no_conf, "target", "confounder").is_err());
        let all_neg = ds.subset(&(0..ds.len()).filter(|&i| ds.attributes[i][0] == 0).collect::<Vec<_>>());
        assert!(matches!(build_biased_split(&all_neg, "target", "confounder"), Err(Error::Validation(_))));
    }

    #[test]
    fn classifier_training_errors() {
        let ds = dataset(40, CorrelationMode::Independent);
        let cfg = ClassifierConfig {
            epochs: 1,
            ..Default::default()
        };
        let err = train_reference_classifier(&ds, "smiling", &cfg).unwrap_err().to_string();
        assert!(err.contains("target") && err.contains("confounder"), "{err}");
        let single = ds.subset(&(0..ds.len()).filter(|&i| ds.attributes[i][0] == 1).collect::<Vec<_>>());
        assert!(matches!(train_reference_classifier(&single, "target", &cfg), Err(Error::Training(_))));
    }

    #[test]
    fn oracle_refuses_below_floor() {
        let mut clf = ConvClassifier::<f32>::new([1, 8, 8], [2, 2, 2], 0).unwrap();
        clf.manifest.validation_accuracy = 0.9;
        clf.manifest.target_attribute = "confounder".into();
        assert!(matches!(
            OracleClassifier::from_classifier(clf.clone(), 0.5, 0.95),
            Err(Error::OracleBelowFloor { .. })
        ));
        let o = OracleClassifier::from_classifier(clf, 0.5, 0.85).unwrap();
        assert_eq!(o.threshold, 0.5);
        assert_eq!(o.attribute, "confounder");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut clf = ConvClassifier::<f32>::new([1, 8, 8], [3, 4, 5], 9).unwrap();
        clf.manifest.target_attribute = "target".into();
        clf.manifest.validation_accuracy = 0.5;
        clf.save(dir.path()).unwrap();
        let back = ConvClassifier::<f32>::load(dir.path()).unwrap();
        let x = rand_images(3, [1, 8, 8], 1).cast::<f32>();
        assert_eq!(clf.predict_posterior(&x).unwrap(), back.predict_posterior(&x).unwrap());
        assert_eq!(back.manifest, clf.manifest);
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        fs::write(dir.path().join("manifest.json"), text.replace("\"format_version\": 1", "\"format_version\": 7")).unwrap();
        let err = ConvClassifier::<f32>::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("format_version"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn posterior_in_unit_interval(seed in 0u64..1000, scale in 0.1f64..50.0) {
            let clf = ConvClassifier::<f64>::new([1, 8, 8], [3, 4, 5], seed).unwrap();
            let x = rand_images(2, [1, 8, 8], seed).map(|v| v * scale - scale / 2.0);
            for p in clf.predict_posterior(&x).unwrap() {
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }
    }
}
