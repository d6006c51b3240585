//! The six subcommands. Each takes an output-directory lock, writes its
//! artifacts there and appends one run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use exaggerator_core::blackbox::{
    accuracy, build_biased_split, predict_batched, train_oracle, train_reference_classifier, ClassifierConfig,
};
use exaggerator_core::evalsuite::{
    class_flip_matrix, compatibility_curve, confounding_summary, fid_report, identity_verification,
    latent_space_closeness, measurement_correlation, pixel_flip_curve, self_consistency, ConfoundingSummary,
    FlipMatrix, Metric, RandomConvEmbedder,
};
use exaggerator_core::explain::{explain as explain_images, saliency_from_extremes, saliency_many, sweep, Explainer};
use exaggerator_core::io::{write_atomic, write_json_atomic};
use exaggerator_core::synthdata::{
    generate_synthetic, load_dataset, measure_factor, CorrelationMode, LoadOptions, Split, CONFOUNDER_ATTRIBUTE,
    TARGET_ATTRIBUTE,
};
use exaggerator_core::trainer::{load_bundle, save_bundle, train_explainer as train_bundle, TrainOutputs};
use exaggerator_core::{BinIndex, ConvClassifier, EvalReport, ExplainerBundle, LabeledImageDataset, OracleClassifier, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::manifest::{OutputLock, RunManifest, RunRecorder};
use crate::render::{save_heatmap, save_plot, save_strip, Series, BLUE, GREY, ORANGE};

pub const DATASET_FILE: &str = "dataset.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BUNDLE_DIR: &str = "bundle";
pub const REPORT_FILE: &str = "report.json";

/// Shape record written next to a generated dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetInfo {
    image_shape: [usize; 3],
    samples: usize,
    attributes: Vec<String>,
}

/// Refuses to write into (or above) any input.
fn ensure_distinct(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let o = canon(out);
    for i in inputs {
        let i = canon(i);
        if o == i || i.starts_with(&o) || o.starts_with(&i) {
            bail!("output {} overlaps input {}; inputs are never modified", o.display(), i.display());
        }
    }
    Ok(())
}

fn run<T>(
    command: &str,
    cfg: &Config,
    out: &Path,
    inputs: &[&Path],
    body: impl FnOnce(&mut RunRecorder) -> Result<T>,
) -> Result<(T, RunManifest)> {
    ensure_distinct(out, inputs)?;
    let _lock = OutputLock::acquire(out)?;
    let mut rec = RunRecorder::start(command, cfg);
    for i in inputs {
        rec.input(i)?;
    }
    let value = body(&mut rec)?;
    let m = rec.finish(out)?;
    Ok((value, m))
}

pub fn load_data(dir: &Path, cfg: &Config) -> Result<LabeledImageDataset> {
    let info = dir.join(DATASET_FILE);
    let (size, channels) = if info.exists() {
        let i: DatasetInfo = exaggerator_core::io::read_manifest(&info)?;
        (i.image_shape[1], i.image_shape[0])
    } else {
        (cfg.get("data.image_size")?, cfg.get("data.channels")?)
    };
    let opts = LoadOptions {
        size,
        channels,
        strict: true,
        fractions: cfg.split_fractions()?,
        seed: cfg.get("data.seed")?,
    };
    load_dataset(dir, &dir.join("attributes.csv"), &opts).with_context(|| format!("loading dataset {}", dir.display()))
}

fn save_data(ds: &LabeledImageDataset, dir: &Path) -> Result<()> {
    ds.save(dir)?;
    write_json_atomic(
        &dir.join(DATASET_FILE),
        &DatasetInfo {
            image_shape: ds.image_shape(),
            samples: ds.len(),
            attributes: ds.attribute_names.clone(),
        },
    )?;
    Ok(())
}

/// Accepts a bundle directory or a `train-explainer` output containing one.
pub fn resolve_bundle(path: &Path) -> PathBuf {
    let nested = path.join(BUNDLE_DIR);
    if nested.join("manifest.json").exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn load_classifier(path: &Path) -> Result<ConvClassifier<f32>> {
    ConvClassifier::load(path).with_context(|| format!("loading classifier {}", path.display()))
}

fn check_compatible(bundle: &ExplainerBundle, clf: &ConvClassifier<f32>) -> Result<()> {
    if bundle.image_shape() != clf.manifest.input_shape {
        bail!(
            "bundle images {:?} do not match classifier input {:?}",
            bundle.image_shape(),
            clf.manifest.input_shape
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- synth-data

pub fn synth_data(cfg: &Config, out: &Path) -> Result<RunManifest> {
    let spec = cfg.synth_spec()?;
    let ((), m) = run("synth-data", cfg, out, &[], |rec| {
        let ds = generate_synthetic(&spec)?;
        save_data(&ds, out)?;
        rec.output(out);
        Ok(())
    })?;
    Ok(m)
}

// ---------------------------------------------------------------- train-classifier

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierKind {
    Regular,
    /// Trained after dropping every `target = 1, confounder = 0` sample.
    Biased,
    /// Trusted attribute predictor; refused below the accuracy floor.
    Oracle,
}

impl std::str::FromStr for ClassifierKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(Self::Regular),
            "biased" => Ok(Self::Biased),
            "oracle" => Ok(Self::Oracle),
            other => bail!("unknown classifier kind `{other}`; expected regular, biased or oracle"),
        }
    }
}

fn fit_classifier(ds: &LabeledImageDataset, cfg: &Config) -> Result<ConvClassifier<f32>> {
    let kind: ClassifierKind = cfg.get_str("classifier.kind")?.parse()?;
    let attr = cfg.get_str("classifier.attribute")?;
    let cc = cfg.classifier_config()?;
    Ok(match kind {
        ClassifierKind::Regular => train_reference_classifier(ds, &attr, &cc)?,
        ClassifierKind::Biased => {
            let (biased, report) = build_biased_split(ds, &attr, &cfg.get_str("classifier.confounder")?)?;
            log::info!("biased split keeps {} of {} samples", report.kept, report.kept + report.dropped);
            train_reference_classifier(&biased, &attr, &cc)?
        }
        ClassifierKind::Oracle => train_oracle(ds, &attr, &cc, cfg.get("classifier.oracle_floor")?)?.classifier,
    })
}

pub fn train_classifier(cfg: &Config, data: &Path, out: &Path) -> Result<(ConvClassifier<f32>, RunManifest)> {
    run("train-classifier", cfg, out, &[data], |rec| {
        let ds = load_data(data, cfg)?;
        let clf = fit_classifier(&ds, cfg)?;
        clf.save(out)?;
        rec.output(out);
        Ok(clf)
    })
}

// ---------------------------------------------------------------- train-explainer

pub fn train_explainer(cfg: &Config, data: &Path, classifier: &Path, out: &Path) -> Result<RunManifest> {
    let tc = cfg.train_config()?;
    let ((), m) = run("train-explainer", cfg, out, &[data, classifier], |rec| {
        let ds = load_data(data, cfg)?;
        let clf = load_classifier(classifier)?;
        let metrics = out.join(METRICS_FILE);
        let checkpoints = out.join("checkpoints");
        let outputs = TrainOutputs {
            metrics: Some(metrics.clone()),
            checkpoints: Some(checkpoints.clone()),
        };
        let bundle = train_bundle(&ds, &clf, &tc, &outputs)?;
        save_bundle(&bundle, &out.join(BUNDLE_DIR))?;
        rec.output(&out.join(BUNDLE_DIR));
        rec.output(&metrics);
        if checkpoints.exists() {
            rec.output(&checkpoints);
        }
        Ok(())
    })?;
    Ok(m)
}

// ---------------------------------------------------------------- explain

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExplainMode {
    /// A single shift of the query's posterior.
    Delta(f64),
    /// Every bin; an explicit step must equal the bundle's.
    Sweep(Option<f64>),
}

fn load_query(path: &Path, shape: [usize; 3]) -> Result<Tensor<f32>> {
    let [c, h, w] = shape;
    let img = image::open(path).with_context(|| format!("reading image {}", path.display()))?;
    let img = if img.width() as usize != w || img.height() as usize != h {
        img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let data: Vec<f32> = match c {
        1 => img.to_luma8().pixels().map(|p| p[0] as f32 / 255.0).collect(),
        3 => {
            let rgb = img.to_rgb8();
            (0..3).flat_map(|ch| rgb.pixels().map(move |p| p[ch] as f32 / 255.0).collect::<Vec<_>>()).collect()
        }
        _ => bail!("unsupported channel count {c}"),
    };
    Ok(Tensor::from_vec(&[1, c, h, w], data)?)
}

fn check_delta(bundle_delta: f64, delta: f64) -> Result<()> {
    let ratio = delta / bundle_delta;
    if !delta.is_finite() || delta.abs() > 1.0 || (ratio - ratio.round()).abs() > 1e-6 {
        bail!("delta {delta} is not a multiple of the bundle's step {bundle_delta} within [-1, 1]");
    }
    Ok(())
}

fn saliency_csv(values: &[f32], width: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Paths written by [`explain`].
#[derive(Clone, Debug)]
pub struct ExplainOutputs {
    pub strip: PathBuf,
    pub series: PathBuf,
    pub saliency: PathBuf,
    pub saliency_values: PathBuf,
    /// Images in the strip, query included.
    pub strip_len: usize,
}

pub fn explain(
    cfg: &Config,
    bundle_path: &Path,
    classifier: &Path,
    image: &Path,
    mode: ExplainMode,
    out: &Path,
) -> Result<(ExplainOutputs, RunManifest)> {
    let bundle_path = resolve_bundle(bundle_path);
    run("explain", cfg, out, &[&bundle_path, classifier, image], |rec| {
        let bundle = load_bundle(&bundle_path)?;
        let clf = load_classifier(classifier)?;
        check_compatible(&bundle, &clf)?;
        let x = load_query(image, bundle.image_shape())?;
        let (images, csv) = match mode {
            ExplainMode::Delta(d) => {
                check_delta(bundle.spec.delta(), d)?;
                let (gen, post) = explain_images(&bundle, &clf, &x, d)?;
                let fx = predict_batched(&clf, &x, 1)?[0] as f64;
                let k = bundle.spec.shift_condition(fx, d);
                let csv = format!(
                    "bin,condition_posterior,actual_posterior\n{},{},{}\n",
                    k.0,
                    bundle.spec.bin_target_posterior(k)?,
                    post[0]
                );
                (Tensor::stack(&[&x, &gen])?, csv)
            }
            ExplainMode::Sweep(step) => {
                if let Some(s) = step {
                    if (s - bundle.spec.delta()).abs() > 1e-9 {
                        bail!("sweep step {s} differs from the bundle's step {}", bundle.spec.delta());
                    }
                }
                let series = sweep(&bundle, &clf, &x)?;
                (Tensor::stack(&[&x, &series.images])?, series.to_csv())
            }
        };
        let o = ExplainOutputs {
            strip: out.join("strip.png"),
            series: out.join("series.csv"),
            saliency: out.join("saliency.png"),
            saliency_values: out.join("saliency.csv"),
            strip_len: images.batch(),
        };
        save_strip(&images, &o.strip)?;
        write_atomic(&o.series, csv.as_bytes())?;
        let map = saliency_from_extremes(&bundle, &x)?;
        save_heatmap(&map.values, map.height, map.width, &o.saliency)?;
        write_atomic(&o.saliency_values, saliency_csv(&map.values, map.width).as_bytes())?;
        for p in [&o.strip, &o.series, &o.saliency, &o.saliency_values] {
            rec.output(p);
        }
        Ok(o)
    })
}

// ---------------------------------------------------------------- evaluate

/// Parses `a,b,c`; an unknown name lists the valid ones.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: Metric = name.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        bail!("no metrics requested");
    }
    Ok(out)
}

/// The first `eval.queries` images of `eval.split` (all images when the split is empty).
pub fn eval_subset(ds: &LabeledImageDataset, cfg: &Config) -> Result<LabeledImageDataset> {
    let split = Split::parse(&cfg.get_str("eval.split")?)?;
    let mut idx = ds.indices(split);
    if idx.is_empty() {
        log::warn!("split `{}` is empty, evaluating on every image", split.as_str());
        idx = (0..ds.len()).collect();
    }
    idx.truncate(cfg.get::<usize>("eval.queries")?);
    Ok(ds.subset(&idx))
}

fn load_oracles(paths: &[PathBuf], floor: f64) -> Result<Vec<OracleClassifier>> {
    paths
        .iter()
        .map(|p| {
            OracleClassifier::from_classifier(load_classifier(p)?, 0.5, floor)
                .with_context(|| format!("oracle {}", p.display()))
        })
        .collect()
}

/// Counterfactuals at the bin opposite each query's prediction.
fn opposite(e: &dyn Explainer, clf: &ConvClassifier<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let fx = predict_batched(clf, x, 64)?;
    let ks: Vec<BinIndex> = fx
        .iter()
        .map(|&p| if p >= 0.5 { BinIndex(0) } else { e.spec().last() })
        .collect();
    Ok(e.generate(x, &ks)?)
}

pub struct EvalInputs<'a> {
    pub bundle: &'a ExplainerBundle,
    pub classifier: &'a ConvClassifier<f32>,
    pub data: &'a LabeledImageDataset,
    pub oracles: &'a [OracleClassifier],
}

/// Computes `metrics` and writes the report, curves and plots into `out`.
pub fn evaluate_into(cfg: &Config, inp: &EvalInputs, metrics: &[Metric], out: &Path) -> Result<(EvalReport, Vec<PathBuf>)> {
    fs::create_dir_all(out)?;
    check_compatible(inp.bundle, inp.classifier)?;
    let (e, bb) = (inp.bundle, inp.classifier);
    let ds = eval_subset(inp.data, cfg)?;
    let x = &ds.images;
    let shape = ds.image_shape();
    let floor: f64 = cfg.get("classifier.oracle_floor")?;
    let mut report = EvalReport::new();
    let mut written = Vec::new();
    let put = |name: &str, bytes: &[u8], written: &mut Vec<PathBuf>| -> Result<()> {
        let p = out.join(name);
        write_atomic(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    for &m in metrics {
        log::info!("evaluating {}", m.name());
        match m {
            Metric::Compatibility => {
                let c = compatibility_curve(e, bb, x)?;
                put("compatibility.csv", c.to_csv().as_bytes(), &mut written)?;
                let xs: Vec<f64> = c.bins.iter().map(|b| b.condition_posterior).collect();
                let ys: Vec<f64> = c.bins.iter().map(|b| b.mean).collect();
                let p = out.join("compatibility.png");
                save_plot(
                    &[Series { xs: &xs, ys: &xs, color: GREY }, Series { xs: &xs, ys: &ys, color: BLUE }],
                    (0.0, 1.0),
                    (0.0, 1.0),
                    &p,
                )?;
                written.push(p);
                report.compatibility = Some(c);
            }
            Metric::SelfConsistency => report.self_consistency = Some(self_consistency(e, bb, x)?),
            Metric::Fid => {
                let embedder = RandomConvEmbedder::new(shape, cfg.get("eval.embedder_seed")?);
                let fake = e.generate_all_bins(x)?;
                let real_post: Vec<f64> = predict_batched(bb, x, 64)?.into_iter().map(f64::from).collect();
                let fake_post: Vec<f64> = predict_batched(bb, &fake, 64)?.into_iter().map(f64::from).collect();
                report.fid = Some(fid_report(&embedder, x, &real_post, &fake, &fake_post)?);
            }
            Metric::Closeness => {
                let deltas: Vec<f64> = cfg.get_list("eval.closeness_deltas")?;
                report.latent_closeness = Some(latent_space_closeness(e, bb, x, &deltas)?);
            }
            Metric::Identity => {
                let embedder = RandomConvEmbedder::new(shape, cfg.get("eval.embedder_seed")?);
                let fake = opposite(e, bb, x)?;
                report.identity =
                    Some(identity_verification(&embedder, x, &fake, cfg.get("eval.verification_threshold")?)?);
            }
            Metric::PixelFlip => {
                let labels = ds.attribute(&bb.manifest.target_attribute)?;
                let maps = saliency_many(e, x)?;
                let fractions: Vec<f64> = cfg.get_list("eval.flip_fractions")?;
                let c = pixel_flip_curve(&maps, x, &labels, bb, &fractions, cfg.get("eval.seed")?)?;
                put("pixel_flip.csv", c.to_csv().as_bytes(), &mut written)?;
                let hi = fractions.iter().copied().fold(0.0, f64::max).max(1e-3);
                let p = out.join("pixel_flip.png");
                save_plot(
                    &[
                        Series { xs: &c.fractions, ys: &c.random_accuracy, color: GREY },
                        Series { xs: &c.fractions, ys: &c.accuracy, color: ORANGE },
                    ],
                    (0.0, hi),
                    (0.0, 1.0),
                    &p,
                )?;
                written.push(p);
                report.pixel_flip = Some(c);
            }
            Metric::Confounding => {
                let oracle = inp
                    .oracles
                    .first()
                    .ok_or_else(|| anyhow!("metric confounding needs an --oracle classifier"))?;
                let attr = ds.attribute(&oracle.attribute)?;
                report.confounding = Some(confounding_summary(e, oracle, floor, x, &attr)?);
            }
            Metric::FlipMatrix => {
                if inp.oracles.is_empty() {
                    bail!("metric flip_matrix needs at least one --oracle classifier");
                }
                let target = bb.manifest.target_attribute.clone();
                let oracles: Vec<(&str, &OracleClassifier)> =
                    inp.oracles.iter().map(|o| (o.attribute.as_str(), o)).collect();
                let attrs: Vec<&str> = oracles.iter().map(|(a, _)| *a).collect();
                let fm = class_flip_matrix(&[(target.as_str(), e, bb)], &oracles, &attrs, x)?;
                put("flip_matrix.csv", flip_matrix_csv(&fm).as_bytes(), &mut written)?;
                report.flip_matrix = Some(fm);
            }
            Metric::Measurement => {
                if shape[0] != 1 {
                    bail!("measurement needs single-channel disc images, got {} channels", shape[0]);
                }
                let size = shape[1];
                let measure = |img: &[f32]| measure_factor(img, size).map(|m| m.radius).unwrap_or(f64::NAN);
                report.measurement = Some(measurement_correlation(e, bb, &measure, x)?);
            }
        }
    }
    let p = out.join(REPORT_FILE);
    write_json_atomic(&p, &report)?;
    written.push(p);
    Ok((report, written))
}

fn flip_matrix_csv(fm: &FlipMatrix) -> String {
    let mut s = format!("target,{}\n", fm.attributes.join(","));
    for (t, row) in fm.targets.iter().zip(&fm.values) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{t},{}", cells.join(","));
    }
    s
}

pub fn evaluate(
    cfg: &Config,
    bundle: &Path,
    classifier: &Path,
    data: &Path,
    metrics: &[Metric],
    oracles: &[PathBuf],
    out: &Path,
) -> Result<(EvalReport, RunManifest)> {
    let bundle = resolve_bundle(bundle);
    let mut inputs: Vec<&Path> = vec![&bundle, classifier, data];
    inputs.extend(oracles.iter().map(PathBuf::as_path));
    run("evaluate", cfg, out, &inputs, |rec| {
        let b = load_bundle(&bundle)?;
        let clf = load_classifier(classifier)?;
        let ds = load_data(data, cfg)?;
        let oracles = load_oracles(oracles, cfg.get("classifier.oracle_floor")?)?;
        let inp = EvalInputs {
            bundle: &b,
            classifier: &clf,
            data: &ds,
            oracles: &oracles,
        };
        let (report, written) = evaluate_into(cfg, &inp, metrics, out)?;
        for p in &written {
            rec.output(p);
        }
        Ok(report)
    })
}

// ---------------------------------------------------------------- bias-experiment

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub explainer: String,
    /// Accuracy on the unconfounded test split.
    pub classifier_accuracy: f64,
    pub confounding: ConfoundingSummary,
    /// Flip fractions under the target and confounder oracles.
    pub flip_target: f64,
    pub flip_confounder: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasComparison {
    pub biased: BiasRow,
    pub unbiased: BiasRow,
    /// `biased / unbiased` overall confounding; infinite when the unbiased value is 0.
    pub ratio: f64,
}

impl BiasComparison {
    pub fn table(&self) -> String {
        let mut s = String::from(
            "explainer  accuracy  confounding(+)  confounding(-)  confounding  flip(target)  flip(confounder)\n",
        );
        for r in [&self.biased, &self.unbiased] {
            let _ = writeln!(
                s,
                "{:<9}  {:>8.4}  {:>14.4}  {:>14.4}  {:>11.4}  {:>12.4}  {:>16.4}",
                r.explainer,
                r.classifier_accuracy,
                r.confounding.positive.fraction,
                r.confounding.negative.fraction,
                r.confounding.overall,
                r.flip_target,
                r.flip_confounder
            );
        }
        let _ = writeln!(s, "ratio biased/unbiased: {:.3}", self.ratio);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "explainer,classifier_accuracy,confounding_positive,confounding_negative,confounding_overall,flip_target,flip_confounder\n",
        );
        for r in [&self.biased, &self.unbiased] {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.explainer,
                r.classifier_accuracy,
                r.confounding.positive.fraction,
                r.confounding.negative.fraction,
                r.confounding.overall,
                r.flip_target,
                r.flip_confounder
            );
        }
        s
    }
}

/// Layout of a `bias-experiment` output directory.
pub struct BiasLayout {
    pub data: PathBuf,
    pub confounded_data: PathBuf,
    pub unbiased_classifier: PathBuf,
    pub biased_classifier: PathBuf,
    pub target_oracle: PathBuf,
    pub confounder_oracle: PathBuf,
    pub unbiased_explainer: PathBuf,
    pub biased_explainer: PathBuf,
}

impl BiasLayout {
    pub fn new(out: &Path) -> Self {
        Self {
            data: out.join("data"),
            confounded_data: out.join("data-confounded"),
            unbiased_classifier: out.join("classifier-unbiased"),
            biased_classifier: out.join("classifier-biased"),
            target_oracle: out.join("oracle-target"),
            confounder_oracle: out.join("oracle-confounder"),
            unbiased_explainer: out.join("explainer-unbiased"),
            biased_explainer: out.join("explainer-biased"),
        }
    }
}

/// Trains classifiers on unconfounded and fully confounded data, an
/// explainer for each on the unconfounded images, and compares how often
/// their counterfactuals flip the confounder.
pub fn bias_experiment(cfg: &Config, out: &Path) -> Result<(BiasComparison, RunManifest)> {
    let mut spec = cfg.synth_spec()?;
    spec.mode = CorrelationMode::Independent;
    let mut confounded = spec.clone();
    confounded.mode = CorrelationMode::FullyConfounded;
    confounded.seed = spec.seed.wrapping_add(1);
    let cc: ClassifierConfig = cfg.classifier_config()?;
    let tc = cfg.train_config()?;
    let floor: f64 = cfg.get("classifier.oracle_floor")?;
    let l = BiasLayout::new(out);
    run("bias-experiment", cfg, out, &[], |rec| {
        let ds = generate_synthetic(&spec)?;
        save_data(&ds, &l.data)?;
        let cds = generate_synthetic(&confounded)?;
        save_data(&cds, &l.confounded_data)?;

        let unbiased = train_reference_classifier(&ds, TARGET_ATTRIBUTE, &cc)?;
        unbiased.save(&l.unbiased_classifier)?;
        let biased = train_reference_classifier(&cds, TARGET_ATTRIBUTE, &cc)?;
        biased.save(&l.biased_classifier)?;
        let target_oracle = train_oracle(&ds, TARGET_ATTRIBUTE, &cc, floor)?;
        target_oracle.classifier.save(&l.target_oracle)?;
        let conf_oracle = train_oracle(&ds, CONFOUNDER_ATTRIBUTE, &cc, floor)?;
        conf_oracle.classifier.save(&l.confounder_oracle)?;

        let test = ds.split(Split::Test);
        let labels = test.attribute(TARGET_ATTRIBUTE)?;
        let queries = eval_subset(&ds, cfg)?;
        let conf_labels = queries.attribute(CONFOUNDER_ATTRIBUTE)?;
        let oracles = [(TARGET_ATTRIBUTE, &target_oracle), (CONFOUNDER_ATTRIBUTE, &conf_oracle)];
        let mut rows = Vec::new();
        for (name, clf, dir) in [
            ("biased", &biased, &l.biased_explainer),
            ("unbiased", &unbiased, &l.unbiased_explainer),
        ] {
            let outputs = TrainOutputs {
                metrics: Some(dir.join(METRICS_FILE)),
                checkpoints: Some(dir.join("checkpoints")),
            };
            log::info!("training the {name} explainer");
            let bundle = train_bundle(&ds, clf, &tc, &outputs)?;
            save_bundle(&bundle, &dir.join(BUNDLE_DIR))?;
            let summary = confounding_summary(&bundle, &conf_oracle, floor, &queries.images, &conf_labels)?;
            let fm = class_flip_matrix(
                &[(name, &bundle, clf)],
                &oracles,
                &[TARGET_ATTRIBUTE, CONFOUNDER_ATTRIBUTE],
                &queries.images,
            )?;
            let report = EvalReport {
                confounding: Some(summary.clone()),
                flip_matrix: Some(fm.clone()),
                ..EvalReport::new()
            };
            write_json_atomic(&dir.join(REPORT_FILE), &report)?;
            let post = predict_batched(clf, &test.images, 256)?;
            rows.push(BiasRow {
                explainer: name.into(),
                classifier_accuracy: accuracy(&post, &labels, 0.5),
                confounding: summary,
                flip_target: fm.values[0][0],
                flip_confounder: fm.values[0][1],
            });
        }
        let unbiased_row = rows.pop().expect("two rows");
        let biased_row = rows.pop().expect("two rows");
        let ratio = if unbiased_row.confounding.overall > 0.0 {
            biased_row.confounding.overall / unbiased_row.confounding.overall
        } else if biased_row.confounding.overall > 0.0 {
            f64::INFINITY
        } else {
            f64::NAN
        };
        let cmp = BiasComparison {
            biased: biased_row,
            unbiased: unbiased_row,
            ratio,
        };
        write_atomic(&out.join("comparison.csv"), cmp.to_csv().as_bytes())?;
        write_atomic(&out.join("comparison.txt"), cmp.table().as_bytes())?;
        for p in [
            &l.data,
            &l.confounded_data,
            &l.unbiased_classifier,
            &l.biased_classifier,
            &l.target_oracle,
            &l.confounder_oracle,
            &l.unbiased_explainer,
            &l.biased_explainer,
        ] {
            rec.output(p);
        }
        rec.output(&out.join("comparison.csv"));
        rec.output(&out.join("comparison.txt"));
        Ok(cmp)
    })
}

/// Runs `f` once per point of a sweep, in `run-NNN` subdirectories when the
/// config sweeps anything.
pub fn for_each_run<T>(cfg: &Config, out: &Path, mut f: impl FnMut(&Config, &Path) -> Result<T>) -> Result<Vec<T>> {
    if !cfg.is_sweep() {
        return Ok(vec![f(cfg, out)?]);
    }
    cfg.expand()
        .iter()
        .enumerate()
        .map(|(i, c)| f(c, &out.join(format!("run-{i:03}"))))
        .collect()
}
