//! Flat `key = value` configuration with dotted namespaces.
//!
//! A value written as `[a, b, c]` is a sweep: [`Config::expand`] turns it into
//! one run per element (cartesian product over every swept key).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use exaggerator_core::blackbox::ClassifierConfig;
use exaggerator_core::losses::{KlDirection, LossWeights};
use exaggerator_core::synthdata::{CorrelationMode, FactorRange, SplitFractions, SynthFactorSpec};
use exaggerator_core::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Scalar(String),
    List(Vec<String>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Scalar(s) => f.write_str(s),
            Value::List(v) => write!(f, "[{}]", v.join(", ")),
        }
    }
}

fn parse_value(raw: &str) -> Result<Value> {
    let raw = raw.trim();
    if let Some(inner) = raw.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| anyhow!("unterminated list `{raw}`"))?;
        let items: Vec<String> = inner
            .split(',')
            .map(|s| unquote(s.trim()).to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if items.is_empty() {
            bail!("empty list `{raw}`");
        }
        return Ok(Value::List(items));
    }
    Ok(Value::Scalar(unquote(raw).to_string()))
}

fn unquote(s: &str) -> &str {
    s.strip_prefix('"').and_then(|t| t.strip_suffix('"')).unwrap_or(s)
}

/// Every recognised key with its default.
fn defaults() -> Vec<(&'static str, String)> {
    let t = TrainConfig::default();
    let d = SynthFactorSpec::default();
    let c = ClassifierConfig::default();
    let channels = c.channels.map(|v| v.to_string()).join(",");
    vec![
        ("data.image_size", d.image_size.to_string()),
        ("data.channels", "1".into()),
        ("data.samples", d.samples.to_string()),
        ("data.seed", d.seed.to_string()),
        ("data.mode", "independent".into()),
        ("data.radius_min", d.target.lo.to_string()),
        ("data.radius_max", d.target.hi.to_string()),
        ("data.background_min", d.confounder.lo.to_string()),
        ("data.background_max", d.confounder.hi.to_string()),
        ("data.margin", d.margin.to_string()),
        ("data.jitter", d.jitter.to_string()),
        ("data.train_fraction", d.fractions.train.to_string()),
        ("data.val_fraction", d.fractions.val.to_string()),
        ("classifier.kind", "regular".into()),
        ("classifier.attribute", "target".into()),
        ("classifier.confounder", "confounder".into()),
        ("classifier.channels", channels),
        ("classifier.epochs", c.epochs.to_string()),
        ("classifier.batch_size", c.batch_size.to_string()),
        ("classifier.lr", c.lr.to_string()),
        ("classifier.seed", c.seed.to_string()),
        ("classifier.oracle_floor", "0.95".into()),
        ("train.delta", t.delta.to_string()),
        ("train.lambda_cgan", t.weights.cgan.to_string()),
        ("train.lambda_f", t.weights.f.to_string()),
        ("train.lambda_rec", t.weights.rec.to_string()),
        ("train.kl_direction", "target_first".into()),
        ("train.lr_g", t.lr_g.to_string()),
        ("train.lr_d", t.lr_d.to_string()),
        ("train.beta1", t.beta1.to_string()),
        ("train.beta2", t.beta2.to_string()),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.d_steps", t.d_steps.to_string()),
        ("train.steps", t.steps.to_string()),
        ("train.seed", t.seed.to_string()),
        ("train.checkpoint_interval", t.checkpoint_interval.to_string()),
        ("train.divergence_threshold", t.divergence_threshold.to_string()),
        ("train.calibration_batches", t.calibration_batches.to_string()),
        ("train.base_channels", t.base_channels.to_string()),
        ("train.down_steps", t.down_steps.to_string()),
        ("train.gen_blocks", t.gen_blocks.to_string()),
        ("train.disc_channels", t.disc_channels.to_string()),
        ("train.disc_blocks", t.disc_blocks.to_string()),
        ("train.spectral_norm", t.spectral_norm.to_string()),
        ("eval.split", "test".into()),
        ("eval.queries", "200".into()),
        ("eval.seed", "0".into()),
        ("eval.embedder_seed", "0".into()),
        ("eval.closeness_deltas", "0.2,0.4,0.6".into()),
        ("eval.verification_threshold", "0.5".into()),
        ("eval.flip_fractions", "0,0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5".into()),
    ]
}

pub fn known_keys() -> Vec<&'static str> {
    defaults().into_iter().map(|(k, _)| k).collect()
}

/// Keys holding seeds, recorded separately in run manifests.
pub const SEED_KEYS: [&str; 5] = ["data.seed", "classifier.seed", "train.seed", "eval.seed", "eval.embedder_seed"];

/// Explicitly set keys layered over the defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, Value>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", i + 1))?;
            let k = k.trim();
            cfg.insert(k, parse_value(v).with_context(|| format!("line {}", i + 1))?)
                .with_context(|| format!("line {}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    fn insert(&mut self, key: &str, value: Value) -> Result<()> {
        if !known_keys().contains(&key) {
            bail!("unknown config key `{key}`");
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{assignment}` is not `key=value`"))?;
        self.insert(k.trim(), parse_value(v)?)
    }

    pub fn set_value(&mut self, key: &str, value: impl ToString) -> Result<()> {
        self.insert(key, Value::Scalar(value.to_string()))
    }

    /// One config per point of the sweep grid, in key order.
    pub fn expand(&self) -> Vec<Config> {
        let mut runs = vec![Config::default()];
        for (k, v) in &self.values {
            let choices = match v {
                Value::Scalar(s) => vec![s.clone()],
                Value::List(items) => items.clone(),
            };
            runs = runs
                .into_iter()
                .flat_map(|base| {
                    choices.iter().map(move |c| {
                        let mut next = base.clone();
                        next.values.insert(k.clone(), Value::Scalar(c.clone()));
                        next
                    })
                })
                .collect();
        }
        runs
    }

    pub fn is_sweep(&self) -> bool {
        self.values.values().any(|v| matches!(v, Value::List(_)))
    }

    /// Every key with its effective value.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        defaults()
            .into_iter()
            .map(|(k, d)| {
                let v = self.values.get(k).map(Value::to_string).unwrap_or(d);
                (k.to_string(), v)
            })
            .collect()
    }

    pub fn get_str(&self, key: &str) -> Result<String> {
        match self.values.get(key) {
            Some(Value::Scalar(s)) => Ok(s.clone()),
            Some(Value::List(_)) => bail!("`{key}` is a sweep; expand the config first"),
            None => defaults()
                .into_iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| v)
                .ok_or_else(|| anyhow!("unknown config key `{key}`")),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let s = self.get_str(key)?;
        s.parse::<T>().map_err(|e| anyhow!("`{key}` = `{s}`: {e}"))
    }

    /// Comma-separated list value.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        self.get_str(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| anyhow!("`{key}` item `{s}`: {e}")))
            .collect()
    }

    pub fn synth_spec(&self) -> Result<SynthFactorSpec> {
        let mode = match self.get_str("data.mode")?.as_str() {
            "independent" => CorrelationMode::Independent,
            "fully-confounded" | "fully_confounded" => CorrelationMode::FullyConfounded,
            other => bail!("`data.mode` = `{other}`: expected independent or fully-confounded"),
        };
        Ok(SynthFactorSpec {
            image_size: self.get("data.image_size")?,
            target: FactorRange {
                name: "radius".into(),
                lo: self.get("data.radius_min")?,
                hi: self.get("data.radius_max")?,
            },
            confounder: FactorRange {
                name: "background".into(),
                lo: self.get("data.background_min")?,
                hi: self.get("data.background_max")?,
            },
            mode,
            samples: self.get("data.samples")?,
            seed: self.get("data.seed")?,
            margin: self.get("data.margin")?,
            jitter: self.get("data.jitter")?,
            fractions: self.split_fractions()?,
        })
    }

    pub fn split_fractions(&self) -> Result<SplitFractions> {
        Ok(SplitFractions {
            train: self.get("data.train_fraction")?,
            val: self.get("data.val_fraction")?,
        })
    }

    pub fn classifier_config(&self) -> Result<ClassifierConfig> {
        let ch: Vec<usize> = self.get_list("classifier.channels")?;
        let channels: [usize; 3] = ch
            .try_into()
            .map_err(|v: Vec<usize>| anyhow!("`classifier.channels` needs 3 widths, got {}", v.len()))?;
        Ok(ClassifierConfig {
            channels,
            epochs: self.get("classifier.epochs")?,
            batch_size: self.get("classifier.batch_size")?,
            lr: self.get("classifier.lr")?,
            seed: self.get("classifier.seed")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let kl_direction = match self.get_str("train.kl_direction")?.as_str() {
            "target_first" => KlDirection::TargetFirst,
            "actual_first" => KlDirection::ActualFirst,
            other => bail!("`train.kl_direction` = `{other}`: expected target_first or actual_first"),
        };
        let cfg = TrainConfig {
            delta: self.get("train.delta")?,
            weights: LossWeights {
                cgan: self.get("train.lambda_cgan")?,
                f: self.get("train.lambda_f")?,
                rec: self.get("train.lambda_rec")?,
            },
            kl_direction,
            lr_g: self.get("train.lr_g")?,
            lr_d: self.get("train.lr_d")?,
            beta1: self.get("train.beta1")?,
            beta2: self.get("train.beta2")?,
            batch_size: self.get("train.batch_size")?,
            d_steps: self.get("train.d_steps")?,
            steps: self.get("train.steps")?,
            seed: self.get("train.seed")?,
            checkpoint_interval: self.get("train.checkpoint_interval")?,
            divergence_threshold: self.get("train.divergence_threshold")?,
            calibration_batches: self.get("train.calibration_batches")?,
            base_channels: self.get("train.base_channels")?,
            down_steps: self.get("train.down_steps")?,
            gen_blocks: self.get("train.gen_blocks")?,
            disc_channels: self.get("train.disc_channels")?,
            disc_blocks: self.get("train.disc_blocks")?,
            spectral_norm: self.get("train.spectral_norm")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_into_core_configs() {
        let c = Config::default();
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
        assert_eq!(c.synth_spec().unwrap(), SynthFactorSpec::default());
        assert_eq!(c.classifier_config().unwrap(), ClassifierConfig::default());
    }

    #[test]
    fn parse_and_override() {
        let mut c = Config::parse("# comment\ntrain.delta = 0.25\n\ndata.mode = \"fully-confounded\" # trailing\n").unwrap();
        assert_eq!(c.get::<f64>("train.delta").unwrap(), 0.25);
        assert_eq!(c.synth_spec().unwrap().mode, CorrelationMode::FullyConfounded);
        c.set("train.delta=0.5").unwrap();
        assert_eq!(c.train_config().unwrap().delta, 0.5);
        assert!(c.set("train.detla=0.5").unwrap_err().to_string().contains("unknown config key"));
        assert!(Config::parse("train.delta 0.1").is_err());
    }

    #[test]
    fn sweeps_expand_to_the_grid() {
        let c = Config::parse("train.lambda_rec = [10, 100]\ntrain.seed = [1, 2, 3]\ntrain.delta = 0.2").unwrap();
        assert!(c.is_sweep());
        let runs = c.expand();
        assert_eq!(runs.len(), 6);
        let pairs: Vec<(String, String)> = runs
            .iter()
            .map(|r| (r.get_str("train.lambda_rec").unwrap(), r.get_str("train.seed").unwrap()))
            .collect();
        assert_eq!(pairs[0], ("10".into(), "1".into()));
        assert_eq!(pairs[5], ("100".into(), "3".into()));
        assert!(runs.iter().all(|r| r.get_str("train.delta").unwrap() == "0.2" && !r.is_sweep()));
        assert!(c.get_str("train.seed").is_err());
    }

    #[test]
    fn resolved_lists_every_key() {
        let c = Config::parse("train.steps = 7").unwrap();
        let r = c.resolved();
        assert_eq!(r.len(), known_keys().len());
        assert_eq!(r["train.steps"], "7");
        assert_eq!(r["train.delta"], "0.1");
    }
}
