//! Labeled image folders and the synthetic disc dataset.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::{imageops::FilterType, GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

/// Train/val/test proportions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1 }
    }
}

impl SplitFractions {
    /// Seeded assignment of `n` items to splits.
    pub fn assign(&self, n: usize, seed: u64) -> Result<Vec<Split>> {
        if !(self.train > 0.0 && self.val >= 0.0 && self.train + self.val <= 1.0) {
            return Err(Error::Config(format!("bad split fractions {self:?}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (n as f64 * self.train).round() as usize;
        let n_val = (n as f64 * self.val).round() as usize;
        let mut out = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            out[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        Ok(out)
    }
}

/// Images with binary attributes. Pixels are `[N, C, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageDataset {
    pub images: Tensor<f32>,
    pub filenames: Vec<String>,
    pub attribute_names: Vec<String>,
    /// `attributes[i][j]` is attribute `j` of image `i`.
    pub attributes: Vec<Vec<u8>>,
    pub splits: Vec<Split>,
    /// Continuous ground-truth factors (synthetic data only).
    pub factor_names: Vec<String>,
    pub factors: Vec<Vec<f64>>,
}

impl LabeledImageDataset {
    pub fn len(&self) -> usize {
        self.filenames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filenames.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.images.shape().len() != 4 || self.images.batch() != n {
            return Err(Error::Validation(format!(
                "{} filenames for images of shape {:?}",
                n,
                self.images.shape()
            )));
        }
        if self.attributes.len() != n || self.splits.len() != n {
            return Err(Error::Validation("per-image records do not match image count".into()));
        }
        for (i, row) in self.attributes.iter().enumerate() {
            if row.len() != self.attribute_names.len() {
                return Err(Error::Validation(format!("image {i} lacks attribute values")));
            }
            if row.iter().any(|&v| v > 1) {
                return Err(Error::Validation(format!("image {i} has a non-binary attribute")));
            }
        }
        if !self.factors.is_empty() && self.factors.len() != n {
            return Err(Error::Validation("factor rows do not match image count".into()));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("pixel values outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attribute_names.iter().position(|a| a == name).ok_or_else(|| {
            Error::Validation(format!(
                "unknown attribute `{name}`; valid attributes: {}",
                self.attribute_names.join(", ")
            ))
        })
    }

    pub fn attribute(&self, name: &str) -> Result<Vec<u8>> {
        let j = self.attribute_index(name)?;
        Ok(self.attributes.iter().map(|r| r[j]).collect())
    }

    pub fn factor(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .factor_names
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| Error::Validation(format!("unknown factor `{name}`")))?;
        Ok(self.factors.iter().map(|r| r[j]).collect())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// The items at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |v: &Vec<Vec<f64>>| {
            if v.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| v[i].clone()).collect()
            }
        };
        Self {
            images: self.images.select(idx),
            filenames: idx.iter().map(|&i| self.filenames[i].clone()).collect(),
            attribute_names: self.attribute_names.clone(),
            attributes: idx.iter().map(|&i| self.attributes[i].clone()).collect(),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
            factor_names: self.factor_names.clone(),
            factors: pick(&self.factors),
        }
    }

    pub fn split(&self, split: Split) -> Self {
        self.subset(&self.indices(split))
    }

    /// Writes `images/*.png`, `attributes.csv`, `splits.csv` and, when
    /// present, `factors.csv` under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        self.validate()?;
        let [c, h, w] = self.image_shape();
        fs::create_dir_all(root.join("images"))?;
        for (i, name) in self.filenames.iter().enumerate() {
            let item = &self.images.data()[i * c * h * w..][..c * h * w];
            let path = root.join("images").join(name);
            if c == 1 {
                let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    Luma([to_u8(item[y as usize * w + x as usize])])
                });
                img.save(&path)?;
            } else if c == 3 {
                let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    let p = y as usize * w + x as usize;
                    image::Rgb([to_u8(item[p]), to_u8(item[h * w + p]), to_u8(item[2 * h * w + p])])
                });
                img.save(&path)?;
            } else {
                return Err(Error::Unsupported(format!("saving {c}-channel images")));
            }
        }
        let mut wtr = csv::Writer::from_path(root.join("attributes.csv"))?;
        let mut header = vec!["filename".to_string()];
        header.extend(self.attribute_names.iter().cloned());
        wtr.write_record(&header)?;
        for (name, row) in self.filenames.iter().zip(&self.attributes) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        let mut wtr = csv::Writer::from_path(root.join("splits.csv"))?;
        wtr.write_record(["filename", "split"])?;
        for (name, s) in self.filenames.iter().zip(&self.splits) {
            wtr.write_record([name.as_str(), s.as_str()])?;
        }
        wtr.flush()?;
        if !self.factors.is_empty() {
            let mut wtr = csv::Writer::from_path(root.join("factors.csv"))?;
            let mut header = vec!["filename".to_string()];
            header.extend(self.factor_names.iter().cloned());
            wtr.write_record(&header)?;
            for (name, row) in self.filenames.iter().zip(&self.factors) {
                let mut rec = vec![name.clone()];
                rec.extend(row.iter().map(|v| v.to_string()));
                wtr.write_record(&rec)?;
            }
            wtr.flush()?;
        }
        Ok(())
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Options for [`load_dataset`].
#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Square side every image is resized to.
    pub size: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Unreadable images are errors rather than skipped with a warning.
    pub strict: bool,
    /// Used when no `splits.csv` sits next to the images.
    pub fractions: SplitFractions,
    pub seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            size: 32,
            channels: 1,
            strict: true,
            fractions: SplitFractions::default(),
            seed: 0,
        }
    }
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::load(path, e))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        rows.push((i + 2, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

/// Loads `<root>/images/*` labeled by the `filename,attr_1,...` table at
/// `attributes`.
pub fn load_dataset(root: &Path, attributes: &Path, opts: &LoadOptions) -> Result<LabeledImageDataset> {
    if opts.channels != 1 && opts.channels != 3 {
        return Err(Error::Config(format!("channels must be 1 or 3, got {}", opts.channels)));
    }
    let (header, rows) = read_table(attributes)?;
    if header.first().map(String::as_str) != Some("filename") || header.len() < 2 {
        return Err(Error::Validation(format!(
            "{}: header must be `filename,attr_1,...`",
            attributes.display()
        )));
    }
    if rows.is_empty() {
        return Err(Error::Validation(format!("{}: no rows", attributes.display())));
    }
    let names = header[1..].to_vec();
    let (s, c) = (opts.size, opts.channels);
    let mut pixels = Vec::with_capacity(rows.len() * c * s * s);
    let mut filenames = Vec::new();
    let mut attrs = Vec::new();
    for (line, rec) in rows {
        if rec.len() != header.len() {
            return Err(Error::Validation(format!(
                "{} row {line}: expected {} cells, got {}",
                attributes.display(),
                header.len(),
                rec.len()
            )));
        }
        let mut vals = Vec::with_capacity(names.len());
        for (cell, name) in rec[1..].iter().zip(&names) {
            match cell.as_str() {
                "0" => vals.push(0),
                "1" => vals.push(1),
                other => {
                    return Err(Error::Validation(format!(
                        "{} row {line}: attribute `{name}` has value `{other}`, expected 0 or 1",
                        attributes.display()
                    )))
                }
            }
        }
        let path = root.join("images").join(&rec[0]);
        let img = match image::open(&path) {
            Ok(img) => img,
            Err(e) if opts.strict => return Err(Error::load(&path, e)),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let img = if img.width() as usize != s || img.height() as usize != s {
            img.resize_exact(s as u32, s as u32, FilterType::Triangle)
        } else {
            img
        };
        if c == 1 {
            let g = img.to_luma8();
            pixels.extend(g.pixels().map(|p| p[0] as f32 / 255.0));
        } else {
            let rgb = img.to_rgb8();
            for ch in 0..3 {
                pixels.extend(rgb.pixels().map(|p| p[ch] as f32 / 255.0));
            }
        }
        filenames.push(rec[0].clone());
        attrs.push(vals);
    }
    if filenames.is_empty() {
        return Err(Error::Validation("no readable images".into()));
    }
    let n = filenames.len();
    let splits_path = root.join("splits.csv");
    let splits = if splits_path.exists() {
        let (_, rows) = read_table(&splits_path)?;
        let map: HashMap<String, String> = rows
            .into_iter()
            .filter_map(|(_, r)| (r.len() == 2).then(|| (r[0].clone(), r[1].clone())))
            .collect();
        filenames
            .iter()
            .map(|f| match map.get(f) {
                Some(s) => Split::parse(s),
                None => Err(Error::Validation(format!("splits.csv lacks `{f}`"))),
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        opts.fractions.assign(n, opts.seed)?
    };
    let factors_path = root.join("factors.csv");
    let (factor_names, factors) = if factors_path.exists() {
        let (header, rows) = read_table(&factors_path)?;
        let map: HashMap<String, Vec<f64>> = rows
            .into_iter()
            .map(|(line, r)| {
                let vals = r[1..]
                    .iter()
                    .map(|v| {
                        v.parse::<f64>().map_err(|_| {
                            Error::Validation(format!("factors.csv row {line}: `{v}` is not a number"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((r[0].clone(), vals))
            })
            .collect::<Result<_>>()?;
        let factors = filenames
            .iter()
            .map(|f| {
                map.get(f)
                    .cloned()
                    .ok_or_else(|| Error::Validation(format!("factors.csv lacks `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        (header[1..].to_vec(), factors)
    } else {
        (Vec::new(), Vec::new())
    };
    let ds = LabeledImageDataset {
        images: Tensor::from_vec(&[n, c, s, s], pixels)?,
        filenames,
        attribute_names: names,
        attributes: attrs,
        splits,
        factor_names,
        factors,
    };
    ds.validate()?;
    Ok(ds)
}

/// A continuous factor and the range it is sampled from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl FactorRange {
    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Uniform draw from the half above (`upper`) or below the midpoint,
    /// keeping `margin * (hi - lo)` clear of the midpoint.
    fn sample(&self, rng: &mut ChaCha8Rng, upper: bool, margin: f64) -> f64 {
        let gap = margin * (self.hi - self.lo);
        let mid = self.mid();
        if upper {
            rng.gen_range(mid + gap..=self.hi)
        } else {
            rng.gen_range(self.lo..=mid - gap)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationMode {
    Independent,
    FullyConfounded,
}

/// Recipe for the synthetic disc dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthFactorSpec {
    pub image_size: usize,
    /// Disc radius in pixels.
    pub target: FactorRange,
    /// Background intensity.
    pub confounder: FactorRange,
    pub mode: CorrelationMode,
    pub samples: usize,
    pub seed: u64,
    /// Exclusion band around each midpoint, as a fraction of the range.
    pub margin: f64,
    /// Maximum displacement of the disc centre from the image centre.
    pub jitter: f64,
    pub fractions: SplitFractions,
}

impl Default for SynthFactorSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            target: FactorRange {
                name: "radius".into(),
                lo: 4.0,
                hi: 12.0,
            },
            confounder: FactorRange {
                name: "background".into(),
                lo: 0.0,
                hi: 0.4,
            },
            mode: CorrelationMode::Independent,
            samples: 5000,
            seed: 0,
            margin: 0.05,
            jitter: 3.0,
            fractions: SplitFractions::default(),
        }
    }
}

impl SynthFactorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for f in [&self.target, &self.confounder] {
            if !(f.lo < f.hi) || !f.lo.is_finite() || !f.hi.is_finite() {
                return bad(format!("factor `{}` has degenerate range [{}, {}]", f.name, f.lo, f.hi));
            }
        }
        if self.confounder.lo < 0.0 || self.confounder.hi > 1.0 {
            return bad("background intensity must lie in [0, 1]".into());
        }
        if self.samples == 0 {
            return bad("sample count must be at least 1".into());
        }
        if self.image_size < 4 {
            return bad(format!("image size {} too small", self.image_size));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return bad(format!("margin {} outside [0, 0.5)", self.margin));
        }
        if self.jitter < 0.0 {
            return bad("jitter must be non-negative".into());
        }
        Ok(())
    }
}

pub const TARGET_ATTRIBUTE: &str = "target";
pub const CONFOUNDER_ATTRIBUTE: &str = "confounder";

const SUPERSAMPLE: usize = 4;

/// Antialiased disc of intensity 1 on a uniform background, quantized to
/// 8-bit levels so the image survives a PNG round trip exactly.
pub fn render_disc(size: usize, cx: f64, cy: f64, radius: f64, background: f64) -> Vec<f32> {
    let r2 = radius * radius;
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step - cx;
                    let py = y as f64 + (sy as f64 + 0.5) * step - cy;
                    if px * px + py * py <= r2 {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let v = background + cov * (1.0 - background);
            out.push(((v * 255.0).round() / 255.0) as f32);
        }
    }
    out
}

pub fn generate_synthetic(spec: &SynthFactorSpec) -> Result<LabeledImageDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.image_size;
    let centre = s as f64 / 2.0;
    let mut pixels = Vec::with_capacity(spec.samples * s * s);
    let mut attributes = Vec::new();
    let mut factors = Vec::new();
    for _ in 0..spec.samples {
        let t: bool = rng.gen();
        let c = match spec.mode {
            CorrelationMode::Independent => rng.gen(),
            CorrelationMode::FullyConfounded => t,
        };
        let radius = spec.target.sample(&mut rng, t, spec.margin);
        let background = spec.confounder.sample(&mut rng, c, spec.margin);
        let cx = centre + rng.gen_range(-spec.jitter..=spec.jitter);
        let cy = centre + rng.gen_range(-spec.jitter..=spec.jitter);
        pixels.extend(render_disc(s, cx, cy, radius, background));
        attributes.push(vec![t as u8, c as u8]);
        factors.push(vec![radius, background, cx, cy]);
    }
    let n = spec.samples;
    let ds = LabeledImageDataset {
        images: Tensor::from_vec(&[n, 1, s, s], pixels)?,
        filenames: (0..n).map(|i| format!("{i:06}.png")).collect(),
        attribute_names: vec![TARGET_ATTRIBUTE.into(), CONFOUNDER_ATTRIBUTE.into()],
        attributes,
        splits: spec.fractions.assign(n, spec.seed ^ 0x5eed)?,
        factor_names: vec![
            spec.target.name.clone(),
            spec.confounder.name.clone(),
            "center_x".into(),
            "center_y".into(),
        ],
        factors,
    };
    Ok(ds)
}

/// Result of [`measure_factor`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Estimated disc radius in pixels, 0 when nothing was found.
    pub radius: f64,
    pub detected: bool,
}

/// Disc radius from the soft foreground area, `sqrt(area / pi)`. The
/// background level is the median of the border pixels and foreground
/// coverage is measured against an intensity-1 disc.
pub fn measure_factor(image: &[f32], size: usize) -> Result<Measurement> {
    if image.len() != size * size || size < 2 {
        return Err(Error::Shape(format!(
            "expected a {size}x{size} single-channel image, got {} values",
            image.len()
        )));
    }
    let mut border: Vec<f64> = (0..size)
        .flat_map(|i| {
            [
                image[i],
                image[(size - 1) * size + i],
                image[i * size],
                image[i * size + size - 1],
            ]
        })
        .map(f64::from)
        .collect();
    border.sort_by(f64::total_cmp);
    let bg = border[border.len() / 2];
    let none = Measurement {
        radius: 0.0,
        detected: false,
    };
    if bg >= 1.0 - 1e-3 {
        return Ok(none);
    }
    let area: f64 = image
        .iter()
        .map(|&v| ((f64::from(v) - bg) / (1.0 - bg)).clamp(0.0, 1.0))
        .sum();
    if area < 1.0 {
        return Ok(none);
    }
    Ok(Measurement {
        radius: (area / std::f64::consts::PI).sqrt(),
        detected: true,
    })
}
