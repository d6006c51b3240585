//! Posterior binning: turns a classifier posterior plus a requested shift into
//! the discrete condition fed to the generator, and back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to target posteriors so log terms stay finite.
pub const POSTERIOR_EPS: f64 = 1e-4;

/// Step size `delta` and the `floor(1 / delta)` equal bins it induces on `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    delta: f64,
    bins: usize,
}

/// Index of a condition bin, `0..bins`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BinIndex(pub usize);

impl ConditionSpec {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
        }
        // 1/0.1 is 9.999999999999998 in binary floating point; absorb that.
        let bins = (1.0 / delta + 1e-9).floor() as usize;
        if bins < 2 {
            return Err(Error::Config(format!(
                "delta {delta} gives {bins} bin(s); at least 2 are needed"
            )));
        }
        Ok(Self { delta, bins })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn last(&self) -> BinIndex {
        BinIndex(self.bins - 1)
    }

    /// Bin containing posterior `p`; bins are `[k/N, (k+1)/N)` with the last
    /// one closed.
    pub fn bin_index(&self, p: f64) -> Result<BinIndex> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!("posterior {p} outside [0, 1]")));
        }
        let k = (p * self.bins as f64).floor() as usize;
        Ok(BinIndex(k.min(self.bins - 1)))
    }

    /// The condition `c_f(x, delta)`: bin of `f(x) + delta`, clamped into `[0, 1]`.
    pub fn shift_condition(&self, f_x: f64, delta: f64) -> BinIndex {
        let p = (f_x + delta).clamp(0.0, 1.0);
        let p = if p.is_nan() { 0.0 } else { p };
        self.bin_index(p).expect("clamped into range")
    }

    /// Posterior a sample generated at bin `k` should reach: the bin centre.
    pub fn bin_target_posterior(&self, k: BinIndex) -> Result<f64> {
        self.check(k)?;
        let c = (k.0 as f64 + 0.5) / self.bins as f64;
        Ok(c.clamp(POSTERIOR_EPS, 1.0 - POSTERIOR_EPS))
    }

    pub fn check(&self, k: BinIndex) -> Result<()> {
        if k.0 >= self.bins {
            return Err(Error::Contract(format!(
                "bin {} outside [0, {}]",
                k.0,
                self.bins - 1
            )));
        }
        Ok(())
    }

    pub fn all_bins(&self) -> impl Iterator<Item = BinIndex> {
        (0..self.bins).map(BinIndex)
    }
}
