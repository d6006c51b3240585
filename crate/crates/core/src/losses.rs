//! Training losses, both as plain scalar functions and as graph nodes.

use serde::{Deserialize, Serialize};

use crate::conditioning::POSTERIOR_EPS;
use crate::error::{Error, Result};
use crate::graph::{bernoulli_kl, Graph, Var};
use crate::tensor::{Element, Tensor};

/// Weights of the generator objective. The cycle term shares `rec`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cgan: f64,
    pub f: f64,
    pub rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cgan: 1.0,
            f: 1.0,
            rec: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cgan", self.cgan), ("f", self.f), ("rec", self.rec)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which way round the compatibility KL is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(target || actual)`.
    #[default]
    TargetFirst,
    /// `KL(actual || target)`.
    ActualFirst,
}

/// Unweighted values of the generator loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cgan: f64,
    pub kl: f64,
    pub rec: f64,
    pub cyc: f64,
}

fn nonempty(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::Shape(format!("{what}: empty batch")));
    }
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// `mean(max(0, 1 - real)) + mean(max(0, 1 + fake))`.
pub fn hinge_d_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    nonempty(real.len(), "hinge_d_loss real")?;
    nonempty(fake.len(), "hinge_d_loss fake")?;
    Ok(mean(real.iter().map(|&s| (1.0 - s).max(0.0)), real.len())
        + mean(fake.iter().map(|&s| (1.0 + s).max(0.0)), fake.len()))
}

/// `-mean(fake)`.
pub fn hinge_g_loss(fake: &[f64]) -> Result<f64> {
    nonempty(fake.len(), "hinge_g_loss")?;
    Ok(-mean(fake.iter().copied(), fake.len()))
}

/// Bernoulli KL between posteriors, both clamped to `[eps, 1 - eps]` first.
pub fn kl_compatibility(target: f64, actual: f64, dir: KlDirection) -> f64 {
    let c = |v: f64| v.clamp(POSTERIOR_EPS, 1.0 - POSTERIOR_EPS);
    let (p, q) = (c(target), c(actual));
    match dir {
        KlDirection::TargetFirst => bernoulli_kl(p, q),
        KlDirection::ActualFirst => bernoulli_kl(q, p),
    }
}

/// Mean absolute pixel difference.
pub fn reconstruction_loss<T: Element>(x: &Tensor<T>, x_rec: &Tensor<T>) -> Result<f64> {
    if x.shape() != x_rec.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), x_rec.shape())));
    }
    nonempty(x.numel(), "reconstruction_loss")?;
    Ok(mean(
        x.data().iter().zip(x_rec.data()).map(|(a, b)| (a.to_f64() - b.to_f64()).abs()),
        x.numel(),
    ))
}

/// Same arithmetic as [`reconstruction_loss`], applied to the cycled image.
pub fn cycle_loss<T: Element>(x: &Tensor<T>, x_cyc: &Tensor<T>) -> Result<f64> {
    reconstruction_loss(x, x_cyc)
}

pub fn total_generator_objective(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.cgan * terms.cgan + w.f * terms.kl + w.rec * (terms.rec + terms.cyc))
}

/// Graph form of [`hinge_d_loss`].
pub fn hinge_d<T: Element>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let one = T::ONE;
    let r = g.scale(real, -one);
    let r = g.add_scalar(r, one);
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.add_scalar(fake, one);
    let f = g.relu(f);
    let f = g.mean(f);
    g.add(r, f)
}

/// Graph form of [`hinge_g_loss`].
pub fn hinge_g<T: Element>(g: &mut Graph<T>, fake: Var) -> Var {
    let m = g.mean(fake);
    g.scale(m, -T::ONE)
}

/// Graph form of the batch-mean [`kl_compatibility`] against fixed targets.
pub fn kl_term<T: Element>(g: &mut Graph<T>, actual: Var, targets: &[f64], dir: KlDirection) -> Result<Var> {
    let t: Vec<T> = targets.iter().map(|&v| T::from_f64(v)).collect();
    g.bernoulli_kl(actual, &t, T::from_f64(POSTERIOR_EPS), dir == KlDirection::ActualFirst)
}

/// [`kl_term`] from classifier logits rather than posteriors.
pub fn kl_term_logits<T: Element>(g: &mut Graph<T>, logits: Var, targets: &[f64], dir: KlDirection) -> Result<Var> {
    let t: Vec<T> = targets.iter().map(|&v| T::from_f64(v)).collect();
    g.bernoulli_kl_logits(logits, &t, T::from_f64(POSTERIOR_EPS), dir == KlDirection::ActualFirst)
}

/// Graph nodes of the four generator terms.
#[derive(Clone, Copy, Debug)]
pub struct TermVars {
    pub cgan: Var,
    pub kl: Var,
    pub rec: Var,
    pub cyc: Var,
}

impl TermVars {
    pub fn values<T: Element>(&self, g: &Graph<T>) -> LossTerms {
        LossTerms {
            cgan: g.scalar(self.cgan).to_f64(),
            kl: g.scalar(self.kl).to_f64(),
            rec: g.scalar(self.rec).to_f64(),
            cyc: g.scalar(self.cyc).to_f64(),
        }
    }
}

/// Graph form of [`total_generator_objective`].
pub fn total<T: Element>(g: &mut Graph<T>, t: &TermVars, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let a = g.scale(t.cgan, T::from_f64(w.cgan));
    let b = g.scale(t.kl, T::from_f64(w.f));
    let rc = g.add(t.rec, t.cyc)?;
    let c = g.scale(rc, T::from_f64(w.rec));
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_d_loss(&[2.0], &[-2.0]).unwrap(), 0.0);
        assert_eq!(hinge_d_loss(&[0.0], &[0.0]).unwrap(), 2.0);
        assert_eq!(hinge_d_loss(&[-2.0], &[2.0]).unwrap(), 6.0);
        assert!(hinge_d_loss(&[], &[1.0]).is_err());
        assert_eq!(hinge_g_loss(&[1.0, 3.0]).unwrap(), -2.0);
        assert_eq!(hinge_g_loss(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn kl_examples() {
        let d = KlDirection::TargetFirst;
        assert_eq!(kl_compatibility(0.3, 0.3, d), 0.0);
        assert!((kl_compatibility(0.5, 0.25, d) - 0.143_841_036_225_890_46).abs() < 1e-9);
        assert!((kl_compatibility(0.9, 0.1, d) - 1.757_779_661_868_975_5).abs() < 1e-9);
        assert!(kl_compatibility(1.0, 0.0, d).is_finite());
    }

    #[test]
    fn kl_grid_nonnegative_and_zero_on_diagonal() {
        for i in 1..100 {
            for j in 1..100 {
                let (p, q) = (i as f64 / 100.0, j as f64 / 100.0);
                for d in [KlDirection::TargetFirst, KlDirection::ActualFirst] {
                    let v = kl_compatibility(p, q, d);
                    if i == j {
                        assert_eq!(v, 0.0);
                    } else {
                        assert!(v > 0.0, "kl({p},{q}) = {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn l1_examples() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let y = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&x, &y).unwrap(), 1.0);
        assert_eq!(cycle_loss(&y, &x).unwrap(), 1.0);
        assert!(reconstruction_loss(&x, &Tensor::zeros(&[1, 1, 2, 3])).is_err());
    }

    #[test]
    fn total_examples() {
        let ones = LossTerms {
            cgan: 1.0,
            kl: 1.0,
            rec: 1.0,
            cyc: 1.0,
        };
        assert_eq!(total_generator_objective(&ones, &LossWeights::default()).unwrap(), 202.0);
        let zero = LossWeights {
            cgan: 0.0,
            f: 0.0,
            rec: 0.0,
        };
        assert_eq!(total_generator_objective(&ones, &zero).unwrap(), 0.0);
        let neg = LossWeights { cgan: -1.0, ..zero };
        assert!(matches!(total_generator_objective(&ones, &neg), Err(Error::Config(_))));
    }

    #[test]
    fn graph_losses_match_scalar_forms_and_gradients() {
        let mut g = Graph::<f64>::new();
        let real = g.leaf(Tensor::from_vec(&[3, 1], vec![0.5, 2.0, -0.3]).unwrap(), true);
        let fake = g.leaf(Tensor::from_vec(&[2, 1], vec![-0.5, 1.5]).unwrap(), true);
        let d = hinge_d(&mut g, real, fake).unwrap();
        assert!((g.scalar(d) - hinge_d_loss(&[0.5, 2.0, -0.3], &[-0.5, 1.5]).unwrap()).abs() < 1e-12);
        let gl = hinge_g(&mut g, fake);
        assert_eq!(g.scalar(gl), -0.5);
        let grads = g.backward(gl).unwrap();
        assert_eq!(grads.get(fake).unwrap().data(), &[-0.5, -0.5]);

        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = (0..4).map(|_| g.leaf(Tensor::scalar(1.0), true)).collect();
        let tv = TermVars {
            cgan: vars[0],
            kl: vars[1],
            rec: vars[2],
            cyc: vars[3],
        };
        let w = LossWeights {
            cgan: 0.5,
            f: 2.0,
            rec: 100.0,
        };
        let t = total(&mut g, &tv, &w).unwrap();
        assert_eq!(g.scalar(t), 202.5);
        let grads = g.backward(t).unwrap();
        let got: Vec<f64> = vars.iter().map(|&v| grads.get(v).unwrap().data()[0]).collect();
        assert_eq!(got, vec![0.5, 2.0, 100.0, 100.0]);
    }

    #[test]
    fn graph_kl_matches_scalar() {
        for dir in [KlDirection::TargetFirst, KlDirection::ActualFirst] {
            let mut g = Graph::<f64>::new();
            let q = g.leaf(Tensor::from_vec(&[2], vec![0.25, 0.1]).unwrap(), true);
            let k = kl_term(&mut g, q, &[0.5, 0.9], dir).unwrap();
            let want = (kl_compatibility(0.5, 0.25, dir) + kl_compatibility(0.9, 0.1, dir)) / 2.0;
            assert!((g.scalar(k) - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn hinge_d_permutation_invariant(
            real in proptest::collection::vec(-3.0f64..3.0, 1..16),
            fake in proptest::collection::vec(-3.0f64..3.0, 1..16),
            rot in 0usize..16,
        ) {
            let a = hinge_d_loss(&real, &fake).unwrap();
            let mut r2 = real.clone();
            r2.rotate_left(rot % real.len());
            let mut f2 = fake.clone();
            f2.reverse();
            let b = hinge_d_loss(&r2, &f2).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn l1_symmetric(a in proptest::collection::vec(0.0f64..1.0, 4), b in proptest::collection::vec(0.0f64..1.0, 4)) {
            let ta = Tensor::from_vec(&[4], a).unwrap();
            let tb = Tensor::from_vec(&[4], b).unwrap();
            prop_assert_eq!(reconstruction_loss(&ta, &tb).unwrap(), reconstruction_loss(&tb, &ta).unwrap());
        }
    }
}
