use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::vae::LatentEmbedding;
use crate::error::{Error, Result};
use crate::tape::{Tape, Tensor, Var};

/// Added to the per-dimension variance before the square root in the
/// variance hinge.
pub const VIC_STD_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 16.0,
            beta: 16.0,
            gamma: 3.0,
            lambda: 25.0,
            mu: 25.0,
            nu: 1.0,
        }
    }
}

impl LossWeights {
    pub fn inc_weight(&self) -> f64 {
        (self.alpha + self.beta + self.gamma) / 3.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub kl: f64,
    pub rec: f64,
    pub vic: f64,
    pub inc: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VicTerms {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    pub total: f64,
}

/// Initial latent means recorded per frame id. Entries are never overwritten.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: BTreeMap<u64, Vec<f64>>,
}

impl AnchorSet {
    /// Stores `mean` for `id` unless an anchor already exists. Returns whether it was stored.
    pub fn record(&mut self, id: u64, mean: &[f64]) -> bool {
        if self.anchors.contains_key(&id) {
            return false;
        }
        self.anchors.insert(id, mean.to_vec());
        true
    }

    pub fn get(&self, id: u64) -> Option<&[f64]> {
        self.anchors.get(&id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

pub fn loss_total(c: &LossComponents, w: &LossWeights) -> f64 {
    w.alpha * c.kl + w.beta * c.rec + w.gamma * c.vic + w.inc_weight() * c.inc
}

/// Mean over all elements of `0.5·(mean² + exp(logvar) − 1 − logvar)`.
pub(crate) fn kl_on(tape: &mut Tape, mean: Var, logvar: Var) -> Var {
    let m2 = tape.square(mean);
    let ev = tape.exp(logvar);
    let a = tape.add(m2, ev);
    let b = tape.sub(a, logvar);
    let c = tape.add_scalar(b, -1.0);
    let m = tape.mean(c);
    tape.scale(m, 0.5)
}

pub(crate) fn mse_on(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let sq = tape.square(d);
    tape.mean(sq)
}

fn centered(tape: &mut Tape, z: Var) -> Var {
    let m = tape.col_mean(z);
    let neg = tape.scale(m, -1.0);
    tape.add_row(z, neg)
}

fn variance_hinge(tape: &mut Tape, z: Var) -> Var {
    let n = tape.value(z).shape()[0] as f64;
    let c = centered(tape, z);
    let sq = tape.square(c);
    let var = tape.col_mean(sq);
    let var = tape.scale(var, n / (n - 1.0));
    let var = tape.add_scalar(var, VIC_STD_EPS);
    let sd = tape.sqrt(var);
    let neg = tape.scale(sd, -1.0);
    let gap = tape.add_scalar(neg, 1.0);
    let h = tape.relu(gap);
    tape.mean(h)
}

fn covariance_penalty(tape: &mut Tape, z: Var) -> Var {
    let (n, d) = (tape.value(z).shape()[0], tape.value(z).shape()[1]);
    let c = centered(tape, z);
    let ct = tape.transpose(c);
    let cov = tape.matmul(ct, c);
    let cov = tape.scale(cov, 1.0 / (n as f64 - 1.0));
    let mask = Tensor::from_vec(
        vec![d, d],
        (0..d * d)
            .map(|i| if i / d == i % d { 0.0 } else { 1.0 })
            .collect(),
    );
    let off = tape.mul_const(cov, mask);
    let sq = tape.square(off);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / d as f64)
}

/// (total, invariance, variance, covariance) for branches `za`, `zb` of shape `[N, L]`.
pub(crate) fn vic_on(tape: &mut Tape, za: Var, zb: Var, w: &LossWeights) -> [Var; 4] {
    let inv = mse_on(tape, za, zb);
    let va = variance_hinge(tape, za);
    let vb = variance_hinge(tape, zb);
    let var = tape.add(va, vb);
    let var = tape.scale(var, 0.5);
    let ca = covariance_penalty(tape, za);
    let cb = covariance_penalty(tape, zb);
    let cov = tape.add(ca, cb);
    let cov = tape.scale(cov, 0.5);
    let a = tape.scale(inv, w.lambda);
    let b = tape.scale(var, w.mu);
    let c = tape.scale(cov, w.nu);
    let ab = tape.add(a, b);
    let total = tape.add(ab, c);
    [total, inv, var, cov]
}

/// MSE between `mean` rows and `anchors` rows, over rows whose `mask` is 1.
/// Returns `None` when no row is anchored.
pub(crate) fn inc_on(tape: &mut Tape, mean: Var, anchors: Tensor, mask: &[bool]) -> Option<Var> {
    let (n, d) = (tape.value(mean).shape()[0], tape.value(mean).shape()[1]);
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return None;
    }
    let target = tape.leaf(anchors);
    let diff = tape.sub(mean, target);
    let m = Tensor::from_vec(
        vec![n, d],
        (0..n * d)
            .map(|i| if mask[i / d] { 1.0 } else { 0.0 })
            .collect(),
    );
    let masked = tape.mul_const(diff, m);
    let sq = tape.square(masked);
    let s = tape.sum(sq);
    Some(tape.scale(s, 1.0 / (count * d) as f64))
}

fn rows(latents: &[&LatentEmbedding], f: impl Fn(&LatentEmbedding) -> &[f64]) -> Result<Tensor> {
    let d = f(latents[0]).len();
    let mut data = Vec::with_capacity(latents.len() * d);
    for l in latents {
        if f(l).len() != d {
            return Err(Error::invalid("latents of differing dimension"));
        }
        data.extend_from_slice(f(l));
    }
    Ok(Tensor::from_vec(vec![latents.len(), d], data))
}

pub fn loss_kl(latent: &LatentEmbedding) -> f64 {
    let mut tape = Tape::new();
    let d = latent.mean.len();
    let m = tape.leaf(Tensor::from_vec(vec![1, d], latent.mean.clone()));
    let lv = tape.leaf(Tensor::from_vec(vec![1, d], latent.logvar.clone()));
    let k = kl_on(&mut tape, m, lv);
    tape.value(k).item()
}

pub fn loss_rec(y: &[f64], target: &[f64]) -> Result<f64> {
    if y.len() != target.len() || y.is_empty() {
        return Err(Error::invalid(format!(
            "reconstruction has {} values, target {}",
            y.len(),
            target.len()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_vec(vec![y.len()], y.to_vec()));
    let b = tape.leaf(Tensor::from_vec(vec![y.len()], target.to_vec()));
    let l = mse_on(&mut tape, a, b);
    Ok(tape.value(l).item())
}

/// Invariance/variance/covariance regularizer over `(latent, reference)` pairs.
pub fn loss_vic(batch: &[(LatentEmbedding, LatentEmbedding)], w: &LossWeights) -> Result<VicTerms> {
    if batch.len() < 2 {
        return Err(Error::invalid("VIC loss needs a batch of at least 2"));
    }
    let a: Vec<&LatentEmbedding> = batch.iter().map(|p| &p.0).collect();
    let b: Vec<&LatentEmbedding> = batch.iter().map(|p| &p.1).collect();
    let mut tape = Tape::new();
    let za = tape.leaf(rows(&a, |l| &l.mean)?);
    let zb = tape.leaf(rows(&b, |l| &l.mean)?);
    if tape.value(za).shape() != tape.value(zb).shape() {
        return Err(Error::invalid("pair members differ in dimension"));
    }
    let [total, inv, var, cov] = vic_on(&mut tape, za, zb, w);
    Ok(VicTerms {
        invariance: tape.value(inv).item(),
        variance: tape.value(var).item(),
        covariance: tape.value(cov).item(),
        total: tape.value(total).item(),
    })
}

/// Drift of `latent` from the anchor stored for `frame_id`; 0 without an anchor.
pub fn loss_inc(latent: &LatentEmbedding, anchors: &AnchorSet, frame_id: u64) -> Result<f64> {
    let Some(anchor) = anchors.get(frame_id) else {
        return Ok(0.0);
    };
    if anchor.len() != latent.mean.len() {
        return Err(Error::invalid("anchor dimension differs from latent"));
    }
    let d = anchor.len();
    let mut tape = Tape::new();
    let m = tape.leaf(Tensor::from_vec(vec![1, d], latent.mean.clone()));
    let l = inc_on(
        &mut tape,
        m,
        Tensor::from_vec(vec![1, d], anchor.to_vec()),
        &[true],
    )
    .unwrap();
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(mean: Vec<f64>, logvar: Vec<f64>) -> LatentEmbedding {
        LatentEmbedding {
            mean,
            logvar,
            t: 0.0,
            terrain_gt: None,
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(loss_kl(&lat(vec![0.0; 4], vec![0.0; 4])), 0.0);
        assert!((loss_kl(&lat(vec![1.0; 4], vec![0.0; 4])) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rec_examples() {
        assert_eq!(loss_rec(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((loss_rec(&[2.0, 3.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(loss_rec(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn inc_examples() {
        let mut a = AnchorSet::default();
        let z = lat(vec![1.0, -1.0, 0.5], vec![0.0; 3]);
        assert_eq!(loss_inc(&z, &a, 7).unwrap(), 0.0);
        assert!(a.record(7, &z.mean));
        assert_eq!(loss_inc(&z, &a, 7).unwrap(), 0.0);
        assert!(!a.record(7, &[9.0, 9.0, 9.0]));
        let shifted = lat(z.mean.iter().map(|v| v + 2.0).collect(), vec![0.0; 3]);
        assert!((loss_inc(&shifted, &a, 7).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(loss_total(&LossComponents::default(), &w), 0.0);
        assert_eq!(
            loss_total(
                &LossComponents {
                    kl: 1.0,
                    ..Default::default()
                },
                &w
            ),
            16.0
        );
        let inc = loss_total(
            &LossComponents {
                inc: 1.0,
                ..Default::default()
            },
            &w,
        );
        assert!((inc - 35.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn vic_zero_at_ideal_batch() {
        // ±√2 columns: unbiased variance 2 (std ≥ 1), orthogonal centered columns
        let s = 2f64.sqrt();
        let rows = [[s, s], [s, -s], [-s, s], [-s, -s]];
        let batch: Vec<_> = rows
            .iter()
            .map(|r| (lat(r.to_vec(), vec![0.0; 2]), lat(r.to_vec(), vec![0.0; 2])))
            .collect();
        let v = loss_vic(&batch, &LossWeights::default()).unwrap();
        assert_eq!(v.invariance, 0.0);
        assert_eq!(v.variance, 0.0);
        assert!(v.covariance.abs() < 1e-24);
    }

    #[test]
    fn vic_constant_dim_hits_hinge() {
        let s = 2f64.sqrt();
        // dim 1 constant; dim 0 has std ≥ 1
        let rows = [[s, 3.0], [-s, 3.0], [s, 3.0], [-s, 3.0]];
        let batch: Vec<_> = rows
            .iter()
            .map(|r| (lat(r.to_vec(), vec![0.0; 2]), lat(r.to_vec(), vec![0.0; 2])))
            .collect();
        let w = LossWeights::default();
        let v = loss_vic(&batch, &w).unwrap();
        let expected = (1.0 - VIC_STD_EPS.sqrt()) / 2.0;
        assert!((v.variance - expected).abs() < 1e-12);
        assert!((v.total - w.mu * expected).abs() < 1e-10);
        assert!(loss_vic(&batch[..1], &w).is_err());
    }
}
