use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::losses::{inc_on, kl_on, mse_on, vic_on, AnchorSet, LossComponents, LossWeights};
use super::sync::SensorFrame;
use super::vae::{batch_tensors, bind, decode_on, encode_batch, encode_on, sample_on, VaeParams};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VaeOptimizer {
    GradientDescent,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Online learning rate = `lr · online_lr_scale`.
    pub online_lr_scale: f64,
    pub batch: usize,
    pub seed: u64,
    /// Pairing horizon H in seconds.
    pub horizon: f64,
    /// Share of replayed old frames in an online batch.
    pub old_fraction: f64,
    pub weights: LossWeights,
    pub optimizer: VaeOptimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 13,
            lr: 1e-3,
            online_lr_scale: 0.01,
            batch: 128,
            seed: 0,
            horizon: 1.6,
            old_fraction: 0.2,
            weights: LossWeights::default(),
            optimizer: VaeOptimizer::GradientDescent,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::config("VAE batch must be ≥ 2"));
        }
        if !(self.lr > 0.0) || !(self.online_lr_scale > 0.0) {
            return Err(Error::config("VAE learning rates must be > 0"));
        }
        if !(0.0..1.0).contains(&self.old_fraction) {
            return Err(Error::config("old_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Reference frame index for each frame: its predecessor when it ended less
/// than `horizon` seconds earlier, otherwise the frame itself.
pub fn pair_references(frames: &[SensorFrame], horizon: f64) -> Vec<usize> {
    (0..frames.len())
        .map(|i| {
            if i > 0 {
                let dt = frames[i].t_end - frames[i - 1].t_end;
                if dt > 0.0 && dt < horizon {
                    return i - 1;
                }
            }
            i
        })
        .collect()
}

/// Training examples for one step: frames, their pair references, and anchors.
pub(crate) struct Batch<'a> {
    pub frames: Vec<&'a SensorFrame>,
    pub refs: Vec<&'a SensorFrame>,
    pub anchors: Vec<Option<&'a [f64]>>,
}

struct Forward {
    params: Vec<Var>,
    total: Var,
    parts: [Option<Var>; 4],
}

fn forward(
    tape: &mut Tape,
    params: &VaeParams,
    batch: &Batch,
    w: &LossWeights,
    eps: Option<Tensor>,
) -> Result<Forward> {
    let n = batch.frames.len();
    let l = params.config.latent;
    let p = bind(tape, params);
    let (x, last) = batch_tensors(params, &batch.frames)?;
    let xv = tape.leaf(x);
    let (mean, logvar) = encode_on(tape, &p, xv);
    let mut terms: Vec<Var> = Vec::new();
    let mut parts = [None; 4];
    if w.alpha != 0.0 {
        let kl = kl_on(tape, mean, logvar);
        parts[0] = Some(kl);
        terms.push(tape.scale(kl, w.alpha));
    }
    if w.beta != 0.0 {
        let z = match eps {
            Some(e) => sample_on(tape, mean, logvar, e),
            None => mean,
        };
        let y = decode_on(tape, &p, z);
        let target = tape.leaf(last);
        let rec = mse_on(tape, y, target);
        parts[1] = Some(rec);
        terms.push(tape.scale(rec, w.beta));
    }
    if w.gamma != 0.0 && n >= 2 {
        let (xr, _) = batch_tensors(params, &batch.refs)?;
        let xrv = tape.leaf(xr);
        let (ref_mean, _) = encode_on(tape, &p, xrv);
        let [vic, ..] = vic_on(tape, mean, ref_mean, w);
        parts[2] = Some(vic);
        terms.push(tape.scale(vic, w.gamma));
    }
    if w.inc_weight() != 0.0 {
        let mask: Vec<bool> = batch.anchors.iter().map(Option::is_some).collect();
        let mut target = vec![0.0; n * l];
        for (i, a) in batch.anchors.iter().enumerate() {
            if let Some(a) = a {
                target[i * l..(i + 1) * l].copy_from_slice(a);
            }
        }
        if let Some(inc) = inc_on(tape, mean, Tensor::from_vec(vec![n, l], target), &mask) {
            parts[3] = Some(inc);
            terms.push(tape.scale(inc, w.inc_weight()));
        }
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => tape.leaf(Tensor::scalar(0.0)),
    };
    for &t in terms.iter().skip(1) {
        total = tape.add(total, t);
    }
    Ok(Forward {
        params: p,
        total,
        parts,
    })
}

fn components(tape: &Tape, parts: &[Option<Var>; 4]) -> LossComponents {
    let v = |o: &Option<Var>| o.map(|x| tape.value(x).item()).unwrap_or(0.0);
    LossComponents {
        kl: v(&parts[0]),
        rec: v(&parts[1]),
        vic: v(&parts[2]),
        inc: v(&parts[3]),
    }
}

fn noise(shape: [usize; 2], seed: u64, step: u64) -> Tensor {
    let mut r = rng::stream(seed, "reparam", step);
    Tensor::from_vec(
        shape.to_vec(),
        (0..shape[0] * shape[1])
            .map(|_| StandardNormal.sample(&mut r))
            .collect(),
    )
}

/// Loss (deterministic: the posterior mean is decoded) and its components.
pub(crate) fn batch_loss(
    params: &VaeParams,
    batch: &Batch,
    w: &LossWeights,
) -> Result<(f64, LossComponents)> {
    let mut tape = Tape::new();
    let f = forward(&mut tape, params, batch, w, None)?;
    Ok((tape.value(f.total).item(), components(&tape, &f.parts)))
}

fn make_batch<'a>(
    frames: &'a [SensorFrame],
    refs: &[usize],
    anchors: &'a AnchorSet,
    idx: &[usize],
) -> Batch<'a> {
    Batch {
        frames: idx.iter().map(|&i| &frames[i]).collect(),
        refs: idx.iter().map(|&i| &frames[refs[i]]).collect(),
        anchors: idx.iter().map(|&i| anchors.get(frames[i].id)).collect(),
    }
}

/// Whole-dataset loss with the posterior mean decoded, averaged over chunks.
pub fn dataset_loss(
    params: &VaeParams,
    frames: &[SensorFrame],
    anchors: &AnchorSet,
    cfg: &TrainConfig,
) -> Result<LossComponents> {
    let refs = pair_references(frames, cfg.horizon);
    let idx: Vec<usize> = (0..frames.len()).collect();
    let mut acc = LossComponents::default();
    let mut n = 0.0;
    for chunk in idx.chunks(cfg.batch) {
        if chunk.len() < 2 {
            continue;
        }
        let (_, c) = batch_loss(
            params,
            &make_batch(frames, &refs, anchors, chunk),
            &cfg.weights,
        )?;
        acc.kl += c.kl;
        acc.rec += c.rec;
        acc.vic += c.vic;
        acc.inc += c.inc;
        n += 1.0;
    }
    if n > 0.0 {
        acc.kl /= n;
        acc.rec /= n;
        acc.vic /= n;
        acc.inc /= n;
    }
    Ok(acc)
}

/// Largest parameter-wise relative error between reverse-mode gradients of
/// the weighted loss and central finite differences with step `eps`.
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(
    params: &VaeParams,
    frames: &[SensorFrame],
    anchors: &AnchorSet,
    weights: &LossWeights,
    eps: f64,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::invalid("eps must be in [1e-6, 1e-3]"));
    }
    let refs = pair_references(frames, 1.6);
    let idx: Vec<usize> = (0..frames.len()).collect();
    let batch = make_batch(frames, &refs, anchors, &idx);
    let noise = noise([frames.len(), params.config.latent], 17, 0);
    let eval = |p: &VaeParams| -> Result<f64> {
        let mut tape = Tape::new();
        let f = forward(&mut tape, p, &batch, weights, Some(noise.clone()))?;
        Ok(tape.value(f.total).item())
    };
    let mut tape = Tape::new();
    let f = forward(&mut tape, params, &batch, weights, Some(noise.clone()))?;
    let grads = tape.backward(f.total);
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (ti, v) in f.params.iter().enumerate() {
        let g = grads.get_or_zeros(*v, &params.tensors[ti]);
        for k in 0..params.tensors[ti].len() {
            let orig = params.tensors[ti].data()[k];
            probe.tensors[ti].data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe.tensors[ti].data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe.tensors[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = g.data()[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

struct Stepper {
    kind: VaeOptimizer,
    lr: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Stepper {
    fn new(kind: VaeOptimizer, lr: f64, params: &VaeParams) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            kind,
            lr,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut VaeParams, grads: &[Tensor]) {
        self.t += 1;
        let (b1, b2, e): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensors[i].data_mut();
            match self.kind {
                VaeOptimizer::GradientDescent => {
                    for (x, gv) in p.iter_mut().zip(g.data()) {
                        *x -= self.lr * gv;
                    }
                }
                VaeOptimizer::Adam => {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    let c1 = 1.0 - b1.powi(self.t);
                    let c2 = 1.0 - b2.powi(self.t);
                    for k in 0..p.len() {
                        let gv = g.data()[k];
                        m[k] = b1 * m[k] + (1.0 - b1) * gv;
                        v[k] = b2 * v[k] + (1.0 - b2) * gv * gv;
                        p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + e);
                    }
                }
            }
        }
    }
}

fn train_step(
    params: &mut VaeParams,
    stepper: &mut Stepper,
    batch: &Batch,
    w: &LossWeights,
    seed: u64,
    step: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let eps = noise([batch.frames.len(), params.config.latent], seed, step);
    let f = forward(&mut tape, params, batch, w, Some(eps))?;
    let loss = tape.value(f.total).item();
    if !loss.is_finite() {
        return Err(Error::Internal(format!(
            "non-finite VAE loss at step {step}"
        )));
    }
    let grads = tape.backward(f.total);
    let g: Vec<Tensor> = f
        .params
        .iter()
        .zip(&params.tensors)
        .map(|(v, t)| grads.get_or_zeros(*v, t))
        .collect();
    stepper.step(params, &g);
    Ok(loss)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Whole-dataset loss before training, then after every epoch.
    pub dataset_losses: Vec<f64>,
    pub steps: usize,
}

/// Stores the current posterior mean of every frame that has no anchor yet.
pub fn record_anchors(
    anchors: &mut AnchorSet,
    frames: &[SensorFrame],
    params: &VaeParams,
) -> Result<usize> {
    let latents = encode_batch(frames, params)?;
    Ok(frames
        .iter()
        .zip(&latents)
        .filter(|(f, l)| anchors.record(f.id, &l.mean))
        .count())
}

/// Base phase: `epochs` shuffled passes with the loss-increment term off.
/// Anchors for every frame are recorded after the last epoch.
pub fn vae_train_base(
    frames: &[SensorFrame],
    params: &VaeParams,
    cfg: &TrainConfig,
) -> Result<(VaeParams, AnchorSet, TrainReport)> {
    cfg.validate()?;
    if frames.len() < 2 {
        return Err(Error::invalid("base training needs at least 2 frames"));
    }
    let mut p = params.clone();
    let refs = pair_references(frames, cfg.horizon);
    let empty = AnchorSet::default();
    let total = |c: LossComponents| super::losses::loss_total(&c, &cfg.weights);
    let mut report = TrainReport {
        dataset_losses: vec![total(dataset_loss(&p, frames, &empty, cfg)?)],
        steps: 0,
    };
    let mut stepper = Stepper::new(cfg.optimizer, cfg.lr, &p);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "vae-epoch", epoch as u64));
        for chunk in order.chunks(cfg.batch).filter(|c| c.len() >= 2) {
            let batch = make_batch(frames, &refs, &empty, chunk);
            train_step(
                &mut p,
                &mut stepper,
                &batch,
                &cfg.weights,
                cfg.seed,
                report.steps as u64,
            )?;
            report.steps += 1;
        }
        let l = total(dataset_loss(&p, frames, &empty, cfg)?);
        debug!("vae epoch {epoch}: dataset loss {l:.5}");
        report.dataset_losses.push(l);
    }
    let mut anchors = AnchorSet::default();
    record_anchors(&mut anchors, frames, &p)?;
    Ok((p, anchors, report))
}

/// Index plan for one online epoch: every new frame once, in shuffled
/// order, each batch topped up with randomly drawn old frames so that old
/// frames make up `old_fraction` of it.
pub fn online_batches(
    n_new: usize,
    n_old: usize,
    batch: usize,
    old_fraction: f64,
    seed: u64,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n_old_full = if n_old == 0 {
        0
    } else {
        (old_fraction * batch as f64).round() as usize
    };
    let new_per = (batch - n_old_full.min(batch - 1)).max(1);
    let mut order: Vec<usize> = (0..n_new).collect();
    let mut r = rng::stream(seed, "vae-online", 0);
    order.shuffle(&mut r);
    let mut old_pool: Vec<usize> = (0..n_old).collect();
    order
        .chunks(new_per)
        .map(|chunk| {
            let want = if n_old == 0 {
                0
            } else {
                ((chunk.len() as f64) * old_fraction / (1.0 - old_fraction)).round() as usize
            };
            let take = want.min(n_old);
            // partial Fisher-Yates draw without replacement
            for k in 0..take {
                let j = r.random_range(k..n_old);
                old_pool.swap(k, j);
            }
            (chunk.to_vec(), old_pool[..take].to_vec())
        })
        .collect()
}

/// One online epoch at the reduced learning rate. Old frames carry their
/// anchors, which activates the loss-increment term for them only.
pub fn vae_train_online(
    new_frames: &[SensorFrame],
    old_frames: &[SensorFrame],
    params: &VaeParams,
    anchors: &AnchorSet,
    cfg: &TrainConfig,
) -> Result<(VaeParams, TrainReport)> {
    cfg.validate()?;
    let mut p = params.clone();
    let mut report = TrainReport::default();
    if new_frames.is_empty() {
        return Ok((p, report));
    }
    if let Some(f) = old_frames.iter().find(|f| anchors.get(f.id).is_none()) {
        return Err(Error::invalid(format!("old frame {} has no anchor", f.id)));
    }
    let new_refs = pair_references(new_frames, cfg.horizon);
    let old_refs = pair_references(old_frames, cfg.horizon);
    let none = AnchorSet::default();
    let mut stepper = Stepper::new(cfg.optimizer, cfg.lr * cfg.online_lr_scale, &p);
    let seed = rng::derive(cfg.seed, "vae-online-run", new_frames[0].id);
    for (new_idx, old_idx) in online_batches(
        new_frames.len(),
        old_frames.len(),
        cfg.batch,
        cfg.old_fraction,
        seed,
    ) {
        let mut b = make_batch(new_frames, &new_refs, &none, &new_idx);
        let o = make_batch(old_frames, &old_refs, anchors, &old_idx);
        b.frames.extend(o.frames);
        b.refs.extend(o.refs);
        b.anchors.extend(o.anchors);
        if b.frames.len() < 2 {
            continue;
        }
        let l = train_step(
            &mut p,
            &mut stepper,
            &b,
            &cfg.weights,
            seed,
            report.steps as u64,
        )?;
        report.dataset_losses.push(l);
        report.steps += 1;
    }
    Ok((p, report))
}
