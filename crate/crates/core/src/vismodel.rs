//! Trainable visual head over frozen patch features: a two-layer per-patch
//! decoder with batch normalization, reference features of the smooth
//! terrain, cosine predictions and the alignment loss.

use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::replay::{self, FeatureBuffer, ReplayConfig};
use crate::rng;
use crate::scoring::rescaled_cosine;
use crate::supervision::SupervisionMask;
use crate::synthworld::PatchFeatureImage;
use crate::tape::{norm, Gradients, Tape, Tensor, Var, COSINE_EPS};

/// Which prediction head sits on top of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Cosine against the reference features, rescaled to `[0, 1]`.
    Cosine,
    /// Ablation: a linear + sigmoid regression head trained with plain MSE.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub head: HeadKind,
}

impl DecoderConfig {
    pub fn new(in_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim: 64,
            batch_norm: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            head: HeadKind::Cosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::config("decoder dimensions must be > 0"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return Err(Error::config(
                "batch-norm momentum must be in (0, 1] and eps > 0",
            ));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let (i, c) = (self.in_dim, self.out_dim);
        let mut s = vec![
            vec![c, i],
            vec![c],
            vec![c],
            vec![c],
            vec![c, c],
            vec![c],
            vec![c],
            vec![c],
        ];
        if self.head == HeadKind::Direct {
            s.extend([vec![1, c], vec![1]]);
        }
        s
    }
}

pub const PARAM_NAMES: [&str; 10] = [
    "l1.w",
    "l1.b",
    "bn1.gamma",
    "bn1.beta",
    "l2.w",
    "l2.b",
    "bn2.gamma",
    "bn2.beta",
    "head.w",
    "head.b",
];
pub const RUNNING_NAMES: [&str; 4] = ["bn1.mean", "bn1.var", "bn2.mean", "bn2.var"];

/// Learnable tensors plus batch-norm running statistics, kept apart so
/// weight decay and optimizers never touch the latter.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub tensors: Vec<Tensor>,
    pub running: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them.
    Train,
    /// Normalize with running statistics.
    Eval,
}

fn fresh_running(c: usize) -> Vec<Tensor> {
    vec![
        Tensor::zeros(&[c]),
        Tensor::full(&[c], 1.0),
        Tensor::zeros(&[c]),
        Tensor::full(&[c], 1.0),
    ]
}

impl DecoderParams {
    /// Uniform(−1/√fan_in, 1/√fan_in) linear weights and biases, unit BN scale.
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "decoder-init", 0);
        let tensors = config
            .shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                match i {
                    2 | 6 => Tensor::full(&shape, 1.0),
                    3 | 7 => Tensor::zeros(&shape),
                    _ => {
                        let fan_in = if i < 2 { config.in_dim } else { config.out_dim };
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        Tensor::from_vec(
                            shape,
                            (0..n).map(|_| r.random_range(-bound..bound)).collect(),
                        )
                    }
                }
            })
            .collect();
        Ok(Self {
            config,
            tensors,
            running: fresh_running(config.out_dim),
        })
    }

    /// Identity weights, zero biases, unit BN scale. Needs `in_dim == out_dim`.
    pub fn identity(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        if config.in_dim != config.out_dim {
            return Err(Error::config("identity decoder needs in_dim == out_dim"));
        }
        let c = config.out_dim;
        let eye = Tensor::from_vec(
            vec![c, c],
            (0..c * c)
                .map(|k| if k / c == k % c { 1.0 } else { 0.0 })
                .collect(),
        );
        let tensors = config
            .shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| match i {
                0 | 4 => eye.clone(),
                2 | 6 => Tensor::full(&shape, 1.0),
                _ => Tensor::zeros(&shape),
            })
            .collect();
        Ok(Self {
            config,
            tensors,
            running: fresh_running(c),
        })
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .chain(&self.running)
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(&str, &Tensor)> = PARAM_NAMES
            .iter()
            .copied()
            .zip(&self.tensors)
            .chain(RUNNING_NAMES.iter().copied().zip(&self.running))
            .collect();
        write_checkpoint(path, "decoder", &self.config, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, mut tensors): (DecoderConfig, _) = read_checkpoint(path, "decoder")?;
        config.validate()?;
        let shapes = config.shapes();
        let c = config.out_dim;
        let ok = tensors.len() == shapes.len() + 4
            && tensors
                .iter()
                .zip(&shapes)
                .all(|((_, t), s)| t.shape() == s.as_slice())
            && tensors[shapes.len()..]
                .iter()
                .all(|(_, t)| t.shape() == [c]);
        if !ok {
            return Err(Error::invalid(format!(
                "{}: tensor shapes do not match the decoder config",
                path.display()
            )));
        }
        let running = tensors
            .split_off(shapes.len())
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        Ok(Self {
            config,
            tensors: tensors.into_iter().map(|(_, t)| t).collect(),
            running,
        })
    }

    /// Folds batch statistics (mean, unbiased variance) into the running ones.
    pub fn update_running(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) {
        let m = self.config.bn_momentum;
        for (layer, (mean, var)) in stats.iter().enumerate() {
            for (r, v) in self.running[2 * layer].data_mut().iter_mut().zip(mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in self.running[2 * layer + 1].data_mut().iter_mut().zip(var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }
}

pub(crate) fn bind(tape: &mut Tape, params: &DecoderParams) -> Vec<Var> {
    params
        .tensors
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect()
}

fn batch_norm(
    tape: &mut Tape,
    h: Var,
    gamma: Var,
    beta: Var,
    running: (&Tensor, &Tensor),
    mode: BnMode,
    eps: f64,
    stats: &mut Vec<(Vec<f64>, Vec<f64>)>,
) -> Var {
    let normed = match mode {
        BnMode::Train => {
            let n = tape.value(h).shape()[0];
            let mean = tape.col_mean(h);
            let neg = tape.scale(mean, -1.0);
            let centered = tape.add_row(h, neg);
            let sq = tape.square(centered);
            let var = tape.col_mean(sq);
            let shifted = tape.add_scalar(var, eps);
            let sd = tape.sqrt(shifted);
            let inv = tape.recip(sd);
            let unbiased = if n > 1 {
                n as f64 / (n - 1) as f64
            } else {
                1.0
            };
            stats.push((
                tape.value(mean).data().to_vec(),
                tape.value(var)
                    .data()
                    .iter()
                    .map(|v| v * unbiased)
                    .collect(),
            ));
            tape.mul_row(centered, inv)
        }
        BnMode::Eval => {
            let neg = tape.leaf(Tensor::from_vec(
                running.0.shape().to_vec(),
                running.0.data().iter().map(|m| -m).collect(),
            ));
            let inv = tape.leaf(Tensor::from_vec(
                running.1.shape().to_vec(),
                running
                    .1
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + eps).sqrt())
                    .collect(),
            ));
            let centered = tape.add_row(h, neg);
            tape.mul_row(centered, inv)
        }
    };
    let scaled = tape.mul_row(normed, gamma);
    tape.add_row(scaled, beta)
}

/// Decoder features `[N, C]` for backbone features `[N, C_b]`, plus the
/// batch statistics of both BN layers in train mode.
pub(crate) fn forward_on(
    tape: &mut Tape,
    p: &[Var],
    params: &DecoderParams,
    x: Var,
    mode: BnMode,
) -> (Var, Vec<(Vec<f64>, Vec<f64>)>) {
    let cfg = &params.config;
    let mut stats = Vec::new();
    let h = tape.linear(x, p[0], p[1]);
    let h = if cfg.batch_norm {
        batch_norm(
            tape,
            h,
            p[2],
            p[3],
            (&params.running[0], &params.running[1]),
            mode,
            cfg.bn_eps,
            &mut stats,
        )
    } else {
        h
    };
    let h = tape.relu(h);
    let h = tape.linear(h, p[4], p[5]);
    let h = if cfg.batch_norm {
        batch_norm(
            tape,
            h,
            p[6],
            p[7],
            (&params.running[2], &params.running[3]),
            mode,
            cfg.bn_eps,
            &mut stats,
        )
    } else {
        h
    };
    (h, stats)
}

/// Direct-regression head: sigmoid(w·F + b) as `[N]`.
pub(crate) fn direct_head_on(tape: &mut Tape, p: &[Var], f: Var) -> Var {
    let n = tape.value(f).shape()[0];
    let z = tape.linear(f, p[8], p[9]);
    let z = tape.reshape(z, &[n]);
    let neg = tape.scale(z, -1.0);
    let e = tape.exp(neg);
    let d = tape.add_scalar(e, 1.0);
    tape.recip(d)
}

fn check_dim(params: &DecoderParams, dim: usize) -> Result<()> {
    if dim != params.config.in_dim {
        return Err(Error::invalid(format!(
            "features are {dim}-dimensional, decoder expects {}",
            params.config.in_dim
        )));
    }
    Ok(())
}

/// Eval-mode decoder outputs for rows of backbone features.
pub fn decode_rows(rows: &[f64], params: &DecoderParams) -> Result<Vec<f64>> {
    let d = params.config.in_dim;
    if rows.len() % d != 0 {
        return Err(Error::invalid(
            "feature buffer length is not a multiple of the input dimension",
        ));
    }
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let p = bind(&mut tape, params);
    let x = tape.leaf(Tensor::from_vec(vec![rows.len() / d, d], rows.to_vec()));
    let (f, _) = forward_on(&mut tape, &p, params, x, BnMode::Eval);
    Ok(tape.value(f).data().to_vec())
}

/// Per-pixel decoder features, row-major `rows × cols × dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.dim..(idx + 1) * self.dim]
    }
}

/// Bilinear resampling of a `rows × cols × dim` grid by an integer factor.
/// Pixel centers are aligned; samples beyond the outer centers clamp.
pub fn upsample_bilinear(
    values: &[f64],
    rows: usize,
    cols: usize,
    dim: usize,
    factor: usize,
) -> Vec<f64> {
    if factor == 1 {
        return values.to_vec();
    }
    let (oh, ow) = (rows * factor, cols * factor);
    let src =
        |o: usize, n: usize| ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let mut out = Vec::with_capacity(oh * ow * dim);
    for i in 0..oh {
        let y = src(i, rows);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(rows - 1);
        for j in 0..ow {
            let x = src(j, cols);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(cols - 1);
            let at = |r: usize, c: usize, k: usize| values[(r * cols + c) * dim + k];
            for k in 0..dim {
                let top = at(y0, x0, k) * (1.0 - fx) + at(y0, x1, k) * fx;
                let bottom = at(y1, x0, k) * (1.0 - fx) + at(y1, x1, k) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Decoder applied per patch in eval mode, then upsampled by `factor`
/// (1 keeps the patch grid).
pub fn extract(
    image: &PatchFeatureImage,
    params: &DecoderParams,
    factor: usize,
) -> Result<FeatureMap> {
    check_dim(params, image.dim)?;
    if factor == 0 || image.features.len() != image.len() * image.dim {
        return Err(Error::invalid(
            "image buffer does not match its shape, or factor is 0",
        ));
    }
    let f = decode_rows(&image.features, params)?;
    let dim = params.config.out_dim;
    Ok(FeatureMap {
        rows: image.rows * factor,
        cols: image.cols * factor,
        dim,
        values: upsample_bilinear(&f, image.rows, image.cols, dim, factor),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFeatures {
    pub mean_feature: Vec<f64>,
    pub n_images: usize,
    pub n_subsampled: usize,
}

pub const REFERENCE_SAMPLES: usize = 100;

/// Mean decoder feature over a seeded subsample of the reference terrain's
/// patches across `images`. Falls back to sampling with replacement when
/// fewer than [`REFERENCE_SAMPLES`] patches are available.
pub fn compute_reference(
    images: &[PatchFeatureImage],
    terrain: usize,
    params: &DecoderParams,
    seed: u64,
) -> Result<ReferenceFeatures> {
    if images.is_empty() {
        return Err(Error::invalid("no reference images"));
    }
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        check_dim(params, img.dim)?;
        pool.extend(
            img.terrain_gt
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == terrain)
                .map(|(k, _)| (i, k)),
        );
    }
    if pool.is_empty() {
        return Err(Error::invalid(format!(
            "reference images contain no patch of terrain {terrain}"
        )));
    }
    let mut r = rng::stream(seed, "reference-subsample", 0);
    let picks: Vec<usize> = if pool.len() >= REFERENCE_SAMPLES {
        sample(&mut r, pool.len(), REFERENCE_SAMPLES).into_vec()
    } else {
        warn!(
            "only {} reference patches, sampling with replacement",
            pool.len()
        );
        (0..REFERENCE_SAMPLES)
            .map(|_| r.random_range(0..pool.len()))
            .collect()
    };
    let rows: Vec<f64> = picks
        .iter()
        .flat_map(|&k| images[pool[k].0].feature(pool[k].1).iter().copied())
        .collect();
    let f = decode_rows(&rows, params)?;
    let c = params.config.out_dim;
    let mut mean = vec![0.0; c];
    for row in f.chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= REFERENCE_SAMPLES as f64);
    Ok(ReferenceFeatures {
        mean_feature: mean,
        n_images: images.len(),
        n_subsampled: REFERENCE_SAMPLES,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMap {
    pub rows: usize,
    pub cols: usize,
    /// Rescaled scores in `[0, 1]`.
    pub values: Vec<f64>,
    /// Raw cosines (head output for the direct head).
    pub raw: Vec<f64>,
    /// Pixels whose feature norm was too small to score.
    pub degenerate: Vec<bool>,
}

/// Rescaled cosine of every pixel against the reference features.
/// Near-zero pixels score 0.5 and are flagged.
pub fn predict(f: &FeatureMap, reference: &ReferenceFeatures) -> Result<PredictionMap> {
    if reference.mean_feature.len() != f.dim {
        return Err(Error::invalid(
            "feature map and reference differ in dimension",
        ));
    }
    if norm(&reference.mean_feature) < COSINE_EPS {
        return Err(Error::DegenerateVector(norm(&reference.mean_feature)));
    }
    let n = f.len();
    let (mut values, mut raw, mut degenerate) =
        (Vec::with_capacity(n), Vec::with_capacity(n), vec![false; n]);
    for i in 0..n {
        match rescaled_cosine(f.pixel(i), &reference.mean_feature) {
            Ok(v) => {
                values.push(v);
                raw.push(2.0 * v - 1.0);
            }
            Err(_) => {
                values.push(0.5);
                raw.push(0.0);
                degenerate[i] = true;
            }
        }
    }
    Ok(PredictionMap {
        rows: f.rows,
        cols: f.cols,
        values,
        raw,
        degenerate,
    })
}

/// Patch-grid prediction for one image with whichever head the decoder has.
pub fn predict_image(
    image: &PatchFeatureImage,
    params: &DecoderParams,
    reference: &ReferenceFeatures,
) -> Result<PredictionMap> {
    let f = extract(image, params, 1)?;
    match params.config.head {
        HeadKind::Cosine => predict(&f, reference),
        HeadKind::Direct => {
            let mut tape = Tape::new();
            let p = bind(&mut tape, params);
            let x = tape.leaf(Tensor::from_vec(vec![f.len(), f.dim], f.values));
            let y = direct_head_on(&mut tape, &p, x);
            let values = tape.value(y).data().to_vec();
            Ok(PredictionMap {
                rows: f.rows,
                cols: f.cols,
                raw: values.clone(),
                degenerate: vec![false; values.len()],
                values,
            })
        }
    }
}

/// Masked MSE between rescaled predictions and supervision. `None` when the
/// mask has no valid pixel (the step skips the term).
pub fn loss_align(
    prediction: &PredictionMap,
    supervision: &SupervisionMask,
) -> Result<Option<f64>> {
    if prediction.values.len() != supervision.values.len() {
        return Err(Error::invalid("prediction and supervision differ in size"));
    }
    let n = supervision.n_valid();
    if n == 0 {
        return Ok(None);
    }
    let sum: f64 = (0..supervision.values.len())
        .filter(|&i| supervision.valid[i])
        .map(|i| (prediction.values[i] - supervision.values[i]).powi(2))
        .sum();
    Ok(Some(sum / n as f64))
}

/// Masked MSE on the tape. `pred` is `[N]` in `[0, 1]` space.
pub(crate) fn masked_mse_on(
    tape: &mut Tape,
    pred: Var,
    targets: &[f64],
    valid: &[bool],
) -> Option<Var> {
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return None;
    }
    let t = tape.leaf(Tensor::from_vec(vec![targets.len()], targets.to_vec()));
    let diff = tape.sub(pred, t);
    let sq = tape.square(diff);
    let mask = Tensor::from_vec(
        vec![valid.len()],
        valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    );
    let masked = tape.mul_const(sq, mask);
    let s = tape.sum(masked);
    Some(tape.scale(s, 1.0 / n_valid as f64))
}

/// Rescaled-score predictions `[N]` for decoder features `[N, C]`.
pub(crate) fn head_on(
    tape: &mut Tape,
    p: &[Var],
    params: &DecoderParams,
    f: Var,
    reference: &[f64],
) -> Var {
    match params.config.head {
        HeadKind::Cosine => {
            let cos = tape.row_cosine(f, reference);
            let half = tape.scale(cos, 0.5);
            tape.add_scalar(half, 0.5)
        }
        HeadKind::Direct => direct_head_on(tape, p, f),
    }
}

/// Flattened training batch: backbone features with per-row targets.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualBatch {
    pub x: Tensor,
    pub targets: Vec<f64>,
    pub valid: Vec<bool>,
}

impl VisualBatch {
    pub fn from_images(items: &[(PatchFeatureImage, SupervisionMask)]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::invalid("empty visual batch"));
        };
        let dim = first.0.dim;
        let (mut x, mut targets, mut valid) = (Vec::new(), Vec::new(), Vec::new());
        for (img, sup) in items {
            if img.dim != dim || sup.values.len() != img.len() {
                return Err(Error::invalid("image and supervision shapes disagree"));
            }
            x.extend_from_slice(&img.features);
            targets.extend_from_slice(&sup.values);
            valid.extend_from_slice(&sup.valid);
        }
        Ok(Self {
            x: Tensor::from_vec(vec![targets.len(), dim], x),
            targets,
            valid,
        })
    }
}

pub(crate) struct VisualForward {
    pub params: Vec<Var>,
    pub total: Var,
    pub align: Option<Var>,
    pub replay: Option<Var>,
    pub stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// `align + weight · replay` on one tape. Either term may be absent.
pub(crate) fn visual_forward(
    tape: &mut Tape,
    params: &DecoderParams,
    batch: &VisualBatch,
    reference: &[f64],
    replay: Option<&FeatureBuffer>,
    replay_weight: f64,
) -> VisualForward {
    let p = bind(tape, params);
    let x = tape.leaf(batch.x.clone());
    let (f, stats) = forward_on(tape, &p, params, x, BnMode::Train);
    let pred = head_on(tape, &p, params, f, reference);
    let align = masked_mse_on(tape, pred, &batch.targets, &batch.valid);
    let replay_term = replay.and_then(|b| replay::replay_on(tape, &p, params, b));
    let total = match (align, replay_term) {
        (Some(a), Some(r)) => {
            let w = tape.scale(r, replay_weight);
            tape.add(a, w)
        }
        (Some(a), None) => a,
        (None, Some(r)) => tape.scale(r, replay_weight),
        (None, None) => tape.leaf(Tensor::scalar(0.0)),
    };
    VisualForward {
        params: p,
        total,
        align,
        replay: replay_term,
        stats,
    }
}

fn gradients(grads: &Gradients, vars: &[Var], params: &DecoderParams) -> Vec<Tensor> {
    vars.iter()
        .zip(&params.tensors)
        .map(|(v, t)| grads.get_or_zeros(*v, t))
        .collect()
}

/// Largest relative error between reverse-mode gradients of
/// `align + weight · replay` (train-mode BN) and central differences.
pub fn visual_grad_check(
    params: &DecoderParams,
    batch: &VisualBatch,
    reference: &[f64],
    replay: Option<&FeatureBuffer>,
    replay_weight: f64,
    eps: f64,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::invalid("eps must be in [1e-6, 1e-3]"));
    }
    check_dim(params, batch.x.shape()[1])?;
    let eval = |p: &DecoderParams| {
        let mut tape = Tape::new();
        let f = visual_forward(&mut tape, p, batch, reference, replay, replay_weight);
        tape.value(f.total).item()
    };
    let mut tape = Tape::new();
    let f = visual_forward(&mut tape, params, batch, reference, replay, replay_weight);
    let g = gradients(&tape.backward(f.total), &f.params, params);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (ti, gt) in g.iter().enumerate() {
        for k in 0..gt.len() {
            let orig = params.tensors[ti].data()[k];
            probe.tensors[ti].data_mut()[k] = orig + eps;
            let up = eval(&probe);
            probe.tensors[ti].data_mut()[k] = orig - eps;
            let down = eval(&probe);
            probe.tensors[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = gt.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Expected norm of the additive feature noise augmentation.
    pub feature_noise: f64,
    pub flip: bool,
    pub seed: u64,
    pub replay: ReplayConfig,
}

impl Default for VisualTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch: 2,
            feature_noise: 0.02,
            flip: true,
            seed: 0,
            replay: ReplayConfig::default(),
        }
    }
}

impl VisualTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "visual lr must be > 0, momentum in [0, 1), weight decay >= 0",
            ));
        }
        if self.batch == 0 || !(self.feature_noise >= 0.0) {
            return Err(Error::config(
                "visual batch must be >= 1 and feature noise >= 0",
            ));
        }
        self.replay.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub align: Option<f64>,
    pub replay: Option<f64>,
    pub total: f64,
}

/// Online visual learner: decoder, optimizer state and feature buffers.
#[derive(Clone, Debug)]
pub struct VisualTrainer {
    pub params: DecoderParams,
    pub config: VisualTrainConfig,
    pub velocity: Vec<Tensor>,
    pub step: u64,
    pub replay: FeatureBuffer,
    pub temp: FeatureBuffer,
}

impl VisualTrainer {
    pub fn new(params: DecoderParams, config: VisualTrainConfig) -> Result<Self> {
        config.validate()?;
        let velocity = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let replay = FeatureBuffer::replay(config.replay.capacity);
        Ok(Self {
            params,
            config,
            velocity,
            step: 0,
            replay,
            temp: FeatureBuffer::temporary(),
        })
    }

    /// SGD with momentum; weight decay joins the gradient of learnable tensors.
    pub fn apply_gradients(&mut self, grads: &[Tensor]) {
        let (lr, mu, wd) = (
            self.config.lr,
            self.config.momentum,
            self.config.weight_decay,
        );
        for ((p, v), g) in self
            .params
            .tensors
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(grads)
        {
            let (p, v) = (p.data_mut(), v.data_mut());
            for k in 0..p.len() {
                v[k] = mu * v[k] + g.data()[k] + wd * p[k];
                p[k] -= lr * v[k];
            }
        }
    }

    fn augment(
        &self,
        image: &PatchFeatureImage,
        sup: &SupervisionMask,
        index: usize,
        reference: &[f64],
    ) -> (PatchFeatureImage, SupervisionMask) {
        let mut r = rng::stream(
            self.config.seed,
            "visual-augment",
            (self.step << 8) | index as u64,
        );
        let (mut img, mut sup) = if self.config.flip && r.random_bool(0.5) {
            (image.flipped(), sup.flipped())
        } else {
            (image.clone(), sup.clone())
        };
        if self.config.feature_noise > 0.0 {
            let nd = Normal::new(0.0, self.config.feature_noise / (img.dim as f64).sqrt()).unwrap();
            img.features
                .iter_mut()
                .for_each(|v| *v += nd.sample(&mut r));
        }
        let rc = &self.config.replay;
        if rc.enabled && rc.feature_cutmix && !self.replay.is_empty() {
            let seed = rng::derive(self.config.seed, "cutmix", (self.step << 8) | index as u64);
            (img, sup) =
                replay::feature_cutmix(&img, &sup, &self.replay, reference, rc.p_fcm, seed);
        }
        (img, sup)
    }

    /// One optimizer step on a batch of supervised images. `reference` is
    /// the current reference feature, treated as a constant.
    pub fn train_step(
        &mut self,
        batch: &[(PatchFeatureImage, SupervisionMask)],
        reference: &ReferenceFeatures,
    ) -> Result<StepReport> {
        self.step += 1;
        let items: Vec<_> = batch
            .iter()
            .enumerate()
            .map(|(i, (img, sup))| self.augment(img, sup, i, &reference.mean_feature))
            .collect();
        let vb = VisualBatch::from_images(&items)?;
        check_dim(&self.params, vb.x.shape()[1])?;
        let rc = self.config.replay.clone();
        let use_replay = rc.enabled && !self.replay.is_empty() && self.step % rc.schedule.t_r == 0;
        let mut tape = Tape::new();
        let f = visual_forward(
            &mut tape,
            &self.params,
            &vb,
            &reference.mean_feature,
            use_replay.then_some(&self.replay),
            rc.schedule.weight,
        );
        let total = tape.value(f.total).item();
        if !total.is_finite() {
            return Err(Error::Internal(format!(
                "non-finite visual loss at step {}",
                self.step
            )));
        }
        let report = StepReport {
            step: self.step,
            align: f.align.map(|v| tape.value(v).item()),
            replay: f.replay.map(|v| tape.value(v).item()),
            total,
        };
        let g = gradients(&tape.backward(f.total), &f.params, &self.params);
        self.apply_gradients(&g);
        self.params.update_running(&f.stats);
        if rc.enabled {
            let mut r = rng::stream(self.config.seed, "temp-buffer", self.step);
            for (img, _) in batch {
                let k = rc.temp_per_image.min(img.len());
                for idx in sample(&mut r, img.len(), k) {
                    self.temp.push(img.feature(idx).to_vec(), None, self.step);
                }
            }
            if self.step % rc.schedule.t_b == 0 {
                self.flush_buffers()?;
            }
        }
        Ok(report)
    }

    /// Merges the temporary buffer into the replay buffer now.
    pub fn flush_buffers(&mut self) -> Result<()> {
        let temp = std::mem::replace(&mut self.temp, FeatureBuffer::temporary());
        self.replay = replay::buffer_update(&self.replay, &temp, &self.params)?;
        Ok(())
    }
}
