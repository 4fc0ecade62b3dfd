use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sync::SensorFrame;
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Tensor, Var};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Input channels S.
    pub width: usize,
    /// Frame length W in master ticks.
    pub window: usize,
    pub hidden: usize,
    pub kernel1: usize,
    pub kernel2: usize,
    pub latent: usize,
    pub dec_hidden: usize,
}

impl VaeConfig {
    pub fn new(width: usize, window: usize) -> Self {
        Self {
            width,
            window,
            hidden: 64,
            kernel1: 11,
            kernel2: 7,
            latent: 16,
            dec_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0
            || self.window == 0
            || self.hidden == 0
            || self.latent == 0
            || self.dec_hidden == 0
        {
            return Err(Error::config("VAE dimensions must be > 0"));
        }
        if self.kernel1 % 2 == 0 || self.kernel2 % 2 == 0 {
            return Err(Error::config("VAE kernel sizes must be odd"));
        }
        Ok(())
    }
}

pub const PARAM_NAMES: [&str; 12] = [
    "enc1.w", "enc1.b", "enc2.w", "enc2.b", "mean.w", "mean.b", "logvar.w", "logvar.b", "dec1.w",
    "dec1.b", "dec2.w", "dec2.b",
];

/// Encoder/decoder weights plus the per-channel input normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub config: VaeConfig,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    /// In [`PARAM_NAMES`] order.
    pub tensors: Vec<Tensor>,
}

/// Posterior for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentEmbedding {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
    pub t: f64,
    pub terrain_gt: Option<usize>,
}

fn shapes(c: &VaeConfig) -> [Vec<usize>; 12] {
    [
        vec![c.hidden, c.width, c.kernel1],
        vec![c.hidden],
        vec![c.hidden, c.hidden, c.kernel2],
        vec![c.hidden],
        vec![c.latent, c.hidden],
        vec![c.latent],
        vec![c.latent, c.hidden],
        vec![c.latent],
        vec![c.dec_hidden, c.latent, 1],
        vec![c.dec_hidden],
        vec![c.width, c.dec_hidden, 1],
        vec![c.width],
    ]
}

// fan-in of the layer that owns each tensor
fn fan_in(c: &VaeConfig, i: usize) -> usize {
    match i / 2 {
        0 => c.width * c.kernel1,
        1 => c.hidden * c.kernel2,
        2 | 3 => c.hidden,
        4 => c.latent,
        _ => c.dec_hidden,
    }
}

impl VaeParams {
    /// Uniform(−1/√fan_in, 1/√fan_in) weights and biases, identity normalization.
    pub fn init(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "vae-init", 0);
        let tensors = shapes(&config)
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let bound = 1.0 / (fan_in(&config, i) as f64).sqrt();
                let n = shape.iter().product();
                Tensor::from_vec(
                    shape,
                    (0..n).map(|_| r.random_range(-bound..bound)).collect(),
                )
            })
            .collect();
        Ok(Self {
            config,
            norm_mean: vec![0.0; config.width],
            norm_std: vec![1.0; config.width],
            tensors,
        })
    }

    pub fn zeros(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let tensors = shapes(&config).iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self {
            config,
            norm_mean: vec![0.0; config.width],
            norm_std: vec![1.0; config.width],
            tensors,
        })
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Fits per-channel z-score normalization to the rows of `frames`.
    pub fn fit_normalization(&mut self, frames: &[SensorFrame]) -> Result<()> {
        let s = self.config.width;
        let mut n = 0usize;
        let mut sum = vec![0.0; s];
        let mut sq = vec![0.0; s];
        for f in frames {
            check_frame(&self.config, f)?;
            for row in f.data.chunks(s) {
                for k in 0..s {
                    sum[k] += row[k];
                    sq[k] += row[k] * row[k];
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid("no frames to fit normalization"));
        }
        for k in 0..s {
            let m = sum[k] / n as f64;
            let var = (sq[k] / n as f64 - m * m).max(0.0);
            self.norm_mean[k] = m;
            self.norm_std[k] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = VaeMeta {
            config: self.config,
            norm_mean: self.norm_mean.clone(),
            norm_std: self.norm_std.clone(),
        };
        let named: Vec<(&str, &Tensor)> = PARAM_NAMES
            .iter()
            .copied()
            .zip(self.tensors.iter())
            .collect();
        write_checkpoint(path, "vae", &meta, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors): (VaeMeta, _) = read_checkpoint(path, "vae")?;
        let expected = shapes(&meta.config);
        if tensors.len() != expected.len()
            || tensors
                .iter()
                .zip(&expected)
                .any(|((_, t), s)| t.shape() != s.as_slice())
        {
            return Err(Error::invalid(format!(
                "{}: tensor shapes do not match the VAE config",
                path.display()
            )));
        }
        Ok(Self {
            config: meta.config,
            norm_mean: meta.norm_mean,
            norm_std: meta.norm_std,
            tensors: tensors.into_iter().map(|(_, t)| t).collect(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct VaeMeta {
    config: VaeConfig,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
}

fn check_frame(c: &VaeConfig, f: &SensorFrame) -> Result<()> {
    if f.width != c.width || f.window != c.window || f.data.len() != c.width * c.window {
        return Err(Error::invalid(format!(
            "frame is {}×{}, VAE expects {}×{}",
            f.window, f.width, c.window, c.width
        )));
    }
    Ok(())
}

/// Normalized `[N, S, W]` input tensor and `[N, S]` normalized last rows.
pub(crate) fn batch_tensors(
    params: &VaeParams,
    frames: &[&SensorFrame],
) -> Result<(Tensor, Tensor)> {
    let (s, w) = (params.config.width, params.config.window);
    let mut x = vec![0.0; frames.len() * s * w];
    let mut last = vec![0.0; frames.len() * s];
    for (b, f) in frames.iter().enumerate() {
        check_frame(&params.config, f)?;
        for t in 0..w {
            for k in 0..s {
                let v = (f.data[t * s + k] - params.norm_mean[k]) / params.norm_std[k];
                x[(b * s + k) * w + t] = v;
                if t == w - 1 {
                    last[b * s + k] = v;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(vec![frames.len(), s, w], x),
        Tensor::from_vec(vec![frames.len(), s], last),
    ))
}

/// Parameter leaves on a tape, in [`PARAM_NAMES`] order.
pub(crate) fn bind(tape: &mut Tape, params: &VaeParams) -> Vec<Var> {
    params
        .tensors
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect()
}

/// `x: [N, S, W]` → (mean `[N, L]`, clamped logvar `[N, L]`).
pub(crate) fn encode_on(tape: &mut Tape, p: &[Var], x: Var) -> (Var, Var) {
    let h = tape.conv1d(x, p[0], p[1]);
    let h = tape.relu(h);
    let h = tape.conv1d(h, p[2], p[3]);
    let h = tape.relu(h);
    let pooled = tape.mean_last(h);
    let mean = tape.linear(pooled, p[4], p[5]);
    let lv = tape.linear(pooled, p[6], p[7]);
    let logvar = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
    (mean, logvar)
}

/// `z: [N, L]` → `[N, S]`, as two width-1 convolutions over a length-1 sequence.
pub(crate) fn decode_on(tape: &mut Tape, p: &[Var], z: Var) -> Var {
    let n = tape.value(z).shape()[0];
    let l = tape.value(z).shape()[1];
    let seq = tape.reshape(z, &[n, l, 1]);
    let h = tape.conv1d(seq, p[8], p[9]);
    let h = tape.relu(h);
    let y = tape.conv1d(h, p[10], p[11]);
    let s = tape.value(y).shape()[1];
    tape.reshape(y, &[n, s])
}

/// Reparameterized sample `mean + exp(logvar/2)·ε` with `ε` supplied.
pub(crate) fn sample_on(tape: &mut Tape, mean: Var, logvar: Var, eps: Tensor) -> Var {
    let half = tape.scale(logvar, 0.5);
    let sd = tape.exp(half);
    let noise = tape.mul_const(sd, eps);
    tape.add(mean, noise)
}

const ENCODE_CHUNK: usize = 64;

/// Posterior means/log-variances for many frames (evaluation: no sampling).
pub fn encode_batch(frames: &[SensorFrame], params: &VaeParams) -> Result<Vec<LatentEmbedding>> {
    let l = params.config.latent;
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(ENCODE_CHUNK) {
        let refs: Vec<&SensorFrame> = chunk.iter().collect();
        let (x, _) = batch_tensors(params, &refs)?;
        let mut tape = Tape::new();
        let p = bind(&mut tape, params);
        let xv = tape.leaf(x);
        let (mean, logvar) = encode_on(&mut tape, &p, xv);
        let (m, lv) = (tape.value(mean).data(), tape.value(logvar).data());
        for (i, f) in chunk.iter().enumerate() {
            out.push(LatentEmbedding {
                mean: m[i * l..(i + 1) * l].to_vec(),
                logvar: lv[i * l..(i + 1) * l].to_vec(),
                t: f.t_end,
                terrain_gt: f.terrain_gt,
            });
        }
    }
    Ok(out)
}

pub fn encode(frame: &SensorFrame, params: &VaeParams) -> Result<LatentEmbedding> {
    Ok(encode_batch(std::slice::from_ref(frame), params)?.remove(0))
}

/// Reconstruction of the (normalized) last sensor row from the latent mean.
pub fn decode(latent: &LatentEmbedding, params: &VaeParams) -> Result<Vec<f64>> {
    if latent.mean.len() != params.config.latent {
        return Err(Error::invalid(format!(
            "latent has {} dims, VAE expects {}",
            latent.mean.len(),
            params.config.latent
        )));
    }
    let mut tape = Tape::new();
    let p = bind(&mut tape, params);
    let z = tape.leaf(Tensor::from_vec(
        vec![1, params.config.latent],
        latent.mean.clone(),
    ));
    let y = decode_on(&mut tape, &p, z);
    Ok(tape.value(y).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(cfg: &VaeConfig, seed: u64) -> SensorFrame {
        let mut r = rng::stream(seed, "frame", 0);
        SensorFrame {
            id: seed,
            data: (0..cfg.width * cfg.window)
                .map(|_| r.random_range(-3.0..3.0))
                .collect(),
            window: cfg.window,
            width: cfg.width,
            t_end: 1.0,
            terrain_gt: None,
        }
    }

    fn small() -> VaeConfig {
        VaeConfig {
            width: 5,
            window: 12,
            hidden: 6,
            kernel1: 5,
            kernel2: 3,
            latent: 4,
            dec_hidden: 6,
        }
    }

    #[test]
    fn zero_network_encodes_and_decodes_to_zero() {
        let cfg = small();
        let p = VaeParams::zeros(cfg).unwrap();
        let z = encode(&frame(&cfg, 1), &p).unwrap();
        assert!(z.mean.iter().all(|&v| v == 0.0));
        assert!(decode(&z, &p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_deterministic_and_bounded() {
        let cfg = small();
        let p = VaeParams::init(cfg, 3).unwrap();
        for s in 0..20 {
            let mut f = frame(&cfg, s);
            f.data.iter_mut().for_each(|v| *v *= 1e3);
            let a = encode(&f, &p).unwrap();
            assert_eq!(a, encode(&f, &p).unwrap());
            assert!(a.mean.iter().all(|v| v.is_finite()));
            assert!(a
                .logvar
                .iter()
                .all(|v| (LOGVAR_MIN..=LOGVAR_MAX).contains(v)));
            assert_eq!(decode(&a, &p).unwrap().len(), cfg.width);
        }
    }

    #[test]
    fn batch_encoding_is_order_independent() {
        let cfg = small();
        let p = VaeParams::init(cfg, 3).unwrap();
        let frames: Vec<SensorFrame> = (0..5).map(|s| frame(&cfg, s)).collect();
        let fwd = encode_batch(&frames, &p).unwrap();
        let mut rev_frames = frames.clone();
        rev_frames.reverse();
        let mut rev = encode_batch(&rev_frames, &p).unwrap();
        rev.reverse();
        for (a, b) in fwd.iter().zip(&rev) {
            for (x, y) in a.mean.iter().zip(&b.mean) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = small();
        let p = VaeParams::init(cfg, 3).unwrap();
        let mut f = frame(&cfg, 1);
        f.width = 4;
        assert!(matches!(encode(&f, &p), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = VaeParams::init(small(), 4).unwrap();
        p.save(&dir.path().join("vae.ckpt")).unwrap();
        let q = VaeParams::load(&dir.path().join("vae.ckpt")).unwrap();
        assert_eq!(q.config, p.config);
        for (a, b) in p.tensors.iter().zip(&q.tensors) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}
