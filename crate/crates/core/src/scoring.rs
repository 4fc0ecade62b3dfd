//! Traversability scores from latent embeddings: cosine against the mean
//! latent of a reference terrain, mapped to `[0, 1]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensornet::LatentEmbedding;
use crate::tape::{dot, norm, COSINE_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProfile {
    pub mean_latent: Vec<f64>,
    pub m_a: usize,
    pub terrain_id: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub t: f64,
    pub score: f64,
    pub terrain_gt: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry closest in time to `t`, if within `tolerance` seconds.
    pub fn nearest(&self, t: f64, tolerance: f64) -> Option<&ScoreEntry> {
        let k = self.entries.partition_point(|e| e.t < t);
        let cands = [k.checked_sub(1), (k < self.entries.len()).then_some(k)];
        cands
            .into_iter()
            .flatten()
            .map(|i| &self.entries[i])
            .filter(|e| (e.t - t).abs() <= tolerance)
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "t,score,terrain_gt")?;
        for e in &self.entries {
            let gt = e.terrain_gt.map(|g| g.to_string()).unwrap_or_default();
            writeln!(f, "{},{},{}", e.t, e.score, gt)?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = || Error::invalid(format!("{}: malformed line {}", path.display(), i + 1));
            let mut it = line.split(',');
            let t = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let score = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let terrain_gt = match it.next() {
                Some(s) if !s.is_empty() => Some(s.parse().map_err(|_| bad())?),
                _ => None,
            };
            entries.push(ScoreEntry {
                t,
                score,
                terrain_gt,
            });
        }
        Ok(Self { entries })
    }
}

pub fn calibrate_reference(latents: &[LatentEmbedding]) -> Result<ReferenceProfile> {
    let Some(first) = latents.first() else {
        return Err(Error::invalid("no calibration latents"));
    };
    let d = first.mean.len();
    let mut mean = vec![0.0; d];
    for l in latents {
        if l.mean.len() != d {
            return Err(Error::invalid("calibration latents differ in dimension"));
        }
        for (m, v) in mean.iter_mut().zip(&l.mean) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= latents.len() as f64);
    let terrain_id = first
        .terrain_gt
        .filter(|id| latents.iter().all(|l| l.terrain_gt == Some(*id)));
    Ok(ReferenceProfile {
        mean_latent: mean,
        m_a: latents.len(),
        terrain_id,
    })
}

/// `(cos + 1) / 2` between two vectors, clamped to `[0, 1]`.
pub fn rescaled_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na < COSINE_EPS {
        return Err(Error::DegenerateVector(na));
    }
    if nb < COSINE_EPS {
        return Err(Error::DegenerateVector(nb));
    }
    let cos = dot(a, b) / (na * nb);
    Ok(((cos + 1.0) / 2.0).clamp(0.0, 1.0))
}

pub fn score(latent: &LatentEmbedding, reference: &ReferenceProfile) -> Result<f64> {
    if latent.mean.len() != reference.mean_latent.len() {
        return Err(Error::invalid("latent and reference differ in dimension"));
    }
    rescaled_cosine(&reference.mean_latent, &latent.mean)
}

pub fn score_series(
    latents: &[LatentEmbedding],
    reference: &ReferenceProfile,
) -> Result<ScoreSeries> {
    let entries = latents
        .iter()
        .map(|l| {
            Ok(ScoreEntry {
                t: l.t,
                score: score(l, reference)?,
                terrain_gt: l.terrain_gt,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ScoreSeries { entries })
}

/// Replaces each score with the minimum over the trailing `window` seconds
/// (the entry itself included).
pub fn robustify(series: &ScoreSeries, window: f64) -> Result<ScoreSeries> {
    if !(window > 0.0) {
        return Err(Error::invalid("robustify window must be > 0"));
    }
    let e = &series.entries;
    let mut out = Vec::with_capacity(e.len());
    // monotone deque of indices with increasing scores
    let mut dq = std::collections::VecDeque::new();
    for i in 0..e.len() {
        while dq.back().is_some_and(|&j: &usize| e[j].score >= e[i].score) {
            dq.pop_back();
        }
        dq.push_back(i);
        while dq.front().is_some_and(|&j| e[i].t - e[j].t >= window) {
            dq.pop_front();
        }
        out.push(ScoreEntry {
            score: e[*dq.front().unwrap()].score,
            ..e[i]
        });
    }
    Ok(ScoreSeries { entries: out })
}
