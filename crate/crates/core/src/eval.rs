//! Metric suite: path effort, segmentation IoU under the ±2σ rule,
//! score-quality statistics, the composite tuning objective and forgetting
//! curves.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::ElevationMap;
use crate::planner::Path;
use crate::scoring::ScoreSeries;
use crate::synthworld::{PatchFeatureImage, WorldMap};
use crate::vismodel::{predict_image, DecoderParams, PredictionMap, ReferenceFeatures};

/// Ground-truth effort `u ∈ [0, 1]` per terrain id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EffortTable {
    pub efforts: BTreeMap<usize, f64>,
}

impl EffortTable {
    pub fn from_world(world: &WorldMap) -> Self {
        Self {
            efforts: world.terrains.iter().map(|t| (t.id, t.effort_u)).collect(),
        }
    }

    pub fn get(&self, terrain: usize) -> Result<f64> {
        self.efforts
            .get(&terrain)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no effort for terrain {terrain}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathEffort {
    pub effort: f64,
    pub epl: f64,
    pub length: f64,
    /// Set when the path had no segment.
    pub empty: bool,
}

/// Effort summed over segments, each weighted by its 3D length and the mean
/// effort of its two cells' terrains. Path cells index the world grid.
pub fn path_effort(path: &Path, world: &WorldMap, table: &EffortTable) -> Result<PathEffort> {
    if path.cells.len() < 2 {
        return Ok(PathEffort {
            empty: true,
            ..Default::default()
        });
    }
    let (mut effort, mut length) = (0.0, 0.0);
    for (i, w) in path.cells.windows(2).enumerate() {
        let u = |(r, c): (usize, usize)| -> Result<f64> {
            if r >= world.rows || c >= world.cols {
                return Err(Error::invalid(format!(
                    "path cell ({r}, {c}) outside the world"
                )));
            }
            table.get(world.terrain_at_cell(r, c))
        };
        let horiz = ((w[0].0 as f64 - w[1].0 as f64).hypot(w[0].1 as f64 - w[1].1 as f64))
            * world.resolution;
        let ds = horiz.hypot(path.heights[i + 1] - path.heights[i]);
        effort += ds * (u(w[0])? + u(w[1])?) / 2.0;
        length += ds;
    }
    Ok(PathEffort {
        effort,
        epl: if length > 0.0 { effort / length } else { 0.0 },
        length,
        empty: false,
    })
}

/// Mean and population std of the supervision values per terrain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TerrainStats {
    pub stats: BTreeMap<usize, (f64, f64)>,
}

impl TerrainStats {
    pub fn from_samples(samples: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut acc: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
        for (t, v) in samples {
            let e = acc.entry(t).or_default();
            e.0 += v;
            e.1 += v * v;
            e.2 += 1;
        }
        let stats = acc
            .into_iter()
            .map(|(t, (s, s2, n))| {
                let m = s / n as f64;
                (t, (m, (s2 / n as f64 - m * m).max(0.0).sqrt()))
            })
            .collect();
        Self { stats }
    }

    /// Terrain whose ±2σ interval holds `v`; among several, the nearest
    /// center (then the lowest id).
    pub fn classify(&self, v: f64) -> Option<usize> {
        self.stats
            .iter()
            .filter(|(_, (m, s))| (v - m).abs() <= 2.0 * s)
            .min_by(|a, b| (v - a.1 .0).abs().total_cmp(&(v - b.1 .0).abs()))
            .map(|(t, _)| *t)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScore {
    /// IoU in percent per ground-truth terrain.
    pub iou: BTreeMap<usize, f64>,
    pub miou: f64,
    /// Ground-truth terrains without statistics, left out of the mean.
    pub excluded: Vec<usize>,
}

fn segmentation(
    pairs: impl Iterator<Item = (f64, usize)>,
    stats: &TerrainStats,
) -> SegmentationScore {
    let mut inter: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pred_n: BTreeMap<usize, usize> = BTreeMap::new();
    let mut gt_n: BTreeMap<usize, usize> = BTreeMap::new();
    for (v, gt) in pairs {
        *gt_n.entry(gt).or_default() += 1;
        if let Some(p) = stats.classify(v) {
            *pred_n.entry(p).or_default() += 1;
            if p == gt {
                *inter.entry(gt).or_default() += 1;
            }
        }
    }
    let mut out = SegmentationScore::default();
    for (&t, &g) in &gt_n {
        if !stats.stats.contains_key(&t) {
            out.excluded.push(t);
            continue;
        }
        let i = inter.get(&t).copied().unwrap_or(0);
        let union = g + pred_n.get(&t).copied().unwrap_or(0) - i;
        out.iou.insert(t, 100.0 * i as f64 / union as f64);
    }
    out.miou = if out.iou.is_empty() {
        0.0
    } else {
        out.iou.values().sum::<f64>() / out.iou.len() as f64
    };
    out
}

/// Pixel IoU over all test images; `gt[i]` labels `predictions[i]`.
pub fn segm_2d(
    predictions: &[PredictionMap],
    gt: &[Vec<usize>],
    stats: &TerrainStats,
) -> Result<SegmentationScore> {
    if predictions.len() != gt.len()
        || predictions
            .iter()
            .zip(gt)
            .any(|(p, g)| p.values.len() != g.len())
    {
        return Err(Error::invalid("predictions and labels differ in shape"));
    }
    Ok(segmentation(
        predictions
            .iter()
            .zip(gt)
            .flat_map(|(p, g)| p.values.iter().copied().zip(g.iter().copied())),
        stats,
    ))
}

/// Cell IoU over the observed cells of an elevation map.
pub fn segm_25d(
    map: &ElevationMap,
    gt: &[usize],
    stats: &TerrainStats,
) -> Result<SegmentationScore> {
    if gt.len() != map.rows * map.cols {
        return Err(Error::invalid("label grid differs from the map grid"));
    }
    Ok(segmentation(
        (0..gt.len())
            .filter(|&i| map.observed[i])
            .map(|i| (map.traversability[i], gt[i])),
        stats,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreQuality {
    /// `None` with fewer than two terrains.
    pub pairwise_overlap: Option<f64>,
    pub avg_range: f64,
    pub stability: f64,
    /// `None` when either side has zero variance.
    pub correlation: Option<f64>,
}

fn by_terrain(series: &ScoreSeries) -> BTreeMap<usize, Vec<f64>> {
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for e in &series.entries {
        if let Some(t) = e.terrain_gt {
            out.entry(t).or_default().push(e.score);
        }
    }
    out
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (
        m,
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt(),
    )
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean_std(x).0, mean_std(y).0);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Histogram intersection of two samples on `bins` uniform bins over `[0, 1]`.
pub fn histogram_overlap(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let hist = |v: &[f64]| {
        let mut h = vec![0.0; bins];
        for x in v {
            h[((x.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)] += 1.0 / v.len() as f64;
        }
        h
    };
    hist(a).iter().zip(hist(b)).map(|(x, y)| x.min(y)).sum()
}

/// Per-terrain score statistics of `after`; stability compares terrain
/// means and stds against `before`.
pub fn score_quality(
    after: &ScoreSeries,
    before: &ScoreSeries,
    table: &EffortTable,
    bins: usize,
) -> Result<ScoreQuality> {
    if bins == 0 {
        return Err(Error::invalid("bins must be >= 1"));
    }
    let groups = by_terrain(after);
    if groups.is_empty() || groups.values().any(|v| v.len() < 2) {
        return Err(Error::invalid(
            "score quality needs at least 2 samples per terrain",
        ));
    }
    let keys: Vec<usize> = groups.keys().copied().collect();
    let mut pairs = Vec::new();
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            pairs.push(histogram_overlap(
                &groups[&keys[i]],
                &groups[&keys[j]],
                bins,
            ));
        }
    }
    let pairwise_overlap =
        (!pairs.is_empty()).then(|| pairs.iter().sum::<f64>() / pairs.len() as f64);
    let avg_range = groups
        .values()
        .map(|v| {
            v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min)
        })
        .sum::<f64>()
        / groups.len() as f64;
    let prev = by_terrain(before);
    let shifts: Vec<f64> = groups
        .iter()
        .filter_map(|(t, v)| {
            let p = prev.get(t)?;
            let ((ma, sa), (mb, sb)) = (mean_std(v), mean_std(p));
            Some((ma - mb).abs() + (sa - sb).abs())
        })
        .collect();
    let stability = if shifts.is_empty() {
        1.0
    } else {
        (1.0 - shifts.iter().sum::<f64>() / shifts.len() as f64).clamp(0.0, 1.0)
    };
    let means: Vec<f64> = groups.values().map(|v| mean_std(v).0).collect();
    let ease: Vec<f64> = keys
        .iter()
        .map(|&t| table.get(t).map(|u| 1.0 - u))
        .collect::<Result<_>>()?;
    Ok(ScoreQuality {
        pairwise_overlap,
        avg_range,
        stability,
        correlation: pearson(&means, &ease),
    })
}

/// `overlap + range + (1 − stability) + (1 − correlation)`; undefined
/// overlap counts as worst (1), undefined correlation as 0.
pub fn hyper_objective(q: &ScoreQuality) -> f64 {
    q.pairwise_overlap.unwrap_or(1.0)
        + q.avg_range
        + (1.0 - q.stability)
        + (1.0 - q.correlation.unwrap_or(0.0))
}

/// 2D mIoU over the whole test set for every per-increment snapshot.
pub fn forgetting_curve(
    snapshots: &[(DecoderParams, ReferenceFeatures)],
    test: &[PatchFeatureImage],
    stats: &TerrainStats,
) -> Result<Vec<f64>> {
    let gt: Vec<Vec<usize>> = test.iter().map(|i| i.terrain_gt.clone()).collect();
    snapshots
        .iter()
        .map(|(params, reference)| {
            let preds = test
                .iter()
                .map(|img| predict_image(img, params, reference))
                .collect::<Result<Vec<_>>>()?;
            Ok(segm_2d(&preds, &gt, stats)?.miou)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub effort: f64,
    pub epl: f64,
    pub euclidean_effort: f64,
    pub euclidean_epl: f64,
    pub miou_2d: f64,
    pub miou_25d: f64,
    pub forgetting_curve: Vec<f64>,
    pub score_quality: ScoreQuality,
    pub hyper_objective: f64,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &FsPath) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &FsPath) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
