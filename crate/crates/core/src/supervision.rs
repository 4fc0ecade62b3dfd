//! Per-patch training targets from experienced scores: project the robot's
//! poses into an image, grow segments of similar-looking patches around them
//! and average the scores inside each segment.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreSeries;
use crate::synthworld::{AffineCamera, PatchFeatureImage, Pose};
use crate::tape::{dot, norm};

/// Poses are matched to the score nearest in time within this many seconds.
pub const SCORE_MATCH_TOLERANCE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootprintPixel {
    pub row: usize,
    pub col: usize,
    pub score: f64,
    pub t: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub pixels: Vec<FootprintPixel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainMask {
    pub rows: usize,
    pub cols: usize,
    /// Segment id per patch, 0 = unassigned, otherwise contiguous from 1.
    pub segments: Vec<usize>,
}

impl TerrainMask {
    pub fn n_segments(&self) -> usize {
        self.segments.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisionMask {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl SupervisionMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
            valid: vec![false; rows * cols],
        }
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (src, dst) = (r * self.cols + self.cols - 1 - c, r * self.cols + c);
                out.values[dst] = self.values[src];
                out.valid[dst] = self.valid[src];
            }
        }
        out
    }

    /// Writes `<stem>.csv` (values, blank when invalid) and `<stem>_valid.csv` (0/1).
    pub fn write_csv(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut v = fs::File::create(dir.join(format!("{stem}.csv")))?;
        let mut m = fs::File::create(dir.join(format!("{stem}_valid.csv")))?;
        for r in 0..self.rows {
            let idx = r * self.cols..(r + 1) * self.cols;
            let vals: Vec<String> = idx
                .clone()
                .map(|i| {
                    if self.valid[i] {
                        self.values[i].to_string()
                    } else {
                        String::new()
                    }
                })
                .collect();
            let bits: Vec<&str> = idx.map(|i| if self.valid[i] { "1" } else { "0" }).collect();
            writeln!(v, "{}", vals.join(","))?;
            writeln!(m, "{}", bits.join(","))?;
        }
        Ok(())
    }
}

/// Patches under the poses seen from `image_pose`, annotated with the score
/// nearest in time. Poses outside the window or without a score within
/// [`SCORE_MATCH_TOLERANCE`] are dropped.
pub fn project_footprints(
    poses: &[Pose],
    scores: &ScoreSeries,
    image_pose: &Pose,
    camera: &AffineCamera,
) -> Footprint {
    let pixels = poses
        .iter()
        .filter_map(|p| {
            let (row, col) = camera.project_world(image_pose, p.x, p.y)?;
            let s = scores.nearest(p.t, SCORE_MATCH_TOLERANCE)?;
            Some(FootprintPixel {
                row,
                col,
                score: s.score,
                t: p.t,
            })
        })
        .collect();
    Footprint { pixels }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Grows one segment per distinct footprint patch: every patch whose feature
/// cosine to the footprint patch exceeds `c`. Overlapping segments merge.
/// Ids are assigned in row-major order of each segment's first patch.
pub fn segment_terrain(
    image: &PatchFeatureImage,
    footprint: &Footprint,
    c: f64,
) -> Result<TerrainMask> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::invalid(format!(
            "similarity threshold {c} outside (0, 1)"
        )));
    }
    let n = image.len();
    let mut seeds: Vec<usize> = Vec::new();
    for p in &footprint.pixels {
        if p.row >= image.rows || p.col >= image.cols {
            return Err(Error::invalid(format!(
                "footprint pixel ({}, {}) outside the image",
                p.row, p.col
            )));
        }
        let idx = p.row * image.cols + p.col;
        if !seeds.contains(&idx) {
            seeds.push(idx);
        }
    }
    let norms: Vec<f64> = (0..n).map(|i| norm(image.feature(i))).collect();
    let mut parent: Vec<usize> = (0..seeds.len()).collect();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (k, &s) in seeds.iter().enumerate() {
        let fs = image.feature(s);
        for i in 0..n {
            let cos = if i == s {
                1.0
            } else {
                dot(fs, image.feature(i)) / (norms[s] * norms[i]).max(f64::MIN_POSITIVE)
            };
            if cos > c {
                match owner[i] {
                    None => owner[i] = Some(k),
                    Some(o) => {
                        let (a, b) = (find(&mut parent, o), find(&mut parent, k));
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut label_of_root = vec![0usize; seeds.len()];
    let mut next = 1;
    let mut segments = vec![0usize; n];
    for i in 0..n {
        if let Some(o) = owner[i] {
            let root = find(&mut parent, o);
            if label_of_root[root] == 0 {
                label_of_root[root] = next;
                next += 1;
            }
            segments[i] = label_of_root[root];
        }
    }
    Ok(TerrainMask {
        rows: image.rows,
        cols: image.cols,
        segments,
    })
}

/// Every patch of a segment gets the mean footprint score inside it.
pub fn build_supervision(footprint: &Footprint, mask: &TerrainMask) -> Result<SupervisionMask> {
    let k = mask.n_segments();
    let mut sum = vec![0.0; k + 1];
    let mut count = vec![0usize; k + 1];
    for p in &footprint.pixels {
        let seg = mask.segments[p.row * mask.cols + p.col];
        if seg == 0 {
            return Err(Error::Internal(format!(
                "footprint pixel ({}, {}) lies in no segment",
                p.row, p.col
            )));
        }
        sum[seg] += p.score;
        count[seg] += 1;
    }
    let mut out = SupervisionMask::empty(mask.rows, mask.cols);
    for (i, &seg) in mask.segments.iter().enumerate() {
        if seg != 0 && count[seg] > 0 {
            out.values[i] = sum[seg] / count[seg] as f64;
            out.valid[i] = true;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScoreEntry;

    fn image(
        rows: usize,
        cols: usize,
        dim: usize,
        feats: impl Fn(usize, usize) -> Vec<f64>,
    ) -> PatchFeatureImage {
        let mut features = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                features.extend(feats(r, c));
            }
        }
        PatchFeatureImage {
            rows,
            cols,
            dim,
            features,
            terrain_gt: vec![0; rows * cols],
            pose: Pose::new(0.0, 0.0, 0.0, 0.0),
        }
    }

    fn fp(pixels: &[(usize, usize, f64)]) -> Footprint {
        Footprint {
            pixels: pixels
                .iter()
                .map(|&(row, col, score)| FootprintPixel {
                    row,
                    col,
                    score,
                    t: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn center_pose_hits_center_patch() {
        let cam = AffineCamera {
            rows: 5,
            cols: 5,
            patch_size: 1.0,
            near: 0.5,
        };
        let img_pose = Pose::new(0.0, 0.0, 0.0, 0.0);
        let (cx, cy) = cam.to_sensor(2.0, 2.0);
        let scores = ScoreSeries {
            entries: vec![ScoreEntry {
                t: 1.0,
                score: 0.7,
                terrain_gt: None,
            }],
        };
        let f = project_footprints(&[Pose::new(1.2, cx, cy, 0.0)], &scores, &img_pose, &cam);
        assert_eq!(f.pixels.len(), 1);
        assert_eq!(
            (f.pixels[0].row, f.pixels[0].col, f.pixels[0].score),
            (2, 2, 0.7)
        );
        assert!(
            project_footprints(&[Pose::new(1.0, -5.0, 0.0, 0.0)], &scores, &img_pose, &cam)
                .pixels
                .is_empty()
        );
        assert!(
            project_footprints(&[Pose::new(3.0, cx, cy, 0.0)], &scores, &img_pose, &cam)
                .pixels
                .is_empty()
        );
    }

    #[test]
    fn identical_patches_form_one_segment() {
        let img = image(4, 4, 3, |_, _| vec![1.0, 2.0, 3.0]);
        let m = segment_terrain(&img, &fp(&[(1, 1, 0.5)]), 0.95).unwrap();
        assert!(m.segments.iter().all(|&s| s == 1));
    }

    #[test]
    fn orthogonal_regions_stay_disjoint() {
        let img = image(4, 4, 2, |_, c| {
            if c < 2 {
                vec![1.0, 0.0]
            } else {
                vec![0.0, 1.0]
            }
        });
        let m = segment_terrain(&img, &fp(&[(0, 0, 0.9), (3, 3, 0.1)]), 0.95).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m.segments[r * 4 + c], if c < 2 { 1 } else { 2 });
            }
        }
        let s = build_supervision(&fp(&[(0, 0, 0.9), (3, 3, 0.1)]), &m).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(s.values[r * 4 + c], if c < 2 { 0.9 } else { 0.1 });
            }
        }
    }

    #[test]
    fn overlapping_segments_merge_and_average() {
        let img = image(1, 3, 2, |_, c| vec![1.0, c as f64 * 0.1]);
        let f = fp(&[(0, 0, 0.2), (0, 2, 0.4)]);
        let m = segment_terrain(&img, &f, 0.95).unwrap();
        assert_eq!(m.segments, vec![1, 1, 1]);
        let s = build_supervision(&f, &m).unwrap();
        assert!(s.values.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn unsegmented_footprint_is_an_error() {
        let m = TerrainMask {
            rows: 1,
            cols: 2,
            segments: vec![0, 1],
        };
        assert!(matches!(
            build_supervision(&fp(&[(0, 0, 0.5)]), &m),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn csv_dump() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = SupervisionMask::empty(2, 2);
        s.values[1] = 0.25;
        s.valid[1] = true;
        s.write_csv(dir.path(), "sup").unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("sup.csv")).unwrap(),
            ",0.25\n,\n"
        );
        assert_eq!(
            fs::read_to_string(dir.path().join("sup_valid.csv")).unwrap(),
            "0,1\n0,0\n"
        );
    }
}
