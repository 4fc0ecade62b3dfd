//! Feature replay against forgetting: a temporary buffer of recent patch
//! features, a capacity-bounded replay buffer kept diverse by farthest-point
//! sampling, the replay loss and feature cut-mix.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::rng;
use crate::scoring::rescaled_cosine;
use crate::supervision::SupervisionMask;
use crate::synthworld::PatchFeatureImage;
use crate::tape::{Tape, Tensor, Var};
use crate::vismodel::{decode_rows, forward_on, BnMode, DecoderParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    Temporary,
    Replay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub feature: Vec<f64>,
    /// Decoder output stored at the last buffer update (replay buffers only).
    pub target: Option<Vec<f64>>,
    pub origin_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBuffer {
    pub kind: BufferKind,
    /// `None` = unbounded.
    pub capacity: Option<usize>,
    pub entries: Vec<BufferEntry>,
}

impl FeatureBuffer {
    pub fn temporary() -> Self {
        Self {
            kind: BufferKind::Temporary,
            capacity: None,
            entries: Vec::new(),
        }
    }

    pub fn replay(capacity: usize) -> Self {
        Self {
            kind: BufferKind::Replay,
            capacity: Some(capacity),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, feature: Vec<f64>, target: Option<Vec<f64>>, origin_step: u64) {
        self.entries.push(BufferEntry {
            feature,
            target,
            origin_step,
        });
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.feature.clone()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = BufferMeta {
            kind: self.kind,
            capacity: self.capacity,
            origin_steps: self.entries.iter().map(|e| e.origin_step).collect(),
        };
        let rows = |f: &dyn Fn(&BufferEntry) -> Option<&Vec<f64>>| {
            let dim = self.entries.first().and_then(f).map_or(0, Vec::len);
            Tensor::from_vec(
                vec![self.len(), dim],
                self.entries
                    .iter()
                    .flat_map(|e| f(e).cloned().unwrap_or_default())
                    .collect(),
            )
        };
        let features = rows(&|e| Some(&e.feature));
        let targets = rows(&|e| e.target.as_ref());
        write_checkpoint(
            path,
            "feature_buffer",
            &meta,
            &[("features", &features), ("targets", &targets)],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors): (BufferMeta, _) = read_checkpoint(path, "feature_buffer")?;
        let bad = || Error::invalid(format!("{}: malformed feature buffer", path.display()));
        let [(_, features), (_, targets)] =
            <[(String, Tensor); 2]>::try_from(tensors).map_err(|_| bad())?;
        let n = meta.origin_steps.len();
        if features.shape()[0] != n || targets.shape()[0] != n {
            return Err(bad());
        }
        let (fd, td) = (features.shape()[1], targets.shape()[1]);
        let entries = (0..n)
            .map(|i| BufferEntry {
                feature: features.data()[i * fd..(i + 1) * fd].to_vec(),
                target: (td > 0).then(|| targets.data()[i * td..(i + 1) * td].to_vec()),
                origin_step: meta.origin_steps[i],
            })
            .collect();
        Ok(Self {
            kind: meta.kind,
            capacity: meta.capacity,
            entries,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BufferMeta {
    kind: BufferKind,
    capacity: Option<usize>,
    origin_steps: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplaySchedule {
    /// Buffer-update interval in iterations.
    pub t_b: u64,
    /// Replay-loss interval in iterations.
    pub t_r: u64,
    pub weight: f64,
}

impl Default for ReplaySchedule {
    fn default() -> Self {
        Self {
            t_b: 100,
            t_r: 1,
            weight: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub enabled: bool,
    pub capacity: usize,
    pub schedule: ReplaySchedule,
    pub feature_cutmix: bool,
    pub p_fcm: f64,
    /// Patch features per training image pushed to the temporary buffer.
    pub temp_per_image: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            capacity: 200,
            schedule: ReplaySchedule::default(),
            feature_cutmix: true,
            p_fcm: 0.5,
            temp_per_image: 16,
        }
    }
}

impl ReplayConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.t_b == 0 || s.t_r == 0 || !(s.weight > 0.0) {
            return Err(Error::config(
                "replay t_b and t_r must be >= 1 and the weight > 0",
            ));
        }
        if self.capacity == 0 || !(0.0..=1.0).contains(&self.p_fcm) {
            return Err(Error::config(
                "replay capacity must be >= 1 and p_fcm in [0, 1]",
            ));
        }
        Ok(())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Greedy farthest-point selection of `k` indices, in selection order.
/// Starts from the point farthest from the centroid; each next point
/// maximizes its distance to the nearest selected one. Ties go to the
/// lowest index.
pub fn fps_select(features: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let n = features.len();
    if k > n {
        return Err(Error::invalid(format!("cannot select {k} of {n} features")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("features differ in dimension"));
    }
    let mut centroid = vec![0.0; d];
    for f in features {
        centroid.iter_mut().zip(f).for_each(|(c, v)| *c += v);
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);
    let argmax = |score: &dyn Fn(usize) -> Option<f64>| {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if let Some(s) = score(i) {
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((i, s));
                }
            }
        }
        best.map(|(i, _)| i).unwrap()
    };
    let first = argmax(&|i| Some(dist(&features[i], &centroid)));
    let mut chosen = vec![first];
    let mut taken = vec![false; n];
    taken[first] = true;
    let mut nearest: Vec<f64> = features.iter().map(|f| dist(f, &features[first])).collect();
    while chosen.len() < k {
        let next = argmax(&|i| (!taken[i]).then_some(nearest[i]));
        taken[next] = true;
        chosen.push(next);
        for i in 0..n {
            nearest[i] = nearest[i].min(dist(&features[i], &features[next]));
        }
    }
    Ok(chosen)
}

/// New replay buffer: FPS over `replay ∪ temp` down to capacity (kept in
/// union order), targets refreshed with the current decoder in eval mode.
pub fn buffer_update(
    replay: &FeatureBuffer,
    temp: &FeatureBuffer,
    params: &DecoderParams,
) -> Result<FeatureBuffer> {
    let capacity = replay
        .capacity
        .ok_or_else(|| Error::invalid("buffer_update needs a replay buffer"))?;
    let union: Vec<&BufferEntry> = replay.entries.iter().chain(&temp.entries).collect();
    let keep: Vec<usize> = if union.len() <= capacity {
        (0..union.len()).collect()
    } else {
        let feats: Vec<Vec<f64>> = union.iter().map(|e| e.feature.clone()).collect();
        let mut idx = fps_select(&feats, capacity)?;
        idx.sort_unstable();
        idx
    };
    let rows: Vec<f64> = keep
        .iter()
        .flat_map(|&i| union[i].feature.iter().copied())
        .collect();
    let out = decode_rows(&rows, params)?;
    let c = params.config.out_dim;
    let entries = keep
        .iter()
        .enumerate()
        .map(|(j, &i)| BufferEntry {
            feature: union[i].feature.clone(),
            target: Some(out[j * c..(j + 1) * c].to_vec()),
            origin_step: union[i].origin_step,
        })
        .collect();
    Ok(FeatureBuffer {
        kind: BufferKind::Replay,
        capacity: Some(capacity),
        entries,
    })
}

fn buffer_tensors(replay: &FeatureBuffer) -> Option<(Tensor, Tensor)> {
    let first = replay.entries.first()?;
    let (d, c) = (first.feature.len(), first.target.as_ref()?.len());
    let x = replay
        .entries
        .iter()
        .flat_map(|e| e.feature.iter().copied())
        .collect();
    let t = replay
        .entries
        .iter()
        .flat_map(|e| {
            e.target
                .as_ref()
                .expect("replay entry without target")
                .iter()
                .copied()
        })
        .collect();
    Some((
        Tensor::from_vec(vec![replay.len(), d], x),
        Tensor::from_vec(vec![replay.len(), c], t),
    ))
}

/// MSE between eval-mode decoder outputs on buffered features and the stored
/// targets, on the tape. `None` for an empty buffer.
pub(crate) fn replay_on(
    tape: &mut Tape,
    p: &[Var],
    params: &DecoderParams,
    replay: &FeatureBuffer,
) -> Option<Var> {
    let (x, t) = buffer_tensors(replay)?;
    let x = tape.leaf(x);
    let (f, _) = forward_on(tape, p, params, x, BnMode::Eval);
    let t = tape.leaf(t);
    let diff = tape.sub(f, t);
    let sq = tape.square(diff);
    Some(tape.mean(sq))
}

pub fn loss_replay(replay: &FeatureBuffer, params: &DecoderParams) -> Result<f64> {
    let Some((x, t)) = buffer_tensors(replay) else {
        return Ok(0.0);
    };
    let out = decode_rows(x.data(), params)?;
    Ok(out
        .iter()
        .zip(t.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / out.len() as f64)
}

/// Replaces each unsupervised patch, with probability `p`, by a random
/// replay feature and supervises it with the rescaled cosine of that
/// entry's stored target against `reference`.
pub fn feature_cutmix(
    image: &PatchFeatureImage,
    sup: &SupervisionMask,
    replay: &FeatureBuffer,
    reference: &[f64],
    p: f64,
    seed: u64,
) -> (PatchFeatureImage, SupervisionMask) {
    let (mut img, mut sup) = (image.clone(), sup.clone());
    if replay.is_empty() {
        return (img, sup);
    }
    let mut r = rng::stream(seed, "feature-cutmix", 0);
    let d = img.dim;
    for i in 0..img.len() {
        if sup.valid[i] || !r.random_bool(p) {
            continue;
        }
        let e = &replay.entries[r.random_range(0..replay.len())];
        if e.feature.len() != d {
            continue;
        }
        img.features[i * d..(i + 1) * d].copy_from_slice(&e.feature);
        sup.values[i] = e
            .target
            .as_deref()
            .and_then(|t| rescaled_cosine(t, reference).ok())
            .unwrap_or(0.5);
        sup.valid[i] = true;
    }
    (img, sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::Pose;
    use crate::vismodel::DecoderConfig;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn fps_examples() {
        assert_eq!(fps_select(&pts(&[0.0, 1.0, 10.0]), 2).unwrap(), vec![2, 0]);
        let mut all = fps_select(&pts(&[3.0, 1.0, 4.0, 1.5]), 4).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(fps_select(&pts(&[1.0]), 2).is_err());
        // duplicates tie: lowest index wins
        assert_eq!(
            fps_select(&pts(&[5.0, 5.0, 0.0, 0.0]), 2).unwrap(),
            vec![0, 2]
        );
    }

    fn small_params() -> DecoderParams {
        let mut c = DecoderConfig::new(3);
        c.out_dim = 3;
        DecoderParams::init(c, 1).unwrap()
    }

    #[test]
    fn update_refreshes_targets_and_caps_size() {
        let params = small_params();
        let mut temp = FeatureBuffer::temporary();
        for i in 0..10 {
            temp.push(vec![i as f64, (i * i) as f64 * 0.1, 1.0], None, i);
        }
        let b = buffer_update(&FeatureBuffer::replay(4), &temp, &params).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.entries.iter().all(|e| e.target.is_some()));
        assert_eq!(loss_replay(&b, &params).unwrap(), 0.0);
        let again = buffer_update(&b, &FeatureBuffer::temporary(), &params).unwrap();
        assert_eq!(again.features(), b.features());
        let mut moved = params.clone();
        moved.tensors[1].data_mut()[0] += 0.3;
        assert!(loss_replay(&b, &moved).unwrap() > 0.0);
        assert_eq!(
            loss_replay(&FeatureBuffer::replay(4), &params).unwrap(),
            0.0
        );
    }

    #[test]
    fn cutmix_only_touches_unsupervised_patches() {
        let img = PatchFeatureImage {
            rows: 1,
            cols: 2,
            dim: 2,
            features: vec![1.0, 0.0, 0.0, 1.0],
            terrain_gt: vec![0, 0],
            pose: Pose::new(0.0, 0.0, 0.0, 0.0),
        };
        let mut sup = SupervisionMask::empty(1, 2);
        sup.valid[0] = true;
        sup.values[0] = 0.9;
        let mut buf = FeatureBuffer::replay(2);
        buf.push(vec![7.0, 7.0], Some(vec![1.0, 0.0]), 0);
        let (i2, s2) = feature_cutmix(&img, &sup, &buf, &[1.0, 0.0], 1.0, 3);
        assert_eq!(i2.features, vec![1.0, 0.0, 7.0, 7.0]);
        assert_eq!(
            (s2.values.clone(), s2.valid.clone()),
            (vec![0.9, 1.0], vec![true, true])
        );
        assert_eq!(
            feature_cutmix(&img, &sup, &FeatureBuffer::replay(2), &[1.0, 0.0], 1.0, 3),
            (img.clone(), sup.clone())
        );
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = FeatureBuffer::replay(5);
        b.push(vec![0.5, -1.0], Some(vec![0.25, 2.0, 1.0]), 3);
        b.push(vec![1.5, 4.0], Some(vec![0.0, 0.5, -1.0]), 9);
        b.save(&dir.path().join("b.bin")).unwrap();
        assert_eq!(FeatureBuffer::load(&dir.path().join("b.bin")).unwrap(), b);
        let mut t = FeatureBuffer::temporary();
        t.push(vec![1.0], None, 0);
        t.save(&dir.path().join("t.bin")).unwrap();
        assert_eq!(FeatureBuffer::load(&dir.path().join("t.bin")).unwrap(), t);
    }
}
