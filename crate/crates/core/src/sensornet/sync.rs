use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::GroupStream;

/// All groups resampled onto one master clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedTickTable {
    pub timestamps: Vec<f64>,
    /// `T × S`, row-major.
    pub values: Vec<f64>,
    pub width: usize,
    /// Terrain under the robot at each row, taken from the nearest master-rate tick.
    pub terrain: Vec<Option<usize>>,
}

impl AlignedTickTable {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }
}

/// Window of `window` synchronized rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub id: u64,
    /// `window × width`, row-major (time-major).
    pub data: Vec<f64>,
    pub window: usize,
    pub width: usize,
    pub t_end: f64,
    pub terrain_gt: Option<usize>,
}

impl SensorFrame {
    pub fn last_row(&self) -> &[f64] {
        &self.data[(self.window - 1) * self.width..]
    }
}

fn interpolate(ticks: &[crate::synthworld::SensorTick], t: f64, out: &mut Vec<f64>) {
    let k = ticks.partition_point(|tick| tick.t <= t);
    if k == 0 {
        out.extend_from_slice(&ticks[0].channels);
        return;
    }
    let a = &ticks[k - 1];
    if k == ticks.len() || a.t == t {
        out.extend_from_slice(&a.channels);
        return;
    }
    let b = &ticks[k];
    let w = (t - a.t) / (b.t - a.t);
    out.extend(
        a.channels
            .iter()
            .zip(&b.channels)
            .map(|(x, y)| x + w * (y - x)),
    );
}

/// Resamples every stream at the fastest group's rate over the intersection
/// of their intervals, linearly interpolating the slower groups.
pub fn synchronize(streams: &[GroupStream]) -> Result<AlignedTickTable> {
    if streams.is_empty() {
        return Err(Error::invalid("no streams to synchronize"));
    }
    for s in streams {
        if s.ticks.is_empty() {
            return Err(Error::invalid(format!(
                "{} stream is empty",
                s.group.name()
            )));
        }
        if s.ticks.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::invalid(format!(
                "{} timestamps are not increasing",
                s.group.name()
            )));
        }
    }
    let master = streams
        .iter()
        .max_by(|a, b| a.rate_hz.total_cmp(&b.rate_hz))
        .unwrap();
    let start = streams
        .iter()
        .map(|s| s.ticks[0].t)
        .fold(f64::MIN, f64::max);
    let end = streams
        .iter()
        .map(|s| s.ticks.last().unwrap().t)
        .fold(f64::MAX, f64::min);
    if start > end {
        return Err(Error::NoOverlap);
    }
    // Reuse the master stream's own timestamps wherever they fall in the interval.
    let timestamps: Vec<f64> = master
        .ticks
        .iter()
        .map(|t| t.t)
        .filter(|&t| t >= start && t <= end)
        .collect();
    if timestamps.is_empty() {
        return Err(Error::NoOverlap);
    }
    let width: usize = streams.iter().map(|s| s.ticks[0].channels.len()).sum();
    let mut values = Vec::with_capacity(timestamps.len() * width);
    let mut terrain = Vec::with_capacity(timestamps.len());
    for &t in &timestamps {
        for s in streams {
            interpolate(&s.ticks, t, &mut values);
        }
        let k = master.ticks.partition_point(|tick| tick.t < t);
        terrain.push(master.ticks[k.min(master.ticks.len() - 1)].terrain);
    }
    Ok(AlignedTickTable {
        timestamps,
        values,
        width,
        terrain,
    })
}

/// Cuts the table into windows ending at rows `window−1`, `window−1+stride`, …
pub fn partition(
    table: &AlignedTickTable,
    window: usize,
    stride: usize,
) -> Result<Vec<SensorFrame>> {
    if stride == 0 || window == 0 {
        return Err(Error::invalid("window and stride must be ≥ 1"));
    }
    if window > table.len() {
        return Err(Error::TooShort {
            rows: table.len(),
            window,
        });
    }
    let w = table.width;
    Ok((window - 1..table.len())
        .step_by(stride)
        .enumerate()
        .map(|(i, end)| SensorFrame {
            id: i as u64,
            data: table.values[(end + 1 - window) * w..(end + 1) * w].to_vec(),
            window,
            width: w,
            t_end: table.timestamps[end],
            terrain_gt: table.terrain[end],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{ChannelGroup, SensorTick};
    use rand::Rng;

    fn stream(group: ChannelGroup, rate: f64, ts: &[f64], vals: &[f64]) -> GroupStream {
        GroupStream {
            group,
            rate_hz: rate,
            ticks: ts
                .iter()
                .zip(vals)
                .map(|(&t, &v)| SensorTick {
                    t,
                    channels: vec![v],
                    terrain: Some(0),
                })
                .collect(),
        }
    }

    fn table(rows: usize) -> AlignedTickTable {
        AlignedTickTable {
            timestamps: (0..rows).map(|i| i as f64 * 0.1).collect(),
            values: (0..rows).map(|i| i as f64).collect(),
            width: 1,
            terrain: vec![None; rows],
        }
    }

    #[test]
    fn linear_midpoint() {
        let master = stream(
            ChannelGroup::Imu,
            1.0,
            &(0..=10).map(|i| i as f64).collect::<Vec<_>>(),
            &[0.0; 11],
        );
        let slow = stream(ChannelGroup::Vel, 0.1, &[0.0, 10.0], &[0.0, 10.0]);
        let t = synchronize(&[master, slow]).unwrap();
        assert_eq!(t.timestamps[5], 5.0);
        assert!((t.row(5)[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn identity_at_master_rate() {
        let ts: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let a = stream(
            ChannelGroup::Imu,
            10.0,
            &ts,
            &(0..20).map(|i| (i as f64).sin()).collect::<Vec<_>>(),
        );
        let b = stream(
            ChannelGroup::Joint,
            10.0,
            &ts,
            &(0..20).map(|i| (i as f64).cos()).collect::<Vec<_>>(),
        );
        let t = synchronize(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.timestamps, ts);
        for i in 0..20 {
            assert_eq!(t.row(i), &[a.ticks[i].channels[0], b.ticks[i].channels[0]]);
        }
    }

    #[test]
    fn interpolated_values_stay_within_brackets() {
        let mut r = crate::rng::stream(3, "test", 0);
        let slow_ts: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let slow_vals: Vec<f64> = (0..11).map(|_| r.random_range(-5.0..5.0)).collect();
        let fast_ts: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let t = synchronize(&[
            stream(ChannelGroup::Imu, 10.0, &fast_ts, &vec![0.0; fast_ts.len()]),
            stream(ChannelGroup::Vel, 1.0, &slow_ts, &slow_vals),
        ])
        .unwrap();
        for (i, &ts) in t.timestamps.iter().enumerate() {
            let k = (ts.floor() as usize).min(9);
            let (lo, hi) = (
                slow_vals[k].min(slow_vals[k + 1]),
                slow_vals[k].max(slow_vals[k + 1]),
            );
            let v = t.row(i)[1];
            assert!(
                v >= lo - 1e-12 && v <= hi + 1e-12,
                "t={ts} v={v} not in [{lo},{hi}]"
            );
        }
    }

    #[test]
    fn disjoint_streams_do_not_overlap() {
        let a = stream(ChannelGroup::Imu, 1.0, &[0.0, 1.0], &[0.0, 0.0]);
        let b = stream(ChannelGroup::Vel, 1.0, &[2.0, 3.0], &[0.0, 0.0]);
        assert!(matches!(synchronize(&[a, b]), Err(Error::NoOverlap)));
    }

    #[test]
    fn partition_counts_and_ends() {
        assert_eq!(partition(&table(250), 100, 100).unwrap().len(), 2);
        assert_eq!(partition(&table(100), 100, 1).unwrap().len(), 1);
        let frames = partition(&table(120), 100, 10).unwrap();
        let ends: Vec<f64> = frames
            .iter()
            .map(|f| *f.last_row().first().unwrap())
            .collect();
        assert_eq!(ends, vec![99.0, 109.0, 119.0]);
        assert!((frames[2].t_end - 11.9).abs() < 1e-12);
        assert!(matches!(
            partition(&table(50), 100, 1),
            Err(Error::TooShort { .. })
        ));
    }
}
