//! World files: `world.json` header (resolution, terrain specs), a CSV grid
//! of terrain ids, a CSV grid of heights, and JSON-lines pose/tick records.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::terrain::TerrainSpec;
use super::world::WorldMap;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct WorldHeader {
    rows: usize,
    cols: usize,
    resolution: f64,
    terrains: Vec<TerrainSpec>,
}

pub fn write_grid_csv<T: std::fmt::Display>(path: &Path, cols: usize, values: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for row in values.chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid_csv<T: std::str::FromStr>(path: &Path) -> Result<(usize, usize, Vec<T>)> {
    let text = fs::read_to_string(path)?;
    let mut values = Vec::new();
    let (mut rows, mut cols) = (0, 0);
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row: Vec<T> = line
            .split(',')
            .map(|s| {
                s.trim().parse::<T>().map_err(|_| {
                    Error::invalid(format!(
                        "{}: bad value `{s}` on line {}",
                        path.display(),
                        i + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if rows == 0 {
            cols = row.len();
        } else if row.len() != cols {
            return Err(Error::invalid(format!(
                "{}: ragged row {}",
                path.display(),
                i + 1
            )));
        }
        values.extend(row);
        rows += 1;
    }
    Ok((rows, cols, values))
}

pub fn save_world(world: &WorldMap, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = WorldHeader {
        rows: world.rows,
        cols: world.cols,
        resolution: world.resolution,
        terrains: world.terrains.clone(),
    };
    fs::write(
        dir.join("world.json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    write_grid_csv(&dir.join("terrain.csv"), world.cols, &world.cells)?;
    write_grid_csv(&dir.join("elevation.csv"), world.cols, &world.elevation)?;
    Ok(())
}

pub fn load_world(dir: &Path) -> Result<WorldMap> {
    let header: WorldHeader = serde_json::from_str(&fs::read_to_string(dir.join("world.json"))?)?;
    let (rows, cols, cells) = read_grid_csv::<usize>(&dir.join("terrain.csv"))?;
    let (erows, ecols, elevation) = read_grid_csv::<f64>(&dir.join("elevation.csv"))?;
    if (rows, cols) != (header.rows, header.cols) || (erows, ecols) != (rows, cols) {
        return Err(Error::invalid("world grid dimensions disagree with header"));
    }
    let world = WorldMap {
        rows,
        cols,
        resolution: header.resolution,
        cells,
        elevation,
        terrains: header.terrains,
    };
    world.validate()?;
    Ok(world)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::terrain::{SensorLayout, SignatureParams};
    use crate::synthworld::trajectory::{gen_trajectory, Pose};
    use crate::synthworld::world::{gen_world, WorldSpec};

    #[test]
    fn world_and_poses_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = TerrainSpec::catalog(3, &SensorLayout::default(), SignatureParams::default(), 1);
        let w = gen_world(
            &WorldSpec {
                rows: 12,
                cols: 10,
                ..Default::default()
            },
            &t,
            3,
            2,
        )
        .unwrap();
        save_world(&w, dir.path()).unwrap();
        assert_eq!(load_world(dir.path()).unwrap(), w);
        let traj = gen_trajectory(&w, 1, 2.0, 5.0, Default::default()).unwrap();
        let p = dir.path().join("traj.jsonl");
        write_jsonl(&p, &traj).unwrap();
        assert_eq!(read_jsonl::<Pose>(&p).unwrap(), traj);
    }
}
