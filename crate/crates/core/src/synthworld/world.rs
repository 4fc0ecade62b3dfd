use rand::Rng;
use serde::{Deserialize, Serialize};

use super::terrain::TerrainSpec;
use crate::error::{Error, Result};
use crate::rng;

/// Ground-truth world: terrain ids and heights on a regular grid.
///
/// Cell `(row, col)` covers `x ∈ [col·res, (col+1)·res)`, `y ∈ [row·res, (row+1)·res)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldMap {
    pub rows: usize,
    pub cols: usize,
    pub resolution: f64,
    pub cells: Vec<usize>,
    pub elevation: Vec<f64>,
    pub terrains: Vec<TerrainSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub rows: usize,
    pub cols: usize,
    pub resolution: f64,
    /// Amplitude of the smooth elevation field (meters).
    pub elevation_amplitude: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            resolution: 0.25,
            elevation_amplitude: 0.03,
        }
    }
}

impl WorldMap {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) {
            return Err(Error::config("world resolution must be > 0"));
        }
        if self.cells.len() != self.rows * self.cols
            || self.elevation.len() != self.rows * self.cols
        {
            return Err(Error::invalid("world grid size mismatch"));
        }
        if let Some(bad) = self.cells.iter().find(|&&id| self.terrain(id).is_none()) {
            return Err(Error::invalid(format!(
                "cell references unknown terrain {bad}"
            )));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn width_m(&self) -> f64 {
        self.cols as f64 * self.resolution
    }

    pub fn height_m(&self) -> f64 {
        self.rows as f64 * self.resolution
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width_m() && y < self.height_m()
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        self.contains(x, y).then(|| {
            (
                (y / self.resolution) as usize,
                (x / self.resolution) as usize,
            )
        })
    }

    /// Cell containing `(x, y)`, clamped to the border.
    pub fn cell_clamped(&self, x: f64, y: f64) -> (usize, usize) {
        let r = (y / self.resolution)
            .floor()
            .clamp(0.0, (self.rows - 1) as f64) as usize;
        let c = (x / self.resolution)
            .floor()
            .clamp(0.0, (self.cols - 1) as f64) as usize;
        (r, c)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.resolution,
            (row as f64 + 0.5) * self.resolution,
        )
    }

    pub fn terrain_at_cell(&self, row: usize, col: usize) -> usize {
        self.cells[row * self.cols + col]
    }

    pub fn height_at_cell(&self, row: usize, col: usize) -> f64 {
        self.elevation[row * self.cols + col]
    }

    pub fn terrain_at(&self, x: f64, y: f64) -> Result<usize> {
        let (r, c) = self.cell_of(x, y).ok_or(Error::OutOfBounds { x, y })?;
        Ok(self.terrain_at_cell(r, c))
    }

    pub fn terrain(&self, id: usize) -> Option<&TerrainSpec> {
        self.terrains.iter().find(|t| t.id == id)
    }

    /// Bilinear interpolation of cell-center heights.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let fx = (x / self.resolution - 0.5).clamp(0.0, (self.cols - 1) as f64);
        let fy = (y / self.resolution - 0.5).clamp(0.0, (self.rows - 1) as f64);
        let (c0, r0) = (fx.floor() as usize, fy.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.cols - 1), (r0 + 1).min(self.rows - 1));
        let (tx, ty) = (fx - c0 as f64, fy - r0 as f64);
        let h = |r, c| self.height_at_cell(r, c);
        let top = h(r0, c0) * (1.0 - tx) + h(r0, c1) * tx;
        let bot = h(r1, c0) * (1.0 - tx) + h(r1, c1) * tx;
        top * (1.0 - ty) + bot * ty
    }

    /// All cells of one terrain.
    pub fn cells_of(&self, terrain: usize) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| self.terrain_at_cell(r, c) == terrain)
            .collect()
    }

    /// Cells of `terrain` whose whole `margin`-cell neighborhood is the same terrain.
    pub fn interior_cells_of(&self, terrain: usize, margin: usize) -> Vec<(usize, usize)> {
        self.cells_of(terrain)
            .into_iter()
            .filter(|&(r, c)| {
                r >= margin
                    && c >= margin
                    && r + margin < self.rows
                    && c + margin < self.cols
                    && (r - margin..=r + margin).all(|rr| {
                        (c - margin..=c + margin).all(|cc| self.terrain_at_cell(rr, cc) == terrain)
                    })
            })
            .collect()
    }
}

/// Voronoi partition with one well-separated site per terrain.
pub fn gen_world(
    spec: &WorldSpec,
    terrains: &[TerrainSpec],
    n_terrains: usize,
    seed: u64,
) -> Result<WorldMap> {
    if n_terrains < 2 {
        return Err(Error::config("need at least 2 terrains"));
    }
    if n_terrains > terrains.len() {
        return Err(Error::config(format!(
            "{n_terrains} terrains requested, only {} configured",
            terrains.len()
        )));
    }
    if spec.rows < 8 || spec.cols < 8 {
        return Err(Error::config("world must be at least 8x8 cells"));
    }
    if !(spec.resolution > 0.0) {
        return Err(Error::config("world resolution must be > 0"));
    }
    for t in terrains {
        t.validate()?;
    }
    let mut r = rng::stream(seed, "world-sites", n_terrains as u64);
    let (rows, cols) = (spec.rows as f64, spec.cols as f64);
    let mut min_sep = (rows * cols / n_terrains as f64).sqrt() * 0.8;
    let mut sites: Vec<(f64, f64)> = Vec::with_capacity(n_terrains);
    let mut attempts = 0;
    while sites.len() < n_terrains {
        let cand = (r.random_range(0.0..rows), r.random_range(0.0..cols));
        if sites
            .iter()
            .all(|s| (s.0 - cand.0).hypot(s.1 - cand.1) >= min_sep)
        {
            sites.push(cand);
        }
        attempts += 1;
        if attempts % 200 == 0 {
            min_sep *= 0.9;
        }
    }
    let mut cells = vec![0; spec.rows * spec.cols];
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
            let nearest = sites
                .iter()
                .enumerate()
                .map(|(i, s)| (i, (s.0 - y).powi(2) + (s.1 - x).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            cells[row * spec.cols + col] = terrains[nearest].id;
        }
    }
    // The site cell always belongs to its own region, so every terrain appears.
    let elevation = smooth_elevation(spec, seed);
    let world = WorldMap {
        rows: spec.rows,
        cols: spec.cols,
        resolution: spec.resolution,
        cells,
        elevation,
        terrains: terrains[..n_terrains].to_vec(),
    };
    world.validate()?;
    Ok(world)
}

fn smooth_elevation(spec: &WorldSpec, seed: u64) -> Vec<f64> {
    let mut out = vec![0.0; spec.rows * spec.cols];
    if spec.elevation_amplitude == 0.0 {
        return out;
    }
    let mut r = rng::stream(seed, "world-elevation", 0);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                r.random_range(0.5..2.0) * std::f64::consts::TAU / spec.cols as f64,
                r.random_range(0.5..2.0) * std::f64::consts::TAU / spec.rows as f64,
                r.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let h: f64 = waves
                .iter()
                .map(|(kx, ky, ph)| (kx * col as f64 + ky * row as f64 + ph).sin())
                .sum::<f64>()
                / 3.0;
            out[row * spec.cols + col] = spec.elevation_amplitude * (h + 1.0) / 2.0;
        }
    }
    out
}

/// Flat world with a high-effort band between start and goal columns and a
/// low-effort corridor that detours around it.
///
/// Layout (`rows × cols`): the background is `low`; a vertical band of `high`
/// spans the middle columns except for a gap along the top rows.
pub fn gen_corridor_world(
    rows: usize,
    cols: usize,
    resolution: f64,
    low: &TerrainSpec,
    high: &TerrainSpec,
) -> Result<WorldMap> {
    if rows < 8 || cols < 8 {
        return Err(Error::config("corridor world must be at least 8x8"));
    }
    let band = (cols / 3, cols - cols / 3);
    let gap_rows = (rows / 6).max(2);
    let mut cells = vec![low.id; rows * cols];
    for r in gap_rows..rows {
        for c in band.0..band.1 {
            cells[r * cols + c] = high.id;
        }
    }
    let world = WorldMap {
        rows,
        cols,
        resolution,
        cells,
        elevation: vec![0.0; rows * cols],
        terrains: vec![low.clone(), high.clone()],
    };
    world.validate()?;
    Ok(world)
}
