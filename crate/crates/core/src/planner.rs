//! Terrain-aware A* over the observed cells of an elevation map.
//!
//! Edges join 8-connected observed cells. An edge costs its 3D length times
//! `1 + (1 − t̄)·w_trav`, where `t̄` is the mean traversability of its two
//! cells, so the horizontal Euclidean distance stays an admissible heuristic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::io::Write;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::ElevationMap;

pub type Cell = (usize, usize);

pub const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanQuery {
    pub start: Cell,
    pub goal: Cell,
    pub w_trav: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub cells: Vec<Cell>,
    pub heights: Vec<f64>,
    /// Cost accumulated up to each cell (0 at the start).
    pub cumulative: Vec<f64>,
    pub total_cost: f64,
    /// 3D length (m).
    pub total_length: f64,
}

impl Path {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// `row,col,height,cumulative_cost` per cell.
    pub fn write_csv(&self, path: &FsPath) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "row,col,height,cumulative_cost")?;
        for (i, (r, c)) in self.cells.iter().enumerate() {
            writeln!(f, "{r},{c},{},{}", self.heights[i], self.cumulative[i])?;
        }
        Ok(())
    }
}

fn horizontal(map: &ElevationMap, a: Cell, b: Cell) -> f64 {
    let (dr, dc) = (a.0.abs_diff(b.0), a.1.abs_diff(b.1));
    if dr + dc == 2 {
        map.resolution * std::f64::consts::SQRT_2
    } else {
        map.resolution
    }
}

/// Cost of moving between two adjacent observed cells.
pub fn edge_cost(map: &ElevationMap, a: Cell, b: Cell, w_trav: f64) -> Result<f64> {
    let adjacent = a != b && a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1;
    if !adjacent || !map.is_observed(a.0, a.1) || !map.is_observed(b.0, b.1) {
        return Err(Error::InvalidEdge { a, b });
    }
    let (ia, ib) = (map.idx(a.0, a.1), map.idx(b.0, b.1));
    let dz = map.height[ia] - map.height[ib];
    let l = horizontal(map, a, b);
    let t = (map.traversability[ia] + map.traversability[ib]) / 2.0;
    Ok((l * l + dz * dz).sqrt() * (1.0 + (1.0 - t) * w_trav))
}

/// Observed 8-neighbors of a cell in fixed order.
pub fn neighbors(map: &ElevationMap, c: Cell) -> impl Iterator<Item = Cell> + '_ {
    NEIGHBORS.iter().filter_map(move |&(dr, dc)| {
        let (r, k) = (c.0.checked_add_signed(dr)?, c.1.checked_add_signed(dc)?);
        map.is_observed(r, k).then_some((r, k))
    })
}

fn heuristic(map: &ElevationMap, a: Cell, b: Cell) -> f64 {
    let (dr, dc) = (a.0 as f64 - b.0 as f64, a.1 as f64 - b.1 as f64);
    dr.hypot(dc) * map.resolution
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    g: f64,
    cell: Cell,
}

impl Eq for Open {}

impl Ord for Open {
    // BinaryHeap is a max-heap: reverse so the smallest f, then g, then cell pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(other.g.total_cmp(&self.g))
            .then(other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Builds the path record, re-summing edge costs from the start.
pub fn path_from_cells(map: &ElevationMap, cells: Vec<Cell>, w_trav: f64) -> Result<Path> {
    let mut cumulative = vec![0.0];
    let mut length = 0.0;
    for w in cells.windows(2) {
        let c = edge_cost(map, w[0], w[1], w_trav)?;
        cumulative.push(cumulative.last().unwrap() + c);
        let dz = map.height[map.idx(w[0].0, w[0].1)] - map.height[map.idx(w[1].0, w[1].1)];
        length += horizontal(map, w[0], w[1]).hypot(dz);
    }
    let heights = cells
        .iter()
        .map(|&(r, c)| map.height[map.idx(r, c)])
        .collect();
    Ok(Path {
        total_cost: *cumulative.last().unwrap(),
        cells,
        heights,
        cumulative,
        total_length: length,
    })
}

/// Minimum-cost path, or `None` when the goal is unreachable.
pub fn plan(map: &ElevationMap, query: &PlanQuery) -> Result<Option<Path>> {
    let PlanQuery {
        start,
        goal,
        w_trav,
    } = *query;
    if !(w_trav >= 0.0) {
        return Err(Error::invalid("w_trav must be >= 0"));
    }
    if start == goal {
        return Err(Error::invalid("start and goal coincide"));
    }
    for (name, c) in [("start", start), ("goal", goal)] {
        if !map.is_observed(c.0, c.1) {
            return Err(Error::invalid(format!("{name} cell {c:?} is not observed")));
        }
    }
    let n = map.rows * map.cols;
    let mut g = vec![f64::INFINITY; n];
    let mut parent: Vec<Option<Cell>> = vec![None; n];
    let mut open = BinaryHeap::new();
    g[map.idx(start.0, start.1)] = 0.0;
    open.push(Open {
        f: heuristic(map, start, goal),
        g: 0.0,
        cell: start,
    });
    while let Some(Open { g: gc, cell, .. }) = open.pop() {
        // stale entry: a cheaper route to this cell was queued later
        if gc > g[map.idx(cell.0, cell.1)] {
            continue;
        }
        if cell == goal {
            let mut cells = vec![goal];
            while let Some(p) = parent[map.idx(cells.last().unwrap().0, cells.last().unwrap().1)] {
                cells.push(p);
            }
            cells.reverse();
            return path_from_cells(map, cells, w_trav).map(Some);
        }
        for nb in neighbors(map, cell) {
            let cand = gc + edge_cost(map, cell, nb, w_trav)?;
            let k = map.idx(nb.0, nb.1);
            if cand < g[k] {
                g[k] = cand;
                parent[k] = Some(cell);
                open.push(Open {
                    f: cand + heuristic(map, nb, goal),
                    g: cand,
                    cell: nb,
                });
            }
        }
    }
    Ok(None)
}
