//! Voxel and sensor adjacency graphs.

use std::collections::BTreeSet;

use crate::error::{invalid_input, Result};
use crate::sim::{Anatomy, SensorArray};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    VoxelKnn6,
    SensorKnn5,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub kind: GraphKind,
    /// Sorted neighbour lists without self-loops.
    pub neighbors: Vec<Vec<usize>>,
    /// Node positions normalised to [-1, 1] per axis.
    pub positions: Vec<[f64; 3]>,
}

pub const MIN_GRAPH_NODES: usize = 6;
pub const SENSOR_NEIGHBORS: usize = 5;

impl GraphSpec {
    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn mean_degree(&self) -> f64 {
        self.neighbors.iter().map(Vec::len).sum::<usize>() as f64 / self.n_nodes() as f64
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors.iter().enumerate().all(|(i, nb)| {
            nb.iter()
                .all(|&j| self.neighbors[j].binary_search(&i).is_ok())
        })
    }
}

fn normalise(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    points
        .iter()
        .map(|p| {
            let mut q = [0.0; 3];
            for a in 0..3 {
                let span = hi[a] - lo[a];
                q[a] = if span > 0.0 {
                    2.0 * (p[a] - lo[a]) / span - 1.0
                } else {
                    0.0
                };
            }
            q
        })
        .collect()
}

/// Edges between face-adjacent voxels of a set of lattice cells.
pub fn lattice_graph(cells: &[[usize; 3]]) -> Result<GraphSpec> {
    if cells.len() < MIN_GRAPH_NODES {
        return Err(invalid_input(format!(
            "graph needs at least {MIN_GRAPH_NODES} nodes, got {}",
            cells.len()
        )));
    }
    let index: std::collections::HashMap<[usize; 3], usize> =
        cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut neighbors = Vec::with_capacity(cells.len());
    for c in cells {
        let mut nb = Vec::new();
        for a in 0..3 {
            for step in [-1i64, 1] {
                let v = c[a] as i64 + step;
                if v < 0 {
                    continue;
                }
                let mut q = *c;
                q[a] = v as usize;
                if let Some(&j) = index.get(&q) {
                    nb.push(j);
                }
            }
        }
        nb.sort_unstable();
        neighbors.push(nb);
    }
    let pts: Vec<[f64; 3]> = cells.iter().map(|c| c.map(|x| x as f64)).collect();
    Ok(GraphSpec {
        kind: GraphKind::VoxelKnn6,
        neighbors,
        positions: normalise(&pts),
    })
}

pub fn voxel_graph(anat: &Anatomy) -> Result<GraphSpec> {
    lattice_graph(&anat.voxel_cells)
}

/// Directed k-nearest-neighbour graph, symmetrised.
pub fn knn_graph(points: &[[f64; 3]], k: usize) -> Result<GraphSpec> {
    let n = points.len();
    if n < MIN_GRAPH_NODES {
        return Err(invalid_input(format!(
            "graph needs at least {MIN_GRAPH_NODES} nodes, got {n}"
        )));
    }
    let mut sets = vec![BTreeSet::new(); n];
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                (
                    (0..3)
                        .map(|a| (points[i][a] - points[j][a]).powi(2))
                        .sum::<f64>(),
                    j,
                )
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in d.iter().take(k) {
            sets[i].insert(j);
            sets[j].insert(i);
        }
    }
    Ok(GraphSpec {
        kind: GraphKind::SensorKnn5,
        neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        positions: normalise(points),
    })
}

pub fn sensor_graph(sensors: &SensorArray) -> Result<GraphSpec> {
    knn_graph(&sensors.positions, SENSOR_NEIGHBORS)
}
