//! Spatial lattice: regions and their neighbour relations.
//!
//! Edge-list files use 1-based region indices, one `k l` pair per line,
//! whitespace separated. Everything after `#` on a line is a comment.
//! Internally regions are 0-based.

use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialGraph {
    n_regions: usize,
    /// Unordered pairs stored as `(low, high)`, 0-based.
    edges: BTreeSet<(usize, usize)>,
    neighbours: Vec<Vec<usize>>,
}

impl SpatialGraph {
    /// Builds a graph from 0-based edges. Duplicates collapse; self-loops and
    /// out-of-range indices are rejected.
    pub fn from_edges(n_regions: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_regions == 0 {
            return Err(Error::InvalidArgument(
                "graph needs at least one region".into(),
            ));
        }
        let mut set = BTreeSet::new();
        for (i, &(a, b)) in edges.iter().enumerate() {
            for idx in [a, b] {
                if idx >= n_regions {
                    return Err(Error::RegionOutOfRange {
                        line: i + 1,
                        index: idx + 1,
                        n_regions,
                    });
                }
            }
            if a == b {
                return Err(Error::SelfLoop {
                    line: i + 1,
                    region: a + 1,
                });
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self::from_set(n_regions, set))
    }

    fn from_set(n_regions: usize, edges: BTreeSet<(usize, usize)>) -> Self {
        let mut neighbours = vec![Vec::new(); n_regions];
        for &(a, b) in &edges {
            neighbours[a].push(b);
            neighbours[b].push(a);
        }
        for list in &mut neighbours {
            list.sort_unstable();
        }
        for (k, list) in neighbours.iter().enumerate() {
            if list.is_empty() && n_regions > 1 {
                log::warn!("region {} has no neighbours", k + 1);
            }
        }
        Self {
            n_regions,
            edges,
            neighbours,
        }
    }

    /// Parses the edge-list text format.
    pub fn load_adjacency(text: &str, n_regions: usize) -> Result<Self> {
        if n_regions == 0 {
            return Err(Error::InvalidArgument(
                "graph needs at least one region".into(),
            ));
        }
        let mut set = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected two region indices, found {}", fields.len()),
                });
            }
            let mut idx = [0usize; 2];
            for (slot, field) in idx.iter_mut().zip(&fields) {
                *slot = field.parse::<usize>().map_err(|_| Error::Parse {
                    line,
                    message: format!("`{field}` is not a region index"),
                })?;
                if *slot == 0 || *slot > n_regions {
                    return Err(Error::RegionOutOfRange {
                        line,
                        index: *slot,
                        n_regions,
                    });
                }
            }
            if idx[0] == idx[1] {
                return Err(Error::SelfLoop {
                    line,
                    region: idx[0],
                });
            }
            let (a, b) = (idx[0] - 1, idx[1] - 1);
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self::from_set(n_regions, set))
    }

    /// Rook-adjacency lattice with `rows * cols` regions, numbered row-major.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let k = r * cols + c;
                if c + 1 < cols {
                    edges.push((k, k + 1));
                }
                if r + 1 < rows {
                    edges.push((k, k + cols));
                }
            }
        }
        Self::from_edges(rows * cols, &edges)
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbours(&self, k: usize) -> &[usize] {
        &self.neighbours[k]
    }

    pub fn degree(&self, k: usize) -> usize {
        self.neighbours[k].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbours.iter().map(Vec::len).collect()
    }

    pub fn is_adjacent(&self, k: usize, l: usize) -> bool {
        self.edges.contains(&(k.min(l), k.max(l)))
    }

    /// Dense 0/1 adjacency `W`, row-major.
    pub fn adjacency_dense(&self) -> Vec<Vec<u8>> {
        let mut w = vec![vec![0u8; self.n_regions]; self.n_regions];
        for &(a, b) in &self.edges {
            w[a][b] = 1;
            w[b][a] = 1;
        }
        w
    }

    pub fn isolated_regions(&self) -> Vec<usize> {
        (0..self.n_regions)
            .filter(|&k| self.neighbours[k].is_empty())
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n_regions];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(k) = queue.pop_front() {
            for &l in &self.neighbours[k] {
                if !seen[l] {
                    seen[l] = true;
                    count += 1;
                    queue.push_back(l);
                }
            }
        }
        count == self.n_regions
    }

    /// Edge-list text in the same format `load_adjacency` reads.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for &(a, b) in &self.edges {
            out.push_str(&format!("{} {}\n", a + 1, b + 1));
        }
        out
    }
}
