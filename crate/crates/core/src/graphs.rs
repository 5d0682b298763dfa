//! Object graphs built from a topology vector, plus the diameter and
//! mean-average-distance analyses.
//!
//! Nodes are grid objects in topology-vector order. The homogeneous graph
//! joins objects on the same busbar and the two ends of each line; the
//! heterogeneous graph adds typed edges between the two busbars of a
//! substation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::grid::{GridSpec, TopologyVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Homogeneous,
    Heterogeneous,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Homogeneous => "homogeneous",
            Representation::Heterogeneous => "heterogeneous",
        })
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "homogeneous" | "hom" => Ok(Self::Homogeneous),
            "heterogeneous" | "het" => Ok(Self::Heterogeneous),
            _ => Err(Error::Config(format!("unknown graph representation {s:?}"))),
        }
    }
}

/// Undirected, typed edge lists over `n_nodes` objects. Pairs are stored
/// once with the smaller index first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridGraph {
    pub n_nodes: usize,
    pub representation: Representation,
    pub same_busbar: Vec<(usize, usize)>,
    pub other_busbar: Vec<(usize, usize)>,
    pub line: Vec<(usize, usize)>,
    /// Objects connected to a busbar.
    pub active: Vec<bool>,
}

pub fn build_graph(spec: &GridSpec, topology: &TopologyVector, representation: Representation) -> GridGraph {
    let n = spec.n_objects();
    let mut same_busbar = Vec::new();
    let mut other_busbar = Vec::new();
    for s in 0..spec.n_substations {
        let objs = spec.substation_objects(s);
        for (i, &a) in objs.iter().enumerate() {
            if !topology.is_connected(a) {
                continue;
            }
            for &b in &objs[i + 1..] {
                if !topology.is_connected(b) {
                    continue;
                }
                if topology.0[a] == topology.0[b] {
                    same_busbar.push((a, b));
                } else if representation == Representation::Heterogeneous {
                    other_busbar.push((a, b));
                }
            }
        }
    }
    let line = (0..spec.n_lines())
        .filter(|&l| topology.line_enabled(spec, l))
        .map(|l| spec.line_endpoints(l))
        .collect();
    GridGraph {
        n_nodes: n,
        representation,
        same_busbar,
        other_busbar,
        line,
        active: (0..n).map(|i| topology.is_connected(i)).collect(),
    }
}

impl GridGraph {
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.same_busbar
            .iter()
            .chain(&self.other_busbar)
            .chain(&self.line)
            .copied()
    }

    pub fn n_edges(&self) -> usize {
        self.same_busbar.len() + self.other_busbar.len() + self.line.len()
    }

    /// Neighbour lists over all edge types.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }
}

/// Fixed-width bitset rows of a square boolean matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
struct BitMatrix {
    words: usize,
    rows: Vec<u64>,
}

impl BitMatrix {
    fn new(n: usize) -> Self {
        let words = n.div_ceil(64).max(1);
        Self {
            words,
            rows: vec![0; n * words],
        }
    }

    fn set(&mut self, r: usize, c: usize) {
        self.rows[r * self.words + c / 64] |= 1 << (c % 64);
    }

    fn row(&self, r: usize) -> &[u64] {
        &self.rows[r * self.words..(r + 1) * self.words]
    }

    fn get(&self, r: usize, c: usize) -> bool {
        self.row(r)[c / 64] >> (c % 64) & 1 == 1
    }

    /// Boolean product `self · rhs`.
    fn mul(&self, rhs: &BitMatrix, n: usize) -> BitMatrix {
        let mut out = BitMatrix::new(n);
        for i in 0..n {
            for j in 0..n {
                if self.get(i, j) {
                    for w in 0..self.words {
                        out.rows[i * self.words + w] |= rhs.rows[j * self.words + w];
                    }
                }
            }
        }
        out
    }
}

/// Smallest `k` with `(A + I)^k` positive on every pair of active nodes,
/// where `A` merges all edge types; `None` if the active nodes are not
/// connected. Zero or one active node gives 0.
pub fn diameter(graph: &GridGraph) -> Option<usize> {
    let n = graph.n_nodes;
    let active: Vec<usize> = (0..n).filter(|&i| graph.active[i]).collect();
    if active.len() <= 1 {
        return Some(0);
    }
    let mut a = BitMatrix::new(n);
    for &i in &active {
        a.set(i, i);
    }
    for (u, v) in graph.edges() {
        a.set(u, v);
        a.set(v, u);
    }
    let mut mask = BitMatrix::new(n);
    for &i in &active {
        mask.set(0, i);
    }
    let full = |p: &BitMatrix| {
        active
            .iter()
            .all(|&i| p.row(i).iter().zip(mask.row(0)).all(|(&r, &m)| r & m == m))
    };
    let mut power = a.clone();
    for k in 1..active.len() {
        if full(&power) {
            return Some(k);
        }
        power = power.mul(&a, n);
    }
    None
}

/// Mean over nodes with at least one neighbour of the mean cosine distance
/// to those neighbours (all edge types). Pairs involving a zero vector count
/// as distance 1.
pub fn mad(embeddings: &[Vec<f64>], graph: &GridGraph) -> f64 {
    let adj = graph.neighbors();
    let norms: Vec<f64> = embeddings.iter().map(|e| e.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut total = 0.0;
    let mut counted = 0usize;
    for (u, nbrs) in adj.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let mut s = 0.0;
        for &v in nbrs {
            s += if norms[u] == 0.0 || norms[v] == 0.0 {
                1.0
            } else {
                let dot: f64 = embeddings[u].iter().zip(&embeddings[v]).map(|(a, b)| a * b).sum();
                1.0 - dot / (norms[u] * norms[v])
            };
        }
        total += s / nbrs.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Short stable hash of a topology, used to label analysis rows.
pub fn topology_hash(topology: &TopologyVector) -> String {
    use sha2::{Digest, Sha256};
    let bytes: Vec<u8> = topology.0.iter().map(|&v| v as u8).collect();
    Sha256::digest(&bytes).iter().take(6).map(|b| format!("{b:02x}")).collect()
}
