//! Skeleton topology, partitioned adjacency matrices, and degree
//! normalization.
//!
//! A skeleton is an undirected connected graph over `V` joints with a
//! designated center joint (a gravity-center proxy). Graph convolutions
//! consume the adjacency split into K partitions; each partition is
//! degree-normalized independently.

use serde::Deserialize;

use crate::error::GraphError;
use crate::tensor::{Real, Tensor};

/// Undirected joint graph with a designated center joint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonTopology {
    v: usize,
    edges: Vec<(usize, usize)>,
    center: usize,
}

#[derive(Deserialize)]
struct TopologyJson {
    #[serde(rename = "V")]
    v: usize,
    edges: Vec<(usize, usize)>,
    center: usize,
}

impl SkeletonTopology {
    /// Validates joint indices, rejects self-loops, and requires a single
    /// connected component.
    pub fn new(v: usize, edges: Vec<(usize, usize)>, center: usize) -> Result<Self, GraphError> {
        if v == 0 {
            return Err(GraphError::Empty);
        }
        if center >= v {
            return Err(GraphError::JointOutOfRange { index: center, joints: v });
        }
        for &(a, b) in &edges {
            for idx in [a, b] {
                if idx >= v {
                    return Err(GraphError::JointOutOfRange { index: idx, joints: v });
                }
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
        }
        let topo = Self { v, edges, center };
        let reached = topo.bfs_from(center);
        if let Some(u) = reached.iter().position(|d| d.is_none()) {
            return Err(GraphError::Disconnected(u));
        }
        Ok(topo)
    }

    /// Parses `{"V": int, "edges": [[i,j],...], "center": int}`.
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let raw: TopologyJson =
            serde_json::from_str(text).map_err(|e| GraphError::Json(e.to_string()))?;
        Self::new(raw.v, raw.edges, raw.center)
    }

    /// 25-joint body model (Kinect v2 convention), 24 bones, centered on the
    /// spine joint.
    pub fn ntu25() -> Self {
        let one_based = [
            (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
            (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14),
            (16, 15), (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8),
            (24, 25), (25, 12),
        ];
        let edges = one_based.iter().map(|&(a, b)| (a - 1, b - 1)).collect();
        Self::new(25, edges, 20).expect("builtin 25-joint topology is valid")
    }

    /// 18-joint pose-estimation model, centered on the neck.
    pub fn kinetics18() -> Self {
        let edges = vec![
            (4, 3), (3, 2), (7, 6), (6, 5), (13, 12), (12, 11), (10, 9), (9, 8),
            (11, 5), (8, 2), (5, 1), (2, 1), (0, 1), (15, 0), (14, 0), (17, 15),
            (16, 14),
        ];
        Self::new(18, edges, 1).expect("builtin 18-joint topology is valid")
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn center(&self) -> usize {
        self.center
    }

    fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.v];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    fn bfs_from(&self, start: usize) -> Vec<Option<usize>> {
        let adj = self.neighbor_lists();
        let mut dist = vec![None; self.v];
        dist[start] = Some(0);
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for &w in &adj[u] {
                if dist[w].is_none() {
                    dist[w] = Some(du + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Hop distance from every joint to the center joint.
    pub fn hop_distances(&self) -> Vec<usize> {
        self.bfs_from(self.center).into_iter().map(|d| d.unwrap()).collect()
    }

    /// For each joint, the neighbor one hop closer to the center (`None` for
    /// the center itself). Defines bone orientation: a bone vector points
    /// from this parent to the joint.
    pub fn parents_toward_center(&self) -> Vec<Option<usize>> {
        let adj = self.neighbor_lists();
        let mut parent = vec![None; self.v];
        let mut seen = vec![false; self.v];
        seen[self.center] = true;
        let mut queue = std::collections::VecDeque::from([self.center]);
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = Some(u);
                    queue.push_back(w);
                }
            }
        }
        parent
    }

    /// Symmetric 0/1 bone adjacency (no self connections).
    pub fn bone_adjacency(&self) -> Tensor<f64> {
        let mut a = Tensor::zeros(&[self.v, self.v]);
        for &(i, j) in &self.edges {
            a.data_mut()[i * self.v + j] = 1.0;
            a.data_mut()[j * self.v + i] = 1.0;
        }
        a
    }
}

/// How the neighborhood of each joint is split into adjacency partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionStrategy {
    /// One partition holding every joint and itself.
    Uniform,
    /// Self connections and bone connections, separately.
    Distance,
    /// Self + equidistant ties, closer-to-center, farther-from-center.
    Spatial,
}

impl PartitionStrategy {
    pub fn partitions(self) -> usize {
        match self {
            Self::Uniform => 1,
            Self::Distance => 2,
            Self::Spatial => 3,
        }
    }
}

fn identity(v: usize) -> Tensor<f64> {
    Tensor::from_fn(&[v, v], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 })
}

/// Raw (unnormalized) 0/1 partition matrices. Their elementwise sum equals
/// bone adjacency + identity for every strategy.
pub fn partition_adjacency(
    topo: &SkeletonTopology,
    strategy: PartitionStrategy,
) -> Vec<Tensor<f64>> {
    let v = topo.v();
    let bones = topo.bone_adjacency();
    match strategy {
        PartitionStrategy::Uniform => {
            let mut m = bones;
            for i in 0..v {
                m.data_mut()[i * v + i] += 1.0;
            }
            vec![m]
        }
        PartitionStrategy::Distance => vec![identity(v), bones],
        PartitionStrategy::Spatial => {
            let d = topo.hop_distances();
            let mut root = identity(v);
            let mut toward = Tensor::zeros(&[v, v]);
            let mut away = Tensor::zeros(&[v, v]);
            for i in 0..v {
                for j in 0..v {
                    if bones.data()[i * v + j] == 0.0 {
                        continue;
                    }
                    let cell = i * v + j;
                    match d[j].cmp(&d[i]) {
                        std::cmp::Ordering::Less => toward.data_mut()[cell] = 1.0,
                        std::cmp::Ordering::Greater => away.data_mut()[cell] = 1.0,
                        std::cmp::Ordering::Equal => root.data_mut()[cell] = 1.0,
                    }
                }
            }
            vec![root, toward, away]
        }
    }
}

/// Symmetric degree normalization `D^{-1/2} · raw · D^{-1/2}` with
/// `D_ii = Σ_j raw_ij`. Joints with zero degree keep a zero row and column
/// instead of dividing by zero.
pub fn normalize_adjacency(raw: &Tensor<f64>) -> Result<Tensor<f64>, GraphError> {
    let v = raw.shape()[0];
    assert_eq!(raw.shape(), [v, v], "adjacency must be square");
    for (cell, &x) in raw.data().iter().enumerate() {
        if x < 0.0 {
            return Err(GraphError::NegativeEntry { row: cell / v, col: cell % v });
        }
    }
    let scale: Vec<f64> = (0..v)
        .map(|i| {
            let deg: f64 = raw.data()[i * v..(i + 1) * v].iter().sum();
            if deg > 0.0 { deg.powf(-0.5) } else { 0.0 }
        })
        .collect();
    Ok(Tensor::from_fn(&[v, v], |ix| {
        raw.data()[ix[0] * v + ix[1]] * scale[ix[0]] * scale[ix[1]]
    }))
}

/// The K normalized partition matrices a graph-convolution layer consumes.
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct AdjacencySet {
    mats: Vec<Tensor<f64>>,
    v: usize,
}

impl AdjacencySet {
    pub fn build(topo: &SkeletonTopology, strategy: PartitionStrategy) -> Result<Self, GraphError> {
        let mats = partition_adjacency(topo, strategy)
            .iter()
            .map(normalize_adjacency)
            .collect::<Result<_, _>>()?;
        Ok(Self { mats, v: topo.v() })
    }

    /// Single all-ones adjacency (normalized to 1/V everywhere): every joint
    /// attends every joint with equal fixed weight.
    pub fn fully_connected(v: usize) -> Self {
        let ones = Tensor::full(&[v, v], 1.0);
        let mats = vec![normalize_adjacency(&ones).expect("all-ones is non-negative")];
        Self { mats, v }
    }

    pub fn k(&self) -> usize {
        self.mats.len()
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn mats(&self) -> &[Tensor<f64>] {
        &self.mats
    }

    pub fn cast<F: Real>(&self) -> Vec<Tensor<F>> {
        self.mats.iter().map(Tensor::cast).collect()
    }
}

/// Largest-magnitude eigenvalue estimate by power iteration. Intended for
/// symmetric matrices, where the estimate converges to the spectral norm.
pub fn spectral_radius(m: &Tensor<f64>, iters: usize) -> f64 {
    let v = m.shape()[0];
    assert_eq!(m.shape(), [v, v], "spectral_radius expects a square matrix");
    let mut x = vec![1.0 / (v as f64).sqrt(); v];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let mut y = vec![0.0; v];
        for i in 0..v {
            for j in 0..v {
                y[i] += m.data()[i * v + j] * x[j];
            }
        }
        let norm = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / norm;
        }
    }
    lambda.abs()
}
