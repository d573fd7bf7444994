//! Skeleton graphs, hop-distance partitions and the spatio-temporal
//! multi-graph operators consumed by the convolution layers.
//!
//! Node `(frame t, joint v)` of the multi-graph has index `t * V + v`.
//! Layer `k` of the multi-graph is built by tiling the hop-`k` skeleton
//! partition into every `(t1, t2)` block with `|t1 - t2| <= L`. For `k = 0`
//! that yields self-loops plus same-joint links across frames; for `k >= 1`
//! it links joints `k` hops apart inside a frame and across nearby frames.

use std::collections::{BTreeSet, VecDeque};
use std::io::{BufRead, Write};
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::SparseOperator;

/// Undirected natural-link skeleton.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonGraph {
    joint_count: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl SkeletonGraph {
    /// Edges are stored as `(min, max)` pairs; duplicates collapse.
    pub fn new(joint_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if joint_count == 0 {
            return Err(Error::InvalidSkeleton("joint count must be positive".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= joint_count || b >= joint_count {
                return Err(Error::InvalidSkeleton(format!(
                    "edge ({a}, {b}) out of range for {joint_count} joints"
                )));
            }
            if a == b {
                return Err(Error::InvalidSkeleton(format!("self-loop at joint {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(SkeletonGraph {
            joint_count,
            edges: set,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// The skeleton with joint `v` renamed to `perm[v]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        SkeletonGraph::new(self.joint_count, self.edges().map(|(a, b)| (perm[a], perm[b])))
    }

    fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.joint_count];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }
}

/// All-pairs shortest-path lengths, one breadth-first search per source.
pub fn hop_distances(graph: &SkeletonGraph) -> Result<Array2<usize>> {
    let n = graph.joint_count();
    let adj = graph.neighbors();
    let mut dist = Array2::from_elem((n, n), usize::MAX);
    let mut queue = VecDeque::new();
    for src in 0..n {
        dist[[src, src]] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let du = dist[[src, u]];
            for &w in &adj[u] {
                if dist[[src, w]] == usize::MAX {
                    dist[[src, w]] = du + 1;
                    queue.push_back(w);
                }
            }
        }
        if let Some(to) = (0..n).find(|&j| dist[[src, j]] == usize::MAX) {
            return Err(Error::Disconnected { from: src, to });
        }
    }
    Ok(dist)
}

/// Binary layers `g_0 ..= g_D`, `g_k(i, j) = 1` iff `d(i, j) = k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HopPartition {
    pub max_hop: usize,
    pub layers: Vec<Array2<f64>>,
}

impl HopPartition {
    pub fn joint_count(&self) -> usize {
        self.layers[0].nrows()
    }

    /// `Σ_k g_k`: the reachability matrix thresholded at `D` hops.
    pub fn combined(&self) -> Array2<f64> {
        self.layers
            .iter()
            .fold(Array2::zeros(self.layers[0].raw_dim()), |acc, g| acc + g)
    }
}

pub fn build_hop_partition(graph: &SkeletonGraph, max_hop: usize) -> Result<HopPartition> {
    let dist = hop_distances(graph)?;
    let layers = (0..=max_hop)
        .map(|k| dist.mapv(|d| if d == k { 1.0 } else { 0.0 }))
        .collect();
    Ok(HopPartition { max_hop, layers })
}

/// Normalized multi-graph operators over `V * T` nodes, one per hop layer.
#[derive(Debug, Clone)]
pub struct PartitionedMultiGraph {
    joint_count: usize,
    frame_count: usize,
    span: usize,
    max_hop: usize,
    raw: Vec<Array2<f64>>,
    operators: Vec<Array2<f64>>,
    sparse: Vec<Arc<SparseOperator>>,
}

impl PartitionedMultiGraph {
    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn span(&self) -> usize {
        self.span
    }

    pub fn max_hop(&self) -> usize {
        self.max_hop
    }

    pub fn node_count(&self) -> usize {
        self.joint_count * self.frame_count
    }

    pub fn partition_count(&self) -> usize {
        self.operators.len()
    }

    /// Pre-normalization 0/1 adjacency of each layer.
    pub fn raw(&self) -> &[Array2<f64>] {
        &self.raw
    }

    /// Normalized operators `Â_k`.
    pub fn operators(&self) -> &[Array2<f64>] {
        &self.operators
    }

    pub fn sparse(&self) -> &[Arc<SparseOperator>] {
        &self.sparse
    }

    /// Text header `V T L D k` for layer `k`.
    pub fn header(&self, k: usize) -> MatrixHeader {
        MatrixHeader {
            joints: self.joint_count,
            frames: self.frame_count,
            span: self.span,
            max_hop: self.max_hop,
            layer: k,
        }
    }
}

pub fn build_multigraph(
    partition: &HopPartition,
    frame_count: usize,
    span: usize,
) -> Result<PartitionedMultiGraph> {
    if frame_count == 0 {
        return Err(Error::config("frame_count", "must be at least 1"));
    }
    let v = partition.joint_count();
    let n = v * frame_count;
    let mut raw = Vec::with_capacity(partition.layers.len());
    for g in &partition.layers {
        let mut big = Array2::zeros((n, n));
        for t1 in 0..frame_count {
            for t2 in 0..frame_count {
                if t1.abs_diff(t2) <= span {
                    big.slice_mut(ndarray::s![t1 * v..(t1 + 1) * v, t2 * v..(t2 + 1) * v])
                        .assign(g);
                }
            }
        }
        raw.push(big);
    }
    let operators = raw.iter().map(normalize).collect::<Result<Vec<_>>>()?;
    let sparse = operators
        .iter()
        .map(|op| {
            let dense: Vec<f64> = op.iter().copied().collect();
            Arc::new(SparseOperator::from_dense(n, &dense))
        })
        .collect();
    Ok(PartitionedMultiGraph {
        joint_count: v,
        frame_count,
        span,
        max_hop: partition.max_hop,
        raw,
        operators,
        sparse,
    })
}

/// Convenience: skeleton → partition → multi-graph.
pub fn multigraph_for(
    graph: &SkeletonGraph,
    frame_count: usize,
    span: usize,
    max_hop: usize,
) -> Result<PartitionedMultiGraph> {
    build_multigraph(&build_hop_partition(graph, max_hop)?, frame_count, span)
}

/// Symmetric degree normalization `D^{-1/2} A D^{-1/2}`; isolated nodes keep
/// zero rows and columns.
pub fn normalize(adjacency: &Array2<f64>) -> Result<Array2<f64>> {
    let n = adjacency.nrows();
    if adjacency.ncols() != n {
        return Err(Error::dim("normalize", &[n, adjacency.ncols()], &[n, n]));
    }
    for i in 0..n {
        for j in i + 1..n {
            if adjacency[[i, j]] != adjacency[[j, i]] {
                return Err(Error::Asymmetric { row: i, col: j });
            }
        }
    }
    let inv_sqrt: Vec<f64> = adjacency
        .rows()
        .into_iter()
        .map(|r| {
            let d: f64 = r.sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        adjacency[[i, j]] * inv_sqrt[i] * inv_sqrt[j]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixHeader {
    pub joints: usize,
    pub frames: usize,
    pub span: usize,
    pub max_hop: usize,
    pub layer: usize,
}

/// Writes one header line `V T L D k`, then the matrix row-major with
/// space-separated values (shortest round-trip formatting).
pub fn write_matrix_text(out: &mut impl Write, header: MatrixHeader, m: &Array2<f64>) -> Result<()> {
    writeln!(
        out,
        "{} {} {} {} {}",
        header.joints, header.frames, header.span, header.max_hop, header.layer
    )?;
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_matrix_text(input: impl BufRead) -> Result<(MatrixHeader, Array2<f64>)> {
    let mut lines = input.lines().enumerate();
    let bad = |line: usize, message: &str| Error::ParseLine {
        line: line + 1,
        message: message.into(),
    };
    let (_, head) = lines.next().ok_or_else(|| bad(0, "missing header"))?;
    let fields: Vec<usize> = head?
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| bad(0, "header must be five integers"))?;
    let [joints, frames, span, max_hop, layer] = fields[..] else {
        return Err(bad(0, "header must be five integers"));
    };
    let header = MatrixHeader {
        joints,
        frames,
        span,
        max_hop,
        layer,
    };
    let n = joints * frames;
    let mut values = Vec::with_capacity(n * n);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| bad(i, "non-numeric entry"))?;
        if row.len() != n {
            return Err(bad(i, &format!("expected {n} columns, found {}", row.len())));
        }
        values.extend(row);
    }
    if values.len() != n * n {
        return Err(bad(n, &format!("expected {n} rows, found {}", values.len() / n.max(1))));
    }
    let m = Array2::from_shape_vec((n, n), values).expect("length checked");
    Ok((header, m))
}
