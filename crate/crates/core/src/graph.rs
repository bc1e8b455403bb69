//! Sensor graph construction and diffusion operators.

use std::fmt::Write as _;

use crate::diffengine::tape::{matmul_raw, sym_normalize_raw};
use crate::diffengine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Road-network distance between two sensors.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceEdge {
    pub src: usize,
    pub dst: usize,
    pub distance: f64,
}

/// Weighted directed graph over `n` sensors with a dense adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorGraph {
    n: usize,
    edges: Vec<Edge>,
    adjacency: Tensor,
    /// Row sums of the adjacency.
    in_degree: Vec<f64>,
    /// Column sums of the adjacency.
    out_degree: Vec<f64>,
}

impl SensorGraph {
    pub fn from_edges(n: usize, edges: Vec<Edge>) -> Result<Self> {
        let mut adjacency = Tensor::zeros(&[n, n]);
        for e in &edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge {}->{} outside node range {}",
                    e.src, e.dst, n
                )));
            }
            if !(e.weight >= 0.0 && e.weight.is_finite()) {
                return Err(Error::InvalidArgument(format!("edge weight {} must be finite and >= 0", e.weight)));
            }
            adjacency.set(&[e.src, e.dst], e.weight);
        }
        Ok(Self::with_adjacency(n, edges, adjacency))
    }

    /// Builds a graph from a dense adjacency; every positive entry becomes an edge.
    pub fn from_dense(adjacency: Tensor) -> Result<Self> {
        if adjacency.rank() != 2 || adjacency.shape()[0] != adjacency.shape()[1] {
            return Err(Error::shape("graph", format!("{:?}", adjacency.shape())));
        }
        let n = adjacency.shape()[0];
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let w = adjacency.at(&[i, j]);
                if w < 0.0 {
                    return Err(Error::InvalidArgument("negative adjacency weight".into()));
                }
                if w > 0.0 {
                    edges.push(Edge { src: i, dst: j, weight: w });
                }
            }
        }
        Ok(Self::with_adjacency(n, edges, adjacency))
    }

    fn with_adjacency(n: usize, edges: Vec<Edge>, adjacency: Tensor) -> Self {
        let a = adjacency.data();
        let in_degree = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
        let out_degree = (0..n).map(|j| (0..n).map(|i| a[i * n + j]).sum()).collect();
        SensorGraph {
            n,
            edges,
            adjacency,
            in_degree,
            out_degree,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency.data()[i * self.n + j]
    }

    pub fn in_degree(&self) -> &[f64] {
        &self.in_degree
    }

    pub fn out_degree(&self) -> &[f64] {
        &self.out_degree
    }

    /// Nodes `j != i` with a positive edge `i -> j`.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| j != i && self.weight(i, j) > 0.0)
    }

    /// `src,dst,weight` triples, one per line, with a header.
    pub fn export_triples(&self) -> String {
        let mut out = String::from("src,dst,weight\n");
        for e in &self.edges {
            let _ = writeln!(out, "{},{},{}", e.src, e.dst, e.weight);
        }
        out
    }
}

/// Gaussian kernel adjacency `A_ij = exp(-d_ij² / sigma2)` over the listed pairs.
pub fn kernel_adjacency(n: usize, edges: &[DistanceEdge], sigma2: f64) -> Result<SensorGraph> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 must be > 0, got {sigma2}")));
    }
    let mut weighted = Vec::with_capacity(edges.len());
    for e in edges {
        if e.distance < 0.0 || !e.distance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "negative or non-finite distance {} on edge {}->{}",
                e.distance, e.src, e.dst
            )));
        }
        weighted.push(Edge {
            src: e.src,
            dst: e.dst,
            weight: (-(e.distance * e.distance) / sigma2).exp(),
        });
    }
    SensorGraph::from_edges(n, weighted)
}

/// Row-normalized random-walk matrix `S = D_in⁻¹ A` with an optional cache of powers.
#[derive(Clone, Debug)]
pub struct DiffusionOperator {
    s: Tensor,
    hops: Vec<Tensor>,
}

/// Builds `S`; rows of zero degree stay all-zero.
pub fn random_walk(graph: &SensorGraph) -> DiffusionOperator {
    let n = graph.n();
    let mut s = graph.adjacency().clone();
    for (i, &deg) in graph.in_degree().iter().enumerate() {
        let row = &mut s.data_mut()[i * n..(i + 1) * n];
        if deg > 0.0 {
            row.iter_mut().for_each(|v| *v /= deg);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    DiffusionOperator { s, hops: Vec::new() }
}

impl DiffusionOperator {
    pub fn matrix(&self) -> &Tensor {
        &self.s
    }

    pub fn n(&self) -> usize {
        self.s.shape()[0]
    }

    /// Materializes `S^k` for `k ≤ k_max`; memory is `O(k_max · R²)` for the dense store.
    pub fn cache_hops(&mut self, k_max: usize) {
        let n = self.n();
        self.hops = vec![Tensor::eye(n)];
        for k in 1..=k_max {
            let next = matmul_raw(&self.hops[k - 1], &self.s);
            self.hops.push(next);
        }
    }

    /// Cached `S^k`, if within the cache bound.
    pub fn hop(&self, k: usize) -> Option<&Tensor> {
        self.hops.get(k)
    }

    pub fn cached_hops(&self) -> usize {
        self.hops.len().saturating_sub(1)
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        matmul_raw(&self.s, x)
    }
}

/// `Σ_k α_k S^k X` for `X: [R, F]`, evaluated by repeated application of `S`.
pub fn poly_filter(op: &DiffusionOperator, alphas: &[f64], x: &Tensor) -> Result<Tensor> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("polynomial filter needs at least one coefficient".into()));
    }
    if x.rank() != 2 || x.shape()[0] != op.n() {
        return Err(Error::shape(
            "poly_filter",
            format!("signal {:?} for operator of size {}", x.shape(), op.n()),
        ));
    }
    let mut out = x.map(|v| v * alphas[0]);
    let mut power = x.clone();
    for &alpha in &alphas[1..] {
        power = op.apply(&power);
        for (o, p) in out.data_mut().iter_mut().zip(power.data()) {
            *o += alpha * p;
        }
    }
    Ok(out)
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}`; the self-loop weight is 1.
pub fn sym_normalize(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::shape("sym_normalize", format!("{:?}", a.shape())));
    }
    if a.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("sym_normalize requires non-negative entries".into()));
    }
    Ok(sym_normalize_raw(a))
}

/// Column indices kept by top-k selection of one row; ties go to the lower index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// 0/1 mask keeping the `k` largest entries of every row.
pub fn topk_mask(a: &Tensor, k: usize) -> Result<Vec<f64>> {
    if a.rank() != 2 {
        return Err(Error::shape("topk", format!("{:?}", a.shape())));
    }
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    if k == 0 || k > cols {
        return Err(Error::InvalidArgument(format!("top-k needs 1 <= k <= {cols}, got {k}")));
    }
    let mut mask = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in topk_indices(&a.data()[i * cols..(i + 1) * cols], k) {
            mask[i * cols + j] = 1.0;
        }
    }
    Ok(mask)
}

/// Keeps the `k` largest entries of every row and zeroes the rest.
pub fn topk_sparsify(a: &Tensor, k: usize) -> Result<Tensor> {
    let mask = topk_mask(a, k)?;
    let data = a.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(a.shape(), data)
}
