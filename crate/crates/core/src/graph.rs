//! Node graphs induced by the shift scaffold, the gated scaffold and a KNN
//! baseline, plus the average clustering coefficient.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::agc::{distance_map, gate_map, scaffold_shifts, AgcConfig, GatingParams};
use crate::error::{Error, Result};
use crate::tensor::{Axis, Tensor4};

/// Default gate threshold for binarizing gated edges.
pub const DEFAULT_TAU: f64 = 0.5;

/// Dense symmetric boolean adjacency without self-loops. Grid node `(r, c)`
/// has index `r * w + c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    n: usize,
    edges: Vec<bool>,
}

impl AdjacencyMatrix {
    pub fn empty(n: usize) -> Self {
        AdjacencyMatrix {
            n,
            edges: vec![false; n * n],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut a = Self::empty(n);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Invalid(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            a.connect(i, j);
        }
        Ok(a)
    }

    /// Adds the undirected edge `i - j`; self-loops are ignored.
    pub fn connect(&mut self, i: usize, j: usize) {
        if i != j {
            self.edges[i * self.n + j] = true;
            self.edges[j * self.n + i] = true;
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.edges[i * self.n..(i + 1) * self.n]
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .enumerate()
            .filter_map(|(j, &e)| e.then_some(j))
            .collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&e| e).count()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n).map(|i| self.degree(i)).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count() / 2
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| !self.has_edge(i, i) && (0..i).all(|j| self.has_edge(i, j) == self.has_edge(j, i)))
    }

    /// True when every edge of `self` is also an edge of `other`.
    pub fn is_subgraph_of(&self, other: &AdjacencyMatrix) -> bool {
        self.n == other.n && self.edges.iter().zip(&other.edges).all(|(&a, &b)| !a || b)
    }

    /// Adjacency as a dense row-major `f64` matrix.
    pub fn to_dense(&self) -> Vec<f64> {
        self.edges.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect()
    }
}

fn grid_neighbor(r: usize, c: usize, h: usize, w: usize, axis: Axis, offset: usize) -> usize {
    match axis {
        Axis::Height => ((r + offset) % h) * w + c,
        Axis::Width => r * w + (c + offset) % w,
    }
}

/// Every scaffold offset along both axes, toroidal, OR-symmetrized.
pub fn build_scaffold_graph(h: usize, w: usize, k: usize) -> Result<AdjacencyMatrix> {
    let spec = scaffold_shifts(h, w, k)?;
    let mut a = AdjacencyMatrix::empty(h * w);
    for shift in &spec.shifts {
        for r in 0..h {
            for c in 0..w {
                a.connect(r * w + c, grid_neighbor(r, c, h, w, shift.axis, shift.offset));
            }
        }
    }
    Ok(a)
}

/// Scaffold graph of a single feature map `x` (`n == 1`) where a long-range
/// edge survives only if its gate is at least `tau`; local edges always survive.
pub fn build_gated_graph(x: &Tensor4, cfg: &AgcConfig, params: &GatingParams, tau: f64) -> Result<AdjacencyMatrix> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Threshold(tau));
    }
    let s = x.shape();
    if s.n != 1 {
        return Err(Error::Invalid(format!("graph extraction needs a single sample, got n = {}", s.n)));
    }
    let spec = scaffold_shifts(s.h, s.w, cfg.k)?;
    let mut a = AdjacencyMatrix::empty(s.h * s.w);
    for shift in &spec.shifts {
        let gates = if shift.gated {
            let shifted = x.roll(-(shift.offset as isize), shift.axis);
            let d = distance_map(x, &shifted, cfg.distance)?;
            Some(gate_map(&d, params, cfg.gate)?)
        } else {
            None
        };
        for r in 0..s.h {
            for c in 0..s.w {
                let keep = gates.as_ref().is_none_or(|g| g.get(0, 0, r, c) >= tau);
                if keep {
                    a.connect(r * s.w + c, grid_neighbor(r, c, s.h, s.w, shift.axis, shift.offset));
                }
            }
        }
    }
    Ok(a)
}

/// KNN graph plus the number of pairwise distances evaluated to build it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub adjacency: AdjacencyMatrix,
    pub distance_evaluations: usize,
}

/// Connects every node of the single feature map `x` to its `k_nn` nearest
/// nodes by L2 distance over channels, ties going to the lower index.
pub fn build_knn_graph(x: &Tensor4, k_nn: usize) -> Result<KnnGraph> {
    let s = x.shape();
    if s.n != 1 {
        return Err(Error::Invalid(format!("graph extraction needs a single sample, got n = {}", s.n)));
    }
    let n = s.h * s.w;
    if k_nn < 1 || k_nn >= n {
        return Err(Error::NeighborCount { k: k_nn, n });
    }
    let features: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..s.c).map(|ch| x.get(0, ch, i / s.w, i % s.w)).collect())
        .collect();
    let mut a = AdjacencyMatrix::empty(n);
    let mut evaluations = 0;
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        candidates.clear();
        for j in (0..n).filter(|&j| j != i) {
            let sq: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            candidates.push((libm::sqrt(sq), j));
            evaluations += 1;
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &candidates[..k_nn] {
            a.connect(i, j);
        }
    }
    Ok(KnnGraph {
        adjacency: a,
        distance_evaluations: evaluations,
    })
}

/// Mean over nodes of `2 E_i / (k_i (k_i - 1))`, with nodes of degree below 2
/// contributing 0.
pub fn clustering_coefficient(a: &AdjacencyMatrix) -> f64 {
    let n = a.n_nodes();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|i| {
            let nb = a.neighbors(i);
            let k = nb.len();
            if k < 2 {
                return 0.0;
            }
            let mut links = 0usize;
            for (p, &u) in nb.iter().enumerate() {
                let row = a.row(u);
                links += nb[p + 1..].iter().filter(|&&v| row[v]).count();
            }
            2.0 * links as f64 / (k * (k - 1)) as f64
        })
        .sum();
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn scaffold_4x4_has_degree_6() {
        let a = build_scaffold_graph(4, 4, 1).unwrap();
        assert!(a.is_symmetric());
        assert!(a.degrees().iter().all(|&d| d == 6));
    }

    #[test]
    fn scaffold_2x2_is_a_4_cycle() {
        let a = build_scaffold_graph(2, 2, 1).unwrap();
        assert!(a.degrees().iter().all(|&d| d == 2));
        assert!(!a.has_edge(0, 3));
        assert!(!a.has_edge(1, 2));
    }

    #[test]
    fn scaffold_rejects_bad_k() {
        assert!(build_scaffold_graph(4, 4, 4).is_err());
        assert!(build_scaffold_graph(4, 4, 0).is_err());
    }

    #[test]
    fn knn_pairs_close_values() {
        let x = Tensor4::from_vec(Shape::new(1, 1, 1, 4), vec![0.0, 1.0, 10.0, 11.0]).unwrap();
        let g = build_knn_graph(&x, 1).unwrap();
        assert_eq!(g.adjacency, AdjacencyMatrix::from_edges(4, &[(0, 1), (2, 3)]).unwrap());
        assert_eq!(g.distance_evaluations, 12);
    }

    #[test]
    fn knn_full_is_complete() {
        let x = Tensor4::from_fn(Shape::new(1, 2, 2, 3), |_, c, r, w| (c + r * 3 + w) as f64).unwrap();
        let g = build_knn_graph(&x, 5).unwrap();
        assert_eq!(g.adjacency.edge_count(), 15);
        assert!(build_knn_graph(&x, 6).is_err());
    }

    #[test]
    fn knn_symmetrization_raises_degree() {
        let x = Tensor4::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 1.0, 3.0]).unwrap();
        let g = build_knn_graph(&x, 1).unwrap();
        assert_eq!(g.adjacency.degree(1), 2);
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        // Node 0 is equidistant from nodes 1 and 2, which each have a closer partner.
        let x = Tensor4::from_vec(Shape::new(1, 1, 1, 5), vec![0.0, 1.0, -1.0, 1.1, -1.1]).unwrap();
        let g = build_knn_graph(&x, 1).unwrap();
        assert!(g.adjacency.has_edge(0, 1));
        assert!(!g.adjacency.has_edge(0, 2));
    }

    #[test]
    fn clustering_small_graphs() {
        let k3 = AdjacencyMatrix::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        assert_eq!(clustering_coefficient(&k3), 1.0);
        let path = AdjacencyMatrix::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(clustering_coefficient(&path), 0.0);
    }

    #[test]
    fn gated_graph_rejects_tau() {
        let x = Tensor4::zeros(Shape::new(1, 1, 4, 4)).unwrap();
        let p = GatingParams::new(1.0);
        assert!(build_gated_graph(&x, &AgcConfig::new(1), &p, 0.0).is_err());
        assert!(build_gated_graph(&x, &AgcConfig::new(1), &p, 1.5).is_err());
        let a = build_gated_graph(&x, &AgcConfig::new(1), &p, 1.0).unwrap();
        assert_eq!(a, build_scaffold_graph(4, 4, 1).unwrap());
    }

    #[test]
    fn two_regions_cut_gated_edges() {
        // Rows 0-3 hold 0, rows 4-7 hold 5: exp(-5) < 0.5, so no gated edge crosses.
        let x = Tensor4::from_fn(Shape::new(1, 1, 8, 8), |_, _, r, _| if r < 4 { 0.0 } else { 5.0 }).unwrap();
        let a = build_gated_graph(&x, &AgcConfig::new(1), &GatingParams::new(1.0), 0.5).unwrap();
        for i in 0..64 {
            for j in a.neighbors(i) {
                let (ri, rj) = (i / 8, j / 8);
                let crosses = (ri < 4) != (rj < 4);
                let vertical_local = i % 8 == j % 8 && ((ri + 1) % 8 == rj || (rj + 1) % 8 == ri);
                assert!(!crosses || vertical_local, "{i} -> {j}");
            }
        }
    }
}
