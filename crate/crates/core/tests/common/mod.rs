//! Independent oracles shared by the integration tests. Nothing here calls the
//! library code it is compared against.
#![allow(dead_code)]

use adaptvig_core::agc::{DistanceKind, GateKind};
use adaptvig_core::graph::AdjacencyMatrix;
use adaptvig_core::tensor::Tensor4;

/// Offsets walked by the aggregation loop: `(along_height, offset, gated)`.
pub fn loop_offsets(h: usize, w: usize, k: usize) -> Vec<(bool, usize, bool)> {
    let mut out = vec![(true, k, false), (false, k, false)];
    let mut p = 2;
    while p <= h {
        out.push((true, p, true));
        p *= 2;
    }
    let mut p = 2;
    while p <= w {
        out.push((false, p, true));
        p *= 2;
    }
    out
}

/// Per-pixel aggregation: for every pixel, walk the offsets, compare against
/// the neighbor `offset` steps further along the axis (wrapping), and keep a
/// running channelwise max of the (gated) differences.
pub fn agc_loop(x: &Tensor4, k: usize, gate: GateKind, distance: DistanceKind, t: f64, eps: f64) -> Vec<f64> {
    let s = x.shape();
    let mut out = vec![0.0; s.numel()];
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                let mut acc = vec![0.0f64; s.c];
                for (vertical, off, gated) in loop_offsets(s.h, s.w, k) {
                    let (ni, nj) = if vertical { ((i + off) % s.h, j) } else { (i, (j + off) % s.w) };
                    let diff: Vec<f64> = (0..s.c).map(|c| x.get(n, c, ni, nj) - x.get(n, c, i, j)).collect();
                    let g = if gated {
                        let d = match distance {
                            DistanceKind::L1 => diff.iter().map(|v| v.abs()).sum::<f64>(),
                            DistanceKind::L2 => diff.iter().map(|v| v * v).sum::<f64>().sqrt(),
                        };
                        let u = d / (t.abs() + eps);
                        match gate {
                            GateKind::ExpDecay => (-u).exp(),
                            GateKind::Sigmoid => 2.0 / (1.0 + u.exp()),
                        }
                    } else {
                        1.0
                    };
                    for c in 0..s.c {
                        let m = g * diff[c];
                        if m > acc[c] {
                            acc[c] = m;
                        }
                    }
                }
                for c in 0..s.c {
                    out[s.index(n, c, i, j)] = acc[c];
                }
            }
        }
    }
    out
}

/// Average local clustering by checking every pair of neighbors of every node.
pub fn clustering_brute_force(a: &AdjacencyMatrix) -> f64 {
    let n = a.n_nodes();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let nb: Vec<usize> = (0..n).filter(|&j| j != i && a.has_edge(i, j)).collect();
        let k = nb.len();
        if k < 2 {
            continue;
        }
        let mut closed = 0;
        for x in 0..k {
            for y in x + 1..k {
                if a.has_edge(nb[x], nb[y]) {
                    closed += 1;
                }
            }
        }
        total += closed as f64 / (k * (k - 1) / 2) as f64;
    }
    total / n as f64
}

/// Exact spectrum of a scaffold graph: the graph is a Cayley graph of
/// `Z_h x Z_w`, so its eigenvalues are character sums over the distinct
/// nonzero offsets `(dr, dc)` of the connection set.
pub fn torus_spectrum(h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut offsets = std::collections::BTreeSet::new();
    for (vertical, off, _) in loop_offsets(h, w, k) {
        for sign in [1i64, -1] {
            let o = (sign * off as i64).rem_euclid(if vertical { h } else { w } as i64) as usize;
            if o != 0 {
                offsets.insert(if vertical { (o, 0) } else { (0, o) });
            }
        }
    }
    let tau = std::f64::consts::TAU;
    let mut values = Vec::with_capacity(h * w);
    for p in 0..h {
        for q in 0..w {
            let v: f64 = offsets
                .iter()
                .map(|&(dr, dc)| (tau * (p * dr) as f64 / h as f64 + tau * (q * dc) as f64 / w as f64).cos())
                .sum();
            values.push(v);
        }
    }
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

/// Small deterministic generator for oracle inputs (splitmix64).
pub struct Mix(pub u64);

impl Mix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

pub fn random_graph(rng: &mut Mix, n: usize, density: f64) -> AdjacencyMatrix {
    let mut a = AdjacencyMatrix::empty(n);
    for i in 0..n {
        for j in 0..i {
            if rng.unit() < density {
                a.connect(i, j);
            }
        }
    }
    a
}
