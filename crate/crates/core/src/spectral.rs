//! Leading adjacency eigenvalues: a dense Householder + implicit QL solver for
//! small graphs and shifted block power iteration for large ones.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{clustering_coefficient, AdjacencyMatrix};

/// Largest node count handled by the dense solver under [`EigenMethod::Auto`].
pub const DENSE_LIMIT: usize = 1024;
pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERATIONS: usize = 10_000;

const QL_MAX_SWEEPS: usize = 60;
const START_SEED: u64 = 0x5eed_0f_9a9;
/// Vectors carried by the block power iteration.
const BLOCK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigenMethod {
    #[default]
    Auto,
    Dense,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphMetrics {
    pub clustering: f64,
    pub spectral_gap: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        libm::fabs(a)
    } else {
        -libm::fabs(a)
    }
}

/// Reduces the symmetric row-major `a` (`n x n`) to tridiagonal form in place,
/// returning `(diagonal, subdiagonal)` with `e[i]` coupling rows `i - 1` and `i`.
fn tridiagonalize(a: &mut [f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    let at = |i: usize, j: usize| i * n + j;
    for i in (1..n).rev() {
        let l = i - 1;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| libm::fabs(a[at(i, k)])).sum();
            if scale == 0.0 {
                e[i] = a[at(i, l)];
            } else {
                let mut h = 0.0;
                for k in 0..=l {
                    a[at(i, k)] /= scale;
                    h += a[at(i, k)] * a[at(i, k)];
                }
                let f = a[at(i, l)];
                let g = if f >= 0.0 { -libm::sqrt(h) } else { libm::sqrt(h) };
                e[i] = scale * g;
                h -= f * g;
                a[at(i, l)] = f - g;
                let mut f = 0.0;
                for j in 0..=l {
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[at(j, k)] * a[at(i, k)];
                    }
                    for k in j + 1..=l {
                        g += a[at(k, j)] * a[at(i, k)];
                    }
                    e[j] = g / h;
                    f += e[j] * a[at(i, j)];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = a[at(i, j)];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a[at(j, k)] -= f * e[k] + g * a[at(i, k)];
                    }
                }
            }
        } else {
            e[i] = a[at(i, l)];
        }
    }
    for (i, di) in d.iter_mut().enumerate() {
        *di = a[at(i, i)];
    }
    (d, e)
}

/// Eigenvalues of a symmetric tridiagonal matrix by implicit QL with Wilkinson shifts.
fn tridiagonal_eigenvalues(mut d: Vec<f64>, mut e: Vec<f64>) -> Result<Vec<f64>> {
    let n = d.len();
    if n == 0 {
        return Ok(d);
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut sweeps = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = libm::fabs(d[m]) + libm::fabs(d[m + 1]);
                if libm::fabs(e[m]) <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            sweeps += 1;
            if sweeps > QL_MAX_SWEEPS {
                return Err(Error::NoConvergence { iterations: sweeps });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = libm::hypot(g, 1.0);
            g = d[m] - d[l] + e[l] / (g + sign(r, g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = libm::hypot(f, g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(d)
}

/// All eigenvalues of the symmetric row-major `matrix` (`n x n`), descending.
pub fn symmetric_eigenvalues(matrix: &[f64], n: usize) -> Result<Vec<f64>> {
    if matrix.len() != n * n {
        return Err(Error::Invalid(alloc::format!("expected {} entries, got {}", n * n, matrix.len())));
    }
    let mut a = matrix.to_vec();
    let (d, e) = tridiagonalize(&mut a, n);
    let mut vals = tridiagonal_eigenvalues(d, e)?;
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals)
}

fn dense_top_two(a: &AdjacencyMatrix) -> Result<(f64, f64)> {
    let vals = symmetric_eigenvalues(&a.to_dense(), a.n_nodes())?;
    Ok((vals[0], vals[1]))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Modified Gram-Schmidt, run twice. Columns that collapse are replaced by
/// fresh random directions so the block keeps full rank.
fn orthonormalize(block: &mut [Vec<f64>], rng: &mut ChaCha8Rng) {
    for i in 0..block.len() {
        for attempt in 0.. {
            let (done, rest) = block.split_at_mut(i);
            let v = &mut rest[0];
            let before = libm::sqrt(dot(v, v));
            for _ in 0..2 {
                for u in done.iter() {
                    let d = dot(v, u);
                    v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
                }
            }
            let norm = libm::sqrt(dot(v, v));
            if norm > 1e-10 * before.max(f64::MIN_POSITIVE) || attempt == 8 {
                let norm = norm.max(f64::MIN_POSITIVE);
                v.iter_mut().for_each(|x| *x /= norm);
                break;
            }
            v.iter_mut().for_each(|x| *x = rng.random::<f64>() - 0.5);
        }
    }
}

/// Eigenpairs of the small symmetric `p x p` matrix `h` by cyclic Jacobi,
/// sorted descending. Eigenvectors are the columns of the returned matrix.
fn jacobi_eigen(mut h: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p = h.len();
    let mut v: Vec<Vec<f64>> = (0..p).map(|i| (0..p).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..p).flat_map(|i| (0..p).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| h[i][j] * h[i][j]).sum();
        let diag: f64 = (0..p).map(|i| h[i][i] * h[i][i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for a in 0..p {
            for b in a + 1..p {
                if h[a][b] == 0.0 {
                    continue;
                }
                let theta = (h[b][b] - h[a][a]) / (2.0 * h[a][b]);
                let t = sign(1.0, theta) / (libm::fabs(theta) + libm::sqrt(theta * theta + 1.0));
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..p {
                    let (x, y) = (h[k][a], h[k][b]);
                    h[k][a] = c * x - s * y;
                    h[k][b] = s * x + c * y;
                }
                for k in 0..p {
                    let (x, y) = (h[a][k], h[b][k]);
                    h[a][k] = c * x - s * y;
                    h[b][k] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[a], row[b]);
                    row[a] = c * x - s * y;
                    row[b] = s * x + c * y;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| h[j][j].total_cmp(&h[i][i]));
    let values = order.iter().map(|&i| h[i][i]).collect();
    let vectors = v.iter().map(|row| order.iter().map(|&i| row[i]).collect()).collect();
    (values, vectors)
}

/// Two largest adjacency eigenvalues by block power iteration on the positive
/// semidefinite `A + d_max I` with a Rayleigh-Ritz step per iteration. Stops
/// once both leading Ritz pairs have residual `|A u - theta u|` within the
/// tolerance, which bounds the eigenvalue error directly.
fn power_top_two(a: &AdjacencyMatrix) -> Result<(f64, f64)> {
    let n = a.n_nodes();
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| a.neighbors(i)).collect();
    let sigma = neighbors.iter().map(Vec::len).max().unwrap_or(0) as f64;
    if sigma == 0.0 {
        return Ok((0.0, 0.0));
    }
    let p = BLOCK.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut block: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
    orthonormalize(&mut block, &mut rng);
    let apply = |v: &[f64]| -> Vec<f64> {
        neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| sigma * v[i] + nb.iter().map(|&j| v[j]).sum::<f64>())
            .collect()
    };
    for _ in 0..POWER_MAX_ITERATIONS {
        let images: Vec<Vec<f64>> = block.iter().map(|v| apply(v)).collect();
        let h: Vec<Vec<f64>> = (0..p)
            .map(|i| (0..p).map(|j| 0.5 * (dot(&block[i], &images[j]) + dot(&block[j], &images[i]))).collect())
            .collect();
        let (theta, y) = jacobi_eigen(h);
        let combine = |basis: &[Vec<f64>], col: usize| -> Vec<f64> {
            let mut out = vec![0.0; n];
            for (k, b) in basis.iter().enumerate() {
                out.iter_mut().zip(b).for_each(|(o, x)| *o += y[k][col] * x);
            }
            out
        };
        let converged = (0..2.min(p)).all(|i| {
            let u = combine(&block, i);
            let au = combine(&images, i);
            let r = libm::sqrt(au.iter().zip(&u).map(|(x, y)| (x - theta[i] * y) * (x - theta[i] * y)).sum());
            r <= POWER_TOLERANCE * libm::fabs(theta[i]).max(1.0)
        });
        if converged {
            let second = if p > 1 { theta[1] } else { theta[0] };
            return Ok((theta[0] - sigma, second - sigma));
        }
        block = (0..p).map(|i| combine(&images, i)).collect();
        orthonormalize(&mut block, &mut rng);
    }
    Err(Error::NoConvergence {
        iterations: POWER_MAX_ITERATIONS,
    })
}

/// `(lambda1, lambda2)` of the adjacency matrix.
pub fn top_two_eigenvalues(a: &AdjacencyMatrix, method: EigenMethod) -> Result<(f64, f64)> {
    let n = a.n_nodes();
    if n < 2 {
        return Err(Error::TooFewNodes(n));
    }
    match method {
        EigenMethod::Dense => dense_top_two(a),
        EigenMethod::Iterative => power_top_two(a),
        EigenMethod::Auto if n <= DENSE_LIMIT => dense_top_two(a),
        EigenMethod::Auto => power_top_two(a),
    }
}

/// Clustering coefficient and spectral gap `lambda1 - lambda2`.
pub fn spectral_gap(a: &AdjacencyMatrix) -> Result<GraphMetrics> {
    spectral_gap_with(a, EigenMethod::Auto)
}

pub fn spectral_gap_with(a: &AdjacencyMatrix, method: EigenMethod) -> Result<GraphMetrics> {
    let (lambda1, lambda2) = top_two_eigenvalues(a, method)?;
    Ok(GraphMetrics {
        clustering: clustering_coefficient(a),
        spectral_gap: lambda1 - lambda2,
        lambda1,
        lambda2,
    })
}
