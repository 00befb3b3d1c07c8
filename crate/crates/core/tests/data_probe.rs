use adaptvig_core::data::{generate_blobs, Dataset};

/// Per-channel means of the four quadrants, plus a bias feature.
fn pooled(d: &Dataset, sample: usize) -> Vec<f64> {
    let s = d.images.shape();
    let (hh, hw) = (s.h / 2, s.w / 2);
    let mut f = vec![1.0];
    for c in 0..s.c {
        for (r0, c0) in [(0, 0), (0, hw), (hh, 0), (hh, hw)] {
            let mut sum = 0.0;
            for r in r0..r0 + hh {
                for col in c0..c0 + hw {
                    sum += d.images.get(sample, c, r, col);
                }
            }
            f.push(sum / (hh * hw) as f64);
        }
    }
    f
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
fn solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / m[row][row];
    }
    x
}

/// Least-squares fit of one-hot targets on `train`, accuracy on `test`.
fn probe_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let features: Vec<Vec<f64>> = (0..train.len()).map(|i| pooled(train, i)).collect();
    let dim = features[0].len();
    let ridge = 1e-6;
    let weights: Vec<Vec<f64>> = (0..train.classes)
        .map(|class| {
            let mut gram = vec![vec![0.0; dim]; dim];
            let mut rhs = vec![0.0; dim];
            for (f, &label) in features.iter().zip(&train.labels) {
                let target = if label == class { 1.0 } else { 0.0 };
                for a in 0..dim {
                    rhs[a] += f[a] * target;
                    for b in 0..dim {
                        gram[a][b] += f[a] * f[b];
                    }
                }
            }
            (0..dim).for_each(|a| gram[a][a] += ridge);
            solve(gram, rhs)
        })
        .collect();
    let correct = (0..test.len())
        .filter(|&i| {
            let f = pooled(test, i);
            let scores: Vec<f64> = weights.iter().map(|w| w.iter().zip(&f).map(|(a, b)| a * b).sum()).collect();
            let best = (0..scores.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            best == test.labels[i]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn blobs_are_linearly_separable_on_pooled_pixels() {
    for classes in [2, 4] {
        let train = generate_blobs(5, 200, classes, (3, 16, 16)).unwrap();
        let test = generate_blobs(6, 200, classes, (3, 16, 16)).unwrap();
        let acc = probe_accuracy(&train, &test);
        assert!(acc > 0.99, "{classes} classes: {acc}");
    }
}

#[test]
fn every_class_appears() {
    let d = generate_blobs(11, 30, 3, (1, 8, 8)).unwrap();
    for class in 0..3 {
        assert_eq!(d.labels.iter().filter(|&&l| l == class).count(), 10);
    }
}
