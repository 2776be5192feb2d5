//! Shared helpers for the integration suites: brute-force estimators and an
//! independent eigensolver, all written against plain `Vec<Vec<f64>>` so they
//! share no code with the library implementations they check.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use shiftlab::models::ModelBundle;
use shiftlab::ndgraph::{NodeId, Tape, Tensor};

pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn eval_scalar(build: impl FnOnce(&mut Tape) -> shiftlab::Result<NodeId>) -> f64 {
    let mut tape = Tape::new();
    let node = build(&mut tape).unwrap();
    tape.value(node).scalar_value().unwrap()
}

pub fn gauss(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Brute-force squared MMD: three explicit double sums.
pub fn mmd2_brute(xs: &[Vec<f64>], ys: &[Vec<f64>], sigma: f64) -> f64 {
    let (ns, nt) = (xs.len() as f64, ys.len() as f64);
    let mut xx = 0.0;
    for a in xs {
        for b in xs {
            xx += gauss(a, b, sigma);
        }
    }
    let mut yy = 0.0;
    for a in ys {
        for b in ys {
            yy += gauss(a, b, sigma);
        }
    }
    let mut xy = 0.0;
    for a in xs {
        for b in ys {
            xy += gauss(a, b, sigma);
        }
    }
    xx / (ns * ns) + yy / (nt * nt) - 2.0 * xy / (ns * nt)
}

/// Brute-force subdomain MMD: per class, the weighted triple sums, averaged
/// over classes active in both domains and over bandwidths.
pub fn lmmd2_brute(
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    ws: &[Vec<f64>],
    wt: &[Vec<f64>],
    bandwidths: &[f64],
) -> f64 {
    let classes = ws.len();
    let active: Vec<usize> = (0..classes)
        .filter(|&c| ws[c].iter().any(|&v| v > 0.0) && wt[c].iter().any(|&v| v > 0.0))
        .collect();
    let mut total = 0.0;
    for &sigma in bandwidths {
        for &c in &active {
            let mut term = 0.0;
            for (i, a) in xs.iter().enumerate() {
                for (j, b) in xs.iter().enumerate() {
                    term += ws[c][i] * ws[c][j] * gauss(a, b, sigma);
                }
            }
            for (i, a) in ys.iter().enumerate() {
                for (j, b) in ys.iter().enumerate() {
                    term += wt[c][i] * wt[c][j] * gauss(a, b, sigma);
                }
            }
            for (i, a) in xs.iter().enumerate() {
                for (j, b) in ys.iter().enumerate() {
                    term -= 2.0 * ws[c][i] * wt[c][j] * gauss(a, b, sigma);
                }
            }
            total += term;
        }
    }
    total / (active.len() * bandwidths.len()) as f64
}

/// Independent weight normalization: one-hot (or probability) columns scaled
/// by the class total.
pub fn weights_brute(hard: Option<&[usize]>, soft: Option<&[Vec<f64>]>, c: usize) -> Vec<Vec<f64>> {
    let n = hard.map(|h| h.len()).unwrap_or_else(|| soft.unwrap().len());
    let mut w = vec![vec![0.0; n]; c];
    for i in 0..n {
        match (hard, soft) {
            (Some(h), _) => w[h[i]][i] = 1.0,
            (_, Some(s)) => {
                for (class, row) in w.iter_mut().enumerate() {
                    row[i] = s[i][class];
                }
            }
            _ => unreachable!(),
        }
    }
    for row in &mut w {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
    }
    w
}

/// Two-pass covariance: subtract the column means first, then average outer
/// products — algebraically equal to the library's one-pass expansion but a
/// different computation.
pub fn covariance_two_pass(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for row in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    for r in &mut cov {
        for v in r.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    cov
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations — a different
/// algorithm (two-sided, eigen-only) from the library's SVD.
pub fn symmetric_eigenvalues(mut m: Vec<Vec<f64>>) -> Vec<f64> {
    let n = m.len();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i][j] * m[i][j];
            }
        }
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = 0.5 * (m[q][q] - m[p][p]) / m[p][q];
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// Nuclear norm via the Gram matrix A^T A, whose eigenvalues are the squared
/// singular values.
pub fn nuclear_via_eigensolver(rows: &[Vec<f64>]) -> f64 {
    let d = rows[0].len();
    let mut gram = vec![vec![0.0; d]; d];
    for row in rows {
        for i in 0..d {
            for j in 0..d {
                gram[i][j] += row[i] * row[j];
            }
        }
    }
    symmetric_eigenvalues(gram)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .sum()
}

/// Bit-exact equality of every weight and bias across the three networks.
pub fn bundles_bitwise_equal(a: &ModelBundle, b: &ModelBundle) -> bool {
    let nets = [
        (&a.ef_params, &b.ef_params),
        (&a.h_params, &b.h_params),
        (&a.d_params, &b.d_params),
    ];
    for (ma, mb) in nets {
        if ma.layers.len() != mb.layers.len() {
            return false;
        }
        for (la, lb) in ma.layers.iter().zip(&mb.layers) {
            let same = |x: &Tensor, y: &Tensor| {
                x.shape() == y.shape()
                    && x.data()
                        .iter()
                        .zip(y.data())
                        .all(|(p, q)| p.to_bits() == q.to_bits())
            };
            if !same(&la.w, &lb.w) || !same(&la.b, &lb.b) {
                return false;
            }
        }
    }
    true
}
