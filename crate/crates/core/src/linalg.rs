//! Small spectral toolbox: a one-sided Jacobi SVD.
//!
//! The tape deliberately has no spectral operations; the nuclear norm and the
//! PCA projection both call into this module from outside the graph and feed
//! results back through `scalar_with_grad`. One-sided Jacobi is slow but
//! simple, deterministic, and accurate to near machine precision on the small
//! matrices used here (batch x classes, feature x feature).

use crate::error::{Error, Result};
use crate::ndgraph::Tensor;

/// Maximum number of full sweeps before giving up.
const MAX_SWEEPS: usize = 60;
/// Columns are considered orthogonal when their inner product is below this
/// relative threshold.
const ORTHO_TOL: f64 = 1e-14;

/// Compact singular value decomposition `A = U diag(sigma) V^T` with
/// `k = min(m, n)`: `U` is `m x k`, `sigma.len() == k`, `V` is `n x k`,
/// singular values sorted in descending order.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

/// One-sided Jacobi SVD. Rotates column pairs of a working copy of `A` until
/// all pairs are orthogonal, accumulating the rotations into `V`; singular
/// values are the final column norms. Wide matrices are decomposed through
/// their transpose, since more columns than rows cannot be made pairwise
/// orthogonal directly.
pub fn svd(a: &Tensor) -> Result<Svd> {
    if a.is_empty() {
        return Err(Error::Contract("svd of an empty matrix".into()));
    }
    if !a.all_finite() {
        return Err(Error::Numeric("svd input contains non-finite entries".into()));
    }
    let (m, n) = a.shape();
    if m < n {
        let t = svd(&a.transposed())?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    let mut u = a.clone();
    let mut v = Tensor::identity(n);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    let up = u[(i, p)];
                    let uq = u[(i, q)];
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let up = u[(i, p)];
                    let uq = u[(i, q)];
                    u[(i, p)] = c * up - s * uq;
                    u[(i, q)] = s * up + c * uq;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "jacobi svd did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    // Column norms are the singular values; normalise the nonzero columns.
    let mut sigma = vec![0.0; n];
    for j in 0..n {
        let mut norm2 = 0.0;
        for i in 0..m {
            norm2 += u[(i, j)] * u[(i, j)];
        }
        let norm = norm2.sqrt();
        sigma[j] = norm;
        if norm > 0.0 {
            for i in 0..m {
                u[(i, j)] /= norm;
            }
        }
    }

    // Deterministic presentation: sort descending by singular value and give
    // each right vector a positive dominant component.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let mut su = Tensor::zeros(m, n);
    let mut sv = Tensor::zeros(n, n);
    let mut ss = vec![0.0; n];
    for (dst, &src) in order.iter().enumerate() {
        ss[dst] = sigma[src];
        let mut dominant = 0;
        for i in 1..n {
            if v[(i, src)].abs() > v[(dominant, src)].abs() {
                dominant = i;
            }
        }
        let flip = if v[(dominant, src)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            su[(i, dst)] = flip * u[(i, src)];
        }
        for i in 0..n {
            sv[(i, dst)] = flip * v[(i, src)];
        }
    }

    Ok(Svd {
        u: su,
        sigma: ss,
        v: sv,
    })
}
