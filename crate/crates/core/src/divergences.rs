//! Scalar loss and discrepancy functions, each built on the autodiff tape.
//!
//! Every public loss returns a scalar tape node so gradients flow to whatever
//! parameters produced the inputs. Quantities that must *not* be
//! differentiated — median-heuristic bandwidths, confidence filter sets, the
//! nuclear-norm SVD — are computed from forward values outside the tape and
//! enter the graph as constants (or through `scalar_with_grad`).

use crate::error::{Error, Result};
use crate::linalg;
use crate::ndgraph::{NodeId, Tape, Tensor};
use serde::{Deserialize, Serialize};

/// Row-sum slack accepted when validating stochastic matrices.
const STOCHASTIC_TOL: f64 = 1e-9;

fn default_multipliers() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0, 4.0]
}

/// Gaussian-kernel family `k(x, y) = exp(-|x-y|^2 / (2 sigma^2))`, either with
/// explicit bandwidths or resolved per batch from the median pairwise
/// distance of the pooled samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    /// Fixed bandwidth list, all strictly positive.
    Bandwidths(Vec<f64>),
    /// `sigma_base` = median pairwise distance of the pooled batch, used once
    /// per batch and excluded from differentiation; the actual bandwidths are
    /// `multiplier * sigma_base`.
    MedianHeuristic {
        #[serde(default = "default_multipliers")]
        multipliers: Vec<f64>,
    },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::MedianHeuristic {
            multipliers: default_multipliers(),
        }
    }
}

impl KernelSpec {
    pub fn single(sigma: f64) -> Self {
        KernelSpec::Bandwidths(vec![sigma])
    }

    pub fn validate(&self) -> Result<()> {
        let (list, what) = match self {
            KernelSpec::Bandwidths(b) => (b, "bandwidth"),
            KernelSpec::MedianHeuristic { multipliers } => (multipliers, "multiplier"),
        };
        if list.is_empty() {
            return Err(Error::Config(format!("kernel {what} list is empty")));
        }
        if let Some(&bad) = list.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Config(format!(
                "kernel {what}s must be positive and finite, got {bad}"
            )));
        }
        Ok(())
    }

    /// Concrete bandwidths for a batch whose samples are the rows of `parts`
    /// pooled together. The median heuristic falls back to `sigma_base = 1`
    /// when fewer than two distinct points exist.
    pub fn resolve(&self, parts: &[&Tensor]) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            KernelSpec::Bandwidths(b) => Ok(b.clone()),
            KernelSpec::MedianHeuristic { multipliers } => {
                let base = median_pairwise_distance(parts);
                let base = if base.is_finite() && base > 0.0 { base } else { 1.0 };
                Ok(multipliers.iter().map(|m| m * base).collect())
            }
        }
    }
}

fn median_pairwise_distance(parts: &[&Tensor]) -> f64 {
    let mut rows: Vec<&[f64]> = Vec::new();
    for p in parts {
        for r in 0..p.rows() {
            rows.push(p.row(r));
        }
    }
    let n = rows.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    }
}

/// Per-class sample weights for one domain: row `c` holds the weights of all
/// `n` samples toward class `c`, summing to 1 (or all zero when the class is
/// absent from the batch).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    w: Tensor,
}

/// Input to [`lmmd_weights`]: hard labels for the source domain, soft
/// predicted probabilities for the unlabeled target domain.
pub enum LabelsOrProbs<'a> {
    Hard(&'a [usize]),
    Soft(&'a Tensor),
}

/// Builds normalized class weights: `w[c][i] = y_ic / sum_j y_jc` where `y`
/// is one-hot for hard labels or the raw probabilities for soft input. A
/// class with zero total mass gets an all-zero row and is skipped downstream.
pub fn lmmd_weights(input: LabelsOrProbs, c: usize) -> Result<ClassWeights> {
    let raw = match input {
        LabelsOrProbs::Hard(labels) => {
            let mut w = Tensor::zeros(c, labels.len());
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::Contract(format!("label {y} outside [0, {c})")));
                }
                w[(y, i)] = 1.0;
            }
            w
        }
        LabelsOrProbs::Soft(probs) => {
            if probs.cols() != c {
                return Err(Error::shape("lmmd_weights", (probs.rows(), probs.cols()), (probs.rows(), c)));
            }
            if probs.data().iter().any(|&v| v < 0.0) {
                return Err(Error::Contract(
                    "soft label probabilities must be non-negative".into(),
                ));
            }
            probs.transposed()
        }
    };
    let mut w = raw;
    for class in 0..c {
        let total: f64 = w.row(class).iter().sum();
        if total > 0.0 {
            for i in 0..w.cols() {
                w[(class, i)] /= total;
            }
        }
    }
    Ok(ClassWeights { w })
}

impl ClassWeights {
    pub fn class_count(&self) -> usize {
        self.w.rows()
    }

    pub fn sample_count(&self) -> usize {
        self.w.cols()
    }

    /// Weight row for one class.
    pub fn row(&self, c: usize) -> &[f64] {
        self.w.row(c)
    }

    /// True when the class received any mass in this batch.
    pub fn class_present(&self, c: usize) -> bool {
        self.w.row(c).iter().any(|&v| v > 0.0)
    }
}

/// A tape node validated to hold a row-stochastic `B x C` matrix (rows sum to
/// 1 within 1e-9, entries in `[0, 1]`), as produced by `softmax_rows`.
#[derive(Clone, Copy, Debug)]
pub struct Predictions(NodeId);

impl Predictions {
    pub fn from_node(tape: &Tape, node: NodeId) -> Result<Self> {
        validate_stochastic(tape.value(node), "predictions")?;
        Ok(Predictions(node))
    }

    pub fn node(&self) -> NodeId {
        self.0
    }
}

fn validate_stochastic(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let mut sum = 0.0;
        for &v in t.row(r) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!(
                    "{what} row {r} has entry {v} outside [0, 1]"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Contract(format!(
                "{what} row {r} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the true labels under row-softmaxed
/// logits: `-(1/B) sum_i log softmax(logits)[i, y_i]`.
pub fn cross_entropy(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (b, c) = tape.value(logits).shape();
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", (b, c), (labels.len(), 1)));
    }
    let mut mask = Tensor::zeros(b, c);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Contract(format!("label {y} outside [0, {c})")));
        }
        mask[(i, y)] = 1.0;
    }
    let probs = tape.softmax_rows(logits);
    let logp = tape.log_clamped(probs);
    let mask = tape.leaf(mask);
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Binary cross-entropy of the domain classifier against the domain flags:
/// `-(1/2B) sum_j [z_j log d_j + (1 - z_j) log(1 - d_j)]`.
pub fn domain_adv_loss(tape: &mut Tape, d_out: NodeId, z: &[f64]) -> Result<NodeId> {
    let (m, cols) = tape.value(d_out).shape();
    if cols != 1 || z.len() != m {
        return Err(Error::shape("domain_adv_loss", (m, cols), (z.len(), 1)));
    }
    if tape.value(d_out).data().iter().any(|&v| v <= 0.0 || v >= 1.0) {
        return Err(Error::Contract(
            "domain classifier outputs must lie strictly inside (0, 1)".into(),
        ));
    }
    let zs = tape.leaf(Tensor::from_vec(m, 1, z.to_vec())?);
    let inv_zs = tape.leaf(Tensor::from_vec(m, 1, z.iter().map(|v| 1.0 - v).collect())?);
    let ones = tape.leaf(Tensor::ones(m, 1));
    let log_d = tape.log_clamped(d_out);
    let one_minus = tape.sub(ones, d_out)?;
    let log_one_minus = tape.log_clamped(one_minus);
    let pos = tape.mul(zs, log_d)?;
    let neg = tape.mul(inv_zs, log_one_minus)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0 / m as f64))
}

/// Sample covariance in the exact algebraic form
/// `C = (1/(n-1)) (D^T D - (1/n)(1^T D)^T (1^T D))`.
pub fn covariance(tape: &mut Tape, dm: NodeId) -> Result<NodeId> {
    let (n, _d) = tape.value(dm).shape();
    if n < 2 {
        return Err(Error::Contract(format!(
            "covariance needs at least 2 rows, got {n}"
        )));
    }
    let dt = tape.transpose(dm);
    let dtd = tape.matmul(dt, dm)?;
    let ones = tape.leaf(Tensor::ones(1, n));
    let colsum = tape.matmul(ones, dm)?;
    let colsum_t = tape.transpose(colsum);
    let outer = tape.matmul(colsum_t, colsum)?;
    let outer_over_n = tape.scale(outer, 1.0 / n as f64);
    let centered = tape.sub(dtd, outer_over_n)?;
    Ok(tape.scale(centered, 1.0 / (n - 1) as f64))
}

/// Correlation-alignment loss `1/(4 d^2) * |C_S - C_T|_F^2`.
pub fn coral_loss(tape: &mut Tape, source_feats: NodeId, target_feats: NodeId) -> Result<NodeId> {
    let d = tape.value(source_feats).cols();
    if tape.value(target_feats).cols() != d {
        return Err(Error::shape(
            "coral_loss",
            tape.value(source_feats).shape(),
            tape.value(target_feats).shape(),
        ));
    }
    let cs = covariance(tape, source_feats)?;
    let ct = covariance(tape, target_feats)?;
    let diff = tape.sub(cs, ct)?;
    let fro = tape.frobenius_sq(diff);
    Ok(tape.scale(fro, 1.0 / (4.0 * (d * d) as f64)))
}

/// Squared MMD under one Gaussian bandwidth, in the kernel expansion
/// `(1/ns^2) sum K_xx + (1/nt^2) sum K_yy - (2/(ns nt)) sum K_xy`.
fn mmd2_sigma(tape: &mut Tape, x: NodeId, y: NodeId, sigma: f64) -> Result<NodeId> {
    let ns = tape.value(x).rows() as f64;
    let nt = tape.value(y).rows() as f64;
    let kxx = tape.gauss_gram(x, x, sigma)?;
    let kyy = tape.gauss_gram(y, y, sigma)?;
    let kxy = tape.gauss_gram(x, y, sigma)?;
    let sxx = tape.sum(kxx);
    let syy = tape.sum(kyy);
    let sxy = tape.sum(kxy);
    let a = tape.scale(sxx, 1.0 / (ns * ns));
    let b = tape.scale(syy, 1.0 / (nt * nt));
    let c = tape.scale(sxy, 2.0 / (ns * nt));
    let ab = tape.add(a, b)?;
    tape.sub(ab, c)
}

fn check_same_dim(tape: &Tape, op: &'static str, x: NodeId, y: NodeId) -> Result<()> {
    if tape.value(x).cols() != tape.value(y).cols() {
        return Err(Error::shape(op, tape.value(x).shape(), tape.value(y).shape()));
    }
    Ok(())
}

/// Squared MMD between the rows of `x` and `y` under a single-bandwidth
/// kernel spec.
pub fn mmd2(tape: &mut Tape, x: NodeId, y: NodeId, k: &KernelSpec) -> Result<NodeId> {
    check_same_dim(tape, "mmd2", x, y)?;
    let bandwidths = k.resolve(&[tape.value(x), tape.value(y)])?;
    if bandwidths.len() != 1 {
        return Err(Error::Config(format!(
            "mmd2 takes exactly one bandwidth, got {}",
            bandwidths.len()
        )));
    }
    mmd2_sigma(tape, x, y, bandwidths[0])
}

/// Multi-kernel MMD over pre-resolved bandwidths: the mean of the
/// single-kernel estimates. Use this form inside training objectives so the
/// bandwidths stay frozen across finite-difference rebuilds.
pub fn mk_mmd2_fixed(tape: &mut Tape, x: NodeId, y: NodeId, bandwidths: &[f64]) -> Result<NodeId> {
    check_same_dim(tape, "mk_mmd2", x, y)?;
    if bandwidths.is_empty() {
        return Err(Error::Config("mk_mmd2 needs at least one bandwidth".into()));
    }
    let mut acc = mmd2_sigma(tape, x, y, bandwidths[0])?;
    for &sigma in &bandwidths[1..] {
        let term = mmd2_sigma(tape, x, y, sigma)?;
        acc = tape.add(acc, term)?;
    }
    Ok(tape.scale(acc, 1.0 / bandwidths.len() as f64))
}

/// Multi-kernel MMD, resolving the kernel spec against the live batch values.
pub fn mk_mmd2(tape: &mut Tape, x: NodeId, y: NodeId, k: &KernelSpec) -> Result<NodeId> {
    check_same_dim(tape, "mk_mmd2", x, y)?;
    let bandwidths = k.resolve(&[tape.value(x), tape.value(y)])?;
    mk_mmd2_fixed(tape, x, y, &bandwidths)
}

/// Subset-conditional MMD over pre-resolved bandwidths:
/// `(1/C') sum_c |sum_i w_i^{sc} phi(x_i) - sum_j w_j^{tc} phi(y_j)|^2`,
/// expanded as `w_s^T K_xx w_s + w_t^T K_yy w_t - 2 w_s^T K_xy w_t` per class.
/// `C'` counts classes carrying weight in *both* domains; others are skipped.
pub fn lmmd2_fixed(
    tape: &mut Tape,
    xs: NodeId,
    xt: NodeId,
    ws: &ClassWeights,
    wt: &ClassWeights,
    bandwidths: &[f64],
) -> Result<NodeId> {
    check_same_dim(tape, "lmmd2", xs, xt)?;
    if ws.class_count() != wt.class_count() {
        return Err(Error::shape(
            "lmmd2",
            (ws.class_count(), ws.sample_count()),
            (wt.class_count(), wt.sample_count()),
        ));
    }
    let ns = tape.value(xs).rows();
    let nt = tape.value(xt).rows();
    if ws.sample_count() != ns || wt.sample_count() != nt {
        return Err(Error::Contract(format!(
            "weight columns ({}, {}) must match sample counts ({ns}, {nt})",
            ws.sample_count(),
            wt.sample_count()
        )));
    }
    if bandwidths.is_empty() {
        return Err(Error::Config("lmmd2 needs at least one bandwidth".into()));
    }

    let active: Vec<usize> = (0..ws.class_count())
        .filter(|&c| ws.class_present(c) && wt.class_present(c))
        .collect();
    if active.is_empty() {
        return Ok(tape.leaf_scalar(0.0));
    }

    let mut acc: Option<NodeId> = None;
    for &sigma in bandwidths {
        let kxx = tape.gauss_gram(xs, xs, sigma)?;
        let kyy = tape.gauss_gram(xt, xt, sigma)?;
        let kxy = tape.gauss_gram(xs, xt, sigma)?;
        for &c in &active {
            let wsr = tape.leaf(Tensor::from_vec(1, ns, ws.row(c).to_vec())?);
            let wtr = tape.leaf(Tensor::from_vec(1, nt, wt.row(c).to_vec())?);
            let wst = tape.transpose(wsr);
            let wtt = tape.transpose(wtr);

            let s_k = tape.matmul(wsr, kxx)?;
            let ss = tape.matmul(s_k, wst)?;
            let t_k = tape.matmul(wtr, kyy)?;
            let tt = tape.matmul(t_k, wtt)?;
            let st_k = tape.matmul(wsr, kxy)?;
            let st = tape.matmul(st_k, wtt)?;

            let st2 = tape.scale(st, 2.0);
            let pair = tape.add(ss, tt)?;
            let term = tape.sub(pair, st2)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
    }
    let total = acc.expect("at least one active class");
    Ok(tape.scale(total, 1.0 / (active.len() * bandwidths.len()) as f64))
}

/// Subset-conditional MMD, resolving the kernel spec against the live batch.
pub fn lmmd2(
    tape: &mut Tape,
    xs: NodeId,
    xt: NodeId,
    ws: &ClassWeights,
    wt: &ClassWeights,
    k: &KernelSpec,
) -> Result<NodeId> {
    let bandwidths = k.resolve(&[tape.value(xs), tape.value(xt)])?;
    lmmd2_fixed(tape, xs, xt, ws, wt, &bandwidths)
}

/// Nuclear norm and its subgradient `U V^T` from the compact SVD, computed
/// outside the tape.
pub fn nuclear_norm_value(a: &Tensor) -> Result<(f64, Tensor)> {
    let svd = linalg::svd(a)?;
    let value = svd.sigma.iter().sum();
    let subgrad = svd.u.matmul(&svd.v.transposed())?;
    Ok((value, subgrad))
}

/// Sum of singular values as a tape scalar; backward distributes the
/// subgradient `U V^T` to the input.
pub fn nuclear_norm(tape: &mut Tape, a: NodeId) -> Result<NodeId> {
    let (value, subgrad) = nuclear_norm_value(tape.value(a))?;
    tape.scalar_with_grad(a, value, subgrad)
}

/// Batch-nuclear-norm objective `-(1/B) |A|_*`: minimizing it pushes the
/// prediction matrix toward high rank (diversity) and high Frobenius mass
/// (confidence) at once.
pub fn bnm_loss(tape: &mut Tape, a: Predictions) -> Result<NodeId> {
    let b = tape.value(a.node()).rows();
    let n = nuclear_norm(tape, a.node())?;
    Ok(tape.scale(n, -1.0 / b as f64))
}

/// KL divergence `sum_i p_i log(p_i / q_i)` between two `1 x C` rows, with
/// clamped logs so `0 log 0` contributes zero.
pub fn kl_div(tape: &mut Tape, p: NodeId, q: NodeId) -> Result<NodeId> {
    let shape = tape.value(p).shape();
    if tape.value(q).shape() != shape {
        return Err(Error::shape("kl_div", shape, tape.value(q).shape()));
    }
    if shape.0 != 1 {
        return Err(Error::Contract(format!(
            "kl_div compares single distributions, got {} rows",
            shape.0
        )));
    }
    validate_stochastic(tape.value(p), "kl_div p")?;
    validate_stochastic(tape.value(q), "kl_div q")?;
    let lp = tape.log_clamped(p);
    let lq = tape.log_clamped(q);
    let diff = tape.sub(lp, lq)?;
    let weighted = tape.mul(p, diff)?;
    Ok(tape.sum(weighted))
}

/// Indices whose maximum class probability strictly exceeds `eps`.
pub fn confidence_filter(probs: &Tensor, eps: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!(
            "confidence threshold must lie in [0, 1), got {eps}"
        )));
    }
    validate_stochastic(probs, "confidence_filter")?;
    Ok((0..probs.rows())
        .filter(|&r| probs.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max) > eps)
        .collect())
}

/// Row-wise KL `p || q` summed over a row subset and divided by the subset
/// size. Helper for [`sr_loss`].
fn mean_kl_over(
    tape: &mut Tape,
    p: NodeId,
    q: NodeId,
    rows: &[usize],
) -> Result<NodeId> {
    if rows.is_empty() {
        return Ok(tape.leaf_scalar(0.0));
    }
    let pf = tape.gather_rows(p, rows)?;
    let qf = tape.gather_rows(q, rows)?;
    let lp = tape.log_clamped(pf);
    let lq = tape.log_clamped(qf);
    let diff = tape.sub(lp, lq)?;
    let weighted = tape.mul(pf, diff)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, 1.0 / rows.len() as f64))
}

/// Bidirectional confidence-filtered self-refinement loss:
/// `omega * E_{F[p]} KL(p || p~) + (1 - omega) * E_{F[p~]} KL(p~ || p)`.
/// Each expectation averages over the rows passing that side's confidence
/// filter and contributes zero when its filter set is empty. Gradients flow
/// through both prediction matrices; the filter sets themselves are index
/// constants taken from forward values.
pub fn sr_loss(
    tape: &mut Tape,
    p: Predictions,
    p_tilde: Predictions,
    omega: f64,
    eps: f64,
) -> Result<NodeId> {
    let shape = tape.value(p.node()).shape();
    if tape.value(p_tilde.node()).shape() != shape {
        return Err(Error::shape(
            "sr_loss",
            shape,
            tape.value(p_tilde.node()).shape(),
        ));
    }
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::Config(format!(
            "sr_loss weight must lie in [0, 1], got {omega}"
        )));
    }
    let forward_rows = confidence_filter(tape.value(p.node()), eps)?;
    let backward_rows = confidence_filter(tape.value(p_tilde.node()), eps)?;
    let fwd = mean_kl_over(tape, p.node(), p_tilde.node(), &forward_rows)?;
    let bwd = mean_kl_over(tape, p_tilde.node(), p.node(), &backward_rows)?;
    let fwd_w = tape.scale(fwd, omega);
    let bwd_w = tape.scale(bwd, 1.0 - omega);
    tape.add(fwd_w, bwd_w)
}

/// Mean row entropy `-(1/B) sum_i sum_c p log p` (diagnostic).
pub fn entropy_mean(tape: &mut Tape, probs: Predictions) -> Result<NodeId> {
    let b = tape.value(probs.node()).rows();
    let lp = tape.log_clamped(probs.node());
    let plogp = tape.mul(probs.node(), lp)?;
    let total = tape.sum(plogp);
    Ok(tape.scale(total, -1.0 / b as f64))
}
