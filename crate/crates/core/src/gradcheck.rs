//! Central finite-difference validation of the whole backward pass: every
//! differentiable primitive, every loss, and every method's composite
//! training objective, each on many random instances.
//!
//! Rebuilt objectives replay the original tape's pinned `stop_gradient`
//! values and reuse the original step's frozen constants ([`StepAux`]), so
//! the difference quotient probes exactly the function the tape
//! differentiates. Instances that sit on a non-differentiable boundary
//! (a relu kink, a confidence-filter threshold, a degenerate singular
//! spectrum) are redrawn rather than checked.

use crate::algorithms::{
    build_objective, build_objective_adv, prepare_aux, AdvMode, AlgorithmConfig, StepAux, TradeOff,
};
use crate::datagen::BatchPair;
use crate::divergences::{
    bnm_loss, coral_loss, cross_entropy, domain_adv_loss, entropy_mean, kl_div, lmmd2_fixed,
    lmmd_weights, mk_mmd2_fixed, nuclear_norm, sr_loss, KernelSpec, LabelsOrProbs, Predictions,
};
use crate::error::{Error, Result};
use crate::models::{init_bundle, GrlCoefficient, LayerSpec, ModelBundle};
use crate::ndgraph::{NodeId, Tape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Per-component tolerance on `|ad - fd| / max(1, |ad|)`.
pub const FD_TOL: f64 = 1e-4;
/// Random instances per check.
pub const INSTANCES: usize = 20;

const MAX_REDRAWS: usize = 80;
const RELU_GUARD: f64 = 2e-4;
const FILTER_GUARD: f64 = 1e-3;
const SVD_GUARD: f64 = 1e-4;

/// Outcome of one named check over its random instances.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Results of the full suite.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
    pub seconds: f64,
}

impl GradcheckReport {
    /// One line per check plus a summary line.
    pub fn render(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<28} {:>3} instances   max rel err {:>10.3e}   {}",
                c.name,
                c.instances,
                c.max_rel_err,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(
            out,
            "{} checks, {} failed, {:.2} s",
            self.checks.len(),
            failed,
            self.seconds
        );
        out
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).expect("consistent dims")
}

/// Random tensor whose entries stay at least `margin` away from zero, for
/// inputs that feed a relu.
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize, margin: f64) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.random_range(margin..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("consistent dims")
}

type Builder<'a> = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + 'a>;

/// Maximum per-component relative error between the tape gradient and the
/// central difference quotient, over every component of every input leaf.
fn max_rel_leaves(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let mut grads = tape.backward(loss)?;
    let pins = tape.pins();

    let eval = |which: usize, component: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::with_pinned(pins.clone());
        let ids: Vec<NodeId> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let mut t = t.clone();
                if j == which {
                    t.data_mut()[component] += delta;
                }
                tape.leaf(t)
            })
            .collect();
        let loss = build(&mut tape, &ids)?;
        tape.value(loss).scalar_value()
    };

    let mut max_rel: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let ad = grads
            .take(ids[k])
            .unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
        for i in 0..input.len() {
            let fd = (eval(k, i, FD_STEP)? - eval(k, i, -FD_STEP)?) / (2.0 * FD_STEP);
            let a = ad.data()[i];
            max_rel = max_rel.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    Ok(max_rel)
}

/// Runs one named check over `INSTANCES` seeded instances.
fn check_leaves(
    name: &str,
    mut gen: impl FnMut(&mut ChaCha8Rng) -> Result<(Vec<Tensor>, Builder<'static>)>,
) -> Result<CheckResult> {
    let mut max_rel: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6ad0_0000 + i as u64 * 7919);
        let (inputs, build) = gen(&mut rng)?;
        max_rel = max_rel.max(max_rel_leaves(&inputs, build.as_ref())?);
    }
    Ok(CheckResult {
        name: name.to_string(),
        instances: INSTANCES,
        max_rel_err: max_rel,
        passed: max_rel <= FD_TOL,
    })
}

fn primitive_checks() -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();

    checks.push(check_leaves("op matmul", |rng| {
        let a = rand_tensor(rng, 3, 4, -1.0, 1.0);
        let b = rand_tensor(rng, 4, 2, -1.0, 1.0);
        Ok((
            vec![a, b],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let p = t.matmul(ids[0], ids[1])?;
                Ok(t.frobenius_sq(p))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op transpose", |rng| {
        let a = rand_tensor(rng, 3, 5, -1.0, 1.0);
        Ok((
            vec![a],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let at = t.transpose(ids[0]);
                let e = t.exp(at);
                Ok(t.sum(e))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op add", |rng| {
        let a = rand_tensor(rng, 4, 3, -1.0, 1.0);
        let b = rand_tensor(rng, 4, 3, -1.0, 1.0);
        Ok((
            vec![a, b],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let s = t.add(ids[0], ids[1])?;
                Ok(t.frobenius_sq(s))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op sub", |rng| {
        let a = rand_tensor(rng, 4, 3, -1.0, 1.0);
        let b = rand_tensor(rng, 4, 3, -1.0, 1.0);
        Ok((
            vec![a, b],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let s = t.sub(ids[0], ids[1])?;
                Ok(t.frobenius_sq(s))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op mul", |rng| {
        let a = rand_tensor(rng, 4, 3, -1.0, 1.0);
        let b = rand_tensor(rng, 4, 3, -1.0, 1.0);
        Ok((
            vec![a, b],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let m = t.mul(ids[0], ids[1])?;
                Ok(t.frobenius_sq(m))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op scale", |rng| {
        let a = rand_tensor(rng, 4, 3, -1.0, 1.0);
        let s: f64 = rng.random_range(-2.0..2.0);
        Ok((
            vec![a],
            Box::new(move |t: &mut Tape, ids: &[NodeId]| {
                let m = t.scale(ids[0], s);
                Ok(t.frobenius_sq(m))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op add_row_broadcast", |rng| {
        let a = rand_tensor(rng, 5, 3, -1.0, 1.0);
        let b = rand_tensor(rng, 1, 3, -1.0, 1.0);
        Ok((
            vec![a, b],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let s = t.add_row_broadcast(ids[0], ids[1])?;
                let e = t.exp(s);
                Ok(t.sum(e))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op relu", |rng| {
        let a = rand_tensor_off_kink(rng, 4, 4, 0.05);
        Ok((
            vec![a],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let r = t.relu(ids[0]);
                Ok(t.frobenius_sq(r))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op exp", |rng| {
        let a = rand_tensor(rng, 4, 3, -1.0, 1.0);
        Ok((
            vec![a],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let e = t.exp(ids[0]);
                Ok(t.sum(e))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op log_clamped", |rng| {
        let a = rand_tensor(rng, 4, 3, 0.5, 2.0);
        Ok((
            vec![a],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let l = t.log_clamped(ids[0]);
                Ok(t.sum(l))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op sigmoid_clamped", |rng| {
        let a = rand_tensor(rng, 4, 3, -3.0, 3.0);
        Ok((
            vec![a],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let s = t.sigmoid_clamped(ids[0]);
                Ok(t.frobenius_sq(s))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op softmax_rows", |rng| {
        let a = rand_tensor(rng, 4, 4, -2.0, 2.0);
        Ok((
            vec![a],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let p = t.softmax_rows(ids[0]);
                Ok(t.frobenius_sq(p))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op sum", |rng| {
        let a = rand_tensor(rng, 4, 3, -1.0, 1.0);
        Ok((
            vec![a],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let m = t.mul(ids[0], ids[0])?;
                Ok(t.sum(m))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op mean", |rng| {
        let a = rand_tensor(rng, 4, 3, -1.0, 1.0);
        Ok((
            vec![a],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let e = t.exp(ids[0]);
                Ok(t.mean(e))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op frobenius_sq", |rng| {
        let a = rand_tensor(rng, 4, 3, -1.0, 1.0);
        Ok((
            vec![a],
            Box::new(|t: &mut Tape, ids: &[NodeId]| Ok(t.frobenius_sq(ids[0]))) as Builder,
        ))
    })?);

    checks.push(check_leaves("op gauss_gram", |rng| {
        let x = rand_tensor(rng, 5, 3, -1.0, 1.0);
        let y = rand_tensor(rng, 4, 3, -1.0, 1.0);
        let sigma: f64 = rng.random_range(0.5..2.0);
        Ok((
            vec![x, y],
            Box::new(move |t: &mut Tape, ids: &[NodeId]| {
                let g = t.gauss_gram(ids[0], ids[1], sigma)?;
                Ok(t.frobenius_sq(g))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op gather_rows", |rng| {
        let a = rand_tensor(rng, 5, 3, -1.0, 1.0);
        let idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
        Ok((
            vec![a],
            Box::new(move |t: &mut Tape, ids: &[NodeId]| {
                let g = t.gather_rows(ids[0], &idx)?;
                let e = t.exp(g);
                Ok(t.sum(e))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op stop_gradient", |rng| {
        let a = rand_tensor(rng, 4, 3, -1.0, 1.0);
        Ok((
            vec![a],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                // loss = sum(a * sg(exp(a))): the frozen factor is replayed on
                // rebuilds, so FD sees d/da [a * c] = c, exactly like the tape.
                let e = t.exp(ids[0]);
                let c = t.stop_gradient(e)?;
                let m = t.mul(ids[0], c)?;
                Ok(t.sum(m))
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("op external_grad", |rng| {
        // The nuclear norm enters the tape through a precomputed-gradient
        // node; resample away from degenerate singular spectra.
        let a = loop {
            let a = rand_tensor(rng, 5, 3, -1.0, 1.0);
            if svd_gap(&a)? > SVD_GUARD {
                break a;
            }
        };
        Ok((
            vec![a],
            Box::new(|t: &mut Tape, ids: &[NodeId]| nuclear_norm(t, ids[0])) as Builder,
        ))
    })?);

    checks.push(grl_reversal_check()?);
    Ok(checks)
}

fn svd_gap(a: &Tensor) -> Result<f64> {
    let svd = crate::linalg::svd(a)?;
    let mut gap = f64::INFINITY;
    for w in svd.sigma.windows(2) {
        gap = gap.min(w[0] - w[1]);
    }
    if let Some(&last) = svd.sigma.last() {
        gap = gap.min(last);
    }
    Ok(gap)
}

/// The reversal layer is *not* the gradient of its value function, so it
/// cannot be checked against plain finite differences. Instead: the value
/// passes through untouched (FD measures the identity composition) and the
/// tape gradient must equal `-coeff` times that measurement.
fn grl_reversal_check() -> Result<CheckResult> {
    let mut max_rel: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0x96f1_0000 + i as u64 * 104729);
        let a = rand_tensor(&mut rng, 3, 4, -1.0, 1.0);
        let coeff: f64 = rng.random_range(0.2..2.0);

        let build = |tape: &mut Tape, input: &Tensor| -> Result<(NodeId, NodeId)> {
            let an = tape.leaf(input.clone());
            let sq = tape.mul(an, an)?;
            let g = tape.grl(sq, coeff);
            let e = tape.exp(g);
            Ok((an, tape.sum(e)))
        };

        let mut tape = Tape::new();
        let (an, loss) = build(&mut tape, &a)?;
        let mut grads = tape.backward(loss)?;
        let ad = grads
            .take(an)
            .ok_or_else(|| Error::Contract("grl input should receive a gradient".into()))?;

        for c in 0..a.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut shifted = a.clone();
                shifted.data_mut()[c] += delta;
                let mut tape = Tape::new();
                let (_, loss) = build(&mut tape, &shifted)?;
                tape.value(loss).scalar_value()
            };
            let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let want = -coeff * fd;
            let got = ad.data()[c];
            max_rel = max_rel.max((got - want).abs() / got.abs().max(1.0));
        }
    }
    Ok(CheckResult {
        name: "op grl (reversal)".to_string(),
        instances: INSTANCES,
        max_rel_err: max_rel,
        passed: max_rel <= FD_TOL,
    })
}

fn loss_checks() -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();

    checks.push(check_leaves("loss cross_entropy", |rng| {
        let logits = rand_tensor(rng, 6, 3, -2.0, 2.0);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        Ok((
            vec![logits],
            Box::new(move |t: &mut Tape, ids: &[NodeId]| cross_entropy(t, ids[0], &labels))
                as Builder,
        ))
    })?);

    checks.push(check_leaves("loss domain_adv", |rng| {
        let logits = rand_tensor(rng, 6, 1, -2.0, 2.0);
        let z: Vec<f64> = (0..6).map(|i| if i < 3 { 1.0 } else { 0.0 }).collect();
        Ok((
            vec![logits],
            Box::new(move |t: &mut Tape, ids: &[NodeId]| {
                let probs = t.sigmoid_clamped(ids[0]);
                domain_adv_loss(t, probs, &z)
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("loss coral", |rng| {
        let xs = rand_tensor(rng, 6, 3, -1.0, 1.0);
        let xt = rand_tensor(rng, 7, 3, -1.0, 1.0);
        Ok((
            vec![xs, xt],
            Box::new(|t: &mut Tape, ids: &[NodeId]| coral_loss(t, ids[0], ids[1])) as Builder,
        ))
    })?);

    checks.push(check_leaves("loss mmd2", |rng| {
        let xs = rand_tensor(rng, 6, 3, -1.0, 1.0);
        let xt = rand_tensor(rng, 5, 3, -1.0, 1.0);
        let sigma: f64 = rng.random_range(0.5..2.0);
        Ok((
            vec![xs, xt],
            Box::new(move |t: &mut Tape, ids: &[NodeId]| {
                mk_mmd2_fixed(t, ids[0], ids[1], &[sigma])
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("loss mk_mmd2", |rng| {
        let xs = rand_tensor(rng, 6, 3, -1.0, 1.0);
        let xt = rand_tensor(rng, 5, 3, -1.0, 1.0);
        Ok((
            vec![xs, xt],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                mk_mmd2_fixed(t, ids[0], ids[1], &[0.5, 1.0, 2.0])
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("loss lmmd2", |rng| {
        let xs = rand_tensor(rng, 6, 3, -1.0, 1.0);
        let xt = rand_tensor(rng, 6, 3, -1.0, 1.0);
        let ys: Vec<usize> = vec![0, 1, 0, 1, 0, 1];
        let soft = rand_tensor(rng, 6, 2, -1.5, 1.5).softmax_rows();
        let ws = lmmd_weights(LabelsOrProbs::Hard(&ys), 2)?;
        let wt = lmmd_weights(LabelsOrProbs::Soft(&soft), 2)?;
        Ok((
            vec![xs, xt],
            Box::new(move |t: &mut Tape, ids: &[NodeId]| {
                lmmd2_fixed(t, ids[0], ids[1], &ws, &wt, &[0.7, 1.3])
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("loss bnm", |rng| {
        let logits = loop {
            let logits = rand_tensor(rng, 6, 3, -2.0, 2.0);
            if svd_gap(&logits.softmax_rows())? > SVD_GUARD {
                break logits;
            }
        };
        Ok((
            vec![logits],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let probs = t.softmax_rows(ids[0]);
                let preds = Predictions::from_node(t, probs)?;
                bnm_loss(t, preds)
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("loss kl_div", |rng| {
        let a = rand_tensor(rng, 1, 4, -2.0, 2.0);
        let b = rand_tensor(rng, 1, 4, -2.0, 2.0);
        Ok((
            vec![a, b],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let p = t.softmax_rows(ids[0]);
                let q = t.softmax_rows(ids[1]);
                kl_div(t, p, q)
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("loss sr", |rng| {
        let eps = 0.45;
        let (a, b) = loop {
            let a = rand_tensor(rng, 6, 3, -1.5, 1.5);
            let b = rand_tensor(rng, 6, 3, -1.5, 1.5);
            let margin = filter_margin(&a.softmax_rows(), eps).min(filter_margin(&b.softmax_rows(), eps));
            if margin > FILTER_GUARD {
                break (a, b);
            }
        };
        Ok((
            vec![a, b],
            Box::new(move |t: &mut Tape, ids: &[NodeId]| {
                let p = t.softmax_rows(ids[0]);
                let q = t.softmax_rows(ids[1]);
                let p = Predictions::from_node(t, p)?;
                let q = Predictions::from_node(t, q)?;
                sr_loss(t, p, q, 0.5, eps)
            }) as Builder,
        ))
    })?);

    checks.push(check_leaves("loss entropy_mean", |rng| {
        let logits = rand_tensor(rng, 6, 3, -2.0, 2.0);
        Ok((
            vec![logits],
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let probs = t.softmax_rows(ids[0]);
                let preds = Predictions::from_node(t, probs)?;
                entropy_mean(t, preds)
            }) as Builder,
        ))
    })?);

    Ok(checks)
}

fn filter_margin(probs: &Tensor, eps: f64) -> f64 {
    let mut margin = f64::INFINITY;
    for r in 0..probs.rows() {
        let max = probs.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        margin = margin.min((max - eps).abs());
    }
    margin
}

/// The seven method configurations exercised by the objective checks.
fn method_configs() -> Vec<AlgorithmConfig> {
    vec![
        AlgorithmConfig::SourceOnly,
        AlgorithmConfig::Coral {
            lam: TradeOff::Constant(1.0),
        },
        AlgorithmConfig::Dan {
            lam: TradeOff::Constant(1.0),
            kernel: KernelSpec::default(),
        },
        AlgorithmConfig::Dann {
            grl: GrlCoefficient::default(),
            lam: 1.0,
        },
        AlgorithmConfig::Dsan {
            lam: TradeOff::Constant(1.0),
            kernel: KernelSpec::default(),
        },
        AlgorithmConfig::Bnm {
            lam: TradeOff::Constant(1.0),
        },
        AlgorithmConfig::Ssrt {
            alpha: 1.0,
            beta: 0.2,
            omega: 0.5,
            eps: 0.55,
            lambda_max: 0.3,
            t: 100,
            perturb_layer: 0,
            grl: GrlCoefficient::default(),
            delta: 0.5,
        },
    ]
}

fn random_instance(seed: u64) -> Result<(ModelBundle, BatchPair, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ef = LayerSpec::new(vec![2, 6, 4])?;
    let h = LayerSpec::new(vec![4, 2])?;
    let d = LayerSpec::new(vec![4, 3, 1])?;
    let bundle = init_bundle(&ef, &h, &d, rng.random())?;
    let b = 6;
    let xs = rand_tensor(&mut rng, b, 2, -2.0, 2.0);
    let xt = rand_tensor(&mut rng, b, 2, -2.0, 2.0);
    let ys = vec![0, 1, 0, 1, 0, 1];
    let mut z = vec![1.0; b];
    z.extend(vec![0.0; b]);
    let yt_labeled = if seed % 4 == 0 {
        Some(vec![(1, 0), (4, 1)])
    } else {
        None
    };
    let batch = BatchPair {
        xs,
        ys,
        xt,
        z,
        yt_labeled,
    };
    Ok((bundle, batch, rng))
}

/// Maximum relative error of the tape gradient of a full method objective
/// against central differences over *every* parameter component of all three
/// networks, with the step's frozen constants and pins held fixed.
///
/// Methods with a reversal layer are probed against per-group mirror
/// objectives (see [`AdvMode`]): the reversal erases itself from the forward
/// value, so the checkable function carries the adversarial term scaled by
/// `-coeff * weight` when differentiating the feature extractor and by
/// `weight` for the classifier and discriminator.
fn objective_max_rel(
    cfg: &AlgorithmConfig,
    bundle: &ModelBundle,
    batch: &BatchPair,
    aux: &StepAux,
) -> Result<f64> {
    let mut tape = Tape::new();
    let built = build_objective(&mut tape, cfg, bundle, batch, aux)?;
    let mut grads = tape.backward(built.loss)?;
    let pins = tape.pins();

    let (adv_weight, adv_coeff) = match cfg {
        AlgorithmConfig::Dann { .. } => (aux.lam, aux.grl_coeff),
        AlgorithmConfig::Ssrt { .. } => (aux.alpha_r, aux.grl_coeff),
        _ => (0.0, 0.0),
    };

    let eval = |net: usize, layer: usize, bias: bool, component: usize, delta: f64| -> Result<f64> {
        let mut b2 = bundle.clone();
        let mlp = match net {
            0 => &mut b2.ef_params,
            1 => &mut b2.h_params,
            _ => &mut b2.d_params,
        };
        let tensor = if bias {
            &mut mlp.layers[layer].b
        } else {
            &mut mlp.layers[layer].w
        };
        tensor.data_mut()[component] += delta;
        let mirror = if net == 0 {
            -adv_coeff * adv_weight
        } else {
            adv_weight
        };
        let mut tape = Tape::with_pinned(pins.clone());
        let built = build_objective_adv(&mut tape, cfg, &b2, batch, aux, AdvMode::Mirror(mirror))?;
        tape.value(built.loss).scalar_value()
    };

    let mut max_rel: f64 = 0.0;
    let staged = [(0usize, &built.ef), (1, &built.h), (2, &built.d)];
    for (net, staged_mlp) in staged {
        let mlp = match net {
            0 => &bundle.ef_params,
            1 => &bundle.h_params,
            _ => &bundle.d_params,
        };
        for (layer, &(wn, bn)) in staged_mlp.iter().enumerate() {
            for (bias, node) in [(false, wn), (true, bn)] {
                let base = if bias {
                    &mlp.layers[layer].b
                } else {
                    &mlp.layers[layer].w
                };
                let ad = grads
                    .take(node)
                    .unwrap_or_else(|| Tensor::zeros(base.rows(), base.cols()));
                for c in 0..base.len() {
                    let fd = (eval(net, layer, bias, c, FD_STEP)?
                        - eval(net, layer, bias, c, -FD_STEP)?)
                        / (2.0 * FD_STEP);
                    let a = ad.data()[c];
                    max_rel = max_rel.max((a - fd).abs() / a.abs().max(1.0));
                }
            }
        }
    }
    Ok(max_rel)
}

fn check_objective(cfg: &AlgorithmConfig) -> Result<CheckResult> {
    let mut max_rel: f64 = 0.0;
    for i in 0..INSTANCES {
        let progress = i as f64 / (INSTANCES - 1) as f64;
        let r = 0.25 + 0.75 * progress;
        let mut found = false;
        for attempt in 0..MAX_REDRAWS {
            let seed =
                0x0b7e_c7ed_u64 ^ ((i as u64) << 8) ^ (attempt as u64).wrapping_mul(0x9e37_79b9);
            let (bundle, batch, mut rng) = random_instance(seed)?;
            let aux = prepare_aux(cfg, &bundle, &batch, progress, r, &mut rng)?;
            let mut probe = Tape::new();
            let built = build_objective(&mut probe, cfg, &bundle, &batch, &aux)?;
            let g = built.guards;
            if g.relu_margin < RELU_GUARD || g.filter_margin < FILTER_GUARD || g.svd_gap < SVD_GUARD
            {
                continue;
            }
            max_rel = max_rel.max(objective_max_rel(cfg, &bundle, &batch, &aux)?);
            found = true;
            break;
        }
        if !found {
            return Err(Error::Numeric(format!(
                "could not draw a well-conditioned {} instance in {MAX_REDRAWS} attempts",
                cfg.name()
            )));
        }
    }
    Ok(CheckResult {
        name: format!("objective {}", cfg.name()),
        instances: INSTANCES,
        max_rel_err: max_rel,
        passed: max_rel <= FD_TOL,
    })
}

/// Runs every primitive, loss, and method-objective check.
pub fn run_full_suite() -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut checks = primitive_checks()?;
    checks.extend(loss_checks()?);
    for cfg in method_configs() {
        checks.push(check_objective(&cfg)?);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckReport {
        checks,
        passed,
        seconds: started.elapsed().as_secs_f64(),
    })
}
