//! Per-method training steps, the SGD optimizer, learning-rate and ramp
//! schedules, and the safe-training state machine.
//!
//! Every method builds one composite scalar objective per step and minimizes
//! it. Adaptation branches with a zero weight at the current step are not
//! built at all — not multiplied by zero — so a method with all adaptation
//! coefficients disabled reproduces the plain source-only trajectory
//! *bitwise* (same graph, same gradients, same updates).
//!
//! Quantities that are constants of a step (resolved schedule values,
//! median-heuristic bandwidths, pseudo-label weights, the perturbation draw)
//! are collected into a [`StepAux`] before the tape is built. The gradient
//! checker rebuilds the same objective at perturbed parameters with the same
//! aux and with recorded `stop_gradient` values replayed, so central
//! differences probe exactly the function the backward pass differentiates.

use crate::datagen::BatchPair;
use crate::divergences::{
    bnm_loss, coral_loss, cross_entropy, domain_adv_loss, lmmd2_fixed, lmmd_weights, mk_mmd2_fixed,
    sr_loss, ClassWeights, KernelSpec, LabelsOrProbs, Predictions,
};
use crate::error::{Error, Result};
use crate::models::{stage_mlp, GrlCoefficient, Mlp, MlpTrace, ModelBundle, Perturbation, StagedMlp};
use crate::ndgraph::{Gradients, NodeId, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// A scalar hyperparameter that is either fixed or ramped over training
/// progress as `value * (2 / (1 + exp(-gamma * p)) - 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TradeOff {
    Constant(f64),
    Ramped {
        value: f64,
        #[serde(default = "default_ramp_gamma")]
        ramp_gamma: f64,
    },
}

fn default_ramp_gamma() -> f64 {
    10.0
}

impl Default for TradeOff {
    fn default() -> Self {
        TradeOff::Constant(1.0)
    }
}

impl TradeOff {
    pub fn validate(&self) -> Result<()> {
        let v = match self {
            TradeOff::Constant(v) => *v,
            TradeOff::Ramped { value, ramp_gamma } => {
                if !ramp_gamma.is_finite() || *ramp_gamma < 0.0 {
                    return Err(Error::Config(format!(
                        "ramp gamma must be finite and non-negative, got {ramp_gamma}"
                    )));
                }
                *value
            }
        };
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Config(format!(
                "trade-off weight must be finite and non-negative, got {v}"
            )));
        }
        Ok(())
    }

    /// Resolved weight at progress `p` in `[0, 1]`.
    pub fn at(&self, p: f64) -> f64 {
        match self {
            TradeOff::Constant(v) => *v,
            TradeOff::Ramped { value, ramp_gamma } => {
                value * (2.0 / (1.0 + (-ramp_gamma * p).exp()) - 1.0)
            }
        }
    }
}

fn default_trade_one() -> TradeOff {
    TradeOff::Constant(1.0)
}

fn default_one() -> f64 {
    1.0
}

fn default_ssrt_beta() -> f64 {
    0.2
}

fn default_ssrt_omega() -> f64 {
    0.5
}

fn default_ssrt_eps() -> f64 {
    0.8
}

fn default_ssrt_lambda_max() -> f64 {
    0.3
}

fn default_ssrt_t() -> u64 {
    100
}

fn default_ssrt_delta() -> f64 {
    0.5
}

/// Which objective a trainer optimizes, with the method's own knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlgorithmConfig {
    /// Cross-entropy on source labels only; the no-adaptation baseline.
    SourceOnly,
    /// CE + `lam` * covariance alignment of source/target features.
    Coral {
        #[serde(default = "default_trade_one")]
        lam: TradeOff,
    },
    /// CE + `lam` * multi-kernel MMD between source/target features.
    Dan {
        #[serde(default = "default_trade_one")]
        lam: TradeOff,
        #[serde(default)]
        kernel: KernelSpec,
    },
    /// CE + `lam` * adversarial domain loss through a gradient reversal layer.
    Dann {
        #[serde(default)]
        grl: GrlCoefficient,
        #[serde(default = "default_one")]
        lam: f64,
    },
    /// CE + `lam` * subdomain (per-class) MMD with pseudo-labeled targets.
    Dsan {
        #[serde(default = "default_trade_one")]
        lam: TradeOff,
        #[serde(default)]
        kernel: KernelSpec,
    },
    /// CE + `lam` * batch-nuclear-norm objective on target predictions.
    Bnm {
        #[serde(default = "default_trade_one")]
        lam: TradeOff,
    },
    /// CE + `alpha_r` * adversarial loss + `beta_r` * bidirectional
    /// self-refinement, with safe training modulating `alpha_r = r * alpha`,
    /// `beta_r = r * beta`.
    Ssrt {
        #[serde(default = "default_one")]
        alpha: f64,
        #[serde(default = "default_ssrt_beta")]
        beta: f64,
        #[serde(default = "default_ssrt_omega")]
        omega: f64,
        #[serde(default = "default_ssrt_eps")]
        eps: f64,
        #[serde(default = "default_ssrt_lambda_max")]
        lambda_max: f64,
        /// Steps per safe-training ramp and per diversity interval.
        #[serde(default = "default_ssrt_t", rename = "T")]
        t: u64,
        #[serde(default)]
        perturb_layer: usize,
        #[serde(default)]
        grl: GrlCoefficient,
        /// Collapse threshold: an interval whose mean diversity falls below
        /// `delta` times the best interval mean triggers a restore.
        #[serde(default = "default_ssrt_delta")]
        delta: f64,
    },
}

impl AlgorithmConfig {
    /// Stable lowercase identifier used in reports and file names.
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmConfig::SourceOnly => "source_only",
            AlgorithmConfig::Coral { .. } => "coral",
            AlgorithmConfig::Dan { .. } => "dan",
            AlgorithmConfig::Dann { .. } => "dann",
            AlgorithmConfig::Dsan { .. } => "dsan",
            AlgorithmConfig::Bnm { .. } => "bnm",
            AlgorithmConfig::Ssrt { .. } => "ssrt",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_weight = |name: &str, v: f64| -> Result<()> {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
            Ok(())
        };
        match self {
            AlgorithmConfig::SourceOnly => Ok(()),
            AlgorithmConfig::Coral { lam } | AlgorithmConfig::Bnm { lam } => lam.validate(),
            AlgorithmConfig::Dan { lam, kernel } | AlgorithmConfig::Dsan { lam, kernel } => {
                lam.validate()?;
                kernel.validate()
            }
            AlgorithmConfig::Dann { grl, lam } => {
                grl.validate()?;
                check_weight("lam", *lam)
            }
            AlgorithmConfig::Ssrt {
                alpha,
                beta,
                omega,
                eps,
                lambda_max,
                t,
                grl,
                delta,
                ..
            } => {
                check_weight("alpha", *alpha)?;
                check_weight("beta", *beta)?;
                check_weight("lambda_max", *lambda_max)?;
                grl.validate()?;
                if !(0.0..=1.0).contains(omega) {
                    return Err(Error::Config(format!("omega must lie in [0, 1], got {omega}")));
                }
                if !(0.0..1.0).contains(eps) {
                    return Err(Error::Config(format!("eps must lie in [0, 1), got {eps}")));
                }
                if *t == 0 {
                    return Err(Error::Config("safe-training T must be at least 1".into()));
                }
                if !(*delta > 0.0 && *delta < 1.0) {
                    return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
                }
                Ok(())
            }
        }
    }
}

/// SGD hyperparameters plus the learning-rate decay schedule
/// `lr = lr0 * (1 + lr_gamma * p)^(-lr_decay)` over run progress `p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSpec {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    pub lr_decay: f64,
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            lr0: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_gamma: 10.0,
            lr_decay: 0.75,
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lr_gamma", self.lr_gamma),
            ("lr_decay", self.lr_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `lr0 * (1 + gamma * p)^(-decay)` for progress `p` in `[0, 1]`.
pub fn lr_at(lr0: f64, p: f64, gamma: f64, decay: f64) -> f64 {
    lr0 * (1.0 + gamma * p).powf(-decay)
}

/// One `(weights, bias)` tensor pair per layer per network; the layout used
/// for both momentum buffers and collected gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub ef: Vec<(Tensor, Tensor)>,
    pub h: Vec<(Tensor, Tensor)>,
    pub d: Vec<(Tensor, Tensor)>,
}

impl ParamSet {
    pub fn zeros_like(bundle: &ModelBundle) -> Self {
        let zeros = |mlp: &Mlp| {
            mlp.layers
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(l.w.rows(), l.w.cols()),
                        Tensor::zeros(l.b.rows(), l.b.cols()),
                    )
                })
                .collect()
        };
        ParamSet {
            ef: zeros(&bundle.ef_params),
            h: zeros(&bundle.h_params),
            d: zeros(&bundle.d_params),
        }
    }
}

/// Everything that evolves while a single method trains on a single task.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub bundle: ModelBundle,
    pub velocity: ParamSet,
    pub step: u64,
    pub epoch: u64,
    pub total_steps: u64,
    pub optim: OptimSpec,
    /// Stream for the trainer's own draws (perturbation strength and batch
    /// permutation); batch sampling uses a separate generator.
    pub rng: ChaCha8Rng,
}

impl TrainerState {
    pub fn new(
        bundle: ModelBundle,
        optim: OptimSpec,
        total_steps: u64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        optim.validate()?;
        if total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        let velocity = ParamSet::zeros_like(&bundle);
        Ok(TrainerState {
            bundle,
            velocity,
            step: 0,
            epoch: 0,
            total_steps,
            optim,
            rng,
        })
    }

    /// Normalized run progress in `[0, 1]` at the current step.
    pub fn progress(&self) -> f64 {
        (self.step as f64 / self.total_steps as f64).clamp(0.0, 1.0)
    }
}

fn update_tensor(theta: &mut Tensor, v: &mut Tensor, g: &Tensor, lr: f64, m: f64, wd: f64) {
    for i in 0..theta.len() {
        let grad = g.data()[i] + wd * theta.data()[i];
        let vel = m * v.data()[i] + grad;
        v.data_mut()[i] = vel;
        theta.data_mut()[i] -= lr * vel;
    }
}

/// One momentum-SGD update over all three networks:
/// `v <- momentum * v + (g + weight_decay * theta)`, `theta <- theta - lr * v`.
/// Rejects non-finite gradients before touching any parameter.
pub fn sgd_step(state: &mut TrainerState, grads: &ParamSet, lr: f64) -> Result<()> {
    for (name, gs) in [("ef", &grads.ef), ("h", &grads.h), ("d", &grads.d)] {
        for (l, (gw, gb)) in gs.iter().enumerate() {
            if !gw.all_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for {name} layer {l} weights"
                )));
            }
            if !gb.all_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for {name} layer {l} bias"
                )));
            }
        }
    }
    let (m, wd) = (state.optim.momentum, state.optim.weight_decay);
    let nets = [
        (&mut state.bundle.ef_params, &mut state.velocity.ef, &grads.ef),
        (&mut state.bundle.h_params, &mut state.velocity.h, &grads.h),
        (&mut state.bundle.d_params, &mut state.velocity.d, &grads.d),
    ];
    for (mlp, vel, gs) in nets {
        for ((layer, (vw, vb)), (gw, gb)) in mlp.layers.iter_mut().zip(vel.iter_mut()).zip(gs) {
            update_tensor(&mut layer.w, vw, gw, lr, m, wd);
            update_tensor(&mut layer.b, vb, gb, lr, m, wd);
        }
    }
    Ok(())
}

/// Per-step constants resolved *before* the objective tape is built. Frozen
/// across finite-difference rebuilds of the same step.
#[derive(Clone, Debug, Default)]
pub(crate) struct StepAux {
    /// Resolved adaptation weight (Coral/DAN/DSAN/BNM/DANN).
    pub lam: f64,
    pub grl_coeff: f64,
    pub alpha_r: f64,
    pub beta_r: f64,
    /// Kernel bandwidths resolved from the step's feature values.
    pub bandwidths: Option<Vec<f64>>,
    /// Frozen target pseudo-label weights (DSAN).
    pub target_weights: Option<ClassWeights>,
    /// Perturbation draw (SSRT): strength and batch permutation.
    pub lambda: f64,
    pub perm: Vec<usize>,
}

/// Margins the gradient checker uses to reject instances sitting on
/// non-differentiable boundaries; `INFINITY` when the hazard is absent.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FdGuards {
    /// Distance of the closest row-max probability to the confidence
    /// threshold (filter membership flips inside this margin).
    pub filter_margin: f64,
    /// Smallest singular-value gap (including to zero) in the nuclear norm.
    pub svd_gap: f64,
    /// Smallest |pre-activation| feeding a relu.
    pub relu_margin: f64,
}

impl Default for FdGuards {
    fn default() -> Self {
        FdGuards {
            filter_margin: f64::INFINITY,
            svd_gap: f64::INFINITY,
            relu_margin: f64::INFINITY,
        }
    }
}

/// The built objective: the scalar loss node, staged parameter leaves, the
/// value-level loss breakdown, and diagnostics.
pub(crate) struct BuiltObjective {
    pub loss: NodeId,
    pub ef: StagedMlp,
    pub h: StagedMlp,
    pub d: StagedMlp,
    pub ce: f64,
    pub adapt: f64,
    pub sr: f64,
    pub diversity: usize,
    pub guards: FdGuards,
}

/// Resolves all per-step constants. Consumes randomness only for a
/// self-refinement config with `beta > 0` (one strength draw, one shuffle).
pub(crate) fn prepare_aux(
    cfg: &AlgorithmConfig,
    bundle: &ModelBundle,
    batch: &BatchPair,
    progress: f64,
    r: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepAux> {
    let mut aux = StepAux::default();
    let resolve_bandwidths = |kernel: &KernelSpec| -> Result<Vec<f64>> {
        let fs = bundle.features_value(&batch.xs)?;
        let ft = bundle.features_value(&batch.xt)?;
        kernel.resolve(&[&fs, &ft])
    };
    match cfg {
        AlgorithmConfig::SourceOnly => {}
        AlgorithmConfig::Coral { lam } | AlgorithmConfig::Bnm { lam } => {
            aux.lam = lam.at(progress);
        }
        AlgorithmConfig::Dan { lam, kernel } => {
            aux.lam = lam.at(progress);
            if aux.lam > 0.0 {
                aux.bandwidths = Some(resolve_bandwidths(kernel)?);
            }
        }
        AlgorithmConfig::Dann { grl, lam } => {
            aux.lam = *lam;
            aux.grl_coeff = grl.at(progress);
        }
        AlgorithmConfig::Dsan { lam, kernel } => {
            aux.lam = lam.at(progress);
            if aux.lam > 0.0 {
                aux.bandwidths = Some(resolve_bandwidths(kernel)?);
                let probs = bundle.logits_value(&batch.xt)?.softmax_rows();
                aux.target_weights = Some(lmmd_weights(
                    LabelsOrProbs::Soft(&probs),
                    probs.cols(),
                )?);
            }
        }
        AlgorithmConfig::Ssrt {
            alpha,
            beta,
            lambda_max,
            grl,
            ..
        } => {
            aux.alpha_r = r * alpha;
            aux.beta_r = r * beta;
            aux.grl_coeff = grl.at(progress);
            if *beta > 0.0 {
                aux.lambda = rng.random::<f64>() * lambda_max;
                let mut perm: Vec<usize> = (0..batch.xs.rows()).collect();
                perm.shuffle(rng);
                aux.perm = perm;
            }
        }
    }
    Ok(aux)
}

fn note_relu_margins(tape: &Tape, trace: &MlpTrace, guards: &mut FdGuards) {
    // Only hidden pre-activations pass through a relu.
    for &pre in trace.preacts.iter().take(trace.preacts.len().saturating_sub(1)) {
        for &v in tape.value(pre).data() {
            guards.relu_margin = guards.relu_margin.min(v.abs());
        }
    }
}

fn note_filter_margin(probs: &Tensor, eps: f64, guards: &mut FdGuards) {
    for row in 0..probs.rows() {
        let max = probs.row(row).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        guards.filter_margin = guards.filter_margin.min((max - eps).abs());
    }
}

fn note_svd_gap(a: &Tensor, guards: &mut FdGuards) -> Result<()> {
    let svd = crate::linalg::svd(a)?;
    for w in svd.sigma.windows(2) {
        guards.svd_gap = guards.svd_gap.min(w[0] - w[1]);
    }
    if let Some(&last) = svd.sigma.last() {
        guards.svd_gap = guards.svd_gap.min(last);
    }
    Ok(())
}

/// How the adversarial branch enters the objective.
///
/// `Real` inserts the reversal layer, which makes the backward pass a
/// pseudo-gradient field rather than the gradient of the forward value. The
/// finite-difference checker therefore probes `Mirror(m)` objectives — same
/// forward values, no reversal, adversarial term scaled by `m` — choosing
/// `m = -coeff * weight` for the feature extractor and `m = weight` for the
/// other networks, which are the functions whose true gradients equal the
/// pseudo-gradient on each parameter group.
#[derive(Clone, Copy, Debug)]
pub(crate) enum AdvMode {
    Real,
    Mirror(f64),
}

/// Builds the method's composite objective for one batch on `tape`. The
/// function of the staged parameter leaves is completely determined by
/// `(cfg, batch, aux)` plus the tape's pinned `stop_gradient` values, which
/// is what makes finite-difference validation of `train_step` possible.
pub(crate) fn build_objective(
    tape: &mut Tape,
    cfg: &AlgorithmConfig,
    bundle: &ModelBundle,
    batch: &BatchPair,
    aux: &StepAux,
) -> Result<BuiltObjective> {
    build_objective_adv(tape, cfg, bundle, batch, aux, AdvMode::Real)
}

pub(crate) fn build_objective_adv(
    tape: &mut Tape,
    cfg: &AlgorithmConfig,
    bundle: &ModelBundle,
    batch: &BatchPair,
    aux: &StepAux,
    adv_mode: AdvMode,
) -> Result<BuiltObjective> {
    let b = batch.xs.rows();
    let mut guards = FdGuards::default();

    let ef = stage_mlp(tape, &bundle.ef_params);
    let h = stage_mlp(tape, &bundle.h_params);
    let d = stage_mlp(tape, &bundle.d_params);

    let x_all = tape.leaf(Tensor::vstack(&[&batch.xs, &batch.xt])?);
    let feat_trace = crate::models::mlp_forward(tape, &ef, x_all)?;
    note_relu_margins(tape, &feat_trace, &mut guards);
    let feats = feat_trace.output;
    let src_rows: Vec<usize> = (0..b).collect();
    let tgt_rows: Vec<usize> = (b..2 * b).collect();
    let feats_s = tape.gather_rows(feats, &src_rows)?;
    let feats_t = tape.gather_rows(feats, &tgt_rows)?;

    let logits_s_trace = crate::models::mlp_forward(tape, &h, feats_s)?;
    note_relu_margins(tape, &logits_s_trace, &mut guards);
    let logits_s = logits_s_trace.output;
    let ce_node = cross_entropy(tape, logits_s, &batch.ys)?;
    let mut loss = ce_node;
    let mut ce_value = tape.value(ce_node).scalar_value()?;
    let mut adapt_value = 0.0;
    let mut sr_value = 0.0;
    let mut logits_t: Option<NodeId> = None;

    let forward_h = |tape: &mut Tape, input: NodeId, guards: &mut FdGuards| -> Result<NodeId> {
        let trace = crate::models::mlp_forward(tape, &h, input)?;
        note_relu_margins(tape, &trace, guards);
        Ok(trace.output)
    };

    // Adversarial branch shared by DANN and the self-refinement method:
    // CE(domain classifier on reversed features), weighted. The branch is
    // built (or skipped) according to the real weight regardless of mode, so
    // mirror objectives keep the same graph topology.
    let adversarial = |tape: &mut Tape,
                       weight: f64,
                       coeff: f64,
                       guards: &mut FdGuards|
     -> Result<Option<NodeId>> {
        if weight == 0.0 {
            return Ok(None);
        }
        let d_in = match adv_mode {
            AdvMode::Real => tape.grl(feats, coeff),
            AdvMode::Mirror(_) => feats,
        };
        let trace = crate::models::mlp_forward(tape, &d, d_in)?;
        note_relu_margins(tape, &trace, guards);
        let probs = tape.sigmoid_clamped(trace.output);
        let adv = domain_adv_loss(tape, probs, &batch.z)?;
        let factor = match adv_mode {
            AdvMode::Real => weight,
            AdvMode::Mirror(m) => m,
        };
        Ok(Some(tape.scale(adv, factor)))
    };

    match cfg {
        AlgorithmConfig::SourceOnly => {}
        AlgorithmConfig::Coral { .. } => {
            if aux.lam > 0.0 {
                let coral = coral_loss(tape, feats_s, feats_t)?;
                let weighted = tape.scale(coral, aux.lam);
                adapt_value = tape.value(weighted).scalar_value()?;
                loss = tape.add(loss, weighted)?;
            }
        }
        AlgorithmConfig::Dan { .. } => {
            if aux.lam > 0.0 {
                let bw = aux
                    .bandwidths
                    .as_ref()
                    .ok_or_else(|| Error::Contract("DAN aux missing bandwidths".into()))?;
                let mmd = mk_mmd2_fixed(tape, feats_s, feats_t, bw)?;
                let weighted = tape.scale(mmd, aux.lam);
                adapt_value = tape.value(weighted).scalar_value()?;
                loss = tape.add(loss, weighted)?;
            }
        }
        AlgorithmConfig::Dann { .. } => {
            if let Some(weighted) = adversarial(tape, aux.lam, aux.grl_coeff, &mut guards)? {
                adapt_value = tape.value(weighted).scalar_value()?;
                loss = tape.add(loss, weighted)?;
            }
        }
        AlgorithmConfig::Dsan { .. } => {
            if aux.lam > 0.0 {
                let bw = aux
                    .bandwidths
                    .as_ref()
                    .ok_or_else(|| Error::Contract("DSAN aux missing bandwidths".into()))?;
                let wt = aux
                    .target_weights
                    .as_ref()
                    .ok_or_else(|| Error::Contract("DSAN aux missing target weights".into()))?;
                let ws = lmmd_weights(LabelsOrProbs::Hard(&batch.ys), wt.class_count())?;
                let lmmd = lmmd2_fixed(tape, feats_s, feats_t, &ws, wt, bw)?;
                let weighted = tape.scale(lmmd, aux.lam);
                adapt_value = tape.value(weighted).scalar_value()?;
                loss = tape.add(loss, weighted)?;
            }
        }
        AlgorithmConfig::Bnm { .. } => {
            if aux.lam > 0.0 {
                let lt = forward_h(tape, feats_t, &mut guards)?;
                logits_t = Some(lt);
                let probs = tape.softmax_rows(lt);
                note_svd_gap(tape.value(probs), &mut guards)?;
                let preds = Predictions::from_node(tape, probs)?;
                let bnm = bnm_loss(tape, preds)?;
                let weighted = tape.scale(bnm, aux.lam);
                adapt_value = tape.value(weighted).scalar_value()?;
                loss = tape.add(loss, weighted)?;
            }
        }
        AlgorithmConfig::Ssrt {
            omega,
            eps,
            perturb_layer,
            ..
        } => {
            if let Some(weighted) = adversarial(tape, aux.alpha_r, aux.grl_coeff, &mut guards)? {
                adapt_value = tape.value(weighted).scalar_value()?;
                loss = tape.add(loss, weighted)?;
            }
            if aux.beta_r > 0.0 {
                let lt = forward_h(tape, feats_t, &mut guards)?;
                logits_t = Some(lt);
                let p = tape.softmax_rows(lt);

                let x_t = tape.gather_rows(x_all, &tgt_rows)?;
                let perturb = Perturbation {
                    site: *perturb_layer,
                    lambda: aux.lambda,
                    perm: &aux.perm,
                };
                let feats_pert =
                    crate::models::mlp_forward_perturbed(tape, &ef, x_t, &perturb)?;
                note_relu_margins(tape, &feats_pert, &mut guards);
                let lt_pert = forward_h(tape, feats_pert.output, &mut guards)?;
                let p_tilde = tape.softmax_rows(lt_pert);

                note_filter_margin(tape.value(p), *eps, &mut guards);
                note_filter_margin(tape.value(p_tilde), *eps, &mut guards);
                let p = Predictions::from_node(tape, p)?;
                let p_tilde = Predictions::from_node(tape, p_tilde)?;
                let sr = sr_loss(tape, p, p_tilde, *omega, *eps)?;
                let weighted = tape.scale(sr, aux.beta_r);
                sr_value = tape.value(weighted).scalar_value()?;
                loss = tape.add(loss, weighted)?;
            }
        }
    }

    // Supervised-fraction protocol: revealed target labels add a plain CE
    // term (applies to every method).
    if let Some(pairs) = &batch.yt_labeled {
        if !pairs.is_empty() {
            let lt = match logits_t {
                Some(lt) => lt,
                None => {
                    let lt = forward_h(tape, feats_t, &mut guards)?;
                    logits_t = Some(lt);
                    lt
                }
            };
            let rows: Vec<usize> = pairs.iter().map(|&(pos, _)| pos).collect();
            let labels: Vec<usize> = pairs.iter().map(|&(_, label)| label).collect();
            let picked = tape.gather_rows(lt, &rows)?;
            let sup = cross_entropy(tape, picked, &labels)?;
            ce_value += tape.value(sup).scalar_value()?;
            loss = tape.add(loss, sup)?;
        }
    }

    // Diversity diagnostic from the clean target logits; built after the loss
    // node, so it never participates in the backward pass.
    let lt = match logits_t {
        Some(lt) => lt,
        None => forward_h(tape, feats_t, &mut guards)?,
    };
    let diversity = diversity(tape.value(lt));

    Ok(BuiltObjective {
        loss,
        ef,
        h,
        d,
        ce: ce_value,
        adapt: adapt_value,
        sr: sr_value,
        diversity,
        guards,
    })
}

fn collect_mlp_grads(
    grads: &mut Gradients,
    staged: &StagedMlp,
    mlp: &Mlp,
) -> Vec<(Tensor, Tensor)> {
    staged
        .iter()
        .zip(&mlp.layers)
        .map(|(&(wn, bn), layer)| {
            (
                grads
                    .take(wn)
                    .unwrap_or_else(|| Tensor::zeros(layer.w.rows(), layer.w.cols())),
                grads
                    .take(bn)
                    .unwrap_or_else(|| Tensor::zeros(layer.b.rows(), layer.b.cols())),
            )
        })
        .collect()
}

/// One step's loss breakdown, one row of the run log.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Composite objective value; equals `ce + adapt + sr`.
    pub total: f64,
    pub ce: f64,
    pub adapt: f64,
    pub sr: f64,
    /// Safe-training ramp in effect (1 when safe training is inactive).
    pub r: f64,
    pub diversity: usize,
}

/// Builds the method's objective on one batch, backpropagates, and applies
/// one SGD update. `r` is the safe-training ramp (pass 1.0 for methods
/// without safe training). A non-finite composite loss aborts the step with
/// the state untouched.
pub fn train_step(
    cfg: &AlgorithmConfig,
    state: &mut TrainerState,
    batch: &BatchPair,
    r: f64,
) -> Result<StepRecord> {
    cfg.validate()?;
    let progress = state.progress();
    let lr = lr_at(
        state.optim.lr0,
        progress,
        state.optim.lr_gamma,
        state.optim.lr_decay,
    );

    // Draw from a scratch generator; committed only when the step succeeds.
    let mut rng = state.rng.clone();
    let aux = prepare_aux(cfg, &state.bundle, batch, progress, r, &mut rng)?;

    let mut tape = Tape::new();
    let built = build_objective(&mut tape, cfg, &state.bundle, batch, &aux)?;
    let total = tape.value(built.loss).scalar_value()?;
    if !total.is_finite() {
        return Err(Error::Training(format!(
            "non-finite composite loss ({total}) at step {}; state left unchanged",
            state.step
        )));
    }

    let mut grads = tape.backward(built.loss)?;
    let gradset = ParamSet {
        ef: collect_mlp_grads(&mut grads, &built.ef, &state.bundle.ef_params),
        h: collect_mlp_grads(&mut grads, &built.h, &state.bundle.h_params),
        d: collect_mlp_grads(&mut grads, &built.d, &state.bundle.d_params),
    };
    sgd_step(state, &gradset, lr)?;

    let record = StepRecord {
        step: state.step,
        epoch: state.epoch,
        lr,
        total,
        ce: built.ce,
        adapt: built.adapt,
        sr: built.sr,
        r,
        diversity: built.diversity,
    };
    state.step += 1;
    state.rng = rng;
    Ok(record)
}

/// Number of distinct argmax classes over a logits batch (ties break toward
/// the lowest class index).
pub fn diversity(logits: &Tensor) -> usize {
    logits.argmax_rows().into_iter().collect::<BTreeSet<_>>().len()
}

/// Safe-training supervisor: ramps the adaptation weights back up after every
/// reset and rolls the trainer back when target-prediction diversity
/// collapses.
#[derive(Clone, Debug)]
pub struct SafeTrainingState {
    /// Current ramp value, refreshed on every tick.
    pub r: f64,
    /// Step at which the current ramp started.
    pub t_r: u64,
    /// Steps the ramp takes to reach 1 (`T_r`).
    pub t_ramp: u64,
    /// Steps per diversity interval (`T`).
    pub interval: u64,
    /// Collapse threshold relative to the best interval mean.
    pub collapse_ratio: f64,
    snapshot_bundle: ModelBundle,
    snapshot_velocity: ParamSet,
    acc_diversity: f64,
    acc_count: u64,
    max_interval_mean: f64,
}

impl SafeTrainingState {
    /// Snapshots the freshly initialized trainer (the step-0 fallback) and
    /// starts the ramp at the current step.
    pub fn new(trainer: &TrainerState, t_ramp: u64, interval: u64, collapse_ratio: f64) -> Result<Self> {
        if interval == 0 {
            return Err(Error::Config("safe-training interval must be at least 1".into()));
        }
        if !(collapse_ratio > 0.0 && collapse_ratio < 1.0) {
            return Err(Error::Config(format!(
                "collapse ratio must lie in (0, 1), got {collapse_ratio}"
            )));
        }
        Ok(SafeTrainingState {
            r: 0.0,
            t_r: trainer.step,
            t_ramp,
            interval,
            collapse_ratio,
            snapshot_bundle: trainer.bundle.clone(),
            snapshot_velocity: trainer.velocity.clone(),
            acc_diversity: 0.0,
            acc_count: 0,
            max_interval_mean: 0.0,
        })
    }
}

/// The ramp of the safe-training schedule:
/// `sin(pi/(2 T_r) * (step - t_r))` while `step - t_r < T_r`, else `1.0`.
pub fn r_schedule(s: &SafeTrainingState, step: u64) -> f64 {
    let elapsed = step.saturating_sub(s.t_r);
    if elapsed >= s.t_ramp {
        return 1.0;
    }
    (std::f64::consts::PI / (2.0 * s.t_ramp as f64) * elapsed as f64).sin()
}

/// Feeds one step's target-batch diversity into the supervisor. At interval
/// boundaries, either refreshes the snapshot (healthy interval) or restores
/// the trainer's parameters and momentum from the last healthy snapshot and
/// restarts the ramp (collapse: interval mean below `collapse_ratio` times
/// the best interval mean). Returns whether a restore fired.
pub fn safe_training_tick(
    s: &mut SafeTrainingState,
    trainer: &mut TrainerState,
    diversity: usize,
) -> bool {
    s.acc_diversity += diversity as f64;
    s.acc_count += 1;
    let mut restored = false;
    if s.acc_count == s.interval {
        let mean = s.acc_diversity / s.acc_count as f64;
        if mean < s.collapse_ratio * s.max_interval_mean {
            trainer.bundle = s.snapshot_bundle.clone();
            trainer.velocity = s.snapshot_velocity.clone();
            s.t_r = trainer.step;
            restored = true;
        } else {
            s.snapshot_bundle = trainer.bundle.clone();
            s.snapshot_velocity = trainer.velocity.clone();
            if mean > s.max_interval_mean {
                s.max_interval_mean = mean;
            }
        }
        s.acc_diversity = 0.0;
        s.acc_count = 0;
    }
    s.r = r_schedule(s, trainer.step);
    restored
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_shift_pair, sample_balanced_batch, BaseShape, ShiftSpec};
    use crate::models::{default_specs, init_bundle, GrlSchedule, LayerSpec};
    use rand::SeedableRng;

    fn moons_batch(seed: u64, b: usize) -> BatchPair {
        let spec = ShiftSpec {
            base: BaseShape::TwoMoons,
            n_per_domain: 64,
            rotation_deg: 30.0,
            translation: vec![],
            noise_sigma: 0.0,
            class_count: 2,
            seed,
        };
        let (src, tgt) = make_shift_pair(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        sample_balanced_batch(&src, &tgt, b, &mut rng).unwrap()
    }

    fn small_trainer(seed: u64) -> TrainerState {
        let ef = LayerSpec::new(vec![2, 8, 4]).unwrap();
        let h = LayerSpec::new(vec![4, 2]).unwrap();
        let d = LayerSpec::new(vec![4, 3, 1]).unwrap();
        let bundle = init_bundle(&ef, &h, &d, seed).unwrap();
        TrainerState::new(
            bundle,
            OptimSpec::default(),
            100,
            ChaCha8Rng::seed_from_u64(seed ^ 0x55),
        )
        .unwrap()
    }

    fn all_methods() -> Vec<AlgorithmConfig> {
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
                eps: 0.8,
                lambda_max: 0.3,
                t: 100,
                perturb_layer: 0,
                grl: GrlCoefficient::default(),
                delta: 0.5,
            },
        ]
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at(0.01, 0.0, 10.0, 0.75), 0.01);
        let end = lr_at(1.0, 1.0, 10.0, 0.75);
        assert!((end - 11.0_f64.powf(-0.75)).abs() < 1e-12);
        assert!((end - 0.16556).abs() < 1e-4);
        let mut prev = f64::INFINITY;
        for i in 0..=10 {
            let lr = lr_at(1.0, i as f64 / 10.0, 10.0, 0.75);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn sgd_hand_steps() {
        let mut trainer = small_trainer(0);
        trainer.optim.weight_decay = 0.0;
        // Overwrite one parameter with a known value and push g = 1 twice.
        trainer.bundle.ef_params.layers[0].w = Tensor::filled(2, 8, 1.0);
        let mut grads = ParamSet::zeros_like(&trainer.bundle);
        grads.ef[0].0 = Tensor::filled(2, 8, 1.0);
        sgd_step(&mut trainer, &grads, 0.1).unwrap();
        assert!((trainer.bundle.ef_params.layers[0].w[(0, 0)] - 0.9).abs() < 1e-15);
        sgd_step(&mut trainer, &grads, 0.1).unwrap();
        // v2 = 0.9 * 1 + 1 = 1.9, theta = 0.9 - 0.19 = 0.71.
        assert!((trainer.bundle.ef_params.layers[0].w[(0, 0)] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grads_without_decay_keep_parameters() {
        let mut trainer = small_trainer(1);
        trainer.optim.weight_decay = 0.0;
        let before = trainer.bundle.clone();
        let grads = ParamSet::zeros_like(&trainer.bundle);
        sgd_step(&mut trainer, &grads, 0.1).unwrap();
        assert_eq!(trainer.bundle, before);
    }

    #[test]
    fn sgd_rejects_non_finite_gradients_by_name() {
        let mut trainer = small_trainer(2);
        let mut grads = ParamSet::zeros_like(&trainer.bundle);
        grads.h[0].1 = Tensor::filled(1, 2, f64::NAN);
        let err = sgd_step(&mut trainer, &grads, 0.1).unwrap_err().to_string();
        assert!(err.contains("h layer 0 bias"), "{err}");
    }

    #[test]
    fn every_method_takes_a_finite_step() {
        let batch = moons_batch(3, 8);
        for cfg in all_methods() {
            let mut trainer = small_trainer(7);
            let before = trainer.bundle.clone();
            let rec = train_step(&cfg, &mut trainer, &batch, 1.0).unwrap();
            assert!(rec.total.is_finite(), "{}", cfg.name());
            assert!(
                (rec.total - (rec.ce + rec.adapt + rec.sr)).abs() < 1e-9,
                "{}: breakdown mismatch",
                cfg.name()
            );
            assert_ne!(trainer.bundle, before, "{}", cfg.name());
            assert_eq!(trainer.step, 1);
            assert!(rec.diversity >= 1 && rec.diversity <= 2);
        }
    }

    #[test]
    fn zeroed_methods_reduce_to_source_only_bitwise() {
        let zeroed: Vec<AlgorithmConfig> = vec![
            AlgorithmConfig::Coral {
                lam: TradeOff::Constant(0.0),
            },
            AlgorithmConfig::Dan {
                lam: TradeOff::Constant(0.0),
                kernel: KernelSpec::default(),
            },
            AlgorithmConfig::Dann {
                grl: GrlCoefficient::default(),
                lam: 0.0,
            },
            AlgorithmConfig::Dsan {
                lam: TradeOff::Constant(0.0),
                kernel: KernelSpec::default(),
            },
            AlgorithmConfig::Bnm {
                lam: TradeOff::Constant(0.0),
            },
            AlgorithmConfig::Ssrt {
                alpha: 0.0,
                beta: 0.0,
                omega: 0.5,
                eps: 0.8,
                lambda_max: 0.3,
                t: 100,
                perturb_layer: 0,
                grl: GrlCoefficient::default(),
                delta: 0.5,
            },
        ];
        let run = |cfg: &AlgorithmConfig| -> ModelBundle {
            let mut trainer = small_trainer(11);
            for s in 0..5 {
                let batch = moons_batch(100 + s, 6);
                train_step(cfg, &mut trainer, &batch, 1.0).unwrap();
            }
            trainer.bundle
        };
        let baseline = run(&AlgorithmConfig::SourceOnly);
        for cfg in &zeroed {
            assert_eq!(run(cfg), baseline, "{} did not reduce", cfg.name());
        }
    }

    #[test]
    fn ssrt_zero_lambda_gives_zero_sr() {
        let cfg = AlgorithmConfig::Ssrt {
            alpha: 1.0,
            beta: 0.2,
            omega: 0.5,
            eps: 0.0,
            lambda_max: 0.0,
            t: 100,
            perturb_layer: 0,
            grl: GrlCoefficient::default(),
            delta: 0.5,
        };
        let mut trainer = small_trainer(13);
        let batch = moons_batch(5, 6);
        let rec = train_step(&cfg, &mut trainer, &batch, 1.0).unwrap();
        assert_eq!(rec.sr, 0.0);
        assert!(rec.adapt > 0.0);
    }

    #[test]
    fn r_schedule_follows_the_sine_ramp() {
        let trainer = small_trainer(17);
        let s = SafeTrainingState::new(&trainer, 6, 10, 0.5).unwrap();
        assert_eq!(r_schedule(&s, 0), 0.0);
        assert!((r_schedule(&s, 2) - 0.5).abs() < 1e-12); // sin(pi/6)
        assert_eq!(r_schedule(&s, 6), 1.0);
        assert_eq!(r_schedule(&s, 100), 1.0);
    }

    #[test]
    fn diversity_counts_distinct_argmaxes() {
        let one_class = Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 5.0], vec![1.0, 2.0, 3.0, 9.0]]).unwrap();
        assert_eq!(diversity(&one_class), 1);
        let perm = Tensor::from_rows(&[vec![5.0, 0.0], vec![0.0, 5.0]]).unwrap();
        assert_eq!(diversity(&perm), 2);
        let ties = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(diversity(&ties), 1);
    }

    #[test]
    fn safe_training_snapshot_and_restore() {
        let mut trainer = small_trainer(19);
        let mut s = SafeTrainingState::new(&trainer, 10, 4, 0.5).unwrap();

        // Two healthy intervals: diversity 2 throughout, never restores.
        for step in 0..8 {
            trainer.step = step;
            assert!(!safe_training_tick(&mut s, &mut trainer, 2));
        }
        let healthy_snapshot = s.snapshot_bundle.clone();

        // Mutate the trainer (as if training continued), then a collapsed
        // interval: diversity 1 < 0.5 * 2.
        trainer.bundle.ef_params.layers[0].w[(0, 0)] += 42.0;
        let mutated = trainer.bundle.clone();
        let mut fired = false;
        for step in 8..12 {
            trainer.step = step;
            fired |= safe_training_tick(&mut s, &mut trainer, 0);
        }
        assert!(fired);
        assert_eq!(trainer.bundle, healthy_snapshot);
        assert_ne!(trainer.bundle, mutated);
        assert_eq!(s.t_r, 11);
        // The ramp restarts: r is back near zero right after the restore.
        assert!(s.r < 0.2);
    }

    #[test]
    fn non_finite_loss_aborts_without_touching_state() {
        let cfg = AlgorithmConfig::SourceOnly;
        let mut trainer = small_trainer(23);
        trainer.bundle.ef_params.layers[0].w[(0, 0)] = f64::MAX;
        trainer.bundle.ef_params.layers[1].w[(0, 0)] = f64::MAX;
        let batch = moons_batch(29, 4);
        let before_bundle = trainer.bundle.clone();
        let before_step = trainer.step;
        let err = train_step(&cfg, &mut trainer, &batch, 1.0);
        assert!(err.is_err());
        assert_eq!(trainer.bundle, before_bundle);
        assert_eq!(trainer.step, before_step);
    }

    #[test]
    fn config_json_round_trips() {
        let examples = [
            r#"{"method":"source_only"}"#,
            r#"{"method":"coral","lam":0.5}"#,
            r#"{"method":"dan","lam":{"value":1.0,"ramp_gamma":10.0},"kernel":{"bandwidths":[1.0,2.0]}}"#,
            r#"{"method":"dann","grl":{"value":1.0,"schedule":{"ramp":{"gamma":10.0}}},"lam":1.0}"#,
            r#"{"method":"dsan"}"#,
            r#"{"method":"bnm","lam":2.0}"#,
            r#"{"method":"ssrt","alpha":1.0,"beta":0.2,"T":50}"#,
        ];
        for text in examples {
            let cfg: AlgorithmConfig = serde_json::from_str(text).unwrap();
            cfg.validate().unwrap();
            let json = serde_json::to_string(&cfg).unwrap();
            let back: AlgorithmConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back, cfg);
        }
        // Defaults fill in as documented.
        let cfg: AlgorithmConfig = serde_json::from_str(r#"{"method":"ssrt"}"#).unwrap();
        match cfg {
            AlgorithmConfig::Ssrt { alpha, beta, omega, eps, lambda_max, t, delta, .. } => {
                assert_eq!(alpha, 1.0);
                assert_eq!(beta, 0.2);
                assert_eq!(omega, 0.5);
                assert_eq!(eps, 0.8);
                assert_eq!(lambda_max, 0.3);
                assert_eq!(t, 100);
                assert_eq!(delta, 0.5);
            }
            _ => panic!("wrong variant"),
        }
    }

    #[test]
    fn tradeoff_parses_bare_numbers_and_ramps() {
        let c: TradeOff = serde_json::from_str("0.7").unwrap();
        assert_eq!(c, TradeOff::Constant(0.7));
        assert_eq!(c.at(0.0), 0.7);
        let r: TradeOff = serde_json::from_str(r#"{"value":2.0}"#).unwrap();
        assert_eq!(r.at(0.0), 0.0);
        assert!(r.at(1.0) > 1.99);
        let mut prev = -1.0;
        for i in 0..=10 {
            let v = r.at(i as f64 / 10.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(AlgorithmConfig::Dann {
            grl: GrlCoefficient {
                value: -1.0,
                schedule: GrlSchedule::Constant
            },
            lam: 1.0
        }
        .validate()
        .is_err());
        assert!(AlgorithmConfig::Ssrt {
            alpha: 1.0,
            beta: 0.2,
            omega: 1.5,
            eps: 0.8,
            lambda_max: 0.3,
            t: 100,
            perturb_layer: 0,
            grl: GrlCoefficient::default(),
            delta: 0.5,
        }
        .validate()
        .is_err());
        assert!(OptimSpec {
            lr0: 0.0,
            ..OptimSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn trainer_progress_clamps() {
        let mut t = small_trainer(31);
        assert_eq!(t.progress(), 0.0);
        t.step = 50;
        assert_eq!(t.progress(), 0.5);
        t.step = 200;
        assert_eq!(t.progress(), 1.0);
    }

    #[test]
    fn default_specs_shapes() {
        let (ef, h, d) = default_specs(2, 3);
        let bundle = init_bundle(&ef, &h, &d, 0).unwrap();
        assert_eq!(bundle.feature_dim, 32);
        assert_eq!(bundle.h_params.output_width(), 3);
        assert_eq!(bundle.d_params.output_width(), 1);
    }
}
