//! The three-network stack used by every method: a feature extractor, a label
//! predictor, and a domain classifier, all plain MLPs with relu hidden layers
//! and linear outputs.
//!
//! Forward passes come in two flavours. *Taped* forwards first stage every
//! parameter as a tape leaf (so gradients and SGD updates can find them) and
//! record the computation; *value* forwards skip the tape for evaluation,
//! pseudo-labeling, and diversity tracking. Hidden pre-activations are
//! exposed by the taped forward because the self-refinement method perturbs
//! them in place.

use crate::error::{Error, Result};
use crate::ndgraph::{NodeId, Tape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Layer widths of one MLP, input first. `[4, 64, 32]` is two weight layers:
/// `4 -> 64` (relu) and `64 -> 32` (linear output).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub widths: Vec<usize>,
}

impl LayerSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        let spec = LayerSpec { widths };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "a layer spec needs an input and an output width, got {:?}",
                self.widths
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "layer widths must be positive, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }
}

/// One dense layer: weights `in x out`, bias `1 x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

/// A multilayer perceptron as a bare parameter list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    fn init(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Mlp {
        let mut layers = Vec::with_capacity(spec.depth());
        for l in 0..spec.depth() {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Tensor::zeros(fan_in, fan_out);
            for v in w.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            layers.push(Layer {
                w,
                b: Tensor::zeros(1, fan_out),
            });
        }
        Mlp { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").w.cols()
    }

    /// Untaped forward pass: relu between layers, linear last layer.
    pub fn forward_value(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.w)?;
            for r in 0..z.rows() {
                for c in 0..z.cols() {
                    z[(r, c)] += layer.b[(0, c)];
                }
            }
            h = if l < last { z.map(|v| v.max(0.0)) } else { z };
        }
        Ok(h)
    }
}

/// The full parameter set: feature extractor, label predictor head, and
/// domain classifier head sharing the extractor's output width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub ef_params: Mlp,
    pub h_params: Mlp,
    pub d_params: Mlp,
    pub feature_dim: usize,
}

impl ModelBundle {
    /// Features for `x` without touching a tape.
    pub fn features_value(&self, x: &Tensor) -> Result<Tensor> {
        self.ef_params.forward_value(x)
    }

    /// Classifier logits for `x` without touching a tape.
    pub fn logits_value(&self, x: &Tensor) -> Result<Tensor> {
        self.h_params.forward_value(&self.features_value(x)?)
    }
}

/// Default desk-scale architecture for `d`-dimensional inputs and `c` classes:
/// extractor `[d, 64, 32]`, classifier `[32, c]`, discriminator `[32, 16, 1]`.
pub fn default_specs(d: usize, c: usize) -> (LayerSpec, LayerSpec, LayerSpec) {
    (
        LayerSpec {
            widths: vec![d, 64, 32],
        },
        LayerSpec {
            widths: vec![32, c],
        },
        LayerSpec {
            widths: vec![32, 16, 1],
        },
    )
}

/// Xavier-uniform initialisation of all three networks: weights drawn from
/// `U(-sqrt(6/(fan_in+fan_out)), +...)`, biases zero. Deterministic in `seed`.
pub fn init_bundle(ef: &LayerSpec, h: &LayerSpec, d: &LayerSpec, seed: u64) -> Result<ModelBundle> {
    ef.validate()?;
    h.validate()?;
    d.validate()?;
    let feature_dim = ef.output_width();
    if h.input_width() != feature_dim {
        return Err(Error::Config(format!(
            "classifier input width {} does not match feature width {}",
            h.input_width(),
            feature_dim
        )));
    }
    if d.input_width() != feature_dim {
        return Err(Error::Config(format!(
            "discriminator input width {} does not match feature width {}",
            d.input_width(),
            feature_dim
        )));
    }
    if d.output_width() != 1 {
        return Err(Error::Config(format!(
            "discriminator must end in a single logit, got width {}",
            d.output_width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ModelBundle {
        ef_params: Mlp::init(ef, &mut rng),
        h_params: Mlp::init(h, &mut rng),
        d_params: Mlp::init(d, &mut rng),
        feature_dim,
    })
}

/// Tape leaves for one MLP's parameters, `(weights, bias)` per layer in order.
pub type StagedMlp = Vec<(NodeId, NodeId)>;

/// Registers every parameter of `mlp` as a tape leaf.
pub fn stage_mlp(tape: &mut Tape, mlp: &Mlp) -> StagedMlp {
    mlp.layers
        .iter()
        .map(|layer| (tape.leaf(layer.w.clone()), tape.leaf(layer.b.clone())))
        .collect()
}

/// Taped forward trace: the output node plus each layer's pre-activation
/// (the value after `x W + b`, before any relu).
pub struct MlpTrace {
    pub output: NodeId,
    pub preacts: Vec<NodeId>,
}

/// Configuration of the self-refinement perturbation inserted into a taped
/// forward pass: at layer `site`, the pre-activation `b` becomes
/// `b + lambda * sg(b[perm] - b)` before the activation is applied.
pub struct Perturbation<'a> {
    pub site: usize,
    pub lambda: f64,
    pub perm: &'a [usize],
}

fn forward_on_tape(
    tape: &mut Tape,
    params: &StagedMlp,
    x: NodeId,
    perturb: Option<&Perturbation>,
) -> Result<MlpTrace> {
    if let Some(p) = perturb {
        if p.site >= params.len() {
            return Err(Error::Config(format!(
                "perturbation site {} out of range for {} layers",
                p.site,
                params.len()
            )));
        }
    }
    let last = params.len() - 1;
    let mut h = x;
    let mut preacts = Vec::with_capacity(params.len());
    for (l, &(w, b)) in params.iter().enumerate() {
        let prod = tape.matmul(h, w)?;
        let mut z = tape.add_row_broadcast(prod, b)?;
        if let Some(p) = perturb {
            if p.site == l {
                let shuffled = tape.gather_rows(z, p.perm)?;
                let diff = tape.sub(shuffled, z)?;
                let frozen = tape.stop_gradient(diff)?;
                let offset = tape.scale(frozen, p.lambda);
                z = tape.add(z, offset)?;
            }
        }
        preacts.push(z);
        h = if l < last { tape.relu(z) } else { z };
    }
    Ok(MlpTrace { output: h, preacts })
}

/// Taped MLP forward over staged parameters.
pub fn mlp_forward(tape: &mut Tape, params: &StagedMlp, x: NodeId) -> Result<MlpTrace> {
    forward_on_tape(tape, params, x, None)
}

/// Taped MLP forward with the self-refinement perturbation applied at one
/// hidden pre-activation.
pub fn mlp_forward_perturbed(
    tape: &mut Tape,
    params: &StagedMlp,
    x: NodeId,
    perturb: &Perturbation,
) -> Result<MlpTrace> {
    forward_on_tape(tape, params, x, Some(perturb))
}

/// Feature-extractor forward recorded on `tape`. Stages the extractor's
/// parameters as fresh leaves; use [`stage_mlp`] + [`mlp_forward`] directly
/// when the caller needs to update those parameters afterwards.
pub fn ef_forward(tape: &mut Tape, m: &ModelBundle, x: NodeId) -> Result<MlpTrace> {
    let params = stage_mlp(tape, &m.ef_params);
    mlp_forward(tape, &params, x)
}

/// Classifier logits for taped features (raw, softmax is the caller's job).
pub fn classify(tape: &mut Tape, m: &ModelBundle, feats: NodeId) -> Result<NodeId> {
    let params = stage_mlp(tape, &m.h_params);
    Ok(mlp_forward(tape, &params, feats)?.output)
}

/// Domain-classifier probabilities for taped features, squashed into
/// `[1e-7, 1 - 1e-7]` so the adversarial log-loss stays finite.
pub fn discriminate(tape: &mut Tape, m: &ModelBundle, feats: NodeId) -> Result<NodeId> {
    let params = stage_mlp(tape, &m.d_params);
    let logits = mlp_forward(tape, &params, feats)?.output;
    Ok(tape.sigmoid_clamped(logits))
}

/// How the gradient-reversal strength evolves over training progress.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrlSchedule {
    /// Fixed at `value` for the whole run.
    Constant,
    /// `value * (2 / (1 + exp(-gamma * p)) - 1)` over progress `p` in `[0,1]`,
    /// ramping from 0 toward `value`.
    Ramp { gamma: f64 },
}

/// Strength of the gradient reversal layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrlCoefficient {
    pub value: f64,
    pub schedule: GrlSchedule,
}

impl Default for GrlCoefficient {
    fn default() -> Self {
        GrlCoefficient {
            value: 1.0,
            schedule: GrlSchedule::Constant,
        }
    }
}

impl GrlCoefficient {
    pub fn validate(&self) -> Result<()> {
        if !self.value.is_finite() || self.value < 0.0 {
            return Err(Error::Config(format!(
                "grl coefficient must be finite and non-negative, got {}",
                self.value
            )));
        }
        Ok(())
    }

    /// Resolved strength at training progress `p` in `[0, 1]`.
    pub fn at(&self, p: f64) -> f64 {
        match self.schedule {
            GrlSchedule::Constant => self.value,
            GrlSchedule::Ramp { gamma } => {
                self.value * (2.0 / (1.0 + (-gamma * p).exp()) - 1.0)
            }
        }
    }
}

/// Gradient reversal: identity forward; backward multiplies the incoming
/// gradient by minus the schedule-resolved coefficient.
pub fn grl(tape: &mut Tape, x: NodeId, coeff: &GrlCoefficient, progress: f64) -> NodeId {
    tape.grl(x, coeff.at(progress))
}

/// Serialisable ChaCha8 generator state (seed, stream, and word position),
/// enough to resume a stream exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngCapture {
    pub seed: Vec<u8>,
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngCapture {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngCapture {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Parse(format!("rng seed must be 32 bytes, got {}", self.seed.len())))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        Ok(rng)
    }
}

/// Version written into every checkpoint; bumped on layout changes.
pub const CHECKPOINT_VERSION: u32 = 1;

/// A complete training snapshot: layer specs, all parameters, both generator
/// states, and the step counter. JSON round-trips are exact because floats
/// are serialised in shortest-round-trip form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub ef_spec: LayerSpec,
    pub h_spec: LayerSpec,
    pub d_spec: LayerSpec,
    pub bundle: ModelBundle,
    pub data_rng: RngCapture,
    pub trainer_rng: RngCapture,
    pub step: u64,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint {} has version {}, this build reads version {}",
                path.display(),
                ck.version,
                CHECKPOINT_VERSION
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle(seed: u64) -> ModelBundle {
        let (ef, h, d) = (
            LayerSpec::new(vec![2, 5, 3]).unwrap(),
            LayerSpec::new(vec![3, 2]).unwrap(),
            LayerSpec::new(vec![3, 4, 1]).unwrap(),
        );
        init_bundle(&ef, &h, &d, seed).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = tiny_bundle(11);
        let b = tiny_bundle(11);
        assert_eq!(a, b);
        for mlp in [&a.ef_params, &a.h_params, &a.d_params] {
            for layer in &mlp.layers {
                assert!(layer.b.data().iter().all(|&v| v == 0.0));
            }
        }
        assert_ne!(a.ef_params, tiny_bundle(12).ef_params);
    }

    #[test]
    fn init_respects_fan_bound() {
        let m = tiny_bundle(3);
        let bound = (6.0_f64 / 7.0).sqrt();
        assert!(m.ef_params.layers[0]
            .w
            .data()
            .iter()
            .all(|v| v.abs() < bound));
    }

    #[test]
    fn incompatible_widths_rejected() {
        let ef = LayerSpec::new(vec![2, 4]).unwrap();
        let h = LayerSpec::new(vec![3, 2]).unwrap();
        let d = LayerSpec::new(vec![4, 1]).unwrap();
        assert!(init_bundle(&ef, &h, &d, 0).is_err());
        let h = LayerSpec::new(vec![4, 2]).unwrap();
        let d_wide = LayerSpec::new(vec![4, 2]).unwrap();
        assert!(init_bundle(&ef, &h, &d_wide, 0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut m = tiny_bundle(1);
        for layer in &mut m.ef_params.layers {
            layer.w = Tensor::zeros(layer.w.rows(), layer.w.cols());
        }
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let f = m.features_value(&x).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_is_affine() {
        let mlp = Mlp {
            layers: vec![Layer {
                w: Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
                b: Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap(),
            }],
        };
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let y = mlp.forward_value(&x).unwrap();
        // No relu on the output layer even for negative entries.
        assert_eq!(y.data(), &[4.5, 5.5]);
    }

    #[test]
    fn taped_and_value_forward_agree() {
        let m = tiny_bundle(21);
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7], vec![-0.4, 0.1]]).unwrap();
        let expect = m.features_value(&x).unwrap();
        let mut tape = Tape::new();
        let xn = tape.leaf(x);
        let trace = ef_forward(&mut tape, &m, xn).unwrap();
        assert_eq!(tape.value(trace.output), &expect);
        assert_eq!(trace.preacts.len(), 2);
    }

    #[test]
    fn ef_input_gradient_matches_finite_differences() {
        let m = tiny_bundle(5);
        let xv = Tensor::from_rows(&[vec![0.4, -0.9], vec![1.3, 0.6]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone());
        let trace = ef_forward(&mut tape, &m, x).unwrap();
        let loss = tape.sum(trace.output);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.wrt(x).unwrap();

        let f = |xd: &Tensor| m.features_value(xd).unwrap().sum();
        let h = 1e-5;
        for r in 0..2 {
            for c in 0..2 {
                let mut plus = xv.clone();
                plus[(r, c)] += h;
                let mut minus = xv.clone();
                minus[(r, c)] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let ad = gx[(r, c)];
                let rel = (ad - fd).abs() / ad.abs().max(1.0);
                assert!(rel <= 1e-4, "x[{r}][{c}]: ad={ad} fd={fd}");
            }
        }
    }

    #[test]
    fn discriminator_with_zero_params_outputs_half() {
        let mut m = tiny_bundle(8);
        for layer in &mut m.d_params.layers {
            layer.w = Tensor::zeros(layer.w.rows(), layer.w.cols());
            layer.b = Tensor::zeros(1, layer.b.cols());
        }
        let mut tape = Tape::new();
        let feats = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let p = discriminate(&mut tape, &m, feats).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5]);
    }

    #[test]
    fn discriminator_output_is_clamped() {
        let m = tiny_bundle(9);
        let mut tape = Tape::new();
        let feats = tape.leaf(Tensor::from_rows(&[vec![1e6, 1e6, 1e6], vec![-1e6, -1e6, -1e6]]).unwrap());
        let p = discriminate(&mut tape, &m, feats).unwrap();
        for &v in tape.value(p).data() {
            assert!((1e-7..=1.0 - 1e-7).contains(&v));
        }
    }

    #[test]
    fn classify_shape_follows_batch() {
        let m = tiny_bundle(10);
        for b in [1, 7] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::ones(b, 2));
            let trace = ef_forward(&mut tape, &m, x).unwrap();
            let logits = classify(&mut tape, &m, trace.output).unwrap();
            assert_eq!(tape.value(logits).shape(), (b, 2));
        }
    }

    #[test]
    fn grl_is_value_transparent_and_reverses_gradients() {
        let coeff = GrlCoefficient {
            value: 1.0,
            schedule: GrlSchedule::Constant,
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let r = grl(&mut tape, x, &coeff, 0.5);
        assert_eq!(tape.value(r).data(), tape.value(x).data());
        let loss = tape.sum(r);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[-1.0, -1.0]);

        let off = GrlCoefficient {
            value: 0.0,
            schedule: GrlSchedule::Constant,
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let r = grl(&mut tape, x, &off, 0.5);
        let loss = tape.sum(r);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn discriminator_gradients_unchanged_by_grl() {
        // The reversal applies only upstream: d-parameter gradients must be
        // identical with and without the layer in between.
        let m = tiny_bundle(14);
        let feats_v = Tensor::from_rows(&[vec![0.2, -0.4, 0.9], vec![1.1, 0.3, -0.6]]).unwrap();

        let run = |with_grl: bool| -> Vec<Tensor> {
            let mut tape = Tape::new();
            let feats = tape.leaf(feats_v.clone());
            let input = if with_grl { tape.grl(feats, 1.0) } else { feats };
            let params = stage_mlp(&mut tape, &m.d_params);
            let logits = mlp_forward(&mut tape, &params, input).unwrap().output;
            let p = tape.sigmoid_clamped(logits);
            let loss = tape.sum(p);
            let mut grads = tape.backward(loss).unwrap();
            params
                .iter()
                .flat_map(|&(w, b)| [grads.take(w).unwrap(), grads.take(b).unwrap()])
                .collect()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn ramp_schedule_rises_from_zero() {
        let c = GrlCoefficient {
            value: 1.0,
            schedule: GrlSchedule::Ramp { gamma: 10.0 },
        };
        assert_eq!(c.at(0.0), 0.0);
        assert!(c.at(0.5) > 0.9 && c.at(0.5) < 1.0);
        assert!(c.at(1.0) > 0.999);
        let constant = GrlCoefficient::default();
        assert_eq!(constant.at(0.0), 1.0);
        assert_eq!(constant.at(1.0), 1.0);
    }

    #[test]
    fn perturbed_forward_matches_equation() {
        let m = tiny_bundle(17);
        let x = Tensor::from_rows(&[vec![0.5, 1.0], vec![-0.3, 0.2], vec![0.8, -0.1]]).unwrap();
        let perm = [2usize, 0, 1];
        let lambda = 0.25;

        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let params = stage_mlp(&mut tape, &m.ef_params);
        let plain = mlp_forward(&mut tape, &params, xn).unwrap();
        let b = tape.value(plain.preacts[0]).clone();
        let plain_out = tape.value(plain.output).clone();

        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let params = stage_mlp(&mut tape, &m.ef_params);
        let pert = Perturbation {
            site: 0,
            lambda,
            perm: &perm,
        };
        let trace = mlp_forward_perturbed(&mut tape, &params, xn, &pert).unwrap();
        let got = tape.value(trace.preacts[0]);
        for r in 0..3 {
            for c in 0..b.cols() {
                let want = b[(r, c)] + lambda * (b[(perm[r], c)] - b[(r, c)]);
                assert!((got[(r, c)] - want).abs() < 1e-15);
            }
        }

        // lambda = 0 leaves the forward bitwise untouched.
        let mut tape = Tape::new();
        let xn = tape.leaf(x);
        let params = stage_mlp(&mut tape, &m.ef_params);
        let zero = Perturbation {
            site: 0,
            lambda: 0.0,
            perm: &perm,
        };
        let trace = mlp_forward_perturbed(&mut tape, &params, xn, &zero).unwrap();
        assert_eq!(tape.value(trace.output).data(), plain_out.data());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let bundle = tiny_bundle(23);
        let mut data_rng = ChaCha8Rng::seed_from_u64(1);
        let mut trainer_rng = ChaCha8Rng::seed_from_u64(2);
        // Advance both so the word position is nontrivial.
        for _ in 0..7 {
            let _: f64 = data_rng.random();
            let _: u32 = trainer_rng.random();
        }
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            ef_spec: LayerSpec::new(vec![2, 5, 3]).unwrap(),
            h_spec: LayerSpec::new(vec![3, 2]).unwrap(),
            d_spec: LayerSpec::new(vec![3, 4, 1]).unwrap(),
            bundle,
            data_rng: RngCapture::of(&data_rng),
            trainer_rng: RngCapture::of(&trainer_rng),
            step: 123,
        };
        let dir = std::env::temp_dir().join("shiftlab_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);

        // The restored generator continues the exact stream.
        let mut restored = back.data_rng.restore().unwrap();
        let a: f64 = data_rng.random();
        let b: f64 = restored.random();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_version_mismatch_is_an_error() {
        let dir = std::env::temp_dir().join("shiftlab_ckpt_version");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("old.json");
        let bundle = tiny_bundle(2);
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION + 1,
            ef_spec: LayerSpec::new(vec![2, 5, 3]).unwrap(),
            h_spec: LayerSpec::new(vec![3, 2]).unwrap(),
            d_spec: LayerSpec::new(vec![3, 4, 1]).unwrap(),
            bundle,
            data_rng: RngCapture::of(&ChaCha8Rng::seed_from_u64(0)),
            trainer_rng: RngCapture::of(&ChaCha8Rng::seed_from_u64(0)),
            step: 0,
        };
        std::fs::write(&path, serde_json::to_string(&ck).unwrap()).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
