//! Feedforward network with analytic backpropagation, Adam, the shared loss
//! functions, target-network snapshots, and a finite-difference gradient checker.
//!
//! The production architecture is a 3-layer net (two rectified hidden layers of
//! 256 and 128 units, identity output), but the implementation accepts arbitrary
//! layer sizes so tests can run micro-nets through the same code path.

use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::rng::Rng;

const FOCAL_CLAMP: f64 = 1e-7;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("input length {got} does not match input_dim {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("non-finite loss at optimizer step {step}: {loss}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("optimizer state shaped for dims {opt:?}, model has dims {model:?}")]
    OptimizerShapeMismatch { opt: Vec<usize>, model: Vec<usize> },
    #[error("target network shaped for dims {target:?}, model has dims {model:?}")]
    TargetShapeMismatch { target: Vec<usize>, model: Vec<usize> },
    #[error("empty batch")]
    EmptyBatch,
    #[error("target length {got} incompatible with loss {spec} and output_dim {outputs}")]
    BadTarget { spec: String, outputs: usize, got: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-sample loss selector. Classification losses expect a single raw logit
/// output; the logistic head is applied inside the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossSpec {
    /// Sum of squared errors over the output vector.
    Mse,
    /// Rank-weighted squared error; target may be shorter than the output
    /// (truncation near the end of an episode).
    WeightedTopK,
    /// Binary cross-entropy on a logit, target in {0, 1}.
    CrossEntropy,
    /// Focal loss on a logit, target in {0, 1}.
    Focal { gamma: f64 },
}

impl LossSpec {
    fn name(&self) -> &'static str {
        match self {
            LossSpec::Mse => "mse",
            LossSpec::WeightedTopK => "weighted_topk",
            LossSpec::CrossEntropy => "cross_entropy",
            LossSpec::Focal { .. } => "focal",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub loss: LossSpec,
}

/// Feedforward network. Hidden layers are rectified, the output is identity;
/// classification heads are applied by the loss, not the network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    /// weights[l] is row-major (dims[l+1] x dims[l]).
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl MlpModel {
    /// Scaled-uniform fan-in initialization, deterministic in the seed.
    pub fn new(dims: &[usize], seed: u64) -> MlpModel {
        assert!(dims.len() >= 2, "need at least input and output dims");
        assert!(dims.iter().all(|&d| d > 0), "zero-width layer");
        let mut rng = Rng::seed_from(seed);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            // Biases draw from the same fan-in range as weights; an all-zero
            // bias vector would park dead units exactly on the rectifier kink.
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.range_f64(-bound, bound))
                .collect();
            weights.push(w);
            biases.push((0..fan_out).map(|_| rng.range_f64(-bound, bound)).collect());
        }
        MlpModel {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    /// Standard learner architecture: two hidden layers of 256 and 128 units.
    pub fn standard(input_dim: usize, output_dim: usize, seed: u64) -> MlpModel {
        MlpModel::new(&[input_dim, 256, 128, output_dim], seed)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Total parameter count: sum over layers of (fan_in + 1) * fan_out.
    pub fn param_count(&self) -> usize {
        self.dims
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::DimMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(NnError::NonFiniteInput);
        }
        Ok(self.forward_cached(input).pop().unwrap())
    }

    /// Activations of every layer, input first, output last.
    fn forward_cached(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.weights.len();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(input.to_vec());
        for l in 0..layers {
            let n_in = self.dims[l];
            let prev = &acts[l];
            let w = &self.weights[l];
            let mut out = self.biases[l].clone();
            for (i, o) in out.iter_mut().enumerate() {
                *o += dot(&w[i * n_in..(i + 1) * n_in], prev);
                if l + 1 < layers && *o < 0.0 {
                    *o = 0.0; // rectifier on hidden layers
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Flattened parameters in canonical order (per layer: weights row-major,
    /// then biases).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut k = 0;
        for l in 0..self.weights.len() {
            let nw = self.weights[l].len();
            self.weights[l].copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
    }

    pub fn write_into<W: Write>(&self, w: &mut W) -> Result<(), NnError> {
        writeln!(w, "mlp v1")?;
        write!(w, "dims")?;
        for d in &self.dims {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
        for l in 0..self.weights.len() {
            write!(w, "w{l}")?;
            for p in &self.weights[l] {
                write!(w, " {:016x}", p.to_bits())?;
            }
            writeln!(w)?;
            write!(w, "b{l}")?;
            for p in &self.biases[l] {
                write!(w, " {:016x}", p.to_bits())?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<MlpModel, NnError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim() != "mlp v1" {
            return Err(NnError::Checkpoint(format!(
                "expected header 'mlp v1', got {:?}",
                line.trim()
            )));
        }
        line.clear();
        r.read_line(&mut line)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some("dims") {
            return Err(NnError::Checkpoint("missing dims line".into()));
        }
        let dims: Vec<usize> = parts
            .map(|t| {
                t.parse()
                    .map_err(|_| NnError::Checkpoint(format!("bad dim {t:?}")))
            })
            .collect::<Result<_, _>>()?;
        if dims.len() < 2 {
            return Err(NnError::Checkpoint("fewer than two dims".into()));
        }
        let mut model = MlpModel {
            dims: dims.clone(),
            weights: Vec::new(),
            biases: Vec::new(),
        };
        for l in 0..dims.len() - 1 {
            model
                .weights
                .push(read_param_line(r, &format!("w{l}"), dims[l] * dims[l + 1])?);
            model
                .biases
                .push(read_param_line(r, &format!("b{l}"), dims[l + 1])?);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_into(&mut f)
    }

    pub fn load(path: &Path) -> Result<MlpModel, NnError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        MlpModel::read_from(&mut f)
    }
}

/// Dot product with four accumulators; the independent chains keep the FMA
/// pipeline full instead of serializing on one accumulator.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

fn read_param_line<R: BufRead>(r: &mut R, tag: &str, count: usize) -> Result<Vec<f64>, NnError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(tag) {
        return Err(NnError::Checkpoint(format!("expected {tag} line")));
    }
    let vals: Vec<f64> = parts
        .map(|t| {
            u64::from_str_radix(t, 16)
                .map(f64::from_bits)
                .map_err(|_| NnError::Checkpoint(format!("bad parameter {t:?}")))
        })
        .collect::<Result<_, _>>()?;
    if vals.len() != count {
        return Err(NnError::Checkpoint(format!(
            "{tag}: expected {count} parameters, got {}",
            vals.len()
        )));
    }
    Ok(vals)
}

/// Gradients shaped like a model's parameters.
#[derive(Clone, Debug)]
struct Grads {
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl Grads {
    fn zeros_like(model: &MlpModel) -> Grads {
        Grads {
            w: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            b: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn scale(&mut self, c: f64) {
        for layer in self.w.iter_mut().chain(self.b.iter_mut()) {
            for g in layer {
                *g *= c;
            }
        }
    }
}

/// Adam optimizer state. Defaults follow the training protocol used by all
/// learners: lr 0.003, beta1 0.9, beta2 0.999, epsilon 1e-8.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    dims: Vec<usize>,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

pub const DEFAULT_LEARNING_RATE: f64 = 0.003;

impl AdamState {
    pub fn new(model: &MlpModel, learning_rate: f64) -> AdamState {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            dims: model.dims.clone(),
            m_w: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            v_w: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            m_b: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_b: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn apply(&mut self, model: &mut MlpModel, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for l in 0..model.weights.len() {
            adam_update_slice(
                &mut model.weights[l],
                &grads.w[l],
                &mut self.m_w[l],
                &mut self.v_w[l],
                self.learning_rate,
                self.beta1,
                self.beta2,
                self.epsilon,
                bc1,
                bc2,
            );
            adam_update_slice(
                &mut model.biases[l],
                &grads.b[l],
                &mut self.m_b[l],
                &mut self.v_b[l],
                self.learning_rate,
                self.beta1,
                self.beta2,
                self.epsilon,
                bc1,
                bc2,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Frozen parameter snapshot used as a bootstrap target.
#[derive(Clone, Debug)]
pub struct TargetModel {
    model: MlpModel,
    staleness: usize,
}

impl TargetModel {
    pub fn snapshot(model: &MlpModel) -> TargetModel {
        TargetModel {
            model: model.clone(),
            staleness: 0,
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.model.forward(input)
    }

    pub fn staleness(&self) -> usize {
        self.staleness
    }

    /// Record one training step since the last sync.
    pub fn tick(&mut self) {
        self.staleness += 1;
    }
}

/// Copy the model's parameters into the target and reset staleness.
pub fn sync_target(model: &MlpModel, target: &mut TargetModel) -> Result<(), NnError> {
    if model.dims != target.model.dims {
        return Err(NnError::TargetShapeMismatch {
            target: target.model.dims.clone(),
            model: model.dims.clone(),
        });
    }
    target.model = model.clone();
    target.staleness = 0;
    Ok(())
}

/// Rank-weighted squared error: sum over k of (1/k) * (pred_k - target_k)^2,
/// with targets sorted rank-1 first. Ranks past the target length contribute
/// nothing. Panics on an empty target.
pub fn weighted_topk_loss(pred: &[f64], targets: &[f64]) -> f64 {
    assert!(!targets.is_empty(), "weighted_topk_loss: empty target");
    assert!(
        targets.len() <= pred.len(),
        "weighted_topk_loss: more targets than prediction heads"
    );
    let mut loss = 0.0;
    for (k, (p, t)) in pred.iter().zip(targets.iter()).enumerate() {
        let diff = p - t;
        loss += (1.0 / (k + 1) as f64) * diff * diff;
    }
    loss
}

/// Focal loss -(1-p)^gamma * ln(p) on the probability assigned to the true
/// class, clamped away from {0, 1}. gamma = 0 reduces to cross-entropy.
pub fn focal_loss(prob_of_target: f64, gamma: f64) -> f64 {
    let p = prob_of_target.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    -(1.0 - p).powf(gamma) * p.ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-sample loss value and d(loss)/d(output).
fn loss_and_grad(
    spec: LossSpec,
    pred: &[f64],
    target: &[f64],
) -> Result<(f64, Vec<f64>), NnError> {
    let bad = |spec: LossSpec| NnError::BadTarget {
        spec: spec.name().into(),
        outputs: pred.len(),
        got: target.len(),
    };
    match spec {
        LossSpec::Mse => {
            if target.len() != pred.len() {
                return Err(bad(spec));
            }
            let mut loss = 0.0;
            let mut grad = vec![0.0; pred.len()];
            for i in 0..pred.len() {
                let diff = pred[i] - target[i];
                loss += diff * diff;
                grad[i] = 2.0 * diff;
            }
            Ok((loss, grad))
        }
        LossSpec::WeightedTopK => {
            if target.is_empty() || target.len() > pred.len() {
                return Err(bad(spec));
            }
            let loss = weighted_topk_loss(pred, target);
            let mut grad = vec![0.0; pred.len()];
            for k in 0..target.len() {
                grad[k] = (2.0 / (k + 1) as f64) * (pred[k] - target[k]);
            }
            Ok((loss, grad))
        }
        LossSpec::CrossEntropy => logit_loss(pred, target, 0.0).ok_or_else(|| bad(spec)),
        LossSpec::Focal { gamma } => logit_loss(pred, target, gamma).ok_or_else(|| bad(spec)),
    }
}

/// Focal/cross-entropy on a single logit output. Returns None on shape errors.
fn logit_loss(pred: &[f64], target: &[f64], gamma: f64) -> Option<(f64, Vec<f64>)> {
    if pred.len() != 1 || target.len() != 1 {
        return None;
    }
    let y = target[0];
    let p = sigmoid(pred[0]);
    let p_t_raw = if y > 0.5 { p } else { 1.0 - p };
    let p_t = p_t_raw.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
    let loss = focal_loss(p_t_raw, gamma);
    // Flat region once the clamp engages.
    let grad = if !(FOCAL_CLAMP..=1.0 - FOCAL_CLAMP).contains(&p_t_raw) {
        0.0
    } else {
        let dl_dpt = if gamma == 0.0 {
            -1.0 / p_t
        } else {
            gamma * (1.0 - p_t).powf(gamma - 1.0) * p_t.ln() - (1.0 - p_t).powf(gamma) / p_t
        };
        let dpt_dz = (2.0 * y - 1.0) * p * (1.0 - p);
        dl_dpt * dpt_dz
    };
    Some((loss, vec![grad]))
}

/// Mean loss over the batch and the mean-loss gradient.
fn batch_gradients(model: &MlpModel, batch: &[TrainSample]) -> Result<(f64, Grads), NnError> {
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let mut grads = Grads::zeros_like(model);
    let mut total_loss = 0.0;
    let layers = model.weights.len();
    for sample in batch {
        if sample.input.len() != model.input_dim() {
            return Err(NnError::DimMismatch {
                expected: model.input_dim(),
                got: sample.input.len(),
            });
        }
        let acts = model.forward_cached(&sample.input);
        let (loss, out_grad) = loss_and_grad(sample.loss, &acts[layers], &sample.target)?;
        total_loss += loss;

        let mut delta = out_grad;
        for l in (0..layers).rev() {
            let n_in = model.dims[l];
            let prev = &acts[l];
            for (i, d) in delta.iter().enumerate() {
                let row = &mut grads.w[l][i * n_in..(i + 1) * n_in];
                for (g, a) in row.iter_mut().zip(prev.iter()) {
                    *g += d * a;
                }
                grads.b[l][i] += d;
            }
            if l > 0 {
                let mut next = vec![0.0; n_in];
                let w = &model.weights[l];
                for (i, d) in delta.iter().enumerate() {
                    let row = &w[i * n_in..(i + 1) * n_in];
                    for (nj, wij) in next.iter_mut().zip(row.iter()) {
                        *nj += d * wij;
                    }
                }
                // Rectifier gradient: zero wherever the hidden unit was clamped.
                for (nj, a) in next.iter_mut().zip(acts[l].iter()) {
                    if *a <= 0.0 {
                        *nj = 0.0;
                    }
                }
                delta = next;
            }
        }
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total_loss / n, grads))
}

/// One Adam step on the mean batch loss. Returns the mean loss measured
/// before the update.
pub fn train_step(
    model: &mut MlpModel,
    opt: &mut AdamState,
    batch: &[TrainSample],
) -> Result<f64, NnError> {
    if opt.dims != model.dims {
        return Err(NnError::OptimizerShapeMismatch {
            opt: opt.dims.clone(),
            model: model.dims.clone(),
        });
    }
    let (loss, grads) = batch_gradients(model, batch)?;
    if !loss.is_finite() {
        return Err(NnError::NonFiniteLoss {
            step: opt.step,
            loss,
        });
    }
    opt.apply(model, &grads);
    Ok(loss)
}

/// Compare analytic gradients against central differences (step 1e-5) over
/// every parameter; returns the maximum relative error
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
pub fn gradient_check(model: &MlpModel, sample: &TrainSample) -> Result<f64, NnError> {
    const H: f64 = 1e-5;
    let batch = std::slice::from_ref(sample);
    let (_, grads) = batch_gradients(model, batch)?;
    let mut analytic = Vec::with_capacity(model.param_count());
    for l in 0..grads.w.len() {
        analytic.extend_from_slice(&grads.w[l]);
        analytic.extend_from_slice(&grads.b[l]);
    }

    let mut probe = model.clone();
    let mut flat = model.params_flat();
    let mut max_err: f64 = 0.0;
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + H;
        probe.set_params_flat(&flat);
        let (loss_plus, _) = batch_gradients(&probe, batch)?;
        flat[i] = orig - H;
        probe.set_params_flat(&flat);
        let (loss_minus, _) = batch_gradients(&probe, batch)?;
        flat[i] = orig;
        let numeric = (loss_plus - loss_minus) / (2.0 * H);
        let a = analytic[i];
        let err = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
