//! Training on synthetic sequence tasks with masked cross-entropy, plus the
//! finite-difference gradient oracle used by `gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    backward_sequence, forward_batch, ForwardOutput, NetworkParams, NetworkTopology,
};
use crate::tensor::{BnMode, Real, TensorBuffer};

// ---------------------------------------------------------------------------
// toy tasks
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// label[t] = parity of the sign bits of channel 0 over frames
    /// t..t+span (zero-padded past the end): solvable only with at least
    /// `span` frames of future access.
    LookaheadParity,
    /// label[t] = class shown at frame t - span; tests recurrence/memory.
    DelayedCopy,
    /// label[t] = argmax of a fixed linear functional of frames t-2..t+2.
    ContextWindowClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub name: TaskKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    /// Future span for lookahead-parity, delay for delayed-copy; unused by
    /// context-window-class.
    pub lookahead_span: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example<R> {
    /// (seq_len x input_dim), one frame per row.
    pub frames: TensorBuffer<R>,
    /// One label per base frame.
    pub labels: Vec<usize>,
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.seq_len == 0 {
            return Err(Error::Validation("task needs input_dim >= 1 and seq_len >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation("task needs num_classes >= 2".into()));
        }
        match self.name {
            TaskKind::LookaheadParity => {
                if self.num_classes != 2 {
                    return Err(Error::Validation("lookahead-parity is a 2-class task".into()));
                }
                if self.lookahead_span >= self.seq_len {
                    return Err(Error::Validation(format!(
                        "lookahead span {} must be shorter than the sequence ({})",
                        self.lookahead_span, self.seq_len
                    )));
                }
            }
            TaskKind::DelayedCopy => {
                if self.num_classes > self.input_dim {
                    return Err(Error::Validation(
                        "delayed-copy one-hot classes need input_dim >= num_classes".into(),
                    ));
                }
                if self.lookahead_span >= self.seq_len {
                    return Err(Error::Validation("delay must be shorter than the sequence".into()));
                }
            }
            TaskKind::ContextWindowClass => {}
        }
        Ok(())
    }

    /// The fixed functional of context-window-class, derived from the seed:
    /// num_classes x (5 * input_dim), row-major.
    pub fn window_matrix(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x00C0_FFEE));
        (0..self.num_classes * 5 * self.input_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect()
    }
}

pub fn generate_task<R: Real>(task: &ToyTask, n_sequences: usize) -> Result<Vec<Example<R>>> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let window_matrix = task.window_matrix();
    let (t_len, d, k) = (task.seq_len, task.input_dim, task.num_classes);
    let mut out = Vec::with_capacity(n_sequences);
    for _ in 0..n_sequences {
        let mut data = vec![R::zero(); t_len * d];
        let labels;
        match task.name {
            TaskKind::LookaheadParity => {
                // channel 0 carries a clean +-1 sign bit, the rest is noise
                let mut sign_bits = vec![false; t_len];
                for t in 0..t_len {
                    sign_bits[t] = rng.gen_bool(0.5);
                    data[t * d] = if sign_bits[t] { R::from_f64(-1.0) } else { R::one() };
                    for c in 1..d {
                        data[t * d + c] = R::from_f64(rng.gen_range(-1.0..1.0));
                    }
                }
                labels = (0..t_len)
                    .map(|t| {
                        let mut parity = false;
                        for i in 0..=task.lookahead_span {
                            if t + i < t_len {
                                parity ^= sign_bits[t + i];
                            }
                        }
                        parity as usize
                    })
                    .collect();
            }
            TaskKind::DelayedCopy => {
                let classes: Vec<usize> = (0..t_len).map(|_| rng.gen_range(0..k)).collect();
                for t in 0..t_len {
                    data[t * d + classes[t]] = R::one();
                    for c in k..d {
                        data[t * d + c] = R::from_f64(rng.gen_range(-0.1..0.1));
                    }
                }
                labels = (0..t_len)
                    .map(|t| {
                        if t >= task.lookahead_span {
                            classes[t - task.lookahead_span]
                        } else {
                            0
                        }
                    })
                    .collect();
            }
            TaskKind::ContextWindowClass => {
                for v in data.iter_mut() {
                    *v = R::from_f64(rng.gen_range(-1.0..1.0));
                }
                let frames = TensorBuffer::from_vec(t_len, d, data.clone())?;
                labels = (0..t_len)
                    .map(|t| window_class_label(&frames, t, &window_matrix, k, d))
                    .collect();
            }
        }
        let frames = TensorBuffer::from_vec(t_len, d, data)?;
        out.push(Example { frames, labels });
    }
    Ok(out)
}

/// argmax_c sum over the splice window of M[c] . x, zero-padded.
pub fn window_class_label<R: Real>(
    frames: &TensorBuffer<R>,
    t: usize,
    matrix: &[f64],
    num_classes: usize,
    input_dim: usize,
) -> usize {
    let width = 5 * input_dim;
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..num_classes {
        let mut score = 0.0;
        for w in 0..5 {
            let src = t as isize - 2 + w as isize;
            if src < 0 || src as usize >= frames.rows() {
                continue;
            }
            for j in 0..input_dim {
                score += matrix[c * width + w * input_dim + j] * frames.get(src as usize, j).as_f64();
            }
        }
        if score > best.1 {
            best = (c, score);
        }
    }
    best.0
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

pub struct LossOutput<R> {
    pub loss: f64,
    pub grad_logits: Vec<TensorBuffer<R>>,
    pub correct: usize,
    pub counted: usize,
}

/// Frame-level cross-entropy with the output-delay target shift: the logits
/// at base frame f are scored against label f - delay; positions whose
/// shifted target falls off the sequence are masked out.
pub fn masked_cross_entropy<R: Real>(
    out: &ForwardOutput<R>,
    labels: &[&[usize]],
    delay: usize,
    num_classes: usize,
) -> Result<LossOutput<R>> {
    if out.logits.is_empty() {
        return Err(Error::Validation("no output frames to score".into()));
    }
    let batch = out.logits[0].rows();
    if labels.len() != batch {
        return Err(Error::dimension(
            "masked_cross_entropy",
            format!("{} label rows for batch {}", labels.len(), batch),
        ));
    }
    // first pass: count supervised positions
    let mut counted = 0usize;
    for &f in &out.output_frames {
        if f >= delay {
            let idx = f - delay;
            for lab in labels {
                if idx < lab.len() {
                    counted += 1;
                }
            }
        }
    }
    if counted == 0 {
        return Err(Error::Numeric(
            "no supervised frames: sequence too short for the output delay".into(),
        ));
    }
    let scale = R::from_f64(1.0 / counted as f64);
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    let mut grads = Vec::with_capacity(out.logits.len());
    for (j, &f) in out.output_frames.iter().enumerate() {
        let lg = &out.logits[j];
        if lg.cols() != num_classes {
            return Err(Error::dimension(
                "masked_cross_entropy",
                format!("{} logit cols vs {} classes", lg.cols(), num_classes),
            ));
        }
        let mut g = TensorBuffer::zeros(batch, num_classes);
        if f >= delay {
            let idx = f - delay;
            for (b, lab) in labels.iter().enumerate() {
                if idx >= lab.len() {
                    continue;
                }
                let y = lab[idx];
                if y >= num_classes {
                    return Err(Error::Validation(format!("label {y} out of range")));
                }
                let row = lg.row(b);
                let max = row.iter().fold(R::neg_infinity(), |m, v| m.max(*v));
                let mut denom = R::zero();
                for v in row {
                    denom += (*v - max).exp();
                }
                let log_denom = denom.ln();
                loss += (-(row[y] - max - log_denom)).as_f64();
                let mut best = 0usize;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                    let p = (*v - max).exp() / denom;
                    let target = if c == y { R::one() } else { R::zero() };
                    g.set(b, c, (p - target) * scale);
                }
                if best == y {
                    correct += 1;
                }
            }
        }
        grads.push(g);
    }
    Ok(LossOutput {
        loss: loss / counted as f64,
        grad_logits: grads,
        correct,
        counted,
    })
}

/// Stacks per-sequence frames into per-frame batches for lockstep processing.
pub fn batch_frames<R: Real>(examples: &[&Example<R>]) -> Result<Vec<TensorBuffer<R>>> {
    let t_len = examples[0].frames.rows();
    let d = examples[0].frames.cols();
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut buf = TensorBuffer::zeros(examples.len(), d);
        for (b, ex) in examples.iter().enumerate() {
            if ex.frames.rows() != t_len || ex.frames.cols() != d {
                return Err(Error::dimension("batch_frames", "ragged batch".to_string()));
            }
            let row = ex.frames.row(t);
            let dst = b * d;
            buf.data_mut()[dst..dst + d].copy_from_slice(row);
        }
        out.push(buf);
    }
    Ok(out)
}

/// Loss of a batch under fixed parameters; the probe the gradient checker
/// differentiates numerically.
pub fn evaluate_loss<R: Real>(
    topology: &NetworkTopology,
    params: &NetworkParams<R>,
    frames: &[TensorBuffer<R>],
    labels: &[&[usize]],
    bn_mode: BnMode,
) -> Result<f64> {
    let (out, _) = forward_batch(topology, params, frames, bn_mode)?;
    let loss = masked_cross_entropy(&out, labels, topology.output_delay_frames, topology.output_dim)?;
    Ok(loss.loss)
}

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_clip() -> f64 {
    5.0
}

fn default_eval_fraction() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Only full-sequence backpropagation through time is implemented.
    #[serde(default = "default_true")]
    pub bptt_full: bool,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
    #[serde(default = "default_eval_fraction")]
    pub eval_split_fraction: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Validation("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Validation("batch_size and epochs must be >= 1".into()));
        }
        if !self.bptt_full {
            return Err(Error::Validation("truncated BPTT is not supported; set bptt_full = true".into()));
        }
        if !(0.0..1.0).contains(&self.eval_split_fraction) || self.eval_split_fraction <= 0.0 {
            return Err(Error::Validation("eval_split_fraction must be in (0, 1)".into()));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::Validation("grad_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Flat-vector optimizer; parameter order is `NetworkParams::flatten`.
enum OptimizerState<R> {
    Sgd { velocity: Vec<R> },
    Adam { m: Vec<R>, v: Vec<R>, t: u64 },
}

impl<R: Real> OptimizerState<R> {
    fn new(config: &TrainConfig, n: usize) -> Self {
        match config.optimizer {
            OptimizerKind::Sgd => OptimizerState::Sgd {
                velocity: vec![R::zero(); n],
            },
            OptimizerKind::Adam => OptimizerState::Adam {
                m: vec![R::zero(); n],
                v: vec![R::zero(); n],
                t: 0,
            },
        }
    }

    fn step(&mut self, config: &TrainConfig, params: &mut [R], grads: &[R]) {
        let lr = R::from_f64(config.learning_rate);
        match self {
            OptimizerState::Sgd { velocity } => {
                let mu = R::from_f64(config.momentum);
                for i in 0..params.len() {
                    velocity[i] = mu * velocity[i] + grads[i];
                    params[i] -= lr * velocity[i];
                }
            }
            OptimizerState::Adam { m, v, t } => {
                *t += 1;
                let b1 = R::from_f64(config.beta1);
                let b2 = R::from_f64(config.beta2);
                let eps = R::from_f64(config.adam_epsilon);
                let bc1 = R::one() - R::from_f64(config.beta1.powi(*t as i32));
                let bc2 = R::one() - R::from_f64(config.beta2.powi(*t as i32));
                for i in 0..params.len() {
                    m[i] = b1 * m[i] + (R::one() - b1) * grads[i];
                    v[i] = b2 * v[i] + (R::one() - b2) * grads[i] * grads[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Rescales the gradient onto the clip sphere; direction is unchanged.
pub fn clip_global_norm<R: Real>(grads: &mut [R], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = R::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

pub struct TrainOutcome<R> {
    pub params: NetworkParams<R>,
    pub metrics: Vec<EpochMetrics>,
    pub final_eval_accuracy: f64,
}

fn net_has_batch_norm(topology: &NetworkTopology) -> bool {
    topology
        .layers
        .iter()
        .any(|l| matches!(l.cell, crate::network::CellKind::Mgru | crate::network::CellKind::Mgruip))
}

/// Minimizes masked frame-level cross-entropy over the train split and
/// reports frame accuracy on the held-back eval split each epoch.
/// Deterministic given the seed; all reductions are sequential.
pub fn train<R: Real>(
    topology: &NetworkTopology,
    mut params: NetworkParams<R>,
    dataset: &[Example<R>],
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<R>> {
    topology.validate()?;
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("dataset is empty".into()));
    }
    let eval_n = ((dataset.len() as f64 * config.eval_split_fraction).round() as usize)
        .clamp(1, dataset.len() - 1);
    let train_set = &dataset[..dataset.len() - eval_n];
    let eval_set = &dataset[dataset.len() - eval_n..];
    let has_bn = net_has_batch_norm(topology);
    if has_bn && config.batch_size < 2 {
        return Err(Error::Validation(
            "batch-normalized cells need batch_size >= 2 in train mode".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = params.flatten();
    let mut opt = OptimizerState::new(config, flat.len());
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;
        let mut epoch_counted = 0usize;
        for chunk in order.chunks(config.batch_size) {
            // a trailing singleton cannot be batch-normalized; skip it
            if has_bn && chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Example<R>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let frames = batch_frames(&batch)?;
            let labels: Vec<&[usize]> = batch.iter().map(|e| e.labels.as_slice()).collect();
            let (out, tape) = forward_batch(topology, &params, &frames, BnMode::Train)?;
            let loss = masked_cross_entropy(&out, &labels, topology.output_delay_frames, topology.output_dim)?;
            if !loss.loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at epoch {epoch}: {}", loss.loss)));
            }
            epoch_loss += loss.loss * loss.counted as f64;
            epoch_correct += loss.correct;
            epoch_counted += loss.counted;
            let (grads, _) = backward_sequence(topology, &params, &tape, &loss.grad_logits)?;
            let mut flat_grads = grads.flatten();
            clip_global_norm(&mut flat_grads, config.grad_clip_norm);
            opt.step(config, &mut flat, &flat_grads);
            params.load_flat(&flat)?;
            params.apply_bn_updates(&tape);
        }
        let eval_accuracy = evaluate_accuracy(topology, &params, eval_set)?;
        let m = EpochMetrics {
            epoch,
            train_loss: if epoch_counted > 0 {
                epoch_loss / epoch_counted as f64
            } else {
                f64::NAN
            },
            train_accuracy: if epoch_counted > 0 {
                epoch_correct as f64 / epoch_counted as f64
            } else {
                0.0
            },
            eval_accuracy,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    let final_eval_accuracy = metrics.last().map(|m| m.eval_accuracy).unwrap_or(0.0);
    Ok(TrainOutcome {
        params,
        metrics,
        final_eval_accuracy,
    })
}

/// Fisher-Yates with our own RNG so the shuffle is identical across rand
/// versions.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Frame accuracy in infer mode over a set of equally-long sequences.
pub fn evaluate_accuracy<R: Real>(
    topology: &NetworkTopology,
    params: &NetworkParams<R>,
    examples: &[Example<R>],
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<&Example<R>> = examples.iter().collect();
    let frames = batch_frames(&refs)?;
    let labels: Vec<&[usize]> = examples.iter().map(|e| e.labels.as_slice()).collect();
    let (out, _) = forward_batch(topology, params, &frames, BnMode::Infer)?;
    let loss = masked_cross_entropy(&out, &labels, topology.output_delay_frames, topology.output_dim)?;
    Ok(loss.correct as f64 / loss.counted as f64)
}

/// Per-class confusion counts on the eval examples: rows actual, cols
/// predicted, masked positions skipped.
pub fn confusion_counts<R: Real>(
    topology: &NetworkTopology,
    params: &NetworkParams<R>,
    examples: &[Example<R>],
) -> Result<Vec<Vec<u64>>> {
    let k = topology.output_dim;
    let mut counts = vec![vec![0u64; k]; k];
    if examples.is_empty() {
        return Ok(counts);
    }
    let refs: Vec<&Example<R>> = examples.iter().collect();
    let frames = batch_frames(&refs)?;
    let (out, _) = forward_batch(topology, params, &frames, BnMode::Infer)?;
    let delay = topology.output_delay_frames;
    for (j, &f) in out.output_frames.iter().enumerate() {
        if f < delay {
            continue;
        }
        let idx = f - delay;
        for (b, ex) in examples.iter().enumerate() {
            if idx >= ex.labels.len() {
                continue;
            }
            let row = out.logits[j].row(b);
            let mut best = 0usize;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            counts[ex.labels[idx]][best] += 1;
        }
    }
    Ok(counts)
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

pub const GRAD_CHECK_PARAM_GUARD: usize = 5000;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub precision_bits: u32,
    pub params_checked: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub worst_param: String,
    pub step: f64,
    pub tolerance: f64,
    pub rel_floor: f64,
    pub passed: bool,
}

/// Step, tolerance, and relative-error floor of a finite-difference run.
/// The floor makes gradients below it compare absolutely (at tolerance *
/// floor), which keeps finite-difference noise on near-zero gradients from
/// drowning the check.
#[derive(Clone, Copy, Debug)]
pub struct FdSettings {
    pub step: f64,
    pub tolerance: f64,
    pub rel_floor: f64,
}

impl FdSettings {
    /// Defaults per precision: step 1e-3 / tolerance 1e-2 at 32-bit,
    /// step 1e-5 / tolerance 1e-4 at the 64-bit check precision.
    pub fn for_bits(bits: u32) -> Self {
        if bits == 32 {
            FdSettings {
                step: 1e-3,
                tolerance: 1e-2,
                rel_floor: 1.0,
            }
        } else {
            FdSettings {
                step: 1e-5,
                tolerance: 1e-4,
                rel_floor: 1e-2,
            }
        }
    }
}

/// Central finite differences over every trainable parameter against the
/// analytic BPTT gradient. rel = |fd - an| / max(|fd|, |an|, floor).
pub fn grad_check<R: Real>(
    topology: &NetworkTopology,
    params: &NetworkParams<R>,
    frames: &[TensorBuffer<R>],
    labels: &[&[usize]],
    bn_mode: BnMode,
    fd: FdSettings,
) -> Result<GradCheckReport> {
    topology.validate()?;
    let n = params.param_count();
    if n > GRAD_CHECK_PARAM_GUARD {
        return Err(Error::Validation(format!(
            "gradient check is limited to {GRAD_CHECK_PARAM_GUARD} parameters, topology has {n}"
        )));
    }
    let (out, tape) = forward_batch(topology, params, frames, bn_mode)?;
    let loss = masked_cross_entropy(&out, labels, topology.output_delay_frames, topology.output_dim)?;
    let (grads, _) = backward_sequence(topology, params, &tape, &loss.grad_logits)?;
    let analytic = grads.flatten();
    let flat = params.flatten();
    let names: Vec<(String, usize)> = params
        .named_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.data().len()))
        .collect();
    let name_of = |idx: usize| -> String {
        let mut off = 0;
        for (name, len) in &names {
            if idx < off + len {
                return format!("{name}[{}]", idx - off);
            }
            off += len;
        }
        format!("param[{idx}]")
    };
    let FdSettings {
        step,
        tolerance,
        rel_floor,
    } = fd;
    let h = R::from_f64(step);
    let mut probe = params.clone();
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut worst = String::new();
    for i in 0..n {
        let mut up_flat = flat.clone();
        up_flat[i] += h;
        probe.load_flat(&up_flat)?;
        let up = evaluate_loss(topology, &probe, frames, labels, bn_mode)?;
        up_flat[i] = flat[i] - h;
        probe.load_flat(&up_flat)?;
        let dn = evaluate_loss(topology, &probe, frames, labels, bn_mode)?;
        let fd = (up - dn) / (2.0 * step);
        let an = analytic[i].as_f64();
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(rel_floor);
        sum_rel += rel;
        if rel > max_rel {
            max_rel = rel;
            worst = name_of(i);
        }
    }
    Ok(GradCheckReport {
        precision_bits: R::BITS,
        params_checked: n,
        max_rel_error: max_rel,
        mean_rel_error: if n > 0 { sum_rel / n as f64 } else { 0.0 },
        worst_param: worst,
        step,
        tolerance,
        rel_floor,
        passed: max_rel < tolerance,
    })
}

/// Deterministic probe example for gradient checks: uniform frames, uniform
/// labels, batch of two sequences.
pub fn gradcheck_probe<R: Real>(
    topology: &NetworkTopology,
    seed: u64,
    t_len: usize,
) -> (Vec<TensorBuffer<R>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x6AD_C11EC));
    let batch = 2;
    let mut frames = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let mut f = TensorBuffer::zeros(batch, topology.input_dim);
        for v in f.data_mut() {
            *v = R::from_f64(rng.gen_range(-1.0..1.0));
        }
        frames.push(f);
    }
    let labels: Vec<Vec<usize>> = (0..batch)
        .map(|_| (0..t_len).map(|_| rng.gen_range(0..topology.output_dim)).collect())
        .collect();
    (frames, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ContextSpec;
    use crate::network::{CellKind, LayerSpec};

    fn tiny_topology(cell: CellKind) -> NetworkTopology {
        NetworkTopology {
            input_dim: 3,
            splice_past: 1,
            splice_future: 1,
            layers: vec![LayerSpec {
                cell,
                n_c: 4,
                n_p: if cell == CellKind::Mgruip { Some(3) } else { None },
                context: ContextSpec::none(),
                frame_period: 1,
            }],
            bottleneck_dim: 4,
            output_dim: 2,
            output_delay_frames: 1,
            base_frame_period_ms: 10.0,
        }
    }

    #[test]
    fn task_generation_is_deterministic() {
        let task = ToyTask {
            name: TaskKind::LookaheadParity,
            input_dim: 3,
            num_classes: 2,
            seq_len: 20,
            lookahead_span: 4,
            seed: 7,
        };
        let a: Vec<Example<f32>> = generate_task(&task, 5).unwrap();
        let b: Vec<Example<f32>> = generate_task(&task, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parity_labels_match_recomputation_from_frames() {
        let task = ToyTask {
            name: TaskKind::LookaheadParity,
            input_dim: 2,
            num_classes: 2,
            seq_len: 30,
            lookahead_span: 6,
            seed: 11,
        };
        let data: Vec<Example<f64>> = generate_task(&task, 4).unwrap();
        for ex in &data {
            for t in 0..task.seq_len {
                let mut parity = 0usize;
                for i in 0..=task.lookahead_span {
                    if t + i < task.seq_len && ex.frames.get(t + i, 0) < 0.0 {
                        parity ^= 1;
                    }
                }
                assert_eq!(ex.labels[t], parity, "frame {t}");
            }
        }
    }

    #[test]
    fn parity_span_zero_depends_only_on_current_frame() {
        let task = ToyTask {
            name: TaskKind::LookaheadParity,
            input_dim: 2,
            num_classes: 2,
            seq_len: 10,
            lookahead_span: 0,
            seed: 3,
        };
        let data: Vec<Example<f32>> = generate_task(&task, 3).unwrap();
        for ex in &data {
            for t in 0..task.seq_len {
                assert_eq!(ex.labels[t], (ex.frames.get(t, 0) < 0.0) as usize);
            }
        }
    }

    #[test]
    fn delayed_copy_labels_match_recomputation() {
        let task = ToyTask {
            name: TaskKind::DelayedCopy,
            input_dim: 5,
            num_classes: 4,
            seq_len: 25,
            lookahead_span: 3,
            seed: 13,
        };
        let data: Vec<Example<f32>> = generate_task(&task, 3).unwrap();
        for ex in &data {
            for t in 0..task.seq_len {
                // recover the class from the one-hot block
                let mut cls = 0;
                for c in 0..4 {
                    if ex.frames.get(t, c) == 1.0 {
                        cls = c;
                    }
                }
                if t + 3 < task.seq_len {
                    assert_eq!(ex.labels[t + 3], cls);
                }
                if t < 3 {
                    assert_eq!(ex.labels[t], 0);
                }
            }
        }
    }

    #[test]
    fn window_class_labels_match_recomputation() {
        let task = ToyTask {
            name: TaskKind::ContextWindowClass,
            input_dim: 3,
            num_classes: 3,
            seq_len: 15,
            lookahead_span: 0,
            seed: 17,
        };
        let data: Vec<Example<f64>> = generate_task(&task, 3).unwrap();
        let m = task.window_matrix();
        for ex in &data {
            for t in 0..task.seq_len {
                assert_eq!(ex.labels[t], window_class_label(&ex.frames, t, &m, 3, 3));
            }
        }
    }

    #[test]
    fn invalid_span_is_rejected() {
        let task = ToyTask {
            name: TaskKind::LookaheadParity,
            input_dim: 2,
            num_classes: 2,
            seq_len: 5,
            lookahead_span: 5,
            seed: 1,
        };
        assert!(generate_task::<f32>(&task, 1).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let topology = tiny_topology(CellKind::Mgru);
        let params = NetworkParams::<f32>::init(&topology, 5).unwrap();
        let before = params.flatten();
        let task = ToyTask {
            name: TaskKind::LookaheadParity,
            input_dim: 3,
            num_classes: 2,
            seq_len: 12,
            lookahead_span: 1,
            seed: 5,
        };
        let data = generate_task(&task, 8).unwrap();
        let config = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.0,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 4,
            epochs: 3,
            bptt_full: true,
            grad_clip_norm: 5.0,
            eval_split_fraction: 0.25,
        };
        let out = train(&topology, params, &data, &config, 5, |_| {}).unwrap();
        assert_eq!(out.params.flatten(), before);
    }

    #[test]
    fn one_sgd_step_matches_finite_difference_gradient() {
        // GRU-only net so a single-sequence batch is allowed.
        let topology = tiny_topology(CellKind::Gru);
        let params = NetworkParams::<f64>::init(&topology, 21).unwrap();
        let task = ToyTask {
            name: TaskKind::LookaheadParity,
            input_dim: 3,
            num_classes: 2,
            seq_len: 8,
            lookahead_span: 1,
            seed: 9,
        };
        let data = generate_task::<f64>(&task, 2).unwrap();
        let lr = 0.05;
        let config = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: lr,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 1,
            epochs: 1,
            bptt_full: true,
            grad_clip_norm: 1e9,
            eval_split_fraction: 0.5,
        };
        // train set is data[0] only (eval fraction 0.5 of 2)
        let before = params.flatten();
        let out = train(&topology, params.clone(), &data, &config, 1, |_| {}).unwrap();
        let after = out.params.flatten();
        // finite-difference gradient of the same single-example loss
        let ex = &data[0];
        let frames = batch_frames(&[ex]).unwrap();
        let labels: Vec<&[usize]> = vec![ex.labels.as_slice()];
        let mut probe = params.clone();
        let h = 1e-6;
        for i in 0..before.len() {
            let mut f = before.clone();
            f[i] += h;
            probe.load_flat(&f).unwrap();
            let up = evaluate_loss(&topology, &probe, &frames, &labels, BnMode::Train).unwrap();
            f[i] = before[i] - h;
            probe.load_flat(&f).unwrap();
            let dn = evaluate_loss(&topology, &probe, &frames, &labels, BnMode::Train).unwrap();
            let fd = (up - dn) / (2.0 * h);
            let expected = before[i] - lr * fd;
            let err = (after[i] - expected).abs() / expected.abs().max(1e-2);
            assert!(err < 1e-2, "param {i}: after={} expected={}", after[i], expected);
        }
    }

    #[test]
    fn grad_clip_preserves_direction() {
        let mut g = vec![3.0f64, -4.0, 0.0];
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((g[0] - 0.6).abs() < 1e-12);
        assert!((g[1] + 0.8).abs() < 1e-12);
        assert_eq!(g[2], 0.0);
        // below the threshold nothing changes
        let mut g2 = vec![0.3f64, 0.4];
        clip_global_norm(&mut g2, 1.0);
        assert_eq!(g2, vec![0.3, 0.4]);
    }

    #[test]
    fn linearly_separable_task_trains_to_high_accuracy() {
        // span 0 parity: the label is the sign bit of the current frame.
        let topology = tiny_topology(CellKind::Mgru);
        let params = NetworkParams::<f32>::init(&topology, 33).unwrap();
        let task = ToyTask {
            name: TaskKind::LookaheadParity,
            input_dim: 3,
            num_classes: 2,
            seq_len: 12,
            lookahead_span: 0,
            seed: 19,
        };
        let data = generate_task(&task, 40).unwrap();
        let config = TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-2,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 8,
            epochs: 20,
            bptt_full: true,
            grad_clip_norm: 5.0,
            eval_split_fraction: 0.2,
        };
        let out = train(&topology, params, &data, &config, 19, |_| {}).unwrap();
        let final_train_acc = out.metrics.last().unwrap().train_accuracy;
        assert!(
            final_train_acc >= 0.99,
            "expected >= 99% on a linearly separable task, got {final_train_acc}"
        );
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let topology = tiny_topology(CellKind::Mgruip);
        let params = NetworkParams::<f64>::init(&topology, 77).unwrap();
        let (frames, labels) = gradcheck_probe::<f64>(&topology, 77, 6);
        let labels_ref: Vec<&[usize]> = labels.iter().map(|l| l.as_slice()).collect();
        let report = grad_check(
            &topology,
            &params,
            &frames,
            &labels_ref,
            BnMode::Train,
            FdSettings::for_bits(64),
        )
        .unwrap();
        assert!(report.passed, "clean check should pass: {report:?}");
        // flip the sign of the largest analytic gradient and re-apply the
        // comparison rule for that entry: the check must notice
        let (out, tape) = forward_batch(&topology, &params, &frames, BnMode::Train).unwrap();
        let loss = masked_cross_entropy(&out, &labels_ref, topology.output_delay_frames, topology.output_dim).unwrap();
        let (grads, _) = backward_sequence(&topology, &params, &tape, &loss.grad_logits).unwrap();
        let analytic = grads.flatten();
        let i = (0..analytic.len())
            .max_by(|a, b| analytic[*a].abs().total_cmp(&analytic[*b].abs()))
            .unwrap();
        let corrupted = -analytic[i];
        let flat = params.flatten();
        let mut probe = params.clone();
        let mut f = flat.clone();
        f[i] += 1e-5;
        probe.load_flat(&f).unwrap();
        let up = evaluate_loss(&topology, &probe, &frames, &labels_ref, BnMode::Train).unwrap();
        f[i] = flat[i] - 1e-5;
        probe.load_flat(&f).unwrap();
        let dn = evaluate_loss(&topology, &probe, &frames, &labels_ref, BnMode::Train).unwrap();
        let fd = (up - dn) / 2e-5;
        let rel = (fd - corrupted).abs() / fd.abs().max(corrupted.abs()).max(1e-2);
        assert!(rel > 1e-4, "sign flip went unnoticed: rel={rel}");
    }

    #[test]
    fn oversized_topology_is_refused_by_grad_check() {
        let mut topology = tiny_topology(CellKind::Mgru);
        topology.layers[0].n_c = 200;
        topology.bottleneck_dim = 64;
        let params = NetworkParams::<f32>::init(&topology, 1).unwrap();
        let (frames, labels) = gradcheck_probe::<f32>(&topology, 1, 4);
        let labels_ref: Vec<&[usize]> = labels.iter().map(|l| l.as_slice()).collect();
        assert!(matches!(
            grad_check(&topology, &params, &frames, &labels_ref, BnMode::Train, FdSettings::for_bits(32)),
            Err(Error::Validation(_))
        ));
    }
}
