//! Layer stacking: input splicing, mixed frame rates, per-layer context
//! wiring across time, the bottleneck + softmax output head, and the
//! parameter-count and latency calculators.

use serde::{Deserialize, Serialize};

use crate::cells::{
    cell_backward, gru_step, mgru_step, mgruip_step, CellGrads, CellParams, GruParams, MgruParams,
    MgruipParams, StepCache,
};
use crate::context::{
    context_backward, temporal_convolve, temporal_encode, ContextCache, ContextGrads, ContextKind,
    ContextParams, ContextSpec, EncodingParams, EncodingTransform,
};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, BnStatsUpdate, Real, TensorBuffer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Mgru,
    Mgruip,
}

/// Declarative description of one recurrent layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub cell: CellKind,
    pub n_c: usize,
    /// Projection units; required iff cell == mgruip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_p: Option<usize>,
    #[serde(default = "ContextSpec::none")]
    pub context: ContextSpec,
    /// Operating rate as a base-frame-period multiple: 1 (100 Hz) or 3 (33 Hz).
    #[serde(default = "default_frame_period")]
    pub frame_period: usize,
}

fn default_frame_period() -> usize {
    1
}

fn default_splice() -> usize {
    2
}

fn default_bottleneck() -> usize {
    512
}

fn default_output_delay() -> usize {
    5
}

fn default_period_ms() -> f64 {
    10.0
}

/// Whole-model description: splicing window, ordered layers, output head,
/// output delay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkTopology {
    pub input_dim: usize,
    #[serde(default = "default_splice")]
    pub splice_past: usize,
    #[serde(default = "default_splice")]
    pub splice_future: usize,
    pub layers: Vec<LayerSpec>,
    /// Linear layer inserted between the last hidden layer and the softmax.
    #[serde(default = "default_bottleneck")]
    pub bottleneck_dim: usize,
    pub output_dim: usize,
    /// Training targets are shifted this many base frames later.
    #[serde(default = "default_output_delay")]
    pub output_delay_frames: usize,
    #[serde(default = "default_period_ms")]
    pub base_frame_period_ms: f64,
}

impl NetworkTopology {
    pub fn spliced_dim(&self) -> usize {
        self.input_dim * (self.splice_past + 1 + self.splice_future)
    }

    /// Width of the stream feeding layer `l` (spliced input for layer 0).
    pub fn layer_input_dim(&self, l: usize) -> usize {
        if l == 0 {
            self.spliced_dim()
        } else {
            self.layers[l - 1].n_c
        }
    }

    /// Frame period of the stream feeding layer `l`.
    pub fn lower_period(&self, l: usize) -> usize {
        if l == 0 {
            1
        } else {
            self.layers[l - 1].frame_period
        }
    }

    pub fn output_period(&self) -> usize {
        self.layers.last().map(|l| l.frame_period).unwrap_or(1)
    }

    /// Base-frame indices the last layer (and so the head) computes.
    pub fn output_frames(&self, t_len: usize) -> Vec<usize> {
        (0..t_len).step_by(self.output_period()).collect()
    }

    /// Total future reach per output, in base frames:
    /// splice_future + sum of K_l * s_l.
    pub fn lookahead_frames(&self) -> usize {
        self.splice_future
            + self
                .layers
                .iter()
                .map(|l| l.context.lookahead_frames())
                .sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("topology has no layers".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.bottleneck_dim == 0 {
            return Err(Error::Validation("input_dim, output_dim, and bottleneck_dim must be >= 1".into()));
        }
        if self.base_frame_period_ms <= 0.0 {
            return Err(Error::Validation("base_frame_period_ms must be positive".into()));
        }
        for (l, spec) in self.layers.iter().enumerate() {
            if spec.n_c == 0 {
                return Err(Error::Validation(format!("layer {}: n_c must be >= 1", l + 1)));
            }
            if !matches!(spec.frame_period, 1 | 3) {
                return Err(Error::Validation(format!(
                    "layer {}: frame_period must be 1 or 3, got {}",
                    l + 1,
                    spec.frame_period
                )));
            }
            if l == 0 && spec.frame_period != 1 {
                return Err(Error::Validation("layer 1 must run at every base frame (frame_period 1)".into()));
            }
            if l > 0 && spec.frame_period < self.layers[l - 1].frame_period {
                return Err(Error::Validation(format!(
                    "layer {}: frame_period may not decrease going up the stack",
                    l + 1
                )));
            }
            match spec.cell {
                CellKind::Mgruip => {
                    let n_p = spec.n_p.ok_or_else(|| {
                        Error::Validation(format!("layer {}: mgruip needs n_p", l + 1))
                    })?;
                    if n_p == 0 {
                        return Err(Error::Validation(format!("layer {}: n_p must be >= 1", l + 1)));
                    }
                    let n_i = self.layer_input_dim(l);
                    if n_p >= n_i + spec.n_c {
                        return Err(Error::Validation(format!(
                            "layer {}: projection must be a bottleneck (n_p {} >= n_i {} + n_c {})",
                            l + 1,
                            n_p,
                            n_i,
                            spec.n_c
                        )));
                    }
                }
                CellKind::Gru | CellKind::Mgru => {
                    if spec.n_p.is_some() {
                        return Err(Error::Validation(format!(
                            "layer {}: n_p is only meaningful for mgruip",
                            l + 1
                        )));
                    }
                }
            }
            spec.context.validate()?;
            if !spec.context.is_none() {
                if spec.cell != CellKind::Mgruip {
                    return Err(Error::Validation(format!(
                        "layer {}: context modules attach to the mgruip projection only",
                        l + 1
                    )));
                }
                let lower_period = self.lower_period(l);
                if spec.context.stride % lower_period != 0 {
                    return Err(Error::Validation(format!(
                        "layer {}: context stride {} must be a multiple of the lower layer's frame period {}",
                        l + 1,
                        spec.context.stride,
                        lower_period
                    )));
                }
                if spec.context.kind == ContextKind::Encoding {
                    if l == 0 {
                        return Err(Error::Validation(
                            "layer 1: temporal encoding needs a projection layer below".into(),
                        ));
                    }
                    let below = &self.layers[l - 1];
                    if below.cell != CellKind::Mgruip {
                        return Err(Error::Validation(format!(
                            "layer {}: temporal encoding consumes the lower layer's projection; layer {} is not mgruip",
                            l + 1,
                            l
                        )));
                    }
                    if below.n_p != spec.n_p {
                        return Err(Error::Validation(format!(
                            "layer {}: temporal encoding needs matching projection dims (lower n_p {:?}, this n_p {:?})",
                            l + 1,
                            below.n_p,
                            spec.n_p
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// parameter counting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerParamCount {
    pub cell: CellKind,
    pub input_dim: usize,
    pub n_c: usize,
    pub n_p: Option<usize>,
    /// Weight-matrix parameters of the cell (the paper-style, bias-free count).
    pub cell_weights: u64,
    /// Biases plus batch-norm gamma/beta.
    pub cell_biases: u64,
    pub context_weights: u64,
    /// What an mGRU of the same n_i/n_c would cost: 2*n_i*n_c + 2*n_c^2.
    pub mgru_equivalent_weights: u64,
}

#[derive(Debug, Clone)]
pub struct ParameterReport {
    pub layers: Vec<LayerParamCount>,
    pub head_weights: u64,
    pub head_biases: u64,
    /// Recurrent-layer weights plus context weights; biases and the output
    /// head excluded, matching the closed-form layer counts.
    pub bias_free_total: u64,
    /// Every trainable parameter, head included.
    pub with_bias_total: u64,
}

pub fn count_parameters(topology: &NetworkTopology) -> Result<ParameterReport> {
    topology.validate()?;
    let mut layers = Vec::with_capacity(topology.layers.len());
    for (l, spec) in topology.layers.iter().enumerate() {
        let n_i = topology.layer_input_dim(l) as u64;
        let n_c = spec.n_c as u64;
        let (cell_weights, cell_biases) = match spec.cell {
            CellKind::Gru => (3 * (n_i * n_c + n_c * n_c), 3 * n_c),
            CellKind::Mgru => (2 * (n_i * n_c + n_c * n_c), 2 * n_c + 2 * n_c),
            CellKind::Mgruip => {
                let n_p = spec.n_p.unwrap() as u64;
                ((n_i + n_c) * n_p + 2 * n_p * n_c, 2 * n_c + 2 * n_c)
            }
        };
        let context_weights = match spec.context.kind {
            ContextKind::None => 0,
            ContextKind::Encoding => match spec.context.transform {
                EncodingTransform::Identity => 0,
                EncodingTransform::Scale => 1,
                EncodingTransform::Affine => {
                    let n_p = spec.n_p.unwrap() as u64;
                    n_p * n_p
                }
            },
            ContextKind::Convolution => {
                let n_p = spec.n_p.unwrap() as u64;
                let n_c_lower = topology.layer_input_dim(l) as u64;
                spec.context.order as u64 * n_c_lower * n_p
            }
        };
        layers.push(LayerParamCount {
            cell: spec.cell,
            input_dim: n_i as usize,
            n_c: spec.n_c,
            n_p: spec.n_p,
            cell_weights,
            cell_biases,
            context_weights,
            mgru_equivalent_weights: 2 * (n_i * n_c + n_c * n_c),
        });
    }
    let n_c_last = topology.layers.last().unwrap().n_c as u64;
    let head_weights =
        topology.bottleneck_dim as u64 * n_c_last + topology.output_dim as u64 * topology.bottleneck_dim as u64;
    let head_biases = topology.output_dim as u64;
    let bias_free_total = layers.iter().map(|l| l.cell_weights + l.context_weights).sum::<u64>();
    let with_bias_total =
        bias_free_total + layers.iter().map(|l| l.cell_biases).sum::<u64>() + head_weights + head_biases;
    Ok(ParameterReport {
        layers,
        head_weights,
        head_biases,
        bias_free_total,
        with_bias_total,
    })
}

// ---------------------------------------------------------------------------
// latency accounting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub splice_frames: usize,
    /// Per-layer future reach K*s in base frames.
    pub context_frames: Vec<usize>,
    pub output_delay_frames: usize,
    pub lookahead_frames: usize,
    pub base_frame_period_ms: f64,
    pub splice_ms: f64,
    pub context_ms: Vec<f64>,
    pub output_delay_ms: f64,
    pub total_ms: f64,
}

pub fn compute_latency(topology: &NetworkTopology) -> Result<LatencyReport> {
    topology.validate()?;
    let period = topology.base_frame_period_ms;
    let splice_frames = topology.splice_future;
    let context_frames: Vec<usize> = topology.layers.iter().map(|l| l.context.lookahead_frames()).collect();
    let lookahead_frames = splice_frames + context_frames.iter().sum::<usize>();
    let splice_ms = splice_frames as f64 * period;
    let context_ms: Vec<f64> = context_frames.iter().map(|f| *f as f64 * period).collect();
    let output_delay_ms = topology.output_delay_frames as f64 * period;
    let total_ms = lookahead_frames as f64 * period + output_delay_ms;
    Ok(LatencyReport {
        splice_frames,
        context_frames,
        output_delay_frames: topology.output_delay_frames,
        lookahead_frames,
        base_frame_period_ms: period,
        splice_ms,
        context_ms,
        output_delay_ms,
        total_ms,
    })
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<R> {
    pub cell: CellParams<R>,
    pub context: ContextParams<R>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<R> {
    pub bottleneck_w: TensorBuffer<R>,
    pub softmax_w: TensorBuffer<R>,
    pub softmax_b: TensorBuffer<R>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<R> {
    pub layers: Vec<LayerParams<R>>,
    pub head: HeadParams<R>,
}

fn xavier_fill<R: Real>(t: &mut TensorBuffer<R>, rng: &mut impl rand::Rng) {
    let fan_out = t.rows() as f64;
    let fan_in = t.cols() as f64;
    let a = (6.0 / (fan_in + fan_out)).sqrt();
    for v in t.data_mut() {
        *v = R::from_f64(rng.gen_range(-a..a));
    }
}

impl<R: Real> NetworkParams<R> {
    /// Uniform [-a, a] with a = sqrt(6/(fan_in+fan_out)) for matrices,
    /// zero biases, identity batch norm. All draws happen in f64 so the f32
    /// and f64 instantiations of a seed see the same values.
    pub fn init(topology: &NetworkTopology, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        topology.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(topology.layers.len());
        for (l, spec) in topology.layers.iter().enumerate() {
            let n_i = topology.layer_input_dim(l);
            let n_c = spec.n_c;
            let cell = match spec.cell {
                CellKind::Gru => {
                    let mut p = GruParams::zeros(n_i, n_c);
                    for t in [&mut p.w_z, &mut p.w_r, &mut p.w_h, &mut p.u_z, &mut p.u_r, &mut p.u_h] {
                        xavier_fill(t, &mut rng);
                    }
                    CellParams::Gru(p)
                }
                CellKind::Mgru => {
                    let mut p = MgruParams::zeros(n_i, n_c);
                    for t in [&mut p.w_z, &mut p.w_h, &mut p.u_z, &mut p.u_h] {
                        xavier_fill(t, &mut rng);
                    }
                    CellParams::Mgru(p)
                }
                CellKind::Mgruip => {
                    let n_p = spec.n_p.unwrap();
                    let mut p = MgruipParams::zeros(n_i, n_c, n_p);
                    for t in [&mut p.w_v, &mut p.w_z, &mut p.w_h] {
                        xavier_fill(t, &mut rng);
                    }
                    CellParams::Mgruip(p)
                }
            };
            let context = match spec.context.kind {
                ContextKind::None => ContextParams::None,
                ContextKind::Encoding => match spec.context.transform {
                    EncodingTransform::Identity => ContextParams::Encoding(EncodingParams::Identity),
                    EncodingTransform::Scale => ContextParams::Encoding(EncodingParams::Scale {
                        m: TensorBuffer::from_vec(1, 1, vec![R::one()]).unwrap(),
                    }),
                    EncodingTransform::Affine => {
                        let n_p = spec.n_p.unwrap();
                        let mut w_f = TensorBuffer::zeros(n_p, n_p);
                        xavier_fill(&mut w_f, &mut rng);
                        ContextParams::Encoding(EncodingParams::Affine { w_f })
                    }
                },
                ContextKind::Convolution => {
                    let n_p = spec.n_p.unwrap();
                    let n_c_lower = topology.layer_input_dim(l);
                    let mut w_p = TensorBuffer::zeros(n_p, spec.context.order * n_c_lower);
                    xavier_fill(&mut w_p, &mut rng);
                    ContextParams::Convolution { w_p }
                }
            };
            layers.push(LayerParams { cell, context });
        }
        let n_c_last = topology.layers.last().unwrap().n_c;
        let mut bottleneck_w = TensorBuffer::zeros(topology.bottleneck_dim, n_c_last);
        xavier_fill(&mut bottleneck_w, &mut rng);
        let mut softmax_w = TensorBuffer::zeros(topology.output_dim, topology.bottleneck_dim);
        xavier_fill(&mut softmax_w, &mut rng);
        let softmax_b = TensorBuffer::zeros(1, topology.output_dim);
        Ok(NetworkParams {
            layers,
            head: HeadParams {
                bottleneck_w,
                softmax_w,
                softmax_b,
            },
        })
    }

    /// Trainable tensors in a stable order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &TensorBuffer<R>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = format!("layer{i}");
            match &layer.cell {
                CellParams::Gru(p) => {
                    out.push((format!("{pre}.w_z"), &p.w_z));
                    out.push((format!("{pre}.w_r"), &p.w_r));
                    out.push((format!("{pre}.w_h"), &p.w_h));
                    out.push((format!("{pre}.u_z"), &p.u_z));
                    out.push((format!("{pre}.u_r"), &p.u_r));
                    out.push((format!("{pre}.u_h"), &p.u_h));
                    out.push((format!("{pre}.b_z"), &p.b_z));
                    out.push((format!("{pre}.b_r"), &p.b_r));
                    out.push((format!("{pre}.b_h"), &p.b_h));
                }
                CellParams::Mgru(p) => {
                    out.push((format!("{pre}.w_z"), &p.w_z));
                    out.push((format!("{pre}.w_h"), &p.w_h));
                    out.push((format!("{pre}.u_z"), &p.u_z));
                    out.push((format!("{pre}.u_h"), &p.u_h));
                    out.push((format!("{pre}.b_z"), &p.b_z));
                    out.push((format!("{pre}.b_h"), &p.b_h));
                    out.push((format!("{pre}.bn.gamma"), &p.bn.gamma));
                    out.push((format!("{pre}.bn.beta"), &p.bn.beta));
                }
                CellParams::Mgruip(p) => {
                    out.push((format!("{pre}.w_v"), &p.w_v));
                    out.push((format!("{pre}.w_z"), &p.w_z));
                    out.push((format!("{pre}.w_h"), &p.w_h));
                    out.push((format!("{pre}.b_z"), &p.b_z));
                    out.push((format!("{pre}.b_h"), &p.b_h));
                    out.push((format!("{pre}.bn.gamma"), &p.bn.gamma));
                    out.push((format!("{pre}.bn.beta"), &p.bn.beta));
                }
            }
            match &layer.context {
                ContextParams::None | ContextParams::Encoding(EncodingParams::Identity) => {}
                ContextParams::Encoding(EncodingParams::Scale { m }) => {
                    out.push((format!("{pre}.ctx.m"), m));
                }
                ContextParams::Encoding(EncodingParams::Affine { w_f }) => {
                    out.push((format!("{pre}.ctx.w_f"), w_f));
                }
                ContextParams::Convolution { w_p } => {
                    out.push((format!("{pre}.ctx.w_p"), w_p));
                }
            }
        }
        out.push(("head.bottleneck_w".into(), &self.head.bottleneck_w));
        out.push(("head.softmax_w".into(), &self.head.softmax_w));
        out.push(("head.softmax_b".into(), &self.head.softmax_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut TensorBuffer<R>)> {
        let mut out: Vec<(String, &mut TensorBuffer<R>)> = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let pre = format!("layer{i}");
            match &mut layer.cell {
                CellParams::Gru(p) => {
                    out.push((format!("{pre}.w_z"), &mut p.w_z));
                    out.push((format!("{pre}.w_r"), &mut p.w_r));
                    out.push((format!("{pre}.w_h"), &mut p.w_h));
                    out.push((format!("{pre}.u_z"), &mut p.u_z));
                    out.push((format!("{pre}.u_r"), &mut p.u_r));
                    out.push((format!("{pre}.u_h"), &mut p.u_h));
                    out.push((format!("{pre}.b_z"), &mut p.b_z));
                    out.push((format!("{pre}.b_r"), &mut p.b_r));
                    out.push((format!("{pre}.b_h"), &mut p.b_h));
                }
                CellParams::Mgru(p) => {
                    out.push((format!("{pre}.w_z"), &mut p.w_z));
                    out.push((format!("{pre}.w_h"), &mut p.w_h));
                    out.push((format!("{pre}.u_z"), &mut p.u_z));
                    out.push((format!("{pre}.u_h"), &mut p.u_h));
                    out.push((format!("{pre}.b_z"), &mut p.b_z));
                    out.push((format!("{pre}.b_h"), &mut p.b_h));
                    out.push((format!("{pre}.bn.gamma"), &mut p.bn.gamma));
                    out.push((format!("{pre}.bn.beta"), &mut p.bn.beta));
                }
                CellParams::Mgruip(p) => {
                    out.push((format!("{pre}.w_v"), &mut p.w_v));
                    out.push((format!("{pre}.w_z"), &mut p.w_z));
                    out.push((format!("{pre}.w_h"), &mut p.w_h));
                    out.push((format!("{pre}.b_z"), &mut p.b_z));
                    out.push((format!("{pre}.b_h"), &mut p.b_h));
                    out.push((format!("{pre}.bn.gamma"), &mut p.bn.gamma));
                    out.push((format!("{pre}.bn.beta"), &mut p.bn.beta));
                }
            }
            match &mut layer.context {
                ContextParams::None | ContextParams::Encoding(EncodingParams::Identity) => {}
                ContextParams::Encoding(EncodingParams::Scale { m }) => {
                    out.push((format!("{pre}.ctx.m"), m));
                }
                ContextParams::Encoding(EncodingParams::Affine { w_f }) => {
                    out.push((format!("{pre}.ctx.w_f"), w_f));
                }
                ContextParams::Convolution { w_p } => {
                    out.push((format!("{pre}.ctx.w_p"), w_p));
                }
            }
        }
        out.push(("head.bottleneck_w".into(), &mut self.head.bottleneck_w));
        out.push(("head.softmax_w".into(), &mut self.head.softmax_w));
        out.push(("head.softmax_b".into(), &mut self.head.softmax_b));
        out
    }

    /// Batch-norm running statistics; not trainable, serialized separately.
    pub fn named_state_tensors(&self) -> Vec<(String, &TensorBuffer<R>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let bn = match &layer.cell {
                CellParams::Gru(_) => continue,
                CellParams::Mgru(p) => &p.bn,
                CellParams::Mgruip(p) => &p.bn,
            };
            out.push((format!("layer{i}.bn.running_mean"), &bn.running_mean));
            out.push((format!("layer{i}.bn.running_var"), &bn.running_var));
        }
        out
    }

    pub fn named_state_tensors_mut(&mut self) -> Vec<(String, &mut TensorBuffer<R>)> {
        let mut out: Vec<(String, &mut TensorBuffer<R>)> = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let bn = match &mut layer.cell {
                CellParams::Gru(_) => continue,
                CellParams::Mgru(p) => &mut p.bn,
                CellParams::Mgruip(p) => &mut p.bn,
            };
            out.push((format!("layer{i}.bn.running_mean"), &mut bn.running_mean));
            out.push((format!("layer{i}.bn.running_var"), &mut bn.running_var));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    pub fn flatten(&self) -> Vec<R> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[R]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dimension(
                "load_flat",
                format!("{} values for {} parameters", flat.len(), self.param_count()),
            ));
        }
        let mut offset = 0;
        for (_, t) in self.named_tensors_mut() {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Folds the batch statistics recorded by a train-mode forward into the
    /// running statistics, in step order.
    pub fn apply_bn_updates(&mut self, tape: &ForwardTape<R>) {
        for (l, lt) in tape.layers.iter().enumerate() {
            if lt.bn_updates.is_empty() {
                continue;
            }
            let bn = match &mut self.layers[l].cell {
                CellParams::Gru(_) => continue,
                CellParams::Mgru(p) => &mut p.bn,
                CellParams::Mgruip(p) => &mut p.bn,
            };
            for u in &lt.bn_updates {
                bn.fold_update(u);
            }
        }
    }

    /// Converts every tensor between precisions (used by the gradient-check
    /// harness to re-run f32 models at f64).
    pub fn convert<S: Real>(&self) -> NetworkParams<S> {
        fn conv<R: Real, S: Real>(t: &TensorBuffer<R>) -> TensorBuffer<S> {
            TensorBuffer::from_vec(
                t.rows(),
                t.cols(),
                t.data().iter().map(|v| S::from_f64(v.as_f64())).collect(),
            )
            .unwrap()
        }
        fn conv_bn<R: Real, S: Real>(bn: &crate::tensor::BatchNormState<R>) -> crate::tensor::BatchNormState<S> {
            crate::tensor::BatchNormState {
                gamma: conv(&bn.gamma),
                beta: conv(&bn.beta),
                running_mean: conv(&bn.running_mean),
                running_var: conv(&bn.running_var),
                momentum: S::from_f64(bn.momentum.as_f64()),
                epsilon: S::from_f64(bn.epsilon.as_f64()),
            }
        }
        NetworkParams {
            layers: self
                .layers
                .iter()
                .map(|layer| LayerParams {
                    cell: match &layer.cell {
                        CellParams::Gru(p) => CellParams::Gru(GruParams {
                            w_z: conv(&p.w_z),
                            w_r: conv(&p.w_r),
                            w_h: conv(&p.w_h),
                            u_z: conv(&p.u_z),
                            u_r: conv(&p.u_r),
                            u_h: conv(&p.u_h),
                            b_z: conv(&p.b_z),
                            b_r: conv(&p.b_r),
                            b_h: conv(&p.b_h),
                        }),
                        CellParams::Mgru(p) => CellParams::Mgru(MgruParams {
                            w_z: conv(&p.w_z),
                            w_h: conv(&p.w_h),
                            u_z: conv(&p.u_z),
                            u_h: conv(&p.u_h),
                            b_z: conv(&p.b_z),
                            b_h: conv(&p.b_h),
                            bn: conv_bn(&p.bn),
                        }),
                        CellParams::Mgruip(p) => CellParams::Mgruip(MgruipParams {
                            w_v: conv(&p.w_v),
                            w_z: conv(&p.w_z),
                            w_h: conv(&p.w_h),
                            b_z: conv(&p.b_z),
                            b_h: conv(&p.b_h),
                            bn: conv_bn(&p.bn),
                        }),
                    },
                    context: match &layer.context {
                        ContextParams::None => ContextParams::None,
                        ContextParams::Encoding(EncodingParams::Identity) => {
                            ContextParams::Encoding(EncodingParams::Identity)
                        }
                        ContextParams::Encoding(EncodingParams::Scale { m }) => {
                            ContextParams::Encoding(EncodingParams::Scale { m: conv(m) })
                        }
                        ContextParams::Encoding(EncodingParams::Affine { w_f }) => {
                            ContextParams::Encoding(EncodingParams::Affine { w_f: conv(w_f) })
                        }
                        ContextParams::Convolution { w_p } => {
                            ContextParams::Convolution { w_p: conv(w_p) }
                        }
                    },
                })
                .collect(),
            head: HeadParams {
                bottleneck_w: conv(&self.head.bottleneck_w),
                softmax_w: conv(&self.head.softmax_w),
                softmax_b: conv(&self.head.softmax_b),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// gradients
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LayerGrads<R> {
    pub cell: CellGrads<R>,
    pub context: ContextGrads<R>,
}

#[derive(Clone, Debug)]
pub struct HeadGrads<R> {
    pub bottleneck_w: TensorBuffer<R>,
    pub softmax_w: TensorBuffer<R>,
    pub softmax_b: TensorBuffer<R>,
}

#[derive(Clone, Debug)]
pub struct NetworkGrads<R> {
    pub layers: Vec<LayerGrads<R>>,
    pub head: HeadGrads<R>,
}

impl<R: Real> NetworkGrads<R> {
    pub fn zeros_like(params: &NetworkParams<R>) -> Self {
        NetworkGrads {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    cell: CellGrads::zeros_like(&l.cell),
                    context: ContextGrads::zeros_like(&l.context),
                })
                .collect(),
            head: HeadGrads {
                bottleneck_w: TensorBuffer::zeros(params.head.bottleneck_w.rows(), params.head.bottleneck_w.cols()),
                softmax_w: TensorBuffer::zeros(params.head.softmax_w.rows(), params.head.softmax_w.cols()),
                softmax_b: TensorBuffer::zeros(1, params.head.softmax_b.cols()),
            },
        }
    }

    /// Same order as `NetworkParams::flatten`.
    pub fn flatten(&self) -> Vec<R> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match &layer.cell {
                CellGrads::Gru(g) => {
                    for t in [&g.w_z, &g.w_r, &g.w_h, &g.u_z, &g.u_r, &g.u_h, &g.b_z, &g.b_r, &g.b_h] {
                        out.extend_from_slice(t.data());
                    }
                }
                CellGrads::Mgru(g) => {
                    for t in [&g.w_z, &g.w_h, &g.u_z, &g.u_h, &g.b_z, &g.b_h, &g.gamma, &g.beta] {
                        out.extend_from_slice(t.data());
                    }
                }
                CellGrads::Mgruip(g) => {
                    for t in [&g.w_v, &g.w_z, &g.w_h, &g.b_z, &g.b_h, &g.gamma, &g.beta] {
                        out.extend_from_slice(t.data());
                    }
                }
            }
            match &layer.context {
                ContextGrads::None => {}
                ContextGrads::Scale { m } => out.extend_from_slice(m.data()),
                ContextGrads::Affine { w_f } => out.extend_from_slice(w_f.data()),
                ContextGrads::Convolution { w_p } => out.extend_from_slice(w_p.data()),
            }
        }
        for t in [&self.head.bottleneck_w, &self.head.softmax_w, &self.head.softmax_b] {
            out.extend_from_slice(t.data());
        }
        out
    }
}

// ---------------------------------------------------------------------------
// forward / backward over a sequence
// ---------------------------------------------------------------------------

pub struct ForwardOutput<R> {
    /// One (batch x output_dim) buffer per output frame.
    pub logits: Vec<TensorBuffer<R>>,
    /// Base-frame index of each output.
    pub output_frames: Vec<usize>,
}

pub struct LayerTape<R> {
    pub frames: Vec<usize>,
    steps: Vec<StepCache<R>>,
    ctx: Vec<Option<ContextCache<R>>>,
    pub bn_updates: Vec<BnStatsUpdate<R>>,
}

struct HeadTape<R> {
    h_in: Vec<TensorBuffer<R>>,
    bneck: Vec<TensorBuffer<R>>,
}

pub struct ForwardTape<R> {
    pub layers: Vec<LayerTape<R>>,
    head: HeadTape<R>,
    t_len: usize,
    batch: usize,
}

/// Zero-padded splice window [t - splice_past .. t + splice_future].
fn splice_frames<R: Real>(topology: &NetworkTopology, frames: &[TensorBuffer<R>]) -> Vec<TensorBuffer<R>> {
    let t_len = frames.len();
    let batch = frames[0].rows();
    let window = topology.splice_past + 1 + topology.splice_future;
    let d = topology.input_dim;
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut buf = TensorBuffer::zeros(batch, window * d);
        for w in 0..window {
            let src = t as isize - topology.splice_past as isize + w as isize;
            if src < 0 || src as usize >= t_len {
                continue;
            }
            let src = &frames[src as usize];
            for r in 0..batch {
                let dst_row = r * window * d + w * d;
                buf.data_mut()[dst_row..dst_row + d].copy_from_slice(src.row(r));
            }
        }
        out.push(buf);
    }
    out
}

/// Runs the full stack over a batch of sequences in lockstep.
/// `frames[t]` is the (batch x input_dim) slice at base frame t.
pub fn forward_batch<R: Real>(
    topology: &NetworkTopology,
    params: &NetworkParams<R>,
    frames: &[TensorBuffer<R>],
    bn_mode: BnMode,
) -> Result<(ForwardOutput<R>, ForwardTape<R>)> {
    topology.validate()?;
    let t_len = frames.len();
    if t_len == 0 {
        return Err(Error::Validation("empty sequence".into()));
    }
    let batch = frames[0].rows();
    for f in frames {
        if f.cols() != topology.input_dim || f.rows() != batch {
            return Err(Error::dimension(
                "forward_sequence",
                format!(
                    "frame is {}x{}, expected {}x{}",
                    f.rows(),
                    f.cols(),
                    batch,
                    topology.input_dim
                ),
            ));
        }
    }
    let mut lower_h = splice_frames(topology, frames);
    let mut lower_v: Option<Vec<TensorBuffer<R>>> = None;
    let mut tapes = Vec::with_capacity(topology.layers.len());
    for (l, spec) in topology.layers.iter().enumerate() {
        let lp = &params.layers[l];
        let lower_period = topology.lower_period(l);
        let my_frames: Vec<usize> = (0..t_len).step_by(spec.frame_period).collect();
        let mut h = TensorBuffer::zeros(batch, spec.n_c);
        let mut steps = Vec::with_capacity(my_frames.len());
        let mut ctxs = Vec::with_capacity(my_frames.len());
        let mut bn_updates = Vec::new();
        let mut out_h = Vec::with_capacity(my_frames.len());
        let mut out_v = Vec::with_capacity(my_frames.len());
        for &t in &my_frames {
            let x_t = &lower_h[t / lower_period];
            let (ctx_term, ctx_cache) = match spec.context.kind {
                ContextKind::None => (None, None),
                ContextKind::Encoding => {
                    let vs = lower_v
                        .as_ref()
                        .ok_or_else(|| Error::Contract("encoding context without a projection layer below".into()))?;
                    let tap_dim = vs[0].cols();
                    let taps = collect_taps(&spec.context, t, t_len, lower_period, vs, batch, tap_dim);
                    let enc = match &lp.context {
                        ContextParams::Encoding(e) => e,
                        _ => return Err(Error::Contract("layer context params do not match spec".into())),
                    };
                    let (term, cache) = temporal_encode(&spec.context, enc, &taps)?;
                    (Some(term), Some(cache))
                }
                ContextKind::Convolution => {
                    let tap_dim = lower_h[0].cols();
                    let taps = collect_taps(&spec.context, t, t_len, lower_period, &lower_h, batch, tap_dim);
                    let w_p = match &lp.context {
                        ContextParams::Convolution { w_p } => w_p,
                        _ => return Err(Error::Contract("layer context params do not match spec".into())),
                    };
                    let (term, cache) = temporal_convolve(&spec.context, w_p, &taps)?;
                    (Some(term), Some(cache))
                }
            };
            let out = match &lp.cell {
                CellParams::Gru(p) => {
                    debug_assert!(ctx_term.is_none());
                    gru_step(p, x_t, &h)?
                }
                CellParams::Mgru(p) => {
                    debug_assert!(ctx_term.is_none());
                    mgru_step(p, x_t, &h, bn_mode)?
                }
                CellParams::Mgruip(p) => mgruip_step(p, x_t, &h, ctx_term.as_ref(), bn_mode)?,
            };
            h = out.h;
            out_h.push(h.clone());
            if let Some(v) = out.v {
                out_v.push(v);
            }
            steps.push(out.cache);
            ctxs.push(ctx_cache);
            if let Some(u) = out.bn_update {
                bn_updates.push(u);
            }
        }
        tapes.push(LayerTape {
            frames: my_frames,
            steps,
            ctx: ctxs,
            bn_updates,
        });
        lower_h = out_h;
        lower_v = if out_v.is_empty() { None } else { Some(out_v) };
    }
    // output head at the last layer's frame rate
    let out_frames = tapes.last().unwrap().frames.clone();
    let mut logits = Vec::with_capacity(out_frames.len());
    let mut h_in = Vec::with_capacity(out_frames.len());
    let mut bnecks = Vec::with_capacity(out_frames.len());
    for hb in &lower_h {
        let bneck = hb.matmul_nt(&params.head.bottleneck_w)?;
        let lg = bneck
            .matmul_nt(&params.head.softmax_w)?
            .add_row_broadcast(&params.head.softmax_b)?;
        logits.push(lg);
        h_in.push(hb.clone());
        bnecks.push(bneck);
    }
    Ok((
        ForwardOutput {
            logits,
            output_frames: out_frames,
        },
        ForwardTape {
            layers: tapes,
            head: HeadTape { h_in, bneck: bnecks },
            t_len,
            batch,
        },
    ))
}

/// Future taps v/h_{t + s*i} for i = 1..K; frames past the sequence end are
/// zero vectors.
fn collect_taps<R: Real>(
    spec: &ContextSpec,
    t: usize,
    t_len: usize,
    lower_period: usize,
    stream: &[TensorBuffer<R>],
    batch: usize,
    tap_dim: usize,
) -> Vec<TensorBuffer<R>> {
    let mut taps = Vec::with_capacity(spec.order);
    for i in 1..=spec.order {
        let f = t + spec.stride * i;
        if f < t_len {
            taps.push(stream[f / lower_period].clone());
        } else {
            taps.push(TensorBuffer::zeros(batch, tap_dim));
        }
    }
    taps
}

/// Single-sequence convenience wrapper: rows of `frames` are time steps.
pub fn forward_sequence<R: Real>(
    topology: &NetworkTopology,
    params: &NetworkParams<R>,
    frames: &TensorBuffer<R>,
    bn_mode: BnMode,
) -> Result<(ForwardOutput<R>, ForwardTape<R>)> {
    let per_frame: Vec<TensorBuffer<R>> = (0..frames.rows())
        .map(|t| TensorBuffer::from_vec(1, frames.cols(), frames.row(t).to_vec()).unwrap())
        .collect();
    forward_batch(topology, params, &per_frame, bn_mode)
}

/// Full-sequence reverse mode, including the cross-time context edges.
/// Returns parameter gradients and the gradients wrt the raw input frames.
pub fn backward_sequence<R: Real>(
    topology: &NetworkTopology,
    params: &NetworkParams<R>,
    tape: &ForwardTape<R>,
    grad_logits: &[TensorBuffer<R>],
) -> Result<(NetworkGrads<R>, Vec<TensorBuffer<R>>)> {
    let n_layers = topology.layers.len();
    let t_len = tape.t_len;
    let batch = tape.batch;
    if grad_logits.len() != tape.head.h_in.len() {
        return Err(Error::Contract(format!(
            "{} logit gradients for {} output frames",
            grad_logits.len(),
            tape.head.h_in.len()
        )));
    }
    let mut grads = NetworkGrads::zeros_like(params);
    // pending gradients wrt each layer's h (and v for mgruip) outputs
    let mut gh: Vec<Vec<TensorBuffer<R>>> = Vec::with_capacity(n_layers);
    let mut gv: Vec<Option<Vec<TensorBuffer<R>>>> = Vec::with_capacity(n_layers);
    for (l, spec) in topology.layers.iter().enumerate() {
        let slots = tape.layers[l].frames.len();
        gh.push(vec![TensorBuffer::zeros(batch, spec.n_c); slots]);
        gv.push(match spec.cell {
            CellKind::Mgruip => Some(vec![TensorBuffer::zeros(batch, spec.n_p.unwrap()); slots]),
            _ => None,
        });
    }
    let mut d_spliced: Vec<TensorBuffer<R>> = vec![TensorBuffer::zeros(batch, topology.spliced_dim()); t_len];

    // head
    for (j, dlg) in grad_logits.iter().enumerate() {
        let bneck = &tape.head.bneck[j];
        let h_in = &tape.head.h_in[j];
        grads.head.softmax_w.add_assign(&dlg.matmul_tn(bneck)?)?;
        grads.head.softmax_b.add_assign(&dlg.sum_rows())?;
        let dbneck = dlg.matmul(&params.head.softmax_w)?;
        grads.head.bottleneck_w.add_assign(&dbneck.matmul_tn(h_in)?)?;
        gh[n_layers - 1][j].add_assign(&dbneck.matmul(&params.head.bottleneck_w)?)?;
    }

    for l in (0..n_layers).rev() {
        let spec = &topology.layers[l];
        let lp = &params.layers[l];
        let lt = &tape.layers[l];
        let lower_period = topology.lower_period(l);
        let mut carry = TensorBuffer::zeros(batch, spec.n_c);
        for j in (0..lt.frames.len()).rev() {
            let t = lt.frames[j];
            let mut upstream = std::mem::replace(&mut gh[l][j], TensorBuffer::zeros(0, 0));
            upstream.add_assign(&carry)?;
            let grad_v_ext = gv[l].as_ref().map(|v| &v[j]);
            let layer_grads = &mut grads.layers[l];
            let back = cell_backward(&lp.cell, &lt.steps[j], &upstream, grad_v_ext, &mut layer_grads.cell)?;
            carry = back.grad_h_prev;
            if let Some(gctx) = back.grad_context {
                let cache = lt.ctx[j]
                    .as_ref()
                    .ok_or_else(|| Error::Contract("context gradient without context cache".into()))?;
                let per_tap = context_backward(&lp.context, cache, &gctx, &mut layer_grads.context)?;
                for (i, g) in per_tap.into_iter().enumerate() {
                    let f = t + spec.context.stride * (i + 1);
                    if f >= t_len {
                        continue;
                    }
                    let slot = f / lower_period;
                    match spec.context.kind {
                        ContextKind::Encoding => {
                            gv[l - 1]
                                .as_mut()
                                .expect("validated: encoding sits above an mgruip layer")[slot]
                                .add_assign(&g)?;
                        }
                        ContextKind::Convolution => {
                            if l == 0 {
                                d_spliced[f].add_assign(&g)?;
                            } else {
                                gh[l - 1][slot].add_assign(&g)?;
                            }
                        }
                        ContextKind::None => unreachable!(),
                    }
                }
            }
            if l == 0 {
                d_spliced[t].add_assign(&back.grad_x)?;
            } else {
                gh[l - 1][t / lower_period].add_assign(&back.grad_x)?;
            }
        }
    }

    // splice backward: scatter window blocks onto raw frames
    let window = topology.splice_past + 1 + topology.splice_future;
    let d = topology.input_dim;
    let mut d_input = vec![TensorBuffer::zeros(batch, d); t_len];
    for (t, ds) in d_spliced.iter().enumerate() {
        for w in 0..window {
            let src = t as isize - topology.splice_past as isize + w as isize;
            if src < 0 || src as usize >= t_len {
                continue;
            }
            let dst = &mut d_input[src as usize];
            for r in 0..batch {
                for c in 0..d {
                    let v = dst.get(r, c) + ds.get(r, w * d + c);
                    dst.set(r, c, v);
                }
            }
        }
    }
    Ok((grads, d_input))
}
