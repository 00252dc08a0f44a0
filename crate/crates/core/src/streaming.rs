//! Frame-incremental inference: accepts one input frame at a time and emits
//! each output as soon as its lookahead window (splice + every context
//! module's future taps, through the mixed-frame-rate cascade) is satisfied.
//!
//! Buffers are sized at open time from the topology's lookahead accounting
//! and never grow with stream length.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::cells::{gru_step, mgru_step, mgruip_step, CellParams};
use crate::context::{temporal_convolve, temporal_encode, ContextKind, ContextParams};
use crate::error::{Error, Result};
use crate::network::{compute_latency, NetworkParams, NetworkTopology};
use crate::tensor::{BnMode, Real, TensorBuffer};

struct LayerStream<R> {
    /// Hidden state carried across this layer's own frames.
    h: TensorBuffer<R>,
    /// Next base-frame index this layer will compute.
    next_frame: usize,
    /// Highest computed base-frame index, -1 before the first.
    avail: isize,
    /// Recent outputs retained for the layer above: (frame, h) and, for
    /// mgruip, (frame, v).
    h_out: VecDeque<(usize, TensorBuffer<R>)>,
    v_out: VecDeque<(usize, TensorBuffer<R>)>,
    capacity_entries: usize,
    max_h_occupancy: usize,
    max_v_occupancy: usize,
}

/// Per-stream state: ring buffers of pending input frames plus per-layer
/// hidden states. One stream is single-threaded; distinct streams sharing
/// the same parameters are independent.
pub struct StreamState<R> {
    topology: Arc<NetworkTopology>,
    params: Arc<NetworkParams<R>>,
    raw: VecDeque<Vec<R>>,
    /// Base-frame index of `raw.front()`.
    raw_trim: usize,
    /// Total frames pushed.
    raw_count: usize,
    raw_capacity: usize,
    max_raw_occupancy: usize,
    layers: Vec<LayerStream<R>>,
    emitted: usize,
    flushed: bool,
    lookahead_frames: usize,
}

#[derive(Debug, Clone)]
pub struct BufferStats {
    pub raw_capacity: usize,
    pub raw_max_occupancy: usize,
    /// (capacity, max h occupancy, max v occupancy) per layer.
    pub layers: Vec<(usize, usize, usize)>,
}

pub fn stream_open<R: Real>(
    topology: Arc<NetworkTopology>,
    params: Arc<NetworkParams<R>>,
) -> Result<StreamState<R>> {
    let latency = compute_latency(&topology)?;
    let n_layers = topology.layers.len();
    let mut layers = Vec::with_capacity(n_layers);
    for (l, spec) in topology.layers.iter().enumerate() {
        // this layer's outputs are retained for the layer above, which reads
        // K*s base frames ahead of its own next frame; +2 covers the input
        // frame itself and the not-yet-trimmed newest entry
        let capacity_entries = if l + 1 < n_layers {
            latency.context_frames[l + 1] / spec.frame_period + 2
        } else {
            0 // the head consumes the top layer immediately
        };
        layers.push(LayerStream {
            h: TensorBuffer::zeros(1, spec.n_c),
            next_frame: 0,
            avail: -1,
            h_out: VecDeque::new(),
            v_out: VecDeque::new(),
            capacity_entries,
            max_h_occupancy: 0,
            max_v_occupancy: 0,
        });
    }
    let ctx0 = latency.context_frames[0];
    let raw_capacity = topology.splice_past + topology.splice_future + ctx0 + 2;
    Ok(StreamState {
        topology,
        params,
        raw: VecDeque::new(),
        raw_trim: 0,
        raw_count: 0,
        raw_capacity,
        max_raw_occupancy: 0,
        layers,
        emitted: 0,
        flushed: false,
        lookahead_frames: latency.lookahead_frames,
    })
}

impl<R: Real> StreamState<R> {
    pub fn lookahead_frames(&self) -> usize {
        self.lookahead_frames
    }

    pub fn pushed(&self) -> usize {
        self.raw_count
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn is_flushed(&self) -> bool {
        self.flushed
    }

    pub fn output_period(&self) -> usize {
        self.topology.output_period()
    }

    pub fn buffer_stats(&self) -> BufferStats {
        BufferStats {
            raw_capacity: self.raw_capacity,
            raw_max_occupancy: self.max_raw_occupancy,
            layers: self
                .layers
                .iter()
                .map(|l| (l.capacity_entries, l.max_h_occupancy, l.max_v_occupancy))
                .collect(),
        }
    }

    /// Appends one input frame and returns every output whose lookahead
    /// window is now complete (often none, at most a few during catch-up).
    pub fn push(&mut self, frame: &[R]) -> Result<Vec<Vec<R>>> {
        if self.flushed {
            return Err(Error::Contract("push after flush".into()));
        }
        if frame.len() != self.topology.input_dim {
            return Err(Error::dimension(
                "stream_push",
                format!("frame has {} values, expected {}", frame.len(), self.topology.input_dim),
            ));
        }
        self.raw.push_back(frame.to_vec());
        self.raw_count += 1;
        self.max_raw_occupancy = self.max_raw_occupancy.max(self.raw.len());
        debug_assert!(self.raw.len() <= self.raw_capacity, "raw ring outgrew its bound");
        self.cascade()
    }

    /// Ends the stream: zero-pads the missing future and emits every pending
    /// output. Total emissions over the stream's life equal the offline
    /// output count exactly.
    pub fn flush(&mut self) -> Result<Vec<Vec<R>>> {
        if self.flushed {
            return Err(Error::Contract("stream already flushed".into()));
        }
        self.flushed = true;
        self.cascade()
    }

    /// Spliced input vector for base frame t, zero-padded outside what has
    /// been pushed (and, after flush, past the end of the stream).
    fn spliced(&self, t: usize) -> TensorBuffer<R> {
        let tp = &self.topology;
        let d = tp.input_dim;
        let window = tp.splice_past + 1 + tp.splice_future;
        let mut buf = TensorBuffer::zeros(1, window * d);
        for w in 0..window {
            let src = t as isize - tp.splice_past as isize + w as isize;
            if src < 0 || src as usize >= self.raw_count {
                continue;
            }
            let src = src as usize;
            debug_assert!(src >= self.raw_trim, "splice read below the trimmed window");
            let row = &self.raw[src - self.raw_trim];
            buf.data_mut()[w * d..(w + 1) * d].copy_from_slice(row);
        }
        buf
    }

    fn fetch_lower_h(&self, l: usize, f: usize) -> Result<TensorBuffer<R>> {
        if l == 0 {
            return Ok(self.spliced(f));
        }
        self.layers[l - 1]
            .h_out
            .iter()
            .find(|(i, _)| *i == f)
            .map(|(_, h)| h.clone())
            .ok_or_else(|| Error::Contract(format!("layer {} frame {} not in the pending buffer", l, f)))
    }

    fn fetch_lower_v(&self, l: usize, f: usize) -> Result<TensorBuffer<R>> {
        self.layers[l - 1]
            .v_out
            .iter()
            .find(|(i, _)| *i == f)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Contract(format!("layer {} projection frame {} not buffered", l, f)))
    }

    /// Whether layer `l` can (and should) compute its next frame. Data-ready
    /// means the lower stream covers the farthest tap (capped at the stream
    /// end once flushed, where missing taps become zeros). Demand-capped
    /// means the layer never runs further ahead than the layer above can
    /// consume, which is what keeps every pending buffer at its fixed bound.
    fn layer_ready(&self, l: usize) -> bool {
        let tp = &self.topology;
        let spec = &tp.layers[l];
        let reach = spec.context.lookahead_frames();
        let t = self.layers[l].next_frame;
        if self.flushed && t >= self.raw_count {
            return false;
        }
        if l + 1 < tp.layers.len() {
            let above = &tp.layers[l + 1];
            let demand = self.layers[l + 1].next_frame + above.context.lookahead_frames();
            if t > demand {
                return false;
            }
        }
        let needed = if self.flushed {
            // taps past the end are zero-padded; the lower layer's last
            // frame is the most we can wait for
            let lower_period = tp.lower_period(l);
            let last_lower = ((self.raw_count - 1) / lower_period) * lower_period;
            (t + reach).min(last_lower).max(t) as isize
        } else {
            (t + reach) as isize
        };
        let lower_avail = if l == 0 {
            if self.flushed {
                return true; // raw input is complete, splicing zero-pads
            }
            self.raw_count as isize - 1 - tp.splice_future as isize
        } else {
            self.layers[l - 1].avail
        };
        lower_avail >= needed
    }

    /// Advances every layer as far as its lookahead window and the demand
    /// from above allow (all the way to the end once flushed), emitting head
    /// outputs for each new top-layer frame.
    fn cascade(&mut self) -> Result<Vec<Vec<R>>> {
        let tp = self.topology.clone();
        let params = self.params.clone();
        let n_layers = tp.layers.len();
        let mut outputs = Vec::new();
        let mut progressed = true;
        while progressed {
            progressed = false;
            for l in 0..n_layers {
                while self.layer_ready(l) {
                    progressed = true;
                    let t = self.layers[l].next_frame;
                    self.compute_frame(l, t, &tp, &params, &mut outputs)?;
                }
                self.trim_below(l);
            }
        }
        Ok(outputs)
    }

    /// One step of layer `l` at base frame `t`.
    fn compute_frame(
        &mut self,
        l: usize,
        t: usize,
        tp: &NetworkTopology,
        params: &NetworkParams<R>,
        outputs: &mut Vec<Vec<R>>,
    ) -> Result<()> {
        let n_layers = tp.layers.len();
        let spec = &tp.layers[l];
        {
                let x_t = self.fetch_lower_h(l, t)?;
                let ctx_term = match spec.context.kind {
                    ContextKind::None => None,
                    ContextKind::Encoding => {
                        let n_p = spec.n_p.unwrap();
                        let mut taps = Vec::with_capacity(spec.context.order);
                        for i in 1..=spec.context.order {
                            let f = t + spec.context.stride * i;
                            if f < self.raw_count {
                                taps.push(self.fetch_lower_v(l, f)?);
                            } else {
                                taps.push(TensorBuffer::zeros(1, n_p));
                            }
                        }
                        let enc = match &params.layers[l].context {
                            ContextParams::Encoding(e) => e,
                            _ => return Err(Error::Contract("context params mismatch".into())),
                        };
                        let (term, _) = temporal_encode(&spec.context, enc, &taps)?;
                        Some(term)
                    }
                    ContextKind::Convolution => {
                        let tap_dim = if l == 0 { tp.spliced_dim() } else { tp.layers[l - 1].n_c };
                        let mut taps = Vec::with_capacity(spec.context.order);
                        for i in 1..=spec.context.order {
                            let f = t + spec.context.stride * i;
                            if f < self.raw_count {
                                taps.push(self.fetch_lower_h(l, f)?);
                            } else {
                                taps.push(TensorBuffer::zeros(1, tap_dim));
                            }
                        }
                        let w_p = match &params.layers[l].context {
                            ContextParams::Convolution { w_p } => w_p,
                            _ => return Err(Error::Contract("context params mismatch".into())),
                        };
                        let (term, _) = temporal_convolve(&spec.context, w_p, &taps)?;
                        Some(term)
                    }
                };
                let h_prev = self.layers[l].h.clone();
                let out = match &params.layers[l].cell {
                    CellParams::Gru(p) => gru_step(p, &x_t, &h_prev)?,
                    CellParams::Mgru(p) => mgru_step(p, &x_t, &h_prev, BnMode::Infer)?,
                    CellParams::Mgruip(p) => mgruip_step(p, &x_t, &h_prev, ctx_term.as_ref(), BnMode::Infer)?,
                };
                let layer = &mut self.layers[l];
                layer.h = out.h.clone();
                layer.avail = t as isize;
                layer.next_frame = t + spec.frame_period;
                if l + 1 < n_layers {
                    layer.h_out.push_back((t, out.h.clone()));
                    layer.max_h_occupancy = layer.max_h_occupancy.max(layer.h_out.len());
                    if let Some(v) = out.v {
                        layer.v_out.push_back((t, v));
                        layer.max_v_occupancy = layer.max_v_occupancy.max(layer.v_out.len());
                    }
                    debug_assert!(
                        layer.h_out.len() <= layer.capacity_entries,
                        "layer {} pending buffer outgrew its bound",
                        l
                    );
                } else {
                    // head consumes the top layer immediately
                    let bneck = out.h.matmul_nt(&params.head.bottleneck_w)?;
                    let logits = bneck
                        .matmul_nt(&params.head.softmax_w)?
                        .add_row_broadcast(&params.head.softmax_b)?;
                    outputs.push(logits.row(0).to_vec());
                    self.emitted += 1;
                }
        }
        Ok(())
    }

    /// Drops what layer `l` no longer needs from the stream below it.
    fn trim_below(&mut self, l: usize) {
        if l == 0 {
            let keep_from = self.layers[0].next_frame.saturating_sub(self.topology.splice_past);
            while self.raw_trim < keep_from && !self.raw.is_empty() {
                self.raw.pop_front();
                self.raw_trim += 1;
            }
        } else {
            let keep_from = self.layers[l].next_frame;
            let lower = &mut self.layers[l - 1];
            while matches!(lower.h_out.front(), Some((i, _)) if *i < keep_from) {
                lower.h_out.pop_front();
            }
            while matches!(lower.v_out.front(), Some((i, _)) if *i < keep_from) {
                lower.v_out.pop_front();
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatencyProbe {
    /// (input frames consumed so far - 1) - nominal output frame, per output.
    pub per_output_delay_frames: Vec<usize>,
    pub max_delay_frames: usize,
    /// The analytical lookahead from `compute_latency`.
    pub analytic_lookahead_frames: usize,
    /// max delay converted to ms, output delay included.
    pub total_ms: f64,
}

/// Drives a probe stream and records, for each emitted output, how many
/// frames beyond its nominal index had been consumed when it appeared. For a
/// probe longer than the lookahead the maximum equals the analytical count.
pub fn measure_latency<R: Real>(
    topology: Arc<NetworkTopology>,
    params: Arc<NetworkParams<R>>,
    probe: &[Vec<R>],
) -> Result<LatencyProbe> {
    let latency = compute_latency(&topology)?;
    let period = topology.output_period();
    let mut stream = stream_open(topology.clone(), params)?;
    let mut delays = Vec::new();
    let mut next_output_idx = 0usize;
    for (n, frame) in probe.iter().enumerate() {
        for _ in stream.push(frame)? {
            let nominal = next_output_idx * period;
            delays.push(n - nominal);
            next_output_idx += 1;
        }
    }
    let last = probe.len().saturating_sub(1);
    for _ in stream.flush()? {
        let nominal = next_output_idx * period;
        delays.push(last.saturating_sub(nominal));
        next_output_idx += 1;
    }
    let max_delay = delays.iter().copied().max().unwrap_or(0);
    Ok(LatencyProbe {
        per_output_delay_frames: delays,
        max_delay_frames: max_delay,
        analytic_lookahead_frames: latency.lookahead_frames,
        total_ms: max_delay as f64 * latency.base_frame_period_ms + latency.output_delay_ms,
    })
}
