//! Future-context modules attachable to mGRUIP layers.
//!
//! Temporal encoding sums (optionally transformed) projection vectors of the
//! lower layer at future frames:
//!
//!   v_t^l = W_v [x_t ; h_{t-1}] + sum_{i=1..K} f(v_{t+s*i}^{l-1})
//!
//! Temporal convolution splices the lower layer's output states at future
//! frames and projects them with a weight matrix tied across time:
//!
//!   v_t^l = W_v [x_t ; h_{t-1}] + W_p [h_{t+s*1}^{l-1} ; ... ; h_{t+s*K}^{l-1}]
//!
//! Both are future-only; history is left to the recurrent connections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, TensorBuffer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    None,
    Encoding,
    Convolution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingTransform {
    Identity,
    Scale,
    Affine,
}

/// Declarative description of one context module: kind, order K, step
/// stride s (in base frames), and the encoding transform form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    pub kind: ContextKind,
    #[serde(default)]
    pub order: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_transform")]
    pub transform: EncodingTransform,
}

fn default_stride() -> usize {
    1
}

fn default_transform() -> EncodingTransform {
    EncodingTransform::Identity
}

impl ContextSpec {
    pub fn none() -> Self {
        ContextSpec {
            kind: ContextKind::None,
            order: 0,
            stride: 1,
            transform: EncodingTransform::Identity,
        }
    }

    pub fn encoding(order: usize, stride: usize, transform: EncodingTransform) -> Self {
        ContextSpec {
            kind: ContextKind::Encoding,
            order,
            stride,
            transform,
        }
    }

    pub fn convolution(order: usize, stride: usize) -> Self {
        ContextSpec {
            kind: ContextKind::Convolution,
            order,
            stride,
            transform: EncodingTransform::Identity,
        }
    }

    pub fn is_none(&self) -> bool {
        self.kind == ContextKind::None
    }

    /// Future reach in base frames: K * s.
    pub fn lookahead_frames(&self) -> usize {
        match self.kind {
            ContextKind::None => 0,
            _ => self.order * self.stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ContextKind::None => {
                if self.order != 0 {
                    return Err(Error::Validation(format!(
                        "context kind none requires order 0, got {}",
                        self.order
                    )));
                }
            }
            ContextKind::Encoding | ContextKind::Convolution => {
                if self.order == 0 {
                    return Err(Error::Validation("context order must be >= 1".into()));
                }
                if self.stride == 0 {
                    return Err(Error::Validation("context stride must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// Learned parameters of an encoding transform.
#[derive(Clone, Debug, PartialEq)]
pub enum EncodingParams<R> {
    /// f(x) = x; brings no additional parameters.
    Identity,
    /// f(x) = m * x, with the scalar m stored as a 1x1 buffer
    Scale { m: TensorBuffer<R> },
    /// f(x) = W_f x, W_f is (n_p x n_p)
    Affine { w_f: TensorBuffer<R> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ContextParams<R> {
    None,
    Encoding(EncodingParams<R>),
    /// W_p is (n_p x (K * n_c_lower)), tied across time steps.
    Convolution { w_p: TensorBuffer<R> },
}

impl<R: Real> ContextParams<R> {
    pub fn trainable_count(&self) -> u64 {
        match self {
            ContextParams::None | ContextParams::Encoding(EncodingParams::Identity) => 0,
            ContextParams::Encoding(EncodingParams::Scale { .. }) => 1,
            ContextParams::Encoding(EncodingParams::Affine { w_f }) => w_f.data().len() as u64,
            ContextParams::Convolution { w_p } => w_p.data().len() as u64,
        }
    }
}

pub struct EncodeCache<R> {
    v_future: Vec<TensorBuffer<R>>,
}

pub struct ConvCache<R> {
    spliced: TensorBuffer<R>,
    parts: usize,
    part_cols: usize,
}

pub enum ContextCache<R> {
    Encode(EncodeCache<R>),
    Convolve(ConvCache<R>),
}

/// Gradients collected for one context module.
#[derive(Clone, Debug)]
pub enum ContextGrads<R> {
    None,
    Scale { m: TensorBuffer<R> },
    Affine { w_f: TensorBuffer<R> },
    Convolution { w_p: TensorBuffer<R> },
}

impl<R: Real> ContextGrads<R> {
    pub fn zeros_like(p: &ContextParams<R>) -> Self {
        match p {
            ContextParams::None | ContextParams::Encoding(EncodingParams::Identity) => ContextGrads::None,
            ContextParams::Encoding(EncodingParams::Scale { .. }) => ContextGrads::Scale {
                m: TensorBuffer::zeros(1, 1),
            },
            ContextParams::Encoding(EncodingParams::Affine { w_f }) => ContextGrads::Affine {
                w_f: TensorBuffer::zeros(w_f.rows(), w_f.cols()),
            },
            ContextParams::Convolution { w_p } => ContextGrads::Convolution {
                w_p: TensorBuffer::zeros(w_p.rows(), w_p.cols()),
            },
        }
    }
}

/// Sum of transformed future projection vectors, one per tap i = 1..K.
/// `v_future[i-1]` holds v^{l-1}_{t+s*i}; taps past the sequence end are
/// zero vectors supplied by the caller.
pub fn temporal_encode<R: Real>(
    spec: &ContextSpec,
    params: &EncodingParams<R>,
    v_future: &[TensorBuffer<R>],
) -> Result<(TensorBuffer<R>, ContextCache<R>)> {
    if spec.kind != ContextKind::Encoding {
        return Err(Error::Contract("temporal_encode called with non-encoding spec".into()));
    }
    if v_future.len() != spec.order {
        return Err(Error::dimension(
            "temporal_encode",
            format!("expected {} future vectors, got {}", spec.order, v_future.len()),
        ));
    }
    let first = &v_future[0];
    let mut out = TensorBuffer::zeros(first.rows(), first.cols());
    for v in v_future {
        if v.rows() != first.rows() || v.cols() != first.cols() {
            return Err(Error::dimension(
                "temporal_encode",
                format!("ragged future vectors: {}x{} vs {}x{}", v.rows(), v.cols(), first.rows(), first.cols()),
            ));
        }
        let transformed = match params {
            EncodingParams::Identity => v.clone(),
            EncodingParams::Scale { m } => v.scale(m.get(0, 0)),
            EncodingParams::Affine { w_f } => v.matmul_nt(w_f)?,
        };
        out.add_assign(&transformed)?;
    }
    Ok((
        out,
        ContextCache::Encode(EncodeCache {
            v_future: v_future.to_vec(),
        }),
    ))
}

/// Splice-then-project: W_p [h_future[0] ; ... ; h_future[K-1]].
pub fn temporal_convolve<R: Real>(
    spec: &ContextSpec,
    w_p: &TensorBuffer<R>,
    h_future: &[TensorBuffer<R>],
) -> Result<(TensorBuffer<R>, ContextCache<R>)> {
    if spec.kind != ContextKind::Convolution {
        return Err(Error::Contract("temporal_convolve called with non-convolution spec".into()));
    }
    if h_future.len() != spec.order {
        return Err(Error::dimension(
            "temporal_convolve",
            format!("expected {} future vectors, got {}", spec.order, h_future.len()),
        ));
    }
    let mut spliced = h_future[0].clone();
    for h in &h_future[1..] {
        spliced = spliced.concat_cols(h)?;
    }
    if spliced.cols() != w_p.cols() {
        return Err(Error::dimension(
            "temporal_convolve",
            format!("spliced width {} vs W_p width {}", spliced.cols(), w_p.cols()),
        ));
    }
    let out = spliced.matmul_nt(w_p)?;
    Ok((
        out,
        ContextCache::Convolve(ConvCache {
            spliced,
            parts: h_future.len(),
            part_cols: h_future[0].cols(),
        }),
    ))
}

/// Reverse-mode of either context module. Returns the gradients wrt each
/// future input vector, in tap order; these route to FUTURE frames of the
/// lower layer. Parameter gradients accumulate into `grads`.
pub fn context_backward<R: Real>(
    params: &ContextParams<R>,
    cache: &ContextCache<R>,
    grad_out: &TensorBuffer<R>,
    grads: &mut ContextGrads<R>,
) -> Result<Vec<TensorBuffer<R>>> {
    match (params, cache) {
        (ContextParams::Encoding(enc), ContextCache::Encode(c)) => {
            let mut per_tap = Vec::with_capacity(c.v_future.len());
            for v in &c.v_future {
                match (enc, &mut *grads) {
                    (EncodingParams::Identity, ContextGrads::None) => {
                        per_tap.push(grad_out.clone());
                    }
                    (EncodingParams::Scale { m }, ContextGrads::Scale { m: gm }) => {
                        let dot = grad_out
                            .hadamard(v)?
                            .data()
                            .iter()
                            .fold(R::zero(), |acc, x| acc + *x);
                        gm.data_mut()[0] += dot;
                        per_tap.push(grad_out.scale(m.get(0, 0)));
                    }
                    (EncodingParams::Affine { w_f }, ContextGrads::Affine { w_f: gw }) => {
                        gw.add_assign(&grad_out.matmul_tn(v)?)?;
                        per_tap.push(grad_out.matmul(w_f)?);
                    }
                    _ => {
                        return Err(Error::Contract("encoding params and grads variants do not match".into()));
                    }
                }
            }
            Ok(per_tap)
        }
        (ContextParams::Convolution { w_p }, ContextCache::Convolve(c)) => {
            match grads {
                ContextGrads::Convolution { w_p: gw } => {
                    gw.add_assign(&grad_out.matmul_tn(&c.spliced)?)?;
                }
                _ => return Err(Error::Contract("convolution grads variant mismatch".into())),
            }
            let dspliced = grad_out.matmul(w_p)?;
            let mut per_tap = Vec::with_capacity(c.parts);
            let mut rest = dspliced;
            for _ in 0..c.parts {
                let (head, tail) = rest.split_cols(c.part_cols)?;
                per_tap.push(head);
                rest = tail;
            }
            Ok(per_tap)
        }
        _ => Err(Error::Contract("context params and cache variants do not match".into())),
    }
}
