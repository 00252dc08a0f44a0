//! The three recurrent cell types as single-step forward functions with
//! matching hand-derived backward passes.
//!
//! GRU:
//!   z_t = sigma(W_z x_t + U_z h_{t-1} + b_z)
//!   r_t = sigma(W_r x_t + U_r h_{t-1} + b_r)
//!   h~_t = tanh(W_h x_t + U_h (h_{t-1} * r_t) + b_h)
//!   h_t = z_t * h_{t-1} + (1 - z_t) * h~_t
//!
//! mGRU drops the reset gate and swaps tanh for ReLU with batch norm:
//!   z_t = sigma(W_z x_t + U_z h_{t-1} + b_z)
//!   h~_t = ReLU(BN(W_h x_t + U_h h_{t-1}) + b_h)
//!   h_t = z_t * h_{t-1} + (1 - z_t) * h~_t
//!
//! mGRUIP inserts a linear input projection:
//!   v_t = W_v [x_t ; h_{t-1}]   (+ an optional additive context term)
//!   z_t = sigma(W_z v_t + b_z)
//!   h~_t = ReLU(BN(W_h v_t) + b_h)
//!   h_t = z_t * h_{t-1} + (1 - z_t) * h~_t
//!
//! All steps take a batch of vectors (one per row); a single sequence is a
//! 1-row batch. `b_h` is added after batch norm, not folded into BN's beta.

use crate::error::{Error, Result};
use crate::tensor::{bn_backward, bn_forward, BatchNormState, BnCache, BnMode, BnStatsUpdate, Real, TensorBuffer};

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<R> {
    pub w_z: TensorBuffer<R>,
    pub w_r: TensorBuffer<R>,
    pub w_h: TensorBuffer<R>,
    pub u_z: TensorBuffer<R>,
    pub u_r: TensorBuffer<R>,
    pub u_h: TensorBuffer<R>,
    pub b_z: TensorBuffer<R>,
    pub b_r: TensorBuffer<R>,
    pub b_h: TensorBuffer<R>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MgruParams<R> {
    pub w_z: TensorBuffer<R>,
    pub w_h: TensorBuffer<R>,
    pub u_z: TensorBuffer<R>,
    pub u_h: TensorBuffer<R>,
    pub b_z: TensorBuffer<R>,
    pub b_h: TensorBuffer<R>,
    pub bn: BatchNormState<R>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MgruipParams<R> {
    /// (n_p x (n_i + n_c)) projection of the stacked [x_t ; h_{t-1}].
    pub w_v: TensorBuffer<R>,
    pub w_z: TensorBuffer<R>,
    pub w_h: TensorBuffer<R>,
    pub b_z: TensorBuffer<R>,
    pub b_h: TensorBuffer<R>,
    pub bn: BatchNormState<R>,
}

impl<R: Real> GruParams<R> {
    pub fn zeros(n_i: usize, n_c: usize) -> Self {
        GruParams {
            w_z: TensorBuffer::zeros(n_c, n_i),
            w_r: TensorBuffer::zeros(n_c, n_i),
            w_h: TensorBuffer::zeros(n_c, n_i),
            u_z: TensorBuffer::zeros(n_c, n_c),
            u_r: TensorBuffer::zeros(n_c, n_c),
            u_h: TensorBuffer::zeros(n_c, n_c),
            b_z: TensorBuffer::zeros(1, n_c),
            b_r: TensorBuffer::zeros(1, n_c),
            b_h: TensorBuffer::zeros(1, n_c),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn units(&self) -> usize {
        self.w_z.rows()
    }
}

impl<R: Real> MgruParams<R> {
    pub fn zeros(n_i: usize, n_c: usize) -> Self {
        MgruParams {
            w_z: TensorBuffer::zeros(n_c, n_i),
            w_h: TensorBuffer::zeros(n_c, n_i),
            u_z: TensorBuffer::zeros(n_c, n_c),
            u_h: TensorBuffer::zeros(n_c, n_c),
            b_z: TensorBuffer::zeros(1, n_c),
            b_h: TensorBuffer::zeros(1, n_c),
            bn: BatchNormState::identity(n_c),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn units(&self) -> usize {
        self.w_z.rows()
    }
}

impl<R: Real> MgruipParams<R> {
    pub fn zeros(n_i: usize, n_c: usize, n_p: usize) -> Self {
        MgruipParams {
            w_v: TensorBuffer::zeros(n_p, n_i + n_c),
            w_z: TensorBuffer::zeros(n_c, n_p),
            w_h: TensorBuffer::zeros(n_c, n_p),
            b_z: TensorBuffer::zeros(1, n_c),
            b_h: TensorBuffer::zeros(1, n_c),
            bn: BatchNormState::identity(n_c),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_v.cols() - self.units()
    }

    pub fn units(&self) -> usize {
        self.w_z.rows()
    }

    pub fn projection_dim(&self) -> usize {
        self.w_v.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellParams<R> {
    Gru(GruParams<R>),
    Mgru(MgruParams<R>),
    Mgruip(MgruipParams<R>),
}

impl<R: Real> CellParams<R> {
    pub fn units(&self) -> usize {
        match self {
            CellParams::Gru(p) => p.units(),
            CellParams::Mgru(p) => p.units(),
            CellParams::Mgruip(p) => p.units(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            CellParams::Gru(p) => p.input_dim(),
            CellParams::Mgru(p) => p.input_dim(),
            CellParams::Mgruip(p) => p.input_dim(),
        }
    }
}

pub struct GruCache<R> {
    x: TensorBuffer<R>,
    h_prev: TensorBuffer<R>,
    z: TensorBuffer<R>,
    r: TensorBuffer<R>,
    h_tilde: TensorBuffer<R>,
}

pub struct MgruCache<R> {
    x: TensorBuffer<R>,
    h_prev: TensorBuffer<R>,
    z: TensorBuffer<R>,
    h_tilde: TensorBuffer<R>,
    bn: BnCache<R>,
}

pub struct MgruipCache<R> {
    x: TensorBuffer<R>,
    h_prev: TensorBuffer<R>,
    v: TensorBuffer<R>,
    z: TensorBuffer<R>,
    h_tilde: TensorBuffer<R>,
    bn: BnCache<R>,
    had_context: bool,
}

/// Per-step record retained for the backward pass.
pub enum StepCache<R> {
    Gru(GruCache<R>),
    Mgru(MgruCache<R>),
    Mgruip(MgruipCache<R>),
}

/// Output of one forward step.
pub struct StepOutput<R> {
    pub h: TensorBuffer<R>,
    /// Projection vector, mGRUIP only; exposed because higher layers consume
    /// it at future frames.
    pub v: Option<TensorBuffer<R>>,
    pub cache: StepCache<R>,
    /// Pending running-stat fold from a train-mode batch norm.
    pub bn_update: Option<BnStatsUpdate<R>>,
}

fn check_step_shapes<R: Real>(
    op: &'static str,
    x: &TensorBuffer<R>,
    h_prev: &TensorBuffer<R>,
    n_i: usize,
    n_c: usize,
) -> Result<()> {
    if x.cols() != n_i {
        return Err(Error::dimension(op, format!("input has {} cols, cell expects {}", x.cols(), n_i)));
    }
    if h_prev.cols() != n_c {
        return Err(Error::dimension(op, format!("state has {} cols, cell expects {}", h_prev.cols(), n_c)));
    }
    if x.rows() != h_prev.rows() {
        return Err(Error::dimension(op, format!("batch {} vs state batch {}", x.rows(), h_prev.rows())));
    }
    Ok(())
}

/// h_t = z*h_prev + (1-z)*h_tilde
fn gate_interpolate<R: Real>(
    z: &TensorBuffer<R>,
    h_prev: &TensorBuffer<R>,
    h_tilde: &TensorBuffer<R>,
) -> TensorBuffer<R> {
    let mut out = TensorBuffer::zeros(z.rows(), z.cols());
    for i in 0..z.data().len() {
        let zi = z.data()[i];
        out.data_mut()[i] = zi * h_prev.data()[i] + (R::one() - zi) * h_tilde.data()[i];
    }
    out
}

pub fn gru_step<R: Real>(
    p: &GruParams<R>,
    x: &TensorBuffer<R>,
    h_prev: &TensorBuffer<R>,
) -> Result<StepOutput<R>> {
    check_step_shapes("gru_step", x, h_prev, p.input_dim(), p.units())?;
    let z = x
        .matmul_nt(&p.w_z)?
        .add(&h_prev.matmul_nt(&p.u_z)?)?
        .add_row_broadcast(&p.b_z)?
        .sigmoid();
    let r = x
        .matmul_nt(&p.w_r)?
        .add(&h_prev.matmul_nt(&p.u_r)?)?
        .add_row_broadcast(&p.b_r)?
        .sigmoid();
    let gated = h_prev.hadamard(&r)?;
    let h_tilde = x
        .matmul_nt(&p.w_h)?
        .add(&gated.matmul_nt(&p.u_h)?)?
        .add_row_broadcast(&p.b_h)?
        .tanh_act();
    let h = gate_interpolate(&z, h_prev, &h_tilde);
    Ok(StepOutput {
        h,
        v: None,
        cache: StepCache::Gru(GruCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            z,
            r,
            h_tilde,
        }),
        bn_update: None,
    })
}

pub fn mgru_step<R: Real>(
    p: &MgruParams<R>,
    x: &TensorBuffer<R>,
    h_prev: &TensorBuffer<R>,
    bn_mode: BnMode,
) -> Result<StepOutput<R>> {
    check_step_shapes("mgru_step", x, h_prev, p.input_dim(), p.units())?;
    let z = x
        .matmul_nt(&p.w_z)?
        .add(&h_prev.matmul_nt(&p.u_z)?)?
        .add_row_broadcast(&p.b_z)?
        .sigmoid();
    let pre = x.matmul_nt(&p.w_h)?.add(&h_prev.matmul_nt(&p.u_h)?)?;
    let (bn_out, bn_cache, bn_update) = bn_forward(&pre, &p.bn, bn_mode)?;
    let h_tilde = bn_out.add_row_broadcast(&p.b_h)?.relu();
    let h = gate_interpolate(&z, h_prev, &h_tilde);
    Ok(StepOutput {
        h,
        v: None,
        cache: StepCache::Mgru(MgruCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            z,
            h_tilde,
            bn: bn_cache,
        }),
        bn_update,
    })
}

pub fn mgruip_step<R: Real>(
    p: &MgruipParams<R>,
    x: &TensorBuffer<R>,
    h_prev: &TensorBuffer<R>,
    context_term: Option<&TensorBuffer<R>>,
    bn_mode: BnMode,
) -> Result<StepOutput<R>> {
    check_step_shapes("mgruip_step", x, h_prev, p.input_dim(), p.units())?;
    let stacked = x.concat_cols(h_prev)?;
    let mut v = stacked.matmul_nt(&p.w_v)?;
    if let Some(ctx) = context_term {
        if ctx.rows() != v.rows() || ctx.cols() != v.cols() {
            return Err(Error::dimension(
                "mgruip_step",
                format!(
                    "context term is {}x{}, projection is {}x{}",
                    ctx.rows(),
                    ctx.cols(),
                    v.rows(),
                    v.cols()
                ),
            ));
        }
        v.add_assign(ctx)?;
    }
    let z = v.matmul_nt(&p.w_z)?.add_row_broadcast(&p.b_z)?.sigmoid();
    let pre = v.matmul_nt(&p.w_h)?;
    let (bn_out, bn_cache, bn_update) = bn_forward(&pre, &p.bn, bn_mode)?;
    let h_tilde = bn_out.add_row_broadcast(&p.b_h)?.relu();
    let h = gate_interpolate(&z, h_prev, &h_tilde);
    Ok(StepOutput {
        h: h.clone(),
        v: Some(v.clone()),
        cache: StepCache::Mgruip(MgruipCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            v,
            z,
            h_tilde,
            bn: bn_cache,
            had_context: context_term.is_some(),
        }),
        bn_update,
    })
}

/// Trainable-parameter gradients for one GRU layer.
#[derive(Clone, Debug)]
pub struct GruGrads<R> {
    pub w_z: TensorBuffer<R>,
    pub w_r: TensorBuffer<R>,
    pub w_h: TensorBuffer<R>,
    pub u_z: TensorBuffer<R>,
    pub u_r: TensorBuffer<R>,
    pub u_h: TensorBuffer<R>,
    pub b_z: TensorBuffer<R>,
    pub b_r: TensorBuffer<R>,
    pub b_h: TensorBuffer<R>,
}

#[derive(Clone, Debug)]
pub struct MgruGrads<R> {
    pub w_z: TensorBuffer<R>,
    pub w_h: TensorBuffer<R>,
    pub u_z: TensorBuffer<R>,
    pub u_h: TensorBuffer<R>,
    pub b_z: TensorBuffer<R>,
    pub b_h: TensorBuffer<R>,
    pub gamma: TensorBuffer<R>,
    pub beta: TensorBuffer<R>,
}

#[derive(Clone, Debug)]
pub struct MgruipGrads<R> {
    pub w_v: TensorBuffer<R>,
    pub w_z: TensorBuffer<R>,
    pub w_h: TensorBuffer<R>,
    pub b_z: TensorBuffer<R>,
    pub b_h: TensorBuffer<R>,
    pub gamma: TensorBuffer<R>,
    pub beta: TensorBuffer<R>,
}

#[derive(Clone, Debug)]
pub enum CellGrads<R> {
    Gru(GruGrads<R>),
    Mgru(MgruGrads<R>),
    Mgruip(MgruipGrads<R>),
}

impl<R: Real> CellGrads<R> {
    pub fn zeros_like(p: &CellParams<R>) -> Self {
        match p {
            CellParams::Gru(p) => CellGrads::Gru(GruGrads {
                w_z: TensorBuffer::zeros(p.w_z.rows(), p.w_z.cols()),
                w_r: TensorBuffer::zeros(p.w_r.rows(), p.w_r.cols()),
                w_h: TensorBuffer::zeros(p.w_h.rows(), p.w_h.cols()),
                u_z: TensorBuffer::zeros(p.u_z.rows(), p.u_z.cols()),
                u_r: TensorBuffer::zeros(p.u_r.rows(), p.u_r.cols()),
                u_h: TensorBuffer::zeros(p.u_h.rows(), p.u_h.cols()),
                b_z: TensorBuffer::zeros(1, p.units()),
                b_r: TensorBuffer::zeros(1, p.units()),
                b_h: TensorBuffer::zeros(1, p.units()),
            }),
            CellParams::Mgru(p) => CellGrads::Mgru(MgruGrads {
                w_z: TensorBuffer::zeros(p.w_z.rows(), p.w_z.cols()),
                w_h: TensorBuffer::zeros(p.w_h.rows(), p.w_h.cols()),
                u_z: TensorBuffer::zeros(p.u_z.rows(), p.u_z.cols()),
                u_h: TensorBuffer::zeros(p.u_h.rows(), p.u_h.cols()),
                b_z: TensorBuffer::zeros(1, p.units()),
                b_h: TensorBuffer::zeros(1, p.units()),
                gamma: TensorBuffer::zeros(1, p.units()),
                beta: TensorBuffer::zeros(1, p.units()),
            }),
            CellParams::Mgruip(p) => CellGrads::Mgruip(MgruipGrads {
                w_v: TensorBuffer::zeros(p.w_v.rows(), p.w_v.cols()),
                w_z: TensorBuffer::zeros(p.w_z.rows(), p.w_z.cols()),
                w_h: TensorBuffer::zeros(p.w_h.rows(), p.w_h.cols()),
                b_z: TensorBuffer::zeros(1, p.units()),
                b_h: TensorBuffer::zeros(1, p.units()),
                gamma: TensorBuffer::zeros(1, p.units()),
                beta: TensorBuffer::zeros(1, p.units()),
            }),
        }
    }
}

/// Results of reverse-mode through one step. Parameter gradients are
/// accumulated into the supplied `CellGrads`.
pub struct StepBackward<R> {
    pub grad_x: TensorBuffer<R>,
    pub grad_h_prev: TensorBuffer<R>,
    /// Gradient wrt the additive context term (mGRUIP with context only).
    pub grad_context: Option<TensorBuffer<R>>,
}

/// d sigma = s(1-s); d tanh = 1 - t^2, both from the saved activations.
fn sigmoid_grad<R: Real>(upstream: &TensorBuffer<R>, s: &TensorBuffer<R>) -> TensorBuffer<R> {
    let mut out = TensorBuffer::zeros(s.rows(), s.cols());
    for i in 0..s.data().len() {
        let si = s.data()[i];
        out.data_mut()[i] = upstream.data()[i] * si * (R::one() - si);
    }
    out
}

fn tanh_grad<R: Real>(upstream: &TensorBuffer<R>, t: &TensorBuffer<R>) -> TensorBuffer<R> {
    let mut out = TensorBuffer::zeros(t.rows(), t.cols());
    for i in 0..t.data().len() {
        let ti = t.data()[i];
        out.data_mut()[i] = upstream.data()[i] * (R::one() - ti * ti);
    }
    out
}

/// ReLU mask taken from the saved activation: h_tilde > 0 iff pre > 0.
fn relu_grad<R: Real>(upstream: &TensorBuffer<R>, act: &TensorBuffer<R>) -> TensorBuffer<R> {
    let mut out = TensorBuffer::zeros(act.rows(), act.cols());
    for i in 0..act.data().len() {
        out.data_mut()[i] = if act.data()[i] > R::zero() {
            upstream.data()[i]
        } else {
            R::zero()
        };
    }
    out
}

/// Reverse-mode of one step. `grad_v_external` carries gradient contributions
/// from consumers of v_t at other layers or times (temporal encoding).
pub fn cell_backward<R: Real>(
    params: &CellParams<R>,
    cache: &StepCache<R>,
    grad_h: &TensorBuffer<R>,
    grad_v_external: Option<&TensorBuffer<R>>,
    grads: &mut CellGrads<R>,
) -> Result<StepBackward<R>> {
    match (params, cache, grads) {
        (CellParams::Gru(p), StepCache::Gru(c), CellGrads::Gru(g)) => {
            if grad_v_external.is_some() {
                return Err(Error::Contract("GRU step has no projection vector to receive v-gradient".into()));
            }
            // h = z*h_prev + (1-z)*h_tilde
            let dz = grad_h.hadamard(&c.h_prev.sub(&c.h_tilde)?)?;
            let mut dh_prev = grad_h.hadamard(&c.z)?;
            let dh_tilde = {
                let one_minus_z = c.z.map(|v| R::one() - v);
                grad_h.hadamard(&one_minus_z)?
            };
            // candidate branch
            let da_h = tanh_grad(&dh_tilde, &c.h_tilde);
            let gated = c.h_prev.hadamard(&c.r)?;
            g.w_h.add_assign(&da_h.matmul_tn(&c.x)?)?;
            g.u_h.add_assign(&da_h.matmul_tn(&gated)?)?;
            g.b_h.add_assign(&da_h.sum_rows())?;
            let dgated = da_h.matmul(&p.u_h)?;
            dh_prev.add_assign(&dgated.hadamard(&c.r)?)?;
            let dr = dgated.hadamard(&c.h_prev)?;
            let mut dx = da_h.matmul(&p.w_h)?;
            // reset gate
            let da_r = sigmoid_grad(&dr, &c.r);
            g.w_r.add_assign(&da_r.matmul_tn(&c.x)?)?;
            g.u_r.add_assign(&da_r.matmul_tn(&c.h_prev)?)?;
            g.b_r.add_assign(&da_r.sum_rows())?;
            dx.add_assign(&da_r.matmul(&p.w_r)?)?;
            dh_prev.add_assign(&da_r.matmul(&p.u_r)?)?;
            // update gate
            let da_z = sigmoid_grad(&dz, &c.z);
            g.w_z.add_assign(&da_z.matmul_tn(&c.x)?)?;
            g.u_z.add_assign(&da_z.matmul_tn(&c.h_prev)?)?;
            g.b_z.add_assign(&da_z.sum_rows())?;
            dx.add_assign(&da_z.matmul(&p.w_z)?)?;
            dh_prev.add_assign(&da_z.matmul(&p.u_z)?)?;
            Ok(StepBackward {
                grad_x: dx,
                grad_h_prev: dh_prev,
                grad_context: None,
            })
        }
        (CellParams::Mgru(p), StepCache::Mgru(c), CellGrads::Mgru(g)) => {
            if grad_v_external.is_some() {
                return Err(Error::Contract("mGRU step has no projection vector to receive v-gradient".into()));
            }
            let dz = grad_h.hadamard(&c.h_prev.sub(&c.h_tilde)?)?;
            let mut dh_prev = grad_h.hadamard(&c.z)?;
            let dh_tilde = {
                let one_minus_z = c.z.map(|v| R::one() - v);
                grad_h.hadamard(&one_minus_z)?
            };
            // h_tilde = ReLU(BN(pre) + b_h)
            let du = relu_grad(&dh_tilde, &c.h_tilde);
            g.b_h.add_assign(&du.sum_rows())?;
            let (dpre, dgamma, dbeta) = bn_backward(&c.bn, &du)?;
            g.gamma.add_assign(&dgamma)?;
            g.beta.add_assign(&dbeta)?;
            g.w_h.add_assign(&dpre.matmul_tn(&c.x)?)?;
            g.u_h.add_assign(&dpre.matmul_tn(&c.h_prev)?)?;
            let mut dx = dpre.matmul(&p.w_h)?;
            dh_prev.add_assign(&dpre.matmul(&p.u_h)?)?;
            let da_z = sigmoid_grad(&dz, &c.z);
            g.w_z.add_assign(&da_z.matmul_tn(&c.x)?)?;
            g.u_z.add_assign(&da_z.matmul_tn(&c.h_prev)?)?;
            g.b_z.add_assign(&da_z.sum_rows())?;
            dx.add_assign(&da_z.matmul(&p.w_z)?)?;
            dh_prev.add_assign(&da_z.matmul(&p.u_z)?)?;
            Ok(StepBackward {
                grad_x: dx,
                grad_h_prev: dh_prev,
                grad_context: None,
            })
        }
        (CellParams::Mgruip(p), StepCache::Mgruip(c), CellGrads::Mgruip(g)) => {
            let dz = grad_h.hadamard(&c.h_prev.sub(&c.h_tilde)?)?;
            let mut dh_prev = grad_h.hadamard(&c.z)?;
            let dh_tilde = {
                let one_minus_z = c.z.map(|v| R::one() - v);
                grad_h.hadamard(&one_minus_z)?
            };
            let du = relu_grad(&dh_tilde, &c.h_tilde);
            g.b_h.add_assign(&du.sum_rows())?;
            let (dpre, dgamma, dbeta) = bn_backward(&c.bn, &du)?;
            g.gamma.add_assign(&dgamma)?;
            g.beta.add_assign(&dbeta)?;
            g.w_h.add_assign(&dpre.matmul_tn(&c.v)?)?;
            let mut dv = dpre.matmul(&p.w_h)?;
            let da_z = sigmoid_grad(&dz, &c.z);
            g.w_z.add_assign(&da_z.matmul_tn(&c.v)?)?;
            g.b_z.add_assign(&da_z.sum_rows())?;
            dv.add_assign(&da_z.matmul(&p.w_z)?)?;
            if let Some(ext) = grad_v_external {
                dv.add_assign(ext)?;
            }
            // v = W_v [x ; h_prev] + context; context gradient equals dv.
            let grad_context = if c.had_context { Some(dv.clone()) } else { None };
            let stacked = c.x.concat_cols(&c.h_prev)?;
            g.w_v.add_assign(&dv.matmul_tn(&stacked)?)?;
            let dstacked = dv.matmul(&p.w_v)?;
            let (dx, dh_prev_proj) = dstacked.split_cols(c.x.cols())?;
            dh_prev.add_assign(&dh_prev_proj)?;
            Ok(StepBackward {
                grad_x: dx,
                grad_h_prev: dh_prev,
                grad_context,
            })
        }
        _ => Err(Error::Contract("cell params, cache, and grads variants do not match".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fill<R: Real>(t: &mut TensorBuffer<R>, rng: &mut ChaCha8Rng, scale: f64) {
        for v in t.data_mut() {
            *v = R::from_f64(rng.gen_range(-scale..scale));
        }
    }

    fn rand_gru(rng: &mut ChaCha8Rng, n_i: usize, n_c: usize) -> GruParams<f64> {
        let mut p = GruParams::zeros(n_i, n_c);
        for t in [
            &mut p.w_z, &mut p.w_r, &mut p.w_h, &mut p.u_z, &mut p.u_r, &mut p.u_h, &mut p.b_z,
            &mut p.b_r, &mut p.b_h,
        ] {
            fill(t, rng, 0.8);
        }
        p
    }

    fn rand_mgru(rng: &mut ChaCha8Rng, n_i: usize, n_c: usize) -> MgruParams<f64> {
        let mut p = MgruParams::zeros(n_i, n_c);
        for t in [&mut p.w_z, &mut p.w_h, &mut p.u_z, &mut p.u_h, &mut p.b_z, &mut p.b_h] {
            fill(t, rng, 0.8);
        }
        fill(&mut p.bn.gamma, rng, 0.5);
        for v in p.bn.gamma.data_mut() {
            *v += 1.0;
        }
        fill(&mut p.bn.beta, rng, 0.3);
        fill(&mut p.bn.running_mean, rng, 0.3);
        for v in p.bn.running_var.data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        p
    }

    fn rand_mgruip(rng: &mut ChaCha8Rng, n_i: usize, n_c: usize, n_p: usize) -> MgruipParams<f64> {
        let mut p = MgruipParams::zeros(n_i, n_c, n_p);
        for t in [&mut p.w_v, &mut p.w_z, &mut p.w_h, &mut p.b_z, &mut p.b_h] {
            fill(t, rng, 0.8);
        }
        fill(&mut p.bn.gamma, rng, 0.5);
        for v in p.bn.gamma.data_mut() {
            *v += 1.0;
        }
        fill(&mut p.bn.beta, rng, 0.3);
        fill(&mut p.bn.running_mean, rng, 0.3);
        for v in p.bn.running_var.data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        p
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn gru_zero_weights_zero_state_is_fixed_point() {
        let p = GruParams::<f32>::zeros(3, 2);
        let x = TensorBuffer::from_vec(1, 3, vec![0.7, -0.3, 1.1]).unwrap();
        let h0 = TensorBuffer::zeros(1, 2);
        let out = gru_step(&p, &x, &h0).unwrap();
        match &out.cache {
            StepCache::Gru(c) => {
                assert!(c.z.data().iter().all(|v| (*v - 0.5).abs() < 1e-7));
                assert!(c.r.data().iter().all(|v| (*v - 0.5).abs() < 1e-7));
                assert!(c.h_tilde.data().iter().all(|v| *v == 0.0));
            }
            _ => panic!("wrong cache"),
        }
        assert!(out.h.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gru_saturated_update_gate_copies_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = rand_gru(&mut rng, 4, 3);
        for v in p.b_z.data_mut() {
            *v = 40.0;
        }
        let x = TensorBuffer::from_vec(1, 4, vec![0.3, -1.2, 0.8, 2.0]).unwrap();
        let h_prev = TensorBuffer::from_vec(1, 3, vec![-0.4, 0.9, 0.1]).unwrap();
        let out = gru_step(&p, &x, &h_prev).unwrap();
        for i in 0..3 {
            assert!((out.h.data()[i] - h_prev.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn gru_matches_scalar_loop_oracle() {
        // Independent per-element evaluation of the four equations.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n_i, n_c) = (4, 3);
        let p = rand_gru(&mut rng, n_i, n_c);
        let x = {
            let mut t = TensorBuffer::zeros(1, n_i);
            fill(&mut t, &mut rng, 1.0);
            t
        };
        let h_prev = {
            let mut t = TensorBuffer::zeros(1, n_c);
            fill(&mut t, &mut rng, 1.0);
            t
        };
        let out = gru_step(&p, &x, &h_prev).unwrap();
        let r_all: Vec<f64> = (0..n_c)
            .map(|jj| {
                let mut a = p.b_r.get(0, jj);
                for i in 0..n_i {
                    a += p.w_r.get(jj, i) * x.get(0, i);
                }
                for k in 0..n_c {
                    a += p.u_r.get(jj, k) * h_prev.get(0, k);
                }
                sigmoid(a)
            })
            .collect();
        for j in 0..n_c {
            let mut az = p.b_z.get(0, j);
            for i in 0..n_i {
                az += p.w_z.get(j, i) * x.get(0, i);
            }
            for k in 0..n_c {
                az += p.u_z.get(j, k) * h_prev.get(0, k);
            }
            let z = sigmoid(az);
            let mut ah = p.b_h.get(0, j);
            for i in 0..n_i {
                ah += p.w_h.get(j, i) * x.get(0, i);
            }
            for k in 0..n_c {
                ah += p.u_h.get(j, k) * (h_prev.get(0, k) * r_all[k]);
            }
            let h_tilde = ah.tanh();
            let expect = z * h_prev.get(0, j) + (1.0 - z) * h_tilde;
            assert!(
                (out.h.get(0, j) - expect).abs() < 1e-6,
                "unit {j}: {} vs {}",
                out.h.get(0, j),
                expect
            );
        }
    }

    #[test]
    fn mgru_saturated_gate_copies_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = rand_mgru(&mut rng, 3, 2);
        for v in p.b_z.data_mut() {
            *v = 40.0;
        }
        let x = TensorBuffer::from_vec(1, 3, vec![1.0, -0.5, 0.2]).unwrap();
        let h_prev = TensorBuffer::from_vec(1, 2, vec![0.6, -0.8]).unwrap();
        let out = mgru_step(&p, &x, &h_prev, BnMode::Infer).unwrap();
        for i in 0..2 {
            assert!((out.h.data()[i] - h_prev.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn mgru_open_gate_with_identity_bn_is_relu_of_bias() {
        let mut p = MgruParams::<f64>::zeros(3, 2);
        for v in p.b_z.data_mut() {
            *v = -40.0;
        }
        p.b_h = TensorBuffer::from_vec(1, 2, vec![-1.0, 2.0]).unwrap();
        // near-identity: unit running stats, eps shrinks the scale by ~5e-6
        let x = TensorBuffer::from_vec(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let h_prev = TensorBuffer::from_vec(1, 2, vec![0.9, -0.9]).unwrap();
        let out = mgru_step(&p, &x, &h_prev, BnMode::Infer).unwrap();
        assert!((out.h.get(0, 0) - 0.0).abs() < 1e-6);
        assert!((out.h.get(0, 1) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn mgru_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n_i, n_c) = (4, 3);
        let p = rand_mgru(&mut rng, n_i, n_c);
        let x = {
            let mut t = TensorBuffer::zeros(1, n_i);
            fill(&mut t, &mut rng, 1.0);
            t
        };
        let h_prev = {
            let mut t = TensorBuffer::zeros(1, n_c);
            fill(&mut t, &mut rng, 1.0);
            t
        };
        let out = mgru_step(&p, &x, &h_prev, BnMode::Infer).unwrap();
        for j in 0..n_c {
            let mut az = p.b_z.get(0, j);
            let mut ah = 0.0;
            for i in 0..n_i {
                az += p.w_z.get(j, i) * x.get(0, i);
                ah += p.w_h.get(j, i) * x.get(0, i);
            }
            for k in 0..n_c {
                az += p.u_z.get(j, k) * h_prev.get(0, k);
                ah += p.u_h.get(j, k) * h_prev.get(0, k);
            }
            let z = sigmoid(az);
            let bn = (ah - p.bn.running_mean.get(0, j))
                / (p.bn.running_var.get(0, j) + p.bn.epsilon).sqrt()
                * p.bn.gamma.get(0, j)
                + p.bn.beta.get(0, j);
            let h_tilde = (bn + p.b_h.get(0, j)).max(0.0);
            let expect = z * h_prev.get(0, j) + (1.0 - z) * h_tilde;
            assert!((out.h.get(0, j) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn mgruip_zero_context_equals_absent_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = rand_mgruip(&mut rng, 4, 3, 2);
        let x = {
            let mut t = TensorBuffer::zeros(1, 4);
            fill(&mut t, &mut rng, 1.0);
            t
        };
        let h_prev = {
            let mut t = TensorBuffer::zeros(1, 3);
            fill(&mut t, &mut rng, 1.0);
            t
        };
        let zero_ctx = TensorBuffer::zeros(1, 2);
        let a = mgruip_step(&p, &x, &h_prev, None, BnMode::Infer).unwrap();
        let b = mgruip_step(&p, &x, &h_prev, Some(&zero_ctx), BnMode::Infer).unwrap();
        assert_eq!(a.h, b.h);
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn mgruip_saturated_gate_copies_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut p = rand_mgruip(&mut rng, 4, 3, 2);
        for v in p.b_z.data_mut() {
            *v = 40.0;
        }
        let x = TensorBuffer::from_vec(1, 4, vec![0.1, 0.2, -0.4, 0.9]).unwrap();
        let h_prev = TensorBuffer::from_vec(1, 3, vec![0.5, -0.25, 1.5]).unwrap();
        let out = mgruip_step(&p, &x, &h_prev, None, BnMode::Infer).unwrap();
        for i in 0..3 {
            assert!((out.h.data()[i] - h_prev.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn mgruip_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (n_i, n_c, n_p) = (4, 3, 2);
        let p = rand_mgruip(&mut rng, n_i, n_c, n_p);
        let x = {
            let mut t = TensorBuffer::zeros(1, n_i);
            fill(&mut t, &mut rng, 1.0);
            t
        };
        let h_prev = {
            let mut t = TensorBuffer::zeros(1, n_c);
            fill(&mut t, &mut rng, 1.0);
            t
        };
        let ctx = {
            let mut t = TensorBuffer::zeros(1, n_p);
            fill(&mut t, &mut rng, 1.0);
            t
        };
        let out = mgruip_step(&p, &x, &h_prev, Some(&ctx), BnMode::Infer).unwrap();
        let mut v = vec![0.0f64; n_p];
        for (q, vq) in v.iter_mut().enumerate() {
            for i in 0..n_i {
                *vq += p.w_v.get(q, i) * x.get(0, i);
            }
            for k in 0..n_c {
                *vq += p.w_v.get(q, n_i + k) * h_prev.get(0, k);
            }
            *vq += ctx.get(0, q);
        }
        let v_out = out.v.as_ref().unwrap();
        for (q, vq) in v.iter().enumerate() {
            assert!((v_out.get(0, q) - vq).abs() < 1e-6);
        }
        for j in 0..n_c {
            let mut az = p.b_z.get(0, j);
            let mut ah = 0.0;
            for (q, vq) in v.iter().enumerate() {
                az += p.w_z.get(j, q) * vq;
                ah += p.w_h.get(j, q) * vq;
            }
            let z = sigmoid(az);
            let bn = (ah - p.bn.running_mean.get(0, j))
                / (p.bn.running_var.get(0, j) + p.bn.epsilon).sqrt()
                * p.bn.gamma.get(0, j)
                + p.bn.beta.get(0, j);
            let h_tilde = (bn + p.b_h.get(0, j)).max(0.0);
            let expect = z * h_prev.get(0, j) + (1.0 - z) * h_tilde;
            assert!((out.h.get(0, j) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn gate_interpolation_stays_between_state_and_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let p = rand_gru(&mut rng, 3, 4);
            let mut x = TensorBuffer::zeros(2, 3);
            fill(&mut x, &mut rng, 2.0);
            let mut h_prev = TensorBuffer::zeros(2, 4);
            fill(&mut h_prev, &mut rng, 2.0);
            let out = gru_step(&p, &x, &h_prev).unwrap();
            let c = match &out.cache {
                StepCache::Gru(c) => c,
                _ => unreachable!(),
            };
            for i in 0..out.h.data().len() {
                let lo = h_prev.data()[i].min(c.h_tilde.data()[i]) - 1e-6;
                let hi = h_prev.data()[i].max(c.h_tilde.data()[i]) + 1e-6;
                assert!(out.h.data()[i] >= lo && out.h.data()[i] <= hi);
            }
        }
    }

    #[test]
    fn mgru_with_closed_gate_reduces_to_feedforward_relu() {
        // b_z -> -inf: h_t = ReLU(BN(W_h x + U_h h_prev) + b_h), no interpolation.
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut p = rand_mgru(&mut rng, 3, 4);
        for v in p.b_z.data_mut() {
            *v = -40.0;
        }
        let mut x = TensorBuffer::zeros(1, 3);
        fill(&mut x, &mut rng, 1.0);
        let mut h_prev = TensorBuffer::zeros(1, 4);
        fill(&mut h_prev, &mut rng, 1.0);
        let out = mgru_step(&p, &x, &h_prev, BnMode::Infer).unwrap();
        let pre = x
            .matmul_nt(&p.w_h)
            .unwrap()
            .add(&h_prev.matmul_nt(&p.u_h).unwrap())
            .unwrap();
        let (bn_out, _, _) = bn_forward(&pre, &p.bn, BnMode::Infer).unwrap();
        let ff = bn_out.add_row_broadcast(&p.b_h).unwrap().relu();
        for i in 0..4 {
            assert!((out.h.data()[i] - ff.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn mgruip_identity_projection_reproduces_mgru() {
        // n_p = n_i + n_c, W_v = I: the mGRUIP with W_z/W_h split [W | U]
        // computes the same update as the mGRU it was split from.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (n_i, n_c) = (3, 4);
        let mgru = rand_mgru(&mut rng, n_i, n_c);
        let mut ip = MgruipParams::<f64>::zeros(n_i, n_c, n_i + n_c);
        ip.w_v = TensorBuffer::identity(n_i + n_c);
        for j in 0..n_c {
            for i in 0..n_i {
                ip.w_z.set(j, i, mgru.w_z.get(j, i));
                ip.w_h.set(j, i, mgru.w_h.get(j, i));
            }
            for k in 0..n_c {
                ip.w_z.set(j, n_i + k, mgru.u_z.get(j, k));
                ip.w_h.set(j, n_i + k, mgru.u_h.get(j, k));
            }
        }
        ip.b_z = mgru.b_z.clone();
        ip.b_h = mgru.b_h.clone();
        ip.bn = mgru.bn.clone();
        let mut h_a = TensorBuffer::zeros(1, n_c);
        let mut h_b = TensorBuffer::zeros(1, n_c);
        for _ in 0..100 {
            let mut x = TensorBuffer::zeros(1, n_i);
            fill(&mut x, &mut rng, 1.5);
            h_a = mgru_step(&mgru, &x, &h_a, BnMode::Infer).unwrap().h;
            h_b = mgruip_step(&ip, &x, &h_b, None, BnMode::Infer).unwrap().h;
            for i in 0..n_c {
                assert!(
                    (h_a.data()[i] - h_b.data()[i]).abs() < 1e-5,
                    "diverged: {} vs {}",
                    h_a.data()[i],
                    h_b.data()[i]
                );
            }
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let p = rand_mgruip(&mut rng, 4, 3, 2);
        let mut x = TensorBuffer::zeros(2, 4);
        fill(&mut x, &mut rng, 1.0);
        let mut h_prev = TensorBuffer::zeros(2, 3);
        fill(&mut h_prev, &mut rng, 1.0);
        let out = mgruip_step(&p, &x, &h_prev, None, BnMode::Infer).unwrap();
        let cell = CellParams::Mgruip(p);
        let mut grads = CellGrads::zeros_like(&cell);
        let zero = TensorBuffer::zeros(2, 3);
        let back = cell_backward(&cell, &out.cache, &zero, None, &mut grads).unwrap();
        assert!(back.grad_x.data().iter().all(|v| *v == 0.0));
        assert!(back.grad_h_prev.data().iter().all(|v| *v == 0.0));
        match grads {
            CellGrads::Mgruip(g) => {
                assert!(g.w_v.data().iter().all(|v| *v == 0.0));
                assert!(g.w_z.data().iter().all(|v| *v == 0.0));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn backward_mismatched_cache_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let gru = rand_gru(&mut rng, 3, 2);
        let mgru = rand_mgru(&mut rng, 3, 2);
        let x = TensorBuffer::from_vec(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let h = TensorBuffer::zeros(1, 2);
        let out = gru_step(&gru, &x, &h).unwrap();
        let cell = CellParams::Mgru(mgru);
        let mut grads = CellGrads::zeros_like(&cell);
        let up = TensorBuffer::zeros(1, 2);
        assert!(matches!(
            cell_backward(&cell, &out.cache, &up, None, &mut grads),
            Err(Error::Contract(_))
        ));
    }

    /// Central finite differences over every parameter and input of a single
    /// step, at f64 with step 1e-5, as the backward-pass oracle.
    fn fd_check_step(cell: &CellParams<f64>, x: &TensorBuffer<f64>, h_prev: &TensorBuffer<f64>, ctx: Option<&TensorBuffer<f64>>) {
        // loss = sum(h * coeff)
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut coeff = TensorBuffer::zeros(h_prev.rows(), h_prev.cols());
        fill(&mut coeff, &mut rng, 1.0);
        let run = |cell: &CellParams<f64>, x: &TensorBuffer<f64>, h_prev: &TensorBuffer<f64>, ctx: Option<&TensorBuffer<f64>>| -> f64 {
            let out = match cell {
                CellParams::Gru(p) => gru_step(p, x, h_prev).unwrap(),
                CellParams::Mgru(p) => mgru_step(p, x, h_prev, BnMode::Infer).unwrap(),
                CellParams::Mgruip(p) => mgruip_step(p, x, h_prev, ctx, BnMode::Infer).unwrap(),
            };
            out.h.hadamard(&coeff).unwrap().data().iter().sum()
        };
        let out = match cell {
            CellParams::Gru(p) => gru_step(p, x, h_prev).unwrap(),
            CellParams::Mgru(p) => mgru_step(p, x, h_prev, BnMode::Infer).unwrap(),
            CellParams::Mgruip(p) => mgruip_step(p, x, h_prev, ctx, BnMode::Infer).unwrap(),
        };
        let mut grads = CellGrads::zeros_like(cell);
        let back = cell_backward(cell, &out.cache, &coeff, None, &mut grads).unwrap();
        let h = 1e-5;
        let check = |fd: f64, an: f64, what: &str| {
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            assert!(rel < 1e-4, "{what}: fd={fd} an={an} rel={rel}");
        };
        // inputs
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let up = run(cell, &xp, h_prev, ctx);
            xp.data_mut()[idx] -= 2.0 * h;
            let dn = run(cell, &xp, h_prev, ctx);
            check((up - dn) / (2.0 * h), back.grad_x.data()[idx], "grad_x");
        }
        for idx in 0..h_prev.data().len() {
            let mut hp = h_prev.clone();
            hp.data_mut()[idx] += h;
            let up = run(cell, x, &hp, ctx);
            hp.data_mut()[idx] -= 2.0 * h;
            let dn = run(cell, x, &hp, ctx);
            check((up - dn) / (2.0 * h), back.grad_h_prev.data()[idx], "grad_h_prev");
        }
        if let (Some(c), Some(gc)) = (ctx, back.grad_context.as_ref()) {
            for idx in 0..c.data().len() {
                let mut cp = c.clone();
                cp.data_mut()[idx] += h;
                let up = run(cell, x, h_prev, Some(&cp));
                cp.data_mut()[idx] -= 2.0 * h;
                let dn = run(cell, x, h_prev, Some(&cp));
                check((up - dn) / (2.0 * h), gc.data()[idx], "grad_context");
            }
        }
        // parameters, via the mutable views of a cloned cell
        let param_fields: Vec<(&str, usize)> = match cell {
            CellParams::Gru(p) => vec![
                ("w_z", p.w_z.data().len()),
                ("w_r", p.w_r.data().len()),
                ("w_h", p.w_h.data().len()),
                ("u_z", p.u_z.data().len()),
                ("u_r", p.u_r.data().len()),
                ("u_h", p.u_h.data().len()),
                ("b_z", p.b_z.data().len()),
                ("b_r", p.b_r.data().len()),
                ("b_h", p.b_h.data().len()),
            ],
            CellParams::Mgru(p) => vec![
                ("w_z", p.w_z.data().len()),
                ("w_h", p.w_h.data().len()),
                ("u_z", p.u_z.data().len()),
                ("u_h", p.u_h.data().len()),
                ("b_z", p.b_z.data().len()),
                ("b_h", p.b_h.data().len()),
                ("gamma", p.bn.gamma.data().len()),
                ("beta", p.bn.beta.data().len()),
            ],
            CellParams::Mgruip(p) => vec![
                ("w_v", p.w_v.data().len()),
                ("w_z", p.w_z.data().len()),
                ("w_h", p.w_h.data().len()),
                ("b_z", p.b_z.data().len()),
                ("b_h", p.b_h.data().len()),
                ("gamma", p.bn.gamma.data().len()),
                ("beta", p.bn.beta.data().len()),
            ],
        };
        fn field_mut<'a>(cell: &'a mut CellParams<f64>, name: &str) -> &'a mut TensorBuffer<f64> {
            match cell {
                CellParams::Gru(p) => match name {
                    "w_z" => &mut p.w_z,
                    "w_r" => &mut p.w_r,
                    "w_h" => &mut p.w_h,
                    "u_z" => &mut p.u_z,
                    "u_r" => &mut p.u_r,
                    "u_h" => &mut p.u_h,
                    "b_z" => &mut p.b_z,
                    "b_r" => &mut p.b_r,
                    "b_h" => &mut p.b_h,
                    _ => unreachable!(),
                },
                CellParams::Mgru(p) => match name {
                    "w_z" => &mut p.w_z,
                    "w_h" => &mut p.w_h,
                    "u_z" => &mut p.u_z,
                    "u_h" => &mut p.u_h,
                    "b_z" => &mut p.b_z,
                    "b_h" => &mut p.b_h,
                    "gamma" => &mut p.bn.gamma,
                    "beta" => &mut p.bn.beta,
                    _ => unreachable!(),
                },
                CellParams::Mgruip(p) => match name {
                    "w_v" => &mut p.w_v,
                    "w_z" => &mut p.w_z,
                    "w_h" => &mut p.w_h,
                    "b_z" => &mut p.b_z,
                    "b_h" => &mut p.b_h,
                    "gamma" => &mut p.bn.gamma,
                    "beta" => &mut p.bn.beta,
                    _ => unreachable!(),
                },
            }
        }
        let grad_field = |grads: &CellGrads<f64>, name: &str| -> TensorBuffer<f64> {
            match grads {
                CellGrads::Gru(g) => match name {
                    "w_z" => g.w_z.clone(),
                    "w_r" => g.w_r.clone(),
                    "w_h" => g.w_h.clone(),
                    "u_z" => g.u_z.clone(),
                    "u_r" => g.u_r.clone(),
                    "u_h" => g.u_h.clone(),
                    "b_z" => g.b_z.clone(),
                    "b_r" => g.b_r.clone(),
                    "b_h" => g.b_h.clone(),
                    _ => unreachable!(),
                },
                CellGrads::Mgru(g) => match name {
                    "w_z" => g.w_z.clone(),
                    "w_h" => g.w_h.clone(),
                    "u_z" => g.u_z.clone(),
                    "u_h" => g.u_h.clone(),
                    "b_z" => g.b_z.clone(),
                    "b_h" => g.b_h.clone(),
                    "gamma" => g.gamma.clone(),
                    "beta" => g.beta.clone(),
                    _ => unreachable!(),
                },
                CellGrads::Mgruip(g) => match name {
                    "w_v" => g.w_v.clone(),
                    "w_z" => g.w_z.clone(),
                    "w_h" => g.w_h.clone(),
                    "b_z" => g.b_z.clone(),
                    "b_h" => g.b_h.clone(),
                    "gamma" => g.gamma.clone(),
                    "beta" => g.beta.clone(),
                    _ => unreachable!(),
                },
            }
        };
        for (name, len) in param_fields {
            let analytic = grad_field(&grads, name);
            for idx in 0..len {
                let mut cp = cell.clone();
                field_mut(&mut cp, name).data_mut()[idx] += h;
                let up = run(&cp, x, h_prev, ctx);
                field_mut(&mut cp, name).data_mut()[idx] -= 2.0 * h;
                let dn = run(&cp, x, h_prev, ctx);
                check((up - dn) / (2.0 * h), analytic.data()[idx], name);
            }
        }
    }

    #[test]
    fn gru_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let p = rand_gru(&mut rng, 5, 4);
        let mut x = TensorBuffer::zeros(2, 5);
        fill(&mut x, &mut rng, 1.0);
        let mut h_prev = TensorBuffer::zeros(2, 4);
        fill(&mut h_prev, &mut rng, 1.0);
        fd_check_step(&CellParams::Gru(p), &x, &h_prev, None);
    }

    #[test]
    fn mgru_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let p = rand_mgru(&mut rng, 5, 4);
        let mut x = TensorBuffer::zeros(2, 5);
        fill(&mut x, &mut rng, 1.0);
        let mut h_prev = TensorBuffer::zeros(2, 4);
        fill(&mut h_prev, &mut rng, 1.0);
        fd_check_step(&CellParams::Mgru(p), &x, &h_prev, None);
    }

    #[test]
    fn mgruip_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let p = rand_mgruip(&mut rng, 5, 4, 3);
        let mut x = TensorBuffer::zeros(2, 5);
        fill(&mut x, &mut rng, 1.0);
        let mut h_prev = TensorBuffer::zeros(2, 4);
        fill(&mut h_prev, &mut rng, 1.0);
        let mut ctx = TensorBuffer::zeros(2, 3);
        fill(&mut ctx, &mut rng, 1.0);
        fd_check_step(&CellParams::Mgruip(p), &x, &h_prev, Some(&ctx));
    }

    #[test]
    fn batch_gradient_is_sum_of_per_example_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let p = rand_mgru(&mut rng, 3, 2);
        let cell = CellParams::Mgru(p.clone());
        let mut xb = TensorBuffer::zeros(3, 3);
        fill(&mut xb, &mut rng, 1.0);
        let mut hb = TensorBuffer::zeros(3, 2);
        fill(&mut hb, &mut rng, 1.0);
        let up = {
            let mut t = TensorBuffer::zeros(3, 2);
            fill(&mut t, &mut rng, 1.0);
            t
        };
        let out = mgru_step(&p, &xb, &hb, BnMode::Infer).unwrap();
        let mut batch_grads = CellGrads::zeros_like(&cell);
        cell_backward(&cell, &out.cache, &up, None, &mut batch_grads).unwrap();
        let mut summed = CellGrads::zeros_like(&cell);
        for b in 0..3 {
            let x1 = TensorBuffer::from_vec(1, 3, xb.row(b).to_vec()).unwrap();
            let h1 = TensorBuffer::from_vec(1, 2, hb.row(b).to_vec()).unwrap();
            let u1 = TensorBuffer::from_vec(1, 2, up.row(b).to_vec()).unwrap();
            let o1 = mgru_step(&p, &x1, &h1, BnMode::Infer).unwrap();
            cell_backward(&cell, &o1.cache, &u1, None, &mut summed).unwrap();
        }
        match (&batch_grads, &summed) {
            (CellGrads::Mgru(a), CellGrads::Mgru(b)) => {
                for (x, y) in a.w_h.data().iter().zip(b.w_h.data()) {
                    assert!((x - y).abs() < 1e-5);
                }
                for (x, y) in a.u_z.data().iter().zip(b.u_z.data()) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
            _ => unreachable!(),
        }
    }
}
