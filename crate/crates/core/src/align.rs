//! Cross-view affinity and bidirectional attention.

use rand_chacha::ChaCha8Rng;

use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};
use crate::Result;

/// Projections applied as `H · W`, each `2h x h2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignParams {
    pub w2d: ParamId,
    pub w3d: ParamId,
    pub temperature: f64,
}

impl AlignParams {
    pub fn new(
        store: &mut ParamStore,
        input: usize,
        proj: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        AlignParams {
            w2d: store.uniform("align.w2d", input, proj, rng),
            w3d: store.uniform("align.w3d", input, proj, rng),
            temperature,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub s: Tensor,
    /// Row-stochastic weights of 2D queries over 3D keys.
    pub xi: Tensor,
    /// Column-stochastic weights of 3D queries over 2D keys.
    pub zeta: Tensor,
    pub h2d_attended: Tensor,
    pub h3d_attended: Tensor,
}

/// `S_ij = <W_2D h2d_i, W_3D h3d_j> / temperature`.
pub fn affinity(p: &Bound, params: &AlignParams, h2d: &Tensor, h3d: &Tensor) -> Result<Tensor> {
    if h2d.shape() != h3d.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "affinity",
            lhs: h2d.shape(),
            rhs: h3d.shape(),
        }
        .into());
    }
    let a = h2d.matmul(p.t(params.w2d))?;
    let b = h3d.matmul(p.t(params.w3d))?;
    let s = a.matmul_t(&b)?;
    Ok(if params.temperature == 1.0 {
        s
    } else {
        s.scale(1.0 / params.temperature)
    })
}

/// `xi = softmax_rows(S)`, `H3D_bar = xi · H3D`.
pub fn attend_2d_queries(s: &Tensor, h3d: &Tensor) -> Result<(Tensor, Tensor)> {
    let xi = s.softmax_rows()?;
    let out = xi.matmul(h3d)?;
    Ok((xi, out))
}

/// `zeta = softmax_cols(S)`, `H2D_bar_j = sum_i zeta_ij h2d_i`.
pub fn attend_3d_queries(s: &Tensor, h2d: &Tensor) -> Result<(Tensor, Tensor)> {
    let zeta = s.softmax_cols()?;
    let out = zeta.transpose().matmul(h2d)?;
    Ok((zeta, out))
}

pub fn align(
    p: &Bound,
    params: &AlignParams,
    h2d: &Tensor,
    h3d: &Tensor,
) -> Result<AttentionOutput> {
    let s = affinity(p, params, h2d, h3d)?;
    let (xi, h3d_attended) = attend_2d_queries(&s, h3d)?;
    let (zeta, h2d_attended) = attend_3d_queries(&s, h2d)?;
    Ok(AttentionOutput {
        s,
        xi,
        zeta,
        h2d_attended,
        h3d_attended,
    })
}
