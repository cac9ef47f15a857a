//! Factored gradient path for one attention block. Every term is evaluated
//! in a fixed bracketing that keeps all intermediates at n-by-rank or
//! rank-by-d shape; nothing n-by-n is ever allocated here.

use crate::error::Result;
use crate::exact::{
    propagate_through_g, Activation, AttentionWeights, GradientBundle,
};
use crate::lowrank::{approx_attention, lr_p_factors, KernelConfig, LowRankFactor};
use crate::matrix::{add_assign, matmul, scale as mat_scale, sub, DenseMatrix, FlopCounter};

pub use crate::exact::compute_k_vec as compute_k;

/// Factored forms of the four weighted attention matrices appearing in the
/// input-gradient terms, plus the per-row gradient/output inner products.
///
/// With `f ~ u1 v1^T` and `K = (G ⊙ s) 1`:
///   z4 = f ⊙ (G h^T)        -> (u1 ⊘ G, v1 ⊘ h)
///   z2 = diag(K) f          -> (diag(K) u1, v1)
///   z7 = z4^T               -> factors swapped
///   z6 = z2^T               -> factors swapped
pub struct ZFactors {
    pub z6: LowRankFactor,
    pub z7: LowRankFactor,
    pub z2: LowRankFactor,
    pub z4: LowRankFactor,
    pub k_vec: Vec<f64>,
}

pub fn z_factors(
    f_lr: &LowRankFactor,
    g: &DenseMatrix,
    h: &DenseMatrix,
    s: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<ZFactors> {
    let k_vec = compute_k(g, s, flops)?;
    let (z4, z2) = lr_p_factors(f_lr, g, h, flops)?;
    let z7 = LowRankFactor::new(z4.v.clone(), z4.u.clone(), "z7", z4.est_error);
    let z6 = LowRankFactor::new(z2.v.clone(), z2.u.clone(), "z6", z2.est_error);
    Ok(ZFactors {
        z6,
        z7,
        z2,
        z4,
        k_vec,
    })
}

/// `sign * scale * U ((V^T x) m)`, the pinned evaluation order for one term.
fn factored_term(
    factor: &LowRankFactor,
    x: &DenseMatrix,
    m: &DenseMatrix,
    sign_scale: f64,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let vt_x = matmul(&factor.v.transpose(), x, flops)?;
    let vt_x_m = matmul(&vt_x, m, flops)?;
    let term = matmul(&factor.u, &vt_x_m, flops)?;
    Ok(mat_scale(&term, sign_scale, flops))
}

/// The five factored input-gradient terms, in the fixed order
/// (D6, D7, D8, D2, D4) matching the dense route.
#[allow(clippy::too_many_arguments)]
pub fn fast_grad_t_terms(
    x: &DenseMatrix,
    w: &DenseMatrix,
    w_v: &DenseMatrix,
    score_scale: f64,
    f_lr: &LowRankFactor,
    h: &DenseMatrix,
    s: &DenseMatrix,
    g: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<[DenseMatrix; 5]> {
    let zf = z_factors(f_lr, g, h, s, flops)?;
    let wt = w.transpose();

    let d6 = factored_term(&zf.z6, x, w, -score_scale, flops)?;
    let d7 = factored_term(&zf.z7, x, w, score_scale, flops)?;
    // D8 = f^T G W_V^T = v1 ((u1^T G) W_V^T)
    let ut_g = matmul(&f_lr.u.transpose(), g, flops)?;
    let ut_g_wvt = matmul(&ut_g, &w_v.transpose(), flops)?;
    let d8 = matmul(&f_lr.v, &ut_g_wvt, flops)?;
    let d2 = factored_term(&zf.z2, x, &wt, -score_scale, flops)?;
    let d4 = factored_term(&zf.z4, x, &wt, score_scale, flops)?;
    Ok([d6, d7, d8, d2, d4])
}

/// Factored input gradient: the five terms summed in fixed order.
#[allow(clippy::too_many_arguments)]
pub fn fast_grad_t(
    x: &DenseMatrix,
    w: &DenseMatrix,
    w_v: &DenseMatrix,
    score_scale: f64,
    f_lr: &LowRankFactor,
    h: &DenseMatrix,
    s: &DenseMatrix,
    g: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let terms = fast_grad_t_terms(x, w, w_v, score_scale, f_lr, h, s, g, flops)?;
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for t in &terms {
        add_assign(&mut out, t, flops)?;
    }
    Ok(out)
}

/// Factored key-query weight gradient:
/// `scale * ((X^T U3)(V3^T X) - (X^T U4)(V4^T X))` with (U3,V3), (U4,V4) the
/// factored `p1`, `p2`. Never materializes either p matrix.
pub fn fast_grad_w(
    x: &DenseMatrix,
    f_lr: &LowRankFactor,
    g: &DenseMatrix,
    h: &DenseMatrix,
    score_scale: f64,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let (p1, p2) = lr_p_factors(f_lr, g, h, flops)?;
    let xt = x.transpose();
    let t1 = matmul(
        &matmul(&xt, &p1.u, flops)?,
        &matmul(&p1.v.transpose(), x, flops)?,
        flops,
    )?;
    let t2 = matmul(
        &matmul(&xt, &p2.u, flops)?,
        &matmul(&p2.v.transpose(), x, flops)?,
        flops,
    )?;
    Ok(mat_scale(&sub(&t1, &t2, flops)?, score_scale, flops))
}

/// Factored value-weight gradient `((X^T V1) U1^T) G`, evaluated left to
/// right.
pub fn fast_grad_wv(
    x: &DenseMatrix,
    f_lr: &LowRankFactor,
    g: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let xt_v1 = matmul(&x.transpose(), &f_lr.v, flops)?;
    let xt_ft = matmul(&xt_v1, &f_lr.u.transpose(), flops)?;
    matmul(&xt_ft, g, flops)
}

/// One full factored backward step for a layer of the form
/// `phi(Attn(x) W_g)`: rebuilds the forward factors, back-propagates the
/// upstream gradient through the non-attention map, and returns the three
/// gradients.
pub fn single_grad(
    x: &DenseMatrix,
    wts: &AttentionWeights,
    w_g: &DenseMatrix,
    activation: Activation,
    g_t_upstream: &DenseMatrix,
    cfg: &KernelConfig,
    flops: &FlopCounter,
) -> Result<GradientBundle> {
    let score_scale = 1.0 / x.cols() as f64;
    let f_lr = approx_attention(x, wts, cfg, flops)?;
    let h = matmul(x, wts.w_v(), flops)?;
    let s = f_lr.apply(&h, flops)?;
    let g = propagate_through_g(g_t_upstream, &s, w_g, activation, flops)?;

    let g_t = fast_grad_t(x, wts.w(), wts.w_v(), score_scale, &f_lr, &h, &s, &g, flops)?;
    let g_w = fast_grad_w(x, &f_lr, &g, &h, score_scale, flops)?;
    let g_v = fast_grad_wv(x, &f_lr, &g, flops)?;
    Ok(GradientBundle { g_t, g_w, g_v })
}
