//! Exact dense attention forward pass, loss heads, and three independent
//! gradient routes: an entry-wise sum over scalar cases, a matrix-view sum of
//! five terms, and central finite differences. The three must agree; the
//! factored fast path is later checked against the matrix-view route.

use crate::error::{Error, Result};
use crate::matrix::{
    add_assign, hadamard, matmul, scale as mat_scale, sub, DenseMatrix, DiagSide, FlopCounter,
    diag_scale,
};

/// Largest score magnitude we allow into `exp`.
pub(crate) const EXP_OVERFLOW_LIMIT: f64 = 700.0;

/// Query/key/value weights for one attention block. The combined key-query
/// matrix `w = w_q * w_k^T` is cached at construction and never drifts from
/// its factors.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    w_q: DenseMatrix,
    w_k: DenseMatrix,
    w_v: DenseMatrix,
    w: DenseMatrix,
}

impl AttentionWeights {
    pub fn new(
        w_q: DenseMatrix,
        w_k: DenseMatrix,
        w_v: DenseMatrix,
        flops: &FlopCounter,
    ) -> Result<Self> {
        let d = w_q.rows();
        for (name, m) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if m.shape() != (d, d) {
                return Err(Error::InvalidParameter {
                    what: format!("{name} must be {d}x{d}, got {}x{}", m.rows(), m.cols()),
                });
            }
        }
        let w = matmul(&w_q, &w_k.transpose(), flops)?;
        Ok(Self { w_q, w_k, w_v, w })
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn w_q(&self) -> &DenseMatrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &DenseMatrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &DenseMatrix {
        &self.w_v
    }

    /// Cached `w_q * w_k^T`.
    pub fn w(&self) -> &DenseMatrix {
        &self.w
    }
}

/// Forward intermediates for one attention block: the exponentiated score
/// matrix, its row sums, the row-stochastic attention matrix, the value
/// projection, and the attention output.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub u: DenseMatrix,
    pub alpha: Vec<f64>,
    pub f: DenseMatrix,
    pub h: DenseMatrix,
    pub s: DenseMatrix,
}

/// Numerically stable row softmax.
pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Dense forward pass with an explicit combined weight, value weight, and
/// score scale. The single-head entry point fixes `score_scale = 1/d`;
/// per-head callers pass `1/d_h`.
pub fn forward_parts(
    x: &DenseMatrix,
    w: &DenseMatrix,
    w_v: &DenseMatrix,
    score_scale: f64,
    flops: &FlopCounter,
) -> Result<ForwardCache> {
    let n = x.rows();
    let xw = matmul(x, w, flops)?;
    let scores = mat_scale(&matmul(&xw, &x.transpose(), flops)?, score_scale, flops);
    let max_score = scores.max_abs();
    if max_score > EXP_OVERFLOW_LIMIT {
        return Err(Error::RangeOverflow { max_score });
    }

    let mut u = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            u.set(i, j, scores.get(i, j).exp());
        }
    }
    flops.add((n * n) as u64);

    let mut alpha = vec![0.0; n];
    let mut f = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let a: f64 = u.row(i).iter().sum();
        alpha[i] = a;
        for (fj, uj) in f.row_mut(i).iter_mut().zip(u.row(i)) {
            *fj = uj / a;
        }
    }
    flops.add(2 * (n * n) as u64);

    let h = matmul(x, w_v, flops)?;
    let s = matmul(&f, &h, flops)?;
    Ok(ForwardCache { u, alpha, f, h, s })
}

/// Single-head forward pass with the standard `1/d` score scaling.
pub fn forward_exact(
    x: &DenseMatrix,
    wts: &AttentionWeights,
    flops: &FlopCounter,
) -> Result<ForwardCache> {
    forward_parts(x, wts.w(), wts.w_v(), 1.0 / x.cols() as f64, flops)
}

/// Which loss drives the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Squared,
}

/// Loss configuration: a squared distance to a reference matrix, or
/// cross-entropy against one-hot targets through a linear output head.
#[derive(Clone, Debug)]
pub struct LossSpec {
    pub kind: LossKind,
    pub target: DenseMatrix,
    pub projection: Option<DenseMatrix>,
}

impl LossSpec {
    pub fn squared(target: DenseMatrix) -> Self {
        Self {
            kind: LossKind::Squared,
            target,
            projection: None,
        }
    }

    pub fn cross_entropy(target: DenseMatrix, projection: DenseMatrix) -> Result<Self> {
        for i in 0..target.rows() {
            let row = target.row(i);
            let ones = row.iter().filter(|v| **v == 1.0).count();
            let zeros = row.iter().filter(|v| **v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::InvalidParameter {
                    what: format!("cross-entropy target row {i} is not one-hot"),
                });
            }
        }
        if projection.cols() != target.cols() {
            return Err(Error::DimensionMismatch {
                op: "cross_entropy head",
                lhs: projection.shape(),
                rhs: target.shape(),
            });
        }
        Ok(Self {
            kind: LossKind::CrossEntropy,
            target,
            projection: Some(projection),
        })
    }
}

/// Loss value and its analytic gradient with respect to the final hidden
/// states.
pub fn loss_and_upstream(
    s_final: &DenseMatrix,
    spec: &LossSpec,
    flops: &FlopCounter,
) -> Result<(f64, DenseMatrix)> {
    match spec.kind {
        LossKind::Squared => {
            if s_final.shape() != spec.target.shape() {
                return Err(Error::DimensionMismatch {
                    op: "squared loss",
                    lhs: s_final.shape(),
                    rhs: spec.target.shape(),
                });
            }
            let diff = sub(s_final, &spec.target, flops)?;
            let loss: f64 = diff.data().iter().map(|v| v * v).sum();
            flops.add(2 * diff.data().len() as u64);
            let upstream = mat_scale(&diff, 2.0, flops);
            Ok((loss, upstream))
        }
        LossKind::CrossEntropy => {
            let head = spec.projection.as_ref().expect("cross-entropy head");
            if s_final.cols() != head.rows() {
                return Err(Error::DimensionMismatch {
                    op: "cross-entropy head",
                    lhs: s_final.shape(),
                    rhs: head.shape(),
                });
            }
            let logits = matmul(s_final, head, flops)?;
            let n = logits.rows();
            let mut probs = DenseMatrix::zeros(n, logits.cols());
            let mut loss = 0.0;
            for i in 0..n {
                let p = softmax_row(logits.row(i));
                for (j, (pv, tv)) in p.iter().zip(spec.target.row(i)).enumerate() {
                    if *tv == 1.0 {
                        if *pv <= 0.0 {
                            return Err(Error::NumericalDomain {
                                what: format!("predicted probability {pv:.3e} at ({i},{j})"),
                            });
                        }
                        loss -= pv.ln();
                    }
                }
                probs.row_mut(i).copy_from_slice(&p);
            }
            flops.add(4 * (n * logits.cols()) as u64);
            let upstream = matmul(&sub(&probs, &spec.target, flops)?, &head.transpose(), flops)?;
            Ok((loss, upstream))
        }
    }
}

/// Gradient of the cross-entropy loss with respect to the output head itself
/// (`None` for the squared loss, which has no head).
pub fn output_head_grad(
    s_final: &DenseMatrix,
    spec: &LossSpec,
    flops: &FlopCounter,
) -> Result<Option<DenseMatrix>> {
    match spec.kind {
        LossKind::Squared => Ok(None),
        LossKind::CrossEntropy => {
            let head = spec.projection.as_ref().expect("cross-entropy head");
            let logits = matmul(s_final, head, flops)?;
            let n = logits.rows();
            let mut probs = DenseMatrix::zeros(n, logits.cols());
            for i in 0..n {
                probs.row_mut(i).copy_from_slice(&softmax_row(logits.row(i)));
            }
            flops.add(3 * (n * logits.cols()) as u64);
            let delta = sub(&probs, &spec.target, flops)?;
            Ok(Some(matmul(&s_final.transpose(), &delta, flops)?))
        }
    }
}

/// Bundle of the three per-layer gradients: input, combined key-query weight,
/// and value weight.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    pub g_t: DenseMatrix,
    pub g_w: DenseMatrix,
    pub g_v: DenseMatrix,
}

/// Per-row inner products of the upstream gradient with the attention output.
pub fn compute_k_vec(g: &DenseMatrix, s: &DenseMatrix, flops: &FlopCounter) -> Result<Vec<f64>> {
    if g.shape() != s.shape() {
        return Err(Error::DimensionMismatch {
            op: "compute_k_vec",
            lhs: g.shape(),
            rhs: s.shape(),
        });
    }
    let k: Vec<f64> = (0..g.rows())
        .map(|i| {
            g.row(i)
                .iter()
                .zip(s.row(i))
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    flops.add(2 * (g.rows() * g.cols()) as u64);
    Ok(k)
}

/// The five matrix-view terms of the input gradient, evaluated densely from
/// an explicit attention matrix `f`. Also serves the causal path, which calls
/// it with the masked attention matrix.
///
/// With `q = G h^T`, `p1 = f ⊙ q`, `p2 = diag(K) f`:
///   term order is (D6, D7, D8, D2, D4) =
///   (-p2^T X W * c,  p1^T X W * c,  f^T G W_V^T,  -p2 X W^T * c,  p1 X W^T * c)
/// where `c` is the score scale.
#[allow(clippy::too_many_arguments)]
pub fn grad_t_terms_from_f(
    f: &DenseMatrix,
    h: &DenseMatrix,
    s: &DenseMatrix,
    x: &DenseMatrix,
    w: &DenseMatrix,
    w_v: &DenseMatrix,
    score_scale: f64,
    g: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<[DenseMatrix; 5]> {
    let k_vec = compute_k_vec(g, s, flops)?;
    let q = matmul(g, &h.transpose(), flops)?;
    let p1 = hadamard(f, &q, flops)?;
    let p2 = diag_scale(&k_vec, f, DiagSide::Left, flops)?;

    let xw = matmul(x, w, flops)?;
    let xwt = matmul(x, &w.transpose(), flops)?;

    let d6 = mat_scale(&matmul(&p2.transpose(), &xw, flops)?, -score_scale, flops);
    let d7 = mat_scale(&matmul(&p1.transpose(), &xw, flops)?, score_scale, flops);
    let d8 = matmul(&matmul(&f.transpose(), g, flops)?, &w_v.transpose(), flops)?;
    let d2 = mat_scale(&matmul(&p2, &xwt, flops)?, -score_scale, flops);
    let d4 = mat_scale(&matmul(&p1, &xwt, flops)?, score_scale, flops);
    Ok([d6, d7, d8, d2, d4])
}

/// Dense input gradient: the five terms summed in fixed order.
#[allow(clippy::too_many_arguments)]
pub fn grad_t_dense(
    f: &DenseMatrix,
    h: &DenseMatrix,
    s: &DenseMatrix,
    x: &DenseMatrix,
    w: &DenseMatrix,
    w_v: &DenseMatrix,
    score_scale: f64,
    g: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let terms = grad_t_terms_from_f(f, h, s, x, w, w_v, score_scale, g, flops)?;
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    for t in &terms {
        add_assign(&mut out, t, flops)?;
    }
    Ok(out)
}

/// Matrix-view oracle for the single-head input gradient.
pub fn grad_t_exact_dterms(
    cache: &ForwardCache,
    x: &DenseMatrix,
    wts: &AttentionWeights,
    g: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    grad_t_dense(
        &cache.f,
        &cache.h,
        &cache.s,
        x,
        wts.w(),
        wts.w_v(),
        1.0 / x.cols() as f64,
        g,
        flops,
    )
}

/// Entry-wise oracle: the raw quadruple sum over scalar cases. Quadratic in
/// both `n` and `d` with a further O(n) inner loop; intended for n <= 64.
pub fn grad_t_exact_cterms(
    cache: &ForwardCache,
    x: &DenseMatrix,
    wts: &AttentionWeights,
    g: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let (n, d) = x.shape();
    let c = 1.0 / d as f64;
    let f = &cache.f;
    let h = &cache.h;
    let s = &cache.s;
    let w_v = wts.w_v();
    let xw = matmul(x, wts.w(), flops)?;
    let xwt = matmul(x, &wts.w().transpose(), flops)?;

    let mut out = DenseMatrix::zeros(n, d);
    for i1 in 0..n {
        for j1 in 0..d {
            let mut acc = 0.0;
            for i0 in 0..n {
                for j0 in 0..d {
                    let gv = g.get(i0, j0);
                    let contrib = if i0 == i1 {
                        let c1 = -s.get(i0, j0) * f.get(i0, i0) * xw.get(i0, j1) * c;
                        let mut dot_f_xwt = 0.0;
                        let mut dot_fh_xwt = 0.0;
                        for e in 0..n {
                            dot_f_xwt += f.get(i0, e) * xwt.get(e, j1);
                            dot_fh_xwt += f.get(i0, e) * h.get(e, j0) * xwt.get(e, j1);
                        }
                        let c2 = -s.get(i0, j0) * dot_f_xwt * c;
                        let c3 = f.get(i0, i0) * h.get(i0, j0) * xw.get(i0, j1) * c;
                        let c4 = dot_fh_xwt * c;
                        let c5 = f.get(i0, i0) * w_v.get(j1, j0);
                        c1 + c2 + c3 + c4 + c5
                    } else {
                        let c6 = -s.get(i0, j0) * f.get(i0, i1) * xw.get(i0, j1) * c;
                        let c7 = f.get(i0, i1) * h.get(i1, j0) * xw.get(i0, j1) * c;
                        let c8 = f.get(i0, i1) * w_v.get(j1, j0);
                        c6 + c7 + c8
                    };
                    acc += gv * contrib;
                }
            }
            out.set(i1, j1, acc);
        }
    }
    // per (i1,j1): d diagonal cases with a 5n-op inner loop plus ~14 ops,
    // and (n-1)d off-diagonal cases with ~10 ops
    let off_diag = (n as u64).saturating_sub(1) * d as u64 * 10;
    flops.add((n * d) as u64 * (d as u64 * (5 * n as u64 + 14) + off_diag));
    Ok(out)
}

/// Dense gradient with respect to the combined key-query weight:
/// `score_scale * X^T (p1 - p2) X`.
pub fn grad_w_dense(
    f: &DenseMatrix,
    h: &DenseMatrix,
    s: &DenseMatrix,
    x: &DenseMatrix,
    score_scale: f64,
    g: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let k_vec = compute_k_vec(g, s, flops)?;
    let q = matmul(g, &h.transpose(), flops)?;
    let p1 = hadamard(f, &q, flops)?;
    let p2 = diag_scale(&k_vec, f, DiagSide::Left, flops)?;
    let p = sub(&p1, &p2, flops)?;
    let px = matmul(&p, x, flops)?;
    Ok(mat_scale(&matmul(&x.transpose(), &px, flops)?, score_scale, flops))
}

pub fn grad_w_exact(
    cache: &ForwardCache,
    x: &DenseMatrix,
    g: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    grad_w_dense(
        &cache.f,
        &cache.h,
        &cache.s,
        x,
        1.0 / x.cols() as f64,
        g,
        flops,
    )
}

/// Factor gradients recovered from the combined gradient:
/// `dL/dW_Q = g_w W_K` and `dL/dW_K = g_w^T W_Q`.
pub fn grad_wq_wk_from_w(
    g_w: &DenseMatrix,
    wts: &AttentionWeights,
    flops: &FlopCounter,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let g_wq = matmul(g_w, wts.w_k(), flops)?;
    let g_wk = matmul(&g_w.transpose(), wts.w_q(), flops)?;
    Ok((g_wq, g_wk))
}

/// Dense value-weight gradient `X^T f^T G`.
pub fn grad_wv_dense(
    f: &DenseMatrix,
    x: &DenseMatrix,
    g: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let ftg = matmul(&f.transpose(), g, flops)?;
    matmul(&x.transpose(), &ftg, flops)
}

pub fn grad_wv_exact(
    cache: &ForwardCache,
    x: &DenseMatrix,
    g: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    grad_wv_dense(&cache.f, x, g, flops)
}

/// Element-wise activations available for the non-attention map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    GeluTanh,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            "gelu-tanh" | "gelu" => Ok(Self::GeluTanh),
            other => Err(Error::InvalidParameter {
                what: format!("unknown activation '{other}'"),
            }),
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Self::Identity => v,
            Self::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Self::GeluTanh => {
                let inner = GELU_C * (v + GELU_A * v * v * v);
                0.5 * v * (1.0 + inner.tanh())
            }
        }
    }

    pub fn derivative(&self, v: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            // subgradient at 0 taken as 0
            Self::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::GeluTanh => {
                let inner = GELU_C * (v + GELU_A * v * v * v);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            }
        }
    }
}

const GELU_A: f64 = 0.044715;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `phi(m W_g)` entry-wise.
pub fn apply_nonattention_map(
    m: &DenseMatrix,
    w_g: &DenseMatrix,
    activation: Activation,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let pre = matmul(m, w_g, flops)?;
    let mut out = DenseMatrix::zeros(pre.rows(), pre.cols());
    for i in 0..pre.rows() {
        for j in 0..pre.cols() {
            out.set(i, j, activation.apply(pre.get(i, j)));
        }
    }
    flops.add((pre.rows() * pre.cols()) as u64);
    Ok(out)
}

/// Back-propagates an upstream gradient through `phi(attn_out W_g)`:
/// returns `(g_t_next ⊙ phi'(attn_out W_g)) W_g^T`.
pub fn propagate_through_g(
    g_t_next: &DenseMatrix,
    attn_out: &DenseMatrix,
    w_g: &DenseMatrix,
    activation: Activation,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let masked = masked_upstream(g_t_next, attn_out, w_g, activation, flops)?;
    matmul(&masked, &w_g.transpose(), flops)
}

/// Gradient with respect to `W_g` itself:
/// `attn_out^T (g_t_next ⊙ phi'(attn_out W_g))`.
pub fn grad_wg(
    g_t_next: &DenseMatrix,
    attn_out: &DenseMatrix,
    w_g: &DenseMatrix,
    activation: Activation,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let masked = masked_upstream(g_t_next, attn_out, w_g, activation, flops)?;
    matmul(&attn_out.transpose(), &masked, flops)
}

fn masked_upstream(
    g_t_next: &DenseMatrix,
    attn_out: &DenseMatrix,
    w_g: &DenseMatrix,
    activation: Activation,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let pre = matmul(attn_out, w_g, flops)?;
    if g_t_next.shape() != pre.shape() {
        return Err(Error::DimensionMismatch {
            op: "propagate_through_g",
            lhs: g_t_next.shape(),
            rhs: pre.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(pre.rows(), pre.cols());
    for i in 0..pre.rows() {
        for j in 0..pre.cols() {
            out.set(i, j, g_t_next.get(i, j) * activation.derivative(pre.get(i, j)));
        }
    }
    flops.add(2 * (pre.rows() * pre.cols()) as u64);
    Ok(out)
}

/// Central-difference gradient of an arbitrary scalar function of a matrix.
pub fn finite_diff_grad(
    loss_of: impl Fn(&DenseMatrix) -> f64,
    at: &DenseMatrix,
    step: f64,
) -> DenseMatrix {
    let mut grad = DenseMatrix::zeros(at.rows(), at.cols());
    let mut probe = at.clone();
    for i in 0..at.rows() {
        for j in 0..at.cols() {
            let orig = at.get(i, j);
            probe.set(i, j, orig + step);
            let up = loss_of(&probe);
            probe.set(i, j, orig - step);
            let down = loss_of(&probe);
            probe.set(i, j, orig);
            grad.set(i, j, (up - down) / (2.0 * step));
        }
    }
    grad
}

/// Step size for finite differences: `1e-5 * max(1, |at|_inf)`.
pub fn fd_step(at: &DenseMatrix) -> f64 {
    1e-5 * at.max_abs().max(1.0)
}
