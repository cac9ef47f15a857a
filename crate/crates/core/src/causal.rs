//! Causal-mask support. The mask is lower-triangular and never materialized:
//! products against `M ⊙ (U0 V0^T)` run through an O(nk) prefix-sum
//! recurrence (and its suffix-sum counterpart for transposed products), and
//! every masked gradient component is expressed through those two kernels.

use crate::error::{Error, Result};
use crate::exact::compute_k_vec;
use crate::lowrank::{poly_features, KernelConfig};
use crate::matrix::{
    matmul, rowwise_kron, scale as mat_scale, sub, DenseMatrix, DiagSide, FlopCounter, diag_scale,
};

/// `(M ⊙ (U0 V0^T)) v` in exactly 4nk flops: a running sum of `v`-scaled
/// rows of `V0`, dotted against rows of `U0`.
pub fn causal_multiply_vec(
    u0: &DenseMatrix,
    v0: &DenseMatrix,
    v: &[f64],
    flops: &FlopCounter,
) -> Result<Vec<f64>> {
    check_factor_shapes("causal_multiply_vec", u0, v0, v.len())?;
    let (n, k) = u0.shape();
    let mut acc = vec![0.0; k];
    let mut y = vec![0.0; n];
    for j in 0..n {
        let vj = v[j];
        for (a, b) in acc.iter_mut().zip(v0.row(j)) {
            *a += b * vj;
        }
        y[j] = u0.row(j).iter().zip(&acc).map(|(u, a)| u * a).sum();
    }
    flops.add(4 * (n * k) as u64);
    Ok(y)
}

/// `(M ⊙ (U0 V0^T))^T v`, the suffix-sum mirror of the prefix recurrence.
pub fn causal_multiply_transpose_vec(
    u0: &DenseMatrix,
    v0: &DenseMatrix,
    v: &[f64],
    flops: &FlopCounter,
) -> Result<Vec<f64>> {
    check_factor_shapes("causal_multiply_transpose_vec", u0, v0, v.len())?;
    let (n, k) = u0.shape();
    let mut acc = vec![0.0; k];
    let mut y = vec![0.0; n];
    for j in (0..n).rev() {
        let vj = v[j];
        for (a, u) in acc.iter_mut().zip(u0.row(j)) {
            *a += u * vj;
        }
        y[j] = v0.row(j).iter().zip(&acc).map(|(b, a)| b * a).sum();
    }
    flops.add(4 * (n * k) as u64);
    Ok(y)
}

fn check_factor_shapes(
    op: &'static str,
    u0: &DenseMatrix,
    v0: &DenseMatrix,
    v_len: usize,
) -> Result<()> {
    if u0.shape() != v0.shape() || v_len != u0.rows() {
        return Err(Error::DimensionMismatch {
            op,
            lhs: u0.shape(),
            rhs: (v0.rows(), v_len),
        });
    }
    Ok(())
}

/// `(M ⊙ (U0 V0^T)) H`, all columns in one pass; each column sees the same
/// sequential prefix recurrence as the vector kernel. Cost 4nkc.
pub fn causal_multiply_mat(
    u0: &DenseMatrix,
    v0: &DenseMatrix,
    h: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    check_factor_shapes("causal_multiply_mat", u0, v0, h.rows())?;
    let (n, k) = u0.shape();
    let c = h.cols();
    let mut acc = vec![0.0; k * c];
    let mut out = DenseMatrix::zeros(n, c);
    for j in 0..n {
        let hrow = h.row(j);
        for (l, &vl) in v0.row(j).iter().enumerate() {
            let arow = &mut acc[l * c..(l + 1) * c];
            for (a, hv) in arow.iter_mut().zip(hrow) {
                *a += vl * hv;
            }
        }
        let orow = out.row_mut(j);
        for (l, &ul) in u0.row(j).iter().enumerate() {
            let arow = &acc[l * c..(l + 1) * c];
            for (o, a) in orow.iter_mut().zip(arow) {
                *o += ul * a;
            }
        }
    }
    flops.add(4 * (n * k * c) as u64);
    Ok(out)
}

/// `(M ⊙ (U0 V0^T))^T H` via the suffix recurrence.
pub fn causal_multiply_transpose_mat(
    u0: &DenseMatrix,
    v0: &DenseMatrix,
    h: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    check_factor_shapes("causal_multiply_transpose_mat", u0, v0, h.rows())?;
    let (n, k) = u0.shape();
    let c = h.cols();
    let mut acc = vec![0.0; k * c];
    let mut out = DenseMatrix::zeros(n, c);
    for j in (0..n).rev() {
        let hrow = h.row(j);
        for (l, &ul) in u0.row(j).iter().enumerate() {
            let arow = &mut acc[l * c..(l + 1) * c];
            for (a, hv) in arow.iter_mut().zip(hrow) {
                *a += ul * hv;
            }
        }
        let orow = out.row_mut(j);
        for (l, &vl) in v0.row(j).iter().enumerate() {
            let arow = &acc[l * c..(l + 1) * c];
            for (o, a) in orow.iter_mut().zip(arow) {
                *o += vl * a;
            }
        }
    }
    flops.add(4 * (n * k * c) as u64);
    Ok(out)
}

/// Unnormalized kernel factors plus inverse masked row sums. Normalization
/// is applied at each use site, never baked into the stored factors twice.
#[derive(Clone, Debug)]
pub struct MaskedAttentionFactors {
    pub u0: DenseMatrix,
    pub v0: DenseMatrix,
    pub d_inv: Vec<f64>,
}

/// Builds masked attention factors from explicit score factors, checking the
/// masked row sums stay positive.
pub fn masked_attention_parts(
    q_scaled: &DenseMatrix,
    k_mat: &DenseMatrix,
    cfg: &KernelConfig,
    flops: &FlopCounter,
) -> Result<MaskedAttentionFactors> {
    crate::lowrank::check_score_range(q_scaled, k_mat)?;
    let u0 = poly_features(q_scaled, cfg, flops)?;
    let v0 = poly_features(k_mat, cfg, flops)?;
    let ones = vec![1.0; u0.rows()];
    let sums = causal_multiply_vec(&u0, &v0, &ones, flops)?;
    let mut d_inv = vec![0.0; sums.len()];
    for (i, s) in sums.iter().enumerate() {
        if !(*s > 0.0) {
            return Err(Error::DegenerateRowSum { row: i, sum: *s });
        }
        d_inv[i] = 1.0 / s;
    }
    flops.add(d_inv.len() as u64);
    Ok(MaskedAttentionFactors { u0, v0, d_inv })
}

/// Masked attention factors for the single-head block, with the same
/// `(X W / d, X)` score split as the unmasked path.
pub fn masked_attention(
    x: &DenseMatrix,
    wts: &crate::exact::AttentionWeights,
    cfg: &KernelConfig,
    flops: &FlopCounter,
) -> Result<MaskedAttentionFactors> {
    let d = x.cols() as f64;
    let xw = matmul(x, wts.w(), flops)?;
    if xw.max_abs() > cfg.bound_r || x.max_abs() > cfg.bound_r {
        log::warn!(
            "entry bounds exceed configured R={}: |XW|={:.3e}, |X|={:.3e}",
            cfg.bound_r,
            xw.max_abs(),
            x.max_abs()
        );
    }
    let q_scaled = mat_scale(&xw, 1.0 / d, flops);
    masked_attention_parts(&q_scaled, x, cfg, flops)
}

impl MaskedAttentionFactors {
    /// `f_hat m = D^{-1} (M ⊙ (U0 V0^T)) m`.
    pub fn apply(&self, m: &DenseMatrix, flops: &FlopCounter) -> Result<DenseMatrix> {
        let masked = causal_multiply_mat(&self.u0, &self.v0, m, flops)?;
        diag_scale(&self.d_inv, &masked, DiagSide::Left, flops)
    }

    /// `f_hat^T m = (M ⊙ (U0 V0^T))^T D^{-1} m`.
    pub fn apply_transpose(&self, m: &DenseMatrix, flops: &FlopCounter) -> Result<DenseMatrix> {
        let scaled = diag_scale(&self.d_inv, m, DiagSide::Left, flops)?;
        causal_multiply_transpose_mat(&self.u0, &self.v0, &scaled, flops)
    }

    /// `(f_hat ⊙ (p q^T)) m` through the masked Kronecker identity:
    /// the normalization folds into the `U0` side before the row-wise
    /// Kronecker product.
    pub fn hadamard_apply(
        &self,
        p: &DenseMatrix,
        q: &DenseMatrix,
        m: &DenseMatrix,
        flops: &FlopCounter,
    ) -> Result<DenseMatrix> {
        let u_m = rowwise_kron(
            &diag_scale(&self.d_inv, &self.u0, DiagSide::Left, flops)?,
            p,
            flops,
        )?;
        let v_m = rowwise_kron(&self.v0, q, flops)?;
        causal_multiply_mat(&u_m, &v_m, m, flops)
    }

    /// `(f_hat^T ⊙ (p q^T)) m == (f_hat ⊙ (q p^T))^T m`.
    pub fn hadamard_apply_transpose(
        &self,
        p: &DenseMatrix,
        q: &DenseMatrix,
        m: &DenseMatrix,
        flops: &FlopCounter,
    ) -> Result<DenseMatrix> {
        let u_m = rowwise_kron(
            &diag_scale(&self.d_inv, &self.u0, DiagSide::Left, flops)?,
            q,
            flops,
        )?;
        let v_m = rowwise_kron(&self.v0, p, flops)?;
        causal_multiply_transpose_mat(&u_m, &v_m, m, flops)
    }
}

/// The "dot product" gradient components under the mask, every attention
/// product routed through the prefix/suffix kernels:
/// `(D6, D2, D8, g_v)`.
#[allow(clippy::too_many_arguments)]
pub fn masked_dot_components(
    maf: &MaskedAttentionFactors,
    x: &DenseMatrix,
    w: &DenseMatrix,
    w_v: &DenseMatrix,
    score_scale: f64,
    g: &DenseMatrix,
    k_vec: &[f64],
    flops: &FlopCounter,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix, DenseMatrix)> {
    let xw = matmul(x, w, flops)?;
    let xwt = matmul(x, &w.transpose(), flops)?;

    // D6 = -scale * f_hat^T diag(K) X W
    let kx = diag_scale(k_vec, &xw, DiagSide::Left, flops)?;
    let d6 = mat_scale(&maf.apply_transpose(&kx, flops)?, -score_scale, flops);

    // D2 = -scale * diag(K) f_hat X W^T
    let fxwt = maf.apply(&xwt, flops)?;
    let d2 = mat_scale(
        &diag_scale(k_vec, &fxwt, DiagSide::Left, flops)?,
        -score_scale,
        flops,
    );

    // D8 = f_hat^T G W_V^T and g_v = X^T (f_hat^T G)
    let ftg = maf.apply_transpose(g, flops)?;
    let d8 = matmul(&ftg, &w_v.transpose(), flops)?;
    let g_v = matmul(&x.transpose(), &ftg, flops)?;

    Ok((d6, d2, d8, g_v))
}

/// The "Hadamard product" gradient components under the mask:
/// `(D7, D4, g_w)`.
pub fn masked_hadamard_components(
    maf: &MaskedAttentionFactors,
    x: &DenseMatrix,
    w: &DenseMatrix,
    score_scale: f64,
    g: &DenseMatrix,
    h: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    let xw = matmul(x, w, flops)?;
    let xwt = matmul(x, &w.transpose(), flops)?;

    // D4 = scale * (f_hat ⊙ (G h^T)) X W^T
    let d4 = mat_scale(&maf.hadamard_apply(g, h, &xwt, flops)?, score_scale, flops);

    // D7 = scale * (f_hat^T ⊙ (h G^T)) X W
    let d7 = mat_scale(
        &maf.hadamard_apply_transpose(h, g, &xw, flops)?,
        score_scale,
        flops,
    );

    // g_w = scale * X^T (p1 - p2) X with p1 = f_hat ⊙ (G h^T) and
    // p2 = diag(p1 1) f_hat, all in factored form
    let p1x = maf.hadamard_apply(g, h, x, flops)?;
    let ones = DenseMatrix::ones(x.rows(), 1);
    let k_hat = maf.hadamard_apply(g, h, &ones, flops)?;
    let fx = maf.apply(x, flops)?;
    let p2x = diag_scale(k_hat.data(), &fx, DiagSide::Left, flops)?;
    let g_w = mat_scale(
        &matmul(&x.transpose(), &sub(&p1x, &p2x, flops)?, flops)?,
        score_scale,
        flops,
    );

    Ok((d7, d4, g_w))
}

/// Dense forward pass with the causal mask: the exact reference the factored
/// masked path is checked against.
#[derive(Clone, Debug)]
pub struct MaskedDenseCache {
    pub f: DenseMatrix,
    pub h: DenseMatrix,
    pub s: DenseMatrix,
}

pub fn masked_forward_dense(
    x: &DenseMatrix,
    w: &DenseMatrix,
    w_v: &DenseMatrix,
    score_scale: f64,
    flops: &FlopCounter,
) -> Result<MaskedDenseCache> {
    let n = x.rows();
    let xw = matmul(x, w, flops)?;
    let scores = mat_scale(&matmul(&xw, &x.transpose(), flops)?, score_scale, flops);
    let max_score = scores.max_abs();
    if max_score > 700.0 {
        return Err(Error::RangeOverflow { max_score });
    }
    let mut f = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..=i {
            let e = scores.get(i, j).exp();
            f.set(i, j, e);
            sum += e;
        }
        for j in 0..=i {
            f.set(i, j, f.get(i, j) / sum);
        }
    }
    // one exp, one add, one divide per unmasked entry
    flops.add(3 * (n * (n + 1) / 2) as u64);
    let h = matmul(x, w_v, flops)?;
    let s = matmul(&f, &h, flops)?;
    Ok(MaskedDenseCache { f, h, s })
}

/// Full masked input gradient in factored form: the five components summed
/// in the fixed (D6, D7, D8, D2, D4) order.
#[allow(clippy::too_many_arguments)]
pub fn masked_grad_t(
    maf: &MaskedAttentionFactors,
    x: &DenseMatrix,
    w: &DenseMatrix,
    w_v: &DenseMatrix,
    score_scale: f64,
    g: &DenseMatrix,
    h: &DenseMatrix,
    s: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let k_vec = compute_k_vec(g, s, flops)?;
    let (d6, d2, d8, _g_v) =
        masked_dot_components(maf, x, w, w_v, score_scale, g, &k_vec, flops)?;
    let (d7, d4, _g_w) = masked_hadamard_components(maf, x, w, score_scale, g, h, flops)?;
    let mut out = d6;
    for t in [&d7, &d8, &d2, &d4] {
        crate::matrix::add_assign(&mut out, t, flops)?;
    }
    Ok(out)
}
