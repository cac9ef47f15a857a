//! Low-rank factorization of the attention matrix through truncated Taylor
//! features of the exponential kernel, plus the factored algebra (Hadamard of
//! factored matrices via the row-wise Kronecker product) the gradient terms
//! need.

use crate::error::{Error, Result};
use crate::exact::AttentionWeights;
use crate::matrix::{
    matmul, rowwise_kron, scale as mat_scale, DenseMatrix, DiagSide, FlopCounter, diag_scale,
};

/// Default cap on feature columns. Exceeding it is a hard error: the
/// polynomial rank is only small when the hidden dimension stays small
/// relative to the sequence length, and silently truncating would corrupt
/// gradients.
pub const DEFAULT_RANK_CAP: usize = 4096;

/// Number of monomials of total degree at most `g` in `d` variables:
/// C(d + g, g), computed over the smaller side of the binomial.
pub fn monomial_count(d: usize, g: usize) -> usize {
    let k = g.min(d);
    let mut out: u128 = 1;
    for i in 1..=k {
        // running product stays exact: each prefix is itself a binomial
        out = out * (d + g - k + i) as u128 / i as u128;
    }
    out.min(usize::MAX as u128) as usize
}

/// Taylor truncation order, entry bound, and resulting feature rank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelConfig {
    pub degree: usize,
    pub bound_r: f64,
    pub rank: usize,
    pub rank_cap: usize,
}

impl KernelConfig {
    pub fn new(degree: usize, bound_r: f64, d: usize) -> Result<Self> {
        Self::with_cap(degree, bound_r, d, DEFAULT_RANK_CAP)
    }

    pub fn with_cap(degree: usize, bound_r: f64, d: usize, rank_cap: usize) -> Result<Self> {
        if !(bound_r > 0.0) {
            return Err(Error::InvalidParameter {
                what: format!("bound_r must be positive, got {bound_r}"),
            });
        }
        let rank = monomial_count(d, degree);
        if rank > rank_cap {
            return Err(Error::CapacityExceeded {
                degree,
                rank,
                cap: rank_cap,
            });
        }
        Ok(Self {
            degree,
            bound_r,
            rank,
            rank_cap,
        })
    }

    /// Score-entry bound implied by `|XW|_inf <= R` and `|X|_inf <= R`
    /// under the `1/d` scaling: every score magnitude is at most R^2.
    pub fn score_bound(&self) -> f64 {
        self.bound_r * self.bound_r
    }

    /// Worst-case truncation error of the degree-g Taylor polynomial of
    /// `exp` on `[-B, B]`: e^B * B^(g+1) / (g+1)!.
    pub fn kernel_remainder(&self) -> f64 {
        taylor_remainder(self.score_bound(), self.degree)
    }

    /// Upper bound on the resulting row-normalized attention error. The
    /// kernel truncation perturbs every entry of the positive kernel by a
    /// relative factor at most `delta = e^(2B) B^(g+1)/(g+1)!`, and row
    /// normalization turns that into an absolute error of at most
    /// `2 delta / (1 - delta)`.
    pub fn attention_error_bound(&self) -> f64 {
        let b = self.score_bound();
        let delta = (2.0 * b).exp() * pow_over_factorial(b, self.degree + 1);
        if delta >= 1.0 {
            f64::INFINITY
        } else {
            2.0 * delta / (1.0 - delta)
        }
    }
}

fn pow_over_factorial(b: f64, k: usize) -> f64 {
    // b^k / k! computed multiplicatively to avoid overflow in either part
    let mut out = 1.0;
    for i in 1..=k {
        out *= b / i as f64;
    }
    out
}

fn taylor_remainder(b: f64, g: usize) -> f64 {
    b.exp() * pow_over_factorial(b, g + 1)
}

/// Smallest degree whose Taylor remainder on the implied score range is at
/// most `eps`, with the rank it requires.
pub fn choose_degree(bound_r: f64, eps: f64, d: usize) -> Result<KernelConfig> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter {
            what: format!("eps must lie in (0,1), got {eps}"),
        });
    }
    if !(bound_r > 0.0) {
        return Err(Error::InvalidParameter {
            what: format!("bound_r must be positive, got {bound_r}"),
        });
    }
    let b = bound_r * bound_r;
    let mut g = 0;
    while taylor_remainder(b, g) > eps {
        g += 1;
        if g > 512 {
            return Err(Error::InvalidParameter {
                what: format!("no degree up to 512 reaches eps={eps} at R={bound_r}"),
            });
        }
    }
    KernelConfig::new(g, bound_r, d)
}

/// Exponent vectors of all monomials with total degree <= g in d variables,
/// ordered by total degree and then lexicographically. The order is part of
/// the factor contract: both feature matrices must agree on it.
fn monomial_exponents(d: usize, g: usize) -> Vec<Vec<u32>> {
    if d == 0 {
        // a single constant monomial
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    let mut current = vec![0u32; d];
    for total in 0..=g as u32 {
        emit(&mut out, &mut current, 0, total);
    }
    return out;

    fn emit(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, pos: usize, remaining: u32) {
        if pos + 1 == current.len() {
            current[pos] = remaining;
            out.push(current.clone());
            return;
        }
        for e in (0..=remaining).rev() {
            current[pos] = e;
            emit(out, current, pos + 1, remaining - e);
        }
        current[pos] = 0;
    }
}

/// Weighted monomial features: row i holds, for every exponent vector a,
/// `prod_j m[i,j]^a_j / sqrt(prod_j a_j!)`. With this weighting,
/// `poly_features(Q) poly_features(K)^T` equals the degree-g Taylor
/// polynomial of exp applied entry-wise to `Q K^T`.
pub fn poly_features(
    m: &DenseMatrix,
    cfg: &KernelConfig,
    flops: &FlopCounter,
) -> Result<DenseMatrix> {
    let (n, d) = m.shape();
    let exps = monomial_exponents(d, cfg.degree);
    debug_assert_eq!(exps.len(), cfg.rank);
    if cfg.rank > cfg.rank_cap {
        return Err(Error::CapacityExceeded {
            degree: cfg.degree,
            rank: cfg.rank,
            cap: cfg.rank_cap,
        });
    }

    // 1/sqrt(prod a_j!) per feature
    let weights: Vec<f64> = exps
        .iter()
        .map(|a| {
            let mut prod = 1.0;
            for &e in a {
                for i in 1..=e {
                    prod *= i as f64;
                }
            }
            1.0 / prod.sqrt()
        })
        .collect();

    let g = cfg.degree;
    let mut out = DenseMatrix::zeros(n, cfg.rank);
    let mut pows = vec![0.0; d * (g + 1)];
    for i in 0..n {
        let row = m.row(i);
        for (j, &v) in row.iter().enumerate() {
            let base = j * (g + 1);
            pows[base] = 1.0;
            for e in 1..=g {
                pows[base + e] = pows[base + e - 1] * v;
            }
        }
        flops.add((d * g) as u64);
        let orow = out.row_mut(i);
        for (feat, (a, &wgt)) in exps.iter().zip(&weights).enumerate() {
            let mut val = wgt;
            for (j, &e) in a.iter().enumerate() {
                if e > 0 {
                    val *= pows[j * (g + 1) + e as usize];
                }
            }
            orow[feat] = val;
        }
        flops.add((cfg.rank * (d + 1)) as u64);
    }
    Ok(out)
}

/// A matrix held as `u * v^T` without ever materializing the product.
#[derive(Clone, Debug)]
pub struct LowRankFactor {
    pub u: DenseMatrix,
    pub v: DenseMatrix,
    pub rank: usize,
    pub target_desc: String,
    pub est_error: f64,
}

impl LowRankFactor {
    pub fn new(u: DenseMatrix, v: DenseMatrix, target_desc: &str, est_error: f64) -> Self {
        debug_assert_eq!(u.cols(), v.cols());
        let rank = u.cols();
        Self {
            u,
            v,
            rank,
            target_desc: target_desc.to_string(),
            est_error,
        }
    }

    /// Dense `u v^T`; test/oracle use only.
    pub fn materialize(&self, flops: &FlopCounter) -> Result<DenseMatrix> {
        matmul(&self.u, &self.v.transpose(), flops)
    }

    /// `(u v^T) m` in factored order.
    pub fn apply(&self, m: &DenseMatrix, flops: &FlopCounter) -> Result<DenseMatrix> {
        let vt_m = matmul(&self.v.transpose(), m, flops)?;
        matmul(&self.u, &vt_m, flops)
    }

    /// `(u v^T)^T m` in factored order.
    pub fn apply_transpose(&self, m: &DenseMatrix, flops: &FlopCounter) -> Result<DenseMatrix> {
        let ut_m = matmul(&self.u.transpose(), m, flops)?;
        matmul(&self.v, &ut_m, flops)
    }

    /// Row sums `(u v^T) 1` evaluated in factored form.
    pub fn row_sums(&self, flops: &FlopCounter) -> Result<Vec<f64>> {
        let ones = DenseMatrix::ones(self.v.rows(), 1);
        let vt1 = matmul(&self.v.transpose(), &ones, flops)?;
        let sums = matmul(&self.u, &vt1, flops)?;
        Ok(sums.data().to_vec())
    }
}

/// Factored attention built directly from explicit score factors `q_scaled`
/// and `k_mat` with `q_scaled * k_mat^T` equal to the (already scaled) score
/// matrix. Returns `(u1, v1)` with rows of `u1 v1^T` summing to one exactly.
pub fn approx_attention_parts(
    q_scaled: &DenseMatrix,
    k_mat: &DenseMatrix,
    cfg: &KernelConfig,
    flops: &FlopCounter,
) -> Result<LowRankFactor> {
    check_score_range(q_scaled, k_mat)?;
    let u0 = poly_features(q_scaled, cfg, flops)?;
    let v0 = poly_features(k_mat, cfg, flops)?;

    // true row sums of u0 v0^T, in O(n r)
    let ones = DenseMatrix::ones(v0.rows(), 1);
    let v0t1 = matmul(&v0.transpose(), &ones, flops)?;
    let alpha = matmul(&u0, &v0t1, flops)?;
    let mut inv = vec![0.0; alpha.rows()];
    for (i, v) in alpha.data().iter().enumerate() {
        if !(*v > 0.0) {
            return Err(Error::DegenerateRowSum { row: i, sum: *v });
        }
        inv[i] = 1.0 / v;
    }
    flops.add(alpha.rows() as u64);

    let u1 = diag_scale(&inv, &u0, DiagSide::Left, flops)?;
    Ok(LowRankFactor::new(
        u1,
        v0,
        "attention",
        cfg.attention_error_bound(),
    ))
}

/// Upper-bounds the achievable score magnitude from the factor norms; scores
/// that would overflow `exp` also take the polynomial features far outside
/// their domain, so they are rejected the same way the dense path rejects
/// them.
pub(crate) fn check_score_range(q_scaled: &DenseMatrix, k_mat: &DenseMatrix) -> Result<()> {
    let cap = q_scaled.max_abs() * k_mat.max_abs() * q_scaled.cols() as f64;
    if !(cap <= crate::exact::EXP_OVERFLOW_LIMIT) {
        return Err(Error::RangeOverflow { max_score: cap });
    }
    Ok(())
}

/// Factored approximation of the single-head attention matrix. The score
/// matrix splits asymmetrically as `(X W / d) X^T`, keeping both feature
/// inputs within the configured entry bound.
pub fn approx_attention(
    x: &DenseMatrix,
    wts: &AttentionWeights,
    cfg: &KernelConfig,
    flops: &FlopCounter,
) -> Result<LowRankFactor> {
    let d = x.cols() as f64;
    let xw = matmul(x, wts.w(), flops)?;
    if xw.max_abs() > cfg.bound_r || x.max_abs() > cfg.bound_r {
        log::warn!(
            "entry bounds exceed configured R={}: |XW|={:.3e}, |X|={:.3e}; the error estimate no longer applies",
            cfg.bound_r,
            xw.max_abs(),
            x.max_abs()
        );
    }
    let q_scaled = mat_scale(&xw, 1.0 / d, flops);
    approx_attention_parts(&q_scaled, x, cfg, flops)
}

/// `(u v^T) ⊙ (p q^T)` as a single factored matrix `(u ⊘ p)(v ⊘ q)^T`.
pub fn lr_hadamard(
    a: &LowRankFactor,
    p: &DenseMatrix,
    q: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<LowRankFactor> {
    if p.rows() != a.u.rows() || q.rows() != a.v.rows() || p.cols() != q.cols() {
        return Err(Error::DimensionMismatch {
            op: "lr_hadamard",
            lhs: p.shape(),
            rhs: q.shape(),
        });
    }
    let out_rank = a.rank * p.cols();
    if out_rank > DEFAULT_RANK_CAP * 4 {
        return Err(Error::CapacityExceeded {
            degree: 0,
            rank: out_rank,
            cap: DEFAULT_RANK_CAP * 4,
        });
    }
    let u = rowwise_kron(&a.u, p, flops)?;
    let v = rowwise_kron(&a.v, q, flops)?;
    // |p q^T|_inf <= cols(p) |p|_inf |q|_inf bounds the error amplification
    let amp = p.cols() as f64 * p.max_abs() * q.max_abs();
    Ok(LowRankFactor::new(
        u,
        v,
        &format!("{} ⊙ dense", a.target_desc),
        a.est_error * amp,
    ))
}

/// Factored forms of `p1 = f ⊙ (G h^T)` and `p2 = diag(p1 1) f`, the two
/// halves of the key-query weight gradient.
pub fn lr_p_factors(
    f_lr: &LowRankFactor,
    g: &DenseMatrix,
    h: &DenseMatrix,
    flops: &FlopCounter,
) -> Result<(LowRankFactor, LowRankFactor)> {
    let p1 = lr_hadamard(f_lr, g, h, flops)?;
    let row_sums = p1.row_sums(flops)?;
    let u4 = diag_scale(&row_sums, &f_lr.u, DiagSide::Left, flops)?;
    let p2 = LowRankFactor::new(u4, f_lr.v.clone(), "p2", p1.est_error);
    Ok((p1, p2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::forward_exact;
    use crate::matrix::{max_abs_diff, hadamard};
    use crate::rng::{random_matrix, SeededRng};

    #[test]
    fn monomial_counts() {
        assert_eq!(monomial_count(1, 0), 1);
        assert_eq!(monomial_count(1, 3), 4);
        assert_eq!(monomial_count(2, 2), 6);
        assert_eq!(monomial_count(4, 10), 1001);
    }

    #[test]
    fn choose_degree_boundary_cases() {
        let cfg = choose_degree(1e-9, 0.5, 3).unwrap();
        assert_eq!(cfg.degree, 0);
        assert_eq!(cfg.rank, 1);

        let cfg = choose_degree(1.0, 1e-8, 4).unwrap();
        assert!(cfg.degree <= 16, "degree {}", cfg.degree);
        assert!(cfg.kernel_remainder() <= 1e-8);

        assert!(choose_degree(1.0, 0.0, 4).is_err());
        assert!(choose_degree(0.0, 0.5, 4).is_err());
    }

    #[test]
    fn choose_degree_monotone_in_eps() {
        let mut last = 0;
        for eps in [1e-2, 1e-4, 1e-6, 1e-8, 1e-10] {
            let cfg = choose_degree(0.7, eps, 3).unwrap();
            assert!(cfg.degree >= last);
            last = cfg.degree;
        }
    }

    #[test]
    fn capacity_cap_is_hard_error() {
        match KernelConfig::with_cap(10, 0.5, 8, 100) {
            Err(Error::CapacityExceeded { rank, cap, .. }) => {
                assert!(rank > cap);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn degree_zero_features_are_ones() {
        let fl = FlopCounter::new();
        let m = random_matrix(&mut SeededRng::new(1), 4, 2, 1.0).unwrap();
        let cfg = KernelConfig::new(0, 0.5, 2).unwrap();
        let phi = poly_features(&m, &cfg, &fl).unwrap();
        assert_eq!(phi, DenseMatrix::ones(4, 1));
    }

    #[test]
    fn degree_one_single_variable() {
        let fl = FlopCounter::new();
        let m = DenseMatrix::from_rows(&[vec![2.0], vec![-0.5]]).unwrap();
        let cfg = KernelConfig::new(1, 1.0, 1).unwrap();
        let phi = poly_features(&m, &cfg, &fl).unwrap();
        // features [1, x]
        assert_eq!(phi, DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0, -0.5]]).unwrap());
    }

    fn taylor_exp(t: f64, g: usize) -> f64 {
        let mut acc = 0.0;
        let mut term = 1.0;
        for k in 0..=g {
            if k > 0 {
                term *= t / k as f64;
            }
            acc += term;
        }
        acc
    }

    #[test]
    fn feature_product_is_truncated_taylor() {
        let fl = FlopCounter::new();
        let mut rng = SeededRng::new(5);
        for (n, d, g) in [(4, 2, 3), (8, 3, 4), (16, 3, 6)] {
            let q = random_matrix(&mut rng, n, d, 0.7).unwrap();
            let k = random_matrix(&mut rng, n, d, 0.7).unwrap();
            let cfg = KernelConfig::new(g, 1.0, d).unwrap();
            let prod = matmul(
                &poly_features(&q, &cfg, &fl).unwrap(),
                &poly_features(&k, &cfg, &fl).unwrap().transpose(),
                &fl,
            )
            .unwrap();
            let scores = matmul(&q, &k.transpose(), &fl).unwrap();
            let mut expected = DenseMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    expected.set(i, j, taylor_exp(scores.get(i, j), g));
                }
            }
            assert!(
                max_abs_diff(&prod, &expected) <= 1e-12,
                "n={n} d={d} g={g}: {}",
                max_abs_diff(&prod, &expected)
            );
        }
    }

    fn bounded_instance(seed: u64, n: usize, d: usize, r: f64) -> (DenseMatrix, AttentionWeights) {
        let fl = FlopCounter::new();
        let mut rng = SeededRng::new(seed);
        let x = random_matrix(&mut rng, n, d, r).unwrap();
        let wb = r / d as f64;
        let wts = AttentionWeights::new(
            random_matrix(&mut rng, d, d, wb).unwrap(),
            random_matrix(&mut rng, d, d, wb).unwrap(),
            random_matrix(&mut rng, d, d, r).unwrap(),
            &fl,
        )
        .unwrap();
        (x, wts)
    }

    #[test]
    fn zero_w_is_exact_at_any_degree() {
        let fl = FlopCounter::new();
        let mut rng = SeededRng::new(21);
        let n = 6;
        let x = random_matrix(&mut rng, n, 3, 0.5).unwrap();
        let zero = DenseMatrix::zeros(3, 3);
        let wts = AttentionWeights::new(zero.clone(), zero, DenseMatrix::identity(3), &fl).unwrap();
        for g in [0, 1, 4] {
            let cfg = KernelConfig::new(g, 0.5, 3).unwrap();
            let f_lr = approx_attention(&x, &wts, &cfg, &fl).unwrap();
            let dense = f_lr.materialize(&fl).unwrap();
            let uniform = mat_scale(&DenseMatrix::ones(n, n), 1.0 / n as f64, &fl);
            assert!(max_abs_diff(&dense, &uniform) < 1e-15, "g={g}");
        }
    }

    #[test]
    fn rows_sum_to_one_exactly() {
        let fl = FlopCounter::new();
        let (x, wts) = bounded_instance(31, 12, 3, 0.5);
        let cfg = KernelConfig::new(3, 0.5, 3).unwrap();
        let f_lr = approx_attention(&x, &wts, &cfg, &fl).unwrap();
        for s in f_lr.row_sums(&fl).unwrap() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_error_within_bound_and_monotone() {
        let fl = FlopCounter::new();
        let (x, wts) = bounded_instance(41, 32, 4, 0.5);
        let exact = forward_exact(&x, &wts, &fl).unwrap();
        let mut last_err = f64::INFINITY;
        let mut last_bound = f64::INFINITY;
        for g in [2, 4, 6, 8] {
            let cfg = KernelConfig::new(g, 0.5, 4).unwrap();
            let f_lr = approx_attention(&x, &wts, &cfg, &fl).unwrap();
            let err = max_abs_diff(&f_lr.materialize(&fl).unwrap(), &exact.f);
            assert!(err <= f_lr.est_error, "g={g}: {err} > {}", f_lr.est_error);
            assert!(err <= last_err);
            assert!(f_lr.est_error <= last_bound);
            last_err = err;
            last_bound = f_lr.est_error;
        }
        let cfg = KernelConfig::new(8, 0.5, 4).unwrap();
        let f_lr = approx_attention(&x, &wts, &cfg, &fl).unwrap();
        let err = max_abs_diff(&f_lr.materialize(&fl).unwrap(), &exact.f);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn degenerate_row_sum_is_an_error() {
        let fl = FlopCounter::new();
        // degree-1 Taylor of exp goes negative below t = -1; a large negative
        // score makes the approximate row sum nonpositive
        let q = DenseMatrix::from_rows(&[vec![4.0], vec![0.0]]).unwrap();
        let k = DenseMatrix::from_rows(&[vec![-4.0], vec![0.0]]).unwrap();
        let cfg = KernelConfig::new(1, 4.0, 1).unwrap();
        match approx_attention_parts(&q, &k, &cfg, &fl) {
            Err(Error::DegenerateRowSum { .. }) => {}
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn construction_cost_linear_in_n_r_d() {
        let (x, wts) = bounded_instance(51, 64, 4, 0.5);
        let cfg = KernelConfig::new(6, 0.5, 4).unwrap();
        let fl = FlopCounter::new();
        approx_attention(&x, &wts, &cfg, &fl).unwrap();
        let budget = 12 * 64 * cfg.rank * 4 + 12 * 64 * 4 * 4;
        assert!(
            fl.total() <= budget as u64,
            "flops {} over budget {budget}",
            fl.total()
        );
    }

    #[test]
    fn lr_hadamard_neutral_and_dense_check() {
        let fl = FlopCounter::new();
        let mut rng = SeededRng::new(61);
        let n = 8;
        let f = LowRankFactor::new(
            random_matrix(&mut rng, n, 3, 1.0).unwrap(),
            random_matrix(&mut rng, n, 3, 1.0).unwrap(),
            "t",
            0.0,
        );

        let ones = DenseMatrix::ones(n, 1);
        let neutral = lr_hadamard(&f, &ones, &ones, &fl).unwrap();
        assert!(
            max_abs_diff(
                &neutral.materialize(&fl).unwrap(),
                &f.materialize(&fl).unwrap()
            ) < 1e-15
        );

        let p = random_matrix(&mut rng, n, 2, 1.0).unwrap();
        let q = random_matrix(&mut rng, n, 2, 1.0).unwrap();
        let prod = lr_hadamard(&f, &p, &q, &fl).unwrap();
        assert_eq!(prod.rank, 6);
        let dense = hadamard(
            &f.materialize(&fl).unwrap(),
            &matmul(&p, &q.transpose(), &fl).unwrap(),
            &fl,
        )
        .unwrap();
        assert!(max_abs_diff(&prod.materialize(&fl).unwrap(), &dense) < 1e-13);
    }

    #[test]
    fn p_factors_match_dense_and_row_sums_cancel() {
        use crate::exact::compute_k_vec;
        use crate::matrix::sub;

        let fl = FlopCounter::new();
        let (x, wts) = bounded_instance(71, 16, 3, 0.5);
        let cache = forward_exact(&x, &wts, &fl).unwrap();
        let g = random_matrix(&mut SeededRng::new(72), 16, 3, 0.5).unwrap();

        let cfg = KernelConfig::new(8, 0.5, 3).unwrap();
        let f_lr = approx_attention(&x, &wts, &cfg, &fl).unwrap();
        let (p1, p2) = lr_p_factors(&f_lr, &g, &cache.h, &fl).unwrap();

        let q = matmul(&g, &cache.h.transpose(), &fl).unwrap();
        let dense_p1 = hadamard(&cache.f, &q, &fl).unwrap();
        let k_vec = compute_k_vec(&g, &cache.s, &fl).unwrap();
        let dense_p2 = diag_scale(&k_vec, &cache.f, DiagSide::Left, &fl).unwrap();

        assert!(max_abs_diff(&p1.materialize(&fl).unwrap(), &dense_p1) < 1e-6);
        assert!(max_abs_diff(&p2.materialize(&fl).unwrap(), &dense_p2) < 1e-6);

        // (p1 - p2) 1 == 0, evaluated in factored form
        let s1 = p1.row_sums(&fl).unwrap();
        let s2 = p2.row_sums(&fl).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a - b).abs() < 1e-10);
        }

        // zero upstream kills both factors
        let (z1, z2) = lr_p_factors(&f_lr, &DenseMatrix::zeros(16, 3), &cache.h, &fl).unwrap();
        assert!(z1.materialize(&fl).unwrap().max_abs() < 1e-15);
        assert!(z2.materialize(&fl).unwrap().max_abs() < 1e-15);
        let _ = sub;
    }

    proptest::proptest! {
        #[test]
        fn feature_identity_random(seed in 0u64..200, n in 1usize..=8, d in 1usize..=3, g in 0usize..=5) {
            let fl = FlopCounter::new();
            let mut rng = SeededRng::new(seed);
            let q = random_matrix(&mut rng, n, d, 0.8).unwrap();
            let k = random_matrix(&mut rng, n, d, 0.8).unwrap();
            let cfg = KernelConfig::new(g, 1.0, d).unwrap();
            let prod = matmul(
                &poly_features(&q, &cfg, &fl).unwrap(),
                &poly_features(&k, &cfg, &fl).unwrap().transpose(),
                &fl,
            ).unwrap();
            let scores = matmul(&q, &k.transpose(), &fl).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let want = taylor_exp(scores.get(i, j), g);
                    proptest::prop_assert!((prod.get(i, j) - want).abs() <= 1e-12);
                }
            }
        }
    }
}
