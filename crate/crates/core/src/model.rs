//! The full m-layer model: multi-head attention with optional residual
//! connections and causal masking, a forward pass that runs on either the
//! exact dense path or the factored path, and the top-down backward loop
//! producing per-layer weight gradients plus the input gradient.

use crate::causal::{
    masked_attention_parts, masked_dot_components, masked_forward_dense,
    masked_hadamard_components, MaskedAttentionFactors,
};
use crate::error::{Error, Result};
use crate::exact::{
    apply_nonattention_map, compute_k_vec, forward_parts, grad_t_dense, grad_w_dense,
    grad_wv_dense, grad_wg, loss_and_upstream, propagate_through_g, Activation, AttentionWeights,
    LossSpec,
};
use crate::fastgrad::{fast_grad_t, fast_grad_w, fast_grad_wv};
use crate::lowrank::{approx_attention_parts, KernelConfig, LowRankFactor};
use crate::matrix::{
    add, add_assign, matmul, scale as mat_scale, DenseMatrix, FlopCounter,
};

/// Which of the two gradient routes a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    Exact,
    Fast,
}

/// Resolved model shape and switches.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub layers: usize,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub use_residual: bool,
    pub use_causal: bool,
    pub activation: Activation,
    pub loss: LossSpec,
    pub kernel: KernelConfig,
    pub path: PathKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.n == 0 || self.d == 0 {
            return Err(Error::InvalidParameter {
                what: format!(
                    "layers, n, d must be positive, got m={} n={} d={}",
                    self.layers, self.n, self.d
                ),
            });
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::InvalidParameter {
                what: format!("d={} must be divisible by heads={}", self.d, self.heads),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Attention weights plus the non-attention map weight for one layer.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub attn: AttentionWeights,
    pub w_g: DenseMatrix,
}

/// All trainable weights of the model.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub layers: Vec<LayerWeights>,
}

/// Column-slice weights for one head: `w_l = w_q_l w_k_l^T` is a full d-by-d
/// matrix of rank at most `d_h`, and `w_v_l` maps into the head's output
/// columns. Activations are split, weights are sliced column-wise.
struct HeadWeights {
    w_q_l: DenseMatrix,
    w_k_l: DenseMatrix,
    w_v_l: DenseMatrix,
    w_l: DenseMatrix,
}

fn head_weights(
    lw: &LayerWeights,
    head: usize,
    d_h: usize,
    flops: &FlopCounter,
) -> Result<HeadWeights> {
    let start = head * d_h;
    let w_q_l = lw.attn.w_q().col_slice(start, d_h);
    let w_k_l = lw.attn.w_k().col_slice(start, d_h);
    let w_v_l = lw.attn.w_v().col_slice(start, d_h);
    let w_l = matmul(&w_q_l, &w_k_l.transpose(), flops)?;
    Ok(HeadWeights {
        w_q_l,
        w_k_l,
        w_v_l,
        w_l,
    })
}

/// Forward state of one head, holding whichever attention representation the
/// configured path produced.
enum HeadAttention {
    Dense(DenseMatrix),
    Factored(LowRankFactor),
    MaskedFactored(MaskedAttentionFactors),
}

struct HeadTape {
    attn: HeadAttention,
    h: DenseMatrix,
    s: DenseMatrix,
}

/// Per-layer forward cache: input, per-head state, concatenated attention
/// output, optional residual intermediate, and output.
pub struct LayerTape {
    pub t_in: DenseMatrix,
    heads: Vec<HeadTape>,
    pub attn_out: DenseMatrix,
    pub z: Option<DenseMatrix>,
    pub t_out: DenseMatrix,
}

/// Per-layer weight gradients, plus the gradient with respect to the
/// layer's input (for layer 0 this equals the model input gradient).
#[derive(Clone, Debug)]
pub struct LayerGradients {
    pub g_wq: DenseMatrix,
    pub g_wk: DenseMatrix,
    pub g_wv: DenseMatrix,
    pub g_wg: DenseMatrix,
    pub g_t_in: DenseMatrix,
}

/// Everything the backward loop produces.
#[derive(Clone, Debug)]
pub struct ModelGradients {
    pub per_layer: Vec<LayerGradients>,
    pub g_x: DenseMatrix,
}

fn forward_head(
    t_in: &DenseMatrix,
    hw: &HeadWeights,
    cfg: &ModelConfig,
    flops: &FlopCounter,
) -> Result<HeadTape> {
    let scale = 1.0 / cfg.head_dim() as f64;
    match (cfg.path, cfg.use_causal) {
        (PathKind::Exact, false) => {
            let cache = forward_parts(t_in, &hw.w_l, &hw.w_v_l, scale, flops)?;
            Ok(HeadTape {
                attn: HeadAttention::Dense(cache.f),
                h: cache.h,
                s: cache.s,
            })
        }
        (PathKind::Exact, true) => {
            let cache = masked_forward_dense(t_in, &hw.w_l, &hw.w_v_l, scale, flops)?;
            Ok(HeadTape {
                attn: HeadAttention::Dense(cache.f),
                h: cache.h,
                s: cache.s,
            })
        }
        (PathKind::Fast, false) => {
            let q_scaled = mat_scale(&matmul(t_in, &hw.w_l, flops)?, scale, flops);
            let f_lr = approx_attention_parts(&q_scaled, t_in, &cfg.kernel, flops)?;
            let h = matmul(t_in, &hw.w_v_l, flops)?;
            let s = f_lr.apply(&h, flops)?;
            Ok(HeadTape {
                attn: HeadAttention::Factored(f_lr),
                h,
                s,
            })
        }
        (PathKind::Fast, true) => {
            let q_scaled = mat_scale(&matmul(t_in, &hw.w_l, flops)?, scale, flops);
            let maf = masked_attention_parts(&q_scaled, t_in, &cfg.kernel, flops)?;
            let h = matmul(t_in, &hw.w_v_l, flops)?;
            let s = maf.apply(&h, flops)?;
            Ok(HeadTape {
                attn: HeadAttention::MaskedFactored(maf),
                h,
                s,
            })
        }
    }
}

/// Runs the model and returns the per-layer tapes plus the loss at the top.
pub fn forward(
    x: &DenseMatrix,
    weights: &ModelWeights,
    cfg: &ModelConfig,
    flops: &FlopCounter,
) -> Result<(Vec<LayerTape>, f64)> {
    cfg.validate()?;
    if weights.layers.len() != cfg.layers {
        return Err(Error::InvalidParameter {
            what: format!(
                "expected {} layers of weights, got {}",
                cfg.layers,
                weights.layers.len()
            ),
        });
    }
    let mut tapes = Vec::with_capacity(cfg.layers);
    let mut t = x.clone();
    for lw in &weights.layers {
        let tape = forward_layer(&t, lw, cfg, flops)?;
        t = tape.t_out.clone();
        tapes.push(tape);
    }
    let (loss, _) = loss_and_upstream(&t, &cfg.loss, flops)?;
    Ok((tapes, loss))
}

fn forward_layer(
    t_in: &DenseMatrix,
    lw: &LayerWeights,
    cfg: &ModelConfig,
    flops: &FlopCounter,
) -> Result<LayerTape> {
    let d_h = cfg.head_dim();
    let mut attn_out = DenseMatrix::zeros(t_in.rows(), cfg.d);
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let hw = head_weights(lw, head, d_h, flops)?;
        let tape = forward_head(t_in, &hw, cfg, flops)?;
        attn_out.set_col_slice(head * d_h, &tape.s);
        heads.push(tape);
    }

    let (z, t_out) = if cfg.use_residual {
        let z = add(t_in, &attn_out, flops)?;
        let gz = apply_nonattention_map(&z, &lw.w_g, cfg.activation, flops)?;
        let t_out = add(&z, &gz, flops)?;
        (Some(z), t_out)
    } else {
        let t_out = apply_nonattention_map(&attn_out, &lw.w_g, cfg.activation, flops)?;
        (None, t_out)
    };

    Ok(LayerTape {
        t_in: t_in.clone(),
        heads,
        attn_out,
        z,
        t_out,
    })
}

/// Forward pass starting from an arbitrary tensor at layer `start` (treated
/// as `T_{start}`), returning only the loss. Lets finite differences probe
/// the gradient at any depth.
pub fn loss_from_layer(
    t_start: &DenseMatrix,
    start: usize,
    weights: &ModelWeights,
    cfg: &ModelConfig,
    flops: &FlopCounter,
) -> Result<f64> {
    let mut t = t_start.clone();
    for lw in &weights.layers[start..] {
        t = forward_layer(&t, lw, cfg, flops)?.t_out;
    }
    Ok(loss_and_upstream(&t, &cfg.loss, flops)?.0)
}

fn backward_head(
    tape: &HeadTape,
    hw: &HeadWeights,
    t_in: &DenseMatrix,
    g_l: &DenseMatrix,
    cfg: &ModelConfig,
    flops: &FlopCounter,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    let scale = 1.0 / cfg.head_dim() as f64;
    match &tape.attn {
        HeadAttention::Dense(f) => {
            let g_t = grad_t_dense(f, &tape.h, &tape.s, t_in, &hw.w_l, &hw.w_v_l, scale, g_l, flops)?;
            let g_w = grad_w_dense(f, &tape.h, &tape.s, t_in, scale, g_l, flops)?;
            let g_v = grad_wv_dense(f, t_in, g_l, flops)?;
            Ok((g_t, g_w, g_v))
        }
        HeadAttention::Factored(f_lr) => {
            let g_t = fast_grad_t(
                t_in, &hw.w_l, &hw.w_v_l, scale, f_lr, &tape.h, &tape.s, g_l, flops,
            )?;
            let g_w = fast_grad_w(t_in, f_lr, g_l, &tape.h, scale, flops)?;
            let g_v = fast_grad_wv(t_in, f_lr, g_l, flops)?;
            Ok((g_t, g_w, g_v))
        }
        HeadAttention::MaskedFactored(maf) => {
            let k_vec = compute_k_vec(g_l, &tape.s, flops)?;
            let (d6, d2, d8, g_v) =
                masked_dot_components(maf, t_in, &hw.w_l, &hw.w_v_l, scale, g_l, &k_vec, flops)?;
            let (d7, d4, g_w) =
                masked_hadamard_components(maf, t_in, &hw.w_l, scale, g_l, &tape.h, flops)?;
            let mut g_t = d6;
            for term in [&d7, &d8, &d2, &d4] {
                add_assign(&mut g_t, term, flops)?;
            }
            Ok((g_t, g_w, g_v))
        }
    }
}

/// Top-down backward loop over the tapes of a matching forward call.
pub fn multigrad(
    tapes: &[LayerTape],
    weights: &ModelWeights,
    cfg: &ModelConfig,
    flops: &FlopCounter,
) -> Result<ModelGradients> {
    cfg.validate()?;
    if tapes.len() != cfg.layers || weights.layers.len() != cfg.layers {
        return Err(Error::InvalidParameter {
            what: format!(
                "expected {} tapes and weight layers, got {} and {}",
                cfg.layers,
                tapes.len(),
                weights.layers.len()
            ),
        });
    }
    let m = tapes.len();
    let d_h = cfg.head_dim();
    let top = &tapes[m - 1].t_out;
    let (_, mut g_t) = loss_and_upstream(top, &cfg.loss, flops)?;

    let mut per_layer = vec![None; m];
    for i in (0..m).rev() {
        let tape = &tapes[i];
        let lw = &weights.layers[i];
        let g_input = tape.z.as_ref().unwrap_or(&tape.attn_out);

        let g_prop = propagate_through_g(&g_t, g_input, &lw.w_g, cfg.activation, flops)?;
        let g_wg = grad_wg(&g_t, g_input, &lw.w_g, cfg.activation, flops)?;

        // gradient reaching the attention output; the residual adds the
        // identity branch of T_i = Z_i + g(Z_i)
        let g_attn = if cfg.use_residual {
            add(&g_t, &g_prop, flops)?
        } else {
            g_prop
        };

        let mut g_t_attn = DenseMatrix::zeros(tape.t_in.rows(), cfg.d);
        let mut g_wq = DenseMatrix::zeros(cfg.d, cfg.d);
        let mut g_wk = DenseMatrix::zeros(cfg.d, cfg.d);
        let mut g_wv = DenseMatrix::zeros(cfg.d, cfg.d);
        for head in 0..cfg.heads {
            let hw = head_weights(lw, head, d_h, flops)?;
            let g_l = g_attn.col_slice(head * d_h, d_h);
            let (g_t_head, g_w_l, g_v_l) =
                backward_head(&tape.heads[head], &hw, &tape.t_in, &g_l, cfg, flops)?;
            add_assign(&mut g_t_attn, &g_t_head, flops)?;
            g_wq.set_col_slice(head * d_h, &matmul(&g_w_l, &hw.w_k_l, flops)?);
            g_wk.set_col_slice(head * d_h, &matmul(&g_w_l.transpose(), &hw.w_q_l, flops)?);
            g_wv.set_col_slice(head * d_h, &g_v_l);
        }

        // Z_i = T_{i-1} + Attn(T_{i-1}) adds the other identity branch
        g_t = if cfg.use_residual {
            add(&g_attn, &g_t_attn, flops)?
        } else {
            g_t_attn
        };

        per_layer[i] = Some(LayerGradients {
            g_wq,
            g_wk,
            g_wv,
            g_wg,
            g_t_in: g_t.clone(),
        });
    }

    Ok(ModelGradients {
        per_layer: per_layer.into_iter().map(Option::unwrap).collect(),
        g_x: g_t,
    })
}

/// Plain SGD step over every weight matrix, rebuilding the cached combined
/// weights.
pub fn gradient_descent_step(
    weights: &ModelWeights,
    grads: &ModelGradients,
    lr: f64,
    flops: &FlopCounter,
) -> Result<ModelWeights> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidParameter {
            what: format!("learning rate must be nonnegative, got {lr}"),
        });
    }
    let mut layers = Vec::with_capacity(weights.layers.len());
    for (lw, g) in weights.layers.iter().zip(&grads.per_layer) {
        let step = |w: &DenseMatrix, grad: &DenseMatrix| -> Result<DenseMatrix> {
            let mut out = w.clone();
            for i in 0..out.rows() {
                for (o, gv) in out.row_mut(i).iter_mut().zip(grad.row(i)) {
                    *o -= lr * gv;
                }
            }
            flops.add(2 * (w.rows() * w.cols()) as u64);
            Ok(out)
        };
        let attn = AttentionWeights::new(
            step(lw.attn.w_q(), &g.g_wq)?,
            step(lw.attn.w_k(), &g.g_wk)?,
            step(lw.attn.w_v(), &g.g_wv)?,
            flops,
        )?;
        let w_g = step(&lw.w_g, &g.g_wg)?;
        layers.push(LayerWeights { attn, w_g });
    }
    Ok(ModelWeights { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{
        finite_diff_grad, fd_step, forward_exact, grad_t_exact_dterms, grad_w_exact,
        grad_wv_exact,
    };
    use crate::matrix::max_abs_diff;
    use crate::rng::{random_matrix, SeededRng};

    fn make_weights(seed: u64, m: usize, d: usize, r: f64) -> ModelWeights {
        let fl = FlopCounter::new();
        let mut rng = SeededRng::new(seed);
        let wb = r / d as f64;
        let layers = (0..m)
            .map(|_| LayerWeights {
                attn: AttentionWeights::new(
                    random_matrix(&mut rng, d, d, wb).unwrap(),
                    random_matrix(&mut rng, d, d, wb).unwrap(),
                    random_matrix(&mut rng, d, d, r).unwrap(),
                    &fl,
                )
                .unwrap(),
                w_g: random_matrix(&mut rng, d, d, r).unwrap(),
            })
            .collect();
        ModelWeights { layers }
    }

    #[allow(clippy::too_many_arguments)]
    fn make_config(
        m: usize,
        n: usize,
        d: usize,
        heads: usize,
        residual: bool,
        causal: bool,
        path: PathKind,
        degree: usize,
        loss_seed: u64,
    ) -> ModelConfig {
        let target = random_matrix(&mut SeededRng::new(loss_seed), n, d, 0.5).unwrap();
        ModelConfig {
            layers: m,
            n,
            d,
            heads,
            use_residual: residual,
            use_causal: causal,
            activation: Activation::GeluTanh,
            loss: LossSpec::squared(target),
            kernel: KernelConfig::new(degree, 0.5, d).unwrap(),
            path,
        }
    }

    #[test]
    fn config_validation() {
        let cfg = make_config(1, 4, 4, 3, false, false, PathKind::Exact, 4, 1);
        assert!(cfg.validate().is_err());
        let cfg = make_config(1, 4, 4, 2, false, false, PathKind::Exact, 4, 1);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn single_head_layer_reduces_to_plain_attention() {
        // m=1, no residual, identity activation, W_g = I: T1 equals s exactly
        let fl = FlopCounter::new();
        let n = 8;
        let d = 4;
        let x = random_matrix(&mut SeededRng::new(5), n, d, 0.5).unwrap();
        let mut weights = make_weights(6, 1, d, 0.5);
        weights.layers[0].w_g = DenseMatrix::identity(d);
        let mut cfg = make_config(1, n, d, 1, false, false, PathKind::Exact, 4, 7);
        cfg.activation = Activation::Identity;

        let (tapes, _) = forward(&x, &weights, &cfg, &fl).unwrap();
        let cache = forward_exact(&x, &weights.layers[0].attn, &fl).unwrap();
        assert_eq!(tapes[0].t_out, cache.s);
        assert_eq!(tapes[0].attn_out, cache.s);
    }

    #[test]
    fn residual_tape_invariants_hold() {
        let fl = FlopCounter::new();
        let n = 6;
        let d = 4;
        let x = random_matrix(&mut SeededRng::new(8), n, d, 0.5).unwrap();
        let weights = make_weights(9, 2, d, 0.5);
        let cfg = make_config(2, n, d, 2, true, false, PathKind::Exact, 4, 10);
        let (tapes, _) = forward(&x, &weights, &cfg, &fl).unwrap();
        for tape in &tapes {
            let z = tape.z.as_ref().unwrap();
            let want_z = add(&tape.t_in, &tape.attn_out, &fl).unwrap();
            assert!(max_abs_diff(z, &want_z) < 1e-12);
            let gz =
                apply_nonattention_map(z, &weights.layers[0].w_g, cfg.activation, &fl).unwrap();
            let _ = gz; // t_out checked against its own layer's weights below
        }
        // recompute layer 0 explicitly
        let z0 = tapes[0].z.as_ref().unwrap();
        let gz0 =
            apply_nonattention_map(z0, &weights.layers[0].w_g, cfg.activation, &fl).unwrap();
        let want_t = add(z0, &gz0, &fl).unwrap();
        assert!(max_abs_diff(&tapes[0].t_out, &want_t) < 1e-12);
    }

    #[test]
    fn single_layer_multigrad_matches_direct_bundle() {
        // m=1, no residual, single head, identity activation, W_g = I:
        // multigrad must reproduce the plain single-layer gradients exactly
        let fl = FlopCounter::new();
        let n = 8;
        let d = 4;
        let x = random_matrix(&mut SeededRng::new(15), n, d, 0.5).unwrap();
        let mut weights = make_weights(16, 1, d, 0.5);
        weights.layers[0].w_g = DenseMatrix::identity(d);
        let mut cfg = make_config(1, n, d, 1, false, false, PathKind::Exact, 4, 17);
        cfg.activation = Activation::Identity;

        let (tapes, _) = forward(&x, &weights, &cfg, &fl).unwrap();
        let grads = multigrad(&tapes, &weights, &cfg, &fl).unwrap();

        let cache = forward_exact(&x, &weights.layers[0].attn, &fl).unwrap();
        let (_, g) = loss_and_upstream(&cache.s, &cfg.loss, &fl).unwrap();
        let g_t = grad_t_exact_dterms(&cache, &x, &weights.layers[0].attn, &g, &fl).unwrap();
        let g_w = grad_w_exact(&cache, &x, &g, &fl).unwrap();
        let g_v = grad_wv_exact(&cache, &x, &g, &fl).unwrap();

        // the m=1 reduction is bit-exact, not merely close
        assert_eq!(grads.g_x, g_t);
        assert_eq!(grads.per_layer[0].g_t_in, grads.g_x);
        assert_eq!(grads.per_layer[0].g_wv, g_v);
        let (g_wq, g_wk) =
            crate::exact::grad_wq_wk_from_w(&g_w, &weights.layers[0].attn, &fl).unwrap();
        assert_eq!(grads.per_layer[0].g_wq, g_wq);
        assert_eq!(grads.per_layer[0].g_wk, g_wk);
    }

    #[test]
    fn fast_forward_matches_exact_forward() {
        let fl = FlopCounter::new();
        let n = 16;
        let d = 4;
        let x = random_matrix(&mut SeededRng::new(25), n, d, 0.5).unwrap();
        let weights = make_weights(26, 2, d, 0.5);
        let exact_cfg = make_config(2, n, d, 2, true, false, PathKind::Exact, 10, 27);
        let fast_cfg = ModelConfig {
            path: PathKind::Fast,
            ..exact_cfg.clone()
        };
        let (te, loss_e) = forward(&x, &weights, &exact_cfg, &fl).unwrap();
        let (tf, loss_f) = forward(&x, &weights, &fast_cfg, &fl).unwrap();
        assert!(max_abs_diff(&te[1].t_out, &tf[1].t_out) <= 1e-6);
        assert!((loss_e - loss_f).abs() <= 1e-6);
    }

    fn fd_model_grad_x(
        x: &DenseMatrix,
        weights: &ModelWeights,
        cfg: &ModelConfig,
    ) -> DenseMatrix {
        finite_diff_grad(
            |m| {
                let fl = FlopCounter::new();
                forward(m, weights, cfg, &fl).unwrap().1
            },
            x,
            fd_step(x),
        )
    }

    #[test]
    fn exact_path_matches_finite_differences_across_switch_lattice() {
        let n = 6;
        let d = 4;
        let x = random_matrix(&mut SeededRng::new(35), n, d, 0.5).unwrap();
        for (m, heads, residual, causal) in [
            (1, 1, false, false),
            (1, 2, true, false),
            (2, 2, false, true),
            (3, 2, true, true),
        ] {
            let weights = make_weights(36, m, d, 0.5);
            let cfg = make_config(m, n, d, heads, residual, causal, PathKind::Exact, 4, 37);
            let fl = FlopCounter::new();
            let (tapes, _) = forward(&x, &weights, &cfg, &fl).unwrap();
            let grads = multigrad(&tapes, &weights, &cfg, &fl).unwrap();
            let fd = fd_model_grad_x(&x, &weights, &cfg);
            let err = max_abs_diff(&grads.g_x, &fd);
            assert!(
                err <= 1e-5,
                "m={m} heads={heads} residual={residual} causal={causal}: {err}"
            );
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let n = 6;
        let d = 4;
        let fl = FlopCounter::new();
        let x = random_matrix(&mut SeededRng::new(45), n, d, 0.5).unwrap();
        let weights = make_weights(46, 2, d, 0.5);
        let cfg = make_config(2, n, d, 2, true, true, PathKind::Exact, 4, 47);
        let (tapes, _) = forward(&x, &weights, &cfg, &fl).unwrap();
        let grads = multigrad(&tapes, &weights, &cfg, &fl).unwrap();

        for layer in 0..2 {
            let rebuild = |which: usize, m: &DenseMatrix| -> ModelWeights {
                let fl = FlopCounter::new();
                let mut layers = weights.layers.clone();
                let lw = &layers[layer];
                let (mut wq, mut wk, mut wv, mut wg) = (
                    lw.attn.w_q().clone(),
                    lw.attn.w_k().clone(),
                    lw.attn.w_v().clone(),
                    lw.w_g.clone(),
                );
                match which {
                    0 => wq = m.clone(),
                    1 => wk = m.clone(),
                    2 => wv = m.clone(),
                    _ => wg = m.clone(),
                }
                layers[layer] = LayerWeights {
                    attn: AttentionWeights::new(wq, wk, wv, &fl).unwrap(),
                    w_g: wg,
                };
                ModelWeights { layers }
            };
            let analytic = [
                &grads.per_layer[layer].g_wq,
                &grads.per_layer[layer].g_wk,
                &grads.per_layer[layer].g_wv,
                &grads.per_layer[layer].g_wg,
            ];
            let at = [
                weights.layers[layer].attn.w_q().clone(),
                weights.layers[layer].attn.w_k().clone(),
                weights.layers[layer].attn.w_v().clone(),
                weights.layers[layer].w_g.clone(),
            ];
            for which in 0..4 {
                let fd = finite_diff_grad(
                    |m| {
                        let fl = FlopCounter::new();
                        forward(&x, &rebuild(which, m), &cfg, &fl).unwrap().1
                    },
                    &at[which],
                    fd_step(&at[which]),
                );
                let err = max_abs_diff(analytic[which], &fd);
                assert!(err <= 1e-5, "layer {layer} weight {which}: {err}");
            }
        }
    }

    #[test]
    fn fast_path_matches_exact_path_across_lattice() {
        let n = 16;
        let d = 4;
        let x = random_matrix(&mut SeededRng::new(55), n, d, 0.5).unwrap();
        for m in [1usize, 2, 3] {
            for heads in [1usize, 2] {
                for residual in [false, true] {
                    for causal in [false, true] {
                        let weights = make_weights(56, m, d, 0.5);
                        let cfg_e =
                            make_config(m, n, d, heads, residual, causal, PathKind::Exact, 10, 57);
                        let cfg_f = ModelConfig {
                            path: PathKind::Fast,
                            ..cfg_e.clone()
                        };
                        let fl = FlopCounter::new();
                        let (te, _) = forward(&x, &weights, &cfg_e, &fl).unwrap();
                        let ge = multigrad(&te, &weights, &cfg_e, &fl).unwrap();
                        let (tf, _) = forward(&x, &weights, &cfg_f, &fl).unwrap();
                        let gf = multigrad(&tf, &weights, &cfg_f, &fl).unwrap();

                        let err = max_abs_diff(&ge.g_x, &gf.g_x);
                        assert!(
                            err <= 1e-4,
                            "m={m} heads={heads} res={residual} causal={causal}: g_x {err}"
                        );
                        for i in 0..m {
                            for (a, b) in [
                                (&ge.per_layer[i].g_wq, &gf.per_layer[i].g_wq),
                                (&ge.per_layer[i].g_wk, &gf.per_layer[i].g_wk),
                                (&ge.per_layer[i].g_wv, &gf.per_layer[i].g_wv),
                                (&ge.per_layer[i].g_wg, &gf.per_layer[i].g_wg),
                            ] {
                                assert!(max_abs_diff(a, b) <= 1e-4);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn multigrad_is_deterministic() {
        let n = 12;
        let d = 4;
        let x = random_matrix(&mut SeededRng::new(65), n, d, 0.5).unwrap();
        let weights = make_weights(66, 2, d, 0.5);
        let cfg = make_config(2, n, d, 2, true, true, PathKind::Fast, 6, 67);
        let run = || {
            let fl = FlopCounter::new();
            let (tapes, _) = forward(&x, &weights, &cfg, &fl).unwrap();
            (multigrad(&tapes, &weights, &cfg, &fl).unwrap(), fl.total())
        };
        let (a, fa) = run();
        let (b, fb) = run();
        assert_eq!(fa, fb);
        assert_eq!(a.g_x, b.g_x);
        for (la, lb) in a.per_layer.iter().zip(&b.per_layer) {
            assert_eq!(la.g_wq, lb.g_wq);
            assert_eq!(la.g_wk, lb.g_wk);
            assert_eq!(la.g_wv, lb.g_wv);
            assert_eq!(la.g_wg, lb.g_wg);
        }
    }

    #[test]
    fn sgd_step_basics_and_descent() {
        let n = 16;
        let d = 4;
        let fl = FlopCounter::new();
        let x = random_matrix(&mut SeededRng::new(75), n, d, 0.5).unwrap();
        let weights = make_weights(76, 2, d, 0.5);
        let cfg = make_config(2, n, d, 2, true, false, PathKind::Fast, 6, 77);

        let (tapes, loss0) = forward(&x, &weights, &cfg, &fl).unwrap();
        let grads = multigrad(&tapes, &weights, &cfg, &fl).unwrap();

        // lr = 0 leaves weights unchanged
        let same = gradient_descent_step(&weights, &grads, 0.0, &fl).unwrap();
        assert_eq!(same.layers[0].attn.w_q(), weights.layers[0].attn.w_q());

        // zero gradients leave weights unchanged
        let zero_grads = ModelGradients {
            per_layer: (0..2)
                .map(|_| LayerGradients {
                    g_wq: DenseMatrix::zeros(d, d),
                    g_wk: DenseMatrix::zeros(d, d),
                    g_wv: DenseMatrix::zeros(d, d),
                    g_wg: DenseMatrix::zeros(d, d),
                    g_t_in: DenseMatrix::zeros(n, d),
                })
                .collect(),
            g_x: DenseMatrix::zeros(n, d),
        };
        let same = gradient_descent_step(&weights, &zero_grads, 0.5, &fl).unwrap();
        assert_eq!(same.layers[1].w_g, weights.layers[1].w_g);

        // small step does not increase the loss
        let stepped = gradient_descent_step(&weights, &grads, 1e-3, &fl).unwrap();
        let (_, loss1) = forward(&x, &stepped, &cfg, &fl).unwrap();
        assert!(loss1 <= loss0, "{loss1} > {loss0}");

        // twenty steps strictly decrease the squared loss
        let mut w = weights;
        let mut last = loss0;
        for _ in 0..20 {
            let (tapes, _) = forward(&x, &w, &cfg, &fl).unwrap();
            let grads = multigrad(&tapes, &w, &cfg, &fl).unwrap();
            w = gradient_descent_step(&w, &grads, 0.05, &fl).unwrap();
            let (_, loss) = forward(&x, &w, &cfg, &fl).unwrap();
            assert!(loss < last, "loss did not decrease: {loss} vs {last}");
            last = loss;
        }
        assert!(last < loss0);
    }

    #[test]
    fn loss_from_layer_matches_full_forward() {
        let fl = FlopCounter::new();
        let n = 8;
        let d = 4;
        let x = random_matrix(&mut SeededRng::new(85), n, d, 0.5).unwrap();
        let weights = make_weights(86, 3, d, 0.5);
        let cfg = make_config(3, n, d, 2, true, false, PathKind::Exact, 4, 87);
        let (tapes, loss) = forward(&x, &weights, &cfg, &fl).unwrap();
        let from0 = loss_from_layer(&x, 0, &weights, &cfg, &fl).unwrap();
        assert_eq!(loss, from0);
        let from2 = loss_from_layer(&tapes[1].t_out, 2, &weights, &cfg, &fl).unwrap();
        assert!((loss - from2).abs() < 1e-12);
    }
}
