//! Seeded instance generation. Inputs are drawn with entry bound 0.5 and
//! weights with bound 0.5/d, which keeps `|X W|_inf` within the kernel
//! configuration's bound with margin.

use altgrad_core::exact::{Activation, AttentionWeights, LossSpec};
use altgrad_core::lowrank::KernelConfig;
use altgrad_core::matrix::{DenseMatrix, FlopCounter};
use altgrad_core::model::{LayerWeights, ModelConfig, ModelWeights, PathKind};
use altgrad_core::rng::{random_matrix, SeededRng};

use crate::spec::{ActivationArg, LossArg, PathArg, RunSpec};
use crate::HarnessError;

pub const ENTRY_BOUND: f64 = 0.5;
pub const VOCAB_SIZE: usize = 8;

pub struct Instance {
    pub x: DenseMatrix,
    pub weights: ModelWeights,
    pub cfg: ModelConfig,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Identity => Activation::Identity,
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::GeluTanh => Activation::GeluTanh,
        }
    }
}

impl From<PathArg> for PathKind {
    fn from(p: PathArg) -> Self {
        match p {
            PathArg::Exact => PathKind::Exact,
            PathArg::Fast => PathKind::Fast,
        }
    }
}

fn build_loss(spec: &RunSpec, rng: &mut SeededRng) -> Result<LossSpec, HarnessError> {
    match spec.loss {
        LossArg::Sq => Ok(LossSpec::squared(random_matrix(
            rng,
            spec.n,
            spec.d,
            ENTRY_BOUND,
        )?)),
        LossArg::Ce => {
            let projection = random_matrix(rng, spec.d, VOCAB_SIZE, ENTRY_BOUND)?;
            let mut target = DenseMatrix::zeros(spec.n, VOCAB_SIZE);
            for i in 0..spec.n {
                target.set(i, rng.index(VOCAB_SIZE), 1.0);
            }
            Ok(LossSpec::cross_entropy(target, projection)?)
        }
    }
}

/// Model configuration resolved from a run spec, with a freshly drawn loss
/// target.
pub fn build_config(spec: &RunSpec, rng: &mut SeededRng) -> Result<ModelConfig, HarnessError> {
    let loss = build_loss(spec, rng)?;
    Ok(ModelConfig {
        layers: spec.layers,
        n: spec.n,
        d: spec.d,
        heads: spec.heads,
        use_residual: spec.residual,
        use_causal: spec.causal,
        activation: spec.activation.into(),
        loss,
        kernel: KernelConfig::new(spec.degree, ENTRY_BOUND, spec.d)?,
        path: spec.path.into(),
    })
}

fn random_layer(rng: &mut SeededRng, d: usize) -> Result<LayerWeights, HarnessError> {
    let fl = FlopCounter::new();
    let wb = ENTRY_BOUND / d as f64;
    Ok(LayerWeights {
        attn: AttentionWeights::new(
            random_matrix(rng, d, d, wb)?,
            random_matrix(rng, d, d, wb)?,
            random_matrix(rng, d, d, wb)?,
            &fl,
        )?,
        w_g: random_matrix(rng, d, d, wb)?,
    })
}

/// Default seeded instance: random input, random per-layer weights, seeded
/// loss target.
pub fn build_instance(spec: &RunSpec) -> Result<Instance, HarnessError> {
    let mut rng = SeededRng::new(spec.seed);
    let x = random_matrix(&mut rng, spec.n, spec.d, ENTRY_BOUND)?;
    let layers = (0..spec.layers)
        .map(|_| random_layer(&mut rng, spec.d))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = build_config(spec, &mut rng)?;
    Ok(Instance {
        x,
        weights: ModelWeights { layers },
        cfg,
    })
}

/// Degenerate instance with every weight matrix set to the identity; the
/// fast path is then exact to rounding at moderate degree.
pub fn build_identity_instance(spec: &RunSpec) -> Result<Instance, HarnessError> {
    let mut rng = SeededRng::new(spec.seed);
    let x = random_matrix(&mut rng, spec.n, spec.d, ENTRY_BOUND)?;
    let fl = FlopCounter::new();
    let layers = (0..spec.layers)
        .map(|_| {
            Ok(LayerWeights {
                attn: AttentionWeights::new(
                    DenseMatrix::identity(spec.d),
                    DenseMatrix::identity(spec.d),
                    DenseMatrix::identity(spec.d),
                    &fl,
                )?,
                w_g: DenseMatrix::identity(spec.d),
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let cfg = build_config(spec, &mut rng)?;
    Ok(Instance {
        x,
        weights: ModelWeights { layers },
        cfg,
    })
}
