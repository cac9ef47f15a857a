//! Resolved run configuration. Every report embeds one of these, and
//! re-running an embedded config reproduces every non-timing number.

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Gradcheck,
    Errsweep,
    Scaling,
    TrainDemo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossArg {
    Ce,
    Sq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PathArg {
    Exact,
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationArg {
    Identity,
    Relu,
    GeluTanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSpec {
    pub command: Command,
    pub n: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
    pub degree: usize,
    pub degrees: Vec<usize>,
    pub n_list: Vec<usize>,
    pub residual: bool,
    pub causal: bool,
    pub loss: LossArg,
    pub path: PathArg,
    pub activation: ActivationArg,
    pub steps: usize,
    pub lr: f64,
    pub format: FormatArg,
}

impl RunSpec {
    pub fn defaults(command: Command) -> Self {
        // scaling sweeps large n, so its default kernel rank stays small and
        // the measured layer is a single one
        let (degree, layers) = match command {
            Command::Scaling => (4, 1),
            _ => (10, 2),
        };
        Self {
            command,
            n: 16,
            d: 4,
            layers,
            heads: 1,
            seed: 7,
            degree,
            degrees: vec![2, 4, 6, 8, 10],
            n_list: vec![256, 512, 1024, 2048, 4096],
            residual: false,
            causal: false,
            loss: LossArg::Sq,
            path: PathArg::Fast,
            activation: ActivationArg::GeluTanh,
            steps: 20,
            lr: 0.25,
            format: FormatArg::Json,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let strictly_increasing = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !strictly_increasing(&self.n_list) {
            return Err(HarnessError::BadSpec(
                "--n-list must be strictly increasing".into(),
            ));
        }
        if !strictly_increasing(&self.degrees) {
            return Err(HarnessError::BadSpec(
                "--degrees must be strictly increasing".into(),
            ));
        }
        if self.n == 0 || self.d == 0 || self.layers == 0 || self.heads == 0 {
            return Err(HarnessError::BadSpec(
                "n, d, layers, heads must be positive".into(),
            ));
        }
        if self.d % self.heads != 0 {
            return Err(HarnessError::BadSpec(format!(
                "d={} must be divisible by heads={}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}
