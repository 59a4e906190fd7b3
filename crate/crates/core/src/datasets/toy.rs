//! The two synthetic binary tasks. Labels `y = -1` map to class 0 and
//! `y = +1` to class 1.
//!
//! Uniform draws use the half-open interval `(0, 1]`, so the generators never
//! emit an exact zero for `x1` or `x2` and the sign-based labelling has no ties.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::ndtape::Tensor;
use crate::rng::{self, open_unit, Purpose, StreamRng};

/// Probability that `x2` carries the label's sign in the two-feature task.
pub const X2_AGREEMENT: f64 = 0.9;
/// Half-width of the `x1` support.
pub const X1_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsiprasSpec {
    /// Probability that `x1 = y`.
    pub p: f64,
    /// Number of Gaussian features.
    pub d: usize,
    /// Gaussian mean scale; features are `N(eta * y, 1)`.
    pub eta: f64,
}

impl Default for TsiprasSpec {
    fn default() -> Self {
        Self {
            p: 0.95,
            d: 100,
            eta: 0.3,
        }
    }
}

impl TsiprasSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::invalid(format!("p must lie in (0, 1), got {}", self.p)));
        }
        if self.d == 0 {
            return Err(Error::invalid("d must be at least 1"));
        }
        if !(self.eta > 0.0) {
            return Err(Error::invalid(format!("eta must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "which", rename_all = "kebab-case")]
pub enum ToyTask {
    /// Two features: a robust `x1 ~ U(0, 10) * y` and a weakly correlated `x2`.
    Ours,
    Tsipras(TsiprasSpec),
}

fn signed_label(rng: &mut StreamRng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

fn class_of(y: f64) -> usize {
    usize::from(y > 0.0)
}

impl ToyTask {
    pub fn dim(&self) -> usize {
        match self {
            ToyTask::Ours => 2,
            ToyTask::Tsipras(spec) => spec.d + 1,
        }
    }

    pub fn provenance(&self) -> Provenance {
        match self {
            ToyTask::Ours => Provenance::ToyOurs,
            ToyTask::Tsipras(_) => Provenance::ToyTsipras,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ToyTask::Ours => Ok(()),
            ToyTask::Tsipras(spec) => spec.validate(),
        }
    }

    /// Append one `(x, class)` draw to `out`.
    pub(crate) fn draw(&self, rng: &mut StreamRng, out: &mut Vec<f64>) -> usize {
        let y = signed_label(rng);
        match self {
            ToyTask::Ours => {
                out.push(y * X1_SCALE * open_unit(rng));
                let agree = rng.random::<f64>() < X2_AGREEMENT;
                let s = if agree { y } else { -y };
                out.push(s * open_unit(rng));
            }
            ToyTask::Tsipras(spec) => {
                let agree = rng.random::<f64>() < spec.p;
                out.push(if agree { y } else { -y });
                for _ in 0..spec.d {
                    out.push(spec.eta * y + rng::standard_normal(rng));
                }
            }
        }
        class_of(y)
    }

    /// Draw `n` samples from a caller-owned stream.
    pub fn sample_with(&self, n: usize, rng: &mut StreamRng) -> Result<LabeledDataset> {
        if n == 0 {
            return Err(Error::invalid("sample size must be at least 1"));
        }
        self.validate()?;
        let mut data = Vec::with_capacity(n * self.dim());
        let labels: Vec<usize> = (0..n).map(|_| self.draw(rng, &mut data)).collect();
        LabeledDataset::new(
            Tensor::from_parts(vec![n, self.dim()], data),
            labels,
            2,
            self.provenance(),
        )
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<LabeledDataset> {
        self.sample_with(n, &mut rng::stream(seed, Purpose::Toy, 0, 0, 0))
    }
}

pub fn sample_toy_ours(n: usize, seed: u64) -> Result<LabeledDataset> {
    ToyTask::Ours.sample(n, seed)
}

pub fn sample_toy_tsipras(spec: &TsiprasSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    ToyTask::Tsipras(*spec).sample(n, seed)
}
