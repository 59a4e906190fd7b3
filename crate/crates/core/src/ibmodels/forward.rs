use serde::{Deserialize, Serialize};

use super::{Model, ModelKind, ModelSpec};
use crate::error::{Error, Result};
use crate::ndtape::{gaussian_reparam_sample, Tape, Tensor, Var};
use crate::rng::{fill_normal, StreamRng};

/// How class probabilities are formed from the encoder distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "samples")]
pub enum EvalMode {
    /// Decode the encoder mean.
    Mean,
    /// Average the decoder's softmax over this many reparameterized samples.
    Stochastic(usize),
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalMode::Mean => f.write_str("mean"),
            EvalMode::Stochastic(s) => write!(f, "stochastic{s}"),
        }
    }
}

/// Parses `mean`, `stochastic` (12 samples) or `stochasticS`.
impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(EvalMode::Mean),
            "stochastic" => Ok(EvalMode::Stochastic(12)),
            _ => s
                .strip_prefix("stochastic")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n > 0)
                .map(EvalMode::Stochastic)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "unknown eval mode '{s}', expected mean, stochastic or stochasticN"
                    ))
                }),
        }
    }
}

/// Estimator for the rate term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateEstimator {
    /// Closed-form KL divergence.
    #[default]
    Analytic,
    /// Monte Carlo average of the log density ratio over the same samples
    /// used by the cross-entropy term.
    Sampled,
}

/// Source of standard-normal noise for reparameterized sampling.
pub enum Noise<'a> {
    /// One stream consumed in `[sample, example, unit]` order.
    Shared(&'a mut StreamRng),
    /// One stream per example; results do not depend on batch composition.
    PerExample(&'a mut [StreamRng]),
}

impl Noise<'_> {
    /// A `[samples, n, k]` block of standard normals.
    pub fn block(&mut self, samples: usize, n: usize, k: usize) -> Result<Tensor> {
        let mut data = vec![0.0; samples * n * k];
        match self {
            Noise::Shared(rng) => fill_normal(rng, &mut data),
            Noise::PerExample(rngs) => {
                if rngs.len() != n {
                    return Err(Error::invalid(format!(
                        "{} noise streams for {n} examples",
                        rngs.len()
                    )));
                }
                for (i, rng) in rngs.iter_mut().enumerate() {
                    for s in 0..samples {
                        let at = (s * n + i) * k;
                        fill_normal(rng, &mut data[at..at + k]);
                    }
                }
            }
        }
        Tensor::new(vec![samples, n, k], data)
    }
}

/// Loss graph plus the detached values of its two components.
pub struct LossParts<'t> {
    pub loss: Var<'t>,
    pub ce: f64,
    pub rate: f64,
    /// Batch examples whose sample-averaged prediction matches the label.
    pub correct: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(probs: &Tensor, labels: &[usize]) -> usize {
    let c = probs.shape()[1];
    probs
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Model parameters recorded on a tape.
pub struct BoundModel<'m, 't> {
    spec: &'m ModelSpec,
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl Model {
    /// Record the parameters on `tape`, as leaves when `trainable`.
    pub fn bind<'m, 't>(&'m self, tape: &'t Tape, trainable: bool) -> BoundModel<'m, 't> {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundModel {
            spec: &self.spec,
            tape,
            vars,
        }
    }

    /// Encoder mean and standard deviation for a batch `[n, d]`.
    /// CEB reports unit standard deviations.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let (mu, sigma) = bound.encode(&tape.constant(x.clone()))?;
        let mu = mu.value();
        let sigma = match sigma {
            Some(s) => s.value(),
            None => Tensor::full(mu.shape().to_vec(), 1.0),
        };
        Ok((mu, sigma))
    }

    /// Class probabilities `[n, C]`. The deterministic model ignores `mode`.
    pub fn predict(&self, x: &Tensor, mode: EvalMode, noise: &mut Noise<'_>) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(x.clone());
        let probs = match (self.spec.kind, mode) {
            (ModelKind::Det, _) | (_, EvalMode::Mean) => bound.logits_mean(&x)?.softmax(),
            (_, EvalMode::Stochastic(0)) => {
                return Err(Error::invalid("stochastic prediction needs at least one sample"))
            }
            (_, EvalMode::Stochastic(s)) => {
                let logits = bound.sampled_logits(&x, s, noise)?.logits;
                logits.softmax().mean_axis(0)?
            }
        };
        Ok(probs.value())
    }

    /// Log class probabilities `[n, C]` in `mode`, evaluated without a tape
    /// the caller can see.
    pub fn log_probs(&self, x: &Tensor, mode: EvalMode, noise: &mut Noise<'_>) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        Ok(bound.scores(&tape.constant(x.clone()), mode, noise)?.value())
    }

    /// Training objective value (no gradient), with its components.
    pub fn loss_value(
        &self,
        x: &Tensor,
        labels: &[usize],
        noise: &mut Noise<'_>,
    ) -> Result<(f64, f64, f64)> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let parts = bound.loss(&tape.constant(x.clone()), labels, noise, None)?;
        Ok((parts.loss.item(), parts.ce, parts.rate))
    }
}

/// VIB objective `ce + beta * rate` with its components.
pub fn vib_loss(model: &Model, x: &Tensor, labels: &[usize], noise: &mut Noise<'_>) -> Result<(f64, f64, f64)> {
    if model.spec.kind != ModelKind::Vib {
        return Err(Error::invalid("vib_loss needs a VIB model"));
    }
    model.loss_value(x, labels, noise)
}

/// CEB objective `ce + exp(-rho) * rate` with its components.
pub fn ceb_loss(model: &Model, x: &Tensor, labels: &[usize], noise: &mut Noise<'_>) -> Result<(f64, f64, f64)> {
    if model.spec.kind != ModelKind::Ceb {
        return Err(Error::invalid("ceb_loss needs a CEB model"));
    }
    model.loss_value(x, labels, noise)
}

pub(crate) struct Sampled<'t> {
    /// `[S, n, C]`
    pub logits: Var<'t>,
    /// `[S, n, K]`
    pub z: Var<'t>,
    pub mu: Var<'t>,
    pub sigma: Option<Var<'t>>,
}

/// One-hot `[n, C]` constant.
pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

impl<'t> BoundModel<'_, 't> {
    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    /// Parameter vars in storage order.
    pub fn params(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn affine(&self, index: usize, h: &Var<'t>) -> Result<Var<'t>> {
        h.matmul(&self.vars[index])?.add(&self.vars[index + 1])
    }

    fn check_input(&self, x: &Var<'t>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.spec.input_dim {
            return Err(Error::Shape {
                op: "model input",
                lhs: shape,
                rhs: vec![0, self.spec.input_dim],
            });
        }
        Ok(())
    }

    fn trunk(&self, x: &Var<'t>) -> Result<Var<'t>> {
        self.check_input(x)?;
        let mut h = if self.spec.rescale_input {
            x.scale(2.0).add_scalar(-1.0)
        } else {
            *x
        };
        for i in 0..self.spec.hidden.len() {
            h = self.affine(2 * i, &h)?.relu();
        }
        Ok(h)
    }

    /// Encoder mean `[n, K]` and, for VIB, its standard deviation.
    /// For the deterministic model this is the bottleneck activation.
    pub fn encode(&self, x: &Var<'t>) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let h = self.trunk(x)?;
        let head = 2 * self.spec.hidden.len();
        match (self.spec.kind, self.spec.bottleneck) {
            (ModelKind::Det, None) => Ok((h, None)),
            (ModelKind::Det, Some(_)) | (ModelKind::Ceb, _) => Ok((self.affine(head, &h)?, None)),
            (ModelKind::Vib, Some(k)) => {
                let out = self.affine(head, &h)?;
                let mu = out.columns(0, k)?;
                let sigma = out.columns(k, k)?.shifted_softplus();
                Ok((mu, Some(sigma)))
            }
            (ModelKind::Vib, None) => Err(Error::invalid("VIB model without bottleneck")),
        }
    }

    pub fn decode(&self, z: &Var<'t>) -> Result<Var<'t>> {
        self.affine(self.spec.decoder_index(), z)
    }

    pub fn logits_mean(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let (mu, _) = self.encode(x)?;
        self.decode(&mu)
    }

    pub(crate) fn sampled_logits(
        &self,
        x: &Var<'t>,
        samples: usize,
        noise: &mut Noise<'_>,
    ) -> Result<Sampled<'t>> {
        let (mu, sigma) = self.encode(x)?;
        let shape = mu.shape();
        let (n, k) = (shape[0], shape[1]);
        let eps = noise.block(samples, n, k)?;
        let z = match sigma {
            Some(s) => gaussian_reparam_sample(&mu, &s, eps)?,
            None => mu.add(&self.tape.constant(eps))?,
        };
        let logits = self
            .decode(&z.reshape(vec![samples * n, k])?)?
            .reshape(vec![samples, n, self.spec.num_classes])?;
        Ok(Sampled {
            logits,
            z,
            mu,
            sigma,
        })
    }

    /// Log class probabilities `[n, C]`. In stochastic mode this is the log
    /// of the sample-averaged softmax.
    pub fn scores(&self, x: &Var<'t>, mode: EvalMode, noise: &mut Noise<'_>) -> Result<Var<'t>> {
        match (self.spec.kind, mode) {
            (ModelKind::Det, _) | (_, EvalMode::Mean) => Ok(self.logits_mean(x)?.log_softmax()),
            (_, EvalMode::Stochastic(0)) => {
                Err(Error::invalid("stochastic mode needs at least one sample"))
            }
            (_, EvalMode::Stochastic(s)) => {
                let logits = self.sampled_logits(x, s, noise)?.logits;
                Ok(logits
                    .log_softmax()
                    .logsumexp(0)?
                    .add_scalar(-(s as f64).ln()))
            }
        }
    }

    /// Training objective. `weight` overrides the spec's rate weight (used
    /// by annealing schedules).
    pub fn loss(
        &self,
        x: &Var<'t>,
        labels: &[usize],
        noise: &mut Noise<'_>,
        weight: Option<f64>,
    ) -> Result<LossParts<'t>> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let classes = self.spec.num_classes;
        let onehot = self.tape.constant(one_hot(labels, classes)?);
        if self.spec.kind == ModelKind::Det {
            let logits = self.logits_mean(x)?;
            let ce = logits.log_softmax().mul(&onehot)?.sum().scale(-1.0 / n as f64);
            return Ok(LossParts {
                correct: count_correct(&logits.value(), labels),
                ce: ce.item(),
                rate: 0.0,
                loss: ce,
            });
        }

        let s = self.spec.samples;
        let sampled = self.sampled_logits(x, s, noise)?;
        let ce = sampled
            .logits
            .log_softmax()
            .mul(&onehot)?
            .sum()
            .scale(-1.0 / (s * n) as f64);
        let rate = self.rate(&sampled, &onehot, n)?;
        let w = weight.unwrap_or_else(|| self.spec.rate_weight());
        let loss = ce.add(&rate.scale(w))?;
        let probs = mean_softmax(&sampled.logits.value(), s, n, classes);
        Ok(LossParts {
            correct: count_correct(&probs, labels),
            ce: ce.item(),
            rate: rate.item(),
            loss,
        })
    }

    fn rate(&self, sm: &Sampled<'t>, onehot: &Var<'t>, n: usize) -> Result<Var<'t>> {
        let s = self.spec.samples;
        let k = sm.mu.shape()[1];
        let inv_n = 1.0 / n as f64;
        match (self.spec.kind, self.spec.rate_estimator) {
            (ModelKind::Vib, RateEstimator::Analytic) => {
                let sigma = sm.sigma.as_ref().ok_or_else(|| Error::invalid("VIB without sigma"))?;
                let total = sm
                    .mu
                    .square()
                    .add(&sigma.square())?
                    .sub(&sigma.log().scale(2.0))?
                    .sum()
                    .add_scalar(-((n * k) as f64));
                Ok(total.scale(0.5 * inv_n))
            }
            (ModelKind::Vib, RateEstimator::Sampled) => {
                // log N(z; mu, sigma) - log N(z; 0, I); the 2π terms cancel.
                let sigma = sm.sigma.as_ref().ok_or_else(|| Error::invalid("VIB without sigma"))?;
                let standardized = sm.z.sub(&sm.mu)?.div(sigma)?.square();
                let quad = sm.z.square().sub(&standardized)?.sum().scale(0.5 / (s * n) as f64);
                let log_det = sigma.log().sum().scale(inv_n);
                quad.sub(&log_det)
            }
            (ModelKind::Ceb, estimator) => {
                let class_means = &self.vars[self.vars.len() - 1];
                let mu_y = onehot.matmul(class_means)?;
                match estimator {
                    RateEstimator::Analytic => {
                        Ok(sm.mu.sub(&mu_y)?.square().sum().scale(0.5 * inv_n))
                    }
                    RateEstimator::Sampled => {
                        let to_x = sm.z.sub(&sm.mu)?.square();
                        let to_y = sm.z.sub(&mu_y)?.square();
                        Ok(to_y.sub(&to_x)?.sum().scale(0.5 / (s * n) as f64))
                    }
                }
            }
            (ModelKind::Det, _) => Ok(self.tape.constant(Tensor::scalar(0.0))),
        }
    }
}

/// Average of per-sample softmax over the leading axis of `[S, n, C]` logits.
fn mean_softmax(logits: &Tensor, s: usize, n: usize, c: usize) -> Tensor {
    let mut out = vec![0.0; n * c];
    for (j, row) in logits.data().chunks(c).enumerate() {
        let i = j % n;
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let total: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o += (v - m).exp() / total / s as f64;
        }
    }
    Tensor::from_parts(vec![n, c], out)
}
