use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::csv_error;
use crate::attacks::{run_attack, AttackConfig, Bounds, Family};
use crate::error::{Error, Result};
use crate::ibmodels::{EvalMode, Model, Noise};
use crate::ndtape::Tensor;
use crate::rng::{self, Purpose, StreamRng};

/// Most direction draws tried before giving up on `|cos| < 0.1`.
const MAX_DIRECTION_DRAWS: u64 = 10_000;
/// Largest accepted `|cos|` between the two directions.
pub const MAX_COSINE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub epsilon: f64,
    /// Points per axis; odd so the origin is on the grid.
    pub resolution: usize,
    /// Half-width of each axis in units of ε.
    pub extent: f64,
    pub seed: u64,
    pub mode: EvalMode,
    pub bounds: Bounds,
    pub pgd_steps: usize,
    /// PGD step size; ε/4 when unset.
    pub pgd_alpha: Option<f64>,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            resolution: 51,
            extent: 1.5,
            seed: 0,
            mode: EvalMode::Mean,
            bounds: Bounds::UNIT,
            pgd_steps: 40,
            pgd_alpha: None,
        }
    }
}

impl LandscapeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.resolution == 0 || self.resolution % 2 == 0 {
            return Err(Error::invalid(format!(
                "resolution must be odd so the origin is a grid point, got {}",
                self.resolution
            )));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(Error::invalid(format!("extent must be positive, got {}", self.extent)));
        }
        if self.mode == EvalMode::Stochastic(0) {
            return Err(Error::invalid("stochastic mode needs at least one sample"));
        }
        Ok(())
    }

    /// Axis coordinates, symmetric with exact `0` and `±extent·ε` ends.
    pub fn axis(&self) -> Vec<f64> {
        let half = (self.resolution / 2) as f64;
        let reach = self.extent * self.epsilon;
        (0..self.resolution)
            .map(|i| {
                if half == 0.0 {
                    0.0
                } else {
                    reach * ((i as f64 - half) / half)
                }
            })
            .collect()
    }
}

/// Cross-entropy over the plane spanned by two unit-L∞ directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub center: Vec<f64>,
    pub label: usize,
    pub epsilon: f64,
    pub extent: f64,
    pub mode: EvalMode,
    pub seed: u64,
    /// Toward the PGD adversarial input, unless `fallback`.
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub cosine: f64,
    /// PGD left the input unchanged and both directions are random.
    pub fallback: bool,
    pub axis: Vec<f64>,
    /// `loss[i * res + j]` is the loss at `(u, v) = (axis[i], axis[j])`.
    pub loss: Vec<f64>,
    /// Corners of `max(|u|, |v|) = ε`, counter-clockwise from `(ε, ε)`.
    pub diamond: Vec<(f64, f64)>,
}

/// Everything in the grid except the loss values, for the JSON header.
#[derive(Serialize)]
struct Header<'a> {
    epsilon: f64,
    extent: f64,
    resolution: usize,
    mode: String,
    seed: u64,
    label: usize,
    fallback: bool,
    cosine: f64,
    center_loss: f64,
    diamond: &'a [(f64, f64)],
    d1: &'a [f64],
    d2: &'a [f64],
}

impl LandscapeGrid {
    pub fn resolution(&self) -> usize {
        self.axis.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.loss[i * self.resolution() + j]
    }

    pub fn center_loss(&self) -> f64 {
        let h = self.resolution() / 2;
        self.at(h, h)
    }

    /// Input at plane coordinates `(u, v)`: `clip(x + u·d1 + v·d2)`.
    pub fn point(&self, u: f64, v: f64, bounds: Bounds) -> Vec<f64> {
        plane_point(&self.center, &self.d1, &self.d2, u, v, bounds)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["u", "v", "loss"]).map_err(|e| csv_error(path, e))?;
        let res = self.resolution();
        for i in 0..res {
            for j in 0..res {
                w.write_record([
                    self.axis[i].to_string(),
                    self.axis[j].to_string(),
                    self.loss[i * res + j].to_string(),
                ])
                .map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn header_json(&self) -> Result<String> {
        let header = Header {
            epsilon: self.epsilon,
            extent: self.extent,
            resolution: self.resolution(),
            mode: self.mode.to_string(),
            seed: self.seed,
            label: self.label,
            fallback: self.fallback,
            cosine: self.cosine,
            center_loss: self.center_loss(),
            diamond: &self.diamond,
            d1: &self.d1,
            d2: &self.d2,
        };
        Ok(serde_json::to_string_pretty(&header)?)
    }

    pub fn write_header_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.header_json()?).map_err(|e| Error::io(path, e))
    }
}

fn plane_point(x: &[f64], d1: &[f64], d2: &[f64], u: f64, v: f64, bounds: Bounds) -> Vec<f64> {
    x.iter()
        .zip(d1.iter().zip(d2))
        .map(|(&x, (&a, &b))| {
            let p = x + u * a + v * b;
            match bounds {
                Bounds::Box { lo, hi } => p.clamp(lo, hi),
                Bounds::Unbounded => p,
            }
        })
        .collect()
}

/// The noise every grid point sees in stochastic mode.
fn loss_stream(seed: u64) -> StreamRng {
    rng::stream(seed, Purpose::Landscape, 0, 0, 0)
}

/// Cross-entropy of each row of `points` against `label`, all rows drawing
/// the same sampling noise.
fn batch_loss(model: &Model, points: Tensor, label: usize, mode: EvalMode, seed: u64) -> Result<Vec<f64>> {
    let n = points.shape()[0];
    let mut noise: Vec<StreamRng> = (0..n).map(|_| loss_stream(seed)).collect();
    let lp = model.log_probs(&points, mode, &mut Noise::PerExample(&mut noise))?;
    let c = lp.shape()[1];
    Ok(lp.data().chunks(c).map(|row| -row[label]).collect())
}

/// The landscape's loss at a single input; equal to the grid value wherever
/// the grid passes through `x`.
pub fn point_loss(model: &Model, x: &[f64], label: usize, mode: EvalMode, seed: u64) -> Result<f64> {
    let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(batch_loss(model, t, label, mode, seed)?[0])
}

fn unit_linf(v: &mut [f64]) {
    let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x /= m);
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn random_direction(seed: u64, which: u64, attempt: u64, d: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, Purpose::Landscape, 1 + which, attempt, 0);
    let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    unit_linf(&mut v);
    v
}

/// A random unit-L∞ direction with `|cos(d1, ·)| < 0.1`.
fn second_direction(seed: u64, d1: &[f64]) -> Result<(Vec<f64>, f64)> {
    for attempt in 0..MAX_DIRECTION_DRAWS {
        let d2 = random_direction(seed, 1, attempt, d1.len());
        let c = cosine(d1, &d2);
        if c.abs() < MAX_COSINE {
            return Ok((d2, c));
        }
    }
    Err(Error::invalid(format!(
        "no random direction with |cos| < {MAX_COSINE} in {MAX_DIRECTION_DRAWS} draws; input dimension {} is too small",
        d1.len()
    )))
}

/// Loss surface around one example along the PGD direction and a random
/// near-orthogonal direction.
pub fn loss_landscape(model: &Model, x: &[f64], label: usize, cfg: &LandscapeConfig) -> Result<LandscapeGrid> {
    cfg.validate()?;
    let d = model.spec.input_dim;
    if x.len() != d {
        return Err(Error::Shape {
            op: "loss_landscape",
            lhs: vec![x.len()],
            rhs: vec![d],
        });
    }
    if label >= model.spec.num_classes {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    let x_t = Tensor::new(vec![1, d], x.to_vec())?;
    let attack = AttackConfig {
        epsilon: cfg.epsilon,
        alpha: cfg.pgd_alpha.unwrap_or(cfg.epsilon / 4.0).max(f64::MIN_POSITIVE),
        steps: cfg.pgd_steps,
        restarts: 1,
        grad_mode: Some(cfg.mode),
        eval_mode: Some(cfg.mode),
        seed: cfg.seed,
        bounds: cfg.bounds,
        early_stop: false,
        ..AttackConfig::default()
    };
    let adv = run_attack(model, &x_t, &[label], &[0], Family::Pgd, &attack)?;
    let mut d1: Vec<f64> = adv.x_adv.data().iter().zip(x).map(|(a, b)| a - b).collect();
    let fallback = d1.iter().all(|&v| v == 0.0);
    if fallback {
        d1 = random_direction(cfg.seed, 0, 0, d);
    } else {
        unit_linf(&mut d1);
    }
    let (d2, cos) = second_direction(cfg.seed, &d1)?;

    let axis = cfg.axis();
    let res = axis.len();
    let rows: Vec<Vec<f64>> = axis
        .par_iter()
        .map(|&u| {
            let data: Vec<f64> = axis
                .iter()
                .flat_map(|&v| plane_point(x, &d1, &d2, u, v, cfg.bounds))
                .collect();
            batch_loss(model, Tensor::from_parts(vec![res, d], data), label, cfg.mode, cfg.seed)
        })
        .collect::<Result<_>>()?;
    let e = cfg.epsilon;
    Ok(LandscapeGrid {
        center: x.to_vec(),
        label,
        epsilon: e,
        extent: cfg.extent,
        mode: cfg.mode,
        seed: cfg.seed,
        d1,
        d2,
        cosine: cos,
        fallback,
        axis,
        loss: rows.concat(),
        diamond: vec![(e, e), (-e, e), (-e, -e), (e, -e)],
    })
}
