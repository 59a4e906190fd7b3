//! AutoPGD: momentum sign ascent with step halving at checkpoints.

use super::{Ctx, Job, Restart};
use crate::error::Result;
use crate::ndtape::Tensor;

const MOMENTUM: f64 = 0.75;
const RHO: f64 = 0.75;

/// Checkpoint iterations `ceil(p_j T)` with `p_0 = 0`, `p_1 = 0.22`,
/// `p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06)`.
pub(crate) fn checkpoints(steps: usize) -> Vec<usize> {
    let mut p: Vec<f64> = vec![0.0, 0.22];
    loop {
        let j = p.len() - 1;
        let next = p[j] + (p[j] - p[j - 1] - 0.03).max(0.06);
        if next > 1.0 {
            break;
        }
        p.push(next);
    }
    let mut w: Vec<usize> = p.iter().map(|&q| (q * steps as f64 - 1e-9).ceil() as usize).collect();
    w.dedup();
    w
}

pub(crate) struct AutoPgd;

impl Restart for AutoPgd {
    fn run(&self, ctx: &Ctx<'_>, job: &Job, restart: usize) -> Result<(Tensor, Vec<f64>)> {
        let m = job.rows();
        let d = job.x.shape()[1];
        let steps = ctx.cfg.steps;
        let mut noise = ctx.noise_streams(&job.ids, restart);
        let checks = checkpoints(steps);

        let mut eta = vec![2.0 * ctx.cfg.epsilon; m];
        let mut x = ctx.random_start(job, restart);
        let (mut f, g) = ctx.evaluate(&x, job, &mut noise, true)?;
        let mut g = g.expect("gradient");
        let mut best_x = x.clone();
        let mut best_f = f.clone();
        let mut best_g = g.clone();
        let mut x_prev: Tensor;
        let mut next = ctx.sign_step(&job.x, &x, &g, &eta);

        let mut increases = vec![0usize; m];
        let mut last_check = 0usize;
        let mut best_at_check = best_f.clone();
        let mut reduced_at_check = vec![false; m];

        for k in 1..=steps {
            let (fk, gk) = ctx.evaluate(&next, job, &mut noise, k < steps)?;
            x_prev = std::mem::replace(&mut x, next.clone());
            for i in 0..m {
                if fk[i] > f[i] {
                    increases[i] += 1;
                }
                if fk[i] > best_f[i] {
                    best_f[i] = fk[i];
                    best_x.data_mut()[i * d..(i + 1) * d].copy_from_slice(x.row(i));
                    if let Some(gk) = &gk {
                        best_g.data_mut()[i * d..(i + 1) * d].copy_from_slice(gk.row(i));
                    }
                }
            }
            f = fk;
            let Some(gk) = gk else { break };
            g = gk;

            if checks.contains(&k) && k > last_check {
                let window = (k - last_check) as f64;
                for i in 0..m {
                    let oscillating = (increases[i] as f64) < RHO * window;
                    let stalled = !reduced_at_check[i] && best_at_check[i] >= best_f[i];
                    reduced_at_check[i] = oscillating || stalled;
                    if reduced_at_check[i] {
                        eta[i] /= 2.0;
                        x.data_mut()[i * d..(i + 1) * d].copy_from_slice(best_x.row(i));
                        g.data_mut()[i * d..(i + 1) * d].copy_from_slice(best_g.row(i));
                    }
                    increases[i] = 0;
                    best_at_check[i] = best_f[i];
                }
                last_check = k;
            }

            let z = ctx.sign_step(&job.x, &x, &g, &eta);
            let mut cand = x.clone();
            for ((c, (&zi, &xi)), &pi) in cand
                .data_mut()
                .iter_mut()
                .zip(z.data().iter().zip(x.data()))
                .zip(x_prev.data())
            {
                *c = xi + MOMENTUM * (zi - xi) + (1.0 - MOMENTUM) * (xi - pi);
            }
            ctx.project(&job.x, &mut cand);
            next = cand;
        }
        Ok((best_x, best_f))
    }
}
