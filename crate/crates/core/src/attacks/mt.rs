//! MultiTargeted: margin ascent toward each wrong class in turn.

use super::losses::{target_order, Objective};
use super::{Ctx, Job, Restart};
use crate::error::Result;
use crate::ndtape::Tensor;

pub(crate) struct MultiTargeted;

/// Step size at iteration `t` of `steps`: `alpha`, divided by 10 at half
/// and again at three quarters of the budget.
pub(crate) fn step_size(alpha: f64, t: usize, steps: usize) -> f64 {
    let mut a = alpha;
    if 2 * t >= steps {
        a /= 10.0;
    }
    if 4 * t >= 3 * steps {
        a /= 10.0;
    }
    a
}

impl Restart for MultiTargeted {
    fn run(&self, ctx: &Ctx<'_>, job: &Job, restart: usize) -> Result<(Tensor, Vec<f64>)> {
        let scores = ctx.clean_scores(job)?;
        let c = scores.shape()[1];
        let targets: Vec<Option<usize>> = scores
            .data()
            .chunks(c)
            .zip(&job.y)
            .map(|(row, &y)| {
                let order = target_order(row, y);
                Some(order[restart % order.len()])
            })
            .collect();
        let targeted = Job {
            x: job.x.clone(),
            y: job.y.clone(),
            ids: job.ids.clone(),
            obj: Objective::Margin(targets),
        };
        let mut noise = ctx.noise_streams(&job.ids, restart);
        let mut x = ctx.random_start(job, restart);
        let steps = ctx.cfg.steps;
        for t in 0..steps {
            let (_, g) = ctx.evaluate(&x, &targeted, &mut noise, true)?;
            let a = vec![step_size(ctx.cfg.alpha, t, steps); job.rows()];
            x = ctx.sign_step(&job.x, &x, &g.expect("gradient"), &a);
        }
        let (loss, _) = ctx.evaluate(&x, &targeted, &mut noise, false)?;
        Ok((x, loss))
    }
}
