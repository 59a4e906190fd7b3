use super::{Ctx, Job, Restart};
use crate::error::Result;
use crate::ndtape::Tensor;

/// `x + ε sign(∇L)`, clipped to the bounds.
pub(crate) struct Fgs;

impl Restart for Fgs {
    fn run(&self, ctx: &Ctx<'_>, job: &Job, restart: usize) -> Result<(Tensor, Vec<f64>)> {
        let mut noise = ctx.noise_streams(&job.ids, restart);
        let (_, g) = ctx.evaluate(&job.x, job, &mut noise, true)?;
        let step = vec![ctx.cfg.epsilon; job.rows()];
        let x_adv = ctx.sign_step(&job.x, &job.x, &g.expect("gradient"), &step);
        let (loss, _) = ctx.evaluate(&x_adv, job, &mut noise, false)?;
        Ok((x_adv, loss))
    }
}

/// Sign-gradient ascent with projection; keeps the final iterate.
pub(crate) struct Pgd;

impl Restart for Pgd {
    fn run(&self, ctx: &Ctx<'_>, job: &Job, restart: usize) -> Result<(Tensor, Vec<f64>)> {
        let mut noise = ctx.noise_streams(&job.ids, restart);
        let step = vec![ctx.cfg.alpha; job.rows()];
        let mut x = ctx.random_start(job, restart);
        for _ in 0..ctx.cfg.steps {
            let (_, g) = ctx.evaluate(&x, job, &mut noise, true)?;
            x = ctx.sign_step(&job.x, &x, &g.expect("gradient"), &step);
        }
        let (loss, _) = ctx.evaluate(&x, job, &mut noise, false)?;
        Ok((x, loss))
    }
}
