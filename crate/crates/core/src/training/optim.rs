use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Floor of the cosine schedule.
pub const LR_MIN: f64 = 1e-6;

/// `lr_min + (lr0 - lr_min)(1 + cos(π·step/horizon))/2`, held at `lr_min`
/// past the horizon. `lr_min` is capped at `lr0` so a zero base rate stays
/// zero throughout.
pub fn cosine_lr(step: u64, horizon: u64, lr0: f64) -> f64 {
    let lr_min = LR_MIN.min(lr0);
    if horizon == 0 || step >= horizon {
        return if horizon == 0 { lr0 } else { lr_min };
    }
    let t = step as f64 / horizon as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or infinity; nothing changed.
    SkippedNonFinite,
}

/// AdamW moments for an ordered list of parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub weight_decay: f64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>, weight_decay: f64) -> Self {
        let first_moment: Vec<Matrix> = params.into_iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        OptimizerState {
            step: 0,
            weight_decay,
            second_moment: first_moment.clone(),
            first_moment,
        }
    }

    /// Checks moment shapes against `params`.
    pub fn validate<'a>(&self, params: impl IntoIterator<Item = &'a Matrix>) -> Result<()> {
        let shapes: Vec<(usize, usize)> = params.into_iter().map(Matrix::shape).collect();
        if shapes.len() != self.first_moment.len() || shapes.len() != self.second_moment.len() {
            return Err(Error::Validation(format!(
                "optimizer holds {} moments for {} parameters",
                self.first_moment.len(),
                shapes.len()
            )));
        }
        for (i, s) in shapes.iter().enumerate() {
            if self.first_moment[i].shape() != *s || self.second_moment[i].shape() != *s {
                return Err(Error::Validation(format!(
                    "optimizer moment {i} does not match its parameter"
                )));
            }
        }
        Ok(())
    }

    /// One AdamW update. Decoupled decay `p ← p(1 - lr·wd)` happens first,
    /// then the bias-corrected adaptive step.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], lr: f64) -> Result<StepOutcome> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!(
                    "{} params, {} grads, {} moments",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        if !grads.iter().all(|g| g.all_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].values_mut();
            let v = self.second_moment[i].values_mut();
            for (k, (w, &gk)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w *= decay;
                *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(StepOutcome::Applied)
    }
}
