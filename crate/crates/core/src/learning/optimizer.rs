//! Projected first-order minimizers: Adam, plain gradient descent and
//! backtracking line-search descent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Adam,
    GradientDescent,
    /// Gradient descent with an Armijo backtracking step.
    LineSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    MaxIterations,
    Stagnated,
}

/// Stopping rules shared by every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopRule {
    pub max_iter: usize,
    /// Converged once `loss <= rel_tol * initial_loss`.
    pub rel_tol: f64,
    /// Stagnated after this many steps without a relative improvement of
    /// `stagnation_rel` in the best loss.
    pub stagnation_window: usize,
    pub stagnation_rel: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { max_iter: 10_000, rel_tol: 1e-12, stagnation_window: 100, stagnation_rel: 1e-12 }
    }
}

/// Adam/GD state for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub method: Method,
    /// Per-coordinate step size.
    pub learning_rate: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
}

impl OptimizerState {
    pub fn new(method: Method, learning_rate: Vec<f64>) -> Result<Self> {
        if learning_rate.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Validation("learning rates must be positive".into()));
        }
        let n = learning_rate.len();
        Ok(Self {
            method,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            iteration: 0,
            loss_history: Vec::new(),
        })
    }

    /// One Adam or gradient step (line search is driven by [`minimize`]).
    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        self.iteration += 1;
        match self.method {
            Method::Adam => {
                let t = self.iteration as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for k in 0..x.len() {
                    self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
                    self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
                    let mhat = self.m[k] / c1;
                    let vhat = self.v[k] / c2;
                    x[k] -= self.learning_rate[k] * mhat / (vhat.sqrt() + self.epsilon);
                }
            }
            Method::GradientDescent | Method::LineSearch => {
                for k in 0..x.len() {
                    x[k] -= self.learning_rate[k] * grad[k];
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// Best iterate seen.
    pub x: Vec<f64>,
    pub loss: f64,
    pub initial_loss: f64,
    pub status: Status,
    pub iterations: usize,
    pub loss_history: Vec<f64>,
    /// Steps on which the projection changed at least one coordinate.
    pub clipped_steps: usize,
}

/// Minimizes `f` (returning loss and gradient) over the set enforced by
/// `project`, which returns true when it moved a coordinate.
pub fn minimize(
    x0: Vec<f64>,
    method: Method,
    learning_rate: Vec<f64>,
    stop: &StopRule,
    mut project: impl FnMut(&mut [f64]) -> bool,
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<Outcome> {
    if learning_rate.len() != x0.len() {
        return Err(Error::Shape("one learning rate per coordinate is required".into()));
    }
    let mut state = OptimizerState::new(method, learning_rate)?;
    let mut x = x0;
    project(&mut x);
    let (mut loss, mut grad) = f(&x)?;
    let initial = loss;
    let mut best = (loss, x.clone());
    let mut last_improvement = 0;
    let mut clipped_steps = 0;
    let mut scale = 1.0;
    state.loss_history.push(loss);
    let finish = |state: OptimizerState, best: (f64, Vec<f64>), status, clipped_steps| Outcome {
        x: best.1,
        loss: best.0,
        initial_loss: initial,
        status,
        iterations: state.iteration,
        loss_history: state.loss_history,
        clipped_steps,
    };
    for _ in 0..stop.max_iter {
        if loss <= stop.rel_tol * initial {
            return Ok(finish(state, best, Status::Converged, clipped_steps));
        }
        if !loss.is_finite() {
            return Err(Error::NotConverged(format!("loss became {loss} at step {}", state.iteration)));
        }
        let mut trial = x.clone();
        let (trial_loss, mut trial_grad);
        if method == Method::LineSearch {
            // Armijo backtracking along the projected gradient.
            let mut accepted = None;
            for _ in 0..60 {
                let mut cand = x.clone();
                for k in 0..cand.len() {
                    cand[k] -= scale * state.learning_rate[k] * grad[k];
                }
                let moved = project(&mut cand);
                let decrease: f64 = x.iter().zip(&cand).zip(&grad).map(|((a, b), g)| g * (a - b)).sum();
                let (fl, fg) = f(&cand)?;
                if fl <= loss - 1e-4 * decrease {
                    accepted = Some((cand, fl, fg, moved));
                    break;
                }
                scale *= 0.5;
            }
            state.iteration += 1;
            let Some((cand, fl, fg, moved)) = accepted else {
                state.loss_history.push(loss);
                return Ok(finish(state, best, Status::Stagnated, clipped_steps));
            };
            clipped_steps += moved as usize;
            trial = cand;
            trial_loss = fl;
            trial_grad = fg;
            scale *= 2.0;
        } else {
            state.step(&mut trial, &grad);
            clipped_steps += project(&mut trial) as usize;
            (trial_loss, trial_grad) = f(&trial)?;
        }
        x = trial;
        loss = trial_loss;
        grad = std::mem::take(&mut trial_grad);
        state.loss_history.push(loss);
        if loss < best.0 * (1.0 - stop.stagnation_rel) {
            last_improvement = state.iteration;
        }
        if loss < best.0 {
            best = (loss, x.clone());
        }
        if loss > stop.rel_tol * initial && state.iteration - last_improvement >= stop.stagnation_window {
            return Ok(finish(state, best, Status::Stagnated, clipped_steps));
        }
    }
    let status = if loss <= stop.rel_tol * initial { Status::Converged } else { Status::MaxIterations };
    Ok(finish(state, best, status, clipped_steps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let t = [3.0, -1.0];
        let loss = x.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((loss, x.iter().zip(t).map(|(a, b)| 2.0 * (a - b)).collect()))
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let mut s = OptimizerState::new(Method::Adam, vec![0.1]).unwrap();
        let mut x = [1.0];
        s.step(&mut x, &[123.0]);
        assert!((x[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn every_method_solves_a_quadratic() {
        let stop = StopRule { max_iter: 20_000, rel_tol: 1e-16, ..Default::default() };
        for (method, lr) in [(Method::Adam, 0.05), (Method::GradientDescent, 0.1), (Method::LineSearch, 1.0)] {
            let out = minimize(vec![0.0, 0.0], method, vec![lr; 2], &stop, |_| false, quadratic).unwrap();
            assert!((out.x[0] - 3.0).abs() < 1e-6 && (out.x[1] + 1.0).abs() < 1e-6, "{method:?} {:?}", out.x);
        }
    }

    #[test]
    fn projection_binds() {
        let stop = StopRule { max_iter: 5000, ..Default::default() };
        let clip = |x: &mut [f64]| {
            let before = x[0];
            x[0] = x[0].min(2.0);
            before != x[0]
        };
        let out = minimize(vec![0.0, 0.0], Method::Adam, vec![0.05; 2], &stop, clip, quadratic).unwrap();
        assert!((out.x[0] - 2.0).abs() < 1e-12);
        assert!(out.clipped_steps > 0);
        assert_eq!(out.status, Status::Stagnated);
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(OptimizerState::new(Method::Adam, vec![0.0]).is_err());
    }
}
