//! Central finite-difference checks for analytic gradients.
//!
//! ReLU and max pooling make the networks piecewise smooth. When a finite
//! difference straddles a kink the central estimate is meaningless, so an
//! entry whose discrepancy is explained by the second difference
//! `|f(x+h) + f(x-h) - 2f(x)| / h` is counted as a kink rather than an error.
//! On a smooth stretch that quantity is `h·f''`, far below the size of a
//! genuine gradient bug.

use crate::blocks::Block;
use crate::error::Result;
use crate::nn::{Mode, Parameterized};
use crate::tensor::Tensor;

/// Relative error with an absolute floor so that two vanishing gradients
/// compare as equal.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-3,
            rel: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    /// Entries whose finite difference crossed a kink.
    pub kinks: usize,
    /// Largest relative error among the remaining entries.
    pub max_rel_error: f64,
    /// Flat index (parameters first, then input) of the worst entry.
    pub worst: usize,
    /// `(analytic, numeric)` at the worst entry.
    pub worst_pair: (f64, f64),
}

impl GradReport {
    fn new() -> Self {
        GradReport {
            checked: 0,
            kinks: 0,
            max_rel_error: 0.0,
            worst: 0,
            worst_pair: (0.0, 0.0),
        }
    }

    fn record(&mut self, idx: usize, analytic: f64, f0: f64, up: f64, down: f64, tol: &Tolerance) {
        let numeric = (up - down) / (2.0 * tol.step);
        let err = relative_error(analytic, numeric, tol.floor);
        self.checked += 1;
        if err >= tol.rel && (up + down - 2.0 * f0).abs() / tol.step >= (analytic - numeric).abs() {
            self.kinks += 1;
            return;
        }
        if err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = idx;
            self.worst_pair = (analytic, numeric);
        }
    }

    pub fn passed(&self, tol: &Tolerance, max_kink_fraction: f64) -> bool {
        self.max_rel_error < tol.rel && (self.kinks as f64) <= max_kink_fraction * self.checked as f64
    }
}

/// Central difference of a scalar function along one coordinate of `x`.
pub fn central_difference(x: &mut [f64], i: usize, step: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + step;
    let up = f(x);
    x[i] = orig - step;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * step)
}

fn nth_trainable(model: &mut dyn Parameterized, mut index: usize, f: impl FnOnce(&mut f64)) {
    let mut f = Some(f);
    model.visit_params_mut(&mut |p| {
        if !p.trainable || f.is_none() {
            return;
        }
        if index < p.len() {
            (f.take().unwrap())(&mut p.value[index]);
        } else {
            index -= p.len();
        }
    });
}

fn trainable_grads(model: &dyn Parameterized) -> Vec<f64> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| {
        if p.trainable {
            out.extend_from_slice(&p.grad)
        }
    });
    out
}

/// Checks parameter and input gradients of `Σ r ⊙ block(x)` in training mode.
pub fn check_block(block: &mut dyn Block, x: &Tensor, r: &Tensor, tol: &Tolerance) -> Result<GradReport> {
    let objective = |block: &mut dyn Block, x: &Tensor| -> Result<f64> {
        let y = block.forward(x, Mode::Train)?;
        Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };
    block.zero_grad();
    let f0 = objective(block, x)?;
    let dx = block.backward(r)?;
    let grads = trainable_grads(block);
    let h = tol.step;

    let mut report = GradReport::new();
    for (i, &g) in grads.iter().enumerate() {
        let mut orig = 0.0;
        nth_trainable(block, i, |v| {
            orig = *v;
            *v = orig + h
        });
        let up = objective(block, x)?;
        nth_trainable(block, i, |v| *v = orig - h);
        let down = objective(block, x)?;
        nth_trainable(block, i, |v| *v = orig);
        report.record(i, g, f0, up, down, tol);
    }
    let mut xs = x.clone();
    for i in 0..xs.len() {
        let orig = xs.data()[i];
        xs.data_mut()[i] = orig + h;
        let up = objective(block, &xs)?;
        xs.data_mut()[i] = orig - h;
        let down = objective(block, &xs)?;
        xs.data_mut()[i] = orig;
        report.record(grads.len() + i, dx.data()[i], f0, up, down, tol);
    }
    Ok(report)
}
