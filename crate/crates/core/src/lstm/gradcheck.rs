//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mse, LstmAutoencoder};
use crate::error::{Error, Result};
use crate::features::{DayVector, FEATURE_COUNT};
use crate::par::Execution;

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is (near) zero are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// A model whose mean batch reconstruction loss has an analytic gradient.
pub trait Differentiable: Clone {
    fn parameters(&self) -> &[f64];
    fn parameters_mut(&mut self) -> &mut [f64];
    fn batch_loss(&self, batch: &[&[DayVector]]) -> f64;
    fn batch_loss_grad(&self, batch: &[&[DayVector]]) -> (f64, Vec<f64>);
}

impl Differentiable for LstmAutoencoder {
    fn parameters(&self) -> &[f64] {
        self.params()
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        self.params_mut()
    }

    fn batch_loss(&self, batch: &[&[DayVector]]) -> f64 {
        batch.iter().map(|w| self.error_unchecked(w)).sum::<f64>() / batch.len() as f64
    }

    fn batch_loss_grad(&self, batch: &[&[DayVector]]) -> (f64, Vec<f64>) {
        self.batch_grad_unchecked(batch, Execution::Sequential)
    }
}

/// Per-day affine map `y_t = A x_t + b`. Its loss is quadratic in the
/// parameters, so central differences are exact up to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStub {
    /// `A` row-major (3×3) followed by `b` (3).
    pub params: Vec<f64>,
}

impl LinearStub {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearStub {
            params: (0..FEATURE_COUNT * FEATURE_COUNT + FEATURE_COUNT)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        }
    }

    pub fn apply(&self, window: &[DayVector]) -> Vec<DayVector> {
        let n = FEATURE_COUNT;
        window
            .iter()
            .map(|x| {
                let mut y = [0.0; FEATURE_COUNT];
                for (f, yf) in y.iter_mut().enumerate() {
                    *yf = self.params[n * n + f] + (0..n).map(|k| self.params[f * n + k] * x[k]).sum::<f64>();
                }
                y
            })
            .collect()
    }
}

impl Differentiable for LinearStub {
    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn batch_loss(&self, batch: &[&[DayVector]]) -> f64 {
        batch.iter().map(|w| mse(w, &self.apply(w))).sum::<f64>() / batch.len() as f64
    }

    fn batch_loss_grad(&self, batch: &[&[DayVector]]) -> (f64, Vec<f64>) {
        let n = FEATURE_COUNT;
        let mut g = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for w in batch {
            let y = self.apply(w);
            let scale = 2.0 / (batch.len() * w.len() * n) as f64;
            for (x, yt) in w.iter().zip(&y) {
                for f in 0..n {
                    let d = (yt[f] - x[f]) * scale;
                    g[n * n + f] += d;
                    for k in 0..n {
                        g[f * n + k] += d * x[k];
                    }
                }
            }
            loss += mse(w, &y);
        }
        (loss / batch.len() as f64, g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Parameter index with the largest discrepancy.
    pub worst_index: usize,
    pub coordinates_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compare analytic gradients with central differences of step `h` over a
/// seeded sample of `coordinates` parameters (all of them if fewer exist).
pub fn gradient_check<M: Differentiable>(
    model: &M,
    window: &[DayVector],
    h: f64,
    coordinates: usize,
    seed: u64,
) -> Result<GradCheck> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {h}")));
    }
    if window.is_empty() || window.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("gradient check needs a finite, non-empty window".into()));
    }
    let batch = [window];
    let (_, analytic) = model.batch_loss_grad(&batch);
    let len = model.parameters().len();
    let indices: Vec<usize> = if coordinates >= len {
        (0..len).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, len, coordinates).into_vec();
        v.sort_unstable();
        v
    };
    let mut probe = model.clone();
    let mut worst = (0.0, 0usize);
    for &i in &indices {
        let orig = probe.parameters()[i];
        probe.parameters_mut()[i] = orig + h;
        let up = probe.batch_loss(&batch);
        probe.parameters_mut()[i] = orig - h;
        let down = probe.batch_loss(&batch);
        probe.parameters_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheck {
        max_relative_error: worst.0,
        worst_index: worst.1,
        coordinates_checked: indices.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(seed: u64, days: usize) -> Vec<DayVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..days)
            .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
            .collect()
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let model = LstmAutoencoder::init(4, 7).unwrap();
        let check = gradient_check(&model, &window(1, 7), 1e-5, usize::MAX, 0).unwrap();
        assert_eq!(check.coordinates_checked, model.layout().len());
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }

    #[test]
    fn sampled_coordinates() {
        let model = LstmAutoencoder::init(8, 3).unwrap();
        let check = gradient_check(&model, &window(2, 7), 1e-5, 200, 1).unwrap();
        assert_eq!(check.coordinates_checked, 200);
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }

    #[test]
    fn linear_stub_is_exact() {
        let stub = LinearStub::random(5);
        let check = gradient_check(&stub, &window(3, 7), 1e-5, usize::MAX, 0).unwrap();
        assert!(check.max_relative_error < 1e-8, "{check:?}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let stub = LinearStub::random(5);
        assert!(gradient_check(&stub, &window(3, 7), 0.0, 10, 0).is_err());
        assert!(gradient_check(&stub, &window(3, 7), -1e-5, 10, 0).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
