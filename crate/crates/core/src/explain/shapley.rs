//! Shapley attribution of a window's reconstruction error to its cells.
//!
//! Players are the cells of the window. The value of a coalition is the mean
//! error over background windows when every cell outside the coalition is
//! replaced by the background's cell.

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{DayVector, FEATURE_COUNT};
use crate::lstm::LstmAutoencoder;
use crate::par::Execution;

/// Largest player count accepted by exact enumeration.
pub const MAX_EXACT_PLAYERS: usize = 16;

/// Anything that scores a window with a scalar error.
pub trait ErrorModel: Sync {
    fn error(&self, window: &[DayVector]) -> f64;
}

impl ErrorModel for LstmAutoencoder {
    fn error(&self, window: &[DayVector]) -> f64 {
        self.error_unchecked(window)
    }
}

/// Adapts a closure to [`ErrorModel`].
pub struct FnModel<F>(pub F);

impl<F: Fn(&[DayVector]) -> f64 + Sync> ErrorModel for FnModel<F> {
    fn error(&self, window: &[DayVector]) -> f64 {
        (self.0)(window)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ShapleyMode {
    Exact,
    Sampled { permutations: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    pub mode: ShapleyMode,
    pub background_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyValues {
    /// One row per day, one column per feature.
    pub phi: Vec<DayVector>,
    /// Mean error over the background windows.
    pub base_value: f64,
    /// Error of the unmodified window.
    pub error: f64,
}

impl ShapleyValues {
    /// Sum of |phi| over days, per feature.
    pub fn feature_importance(&self) -> DayVector {
        let mut out = [0.0; FEATURE_COUNT];
        for row in &self.phi {
            for (o, p) in out.iter_mut().zip(row) {
                *o += p.abs();
            }
        }
        out
    }
}

fn check_inputs<B: AsRef<[DayVector]>>(window: &[DayVector], background: &[B]) -> Result<()> {
    if background.is_empty() {
        return Err(Error::InvalidInput("Shapley attribution needs at least one background window".into()));
    }
    if let Some(b) = background.iter().find(|b| b.as_ref().len() != window.len()) {
        return Err(Error::InvalidInput(format!(
            "background window has {} days, expected {}",
            b.as_ref().len(),
            window.len()
        )));
    }
    Ok(())
}

fn set_cell(target: &mut [DayVector], source: &[DayVector], player: usize) {
    let (d, f) = (player / FEATURE_COUNT, player % FEATURE_COUNT);
    target[d][f] = source[d][f];
}

fn base_value<M, B>(model: &M, background: &[B]) -> f64
where
    M: ErrorModel + ?Sized,
    B: AsRef<[DayVector]>,
{
    background.iter().map(|b| model.error(b.as_ref())).sum::<f64>() / background.len() as f64
}

/// Shapley values by enumerating every coalition.
pub fn exact<M, B>(model: &M, window: &[DayVector], background: &[B]) -> Result<ShapleyValues>
where
    M: ErrorModel + ?Sized,
    B: AsRef<[DayVector]>,
{
    check_inputs(window, background)?;
    let n = window.len() * FEATURE_COUNT;
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::InvalidInput(format!(
            "exact Shapley enumeration supports at most {MAX_EXACT_PLAYERS} players, got {n}"
        )));
    }
    let mut value = vec![0.0; 1 << n];
    let mut x = window.to_vec();
    for (mask, v) in value.iter_mut().enumerate() {
        let mut total = 0.0;
        for b in background {
            let b = b.as_ref();
            for p in 0..n {
                if mask & (1 << p) != 0 {
                    set_cell(&mut x, window, p);
                } else {
                    set_cell(&mut x, b, p);
                }
            }
            total += model.error(&x);
        }
        *v = total / background.len() as f64;
    }
    // weight[k] = k! (n-k-1)! / n!
    let weight: Vec<f64> = (0..n)
        .map(|k| {
            let mut w = 1.0 / n as f64;
            for j in 1..=k {
                w *= j as f64 / (n - k - 1 + j) as f64;
            }
            w
        })
        .collect();
    let mut flat = vec![0.0; n];
    for (p, phi) in flat.iter_mut().enumerate() {
        let bit = 1usize << p;
        for mask in (0..1usize << n).filter(|m| m & bit == 0) {
            *phi += weight[mask.count_ones() as usize] * (value[mask | bit] - value[mask]);
        }
    }
    Ok(ShapleyValues {
        phi: unflatten(&flat),
        base_value: value[0],
        error: value[(1 << n) - 1],
    })
}

fn unflatten(flat: &[f64]) -> Vec<DayVector> {
    flat.chunks(FEATURE_COUNT)
        .map(|c| {
            let mut row = [0.0; FEATURE_COUNT];
            row.copy_from_slice(c);
            row
        })
        .collect()
}

/// Permutation-sampling estimate. Each permutation is paired with one
/// background window drawn uniformly, which keeps the estimator unbiased for
/// the background-averaged game.
pub fn sampled<M, B>(model: &M, window: &[DayVector], background: &[B], permutations: usize, rng: &mut ChaCha8Rng) -> Result<ShapleyValues>
where
    M: ErrorModel + ?Sized,
    B: AsRef<[DayVector]>,
{
    check_inputs(window, background)?;
    if permutations == 0 {
        return Err(Error::InvalidInput("sampled Shapley needs at least one permutation".into()));
    }
    let n = window.len() * FEATURE_COUNT;
    let mut order: Vec<usize> = (0..n).collect();
    let mut flat = vec![0.0; n];
    let mut x = Vec::with_capacity(window.len());
    for _ in 0..permutations {
        order.shuffle(rng);
        let b = background[rng.gen_range(0..background.len())].as_ref();
        x.clear();
        x.extend_from_slice(b);
        let mut prev = model.error(&x);
        for &p in &order {
            set_cell(&mut x, window, p);
            let cur = model.error(&x);
            flat[p] += cur - prev;
            prev = cur;
        }
    }
    for v in &mut flat {
        *v /= permutations as f64;
    }
    Ok(ShapleyValues {
        phi: unflatten(&flat),
        base_value: base_value(model, background),
        error: model.error(window),
    })
}

pub fn shapley_values<M, B>(model: &M, window: &[DayVector], background: &[B], mode: ShapleyMode, rng: &mut ChaCha8Rng) -> Result<ShapleyValues>
where
    M: ErrorModel + ?Sized,
    B: AsRef<[DayVector]>,
{
    match mode {
        ShapleyMode::Exact => exact(model, window, background),
        ShapleyMode::Sampled { permutations } => sampled(model, window, background, permutations, rng),
    }
}

/// Generator seed for one window, independent of scheduling.
pub fn window_seed(seed: u64, participant_id: &str, end_date: NaiveDate) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(participant_id.as_bytes());
    h.update([0]);
    h.update(end_date.to_string().as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Attribution of one window, ready for export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub participant_id: String,
    pub end_date: NaiveDate,
    /// Normalized cell values of the explained window.
    pub values: Vec<DayVector>,
    pub phi: Vec<DayVector>,
    pub base_value: f64,
    pub error: f64,
    pub feature_importance: DayVector,
    pub estimator: Estimator,
}

/// A window to explain, identified by participant and end date.
pub struct WindowRef<'a> {
    pub participant_id: &'a str,
    pub end_date: NaiveDate,
    pub values: &'a [DayVector],
}

/// Attribute many windows. Each window uses its own generator seeded from
/// `(seed, participant, end date)`, so the result does not depend on `exec`.
pub fn attribute_windows<M, B>(
    model: &M,
    windows: &[WindowRef<'_>],
    background: &[B],
    mode: ShapleyMode,
    seed: u64,
    exec: Execution,
) -> Result<Vec<AttributionMatrix>>
where
    M: ErrorModel + ?Sized,
    B: AsRef<[DayVector]> + Sync,
{
    let results = exec.map(windows, |w| {
        let mut rng = ChaCha8Rng::seed_from_u64(window_seed(seed, w.participant_id, w.end_date));
        shapley_values(model, w.values, background, mode, &mut rng).map(|s| AttributionMatrix {
            participant_id: w.participant_id.to_string(),
            end_date: w.end_date,
            values: w.values.to_vec(),
            feature_importance: s.feature_importance(),
            phi: s.phi,
            base_value: s.base_value,
            error: s.error,
            estimator: Estimator {
                mode,
                background_size: background.len(),
                seed,
            },
        })
    });
    results.into_iter().collect()
}

/// Draw up to `count` background windows without replacement, in a seeded order.
pub fn draw_background<T: Clone>(pool: &[T], count: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(count);
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Two days by three features: six players.
    fn reduced() -> Vec<DayVector> {
        vec![[0.3, -1.2, 2.0], [1.1, 0.4, -0.7]]
    }

    fn backgrounds() -> Vec<Vec<DayVector>> {
        vec![
            vec![[0.0; 3]; 2],
            vec![[0.5, 0.1, -0.2], [-0.3, 0.2, 0.4]],
            vec![[-0.4, 0.6, 0.1], [0.2, -0.5, 0.0]],
        ]
    }

    fn nonlinear(w: &[DayVector]) -> f64 {
        let a = w[0][0] * w[1][2] + (w[0][1] - w[1][1]).powi(2);
        a + w[0][2].sin() * w[1][0] + 0.5 * w[0][2].powi(2)
    }

    #[test]
    fn constant_model_gives_zero_phi() {
        let m = FnModel(|_: &[DayVector]| 3.0);
        let s = exact(&m, &reduced(), &backgrounds()).unwrap();
        assert!(s.phi.iter().flatten().all(|&p| p == 0.0));
        let s = sampled(&m, &reduced(), &backgrounds(), 50, &mut rng()).unwrap();
        assert!(s.phi.iter().flatten().all(|&p| p == 0.0));
    }

    #[test]
    fn single_cell_square() {
        let m = FnModel(|w: &[DayVector]| w[1][2] * w[1][2]);
        let mut window = vec![[0.7; 3]; 2];
        window[1][2] = 2.0;
        let s = exact(&m, &window, &[vec![[0.0; 3]; 2]]).unwrap();
        for (d, row) in s.phi.iter().enumerate() {
            for (f, &p) in row.iter().enumerate() {
                let want = if (d, f) == (1, 2) { 4.0 } else { 0.0 };
                assert!((p - want).abs() < 1e-12, "({d},{f}) = {p}");
            }
        }
    }

    #[test]
    fn efficiency_and_symmetry() {
        let m = FnModel(nonlinear);
        let s = exact(&m, &reduced(), &backgrounds()).unwrap();
        let total: f64 = s.phi.iter().flatten().sum();
        assert!((total + s.base_value - nonlinear(&reduced())).abs() < 1e-9);

        let sym = FnModel(|w: &[DayVector]| (w[0][0] + w[0][1]).powi(2));
        let window = vec![[1.0, 1.0, 5.0], [2.0, 3.0, 4.0]];
        let s = exact(&sym, &window, &[vec![[0.0; 3]; 2]]).unwrap();
        assert!((s.phi[0][0] - s.phi[0][1]).abs() < 1e-12);
        assert_eq!(s.phi[1], [0.0; 3]);
    }

    #[test]
    fn sampled_approaches_exact() {
        let m = FnModel(nonlinear);
        let ex = exact(&m, &reduced(), &backgrounds()).unwrap();
        let sa = sampled(&m, &reduced(), &backgrounds(), 2000, &mut rng()).unwrap();
        let range = ex.phi.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            - ex.phi.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b));
        let dev = ex
            .phi
            .iter()
            .flatten()
            .zip(sa.phi.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 0.05 * range, "dev {dev} range {range}");
    }

    #[test]
    fn input_errors() {
        let m = FnModel(nonlinear);
        let empty: Vec<Vec<DayVector>> = Vec::new();
        assert!(exact(&m, &reduced(), &empty).is_err());
        assert!(sampled(&m, &reduced(), &empty, 10, &mut rng()).is_err());
        let big = vec![[0.0; 3]; 7];
        assert!(exact(&m, &big, &[vec![[0.0; 3]; 7]]).is_err());
    }

    #[test]
    fn attribution_is_schedule_independent() {
        let m = FnModel(nonlinear);
        let windows = [reduced(), vec![[0.1; 3]; 2], vec![[-0.4, 0.9, 0.0], [0.0, 0.0, 1.0]]];
        let date = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        let refs: Vec<WindowRef> = windows
            .iter()
            .enumerate()
            .map(|(i, w)| WindowRef {
                participant_id: "p",
                end_date: date + chrono::Duration::days(i as i64),
                values: w,
            })
            .collect();
        let mode = ShapleyMode::Sampled { permutations: 30 };
        let a = attribute_windows(&m, &refs, &backgrounds(), mode, 9, Execution::Sequential).unwrap();
        let b = attribute_windows(&m, &refs, &backgrounds(), mode, 9, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let c = attribute_windows(&m, &refs[1..2], &backgrounds(), mode, 9, Execution::Sequential).unwrap();
        assert_eq!(c[0], a[1]);
    }

    #[test]
    fn background_draw_is_seeded_subset() {
        let pool: Vec<usize> = (0..100).collect();
        let a = draw_background(&pool, 10, 3);
        assert_eq!(a, draw_background(&pool, 10, 3));
        assert_eq!(a.len(), 10);
        assert_eq!(draw_background(&pool[..4], 10, 3).len(), 4);
    }
}
