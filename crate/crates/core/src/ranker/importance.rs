//! Permutation feature importance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RankModel;
use crate::features::N_FEATURES;
use crate::vfc_score::{bce_loss, LossSample};

pub const IMPORTANCE_REPEATS: usize = 5;

/// Mean log-loss of the model on labeled rows.
pub fn log_loss(model: &RankModel, x: &[[f64; N_FEATURES]], y: &[bool]) -> f64 {
    let total: f64 = x
        .iter()
        .zip(y)
        .map(|(row, &l)| bce_loss(LossSample::new(model.predict_array(row), l)))
        .sum();
    total / x.len().max(1) as f64
}

/// Mean increase in log-loss when a single feature column is shuffled,
/// over [`IMPORTANCE_REPEATS`] seeded shuffles per feature.
pub fn permutation_importance(
    model: &RankModel,
    x: &[[f64; N_FEATURES]],
    y: &[bool],
    seed: u64,
) -> [f64; N_FEATURES] {
    let base = log_loss(model, x, y);
    let mut out = [0.0; N_FEATURES];
    for (f, slot) in out.iter_mut().enumerate() {
        let mut sum = 0.0;
        for r in 0..IMPORTANCE_REPEATS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((f as u64) << 32) ^ r as u64);
            let mut column: Vec<f64> = x.iter().map(|row| row[f]).collect();
            column.shuffle(&mut rng);
            let shuffled: Vec<[f64; N_FEATURES]> = x
                .iter()
                .zip(&column)
                .map(|(row, &v)| {
                    let mut row = *row;
                    row[f] = v;
                    row
                })
                .collect();
            sum += log_loss(model, &shuffled, y) - base;
        }
        *slot = sum / IMPORTANCE_REPEATS as f64;
    }
    out
}
