//! Switch-style auxiliary load-balancing loss.

use ndarray::Array2;

use super::router::RoutingRecord;
use crate::error::{Error, Result};

/// `weight * N * sum_i f_i * P_i` for a single layer, where `f_i` is the
/// top-1 dispatch fraction (held constant) and `P_i` the mean probability.
pub fn layer_balance(record: &RoutingRecord, weight: f64) -> f64 {
    balance_with_fractions(record, &record.top1_fractions(), weight)
}

/// Same as [`layer_balance`] but with externally fixed dispatch fractions.
pub fn balance_with_fractions(record: &RoutingRecord, fractions: &[f64], weight: f64) -> f64 {
    let n = record.num_experts() as f64;
    let p = record.mean_probs();
    weight * n * fractions.iter().zip(&p).map(|(f, p)| f * p).sum::<f64>()
}

/// Sum of the per-layer balance terms.
pub fn load_balance_loss(records: &[RoutingRecord], weight: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyRecord);
    }
    if records.iter().any(|r| r.num_tokens() == 0) {
        return Err(Error::EmptyRecord);
    }
    Ok(records.iter().map(|r| layer_balance(r, weight)).sum())
}

/// Gradient of the balance term with respect to each router probability.
pub fn balance_prob_grad(record: &RoutingRecord, fractions: &[f64], weight: f64) -> Array2<f64> {
    let t = record.num_tokens() as f64;
    let n = record.num_experts() as f64;
    Array2::from_shape_fn(record.probs.raw_dim(), |(_, i)| weight * n * fractions[i] / t)
}
