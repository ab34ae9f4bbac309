//! PPO objectives in two forms: plain functions over slices, and tape
//! versions that share the same per-record terms.

use iwol_neural::{Tape, Var};

use crate::error::{contract, Result};
use crate::iwol::VariantMode;

/// `0.5·a²` for `|a| ≤ δ`, else `δ·(|a| − 0.5·δ)`.
pub fn huber(a: f64, delta: f64) -> f64 {
    if a.abs() <= delta {
        0.5 * a * a
    } else {
        delta * (a.abs() - 0.5 * delta)
    }
}

fn huber_grad(a: f64, delta: f64) -> f64 {
    if a.abs() <= delta {
        a
    } else {
        delta * a.signum()
    }
}

/// Negated clipped surrogate for one record and its derivative with respect
/// to the new log-probability.
pub fn clipped_surrogate(logp_new: f64, logp_old: f64, adv: f64, clip_eps: f64) -> (f64, f64) {
    let ratio = (logp_new - logp_old).exp();
    let clipped_ratio = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    let unclipped = ratio * adv;
    let clipped = clipped_ratio * adv;
    if unclipped <= clipped {
        (-unclipped, -adv * ratio)
    } else {
        let inside = ratio > 1.0 - clip_eps && ratio < 1.0 + clip_eps;
        (-clipped, if inside { -adv * ratio } else { 0.0 })
    }
}

/// Clipped Huber value term for one record and its derivative with respect
/// to the new value.
pub fn clipped_value_term(v: f64, v_old: f64, ret: f64, clip_eps: f64, delta: f64) -> (f64, f64) {
    let diff = v - v_old;
    let v_clip = v_old + diff.clamp(-clip_eps, clip_eps);
    let plain = huber(ret - v, delta);
    let clipped = huber(ret - v_clip, delta);
    if plain >= clipped {
        (plain, -huber_grad(ret - v, delta))
    } else {
        let inside = diff > -clip_eps && diff < clip_eps;
        (clipped, if inside { -huber_grad(ret - v_clip, delta) } else { 0.0 })
    }
}

fn weighted_mean(weights: &[f64], mut term: impl FnMut(usize) -> f64) -> f64 {
    let total: f64 = weights.iter().filter(|w| **w != 0.0).sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            acc += w * term(i);
        }
    }
    acc / total
}

fn all_finite(slices: &[&[f64]]) -> bool {
    slices.iter().all(|s| s.iter().all(|x| x.is_finite()))
}

/// Mean over weighted records of the negated clipped surrogate minus
/// `entropy_coef · entropy`.
pub fn policy_loss(
    logp_new: &[f64],
    logp_old: &[f64],
    adv: &[f64],
    entropy: &[f64],
    weights: &[f64],
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<f64> {
    let n = weights.len();
    if [logp_new.len(), logp_old.len(), adv.len(), entropy.len()].iter().any(|&l| l != n) {
        return Err(contract("policy_loss inputs differ in length"));
    }
    if !(clip_eps > 0.0) {
        return Err(contract("clip_eps must be positive"));
    }
    if !all_finite(&[logp_new, logp_old, adv, entropy, weights]) {
        return Err(contract("policy_loss received non-finite inputs"));
    }
    Ok(weighted_mean(weights, |i| {
        clipped_surrogate(logp_new[i], logp_old[i], adv[i], clip_eps).0 - entropy_coef * entropy[i]
    }))
}

/// Mean over weighted records of the clipped Huber value loss.
pub fn value_loss(v_new: &[f64], v_old: &[f64], returns: &[f64], weights: &[f64], clip_eps: f64, delta: f64) -> Result<f64> {
    let n = weights.len();
    if [v_new.len(), v_old.len(), returns.len()].iter().any(|&l| l != n) {
        return Err(contract("value_loss inputs differ in length"));
    }
    if !(delta > 0.0) {
        return Err(contract("huber delta must be positive"));
    }
    Ok(weighted_mean(weights, |i| {
        clipped_value_term(v_new[i], v_old[i], returns[i], clip_eps, delta).0
    }))
}

/// `rl + λ_W·L_W (+ λ_I·L_I for the implicit variant)`; the baseline uses
/// `rl` alone.
pub fn composite_loss(mode: VariantMode, rl: f64, lw: f64, li: f64, lambda_w: f64, lambda_i: f64) -> f64 {
    match mode {
        VariantMode::Implicit => rl + lambda_w * lw + lambda_i * li,
        VariantMode::Explicit => rl + lambda_w * lw,
        VariantMode::MappoBaseline => rl,
    }
}

/// Tape form of [`policy_loss`] from action logits. Returns the loss and the
/// weighted mean entropy (for logging).
#[allow(clippy::too_many_arguments)]
pub fn policy_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    actions: &[usize],
    logp_old: &[f64],
    adv: &[f64],
    weights: &[f64],
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<(Var, f64)> {
    let logp_all = tape.log_softmax(logits);
    let logp = tape.gather_cols(logp_all, actions)?;
    let ent = tape.entropy(logits);
    let both = tape.concat_cols(&[logp, ent])?;
    let loss = tape.row_loss(both, weights, |i, row, d| {
        let (s, ds) = clipped_surrogate(row[0], logp_old[i], adv[i], clip_eps);
        d[0] = ds;
        d[1] = -entropy_coef;
        s - entropy_coef * row[1]
    })?;
    let ent_vals: Vec<f64> = tape.value(ent).data().to_vec();
    let mean_ent = weighted_mean(weights, |i| ent_vals[i]);
    Ok((loss, mean_ent))
}

/// Tape form of [`value_loss`]; `values` is an N×1 column.
pub fn value_loss_on_tape(
    tape: &mut Tape,
    values: Var,
    v_old: &[f64],
    returns: &[f64],
    weights: &[f64],
    clip_eps: f64,
    delta: f64,
) -> Result<Var> {
    Ok(tape.row_loss(values, weights, |i, row, d| {
        let (l, dl) = clipped_value_term(row[0], v_old[i], returns[i], clip_eps, delta);
        d[0] = dl;
        l
    })?)
}

/// Tape form of [`composite_loss`].
pub fn composite_on_tape(
    tape: &mut Tape,
    mode: VariantMode,
    rl: Var,
    lw: Option<Var>,
    li: Option<Var>,
    lambda_w: f64,
    lambda_i: f64,
) -> Result<Var> {
    let mut total = rl;
    if mode == VariantMode::MappoBaseline {
        return Ok(total);
    }
    if let Some(lw) = lw {
        let w = tape.scale(lw, lambda_w);
        total = tape.add(total, w)?;
    }
    if mode == VariantMode::Implicit {
        if let Some(li) = li {
            let w = tape.scale(li, lambda_i);
            total = tape.add(total, w)?;
        }
    }
    Ok(total)
}
