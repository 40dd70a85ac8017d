use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside logs.
pub const PROB_EPS: f64 = 1e-7;

/// `lambda_l1 * sum_r L1_r + lambda_adv * sum_r -E log D(G_r)` over the
/// ratios 0, 0.5 and 1.
pub fn generator_loss<T: Scalar>(
    outputs: &[Var<T>],
    targets: &[Var<T>],
    fake_scores: &[Var<T>],
    lambda_l1: f64,
    lambda_adv: f64,
) -> Result<Var<T>> {
    if outputs.len() != 3 || targets.len() != 3 || fake_scores.len() != 3 {
        return Err(Error::LossAssembly(format!(
            "need 3 ratio terms, got {} outputs, {} targets, {} score maps",
            outputs.len(),
            targets.len(),
            fake_scores.len()
        )));
    }
    let mut terms = Vec::with_capacity(6);
    for (o, t) in outputs.iter().zip(targets) {
        if o.shape() != t.shape() {
            return Err(Error::LossAssembly(format!(
                "output {:?} vs target {:?}",
                o.shape(),
                t.shape()
            )));
        }
        terms.push(o.l1(t).scale(T::lit(lambda_l1)));
    }
    let eps = T::lit(PROB_EPS);
    for s in fake_scores {
        terms.push(s.neg_mean_log(eps).scale(T::lit(lambda_adv)));
    }
    Ok(Var::sum_all(&terms))
}

/// `0.25 * (-E log D(y) + sum_r -E log(1 - D(G_r)))`.
pub fn discriminator_loss<T: Scalar>(real_scores: &Var<T>, fake_scores: &[Var<T>]) -> Result<Var<T>> {
    if fake_scores.len() != 3 {
        return Err(Error::LossAssembly(format!(
            "need 3 fake score maps, got {}",
            fake_scores.len()
        )));
    }
    let eps = T::lit(PROB_EPS);
    let mut terms = vec![real_scores.neg_mean_log(eps)];
    terms.extend(fake_scores.iter().map(|s| s.neg_mean_log1m(eps)));
    Ok(Var::sum_all(&terms).scale(T::lit(0.25)))
}
