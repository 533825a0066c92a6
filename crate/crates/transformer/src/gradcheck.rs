//! Central finite-difference checks of [`Model::loss_and_grad`].

use crate::model::{Model, SeqRef};
use crate::TransformerError;

/// Worst relative error between analytic and numerical gradients over the
/// given parameter indices. The relative error of a pair `(a, n)` is
/// `|a - n| / max(|a|, |n|, floor)`; `floor` keeps near-zero gradients from
/// dominating.
pub fn max_relative_error(
    model: &Model,
    batch: &[SeqRef],
    indices: &[usize],
    h: f64,
    floor: f64,
) -> Result<f64, TransformerError> {
    let (_, grad, _) = model.loss_and_grad(batch)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = probe.loss(batch)?;
        probe.params[i] = orig - h;
        let down = probe.loss(batch)?;
        probe.params[i] = orig;
        let num = (up - down) / (2.0 * h);
        let a = grad[i];
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
