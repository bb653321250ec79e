//! Soft Dice plus cross-entropy training objective.

use phnet_tensor::{Element, Graph, ReduceKind, Tensor, Var};

use crate::error::{invalid, Result};
use crate::volume::LabelVolume;

pub const DICE_SMOOTH: f64 = 1e-5;

/// One-hot encoding `(B, K, D, H, W)` of a batch of label volumes.
pub fn one_hot<T: Element>(labels: &[LabelVolume], classes: usize) -> Result<Tensor<T>> {
    let Some(first) = labels.first() else {
        return invalid("empty label batch");
    };
    let dims = first.dims();
    let n: usize = dims.iter().product();
    let mut data = vec![T::of(0.0); labels.len() * classes * n];
    for (b, lbl) in labels.iter().enumerate() {
        if lbl.dims() != dims {
            return invalid(format!("label volumes differ in shape: {:?} vs {dims:?}", lbl.dims()));
        }
        for (i, &c) in lbl.data().iter().enumerate() {
            let c = c as usize;
            if c >= classes {
                return invalid(format!("label {c} out of range for {classes} classes"));
            }
            data[(b * classes + c) * n + i] = T::of(1.0);
        }
    }
    Ok(Tensor::from_vec(&[labels.len(), classes, dims[0], dims[1], dims[2]], data)?)
}

/// Scalar loss `(1 − mean foreground soft Dice) + mean cross-entropy`.
///
/// Softmax runs over the class axis of `(B, K, D, H, W)` logits. Dice is
/// computed per class over the whole batch, with background (class 0)
/// excluded.
pub fn dice_ce_loss<T: Element>(g: &mut Graph<T>, logits: Var, labels: &[LabelVolume]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 5 {
        return invalid(format!("logits must be (B, K, D, H, W), got {shape:?}"));
    }
    let (batch, classes) = (shape[0], shape[1]);
    if classes < 2 {
        return invalid(format!("need at least two classes, got {classes}"));
    }
    if labels.len() != batch {
        return invalid(format!("{} label volumes for a batch of {batch}", labels.len()));
    }
    let target = one_hot::<T>(labels, classes)?;
    if target.shape() != shape.as_slice() {
        return invalid(format!("labels {:?} do not match logits {shape:?}", target.shape()));
    }
    let voxels = (batch * shape[2] * shape[3] * shape[4]) as f64;
    let fg = classes - 1;
    let target_sum = target.reduce(&[0, 2, 3, 4], ReduceKind::Sum)?.narrow(0, 1, fg)?.contiguous();
    let target = g.constant(target);

    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(logp, target)?;
    let ce = g.sum_all(picked)?;
    let ce = g.scale(ce, T::of(-1.0 / voxels));

    let prob = g.exp(logp);
    let overlap = g.mul(prob, target)?;
    let overlap = g.reduce(overlap, &[0, 2, 3, 4], ReduceKind::Sum)?;
    let overlap = g.narrow(overlap, 0, 1, fg)?;
    let num = g.scale(overlap, T::of(2.0));
    let num = g.add_scalar(num, T::of(DICE_SMOOTH));
    let pred_sum = g.reduce(prob, &[0, 2, 3, 4], ReduceKind::Sum)?;
    let pred_sum = g.narrow(pred_sum, 0, 1, fg)?;
    let target_sum = g.constant(target_sum);
    let den = g.add(pred_sum, target_sum)?;
    let den = g.add_scalar(den, T::of(DICE_SMOOTH));
    let dice = g.div(num, den)?;
    let mean_dice = g.mean_all(dice)?;
    let dice_loss = g.scale(mean_dice, T::of(-1.0));
    let dice_loss = g.add_scalar(dice_loss, T::of(1.0));
    Ok(g.add(dice_loss, ce)?)
}

/// The cross-entropy term alone.
pub fn cross_entropy<T: Element>(g: &mut Graph<T>, logits: Var, labels: &[LabelVolume]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let target = one_hot::<T>(labels, shape.get(1).copied().unwrap_or(0))?;
    if target.shape() != shape.as_slice() {
        return invalid(format!("labels {:?} do not match logits {shape:?}", target.shape()));
    }
    let voxels = (target.numel() / shape[1]) as f64;
    let target = g.constant(target);
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.mul(logp, target)?;
    let ce = g.sum_all(picked)?;
    Ok(g.scale(ce, T::of(-1.0 / voxels)))
}
