//! Set-prediction supervision for the instance branch: bipartite matching
//! costs, classification cross entropy, and the weighted BCE + dice mask
//! losses, summed over every auxiliary prediction.

use super::hungarian::hungarian_match;
use super::InstancePrediction;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Ground-truth instances for one frame: binary masks at stride 4 and one
/// class label per instance.
#[derive(Debug, Clone)]
pub struct InstanceTargets {
    /// Each `[H4, W4]`, values in {0,1}.
    pub masks: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl InstanceTargets {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bce_point(x: f64, z: f64) -> f64 {
    x.max(0.0) - x * z + (-x.abs()).exp().ln_1p()
}

/// Matching cost `[N, G]` combining classification probability and the mask
/// BCE/dice terms, computed in f64 on detached values.
pub fn matching_cost_matrix(
    t: &Tape,
    pred: &InstancePrediction,
    targets: &InstanceTargets,
) -> Result<Tensor> {
    let class_logits = pred
        .class_logits
        .ok_or_else(|| Error::Contract("matching requires class logits".into()))?;
    let cs = t.shape(class_logits).to_vec();
    let ms = t.shape(pred.mask_logits).to_vec();
    let (n, classes) = (cs[0], cs[1]);
    let hw = ms[1] * ms[2];
    let g = targets.len();
    let z = t.data(class_logits);
    let logits = t.data(pred.mask_logits);

    let mut cost = vec![0.0f32; n * g];
    for q in 0..n {
        // class probabilities for this query
        let row = &z[q * classes..(q + 1) * classes];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let zsum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let mrow = &logits[q * hw..(q + 1) * hw];
        for (gt, mask) in targets.masks.iter().enumerate() {
            if mask.numel() != hw {
                return Err(Error::dimension(
                    "matching_cost_matrix",
                    format!("target mask {:?} vs prediction {:?}", mask.shape(), ms),
                ));
            }
            let label = targets.labels[gt];
            let p_class = (row[label] as f64 - max).exp() / zsum;

            let gd = mask.data();
            let n_fg = gd.iter().filter(|&&v| v > 0.5).count() as f64;
            let n_bg = hw as f64 - n_fg;
            let (w_fg, w_bg) = if n_fg > 0.0 && n_bg > 0.0 {
                (hw as f64 / (2.0 * n_fg), hw as f64 / (2.0 * n_bg))
            } else {
                (1.0, 1.0)
            };
            let mut bce = 0.0f64;
            let mut sum_p = 0.0f64;
            let mut sum_pg = 0.0f64;
            for (&x, &zv) in mrow.iter().zip(gd) {
                let w = if zv > 0.5 { w_fg } else { w_bg };
                bce += w * bce_point(x as f64, zv as f64);
                let p = sigmoid64(x as f64);
                sum_p += p;
                sum_pg += p * zv as f64;
            }
            bce /= hw as f64;
            let dice = 1.0 - (2.0 * sum_pg + 1.0) / (sum_p + n_fg + 1.0);
            cost[q * g + gt] = (-p_class + bce + dice) as f32;
        }
    }
    Tensor::from_vec(&[n, g], cost)
}

/// Total instance-segmentation loss over a set of (auxiliary) predictions:
/// per prediction, a fresh bipartite match, then classification CE over all
/// queries (unmatched ones supervised toward the no-object class, weighted
/// by `no_object_weight`) plus mean weighted BCE and dice over matched
/// masks.
pub fn instance_loss(
    t: &mut Tape,
    preds: &[InstancePrediction],
    targets: &InstanceTargets,
    num_classes: usize,
    no_object_weight: f32,
) -> Result<TensorId> {
    if targets.labels.len() != targets.masks.len() {
        return Err(Error::Contract(
            "instance targets need one label per mask".into(),
        ));
    }
    if targets.labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::Contract("instance label out of range".into()));
    }
    let mut class_weights = vec![1.0f32; num_classes + 1];
    class_weights[num_classes] = no_object_weight;

    let mut total: Option<TensorId> = None;
    for pred in preds {
        let class_logits = pred
            .class_logits
            .ok_or_else(|| Error::Contract("instance loss requires class logits".into()))?;
        let n = t.shape(class_logits)[0];
        let ms = t.shape(pred.mask_logits).to_vec();
        let hw = ms[1] * ms[2];

        let assignment = if targets.is_empty() {
            Vec::new()
        } else {
            let cost = matching_cost_matrix(t, pred, targets)?;
            hungarian_match(&cost)?
        };

        let mut class_targets = vec![num_classes; n];
        for (gt, &q) in assignment.iter().enumerate() {
            class_targets[q] = targets.labels[gt];
        }
        let mut layer = t.softmax_ce_rows(class_logits, &class_targets, &class_weights)?;

        if !assignment.is_empty() {
            let flat = t.reshape(pred.mask_logits, &[n, hw])?;
            let mut mask_sum: Option<TensorId> = None;
            for (gt, &q) in assignment.iter().enumerate() {
                let row = t.narrow(flat, 0, q, 1)?;
                let gt_mask = targets.masks[gt].reshaped(&[hw])?;
                let bce = t.weighted_bce_with_logits(row, &gt_mask)?;
                let probs = t.sigmoid(row)?;
                let dice = t.dice_loss(probs, &gt_mask)?;
                let pair = t.add(bce, dice)?;
                mask_sum = Some(match mask_sum {
                    Some(acc) => t.add(acc, pair)?,
                    None => pair,
                });
            }
            let mean = t.affine(mask_sum.unwrap(), 1.0 / assignment.len() as f32, 0.0)?;
            layer = t.add(layer, mean)?;
        }
        total = Some(match total {
            Some(acc) => t.add(acc, layer)?,
            None => layer,
        });
    }
    total.ok_or_else(|| Error::Contract("instance loss needs at least one prediction".into()))
}
