//! Segmentation quality metrics: region Jaccard J, boundary F, and their
//! mean, with per-object and per-sequence aggregation following the DAVIS
//! conventions (both-empty comparisons count as perfect).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scores of one object on one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub frame_index: usize,
    pub object_id: usize,
    pub j: f64,
    pub f: f64,
}

/// Sequence-level aggregation: per-object means, global means over objects,
/// their average, and the per-frame curve.
#[derive(Debug, Clone)]
pub struct SequenceScores {
    pub per_object: Vec<(usize, f64, f64)>,
    pub mean_j: f64,
    pub mean_f: f64,
    pub jf: f64,
    pub curve: Vec<FrameScore>,
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Region similarity `|pred ∩ gt| / |pred ∪ gt|`; 1.0 when both are empty.
pub fn jaccard(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_same_shape("jaccard", pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p > 0.5, g > 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// 4-connectivity boundary: foreground pixels with a background (or
/// out-of-image) neighbor.
fn boundary_pixels(mask: &Tensor) -> Vec<(usize, usize)> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let at = |y: isize, x: isize| -> bool {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            false
        } else {
            mask.data()[y as usize * w + x as usize] > 0.5
        }
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !at(y as isize, x as isize) {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !at(yi - 1, xi) || !at(yi + 1, xi) || !at(yi, xi - 1) || !at(yi, xi + 1) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Stamp of all pixels within Euclidean `tolerance` of any listed pixel.
fn dilate(points: &[(usize, usize)], h: usize, w: usize, tolerance: f64) -> Vec<bool> {
    let mut cover = vec![false; h * w];
    let r = tolerance.floor() as isize;
    let tol2 = tolerance * tolerance;
    for &(y, x) in points {
        for dy in -r..=r {
            for dx in -r..=r {
                if (dy * dy + dx * dx) as f64 > tol2 {
                    continue;
                }
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    cover[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    cover
}

/// Default matching tolerance: `ceil(0.008 * image diagonal)` pixels.
pub fn default_boundary_tolerance(h: usize, w: usize) -> f64 {
    (0.008 * ((h * h + w * w) as f64).sqrt()).ceil()
}

/// Boundary F-measure: precision and recall of 1-pixel boundaries matched by
/// distance threshold (dilated-boundary intersection); `F = 2PR/(P+R)` with
/// 0 when `P+R = 0`, and 1.0 when both boundaries are empty.
pub fn boundary_f(pred: &Tensor, gt: &Tensor, tolerance: f64) -> Result<f64> {
    check_same_shape("boundary_f", pred, gt)?;
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    let pb = boundary_pixels(pred);
    let gb = boundary_pixels(gt);
    if pb.is_empty() && gb.is_empty() {
        return Ok(1.0);
    }
    let precision = if pb.is_empty() {
        0.0
    } else {
        let cover = dilate(&gb, h, w, tolerance);
        pb.iter().filter(|&&(y, x)| cover[y * w + x]).count() as f64 / pb.len() as f64
    };
    let recall = if gb.is_empty() {
        0.0
    } else {
        let cover = dilate(&pb, h, w, tolerance);
        gb.iter().filter(|&&(y, x)| cover[y * w + x]).count() as f64 / gb.len() as f64
    };
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Binary mask of one object id from an indexed mask.
pub fn object_mask(indexed: &Tensor, id: usize) -> Tensor {
    Tensor::from_vec(
        indexed.shape(),
        indexed
            .data()
            .iter()
            .map(|&v| if v as usize == id { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("same shape")
}

/// Object ids present in an indexed mask, ascending, background excluded.
pub fn object_ids(indexed: &Tensor) -> Vec<usize> {
    let mut ids: Vec<usize> = indexed
        .data()
        .iter()
        .map(|&v| v as usize)
        .filter(|&v| v > 0)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Aggregates a per-frame curve into per-object means and the overall
/// J&F = (mean J + mean F) / 2, averaged over objects. Empty curves (nothing
/// to predict) score a perfect 1.0.
pub fn summarize(curve: &[FrameScore], objects: &[usize]) -> SequenceScores {
    let mut per_object = Vec::with_capacity(objects.len());
    for &id in objects {
        let scores: Vec<&FrameScore> = curve.iter().filter(|s| s.object_id == id).collect();
        if scores.is_empty() {
            per_object.push((id, 1.0, 1.0));
            continue;
        }
        let mj = scores.iter().map(|s| s.j).sum::<f64>() / scores.len() as f64;
        let mf = scores.iter().map(|s| s.f).sum::<f64>() / scores.len() as f64;
        per_object.push((id, mj, mf));
    }
    let (mean_j, mean_f) = if per_object.is_empty() {
        (1.0, 1.0)
    } else {
        (
            per_object.iter().map(|o| o.1).sum::<f64>() / per_object.len() as f64,
            per_object.iter().map(|o| o.2).sum::<f64>() / per_object.len() as f64,
        )
    };
    SequenceScores {
        per_object,
        mean_j,
        mean_f,
        jf: (mean_j + mean_f) / 2.0,
        curve: curve.to_vec(),
    }
}

/// Scores predicted indexed masks against ground truth. Frame 0 is the given
/// annotation and is excluded; objects are those present in the frame-0
/// ground truth.
pub fn sequence_eval(pred_masks: &[Tensor], gt_masks: &[Tensor]) -> Result<SequenceScores> {
    if pred_masks.len() != gt_masks.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} ground-truth frames",
            pred_masks.len(),
            gt_masks.len()
        )));
    }
    if gt_masks.is_empty() {
        return Err(Error::Contract("empty sequence".into()));
    }
    let objects = object_ids(&gt_masks[0]);
    let (h, w) = (gt_masks[0].shape()[0], gt_masks[0].shape()[1]);
    let tol = default_boundary_tolerance(h, w);
    let mut curve = Vec::new();
    for frame in 1..gt_masks.len() {
        for &id in &objects {
            let p = object_mask(&pred_masks[frame], id);
            let g = object_mask(&gt_masks[frame], id);
            curve.push(FrameScore {
                frame_index: frame,
                object_id: id,
                j: jaccard(&p, &g)?,
                f: boundary_f(&p, &g, tol)?,
            });
        }
    }
    Ok(summarize(&curve, &objects))
}
