//! VOS supervision (bootstrapped cross entropy over the aggregated
//! distribution plus per-object dice) and multi-object merging.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Indexed ground-truth mask: 0 is background, `k` is object `k`.
pub fn labels_from_indexed(mask: &Tensor) -> Vec<usize> {
    mask.data().iter().map(|&v| v as usize).collect()
}

/// Binary mask of one object from an indexed mask.
pub fn binary_of_object(mask: &Tensor, object: usize) -> Tensor {
    Tensor::from_vec(
        &[mask.numel()],
        mask.data()
            .iter()
            .map(|&v| if v as usize == object { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("flat shape")
}

/// Total VOS loss for one frame: per-pixel cross entropy of the aggregated
/// (background + objects) distribution against the indexed ground truth,
/// averaged over the hardest `ceil(ratio*P)` pixels, plus the mean dice loss
/// over objects.
pub fn vos_loss(
    t: &mut Tape,
    per_object_probs: &[TensorId],
    gt_indexed: &Tensor,
    ratio: f32,
) -> Result<TensorId> {
    if per_object_probs.is_empty() {
        return Err(Error::Contract("vos loss needs at least one object".into()));
    }
    let s = t.shape(per_object_probs[0]).to_vec();
    let hw: usize = s.iter().product();
    if gt_indexed.numel() != hw {
        return Err(Error::dimension(
            "vos_loss",
            format!("ground truth {:?} vs prediction {:?}", gt_indexed.shape(), s),
        ));
    }
    let mut rows = Vec::with_capacity(per_object_probs.len());
    for &p in per_object_probs {
        rows.push(t.reshape(p, &[1, hw])?);
    }
    let stacked = t.concat(0, &rows)?;
    let dist = t.soft_aggregate(stacked)?;
    let labels = labels_from_indexed(gt_indexed);
    if labels.iter().any(|&l| l > per_object_probs.len()) {
        return Err(Error::Contract("ground-truth object id out of range".into()));
    }
    let ce = t.bootstrapped_ce(dist, &labels, ratio)?;

    let mut dice_sum: Option<TensorId> = None;
    for (k, &row) in rows.iter().enumerate() {
        let gt_k = binary_of_object(gt_indexed, k + 1);
        let d = t.dice_loss(row, &gt_k)?;
        dice_sum = Some(match dice_sum {
            Some(acc) => t.add(acc, d)?,
            None => d,
        });
    }
    let dice = t.affine(dice_sum.unwrap(), 1.0 / per_object_probs.len() as f32, 0.0)?;
    t.add(ce, dice)
}

/// Merges per-object probability maps into an indexed prediction by
/// normalized odds: background takes the product of complements, every
/// entry converts to odds, odds renormalize per pixel, and the argmax wins
/// (ties prefer the lower index, i.e. background first).
pub fn aggregate_objects(per_object_probs: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if per_object_probs.is_empty() {
        return Err(Error::Contract("aggregation needs at least one object".into()));
    }
    let shape = per_object_probs[0].shape().to_vec();
    let hw = per_object_probs[0].numel();
    for p in per_object_probs {
        if p.numel() != hw {
            return Err(Error::dimension(
                "aggregate_objects",
                format!("{:?} vs {:?}", p.shape(), shape),
            ));
        }
    }
    let k = per_object_probs.len();
    let mut dist = vec![0.0f32; (k + 1) * hw];
    let mut label = vec![0.0f32; hw];
    for j in 0..hw {
        let mut odds = vec![0.0f64; k + 1];
        let mut bg = 1.0f64;
        for (i, p) in per_object_probs.iter().enumerate() {
            let v = (p.data()[j] as f64).clamp(1e-5, 1.0 - 1e-5);
            bg *= 1.0 - v;
            odds[i + 1] = v / (1.0 - v);
        }
        let bg = bg.clamp(1e-7, 1.0 - 1e-7);
        odds[0] = bg / (1.0 - bg);
        let sum: f64 = odds.iter().sum();
        let mut best = 0usize;
        for (i, &o) in odds.iter().enumerate() {
            dist[i * hw + j] = (o / sum) as f32;
            if o > odds[best] {
                best = i;
            }
        }
        label[j] = best as f32;
    }
    Ok((
        Tensor::from_vec(&[hw], label)?,
        Tensor::from_vec(&[k + 1, hw], dist)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ratio_one_is_plain_mean_ce() {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = t.constant(&Tensor::randn(&mut rng, &[1, 4, 4], 1.0));
        let probs = t.sigmoid(raw).unwrap();
        let gt = Tensor::from_vec(&[16], (0..16).map(|i| (i % 2) as f32).collect()).unwrap();
        let full = vos_loss(&mut t, &[probs], &gt, 1.0).unwrap();
        // recompute: mean ce over all pixels + dice
        let rows = t.reshape(probs, &[1, 16]).unwrap();
        let dist = t.soft_aggregate(rows).unwrap();
        let labels = labels_from_indexed(&gt);
        let ce = t.bootstrapped_ce(dist, &labels, 1.0).unwrap();
        let dice = t.dice_loss(rows, &binary_of_object(&gt, 1)).unwrap();
        let want = t.data(ce)[0] + t.data(dice)[0];
        assert!((t.data(full)[0] - want).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction_sits_at_the_smoothed_floor() {
        let mut t = Tape::new();
        let gt = Tensor::from_vec(&[16], (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect())
            .unwrap();
        let probs_t = Tensor::from_vec(
            &[1, 4, 4],
            gt.data().iter().map(|&v| if v > 0.5 { 0.9999 } else { 0.0001 }).collect(),
        )
        .unwrap();
        let probs = t.constant(&probs_t);
        let loss = vos_loss(&mut t, &[probs], &gt, 1.0).unwrap();
        assert!(t.data(loss)[0] < 0.08, "floor {}", t.data(loss)[0]);
    }

    #[test]
    fn single_confident_object_wins_the_pixel() {
        let p = Tensor::from_vec(&[1, 1, 1], vec![0.9]).unwrap();
        let (label, dist) = aggregate_objects(&[p]).unwrap();
        assert_eq!(label.data(), &[1.0]);
        assert!(dist.data()[1] > dist.data()[0]);
    }

    #[test]
    fn dominant_object_beats_weak_one() {
        let p1 = Tensor::from_vec(&[1, 1, 1], vec![0.9]).unwrap();
        let p2 = Tensor::from_vec(&[1, 1, 1], vec![0.1]).unwrap();
        let (label, _) = aggregate_objects(&[p1, p2]).unwrap();
        assert_eq!(label.data(), &[1.0]);
    }

    #[test]
    fn aggregation_matches_normalized_odds_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw1 = Tensor::randn(&mut rng, &[1, 2, 3], 1.0);
        let raw2 = Tensor::randn(&mut rng, &[1, 2, 3], 1.0);
        let sig = |t: &Tensor| {
            Tensor::from_vec(
                t.shape(),
                t.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
            )
            .unwrap()
        };
        let (p1, p2) = (sig(&raw1), sig(&raw2));
        let (_, dist) = aggregate_objects(&[p1.clone(), p2.clone()]).unwrap();
        for j in 0..6 {
            let v1 = p1.data()[j] as f64;
            let v2 = p2.data()[j] as f64;
            let bg = (1.0 - v1) * (1.0 - v2);
            let odds = [bg / (1.0 - bg), v1 / (1.0 - v1), v2 / (1.0 - v2)];
            let s: f64 = odds.iter().sum();
            for i in 0..3 {
                assert!((dist.data()[i * 6 + j] as f64 - odds[i] / s).abs() <= 1e-6);
            }
        }
    }
}
