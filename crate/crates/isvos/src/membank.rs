//! Spatial-temporal memory: key/value slots behind a pinned-first-slot FIFO
//! eviction policy, plus affinity computation with top-k filtering and
//! weighted readout.

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::Tensor;

/// One memorized frame: a shared key and one value per object.
#[derive(Debug, Clone)]
struct MemorySlot {
    frame_id: usize,
    /// `[C_k, Hm*Wm]`
    key: Tensor,
    /// `[objects, C_v, Hm*Wm]`
    values: Tensor,
}

/// Fixed extents locked in by the first insert.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BankDims {
    key_dim: usize,
    value_dim: usize,
    objects: usize,
    positions: usize,
}

/// FIFO store of memory keys and per-object memory values. Slot 0 holds the
/// first inserted frame and is never evicted; all other slots turn over
/// oldest-first once the bank is full.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    slots: Vec<MemorySlot>,
    dims: Option<BankDims>,
}

impl MemoryBank {
    /// Empty bank holding at most `capacity` frames.
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Contract("memory capacity must be >= 1".into()));
        }
        Ok(MemoryBank {
            capacity,
            slots: Vec::new(),
            dims: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of memorized frames, `<= capacity` at all times.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn frame_ids(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.frame_id).collect()
    }

    /// Spatial positions per stored frame.
    pub fn positions_per_frame(&self) -> usize {
        self.dims.map_or(0, |d| d.positions)
    }

    pub fn num_objects(&self) -> usize {
        self.dims.map_or(0, |d| d.objects)
    }

    /// Stores a frame. The key is the frame's (instance-enhanced) query key,
    /// shared between query and memory; values come from the value encoder,
    /// one slice per object. Frame ids must be strictly increasing.
    pub fn insert(&mut self, frame_id: usize, key: Tensor, values: Tensor) -> Result<()> {
        if key.shape().len() != 2 {
            return Err(Error::dimension(
                "insert",
                format!("key must be [C_k, positions], got {:?}", key.shape()),
            ));
        }
        if values.shape().len() != 3 || values.shape()[2] != key.shape()[1] {
            return Err(Error::dimension(
                "insert",
                format!(
                    "values must be [objects, C_v, positions={}], got {:?}",
                    key.shape()[1],
                    values.shape()
                ),
            ));
        }
        let dims = BankDims {
            key_dim: key.shape()[0],
            value_dim: values.shape()[1],
            objects: values.shape()[0],
            positions: key.shape()[1],
        };
        match self.dims {
            None => self.dims = Some(dims),
            Some(d) if d != dims => {
                return Err(Error::dimension(
                    "insert",
                    format!("slot extents {:?} do not match the bank's {:?}", dims, d),
                ))
            }
            _ => {}
        }
        if let Some(last) = self.slots.last() {
            if frame_id <= last.frame_id {
                return Err(Error::Contract(format!(
                    "frame ids must be strictly increasing: {} after {}",
                    frame_id, last.frame_id
                )));
            }
        }
        if self.slots.len() == self.capacity {
            if self.slots.len() == 1 {
                // only the pinned slot fits; nothing can be evicted
                return Ok(());
            }
            self.slots.remove(1); // oldest non-pinned
        }
        self.slots.push(MemorySlot {
            frame_id,
            key,
            values,
        });
        Ok(())
    }

    /// All memory keys as `[C_k, T*positions]`, slot order.
    pub fn keys(&self) -> Result<Tensor> {
        let d = self.require_dims()?;
        let total = self.slots.len() * d.positions;
        let mut data = vec![0.0f32; d.key_dim * total];
        for (t, slot) in self.slots.iter().enumerate() {
            let src = slot.key.data();
            for c in 0..d.key_dim {
                let dst = c * total + t * d.positions;
                data[dst..dst + d.positions]
                    .copy_from_slice(&src[c * d.positions..(c + 1) * d.positions]);
            }
        }
        Tensor::from_vec(&[d.key_dim, total], data)
    }

    /// All memory values as `[objects, C_v, T*positions]`, slot order.
    pub fn values(&self) -> Result<Tensor> {
        let d = self.require_dims()?;
        let total = self.slots.len() * d.positions;
        let mut data = vec![0.0f32; d.objects * d.value_dim * total];
        for (t, slot) in self.slots.iter().enumerate() {
            let src = slot.values.data();
            for o in 0..d.objects {
                for c in 0..d.value_dim {
                    let dst = (o * d.value_dim + c) * total + t * d.positions;
                    let s = (o * d.value_dim + c) * d.positions;
                    data[dst..dst + d.positions].copy_from_slice(&src[s..s + d.positions]);
                }
            }
        }
        Tensor::from_vec(&[d.objects, d.value_dim, total], data)
    }

    fn require_dims(&self) -> Result<BankDims> {
        self.dims
            .ok_or_else(|| Error::State("memory bank is empty".into()))
    }
}

/// Column-stochastic matching weights between memory and query positions.
/// After top-k filtering at most `topk` entries per column are nonzero.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    /// `[T*positions, positions]`
    pub weights: Tensor,
    pub topk: usize,
}

/// Scores every (memory, query) position pair with the normalized negative
/// squared L2 distance, keeps the top `topk` scores per query column, and
/// softmax-normalizes over memory positions.
pub fn compute_affinity(bank: &MemoryBank, query_key: &Tensor, topk: usize) -> Result<AffinityMatrix> {
    if bank.is_empty() {
        return Err(Error::State("cannot match against an empty memory bank".into()));
    }
    if topk == 0 {
        return Err(Error::Contract("topk must be >= 1".into()));
    }
    let d = bank.require_dims()?;
    if query_key.shape().len() != 2 || query_key.shape()[0] != d.key_dim {
        return Err(Error::dimension(
            "compute_affinity",
            format!(
                "query key {:?} does not match C_k = {}",
                query_key.shape(),
                d.key_dim
            ),
        ));
    }
    let keys = bank.keys()?;
    let m = keys.shape()[1];
    let p = query_key.shape()[1];
    let weights = kernels::affinity_topk(keys.data(), query_key.data(), d.key_dim, m, p, topk);
    Ok(AffinityMatrix {
        weights: Tensor::from_vec(&[m, p], weights)?,
        topk,
    })
}

/// Weighted sum of memory values under an affinity matrix:
/// `F[.., j] = sum_i V[.., i] * A[i, j]`.
pub fn readout(bank: &MemoryBank, aff: &AffinityMatrix) -> Result<Tensor> {
    let d = bank.require_dims()?;
    let values = bank.values()?;
    let m = values.shape()[2];
    let (am, ap) = (aff.weights.shape()[0], aff.weights.shape()[1]);
    if am != m {
        return Err(Error::dimension(
            "readout",
            format!("affinity rows {} vs {} memory positions", am, m),
        ));
    }
    let rows = d.objects * d.value_dim;
    let out = kernels::matmul(values.data(), aff.weights.data(), rows, m, ap);
    Tensor::from_vec(&[d.objects, d.value_dim, ap], out)
}

/// Memorization schedule: store every `interval`-th frame, counting from 0.
/// `interval` must be >= 1.
pub fn should_memorize(frame_index: usize, interval: usize) -> bool {
    debug_assert!(interval >= 1, "memorize interval must be >= 1");
    frame_index % interval.max(1) == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn slot(key_dim: usize, positions: usize, fill: f32) -> (Tensor, Tensor) {
        (
            Tensor::filled(&[key_dim, positions], fill),
            Tensor::filled(&[1, 3, positions], fill),
        )
    }

    #[test]
    fn single_memory_position_gets_full_weight() {
        let mut bank = MemoryBank::new(4).unwrap();
        let (k, v) = slot(4, 1, 0.3);
        bank.insert(0, k, v).unwrap();
        let q = Tensor::filled(&[4, 1], -1.0);
        let aff = compute_affinity(&bank, &q, 20).unwrap();
        assert_eq!(aff.weights.data(), &[1.0]);
        let f = readout(&bank, &aff).unwrap();
        assert_eq!(f.data(), Tensor::filled(&[1, 3, 1], 0.3).data());
    }

    #[test]
    fn two_keys_reference_weights() {
        // key 0 equals the query; key 1 at squared distance 8 with C_k = 4:
        // scores {0, -4} -> weights {0.98201, 0.01799}
        let mut bank = MemoryBank::new(4).unwrap();
        let s = 2.0f32.sqrt();
        let key = Tensor::from_vec(&[4, 2], vec![0.0, s, 0.0, s, 0.0, s, 0.0, s]).unwrap();
        let values = Tensor::zeros(&[1, 2, 2]);
        bank.insert(0, key, values).unwrap();
        let q = Tensor::zeros(&[4, 1]);
        let aff = compute_affinity(&bank, &q, 20).unwrap();
        assert!((aff.weights.data()[0] - 0.98201).abs() < 1e-5);
        assert!((aff.weights.data()[1] - 0.01799).abs() < 1e-5);
    }

    #[test]
    fn uniform_affinity_reads_out_the_mean() {
        let mut bank = MemoryBank::new(4).unwrap();
        bank.insert(0, Tensor::zeros(&[2, 2]), Tensor::from_vec(&[1, 1, 2], vec![1.0, 3.0]).unwrap())
            .unwrap();
        bank.insert(1, Tensor::zeros(&[2, 2]), Tensor::from_vec(&[1, 1, 2], vec![5.0, 7.0]).unwrap())
            .unwrap();
        let aff = AffinityMatrix {
            weights: Tensor::filled(&[4, 2], 0.25),
            topk: 4,
        };
        let f = readout(&bank, &aff).unwrap();
        for &v in f.data() {
            assert!((v - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_values_read_out_constant_for_any_affinity() {
        let mut bank = MemoryBank::new(4).unwrap();
        for t in 0..3 {
            bank.insert(t, Tensor::randn(&mut ChaCha8Rng::seed_from_u64(t as u64), &[2, 4], 1.0),
                Tensor::filled(&[2, 3, 4], 2.5))
                .unwrap();
        }
        let q = Tensor::randn(&mut ChaCha8Rng::seed_from_u64(99), &[2, 4], 1.0);
        let aff = compute_affinity(&bank, &q, 5).unwrap();
        let f = readout(&bank, &aff).unwrap();
        for &v in f.data() {
            assert!((v - 2.5).abs() < 1e-5);
        }
    }

    #[test]
    fn topk_covering_everything_equals_unfiltered_softmax_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bank = MemoryBank::new(8).unwrap();
        for t in 0..3 {
            bank.insert(t, Tensor::randn(&mut rng, &[4, 5], 1.0), Tensor::randn(&mut rng, &[2, 3, 5], 1.0))
                .unwrap();
        }
        let q = Tensor::randn(&mut rng, &[4, 5], 1.0);
        let a = compute_affinity(&bank, &q, 15).unwrap();
        let b = compute_affinity(&bank, &q, 10_000).unwrap();
        assert_eq!(a.weights.data(), b.weights.data());
    }

    #[test]
    fn affinity_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let key = Tensor::randn(&mut rng, &[3, 6], 1.0);
        let values = Tensor::randn(&mut rng, &[1, 2, 6], 1.0);
        let q = Tensor::randn(&mut rng, &[3, 4], 1.0);
        let shift = [0.7f32, -1.1, 0.4];

        let mut bank = MemoryBank::new(4).unwrap();
        bank.insert(0, key.clone(), values.clone()).unwrap();
        let base = compute_affinity(&bank, &q, 3).unwrap();

        let shifted =
            |t: &Tensor| -> Tensor {
                let cols = t.shape()[1];
                Tensor::from_vec(
                    t.shape(),
                    t.data().iter().enumerate().map(|(i, &v)| v + shift[i / cols]).collect(),
                )
                .unwrap()
            };
        let mut bank2 = MemoryBank::new(4).unwrap();
        bank2.insert(0, shifted(&key), values).unwrap();
        let moved = compute_affinity(&bank2, &shifted(&q), 3).unwrap();
        for (a, b) in base.weights.data().iter().zip(moved.weights.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn fifo_pin_keeps_frame_zero() {
        let mut bank = MemoryBank::new(3).unwrap();
        for t in 0..5 {
            let (k, v) = slot(2, 2, t as f32);
            bank.insert(t, k, v).unwrap();
        }
        assert_eq!(bank.frame_ids(), vec![0, 3, 4]);
    }

    #[test]
    fn capacity_one_only_ever_holds_the_pinned_frame() {
        let mut bank = MemoryBank::new(1).unwrap();
        for t in 0..4 {
            let (k, v) = slot(2, 2, t as f32);
            bank.insert(t, k, v).unwrap();
        }
        assert_eq!(bank.frame_ids(), vec![0]);
    }

    #[test]
    fn duplicate_frame_id_is_a_contract_error() {
        let mut bank = MemoryBank::new(3).unwrap();
        let (k, v) = slot(2, 2, 0.0);
        bank.insert(0, k.clone(), v.clone()).unwrap();
        assert!(matches!(bank.insert(0, k, v), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_bank_is_a_state_error() {
        let bank = MemoryBank::new(3).unwrap();
        let q = Tensor::zeros(&[2, 2]);
        assert!(matches!(compute_affinity(&bank, &q, 20), Err(Error::State(_))));
    }

    #[test]
    fn key_dim_mismatch_is_a_dimension_error() {
        let mut bank = MemoryBank::new(3).unwrap();
        let (k, v) = slot(2, 2, 0.0);
        bank.insert(0, k, v).unwrap();
        let q = Tensor::zeros(&[5, 2]);
        assert!(matches!(compute_affinity(&bank, &q, 20), Err(Error::Dimension { .. })));
    }

    #[test]
    fn memorization_schedule() {
        assert!(should_memorize(0, 5));
        assert!(should_memorize(5, 5));
        assert!(!should_memorize(7, 5));
        for k in 0..10 {
            assert!(should_memorize(k, 1));
        }
    }

    /// Brute-force f64 replica of affinity + readout, kept independent of the
    /// implementation path.
    fn oracle_affinity_readout(
        keys: &[f32],
        values: &[f32],
        q: &[f32],
        ck: usize,
        cv: usize,
        m: usize,
        p: usize,
        topk: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut aff = vec![0.0f64; m * p];
        for j in 0..p {
            let mut scores: Vec<(usize, f64)> = (0..m)
                .map(|i| {
                    let d2: f64 = (0..ck)
                        .map(|c| {
                            let d = keys[c * m + i] as f64 - q[c * p + j] as f64;
                            d * d
                        })
                        .sum();
                    (i, -d2 / (ck as f64).sqrt())
                })
                .collect();
            scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scores.truncate(topk.min(m));
            let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
            for (i, s) in scores {
                aff[i * p + j] = (s - max).exp() / z;
            }
        }
        let mut f = vec![0.0f64; cv * p];
        for r in 0..cv {
            for j in 0..p {
                f[r * p + j] = (0..m).map(|i| values[r * m + i] as f64 * aff[i * p + j]).sum();
            }
        }
        (aff, f)
    }

    #[test]
    fn matching_agrees_with_double_precision_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..5 {
            let (ck, cv, hw, frames) = (4 + case, 3, 4, 1 + case % 3);
            let mut bank = MemoryBank::new(8).unwrap();
            for t in 0..frames {
                bank.insert(
                    t,
                    Tensor::randn(&mut rng, &[ck, hw], 1.0),
                    Tensor::randn(&mut rng, &[2, cv, hw], 1.0),
                )
                .unwrap();
            }
            let q = Tensor::randn(&mut rng, &[ck, hw], 1.0);
            let topk = 1 + case * 2;
            let aff = compute_affinity(&bank, &q, topk).unwrap();
            let f = readout(&bank, &aff).unwrap();
            let keys = bank.keys().unwrap();
            let values = bank.values().unwrap();
            let m = keys.shape()[1];
            let (oa, of) = oracle_affinity_readout(
                keys.data(),
                values.data(),
                q.data(),
                ck,
                2 * cv,
                m,
                hw,
                topk,
            );
            for (a, b) in aff.weights.data().iter().zip(&oa) {
                assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
            for (a, b) in f.data().iter().zip(&of) {
                assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    proptest! {
        #[test]
        fn insert_respects_capacity_and_pin(capacity in 1usize..6, inserts in 1usize..20) {
            let mut bank = MemoryBank::new(capacity).unwrap();
            let mut expected: Vec<usize> = Vec::new();
            for t in 0..inserts {
                let (k, v) = slot(2, 2, t as f32);
                bank.insert(t, k, v).unwrap();
                if expected.len() < capacity {
                    expected.push(t);
                } else if capacity > 1 {
                    expected.remove(1);
                    expected.push(t);
                }
                prop_assert!(bank.len() <= capacity);
                let ids = bank.frame_ids();
                prop_assert_eq!(ids.first(), Some(&0));
            }
            prop_assert_eq!(bank.frame_ids(), expected);
        }

        #[test]
        fn affinity_columns_are_stochastic(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bank = MemoryBank::new(4).unwrap();
            for t in 0..2 {
                bank.insert(t, Tensor::randn(&mut rng, &[3, 4], 1.0), Tensor::randn(&mut rng, &[1, 2, 4], 1.0)).unwrap();
            }
            let q = Tensor::randn(&mut rng, &[3, 4], 1.0);
            let topk = 1 + (seed as usize % 9);
            let aff = compute_affinity(&bank, &q, topk).unwrap();
            let w = aff.weights.data();
            for j in 0..4 {
                let col: Vec<f32> = (0..8).map(|i| w[i * 4 + j]).collect();
                let sum: f32 = col.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-5);
                prop_assert!(col.iter().all(|&v| v >= 0.0));
                prop_assert!(col.iter().filter(|&&v| v > 0.0).count() <= topk);
            }
        }
    }
}
