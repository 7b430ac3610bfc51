//! Adapter fusion by per-parameter sign consensus.
//!
//! All task adapters are flattened to task vectors; per coordinate, the
//! fused value keeps the sign of the summed vectors and the most extreme
//! value on that side: the maximum entry when the consensus is positive,
//! the minimum when negative, zero when the sum is exactly zero. Each fused
//! coordinate is therefore bitwise equal to one of the input coordinates
//! (or zero), never an average.
//!
//! When the consensus is positive the maximum over all entries equals the
//! largest entry among those sharing the consensus sign (at least one entry
//! is positive whenever the sum is), so taking the extreme over all entries
//! and over the sign-consistent subset coincide; the tests pin this down.
//!
//! Per-coordinate sums run in ascending value order, which makes the result
//! independent of the order the adapters are supplied in.

use crate::error::{Error, Result};
use crate::model::{AdapterId, AdapterSet, TaskVector};

/// Outcome of fusing a list of task vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    /// Per parameter: −1, 0, or +1.
    pub sign: Vec<i8>,
    /// Per parameter: the selected nonnegative magnitude.
    pub magnitude: Vec<f64>,
    /// `universal.values[j] == magnitude[j] * sign[j]`.
    pub universal: TaskVector,
}

fn check_vectors(vectors: &[TaskVector]) -> Result<()> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Data("fusion needs at least one task vector".into()))?;
    first.validate()?;
    for (i, v) in vectors.iter().enumerate().skip(1) {
        if !v.same_manifest(first) {
            return Err(Error::Data(format!(
                "task vector {i} has a different layout than the first"
            )));
        }
    }
    Ok(())
}

/// Per-parameter sign of the summed task vectors; an exactly zero sum
/// yields 0.
pub fn sign_vector(vectors: &[TaskVector]) -> Result<Vec<i8>> {
    check_vectors(vectors)?;
    let dims = vectors[0].len();
    let mut sign = vec![0i8; dims];
    let mut column = vec![0.0; vectors.len()];
    for j in 0..dims {
        for (c, v) in column.iter_mut().zip(vectors) {
            *c = v.values[j];
        }
        column.sort_by(f64::total_cmp);
        let sum: f64 = column.iter().sum();
        sign[j] = if sum > 0.0 {
            1
        } else if sum < 0.0 {
            -1
        } else {
            0
        };
    }
    Ok(sign)
}

/// Per-parameter magnitude: the absolute value of the maximum entry where
/// the consensus is positive, of the minimum entry where negative, zero
/// elsewhere.
pub fn magnitude_vector(vectors: &[TaskVector], sign: &[i8]) -> Result<Vec<f64>> {
    check_vectors(vectors)?;
    let dims = vectors[0].len();
    if sign.len() != dims {
        return Err(Error::Data(format!(
            "sign vector has {} entries for {dims} parameters",
            sign.len()
        )));
    }
    let mut magnitude = vec![0.0; dims];
    for j in 0..dims {
        magnitude[j] = match sign[j].cmp(&0) {
            std::cmp::Ordering::Greater => vectors
                .iter()
                .map(|v| v.values[j])
                .fold(f64::NEG_INFINITY, f64::max)
                .abs(),
            std::cmp::Ordering::Less => vectors
                .iter()
                .map(|v| v.values[j])
                .fold(f64::INFINITY, f64::min)
                .abs(),
            std::cmp::Ordering::Equal => 0.0,
        };
    }
    Ok(magnitude)
}

/// Fuse flat task vectors: sign consensus, magnitude selection, and their
/// elementwise product.
pub fn fuse_vectors(vectors: &[TaskVector]) -> Result<FusionResult> {
    let sign = sign_vector(vectors)?;
    let magnitude = magnitude_vector(vectors, &sign)?;
    let values: Vec<f64> = sign
        .iter()
        .zip(&magnitude)
        .map(|(&s, &m)| m * s as f64)
        .collect();
    Ok(FusionResult {
        sign,
        magnitude,
        universal: TaskVector {
            values,
            manifest: vectors[0].manifest.clone(),
        },
    })
}

/// Fuse trained adapter sets into the universal adapter.
pub fn fuse(adapter_sets: &[&AdapterSet]) -> Result<AdapterSet> {
    if adapter_sets.is_empty() {
        return Err(Error::Data("fusion needs at least one adapter set".into()));
    }
    for (i, a) in adapter_sets.iter().enumerate().skip(1) {
        if !a.shapes_match(adapter_sets[0]) {
            return Err(Error::Data(format!(
                "adapter set {} ({}) has different shapes than the first",
                i, a.id
            )));
        }
    }
    let vectors: Vec<TaskVector> = adapter_sets.iter().map(|a| a.flatten()).collect();
    let fused = fuse_vectors(&vectors)?;
    AdapterSet::from_task_vector(&fused.universal, AdapterId::Universal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneConfig;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn tv(values: Vec<f64>) -> TaskVector {
        let n = values.len();
        TaskVector {
            values,
            manifest: vec![crate::model::ManifestEntry {
                block: 0,
                matrix: crate::model::MatrixKind::WDown,
                rows: n,
                cols: 1,
            }],
        }
    }

    /// Literal per-dimension walk of the fusion rule, kept deliberately
    /// naive and separate from the implementation.
    fn oracle(vectors: &[TaskVector]) -> Vec<f64> {
        let dims = vectors[0].len();
        (0..dims)
            .map(|j| {
                let vals: Vec<f64> = {
                    let mut v: Vec<f64> = vectors.iter().map(|t| t.values[j]).collect();
                    v.sort_by(f64::total_cmp);
                    v
                };
                let sum: f64 = vals.iter().sum();
                if sum > 0.0 {
                    let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    mx.abs()
                } else if sum < 0.0 {
                    let mn = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    -mn.abs()
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn worked_example_sign_magnitude_universal() {
        let vectors = vec![tv(vec![1.0, -2.0, 0.0]), tv(vec![3.0, 1.0, 0.0])];
        let sign = sign_vector(&vectors).unwrap();
        assert_eq!(sign, vec![1, -1, 0]);
        let mag = magnitude_vector(&vectors, &sign).unwrap();
        assert_eq!(mag, vec![3.0, 2.0, 0.0]);
        let fused = fuse_vectors(&vectors).unwrap();
        assert_eq!(fused.universal.values, vec![3.0, -2.0, 0.0]);
    }

    #[test]
    fn single_vector_sign_is_its_own_sign() {
        let vectors = vec![tv(vec![-5.0, 0.0, 7.0])];
        assert_eq!(sign_vector(&vectors).unwrap(), vec![-1, 0, 1]);
        let fused = fuse_vectors(&vectors).unwrap();
        assert_eq!(fused.universal.values, vec![-5.0, 0.0, 7.0]);
        assert_eq!(fused.magnitude, vec![5.0, 0.0, 7.0]);
    }

    #[test]
    fn opposite_vectors_cancel_to_zero() {
        let v = tv(vec![1.5, -2.0, 0.25]);
        let neg = tv(v.values.iter().map(|x| -x).collect());
        let fused = fuse_vectors(&[v, neg]).unwrap();
        assert_eq!(fused.sign, vec![0, 0, 0]);
        assert_eq!(fused.universal.values, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_vectors_fuse_to_themselves() {
        let v = tv(vec![0.5, -1.25, 0.0, 3.0]);
        let fused = fuse_vectors(&[v.clone(), v.clone(), v.clone()]).unwrap();
        for (got, want) in fused.universal.values.iter().zip(&v.values) {
            assert_eq!(got.to_bits(), want.to_bits());
        }
    }

    #[test]
    fn fused_value_is_always_one_of_the_inputs_or_zero() {
        let mut rng = Rng::new(31);
        let vectors: Vec<TaskVector> = (0..4)
            .map(|_| tv(rng.normal_vec(64, 1.0)))
            .collect();
        let fused = fuse_vectors(&vectors).unwrap();
        for j in 0..64 {
            let v = fused.universal.values[j];
            assert!(
                v == 0.0 || vectors.iter().any(|t| t.values[j].to_bits() == v.to_bits()),
                "dimension {j}: fused {v} is not an input value"
            );
        }
    }

    #[test]
    fn positive_consensus_magnitude_equals_max_over_sign_consistent_entries() {
        let mut rng = Rng::new(32);
        let vectors: Vec<TaskVector> = (0..5).map(|_| tv(rng.normal_vec(128, 1.0))).collect();
        let fused = fuse_vectors(&vectors).unwrap();
        for j in 0..128 {
            if fused.sign[j] == 1 {
                let consistent_max = vectors
                    .iter()
                    .map(|t| t.values[j])
                    .filter(|&v| v > 0.0)
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(fused.magnitude[j], consistent_max.abs());
            }
        }
    }

    #[test]
    fn adapter_level_fusion_single_set_is_bitwise_identity() {
        let cfg = BackboneConfig::default();
        let mut rng = Rng::new(33);
        let a = AdapterSet::init(&cfg, 8, AdapterId::Task(1), &mut rng);
        a.w_up[0].update_data(|d| d.iter_mut().for_each(|v| *v += 0.5));
        let fused = fuse(&[&a]).unwrap();
        assert_eq!(fused.id, AdapterId::Universal);
        for b in 0..cfg.num_blocks {
            let (x, y) = (a.w_down[b].data_vec(), fused.w_down[b].data_vec());
            assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn mismatched_layouts_are_rejected() {
        let a = tv(vec![1.0, 2.0]);
        let b = tv(vec![1.0, 2.0, 3.0]);
        assert!(sign_vector(&[a, b]).is_err());
        assert!(fuse(&[]).is_err());
    }

    proptest! {
        #[test]
        fn matches_oracle_and_invariants(
            t in 1usize..6,
            dims in 1usize..40,
            raw in proptest::collection::vec(-8.0f64..8.0, 6 * 40),
            zero_mask in proptest::collection::vec(proptest::bool::ANY, 6 * 40),
        ) {
            let vectors: Vec<TaskVector> = (0..t)
                .map(|i| {
                    tv((0..dims)
                        .map(|j| {
                            let idx = i * dims + j;
                            if zero_mask[idx] { 0.0 } else { raw[idx] }
                        })
                        .collect())
                })
                .collect();
            let fused = fuse_vectors(&vectors).unwrap();
            let want = oracle(&vectors);
            for j in 0..dims {
                prop_assert_eq!(fused.universal.values[j].to_bits(), want[j].to_bits());
                // Bounded magnitude and sign consistency.
                let max_abs = vectors.iter().map(|v| v.values[j].abs()).fold(0.0, f64::max);
                prop_assert!(fused.universal.values[j].abs() <= max_abs);
                let sum: f64 = vectors.iter().map(|v| v.values[j]).sum();
                prop_assert!(fused.universal.values[j] * sum >= 0.0);
            }
        }

        #[test]
        fn permutation_invariant(
            dims in 1usize..24,
            raw in proptest::collection::vec(-4.0f64..4.0, 5 * 24),
            swap_a in 0usize..5,
            swap_b in 0usize..5,
        ) {
            let mut vectors: Vec<TaskVector> = (0..5)
                .map(|i| tv((0..dims).map(|j| raw[i * dims + j]).collect()))
                .collect();
            let base = fuse_vectors(&vectors).unwrap();
            vectors.swap(swap_a, swap_b);
            vectors.reverse();
            let permuted = fuse_vectors(&vectors).unwrap();
            for j in 0..dims {
                prop_assert_eq!(
                    base.universal.values[j].to_bits(),
                    permuted.universal.values[j].to_bits()
                );
            }
        }
    }
}
