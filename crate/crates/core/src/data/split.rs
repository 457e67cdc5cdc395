//! Subject-level train/validation/test splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::SliceStack;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    Fractions([f64; 3]),
    #[error("the {0} partition would be empty")]
    EmptyPartition(&'static str),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub train: Vec<SliceStack>,
    pub validation: Vec<SliceStack>,
    pub test: Vec<SliceStack>,
}

/// Shuffles subjects with `seed` and cuts the shuffled list into contiguous
/// train/validation/test runs. Subject counts follow the largest-remainder
/// rule. All stacks of a subject land in the same partition. A partition
/// with a positive fraction that would receive no subject is an error; a
/// zero fraction yields an intentionally empty partition.
pub fn split_dataset(stacks: &[SliceStack], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit, SplitError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(SplitError::Fractions(fractions));
    }
    let mut subjects: Vec<&str> = Vec::new();
    for s in stacks {
        if !subjects.contains(&s.subject.as_str()) {
            subjects.push(&s.subject);
        }
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = subjects.len();
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    for &i in order.iter().take(n - counts.iter().sum::<usize>()) {
        counts[i] += 1;
    }
    for (i, name) in ["train", "validation", "test"].into_iter().enumerate() {
        if fractions[i] > 0.0 && counts[i] == 0 {
            return Err(SplitError::EmptyPartition(name));
        }
    }

    let mut split = DatasetSplit::default();
    for s in stacks {
        let pos = subjects.iter().position(|&x| x == s.subject).expect("collected above");
        let part = if pos < counts[0] {
            &mut split.train
        } else if pos < counts[0] + counts[1] {
            &mut split.validation
        } else {
            &mut split.test
        };
        part.push(s.clone());
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Phase;

    fn stacks(subjects: usize, per_subject: usize) -> Vec<SliceStack> {
        (0..subjects)
            .flat_map(|i| {
                (0..per_subject).map(move |j| {
                    SliceStack::new(
                        format!("sub{i}"),
                        Phase::EndDiastole,
                        1,
                        1,
                        1,
                        1.0,
                        vec![j as f32],
                        None,
                    )
                    .unwrap()
                })
            })
            .collect()
    }

    #[test]
    fn eight_one_one() {
        let s = split_dataset(&stacks(10, 1), [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_dataset(&stacks(10, 1), [0.8, 0.1, 0.1], 3).unwrap());
    }

    #[test]
    fn subjects_never_straddle() {
        let s = split_dataset(&stacks(6, 2), [0.5, 0.25, 0.25], 1).unwrap();
        let subj = |v: &[SliceStack]| {
            v.iter()
                .map(|x| x.subject.clone())
                .collect::<std::collections::HashSet<_>>()
        };
        let (a, b, c) = (subj(&s.train), subj(&s.validation), subj(&s.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 12);
    }

    #[test]
    fn rejects_bad_fractions_and_empty_partitions() {
        assert!(matches!(
            split_dataset(&stacks(4, 1), [0.5, 0.5, 0.5], 0),
            Err(SplitError::Fractions(_))
        ));
        assert_eq!(
            split_dataset(&stacks(2, 1), [0.8, 0.1, 0.1], 0),
            Err(SplitError::EmptyPartition("validation"))
        );
        let s = split_dataset(&stacks(4, 1), [0.75, 0.0, 0.25], 0).unwrap();
        assert!(s.validation.is_empty());
    }
}
