//! Class-balance oversampling of images that contain non-neoplastic pixels.

use super::ClassMap;
use crate::error::{Error, Result};
use crate::losses::{NEOPLASTIC, NON_NEOPLASTIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OversamplePlan {
    /// Copies of every image holding non-neoplastic pixels (1 = unchanged).
    pub duplication_factor: u64,
    pub p_non: u64,
    pub p_neo: u64,
}

impl OversamplePlan {
    /// Non-neoplastic pixel total after duplication.
    pub fn p_non_after(&self) -> u64 {
        self.duplication_factor * self.p_non
    }

    /// Index list of the oversampled set. Each duplicated image's copies sit
    /// next to each other, so the list stays in dataset order.
    pub fn expand(&self, masks: &[&ClassMap]) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, m) in masks.iter().enumerate() {
            let copies = if m.count(NON_NEOPLASTIC) > 0 {
                self.duplication_factor
            } else {
                1
            };
            out.extend(std::iter::repeat(i).take(copies as usize));
        }
        out
    }
}

/// Picks the positive integer d minimizing |d*P_non - P_neo| (smaller d on ties).
pub fn duplication_factor(p_non: u64, p_neo: u64) -> u64 {
    if p_non == 0 {
        return 1;
    }
    let q = p_neo / p_non;
    let err = |d: u64| (d * p_non).abs_diff(p_neo);
    let lo = q.max(1);
    if err(q + 1) < err(lo) {
        q + 1
    } else {
        lo
    }
}

pub fn plan_oversampling(masks: &[&ClassMap]) -> Result<OversamplePlan> {
    if masks.is_empty() {
        return Err(Error::InvalidInput("cannot plan oversampling of an empty dataset".into()));
    }
    let p_non: u64 = masks.iter().map(|m| m.count(NON_NEOPLASTIC)).sum();
    let p_neo: u64 = masks.iter().map(|m| m.count(NEOPLASTIC)).sum();
    if p_non == 0 {
        log::warn!("no non-neoplastic pixels in the dataset; oversampling disabled");
    }
    Ok(OversamplePlan {
        duplication_factor: duplication_factor(p_non, p_neo),
        p_non,
        p_neo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_ratio() {
        assert_eq!(duplication_factor(13, 80), 6);
        assert_eq!(duplication_factor(7, 7), 1);
        assert_eq!(duplication_factor(0, 100), 1);
        assert_eq!(duplication_factor(50, 3), 1);
        // 2*4 and 3*4 are both 2 away from 10
        assert_eq!(duplication_factor(4, 10), 2);
    }

    #[test]
    fn expand_duplicates_only_non_images() {
        let a = ClassMap::new(1, 2, vec![1, 0]);
        let b = ClassMap::new(1, 2, vec![2, 2]);
        let c = ClassMap::new(1, 2, vec![2, 2]);
        let masks = [&a, &b, &c];
        let plan = plan_oversampling(&masks).unwrap();
        assert_eq!(plan.duplication_factor, 4);
        assert_eq!(plan.expand(&masks), vec![0, 0, 0, 0, 1, 2]);
        assert_eq!(plan.p_non_after(), 4);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(plan_oversampling(&[]).is_err());
    }

    proptest! {
        #[test]
        fn factor_is_brute_force_minimum(p_non in 0u64..5_000, p_neo in 0u64..200_000) {
            let d = duplication_factor(p_non, p_neo);
            prop_assert!(d >= 1);
            let err = |d: u64| (d * p_non).abs_diff(p_neo);
            let limit = if p_non == 0 { 5 } else { p_neo / p_non + 5 };
            for other in 1..=limit {
                prop_assert!(err(d) <= err(other));
                if err(other) == err(d) {
                    prop_assert!(d <= other);
                }
            }
        }
    }
}
