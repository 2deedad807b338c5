use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClusterModel, Result, VectorError};

/// Number of k-means clusters for a slide: `max(1, floor(sqrt(n)))`.
pub fn cluster_count_rule(n_patches: usize) -> usize {
    n_patches.isqrt().max(1)
}

/// Split `total` across clusters of the given capacities: equal shares, remainders
/// to the lowest cluster indices, and any shortfall of small clusters handed on
/// to the clusters that still have room.
pub fn cluster_quotas(capacities: &[usize], total: usize) -> Result<Vec<usize>> {
    let available: usize = capacities.iter().sum();
    if total > available {
        return Err(VectorError::TotalTooLarge { total, available });
    }
    // largest fill level every cluster can be raised to without exceeding total
    let filled = |level: usize| capacities.iter().map(|&c| c.min(level)).sum::<usize>();
    let (mut lo, mut hi) = (0usize, capacities.iter().copied().max().unwrap_or(0));
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if filled(mid) <= total {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let mut quotas: Vec<usize> = capacities.iter().map(|&c| c.min(lo)).collect();
    let mut remaining = total - filled(lo);
    for (q, &c) in quotas.iter_mut().zip(capacities) {
        if remaining == 0 {
            break;
        }
        if c > lo {
            *q += 1;
            remaining -= 1;
        }
    }
    Ok(quotas)
}

pub fn uniform_cluster_sample(model: &ClusterModel, total: usize, seed: u64) -> Result<Vec<usize>> {
    uniform_cluster_sample_excluding(&model.assignments, model.k, &HashSet::new(), total, seed)
}

/// Draw `total` distinct rows spread evenly over clusters, uniformly without
/// replacement inside each cluster. Rows in `exclude` are never drawn. The result
/// is sorted ascending.
pub fn uniform_cluster_sample_excluding(
    assignments: &[usize],
    k: usize,
    exclude: &HashSet<usize>,
    total: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        if !exclude.contains(&i) {
            members[a].push(i);
        }
    }
    let caps: Vec<usize> = members.iter().map(Vec::len).collect();
    let quotas = cluster_quotas(&caps, total)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total);
    for (m, q) in members.iter().zip(quotas) {
        if q == m.len() {
            out.extend_from_slice(m);
        } else if q > 0 {
            out.extend(rand::seq::index::sample(&mut rng, m.len(), q).iter().map(|j| m[j]));
        }
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sqrt_rule() {
        assert_eq!(cluster_count_rule(10_000), 100);
        assert_eq!(cluster_count_rule(1), 1);
        assert_eq!(cluster_count_rule(2500), 50);
        assert_eq!(cluster_count_rule(2499), 49);
        assert_eq!(cluster_count_rule(0), 1);
    }

    #[test]
    fn equal_clusters() {
        assert_eq!(cluster_quotas(&[100; 4], 256).unwrap(), vec![64; 4]);
    }

    #[test]
    fn shortfall_redistributed() {
        // hand simulation: shares 86/85/85, cluster 0 caps at 2, the 84 left over
        // alternate between clusters 1 and 2
        assert_eq!(cluster_quotas(&[2, 500, 500], 256).unwrap(), vec![2, 127, 127]);
    }

    #[test]
    fn too_many_requested() {
        assert!(matches!(cluster_quotas(&[3, 4], 8), Err(VectorError::TotalTooLarge { total: 8, available: 7 })));
    }

    #[test]
    fn single_cluster_takes_all() {
        let assign = vec![0usize; 17];
        let got = uniform_cluster_sample_excluding(&assign, 1, &HashSet::new(), 17, 1).unwrap();
        assert_eq!(got, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn exclusion_respected() {
        let assign: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let exclude: HashSet<usize> = (0..8).collect();
        let got = uniform_cluster_sample_excluding(&assign, 4, &exclude, 32, 2).unwrap();
        assert_eq!(got, (8..40).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn sample_size_and_distinct(sizes in proptest::collection::vec(0usize..30, 1..8), frac in 0.0f64..=1.0, seed: u64) {
            let assign: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect();
            let n = assign.len();
            let total = (n as f64 * frac) as usize;
            let got = uniform_cluster_sample_excluding(&assign, sizes.len(), &HashSet::new(), total, seed).unwrap();
            prop_assert_eq!(got.len(), total);
            let uniq: HashSet<_> = got.iter().collect();
            prop_assert_eq!(uniq.len(), total);
            let again = uniform_cluster_sample_excluding(&assign, sizes.len(), &HashSet::new(), total, seed).unwrap();
            prop_assert_eq!(got, again);
        }

        #[test]
        fn quotas_sum_and_respect_caps(caps in proptest::collection::vec(0usize..50, 1..10), frac in 0.0f64..=1.0) {
            let total = (caps.iter().sum::<usize>() as f64 * frac) as usize;
            let q = cluster_quotas(&caps, total).unwrap();
            prop_assert_eq!(q.iter().sum::<usize>(), total);
            for (a, b) in q.iter().zip(&caps) {
                prop_assert!(a <= b);
            }
            // no open cluster is more than one below a cluster that received more
            let max_open = q.iter().zip(&caps).filter(|(a, b)| a < b).map(|(a, _)| *a).min();
            if let Some(lo) = max_open {
                prop_assert!(q.iter().all(|&x| x <= lo + 1));
            }
        }
    }
}
