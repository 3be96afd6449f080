//! Binary-relevance ranking metrics. Inputs are relevance bits in rank
//! order; `None` signals a query with no relevant items.

/// `(1/R) Σ_{k: rel_k} precision@k` over the full list.
pub fn average_precision(rel: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in rel.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Binary-gain NDCG with `1 / log₂(i + 1)` discount (1-indexed ranks),
/// over the first `cutoff` positions or the full list.
pub fn ndcg(rel: &[bool], cutoff: Option<usize>) -> Option<f64> {
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let k = cutoff.unwrap_or(rel.len()).min(rel.len());
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = rel[..k]
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| discount(i))
        .sum();
    let ideal: f64 = (0..total.min(k)).map(discount).sum();
    if ideal == 0.0 {
        // Cutoff of zero: nothing retrieved, nothing expected.
        return Some(0.0);
    }
    Some(dcg / ideal)
}

/// MPEG-7 normalized modified retrieval rank of one query.
///
/// `relevant_ranks` are the 1-indexed ranks of the query's `ng` relevant
/// items (missing items count as beyond the window); `gtm` is the largest
/// `ng` over all queries. With `K = min(4·NG, 2·GTM)`, ranks above `K` are
/// replaced by `1.25·K`, and
/// `NMRR = (AVR − 0.5 − NG/2) / (1.25·K − 0.5 − NG/2)`.
pub fn nmrr(relevant_ranks: &[usize], ng: usize, gtm: usize) -> Option<f64> {
    if ng == 0 {
        return None;
    }
    let k = (4 * ng).min(2 * gtm.max(ng)) as f64;
    let penalty = 1.25 * k;
    let mut sum: f64 = relevant_ranks
        .iter()
        .take(ng)
        .map(|&r| if (r as f64) <= k { r as f64 } else { penalty })
        .sum();
    sum += penalty * ng.saturating_sub(relevant_ranks.len()) as f64;
    let ng = ng as f64;
    let avr = sum / ng;
    let mrr = avr - 0.5 - 0.5 * ng;
    Some(mrr / (penalty - 0.5 - 0.5 * ng))
}

/// 1-indexed ranks of the relevant positions.
pub fn relevant_ranks(rel: &[bool]) -> Vec<usize> {
    rel.iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| i + 1)
        .collect()
}

/// Mean NMRR over queries given as `(relevant ranks, NG)`; queries with
/// `NG = 0` are skipped.
pub fn anmrr(queries: &[(Vec<usize>, usize)]) -> Option<f64> {
    let gtm = queries.iter().map(|(_, ng)| *ng).max()?;
    let vals: Vec<f64> = queries
        .iter()
        .filter_map(|(ranks, ng)| nmrr(ranks, *ng, gtm))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&bits(&[1, 0, 1])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((ap - 0.8333).abs() < 1e-4);
        assert_eq!(average_precision(&bits(&[1, 1, 0, 0, 0])), Some(1.0));
        assert_eq!(average_precision(&bits(&[0, 0, 0, 0, 1])), Some(0.2));
        assert_eq!(average_precision(&bits(&[0, 0])), None);
    }

    #[test]
    fn ndcg_examples() {
        let v = ndcg(&bits(&[1, 0, 1]), None).unwrap();
        let expected = 1.5 / (1.0 + 1.0 / 3f64.log2());
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.91972).abs() < 5e-6);
        assert_eq!(ndcg(&bits(&[1, 1, 0]), None), Some(1.0));
        assert_eq!(ndcg(&bits(&[1, 0, 0, 1, 1]), Some(1)), Some(1.0));
        assert_eq!(ndcg(&bits(&[1, 0, 0, 0]), None), Some(1.0));
        assert_eq!(ndcg(&bits(&[0, 0]), None), None);
        assert_eq!(ndcg(&bits(&[0, 1]), Some(1)), Some(0.0));
    }

    #[test]
    fn nmrr_examples() {
        let v = nmrr(&[1, 3], 2, 2).unwrap();
        assert!((v - 0.5 / 3.5).abs() < 1e-15);
        assert!((v - 0.14286).abs() < 5e-6);
        assert_eq!(nmrr(&[1, 2], 2, 2), Some(0.0));
        // K = 4 → both beyond the window.
        assert!((nmrr(&[9, 10], 2, 2).unwrap() - 1.0).abs() < 1e-12);
        // K = min(4, 2·5) = 4 for NG = 1.
        assert!((nmrr(&[7], 1, 5).unwrap() - 1.0).abs() < 1e-12);
        assert!((nmrr(&[], 3, 3).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmrr(&[], 0, 3), None);
    }

    #[test]
    fn anmrr_mean() {
        let q = vec![(vec![1, 3], 2), (vec![1, 2], 2)];
        assert!((anmrr(&q).unwrap() - 0.5 / 3.5 / 2.0).abs() < 1e-15);
        assert_eq!(anmrr(&[]), None);
    }

    proptest! {
        #[test]
        fn bounds_and_monotone(pattern in prop::collection::vec(any::<bool>(), 1..12), pos in 1usize..12) {
            prop_assume!(pattern.iter().any(|&b| b));
            let ap = average_precision(&pattern).unwrap();
            let nd = ndcg(&pattern, None).unwrap();
            let ranks = relevant_ranks(&pattern);
            let ng = ranks.len();
            let nm = nmrr(&ranks, ng, ng).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&nd));
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&nm));

            // Move a relevant item one rank earlier past an irrelevant one.
            if pos < pattern.len() && pattern[pos] && !pattern[pos - 1] {
                let mut better = pattern.clone();
                better.swap(pos - 1, pos);
                prop_assert!(average_precision(&better).unwrap() >= ap);
                prop_assert!(ndcg(&better, None).unwrap() >= nd);
                prop_assert!(nmrr(&relevant_ranks(&better), ng, ng).unwrap() <= nm);
            }
        }

        #[test]
        fn sorted_relevance_is_perfect(r in 1usize..10, tail in 0usize..10) {
            let mut p = vec![true; r];
            p.extend(std::iter::repeat_n(false, tail));
            prop_assert_eq!(average_precision(&p), Some(1.0));
            prop_assert!((ndcg(&p, None).unwrap() - 1.0).abs() < 1e-15);
            prop_assert_eq!(nmrr(&relevant_ranks(&p), r, r), Some(0.0));
        }
    }
}
