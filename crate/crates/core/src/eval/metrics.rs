use std::collections::HashMap;

use super::decode::STOP;
use crate::textdata::TokenId;

/// Cuts a generation at its first stop token.
pub fn strip_stop(ids: &[TokenId]) -> &[TokenId] {
    let end = ids
        .iter()
        .position(|t| STOP.contains(t))
        .unwrap_or(ids.len());
    &ids[..end]
}

pub fn exact_match(pred: &[TokenId], gold: &[TokenId]) -> f64 {
    if pred == gold {
        1.0
    } else {
        0.0
    }
}

/// Harmonic mean of multiset precision and recall; two empty sequences score 1.
pub fn token_f1(pred: &[TokenId], gold: &[TokenId]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    for t in gold {
        *counts.entry(*t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t).filter(|c| **c > 0) {
            *c -= 1;
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textdata::EOP;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(exact_match(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(token_f1(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(exact_match(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(token_f1(&[1, 2], &[3, 4]), 0.0);
        assert!((token_f1(&[1, 2, 7, 8], &[1, 2, 3, 4]) - 0.5).abs() < 1e-15);
        assert_eq!(strip_stop(&[5, 6, EOP, 9]), &[5, 6]);
    }

    proptest! {
        #[test]
        fn f1_is_symmetric_and_bounded(a in prop::collection::vec(0u16..6, 0..8), b in prop::collection::vec(0u16..6, 0..8)) {
            let f = token_f1(&a, &b);
            prop_assert_eq!(f, token_f1(&b, &a));
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
