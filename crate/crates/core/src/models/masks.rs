//! Attention masks in natural position space.
//!
//! Rows are queries, columns keys. The non-causal stack is any-to-any; the
//! unknown values are hidden at the input through the mask token instead.
//! The causal stack lets a position attend to itself and to every position
//! earlier in the ordering. Running a lower-triangular mask over the
//! permuted sequence is the same thing (see the tests).

use crate::types::Ordering;

pub type Mask = Vec<Vec<bool>>;

pub fn build_attention_masks(ordering: &Ordering) -> (Mask, Mask) {
    let d = ordering.len();
    let non_causal = vec![vec![true; d]; d];
    let rank = ordering.ranks();
    let causal = (0..d)
        .map(|q| (0..d).map(|k| rank[k] <= rank[q]).collect())
        .collect();
    (non_causal, causal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn left_to_right() {
        let (nc, c) = build_attention_masks(&Ordering::identity(2));
        assert_eq!(c, vec![vec![true, false], vec![true, true]]);
        assert!(nc.iter().flatten().all(|&b| b));
    }

    #[test]
    fn six_word_example() {
        // "Speculation is like hazarding a guess", σ = [6,5,2,4,3,1] (1-indexed).
        let ord = Ordering::new(vec![5, 4, 1, 3, 2, 0]).unwrap();
        let (nc, c) = build_attention_masks(&ord);
        // "like" (position 2) is 5th in the ordering and sees guess, a, is, hazarding, like.
        let like: Vec<usize> = (0..6).filter(|&k| c[2][k]).collect();
        assert_eq!(like, vec![1, 2, 3, 4, 5]);
        // "a" (position 4) sees only itself and "guess".
        let a: Vec<usize> = (0..6).filter(|&k| c[4][k]).collect();
        assert_eq!(a, vec![4, 5]);
        assert!(nc.iter().flatten().all(|&b| b));
    }

    #[test]
    fn permuted_lower_triangular_matches() {
        let ord = Ordering::new(vec![3, 0, 4, 2, 1]).unwrap();
        let (_, c) = build_attention_masks(&ord);
        for qr in 0..5 {
            for kr in 0..5 {
                assert_eq!(c[ord.at(qr)][ord.at(kr)], kr <= qr);
            }
        }
    }
}
