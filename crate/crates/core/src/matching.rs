//! One-to-one assignment of prediction slots to ground-truth triplets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::giou;
use crate::model::HoiPrediction;
use crate::scenegen::GroundTruthTriplet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("{cols} ground-truth columns cannot be covered by {rows} prediction rows")]
    InfeasibleMatrix { rows: usize, cols: usize },
    #[error("non-finite cost at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("ragged cost matrix")]
    Ragged,
}

/// Dense `predictions × ground truth` cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatchingError> {
        if data.len() != rows * cols {
            return Err(MatchingError::Ragged);
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatchingError::NonFinite(k / cols.max(1), k % cols.max(1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchingError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MatchingError::Ragged);
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(prediction, ground_truth)` pairs ordered by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    /// Prediction rows left without a partner, ascending.
    pub unmatched: Vec<usize>,
}

impl Assignment {
    /// Sum of matched entries, accumulated in ground-truth order.
    pub fn cost(&self, m: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| m.get(r, c)).sum()
    }

    /// Ground-truth index matched to each prediction row, if any.
    pub fn gt_for_rows(&self, rows: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; rows];
        for &(r, c) in &self.pairs {
            out[r] = Some(c);
        }
        out
    }
}

/// Minimum-cost assignment covering every column (Kuhn–Munkres with potentials).
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment, MatchingError> {
    let (rows, cols) = (cost.rows, cost.cols);
    if cols > rows {
        return Err(MatchingError::InfeasibleMatrix { rows, cols });
    }
    if cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched: (0..rows).collect(),
        });
    }

    // Columns play the role of "workers" so that the smaller side is the
    // one that gets fully assigned. Indices are 1-based; 0 is a sentinel.
    let (n, m) = (cols, rows);
    let a = |i: usize, j: usize| cost.get(j - 1, i - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (j - 1, owner[j] - 1))
        .collect();
    pairs.sort_by_key(|&(_, c)| c);
    let unmatched = (1..=m).filter(|&j| owner[j] == 0).map(|j| j - 1).collect();
    Ok(Assignment { pairs, unmatched })
}

/// Weights of the matching cost terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub cls: f64,
    pub verb: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            verb: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Cost of explaining `gt` with prediction slot `pred`.
///
/// The L1 term sums absolute corner differences over both boxes.
pub fn hoi_match_cost(pred: &HoiPrediction, gt: &GroundTruthTriplet, w: &MatchWeights) -> f64 {
    let cls = 1.0 - pred.object_probs[gt.object_class];
    let verb = 1.0 - pred.verb_probs[gt.verb];
    let l1 = pred.human_box.l1_distance(&gt.human_box) + pred.object_box.l1_distance(&gt.object_box);
    let g = 2.0 - giou(&pred.human_box, &gt.human_box) - giou(&pred.object_box, &gt.object_box);
    w.cls * cls + w.verb * verb + w.l1 * l1 + w.giou * g
}

pub fn cost_matrix(
    preds: &[HoiPrediction],
    gts: &[GroundTruthTriplet],
    w: &MatchWeights,
) -> Result<CostMatrix, MatchingError> {
    let data = preds
        .iter()
        .flat_map(|p| gts.iter().map(move |g| hoi_match_cost(p, g, w)))
        .collect();
    CostMatrix::new(preds.len(), gts.len(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injective column→row maps.
    fn brute_force(m: &CostMatrix) -> f64 {
        fn go(m: &CostMatrix, col: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if col == m.cols() {
                *best = best.min(acc);
                return;
            }
            for r in 0..m.rows() {
                if !used[r] {
                    used[r] = true;
                    go(m, col + 1, used, acc + m.get(r, col), best);
                    used[r] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(m, 0, &mut vec![false; m.rows()], 0.0, &mut best);
        best
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CostMatrix {
        CostMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(0.0..10.0)).collect()).unwrap()
    }

    #[test]
    fn single_entry() {
        let a = hungarian(&CostMatrix::from_rows(&[vec![3.5]]).unwrap()).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert!(a.unmatched.is_empty());
    }

    #[test]
    fn zero_diagonal_is_chosen() {
        let m = CostMatrix::from_rows(&[
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        let a = hungarian(&m).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn infeasible_and_empty() {
        let m = CostMatrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(
            hungarian(&m),
            Err(MatchingError::InfeasibleMatrix { rows: 1, cols: 2 })
        );
        let empty = CostMatrix::new(3, 0, vec![]).unwrap();
        assert_eq!(hungarian(&empty).unwrap().unmatched, vec![0, 1, 2]);
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn six_by_four_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        for _ in 0..200 {
            let m = random_matrix(&mut rng, 6, 4);
            let a = hungarian(&m).unwrap();
            assert_eq!(a.cost(&m), brute_force(&m));
            assert_eq!(a.unmatched.len(), 2);
        }
    }

    #[test]
    fn never_worse_than_random_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let rows = rng.gen_range(1..8);
            let cols = rng.gen_range(0..=rows);
            let m = random_matrix(&mut rng, rows, cols);
            let best = hungarian(&m).unwrap().cost(&m);
            let mut perm: Vec<usize> = (0..rows).collect();
            for i in (1..rows).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let random: f64 = (0..cols).map(|c| m.get(perm[c], c)).sum();
            assert!(best <= random + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn row_permutation_equivariance(seed in 0u64..10_000, rows in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols = rng.gen_range(1..=rows);
            let m = random_matrix(&mut rng, rows, cols);
            let mut perm: Vec<usize> = (0..rows).collect();
            for i in (1..rows).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            // Row r of the permuted matrix is row perm[r] of the original.
            let permuted = CostMatrix::new(
                rows,
                cols,
                perm.iter().flat_map(|&r| (0..cols).map(move |c| (r, c))).map(|(r, c)| m.get(r, c)).collect(),
            ).unwrap();
            let a = hungarian(&m).unwrap();
            let b = hungarian(&permuted).unwrap();
            let mapped: Vec<(usize, usize)> = b.pairs.iter().map(|&(r, c)| (perm[r], c)).collect();
            prop_assert_eq!(a.pairs, mapped);
        }
    }
}
