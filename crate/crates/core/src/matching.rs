//! Optimal one-to-one matching of object queries to targets, and the fixed
//! binding of auxiliary queries to the noisy samples that created them.

use crate::error::{Error, Result};
use crate::geometry::{giou, BBox, NoisySample};
use crate::losses::LossWeights;
use crate::tensor::Tensor;

/// Query-by-target matching costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "cost matrix {rows}x{cols} given {} entries",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("cost matrix contains non-finite entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, q: usize, t: usize) -> f64 {
        self.data[q * self.cols + t]
    }

    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(q, t)| self.get(q, t)).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(query, target)` sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl Assignment {
    /// Target index for each query, `None` when unmatched.
    pub fn target_of(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for &(q, t) in &self.pairs {
            out[q] = Some(t);
        }
        out
    }
}

/// `cost(q, t) = -w_cls p(q, cat t) + w_l1 |box_q - box_t|_1 + w_giou (1 - giou)`.
///
/// `probs` is `queries × prompts`; each target carries its box and the index
/// of its category's prompt. Boxes are center form.
pub fn build_cost_matrix(
    probs: &Tensor,
    query_boxes: &[[f64; 4]],
    targets: &[(BBox, usize)],
    weights: &LossWeights,
) -> Result<CostMatrix> {
    if probs.rows() != query_boxes.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} query boxes",
            probs.rows(),
            query_boxes.len()
        )));
    }
    let mut data = Vec::with_capacity(query_boxes.len() * targets.len());
    for (q, qb) in query_boxes.iter().enumerate() {
        let qbox = BBox::from_center_form(*qb);
        for (tb, prompt) in targets {
            if *prompt >= probs.cols() {
                return Err(Error::Shape(format!("prompt index {prompt} out of range")));
            }
            let tc = tb.to_center_form();
            let l1: f64 = qb.iter().zip(&tc).map(|(a, b)| (a - b).abs()).sum();
            data.push(
                -weights.w_cls * probs.get(q, *prompt)
                    + weights.w_l1 * l1
                    + weights.w_giou * (1.0 - giou(&qbox, tb)),
            );
        }
    }
    CostMatrix::new(query_boxes.len(), targets.len(), data)
}

/// Minimum-cost assignment of every target to a distinct query.
///
/// Among optimal assignments the one whose query-sorted pair list is
/// lexicographically smallest is returned.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (nq, nt) = (cost.rows, cost.cols);
    if nt > nq {
        return Err(Error::Shape(format!("{nt} targets cannot be matched to {nq} queries")));
    }
    if nt == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched_queries: (0..nq).collect(),
        });
    }
    let all_q: Vec<usize> = (0..nq).collect();
    let all_t: Vec<usize> = (0..nt).collect();
    let best = solve_subset(cost, &all_q, &all_t).0;
    let tol = 1e-9 * best.abs().max(1.0);

    let mut pairs = Vec::with_capacity(nt);
    let mut unmatched = Vec::new();
    let mut fixed_cost = 0.0;
    let mut targets_left = all_t;
    for q in 0..nq {
        if targets_left.is_empty() {
            unmatched.push(q);
            continue;
        }
        let rest_q: Vec<usize> = (q + 1..nq).collect();
        let mut chosen = None;
        for (pos, &t) in targets_left.iter().enumerate() {
            let mut rest_t = targets_left.clone();
            rest_t.remove(pos);
            if rest_t.len() > rest_q.len() {
                continue;
            }
            let sub = if rest_t.is_empty() {
                0.0
            } else {
                solve_subset(cost, &rest_q, &rest_t).0
            };
            if (fixed_cost + cost.get(q, t) + sub - best).abs() <= tol {
                chosen = Some(pos);
                break;
            }
        }
        match chosen {
            Some(pos) => {
                let t = targets_left.remove(pos);
                fixed_cost += cost.get(q, t);
                pairs.push((q, t));
            }
            None => unmatched.push(q),
        }
    }
    debug_assert_eq!(pairs.len(), nt);
    Ok(Assignment {
        pairs,
        unmatched_queries: unmatched,
    })
}

/// Shortest-augmenting-path Hungarian method on the sub-matrix
/// `queries × targets` (`targets.len() <= queries.len()`). Returns the
/// optimal cost and, per target, the chosen position in `queries`.
fn solve_subset(cost: &CostMatrix, queries: &[usize], targets: &[usize]) -> (f64, Vec<usize>) {
    let n = targets.len();
    let m = queries.len();
    debug_assert!(n <= m);
    let a = |i: usize, j: usize| cost.get(queries[j - 1], targets[i - 1]);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
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
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    for (i, &j) in col_of.iter().enumerate() {
        total += cost.get(queries[j], targets[i]);
    }
    (total, col_of)
}

/// Auxiliary query `k` is bound to noisy sample `k` and therefore to that
/// sample's ground truth. Returns `(aux_query, gt_index)` pairs.
pub fn assign_auxiliary(samples: &[NoisySample]) -> Vec<(usize, usize)> {
    samples.iter().enumerate().map(|(k, s)| (k, s.gt_index)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::NoiseKind;
    use proptest::prelude::*;

    fn brute_force(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, t: usize, used: &mut Vec<bool>) -> f64 {
            if t == cost.cols() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for q in 0..cost.rows() {
                if !used[q] {
                    used[q] = true;
                    best = best.min(cost.get(q, t) + rec(cost, t + 1, used));
                    used[q] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost.rows()])
    }

    #[test]
    fn small_examples() {
        let a = hungarian(&CostMatrix::from_rows(&[vec![5.0]]).unwrap()).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(c.total(&a.pairs), 1.0);
    }

    #[test]
    fn ties_break_lexicographically() {
        let c = CostMatrix::new(3, 3, vec![0.0; 9]).unwrap();
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let c = CostMatrix::new(4, 2, vec![0.0; 8]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.unmatched_queries, vec![2, 3]);
        // Lexicographic order only breaks ties; a strictly cheaper query wins.
        let c = CostMatrix::from_rows(&[vec![1.0], vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(2, 0)]);
    }

    #[test]
    fn more_targets_than_queries_is_a_shape_error() {
        let c = CostMatrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(matches!(hungarian(&c), Err(Error::Shape(_))));
    }

    #[test]
    fn cost_matrix_examples() {
        let w = LossWeights::default();
        let gt = BBox::new(0.2, 0.2, 0.5, 0.6);
        let probs = Tensor::from_rows(&[vec![1.0, 0.3]]);
        let c = build_cost_matrix(&probs, &[gt.to_center_form()], &[(gt, 0)], &w).unwrap();
        assert!((c.get(0, 0) + w.w_cls).abs() < 1e-12);

        let t2 = BBox::new(0.6, 0.1, 0.9, 0.3);
        let qb = [BBox::new(0.1, 0.1, 0.3, 0.3).to_center_form(), t2.to_center_form()];
        let probs = Tensor::from_rows(&[vec![0.1, 0.7], vec![0.4, 0.2]]);
        let fwd = build_cost_matrix(&probs, &qb, &[(gt, 0), (t2, 1)], &w).unwrap();
        let rev = build_cost_matrix(&probs, &qb, &[(t2, 1), (gt, 0)], &w).unwrap();
        for q in 0..2 {
            assert_eq!(fwd.get(q, 0), rev.get(q, 1));
            assert_eq!(fwd.get(q, 1), rev.get(q, 0));
        }
    }

    #[test]
    fn auxiliary_binding_preserves_generation_order() {
        let s = |gt_index| NoisySample {
            bbox: BBox::UNIT,
            gt_index,
            category_id: 0,
            initial_iou: 0.8,
            kind: NoiseKind::Perturbed,
        };
        let samples = [s(0), s(0), s(0), s(1), s(1)];
        assert_eq!(
            assign_auxiliary(&samples),
            vec![(0, 0), (1, 0), (2, 0), (3, 1), (4, 1)]
        );
        assert!(assign_auxiliary(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            (rows, cols, data) in (1usize..6).prop_flat_map(|c| (c..7usize).prop_flat_map(move |r| {
                (Just(r), Just(c), prop::collection::vec(-5.0..5.0f64, r * c))
            }))
        ) {
            let cost = CostMatrix::new(rows, cols, data).unwrap();
            let a = hungarian(&cost).unwrap();
            prop_assert!((cost.total(&a.pairs) - brute_force(&cost)).abs() < 1e-9);
            let mut seen = a.pairs.iter().map(|p| p.1).collect::<Vec<_>>();
            seen.sort();
            prop_assert_eq!(seen, (0..cols).collect::<Vec<_>>());
            prop_assert_eq!(a.pairs.len() + a.unmatched_queries.len(), rows);
        }

        #[test]
        fn constant_shift_keeps_assignment(
            data in prop::collection::vec(0.0..10.0f64, 16), shift in -50.0..50.0f64
        ) {
            let a = hungarian(&CostMatrix::new(4, 4, data.clone()).unwrap()).unwrap();
            let shifted = data.iter().map(|v| v + shift).collect();
            let b = hungarian(&CostMatrix::new(4, 4, shifted).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
