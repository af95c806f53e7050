//! Pairwise match costs and optimal query-to-target assignment.
//!
//! [`hungarian`] solves the rectangular assignment problem exactly with the
//! shortest-augmenting-path form of the Hungarian method, then resolves ties
//! between equal-cost assignments toward the lexicographically smallest query
//! sequence (taken in target order). [`brute_force`] enumerates every
//! injective mapping and is kept as a test oracle for small instances.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::BoxCxcywh;
use crate::losses::{box_loss, GroundTruth, LossWeights, PredictionSet};
use crate::numerics::softmax_unchecked;

/// Largest target count [`brute_force`] accepts.
pub const ORACLE_MAX_TARGETS: usize = 8;

/// Dense `n_queries x n_targets` cost matrix, row-major by query.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n_queries: usize,
    n_targets: usize,
    cost: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n_queries: usize, n_targets: usize, cost: Vec<f64>) -> Result<Self> {
        if cost.len() != n_queries * n_targets {
            return Err(Error::ShapeMismatch(format!(
                "{n_queries}x{n_targets} cost matrix from {} entries",
                cost.len()
            )));
        }
        if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!(
                "cost[{}][{}] = {}",
                i / n_targets.max(1),
                i % n_targets.max(1),
                cost[i]
            )));
        }
        Ok(Self { n_queries, n_targets, cost })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_targets = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != n_targets) {
            return Err(Error::ShapeMismatch(format!(
                "row {r} has {} entries, expected {n_targets}",
                rows[r].len()
            )));
        }
        Self::new(rows.len(), n_targets, rows.concat())
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    pub fn get(&self, query: usize, target: usize) -> f64 {
        self.cost[query * self.n_targets + target]
    }

    /// Cost matrix with its query rows reordered: row `i` of the result is
    /// row `perm[i]` of `self`.
    pub fn permute_queries(&self, perm: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = perm
            .iter()
            .map(|&q| (0..self.n_targets).map(|t| self.get(q, t)).collect())
            .collect();
        let mut m = Self::from_rows(&rows)?;
        m.n_targets = self.n_targets;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Pair {
    pub query: usize,
    pub target: usize,
}

/// Query-to-target matching covering every target. Pairs are ordered by
/// target; queries absent from `pairs` are assigned to no-object.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub pairs: Vec<Pair>,
    pub total_cost: f64,
}

impl Assignment {
    fn from_query_of_target(costs: &CostMatrix, query_of: &[usize]) -> Self {
        let pairs: Vec<Pair> = query_of
            .iter()
            .enumerate()
            .map(|(target, &query)| Pair { query, target })
            .collect();
        let total_cost = pairs.iter().fold(0.0, |acc, p| acc + costs.get(p.query, p.target));
        Self { pairs, total_cost }
    }

    pub fn query_for_target(&self, target: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.target == target).map(|p| p.query)
    }
}

fn check_sizes(costs: &CostMatrix) -> Result<()> {
    if costs.n_queries < costs.n_targets {
        return Err(Error::InsufficientQueries {
            queries: costs.n_queries,
            targets: costs.n_targets,
        });
    }
    Ok(())
}

/// Minimum-cost assignment of every target to a distinct query.
pub fn hungarian(costs: &CostMatrix) -> Result<Assignment> {
    check_sizes(costs)?;
    if costs.n_targets == 0 {
        return Ok(Assignment { pairs: vec![], total_cost: 0.0 });
    }
    let solved = solve_with_potentials(costs);
    let query_of = lexicographic_refine(costs, &solved);
    Ok(Assignment::from_query_of_target(costs, &query_of))
}

struct Solved {
    query_of: Vec<usize>,
    // Dual potentials: u per target, v per query. v <= 0, and v == 0 on
    // queries left unmatched.
    u: Vec<f64>,
    v: Vec<f64>,
}

// Shortest augmenting path with potentials; targets are rows (n <= m).
// Arrays are 1-based with index 0 as the virtual source column.
fn solve_with_potentials(costs: &CostMatrix) -> Solved {
    let n = costs.n_targets;
    let m = costs.n_queries;
    let a = |t: usize, q: usize| costs.get(q - 1, t - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for t in 1..=n {
        row_of[0] = t;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
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
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut query_of = vec![0; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            query_of[row_of[j] - 1] = j - 1;
        }
    }
    Solved { query_of, u: u[1..].to_vec(), v: v[1..].to_vec() }
}

// Every optimal assignment uses only tight edges (zero reduced cost) and
// covers every query with a negative potential. Walk targets in order and
// take the smallest query that still admits such a completion.
fn lexicographic_refine(costs: &CostMatrix, s: &Solved) -> Vec<usize> {
    let n = costs.n_targets;
    let m = costs.n_queries;
    let scale = costs.cost.iter().fold(1.0f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-12 * scale * (n as f64 + 1.0);
    let tight = |t: usize, q: usize| costs.get(q, t) - s.u[t] - s.v[q] <= tol;
    let required: Vec<bool> = s.v.iter().map(|&v| v < -tol).collect();

    let mut current = s.query_of.clone();
    let mut used = vec![false; m];
    for t in 0..n {
        let mut chosen = None;
        for q in 0..m {
            if used[q] || !tight(t, q) {
                continue;
            }
            if q == current[t] {
                chosen = Some(q);
                break;
            }
            used[q] = true;
            let completion = complete_matching(t + 1, n, m, &used, &required, &tight);
            used[q] = false;
            if let Some(rest) = completion {
                current[t] = q;
                current[t + 1..].copy_from_slice(&rest);
                chosen = Some(q);
                break;
            }
        }
        let q = chosen.expect("the current optimal completion is always admissible");
        used[q] = true;
    }
    current
}

// Matching of targets `from..n` onto unused queries over tight edges that
// also covers every unused required query. Required queries must be matched;
// optional ones may instead be absorbed by filler rows, so the question
// reduces to a perfect matching of the query side.
fn complete_matching(
    from: usize,
    n: usize,
    m: usize,
    used: &[bool],
    required: &[bool],
    tight: &dyn Fn(usize, usize) -> bool,
) -> Option<Vec<usize>> {
    let free: Vec<usize> = (0..m).filter(|&q| !used[q]).collect();
    let real = n - from;
    if free.len() < real {
        return None;
    }
    let fillers = free.len() - real;
    let rows = real + fillers;
    let adj: Vec<Vec<usize>> = (0..rows)
        .map(|r| {
            (0..free.len())
                .filter(|&c| {
                    if r < real {
                        tight(from + r, free[c])
                    } else {
                        !required[free[c]]
                    }
                })
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; free.len()];
    for r in 0..rows {
        let mut seen = vec![false; free.len()];
        if !augment(r, &adj, &mut owner, &mut seen) {
            return None;
        }
    }
    let mut query_of = vec![0; real];
    for (c, o) in owner.iter().enumerate() {
        if let Some(r) = *o {
            if r < real {
                query_of[r] = free[c];
            }
        }
    }
    Some(query_of)
}

fn augment(r: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &c in &adj[r] {
        if seen[c] {
            continue;
        }
        seen[c] = true;
        if owner[c].is_none() || augment(owner[c].unwrap(), adj, owner, seen) {
            owner[c] = Some(r);
            return true;
        }
    }
    false
}

/// Exhaustive minimum over all injective target-to-query mappings, visited in
/// lexicographic order of the query sequence so the first minimum found is
/// also the lexicographically smallest.
pub fn brute_force(costs: &CostMatrix) -> Result<Assignment> {
    if costs.n_targets > ORACLE_MAX_TARGETS {
        return Err(Error::OracleSizeLimit {
            targets: costs.n_targets,
            limit: ORACLE_MAX_TARGETS,
        });
    }
    check_sizes(costs)?;
    let mut state = Search {
        costs,
        used: vec![false; costs.n_queries],
        path: Vec::with_capacity(costs.n_targets),
        best: None,
    };
    state.visit(0.0);
    let (_, best) = state.best.expect("n_queries >= n_targets admits a mapping");
    Ok(Assignment::from_query_of_target(costs, &best))
}

struct Search<'a> {
    costs: &'a CostMatrix,
    used: Vec<bool>,
    path: Vec<usize>,
    best: Option<(f64, Vec<usize>)>,
}

impl Search<'_> {
    fn visit(&mut self, partial: f64) {
        let t = self.path.len();
        if t == self.costs.n_targets {
            if self.best.as_ref().is_none_or(|(b, _)| partial < *b) {
                self.best = Some((partial, self.path.clone()));
            }
            return;
        }
        for q in 0..self.costs.n_queries {
            if !self.used[q] {
                self.used[q] = true;
                self.path.push(q);
                self.visit(partial + self.costs.get(q, t));
                self.path.pop();
                self.used[q] = false;
            }
        }
    }
}

/// `-p(c_j) + L_box(b_j, b)`: the class term uses the raw probability so it
/// stays on the same scale as the box term.
pub fn match_cost(
    probs: &[f64],
    pred_box: &BoxCxcywh,
    gt: &GroundTruth,
    wts: &LossWeights,
) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "probability vector of length {} has no real class",
            probs.len()
        )));
    }
    let n_classes = probs.len() - 1;
    if gt.class >= n_classes {
        return Err(Error::ClassOutOfRange { class: gt.class, n_classes });
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-9 || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidConfig(format!("class probabilities sum to {s}")));
    }
    Ok(-probs[gt.class] + box_loss(pred_box, &gt.bbox, wts))
}

pub fn cost_matrix(preds: &PredictionSet, gts: &[GroundTruth], wts: &LossWeights) -> Result<CostMatrix> {
    cost_matrix_with(preds, gts, wts, Execution::default())
}

pub fn cost_matrix_with(
    preds: &PredictionSet,
    gts: &[GroundTruth],
    wts: &LossWeights,
    exec: Execution,
) -> Result<CostMatrix> {
    let rows: Vec<Result<Vec<f64>>> = exec.map(preds.queries(), |q| {
        let probs = softmax_unchecked(&q.logits);
        gts.iter().map(|g| match_cost(&probs, &q.bbox, g, wts)).collect()
    });
    let mut cost = Vec::with_capacity(preds.len() * gts.len());
    for r in rows {
        cost.extend(r?);
    }
    CostMatrix::new(preds.len(), gts.len(), cost)
}

/// Builds the pairwise match costs and solves the assignment.
pub fn optimal_assignment(preds: &PredictionSet, gts: &[GroundTruth], wts: &LossWeights) -> Result<Assignment> {
    if preds.len() < gts.len() {
        return Err(Error::InsufficientQueries { queries: preds.len(), targets: gts.len() });
    }
    hungarian(&cost_matrix(preds, gts, wts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::QueryPrediction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairs(a: &Assignment) -> Vec<(usize, usize)> {
        a.pairs.iter().map(|p| (p.query, p.target)).collect()
    }

    fn random_costs(rng: &mut ChaCha8Rng, nq: usize, nt: usize) -> CostMatrix {
        CostMatrix::new(nq, nt, (0..nq * nt).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn small_fixtures() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        for a in [hungarian(&c).unwrap(), brute_force(&c).unwrap()] {
            assert_eq!(pairs(&a), vec![(0, 0), (1, 1)]);
            assert_eq!(a.total_cost, 2.0);
        }
        let one = CostMatrix::from_rows(&[vec![5.0]]).unwrap();
        assert_eq!(pairs(&hungarian(&one).unwrap()), vec![(0, 0)]);
        assert_eq!(hungarian(&one).unwrap().total_cost, 5.0);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let zero = CostMatrix::new(4, 3, vec![0.0; 12]).unwrap();
        let h = hungarian(&zero).unwrap();
        assert_eq!(pairs(&h), vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(h, brute_force(&zero).unwrap());

        // Two optimal assignments (cost 2): {1->0, 0->1} and {0->0, 1->1};
        // the smallest query for target 0 wins.
        let c = CostMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![5.0, 0.0]]).unwrap();
        let h = hungarian(&c).unwrap();
        assert_eq!(h.total_cost, 1.0);
        assert_eq!(h, brute_force(&c).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let nt = rng.random_range(1..=5);
            let nq = rng.random_range(nt..=7);
            let c = CostMatrix::new(nq, nt, (0..nq * nt).map(|_| rng.random_range(0..3) as f64).collect()).unwrap();
            assert_eq!(hungarian(&c).unwrap(), brute_force(&c).unwrap(), "{c:?}");
        }
    }

    #[test]
    fn errors() {
        let c = CostMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(hungarian(&c), Err(Error::InsufficientQueries { queries: 1, targets: 2 })));
        let big = CostMatrix::new(9, 9, vec![0.0; 81]).unwrap();
        assert!(matches!(brute_force(&big), Err(Error::OracleSizeLimit { .. })));
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(CostMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        let empty = CostMatrix::new(3, 0, vec![]).unwrap();
        assert_eq!(hungarian(&empty).unwrap().pairs, vec![]);
    }

    #[test]
    fn matches_brute_force_on_square_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let c = random_costs(&mut rng, 6, 6);
            let h = hungarian(&c).unwrap();
            assert_eq!(h.total_cost, brute_force(&c).unwrap().total_cost);
        }
    }

    #[test]
    fn constant_shift_keeps_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let c = random_costs(&mut rng, 5, 5);
            let shifted = CostMatrix::new(5, 5, c.cost.iter().map(|x| x + 3.25).collect()).unwrap();
            let a = hungarian(&c).unwrap();
            let b = hungarian(&shifted).unwrap();
            assert_eq!(a.pairs, b.pairs);
            assert!((b.total_cost - a.total_cost - 5.0 * 3.25).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_queries_permutes_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let c = random_costs(&mut rng, 7, 4);
            let mut perm: Vec<usize> = (0..7).collect();
            for i in (1..7).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let a = hungarian(&c).unwrap();
            let b = hungarian(&c.permute_queries(&perm).unwrap()).unwrap();
            for p in &b.pairs {
                assert_eq!(perm[p.query], a.query_for_target(p.target).unwrap());
            }
        }
    }

    #[test]
    fn match_cost_fixtures() {
        let w = LossWeights::default();
        let b = BoxCxcywh::new(0.4, 0.5, 0.2, 0.1).unwrap();
        let gt = GroundTruth { class: 0, bbox: b };
        assert_eq!(match_cost(&[1.0, 0.0, 0.0], &b, &gt, &w).unwrap(), -1.0);
        assert_eq!(match_cost(&[0.0, 0.5, 0.5], &b, &gt, &w).unwrap(), 0.0);
        let other = BoxCxcywh::new(0.45, 0.5, 0.2, 0.2).unwrap();
        let expected = -0.5 + box_loss(&other, &b, &w);
        assert_eq!(match_cost(&[0.5, 0.25, 0.25], &other, &gt, &w).unwrap(), expected);
        let bad = GroundTruth { class: 2, bbox: b };
        assert!(matches!(match_cost(&[0.5, 0.25, 0.25], &b, &bad, &w), Err(Error::ClassOutOfRange { .. })));
        assert!(match_cost(&[0.5, 0.6, 0.25], &b, &gt, &w).is_err());
    }

    fn query(class: usize, bbox: BoxCxcywh) -> QueryPrediction {
        let mut logits = vec![0.0; 4];
        logits[class] = 4.0;
        QueryPrediction { logits, bbox }
    }

    #[test]
    fn optimal_assignment_fixtures() {
        let w = LossWeights::default();
        let a = BoxCxcywh::new(0.2, 0.2, 0.1, 0.1).unwrap();
        let b = BoxCxcywh::new(0.8, 0.7, 0.2, 0.1).unwrap();
        let one = PredictionSet::new(3, vec![query(1, a)]).unwrap();
        let got = optimal_assignment(&one, &[GroundTruth { class: 1, bbox: a }], &w).unwrap();
        assert_eq!(pairs(&got), vec![(0, 0)]);

        // Query 0 sits on gt 1, query 1 on gt 0.
        let near = |x: &BoxCxcywh| BoxCxcywh::new(x.cx() + 0.01, x.cy(), x.w(), x.h()).unwrap();
        let preds = PredictionSet::new(3, vec![query(0, near(&b)), query(2, near(&a))]).unwrap();
        let gts = [GroundTruth { class: 2, bbox: a }, GroundTruth { class: 0, bbox: b }];
        let got = optimal_assignment(&preds, &gts, &w).unwrap();
        assert_eq!(pairs(&got), vec![(1, 0), (0, 1)]);
        assert_eq!(got, brute_force(&cost_matrix(&preds, &gts, &w).unwrap()).unwrap());

        let three = PredictionSet::new(3, vec![query(0, a), query(1, b), query(2, a)]).unwrap();
        assert_eq!(optimal_assignment(&three, &gts, &w).unwrap().pairs.len(), 2);
    }

    #[test]
    fn parallel_cost_matrix_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let queries: Vec<QueryPrediction> = (0..40)
            .map(|_| QueryPrediction {
                logits: (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
                bbox: BoxCxcywh::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), 0.1, 0.2).unwrap(),
            })
            .collect();
        let preds = PredictionSet::new(3, queries).unwrap();
        let gts = [GroundTruth { class: 1, bbox: BoxCxcywh::new(0.5, 0.5, 0.3, 0.3).unwrap() }];
        let w = LossWeights::default();
        assert_eq!(
            cost_matrix_with(&preds, &gts, &w, Execution::Sequential).unwrap(),
            cost_matrix_with(&preds, &gts, &w, Execution::Parallel).unwrap()
        );
    }
}
