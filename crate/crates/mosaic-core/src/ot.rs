//! Exact optimal transport on the complete bipartite transportation
//! polytope, solved with the classic transportation simplex (network
//! simplex with u/v potentials on the tableau).
//!
//! Pivot rule: Dantzig (most negative reduced cost, lexicographic
//! tie-break) with a deterministic anti-cycling fallback — after N*M
//! consecutive degenerate pivots the entering rule switches to Bland
//! (lowest-index negative cell) until a non-degenerate pivot occurs.
//! Bland's rule cannot cycle, so termination is guaranteed, and every
//! choice is index-ordered, so the solve is bit-reproducible.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

const RC_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum OtError {
    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("empty cost matrix")]
    Empty,
    #[error("supplies and demands are not balanced (diff {0})")]
    Unbalanced(f64),
}

/// A feasible coupling and its total cost.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// N x M nonnegative matrix; rows sum to 1/N, columns to 1/M.
    pub gamma: Array2<f64>,
    pub cost: f64,
}

impl TransportPlan {
    /// Largest absolute violation of the uniform marginal constraints.
    pub fn marginal_violation(&self) -> f64 {
        let (n, m) = self.gamma.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            let s: f64 = self.gamma.row(i).sum();
            worst = worst.max((s - 1.0 / n as f64).abs());
        }
        for j in 0..m {
            let s: f64 = self.gamma.column(j).sum();
            worst = worst.max((s - 1.0 / m as f64).abs());
        }
        worst
    }
}

/// Solves min <gamma, cost> subject to uniform marginals 1/N and 1/M.
pub fn solve_ot(cost: ArrayView2<f64>) -> Result<TransportPlan, OtError> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(OtError::Empty);
    }
    let supplies = vec![1.0 / n as f64; n];
    let demands = vec![1.0 / m as f64; m];
    solve_transport(cost, &supplies, &demands)
}

/// General balanced transportation solve; exposed for tests that exercise
/// non-uniform marginals.
pub fn solve_transport(
    cost: ArrayView2<f64>,
    supplies: &[f64],
    demands: &[f64],
) -> Result<TransportPlan, OtError> {
    let (n, m) = cost.dim();
    assert_eq!(supplies.len(), n);
    assert_eq!(demands.len(), m);
    for ((i, j), &c) in cost.indexed_iter() {
        if !c.is_finite() {
            return Err(OtError::NonFiniteCost { row: i, col: j });
        }
    }
    let balance = supplies.iter().sum::<f64>() - demands.iter().sum::<f64>();
    if balance.abs() > 1e-9 {
        return Err(OtError::Unbalanced(balance));
    }

    let mut state = Tableau::northwest(cost, supplies, demands);
    let mut degenerate_streak = 0usize;
    loop {
        state.compute_potentials();
        let entering = if degenerate_streak > n * m {
            state.entering_bland()
        } else {
            state.entering_dantzig()
        };
        let Some(cell) = entering else { break };
        let theta = state.pivot(cell);
        if theta <= RC_TOL {
            degenerate_streak += 1;
        } else {
            degenerate_streak = 0;
        }
    }

    let mut gamma = Array2::zeros((n, m));
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let f = state.flow[(i, j)].max(0.0);
            gamma[(i, j)] = f;
            total += f * cost[(i, j)];
        }
    }
    Ok(TransportPlan { gamma, cost: total })
}

/// Transportation tableau: flows plus a spanning-tree basis over the
/// bipartite node set (rows 0..n, cols n..n+m).
struct Tableau<'a> {
    cost: ArrayView2<'a, f64>,
    n: usize,
    m: usize,
    flow: Array2<f64>,
    basic: Vec<bool>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl<'a> Tableau<'a> {
    fn northwest(cost: ArrayView2<'a, f64>, supplies: &[f64], demands: &[f64]) -> Self {
        let (n, m) = cost.dim();
        let mut flow = Array2::zeros((n, m));
        let mut basic = vec![false; n * m];
        let mut remaining_supply = supplies.to_vec();
        let mut remaining_demand = demands.to_vec();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let x = remaining_supply[i].min(remaining_demand[j]);
            flow[(i, j)] = x;
            basic[i * m + j] = true;
            remaining_supply[i] -= x;
            remaining_demand[j] -= x;
            if i == n - 1 && j == m - 1 {
                break;
            }
            // Advance one axis only; ties keep a degenerate basic cell so
            // the basis always holds exactly n + m - 1 cells.
            if remaining_supply[i] <= remaining_demand[j] && i < n - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self {
            cost,
            n,
            m,
            flow,
            basic,
            u: vec![0.0; n],
            v: vec![0.0; m],
        }
    }

    fn is_basic(&self, i: usize, j: usize) -> bool {
        self.basic[i * self.m + j]
    }

    /// Tree walk assigning u/v so that u_i + v_j = c_ij on basic cells.
    fn compute_potentials(&mut self) {
        let (n, m) = (self.n, self.m);
        let mut row_done = vec![false; n];
        let mut col_done = vec![false; m];
        let mut stack: Vec<usize> = Vec::with_capacity(n + m);
        self.u[0] = 0.0;
        row_done[0] = true;
        stack.push(0); // node ids: 0..n rows, n..n+m cols
        while let Some(node) = stack.pop() {
            if node < n {
                let i = node;
                for j in 0..m {
                    if self.is_basic(i, j) && !col_done[j] {
                        self.v[j] = self.cost[(i, j)] - self.u[i];
                        col_done[j] = true;
                        stack.push(n + j);
                    }
                }
            } else {
                let j = node - n;
                for i in 0..n {
                    if self.is_basic(i, j) && !row_done[i] {
                        self.u[i] = self.cost[(i, j)] - self.v[j];
                        row_done[i] = true;
                        stack.push(i);
                    }
                }
            }
        }
        debug_assert!(row_done.iter().all(|&d| d) && col_done.iter().all(|&d| d));
    }

    fn entering_dantzig(&self) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for i in 0..self.n {
            for j in 0..self.m {
                if self.is_basic(i, j) {
                    continue;
                }
                let rc = self.cost[(i, j)] - self.u[i] - self.v[j];
                if rc < -RC_TOL && best.map_or(true, |(_, b)| rc < b) {
                    best = Some(((i, j), rc));
                }
            }
        }
        best.map(|(cell, _)| cell)
    }

    fn entering_bland(&self) -> Option<(usize, usize)> {
        for i in 0..self.n {
            for j in 0..self.m {
                if !self.is_basic(i, j) && self.cost[(i, j)] - self.u[i] - self.v[j] < -RC_TOL {
                    return Some((i, j));
                }
            }
        }
        None
    }

    /// Unique path from column `jt` back to row `it` through the basis tree.
    fn tree_path(&self, it: usize, jt: usize) -> Vec<(usize, usize)> {
        let (n, m) = (self.n, self.m);
        let total = n + m;
        let mut parent = vec![usize::MAX; total];
        let mut seen = vec![false; total];
        let start = it;
        let target = n + jt;
        seen[start] = true;
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(start);
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            if node < n {
                for j in 0..m {
                    if self.is_basic(node, j) && !seen[n + j] {
                        seen[n + j] = true;
                        parent[n + j] = node;
                        queue.push_back(n + j);
                    }
                }
            } else {
                let j = node - n;
                for i in 0..n {
                    if self.is_basic(i, j) && !seen[i] {
                        seen[i] = true;
                        parent[i] = node;
                        queue.push_back(i);
                    }
                }
            }
        }
        debug_assert!(seen[target], "basis must be a spanning tree");
        // Walk target -> start, emitting the tableau cell of each tree edge.
        let mut cells = Vec::new();
        let mut node = target;
        while node != start {
            let p = parent[node];
            let (i, j) = if node < n { (node, p - n) } else { (p, node - n) };
            cells.push((i, j));
            node = p;
        }
        cells
    }

    /// Pivots the entering cell into the basis; returns the shifted mass.
    fn pivot(&mut self, entering: (usize, usize)) -> f64 {
        let (it, jt) = entering;
        let path = self.tree_path(it, jt);
        // Cycle = entering (+) then path cells from jt toward it with
        // alternating signs starting at minus.
        let mut minus_cells = Vec::new();
        let mut plus_cells = vec![entering];
        for (k, &cell) in path.iter().enumerate() {
            if k % 2 == 0 {
                minus_cells.push(cell);
            } else {
                plus_cells.push(cell);
            }
        }
        // Deterministic leaving choice: minimum flow, lexicographic ties.
        let theta = minus_cells
            .iter()
            .map(|&(i, j)| self.flow[(i, j)])
            .fold(f64::INFINITY, f64::min);
        let leaving = *minus_cells
            .iter()
            .filter(|&&(i, j)| self.flow[(i, j)] == theta)
            .min()
            .expect("at least one minus cell attains the minimum");

        for &(i, j) in &plus_cells {
            self.flow[(i, j)] += theta;
        }
        for &(i, j) in &minus_cells {
            self.flow[(i, j)] = (self.flow[(i, j)] - theta).max(0.0);
        }
        self.basic[it * self.m + jt] = true;
        self.basic[leaving.0 * self.m + leaving.1] = false;
        self.flow[(leaving.0, leaving.1)] = 0.0;
        theta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_cost_matching_found() {
        let cost = array![[0.0, 1.0], [1.0, 0.0]];
        let plan = solve_ot(cost.view()).unwrap();
        assert!(plan.cost.abs() < 1e-12);
        assert!((plan.gamma[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((plan.gamma[(1, 1)] - 0.5).abs() < 1e-12);
        assert!(plan.gamma[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn single_row_is_forced_by_marginals() {
        let cost = array![[0.3, 0.9, 0.6]];
        let plan = solve_ot(cost.view()).unwrap();
        for j in 0..3 {
            assert!((plan.gamma[(0, j)] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((plan.cost - (0.3 + 0.9 + 0.6) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn marginals_hold_on_random_instances() {
        let mut rng = crate::rng::DetRng::new(41);
        for _ in 0..50 {
            let n = 1 + rng.below(8);
            let m = 1 + rng.below(8);
            let cost = Array2::from_shape_fn((n, m), |_| rng.unit());
            let plan = solve_ot(cost.view()).unwrap();
            assert!(plan.marginal_violation() <= 1e-9);
            assert!(plan.gamma.iter().all(|&g| g >= 0.0));
        }
    }

    #[test]
    fn cost_beats_product_coupling() {
        let mut rng = crate::rng::DetRng::new(42);
        for _ in 0..30 {
            let n = 1 + rng.below(6);
            let m = 1 + rng.below(6);
            let cost = Array2::from_shape_fn((n, m), |_| rng.unit());
            let plan = solve_ot(cost.view()).unwrap();
            let independent = cost.sum() / (n * m) as f64;
            assert!(plan.cost <= independent + 1e-9);
        }
    }

    #[test]
    fn deterministic_for_fixed_input() {
        let mut rng = crate::rng::DetRng::new(43);
        let cost = Array2::from_shape_fn((6, 4), |_| rng.unit());
        let a = solve_ot(cost.view()).unwrap();
        let b = solve_ot(cost.view()).unwrap();
        assert_eq!(a.gamma, b.gamma);
        assert_eq!(a.cost.to_bits(), b.cost.to_bits());
    }

    #[test]
    fn non_finite_cost_rejected() {
        let cost = array![[0.0, f64::NAN], [1.0, 0.0]];
        assert!(matches!(
            solve_ot(cost.view()),
            Err(OtError::NonFiniteCost { row: 0, col: 1 })
        ));
    }

    #[test]
    fn degenerate_identity_instances_terminate() {
        // batch == reference points produces a fully degenerate tableau;
        // the anti-cycling fallback must still terminate at cost 0.
        for n in 2..=8 {
            let cost = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 });
            let plan = solve_ot(cost.view()).unwrap();
            assert!(plan.cost.abs() < 1e-12, "n={n} cost={}", plan.cost);
        }
    }
}
