//! Budgeted maximum coverage over the coverage matrix.
//!
//! Choose `k` candidates from those whose absorption is at most `α`, maximizing
//! the number of sphere samples covered by the union of their rows. Solved by a
//! circular baseline, greedy, an exact best-first branch-and-bound and, for
//! testing, exhaustive enumeration.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bitset::Bitset;
use crate::completeness::{coverage_of, CoverageMatrix};
use crate::error::{Error, Result};
use crate::geometry::ViewCandidate;

/// Largest number of subsets [`brute_force_select`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

#[derive(Clone, Debug)]
pub struct SelectionProblem {
    matrix: CoverageMatrix,
    absorption: Vec<f64>,
    alpha: f64,
    k: usize,
    feasible: Vec<usize>,
}

impl SelectionProblem {
    pub fn matrix(&self) -> &CoverageMatrix {
        &self.matrix
    }
    pub fn absorption(&self) -> &[f64] {
        &self.absorption
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn k(&self) -> usize {
        self.k
    }
    /// Candidates with absorption ≤ α, ascending.
    pub fn feasible(&self) -> &[usize] {
        &self.feasible
    }

    /// SHA-256 over the matrix bytes, absorption, α and k.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.matrix.to_bytes());
        for a in &self.absorption {
            h.update(a.to_le_bytes());
        }
        h.update(self.alpha.to_le_bytes());
        h.update((self.k as u64).to_le_bytes());
        hex::encode(h.finalize())
    }

    /// Same matrix and absorption with a different threshold or budget.
    pub fn with(&self, alpha: f64, k: usize) -> Result<SelectionProblem> {
        assemble_problem(self.matrix.clone(), self.absorption.clone(), alpha, k)
    }
}

pub fn assemble_problem(
    matrix: CoverageMatrix,
    absorption: Vec<f64>,
    alpha: f64,
    k: usize,
) -> Result<SelectionProblem> {
    if absorption.len() != matrix.n_candidates() {
        return Err(Error::InvalidArgument(format!(
            "{} absorption values for {} candidates",
            absorption.len(),
            matrix.n_candidates()
        )));
    }
    if absorption.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidArgument("absorption values must lie in [0, 1]".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("α must lie in [0, 1], got {alpha}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("budget k must be ≥ 1".into()));
    }
    let feasible: Vec<usize> = (0..absorption.len()).filter(|&i| absorption[i] <= alpha).collect();
    if k > feasible.len() {
        return Err(Error::Infeasible { k, feasible: feasible.len() });
    }
    Ok(SelectionProblem { matrix, absorption, alpha, k, feasible })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    EarlyStopped,
    Heuristic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub solver: String,
    pub selected: Vec<usize>,
    pub covered_count: usize,
    pub n_samples: usize,
    pub upper_bound: usize,
    pub gap: f64,
    pub status: Status,
    pub wall_time_s: f64,
    /// Branch-and-bound nodes expanded (0 for the other solvers).
    pub nodes: u64,
}

impl Solution {
    pub fn fraction(&self) -> f64 {
        if self.n_samples == 0 {
            0.0
        } else {
            self.covered_count as f64 / self.n_samples as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverLimits {
    /// Stop when the gap has not improved by `min_improvement` within this window.
    pub stall_window_s: Option<f64>,
    pub min_improvement: f64,
    pub max_time_s: Option<f64>,
    pub max_nodes: Option<u64>,
}

impl Default for SolverLimits {
    fn default() -> Self {
        SolverLimits { stall_window_s: Some(20.0), min_improvement: 1e-8, max_time_s: None, max_nodes: None }
    }
}

impl SolverLimits {
    /// No termination other than a proof of optimality.
    pub fn unlimited() -> Self {
        SolverLimits { stall_window_s: None, min_improvement: 1e-8, max_time_s: None, max_nodes: None }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: Option<f64>| v.is_none_or(|x| x > 0.0);
        if !pos(self.stall_window_s)
            || !pos(self.max_time_s)
            || self.max_nodes == Some(0)
            || !(self.min_improvement > 0.0)
        {
            return Err(Error::InvalidArgument(format!("solver limits must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `(bound − covered) / bound`, or 0 for a zero bound.
pub fn optimality_gap(covered: usize, bound: usize) -> Result<f64> {
    if covered > bound {
        return Err(Error::Invariant(format!("covered count {covered} exceeds bound {bound}")));
    }
    Ok(if bound == 0 { 0.0 } else { (bound - covered) as f64 / bound as f64 })
}

/// Sum of the `r` largest values (consumes `gains`).
fn top_sum(gains: &mut [usize], r: usize) -> usize {
    if r == 0 {
        return 0;
    }
    if r < gains.len() {
        gains.select_nth_unstable_by(r - 1, |a, b| b.cmp(a));
        gains[..r].iter().sum()
    } else {
        gains.iter().sum()
    }
}

/// `min(n_samples, sum of the k largest row popcounts)` over `rows`.
fn trivial_bound(matrix: &CoverageMatrix, rows: &[usize], k: usize) -> usize {
    let mut counts: Vec<usize> = rows.iter().map(|&i| matrix.row(i).count_ones()).collect();
    top_sum(&mut counts, k).min(matrix.n_samples())
}

fn finish(
    solver: &str,
    problem: &SelectionProblem,
    mut selected: Vec<usize>,
    upper_bound: usize,
    status: Status,
    start: Instant,
    nodes: u64,
) -> Result<Solution> {
    selected.sort_unstable();
    let (covered_count, _) = coverage_of(&selected, problem.matrix())?;
    let upper_bound = if status == Status::Optimal { covered_count } else { upper_bound.max(covered_count) };
    Ok(Solution {
        solver: solver.to_string(),
        selected,
        covered_count,
        n_samples: problem.matrix().n_samples(),
        upper_bound,
        gap: optimality_gap(covered_count, upper_bound)?,
        status,
        wall_time_s: start.elapsed().as_secs_f64(),
        nodes,
    })
}

/// Greedy completion: adds `r` rows from `pool` by largest marginal gain,
/// lowest id on ties. Returns the picks and the final covered set.
fn greedy_fill(matrix: &CoverageMatrix, pool: &[usize], covered: &Bitset, r: usize) -> (Vec<usize>, Bitset) {
    let mut covered = covered.clone();
    let mut taken = vec![false; pool.len()];
    let mut picks = Vec::with_capacity(r);
    for _ in 0..r {
        let mut best: Option<(usize, usize)> = None;
        for (slot, &c) in pool.iter().enumerate() {
            if taken[slot] {
                continue;
            }
            let g = matrix.row(c).count_and_not(&covered);
            if best.is_none_or(|(_, bg)| g > bg) {
                best = Some((slot, g));
            }
        }
        let Some((slot, _)) = best else { break };
        taken[slot] = true;
        picks.push(pool[slot]);
        covered.union_with(matrix.row(pool[slot]));
    }
    (picks, covered)
}

pub fn greedy_select(problem: &SelectionProblem) -> Result<Solution> {
    let start = Instant::now();
    let m = problem.matrix();
    let (picks, _) = greedy_fill(m, problem.feasible(), &Bitset::new(m.n_samples()), problem.k());
    let bound = trivial_bound(m, problem.feasible(), problem.k());
    finish("greedy", problem, picks, bound, Status::Heuristic, start, 0)
}

/// `k` equidistant views of one generator circle; absorption is ignored.
///
/// `candidates[i]` must correspond to row `i` of `matrix`. Positions are
/// `round(j·n/k)` within the circle, advanced past duplicates.
pub fn circular_select(
    candidates: &[ViewCandidate],
    matrix: &CoverageMatrix,
    k: usize,
    circle_id: usize,
) -> Result<Solution> {
    let start = Instant::now();
    if candidates.len() != matrix.n_candidates() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates for a matrix of {} rows",
            candidates.len(),
            matrix.n_candidates()
        )));
    }
    let circle: Vec<usize> =
        (0..candidates.len()).filter(|&i| candidates[i].circle.is_some_and(|c| c.id == circle_id)).collect();
    if circle.is_empty() {
        return Err(Error::InvalidArgument(format!("no candidates belong to circle {circle_id}")));
    }
    let n = circle.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("circle {circle_id} has {n} views, cannot pick {k}")));
    }
    let mut picks = Vec::with_capacity(k);
    let mut prev: Option<usize> = None;
    for j in 0..k {
        // round(j n / k), halves up
        let mut pos = (2 * j * n + k) / (2 * k);
        if let Some(p) = prev {
            if pos <= p {
                pos = p + 1;
            }
        }
        let pos = pos.min(n - 1);
        prev = Some(pos);
        picks.push(circle[pos]);
    }
    picks.dedup();
    let (covered_count, _) = coverage_of(&picks, matrix)?;
    let bound = trivial_bound(matrix, &circle, k).max(covered_count);
    picks.sort_unstable();
    Ok(Solution {
        solver: "circular".into(),
        selected: picks,
        covered_count,
        n_samples: matrix.n_samples(),
        upper_bound: bound,
        gap: optimality_gap(covered_count, bound)?,
        status: Status::Heuristic,
        wall_time_s: start.elapsed().as_secs_f64(),
        nodes: 0,
    })
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((n - i) as u128) / (i as u128 + 1))
}

/// Exhaustive search; ties resolve to the lexicographically smallest subset.
pub fn brute_force_select(problem: &SelectionProblem) -> Result<Solution> {
    let start = Instant::now();
    let pool = problem.feasible();
    let k = problem.k();
    let combos = binomial(pool.len(), k);
    if combos > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge { combinations: combos, limit: BRUTE_FORCE_LIMIT });
    }
    let m = problem.matrix();

    struct Search<'a> {
        m: &'a CoverageMatrix,
        pool: &'a [usize],
        k: usize,
        stack: Vec<usize>,
        best: Option<(usize, Vec<usize>)>,
    }
    impl Search<'_> {
        fn go(&mut self, from: usize, covered: &Bitset) {
            if self.stack.len() == self.k {
                let c = covered.count_ones();
                if self.best.as_ref().is_none_or(|(b, _)| c > *b) {
                    self.best = Some((c, self.stack.clone()));
                }
                return;
            }
            let need = self.k - self.stack.len();
            for slot in from..=self.pool.len() - need {
                let id = self.pool[slot];
                let mut next = covered.clone();
                next.union_with(self.m.row(id));
                self.stack.push(id);
                self.go(slot + 1, &next);
                self.stack.pop();
            }
        }
    }

    let mut s = Search { m, pool, k, stack: Vec::with_capacity(k), best: None };
    s.go(0, &Bitset::new(m.n_samples()));
    let (_, best) = s.best.ok_or(Error::Infeasible { k, feasible: pool.len() })?;
    finish("oracle", problem, best, 0, Status::Optimal, start, combos as u64)
}

/// A branch-and-bound node as seen by [`bnb_select_observed`].
#[derive(Clone, Debug)]
pub struct NodeInfo<'a> {
    /// Candidates fixed into the selection.
    pub chosen: &'a [usize],
    /// Feasible candidates fixed out of the selection.
    pub excluded: Vec<usize>,
    pub covered_count: usize,
    /// Claimed upper bound on any completion of this node.
    pub bound: usize,
    /// Picks still to make.
    pub remaining: usize,
}

struct Node {
    bound: usize,
    depth: usize,
    seq: u64,
    covered: Bitset,
    covered_count: usize,
    chosen: Vec<usize>,
    /// Candidates either chosen or excluded at this node.
    fixed: Bitset,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // Max-heap: highest bound, then deepest, then most recently created.
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound.cmp(&other.bound).then(self.depth.cmp(&other.depth)).then(self.seq.cmp(&other.seq))
    }
}

struct Search<'a> {
    problem: &'a SelectionProblem,
    heap: BinaryHeap<Node>,
    seq: u64,
    best_count: usize,
    best: Vec<usize>,
}

impl Search<'_> {
    fn free<'b>(&'b self, fixed: &'b Bitset) -> impl Iterator<Item = usize> + 'b {
        self.problem.feasible().iter().copied().filter(move |&c| !fixed.get(c))
    }

    /// `covered + min(uncovered, sum of the r largest residual gains over free)`.
    fn node_bound(&self, covered: &Bitset, covered_count: usize, fixed: &Bitset, r: usize) -> Option<usize> {
        let m = self.problem.matrix();
        let mut gains: Vec<usize> = self.free(fixed).map(|c| m.row(c).count_and_not(covered)).collect();
        if gains.len() < r {
            return None;
        }
        let uncovered = m.n_samples() - covered_count;
        Some(covered_count + top_sum(&mut gains, r).min(uncovered))
    }

    fn offer(&mut self, picks: &[usize], count: usize) {
        if count > self.best_count {
            self.best_count = count;
            self.best = picks.to_vec();
        }
    }

    fn push(&mut self, node: Node) {
        if node.bound > self.best_count {
            self.heap.push(node);
        }
    }

    fn expand(&mut self, node: Node) {
        let m = self.problem.matrix();
        let k = self.problem.k();
        let r = k - node.chosen.len();
        let free: Vec<usize> = self.free(&node.fixed).collect();
        let gains: Vec<usize> = free.iter().map(|&c| m.row(c).count_and_not(&node.covered)).collect();

        // Primal heuristic: greedy completion of this node.
        let (fill, filled) = greedy_fill(m, &free, &node.covered, r);
        if fill.len() == r {
            let mut picks = node.chosen.clone();
            picks.extend(&fill);
            self.offer(&picks, filled.count_ones());
        }

        // Branch on the free candidate with the largest residual gain (lowest id on ties).
        let Some(slot) = (0..free.len()).fold(None, |best: Option<usize>, s| match best {
            Some(b) if gains[b] >= gains[s] => Some(b),
            _ => Some(s),
        }) else {
            return;
        };
        let b = free[slot];

        // Include b.
        let mut covered = node.covered.clone();
        covered.union_with(m.row(b));
        let count = node.covered_count + gains[slot];
        let mut chosen = node.chosen.clone();
        chosen.push(b);
        let mut fixed = node.fixed.clone();
        fixed.set(b, true);
        if r == 1 {
            self.offer(&chosen, count);
        } else if let Some(bound) = self.node_bound(&covered, count, &fixed, r - 1) {
            self.seq += 1;
            let child = Node {
                bound,
                depth: node.depth + 1,
                seq: self.seq,
                covered,
                covered_count: count,
                chosen,
                fixed: fixed.clone(),
            };
            self.push(child);
        }

        // Exclude b: reuse this node's gains without b.
        if free.len() > r {
            let mut rest: Vec<usize> = gains.iter().enumerate().filter(|&(s, _)| s != slot).map(|(_, &g)| g).collect();
            let uncovered = m.n_samples() - node.covered_count;
            let bound = node.covered_count + top_sum(&mut rest, r).min(uncovered);
            self.seq += 1;
            let child = Node {
                bound,
                depth: node.depth + 1,
                seq: self.seq,
                covered: node.covered,
                covered_count: node.covered_count,
                chosen: node.chosen,
                fixed,
            };
            self.push(child);
        }
    }
}

/// Exact branch-and-bound, warm-started from greedy.
pub fn bnb_select(problem: &SelectionProblem, limits: &SolverLimits) -> Result<Solution> {
    bnb_select_observed(problem, limits, &mut |_| {})
}

/// [`bnb_select`] calling `observer` on every node taken off the queue.
pub fn bnb_select_observed(
    problem: &SelectionProblem,
    limits: &SolverLimits,
    observer: &mut dyn FnMut(&NodeInfo),
) -> Result<Solution> {
    limits.validate()?;
    let start = Instant::now();
    let m = problem.matrix();
    let warm = greedy_select(problem)?;

    let mut search = Search {
        problem,
        heap: BinaryHeap::new(),
        seq: 0,
        best_count: warm.covered_count,
        best: warm.selected.clone(),
    };
    let root_covered = Bitset::new(m.n_samples());
    let root_fixed = Bitset::new(m.n_candidates());
    let root_bound = search
        .node_bound(&root_covered, 0, &root_fixed, problem.k())
        .ok_or(Error::Infeasible { k: problem.k(), feasible: problem.feasible().len() })?;
    search.push(Node {
        bound: root_bound,
        depth: 0,
        seq: 0,
        covered: root_covered,
        covered_count: 0,
        chosen: vec![],
        fixed: root_fixed,
    });

    let to_dur = |s: f64| Duration::from_secs_f64(s);
    let stall = limits.stall_window_s.map(to_dur);
    let max_time = limits.max_time_s.map(to_dur);
    let mut nodes = 0u64;
    let mut ref_gap = f64::INFINITY;
    let mut ref_time = start;

    loop {
        let top_bound = match search.heap.peek() {
            Some(n) if n.bound > search.best_count => n.bound,
            _ => {
                let best = std::mem::take(&mut search.best);
                return finish("ip", problem, best, 0, Status::Optimal, start, nodes);
            }
        };
        let gap = optimality_gap(search.best_count, top_bound)?;
        let now = Instant::now();
        if ref_gap - gap >= limits.min_improvement {
            ref_gap = gap;
            ref_time = now;
        }
        let stalled = stall.is_some_and(|w| now.duration_since(ref_time) >= w);
        let timed_out = max_time.is_some_and(|t| now.duration_since(start) >= t);
        let exhausted = limits.max_nodes.is_some_and(|n| nodes >= n);
        if stalled || timed_out || exhausted {
            log::info!("branch-and-bound stopped after {nodes} nodes, gap {gap:.6}");
            let best = std::mem::take(&mut search.best);
            return finish("ip", problem, best, top_bound, Status::EarlyStopped, start, nodes);
        }

        let node = search.heap.pop().expect("peeked");
        let excluded: Vec<usize> =
            (0..m.n_candidates()).filter(|&c| node.fixed.get(c) && !node.chosen.contains(&c)).collect();
        observer(&NodeInfo {
            chosen: &node.chosen,
            excluded,
            covered_count: node.covered_count,
            bound: node.bound,
            remaining: problem.k() - node.chosen.len(),
        });
        nodes += 1;
        search.expand(node);
    }
}

/// JSON export of one solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionDocument {
    pub solver: String,
    pub selected: Vec<usize>,
    pub covered_count: usize,
    pub n_samples: usize,
    pub fraction: f64,
    pub upper_bound: usize,
    pub gap: f64,
    pub status: Status,
    pub wall_time_s: f64,
    pub nodes: u64,
    pub limits: Option<SolverLimits>,
    pub problem_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<serde_json::Value>,
}

impl SolutionDocument {
    pub fn new(solution: &Solution, limits: Option<SolverLimits>, problem_digest: String) -> Self {
        SolutionDocument {
            solver: solution.solver.clone(),
            selected: solution.selected.clone(),
            covered_count: solution.covered_count,
            n_samples: solution.n_samples,
            fraction: solution.fraction(),
            upper_bound: solution.upper_bound,
            gap: solution.gap,
            status: solution.status,
            wall_time_s: solution.wall_time_s,
            nodes: solution.nodes,
            limits,
            problem_digest,
            evaluation: None,
        }
    }
}
