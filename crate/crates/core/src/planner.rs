//! Deterministic shortest-path solvers and the visitation subgradient.
//!
//! The primary solver is a backward A* that expands predecessors from the
//! goal until every successor of the query state is settled, so the
//! cost-to-go `Q*(query, u) = c(query, u) + g(f(query, u))` is exact for
//! every non-blocked control. A plain Dijkstra pass and a full-sweep value
//! iteration serve as exact references. `Q*` is the minimum over feasible
//! trajectories of `<c, visitation>`, so the subgradient of `Q*` with
//! respect to the stage cost is the visitation count of the optimal
//! trajectory; `extract_tau_star` materializes it.

use crate::cost_model::CostField;
use crate::gridworld::{Control, State};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("goal {0:?} is blocked or out of bounds")]
    BadGoal(State),
    #[error("query {0:?} is blocked or out of bounds")]
    BadQuery(State),
    #[error("goal unreachable from query {0:?}")]
    Unreachable(State),
    #[error("tau* start f(x, u) for control {0} is not in the closed set")]
    TauStartNotClosed(u8),
    #[error("tau* extraction failed to reach the goal")]
    TauExtraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Unvisited,
    Open,
    Closed,
}

/// Heuristic used by the backward search (estimates cost from a node to the
/// query). `FloorEuclid` is `min_cost * Euclidean distance`, admissible and
/// consistent because every move costs at least `min_cost * length`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Heuristic {
    #[default]
    Zero,
    FloorEuclid,
}

/// When the backward search stops: once every non-blocked successor of the
/// query is closed (default), or only when the open list empties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StopRule {
    #[default]
    QueryCovered,
    Exhaustive,
}

/// Result of one backward A* search.
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub query: State,
    pub goal: State,
    /// Cost-to-goal values: exact on closed nodes, upper bounds on open ones,
    /// `+inf` elsewhere.
    pub g: Vec<f64>,
    pub status: Vec<NodeStatus>,
    /// Expansion order of closed nodes (state indices).
    pub closed_order: Vec<u32>,
    /// `Q*(query, u)` per control; `+inf` for blocked or unreachable moves.
    pub q_star: [f64; 8],
}

impl PlanResult {
    pub fn expanded(&self) -> usize {
        self.closed_order.len()
    }

    pub fn is_closed(&self, index: usize) -> bool {
        self.status[index] == NodeStatus::Closed
    }

    /// Line-delimited trace of expansions (`order state_index i j g`).
    pub fn write_trace(&self, w: &mut impl Write, width: usize) -> std::io::Result<()> {
        for (order, &idx) in self.closed_order.iter().enumerate() {
            let (i, j) = ((idx as usize) % width, (idx as usize) / width);
            writeln!(w, "{order} {idx} {i} {j} {:?}", self.g[idx as usize])?;
        }
        Ok(())
    }
}

#[derive(PartialEq)]
struct HeapEntry {
    f: f64,
    idx: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed for a min-heap; ties broken by lowest state index.
        other
            .f
            .partial_cmp(&self.f)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn euclid(a: State, b: State) -> f64 {
    let (di, dj) = ((a.i - b.i) as f64, (a.j - b.j) as f64);
    (di * di + dj * dj).sqrt()
}

/// Backward A* from the goal toward the query over predecessor expansions.
///
/// Returns `Unreachable` only when no successor of the query can reach the
/// goal; successors in foreign components simply keep `Q* = +inf`.
pub fn backward_astar(
    cost: &CostField,
    goal: State,
    query: State,
    heuristic: Heuristic,
    stop_rule: StopRule,
) -> Result<PlanResult, PlanError> {
    let cells = cost.cells();
    if !cost.in_bounds(goal) || cost.is_blocked(cost.index(goal)) {
        return Err(PlanError::BadGoal(goal));
    }
    if !cost.in_bounds(query) || cost.is_blocked(cost.index(query)) {
        return Err(PlanError::BadQuery(query));
    }
    let floor = match heuristic {
        Heuristic::Zero => 0.0,
        Heuristic::FloorEuclid => cost.min_cost(),
    };
    let h = |idx: usize| -> f64 {
        if floor == 0.0 {
            0.0
        } else {
            floor * euclid(cost.state_of(idx), query)
        }
    };

    let needed: Vec<usize> = Control::all()
        .filter_map(|u| cost.successor(query, u))
        .map(|s| cost.index(s))
        .collect();

    let mut g = vec![f64::INFINITY; cells];
    let mut status = vec![NodeStatus::Unvisited; cells];
    let mut closed_order = Vec::new();
    let mut heap = BinaryHeap::new();

    let goal_idx = cost.index(goal);
    g[goal_idx] = 0.0;
    status[goal_idx] = NodeStatus::Open;
    heap.push(HeapEntry {
        f: h(goal_idx),
        idx: goal_idx,
    });

    let covered = |status: &[NodeStatus]| {
        needed
            .iter()
            .all(|&idx| status[idx] == NodeStatus::Closed)
    };

    while let Some(HeapEntry { idx, .. }) = heap.pop() {
        if status[idx] == NodeStatus::Closed {
            continue;
        }
        status[idx] = NodeStatus::Closed;
        closed_order.push(idx as u32);
        if stop_rule == StopRule::QueryCovered && covered(&status) {
            break;
        }
        // Predecessor expansion: cells s' with f(s', u) = this cell. The
        // edge cost is charged on the destination cell (this one).
        let s = cost.state_of(idx);
        for u in Control::all() {
            let (di, dj) = u.delta();
            let pred = State::new(s.i - di, s.j - dj);
            if !cost.in_bounds(pred) {
                continue;
            }
            let pidx = cost.index(pred);
            if cost.is_blocked(pidx) || status[pidx] == NodeStatus::Closed {
                continue;
            }
            let cand = g[idx] + cost.cell_cost()[idx] * u.length();
            if cand < g[pidx] {
                g[pidx] = cand;
                status[pidx] = NodeStatus::Open;
                heap.push(HeapEntry {
                    f: cand + h(pidx),
                    idx: pidx,
                });
            }
        }
    }

    let mut q_star = [f64::INFINITY; 8];
    let mut any_finite = false;
    for u in Control::all() {
        if let Some(succ) = cost.successor(query, u) {
            let sidx = cost.index(succ);
            if g[sidx].is_finite() {
                q_star[u.id()] = cost.cost(query, u).unwrap() + g[sidx];
                any_finite = true;
            }
        }
    }
    if !any_finite && !needed.is_empty() {
        return Err(PlanError::Unreachable(query));
    }

    Ok(PlanResult {
        query,
        goal,
        g,
        status,
        closed_order,
        q_star,
    })
}

/// Exact cost-to-goal for every reachable state.
#[derive(Debug, Clone)]
pub struct DistanceField {
    pub g: Vec<f64>,
    pub reached: Vec<bool>,
}

impl DistanceField {
    pub fn get(&self, index: usize) -> Option<f64> {
        self.reached[index].then_some(self.g[index])
    }
}

/// Plain Dijkstra over the same predecessor graph, run to exhaustion.
/// Deterministic: equal keys settle in state-index order.
pub fn dijkstra_oracle(cost: &CostField, goal: State) -> Result<DistanceField, PlanError> {
    let cells = cost.cells();
    if !cost.in_bounds(goal) || cost.is_blocked(cost.index(goal)) {
        return Err(PlanError::BadGoal(goal));
    }
    let mut g = vec![f64::INFINITY; cells];
    let mut done = vec![false; cells];
    let mut heap = BinaryHeap::new();
    let goal_idx = cost.index(goal);
    g[goal_idx] = 0.0;
    heap.push(HeapEntry {
        f: 0.0,
        idx: goal_idx,
    });
    while let Some(HeapEntry { idx, .. }) = heap.pop() {
        if done[idx] {
            continue;
        }
        done[idx] = true;
        let s = cost.state_of(idx);
        for u in Control::all() {
            let (di, dj) = u.delta();
            let pred = State::new(s.i - di, s.j - dj);
            if !cost.in_bounds(pred) {
                continue;
            }
            let pidx = cost.index(pred);
            if cost.is_blocked(pidx) || done[pidx] {
                continue;
            }
            let cand = g[idx] + cost.cell_cost()[idx] * u.length();
            if cand < g[pidx] {
                g[pidx] = cand;
                heap.push(HeapEntry { f: cand, idx: pidx });
            }
        }
    }
    Ok(DistanceField { g, reached: done })
}

/// Full synchronous Bellman backups over the whole grid; the efficiency
/// baseline. Touches every cell each sweep.
#[derive(Debug, Clone)]
pub struct ValueIteration {
    pub v: Vec<f64>,
    /// `Q(s, u) = c(s, u) + V(f(s, u))` from the final sweep.
    pub q: Vec<[f64; 8]>,
    pub sweeps: usize,
    pub touched_per_sweep: usize,
}

pub fn value_iteration_reference(
    cost: &CostField,
    goal: State,
    sweeps: usize,
) -> Result<ValueIteration, PlanError> {
    let cells = cost.cells();
    if !cost.in_bounds(goal) || cost.is_blocked(cost.index(goal)) {
        return Err(PlanError::BadGoal(goal));
    }
    let goal_idx = cost.index(goal);
    let mut v = vec![f64::INFINITY; cells];
    v[goal_idx] = 0.0;
    for _ in 0..sweeps {
        let mut next = vec![f64::INFINITY; cells];
        next[goal_idx] = 0.0;
        for idx in 0..cells {
            if idx == goal_idx || cost.is_blocked(idx) {
                continue;
            }
            let s = cost.state_of(idx);
            let mut best = f64::INFINITY;
            for u in Control::all() {
                if let (Some(c), Some(succ)) = (cost.cost(s, u), cost.successor(s, u)) {
                    let val = c + v[cost.index(succ)];
                    if val < best {
                        best = val;
                    }
                }
            }
            next[idx] = best;
        }
        v = next;
    }
    let mut q = vec![[f64::INFINITY; 8]; cells];
    for idx in 0..cells {
        if cost.is_blocked(idx) {
            continue;
        }
        let s = cost.state_of(idx);
        for u in Control::all() {
            if let (Some(c), Some(succ)) = (cost.cost(s, u), cost.successor(s, u)) {
                q[idx][u.id()] = c + v[cost.index(succ)];
            }
        }
    }
    Ok(ValueIteration {
        v,
        q,
        sweeps,
        touched_per_sweep: cells,
    })
}

/// Distribution over the 8 controls at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub probs: [f64; 8],
    pub temperature: f64,
}

impl Policy {
    /// Uniform over the controls marked available (the fallback for states
    /// the search never reached).
    pub fn uniform(available: [bool; 8]) -> Policy {
        let n = available.iter().filter(|&&a| a).count().max(1) as f64;
        let mut probs = [0.0; 8];
        for (p, &a) in probs.iter_mut().zip(&available) {
            if a {
                *p = 1.0 / n;
            }
        }
        Policy {
            probs,
            temperature: f64::INFINITY,
        }
    }

    /// Argmax control, ties broken by lowest id.
    pub fn argmax(&self) -> Control {
        let mut best = 0usize;
        for u in 1..8 {
            if self.probs[u] > self.probs[best] {
                best = u;
            }
        }
        Control(best as u8)
    }

    pub fn prob(&self, u: Control) -> f64 {
        self.probs[u.id()]
    }
}

/// Boltzmann policy over cost-to-go values: `pi(u) ~ exp(-Q*(u) / temperature)`,
/// with zero probability on controls whose `Q*` is infinite.
pub fn boltzmann_policy(q_star: &[f64; 8], temperature: f64) -> Policy {
    debug_assert!(temperature > 0.0);
    let m = q_star
        .iter()
        .copied()
        .filter(|q| q.is_finite())
        .fold(f64::INFINITY, f64::min);
    assert!(
        m.is_finite(),
        "boltzmann_policy needs at least one finite cost-to-go"
    );
    let mut probs = [0.0; 8];
    let mut z = 0.0;
    for (p, &q) in probs.iter_mut().zip(q_star) {
        if q.is_finite() {
            *p = (-(q - m) / temperature).exp();
            z += *p;
        }
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    Policy { probs, temperature }
}

/// State-control visitation counts of one trajectory, keyed by
/// `(state_index, control_id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Visitation {
    pub counts: BTreeMap<(usize, u8), u32>,
    pub total: u32,
}

impl Visitation {
    fn record(&mut self, state_index: usize, u: Control) {
        *self.counts.entry((state_index, u.0)).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn count(&self, state_index: usize, u: Control) -> u32 {
        self.counts.get(&(state_index, u.0)).copied().unwrap_or(0)
    }
}

/// Follows the optimal trajectory for `Q*(x_t, u)`: takes `u` first, then
/// greedily `argmin_u' c(x, u') + g(f(x, u'))` over closed successors, ties
/// broken by lowest control id. Returns the trajectory and its visitation.
pub fn extract_tau_star(
    plan: &PlanResult,
    cost: &CostField,
    x_t: State,
    u_t: Control,
) -> Result<(Vec<(State, Control)>, Visitation), PlanError> {
    let start = cost
        .successor(x_t, u_t)
        .ok_or(PlanError::TauStartNotClosed(u_t.0))?;
    if !plan.is_closed(cost.index(start)) {
        return Err(PlanError::TauStartNotClosed(u_t.0));
    }
    let mut trajectory = vec![(x_t, u_t)];
    let mut visitation = Visitation::default();
    visitation.record(cost.index(x_t), u_t);

    let mut s = start;
    let mut guard = cost.cells() + 1;
    while s != plan.goal {
        let mut best: Option<(f64, Control, State)> = None;
        for u in Control::all() {
            let Some(succ) = cost.successor(s, u) else {
                continue;
            };
            let sidx = cost.index(succ);
            if !plan.is_closed(sidx) {
                continue;
            }
            let val = cost.cost(s, u).unwrap() + plan.g[sidx];
            if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
                best = Some((val, u, succ));
            }
        }
        let Some((_, u, succ)) = best else {
            return Err(PlanError::TauExtraction);
        };
        trajectory.push((s, u));
        visitation.record(cost.index(s), u);
        s = succ;
        guard -= 1;
        if guard == 0 {
            return Err(PlanError::TauExtraction);
        }
    }
    Ok((trajectory, visitation))
}

/// The subgradient of `Q*(x_t, u_t)` with respect to each stage cost
/// `c(x, u)`: exactly the visitation count.
pub fn q_subgradient(visitation: &Visitation) -> BTreeMap<(usize, u8), f64> {
    visitation
        .counts
        .iter()
        .map(|(&k, &v)| (k, v as f64))
        .collect()
}

/// Aggregates the subgradient onto per-cell costs: with
/// `c(x, u) = cell_cost[f(x, u)] * length(u)`, each visited pair contributes
/// `length(u)` to its destination cell.
pub fn cell_subgradient(visitation: &Visitation, cost: &CostField) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for (&(state_index, uid), &count) in &visitation.counts {
        let u = Control(uid);
        let s = cost.state_of(state_index);
        if let Some(succ) = cost.successor(s, u) {
            *out.entry(cost.index(succ)).or_insert(0.0) += count as f64 * u.length();
        }
    }
    out
}
