//! Expert demonstrations: shortest paths under the ground-truth per-class
//! cost, with a simulated scan recorded at every step.

use super::{
    motion_model, simulate_scan, Control, DemoStep, Demonstration, EnvironmentSpec, Motion,
    SensorParams, State,
};
use crate::cost_model::CostField;
use crate::planner::{boltzmann_policy, dijkstra_oracle};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("goal {goal:?} unreachable from start {start:?}")]
    Unreachable { start: State, goal: State },
    #[error("start or goal is not a valid free cell")]
    BadEndpoint,
    #[error("suboptimal expert exceeded the step budget {0}")]
    TooLong(usize),
}

/// Options for `generate_expert_demo`.
#[derive(Debug, Clone)]
pub struct ExpertOptions {
    /// `None`: exactly optimal controls (argmin, ties by lowest id).
    /// `Some(tau)`: Boltzmann-suboptimal expert sampling at temperature tau.
    pub temperature: Option<f64>,
    /// Seed for the suboptimal expert's sampling.
    pub seed: u64,
    /// Step budget multiplier over the optimal path length (suboptimal mode).
    pub budget_factor: usize,
}

impl Default for ExpertOptions {
    fn default() -> Self {
        ExpertOptions {
            temperature: None,
            seed: 0,
            budget_factor: 4,
        }
    }
}

/// Runs the exact solver on the ground-truth cost
/// `c*(x, u) = true_cost[label(f(x, u))] * length(u)` and records the chosen
/// control plus a simulated scan at each visited state.
pub fn generate_expert_demo(
    env: &EnvironmentSpec,
    start: State,
    goal: State,
    true_cost: &[f64],
    sensor: &SensorParams,
    options: &ExpertOptions,
) -> Result<Demonstration, ExpertError> {
    if !env.in_bounds(start)
        || !env.in_bounds(goal)
        || env.is_obstacle(start)
        || env.is_obstacle(goal)
    {
        return Err(ExpertError::BadEndpoint);
    }
    let cost = CostField::from_class_costs(env, true_cost);
    let field = dijkstra_oracle(&cost, goal).map_err(|_| ExpertError::BadEndpoint)?;
    if field.get(cost.index(start)).is_none() {
        return Err(ExpertError::Unreachable { start, goal });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut steps = Vec::new();
    let mut x = start;
    // Optimal demos finish in at most optimal-length steps; keep a generous
    // budget for the Boltzmann-suboptimal mode.
    let budget = if options.temperature.is_some() {
        options.budget_factor * env.cells()
    } else {
        env.cells() + 1
    };
    let mut t = 0usize;
    while x != goal {
        t += 1;
        if t > budget {
            return Err(ExpertError::TooLong(budget));
        }
        let control = match options.temperature {
            None => greedy_control(&cost, &field, x).ok_or(ExpertError::Unreachable {
                start,
                goal,
            })?,
            Some(tau) => sample_control(&cost, &field, x, tau, &mut rng)
                .ok_or(ExpertError::Unreachable { start, goal })?,
        };
        let scan = simulate_scan(x, env, sensor);
        steps.push(DemoStep {
            t,
            state: x,
            control,
            points: scan.points,
        });
        match motion_model(x, control, env) {
            Motion::Moved(next) => x = next,
            Motion::Blocked => return Err(ExpertError::BadEndpoint),
        }
    }
    Ok(Demonstration {
        env_id: env.id,
        start,
        goal,
        steps,
    })
}

/// Argmin over `c(x, u) + g(f(x, u))`, ties broken by lowest control id.
fn greedy_control(
    cost: &CostField,
    field: &crate::planner::DistanceField,
    x: State,
) -> Option<Control> {
    let mut best: Option<(f64, Control)> = None;
    for u in Control::all() {
        let Some(succ) = cost.successor(x, u) else {
            continue;
        };
        let Some(g) = field.get(cost.index(succ)) else {
            continue;
        };
        let val = cost.cost(x, u).unwrap() + g;
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, u));
        }
    }
    best.map(|(_, u)| u)
}

fn sample_control(
    cost: &CostField,
    field: &crate::planner::DistanceField,
    x: State,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Control> {
    let mut q = [f64::INFINITY; 8];
    let mut any = false;
    for u in Control::all() {
        if let Some(succ) = cost.successor(x, u) {
            if let Some(g) = field.get(cost.index(succ)) {
                q[u.id()] = cost.cost(x, u).unwrap() + g;
                any = true;
            }
        }
    }
    if !any {
        return None;
    }
    let policy = boltzmann_policy(&q, temperature);
    let draw: f64 = rng.random();
    let mut acc = 0.0;
    for u in Control::all() {
        acc += policy.probs[u.id()];
        if draw <= acc {
            return Some(u);
        }
    }
    Some(Control(7))
}
