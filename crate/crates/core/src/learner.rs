//! End-to-end cost learning and deployment rollouts.
//!
//! Training replays each demonstration's map-encoder recurrence, plans with
//! backward A* at every step, and minimizes the negative log-likelihood of
//! the demonstrated controls. The gradient chains three closed forms:
//! `dL/dQ(u) = (1{u = u*} - pi(u)) / temperature`, `dQ(u)/dc = mu_tau*` (the
//! visitation counts of the optimal trajectory for each control), and the
//! exact reverse-mode Jacobians of the cost and map encoders.

use crate::cost_model::{
    cost_backward, cost_forward, CostEncoderGrads, CostEncoderParams, CostField, CostModelError,
};
use crate::gridworld::io::DemoItem;
use crate::gridworld::{
    motion_model, simulate_scan, Control, Demonstration, EnvironmentSpec, Motion, SensorParams,
    State,
};
use crate::planner::{
    backward_astar, boltzmann_policy, cell_subgradient, extract_tau_star, Heuristic, PlanError,
    Policy, StopRule,
};
use crate::semantic_map::{
    apply_scan, map_encoder_backward, EncoderMode, LogOddsGrid, MapEncoderParams, MapError,
    ScanTape,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("cost model: {0}")]
    CostModel(#[from] CostModelError),
    #[error("map encoder: {0}")]
    Map(#[from] MapError),
    #[error("plan: {0}")]
    Plan(#[from] PlanError),
    #[error("dataset item {index} invalid: {message}")]
    BadDataset { index: usize, message: String },
    #[error("training config invalid: {0}")]
    BadConfig(String),
    #[error("non-finite {0} during training")]
    NonFinite(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Full trainable parameter set theta = (psi, phi).
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParams {
    pub map: MapEncoderParams,
    pub cost: CostEncoderParams,
}

impl ThetaParams {
    pub fn init(
        seed: u64,
        num_classes: usize,
        mode: EncoderMode,
        arch: crate::cost_model::ArchConfig,
    ) -> Self {
        ThetaParams {
            map: MapEncoderParams::new(mode, num_classes, seed.wrapping_mul(0x9E37_79B9)),
            cost: crate::cost_model::init_params(seed, &arch, num_classes + 1),
        }
    }

    /// Trainable parameters as one flat vector: the active map-encoder
    /// tensors (psi in linear mode, the network in network mode) followed by
    /// the cost-encoder tensors in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        match self.map.mode {
            EncoderMode::Linear => out.extend_from_slice(&self.map.psi),
            EncoderMode::Network => {
                out.extend_from_slice(&self.map.net.w1);
                out.extend_from_slice(&self.map.net.b1);
                out.extend_from_slice(&self.map.net.w2);
                out.extend_from_slice(&self.map.net.b2);
            }
        }
        for (_, _, data) in self.cost.tensors() {
            out.extend_from_slice(data);
        }
        out
    }

    pub fn flat_len(&self) -> usize {
        let map_len = match self.map.mode {
            EncoderMode::Linear => self.map.psi.len(),
            EncoderMode::Network => {
                self.map.net.w1.len()
                    + self.map.net.b1.len()
                    + self.map.net.w2.len()
                    + self.map.net.b2.len()
            }
        };
        map_len + self.cost.param_count()
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.flat_len());
        let mut pos = 0usize;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        match self.map.mode {
            EncoderMode::Linear => take(&mut self.map.psi),
            EncoderMode::Network => {
                take(&mut self.map.net.w1);
                take(&mut self.map.net.b1);
                take(&mut self.map.net.w2);
                take(&mut self.map.net.b2);
            }
        }
        for tensor in self.cost.tensors_mut() {
            let len = tensor.len();
            tensor.copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
        debug_assert_eq!(pos, flat.len());
    }
}

/// `dL/dQ(x_t, u)` for the step loss `-log pi(u*)`: the closed form
/// `(1{u = u*} - pi(u)) / temperature`, zero on unavailable controls.
pub fn nll_q_gradient(policy: &Policy, u_star: Control, temperature: f64) -> [f64; 8] {
    let mut out = [0.0; 8];
    for u in 0..8 {
        if policy.probs[u] > 0.0 || u == u_star.id() {
            let indicator = if u == u_star.id() { 1.0 } else { 0.0 };
            out[u] = (indicator - policy.probs[u]) / temperature;
        }
    }
    out
}

/// Per-step evaluation options.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions<'a> {
    pub temperature: f64,
    pub want_grad: bool,
    pub freeze_map: bool,
    /// Additive per-cell cost offsets (tie-breaking jitter in gradient
    /// checks, probe bumps in tests). Constant with respect to theta.
    pub jitter: Option<&'a [f64]>,
    pub heuristic: Heuristic,
}

impl<'a> StepOptions<'a> {
    pub fn eval(temperature: f64) -> Self {
        StepOptions {
            temperature,
            want_grad: false,
            freeze_map: false,
            jitter: None,
            heuristic: Heuristic::Zero,
        }
    }
}

/// Why a training step was skipped rather than scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    /// The demonstrated control is blocked (corrupted data).
    BlockedExpertControl,
    /// The planner found no path from any successor to the goal.
    Unreachable,
}

#[derive(Debug)]
pub enum StepEval {
    Evaluated(Box<StepOutcome>),
    Skipped(SkipReason),
}

#[derive(Debug)]
pub struct StepOutcome {
    pub nll: f64,
    pub policy: Policy,
    pub q_star: [f64; 8],
    pub argmax_match: bool,
    /// dL/dcell_cost accumulated over all controls (dense, J entries).
    pub cell_grad: Option<Vec<f64>>,
    /// dL/dh_t through the posterior softmax (dense, J x (K+1)).
    pub upstream_h: Option<Vec<f64>>,
    /// Cost-encoder gradients for this step.
    pub cost_grads: Option<CostEncoderGrads>,
}

/// Evaluates one step: builds the cost field from the current posterior,
/// plans to the goal, forms the policy, and (optionally) back-propagates the
/// step loss into the cost encoder and the posterior.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_step(
    theta: &ThetaParams,
    env: &EnvironmentSpec,
    blocked: &[bool],
    goal: State,
    x_t: State,
    u_star: Control,
    grid: &LogOddsGrid,
    opts: &StepOptions,
) -> Result<StepEval, LearnError> {
    if motion_model(x_t, u_star, env) == Motion::Blocked {
        return Ok(StepEval::Skipped(SkipReason::BlockedExpertControl));
    }
    let posterior = grid.posterior();
    let (mut cell_cost, tape) = cost_forward(&theta.cost, &posterior, env.width, env.height)?;
    if let Some(jitter) = opts.jitter {
        for (c, j) in cell_cost.iter_mut().zip(jitter) {
            *c += *j;
        }
    }
    let field = CostField::new(
        env.width,
        env.height,
        cell_cost,
        blocked.to_vec(),
        theta.cost.arch.min_cost,
    )?;
    let plan = match backward_astar(&field, goal, x_t, opts.heuristic, StopRule::QueryCovered) {
        Ok(plan) => plan,
        Err(PlanError::Unreachable(_)) => return Ok(StepEval::Skipped(SkipReason::Unreachable)),
        Err(e) => return Err(e.into()),
    };
    let policy = boltzmann_policy(&plan.q_star, opts.temperature);
    let p_star = policy.prob(u_star);
    if p_star <= 0.0 {
        return Ok(StepEval::Skipped(SkipReason::Unreachable));
    }
    let nll = -p_star.ln();
    let argmax_match = policy.argmax() == u_star;

    let mut outcome = StepOutcome {
        nll,
        q_star: plan.q_star,
        argmax_match,
        cell_grad: None,
        upstream_h: None,
        cost_grads: None,
        policy,
    };
    if opts.want_grad {
        let dl_dq = nll_q_gradient(&outcome.policy, u_star, opts.temperature);
        let mut cell_grad = vec![0.0; field.cells()];
        for u in Control::all() {
            let coeff = dl_dq[u.id()];
            if coeff == 0.0 || !plan.q_star[u.id()].is_finite() {
                continue;
            }
            let (_, visitation) = extract_tau_star(&plan, &field, x_t, u)?;
            for (cell, weight) in cell_subgradient(&visitation, &field) {
                cell_grad[cell] += coeff * weight;
            }
        }
        let (cost_grads, grad_posterior) = cost_backward(&theta.cost, &tape, &cell_grad)?;
        let rows = grid.row_len();
        let mut upstream_h = vec![0.0; grid.cells() * rows];
        if !opts.freeze_map {
            // Softmax Jacobian per cell: dL/dh_k = p_k (g_k - sum_c g_c p_c).
            for cell in 0..grid.cells() {
                let p = &posterior[cell * rows..(cell + 1) * rows];
                let g = &grad_posterior[cell * rows..(cell + 1) * rows];
                let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                for k in 0..rows {
                    upstream_h[cell * rows + k] = p[k] * (g[k] - dot);
                }
            }
        }
        outcome.cell_grad = Some(cell_grad);
        outcome.upstream_h = Some(upstream_h);
        outcome.cost_grads = Some(cost_grads);
    }
    Ok(StepEval::Evaluated(Box::new(outcome)))
}

/// One demonstration's loss, accuracy counts, and (optionally) the full flat
/// gradient, with the map-encoder recurrence replayed from the prior.
#[derive(Debug, Clone)]
pub struct DemoOutcome {
    pub nll_sum: f64,
    pub steps: usize,
    pub matches: usize,
    pub skipped: usize,
    pub grad: Option<Vec<f64>>,
}

/// Per-step loss and gradient against an already-updated hidden state, per
/// the recurrence contract: `grid` holds `h_t` (scans `1..=t` applied) and
/// `tapes` are those scans' records in order.
#[allow(clippy::too_many_arguments)]
pub fn step_loss_and_grad(
    theta: &ThetaParams,
    env: &EnvironmentSpec,
    goal: State,
    x_t: State,
    u_star: Control,
    grid: &LogOddsGrid,
    tapes: &[ScanTape],
    opts: &StepOptions,
) -> Result<(StepEval, Option<Vec<f64>>), LearnError> {
    let blocked = env.blocked_mask();
    let eval = evaluate_step(theta, env, &blocked, goal, x_t, u_star, grid, opts)?;
    if !opts.want_grad {
        return Ok((eval, None));
    }
    match &eval {
        StepEval::Evaluated(outcome) => {
            let rows = grid.row_len();
            let mut upstreams = vec![vec![0.0; grid.cells() * rows]; tapes.len()];
            if let (Some(last), Some(up)) = (upstreams.last_mut(), outcome.upstream_h.as_ref()) {
                last.copy_from_slice(up);
            }
            let map_grads = if opts.freeze_map {
                crate::semantic_map::MapEncoderGrads::zeros_like(&theta.map)
            } else {
                map_encoder_backward(&theta.map, grid.cells(), grid.num_classes, tapes, &upstreams)?
            };
            let flat = flatten_grads(
                theta,
                &map_grads,
                outcome.cost_grads.as_ref().expect("grads requested"),
            );
            Ok((eval, Some(flat)))
        }
        StepEval::Skipped(_) => Ok((eval, Some(vec![0.0; theta.flat_len()]))),
    }
}

fn flatten_grads(
    theta: &ThetaParams,
    map: &crate::semantic_map::MapEncoderGrads,
    cost: &CostEncoderGrads,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(theta.flat_len());
    match theta.map.mode {
        EncoderMode::Linear => out.extend_from_slice(&map.psi),
        EncoderMode::Network => {
            out.extend_from_slice(&map.net.w1);
            out.extend_from_slice(&map.net.b1);
            out.extend_from_slice(&map.net.w2);
            out.extend_from_slice(&map.net.b2);
        }
    }
    for tensor in cost.tensors() {
        out.extend_from_slice(tensor);
    }
    out
}

/// Replays one demonstration end to end. Gradient accumulation is additive
/// across steps; the map-encoder backward runs once over the whole tape.
pub fn demo_loss_and_grad(
    theta: &ThetaParams,
    env: &EnvironmentSpec,
    demo: &Demonstration,
    opts: &StepOptions,
) -> Result<DemoOutcome, LearnError> {
    let blocked = env.blocked_mask();
    let mut grid = LogOddsGrid::new(env.width, env.height, env.num_classes, None);
    let mut tapes: Vec<ScanTape> = Vec::with_capacity(demo.len());
    let mut upstreams: Vec<Vec<f64>> = Vec::with_capacity(demo.len());
    let mut cost_grads_sum: Option<CostEncoderGrads> = None;
    let mut out = DemoOutcome {
        nll_sum: 0.0,
        steps: 0,
        matches: 0,
        skipped: 0,
        grad: None,
    };
    let rows = grid.row_len();
    for step in &demo.steps {
        let cloud = crate::gridworld::SemanticPointCloud {
            points: step.points.clone(),
        };
        let tape = apply_scan(&mut grid, step.state, &cloud, &theta.map);
        tapes.push(tape);
        let eval = evaluate_step(
            theta,
            env,
            &blocked,
            demo.goal,
            step.state,
            step.control,
            &grid,
            opts,
        )?;
        match eval {
            StepEval::Evaluated(outcome) => {
                out.nll_sum += outcome.nll;
                out.steps += 1;
                if outcome.argmax_match {
                    out.matches += 1;
                }
                if opts.want_grad {
                    upstreams.push(outcome.upstream_h.expect("grad requested"));
                    match &mut cost_grads_sum {
                        Some(sum) => sum.add_assign(outcome.cost_grads.as_ref().unwrap()),
                        None => cost_grads_sum = outcome.cost_grads,
                    }
                }
            }
            StepEval::Skipped(_) => {
                out.skipped += 1;
                if opts.want_grad {
                    upstreams.push(vec![0.0; grid.cells() * rows]);
                }
            }
        }
    }
    if opts.want_grad {
        let map_grads = if opts.freeze_map || tapes.is_empty() {
            crate::semantic_map::MapEncoderGrads::zeros_like(&theta.map)
        } else {
            map_encoder_backward(&theta.map, grid.cells(), grid.num_classes, &tapes, &upstreams)?
        };
        let cost_grads =
            cost_grads_sum.unwrap_or_else(|| CostEncoderGrads::zeros_like(&theta.cost));
        out.grad = Some(flatten_grads(theta, &map_grads, &cost_grads));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain subgradient descent.
    Sgd,
    /// Adaptive moments with decay (0.9, 0.999).
    Adam,
}

/// Training-loop configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Demonstrations per parameter update; `None` uses the full dataset.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    /// Convergence window in epochs (compared against the previous window).
    pub window: usize,
    /// Relative mean-NLL improvement below which training stops.
    pub tolerance: f64,
    pub seed: u64,
    pub temperature: f64,
    /// Worker threads; 0 picks the available parallelism, 1 is sequential.
    pub threads: usize,
    pub freeze_map: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: None,
            max_epochs: 200,
            window: 10,
            tolerance: 1e-4,
            seed: 0,
            temperature: 1.0,
            threads: 0,
            freeze_map: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_nll: f64,
    pub accuracy: f64,
    pub wall_time_s: f64,
    pub skipped: usize,
}

#[derive(Debug)]
pub struct TrainResult {
    pub theta: ThetaParams,
    pub log: Vec<EpochRecord>,
    pub converged: bool,
    pub epochs_run: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Trains theta on the dataset until the windowed mean NLL stops improving
/// or `max_epochs` is reached. Deterministic for a fixed config and seed at
/// any thread count: per-demo gradients are reduced in dataset order.
pub fn train(
    dataset: &[DemoItem],
    theta0: ThetaParams,
    cfg: &TrainConfig,
) -> Result<TrainResult, LearnError> {
    if dataset.is_empty() {
        return Err(LearnError::EmptyDataset);
    }
    if cfg.learning_rate < 0.0 {
        return Err(LearnError::BadConfig("learning rate must be >= 0".into()));
    }
    if cfg.window < 2 {
        return Err(LearnError::BadConfig("window must be >= 2".into()));
    }
    for (index, item) in dataset.iter().enumerate() {
        item.env
            .validate()
            .map_err(|message| LearnError::BadDataset { index, message })?;
        item.demo
            .validate(&item.env)
            .map_err(|message| LearnError::BadDataset { index, message })?;
        if item.env.width < 8 || item.env.height < 8 {
            return Err(LearnError::BadDataset {
                index,
                message: "grid below the 8x8 encoder minimum".into(),
            });
        }
    }

    let threads = if cfg.threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cfg.threads
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| LearnError::BadConfig(e.to_string()))?;

    let mut theta = theta0;
    let mut flat = theta.to_flat();
    let mut adam = Adam::new(flat.len());
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut converged = false;
    let batch = cfg.batch_size.unwrap_or(dataset.len()).max(1);

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let mut nll_sum = 0.0;
        let mut steps = 0usize;
        let mut matches = 0usize;
        let mut skipped = 0usize;
        for chunk in dataset.chunks(batch) {
            let opts = StepOptions {
                temperature: cfg.temperature,
                want_grad: true,
                freeze_map: cfg.freeze_map,
                jitter: None,
                heuristic: Heuristic::Zero,
            };
            let results: Vec<Result<DemoOutcome, LearnError>> = if threads == 1 {
                chunk
                    .iter()
                    .map(|item| demo_loss_and_grad(&theta, &item.env, &item.demo, &opts))
                    .collect()
            } else {
                pool.install(|| {
                    chunk
                        .par_iter()
                        .map(|item| demo_loss_and_grad(&theta, &item.env, &item.demo, &opts))
                        .collect()
                })
            };
            let mut grad_sum = vec![0.0; flat.len()];
            for result in results {
                let outcome = result?;
                nll_sum += outcome.nll_sum;
                steps += outcome.steps;
                matches += outcome.matches;
                skipped += outcome.skipped;
                let grad = outcome.grad.expect("gradient requested");
                for (g, d) in grad_sum.iter_mut().zip(&grad) {
                    *g += *d;
                }
            }
            if !grad_sum.iter().all(|v| v.is_finite()) {
                return Err(LearnError::NonFinite("gradient"));
            }
            match cfg.optimizer {
                OptimizerKind::Sgd => {
                    for (t, g) in flat.iter_mut().zip(&grad_sum) {
                        *t -= cfg.learning_rate * g;
                    }
                }
                OptimizerKind::Adam => adam.step(&mut flat, &grad_sum, cfg.learning_rate),
            }
            if !flat.iter().all(|v| v.is_finite()) {
                return Err(LearnError::NonFinite("parameters"));
            }
            theta.set_from_flat(&flat);
        }
        if !nll_sum.is_finite() {
            return Err(LearnError::NonFinite("loss"));
        }
        if skipped > 0 {
            eprintln!("epoch {epoch}: skipped {skipped} invalid or unreachable steps");
        }
        let mean_nll = nll_sum / steps.max(1) as f64;
        log.push(EpochRecord {
            epoch,
            mean_nll,
            accuracy: matches as f64 / steps.max(1) as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
            skipped,
        });
        if log.len() >= 2 * cfg.window {
            let n = log.len();
            let prev: f64 = log[n - 2 * cfg.window..n - cfg.window]
                .iter()
                .map(|r| r.mean_nll)
                .sum::<f64>()
                / cfg.window as f64;
            let cur: f64 =
                log[n - cfg.window..].iter().map(|r| r.mean_nll).sum::<f64>() / cfg.window as f64;
            if (prev - cur) / prev.abs().max(1e-12) < cfg.tolerance {
                converged = true;
                break;
            }
        }
    }
    let epochs_run = log.len();
    Ok(TrainResult {
        theta,
        log,
        converged,
        epochs_run,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutOutcome {
    ReachedGoal,
    Collision,
    Timeout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutResult {
    pub states: Vec<State>,
    pub controls: Vec<Control>,
    pub outcome: RolloutOutcome,
    /// Number of moves taken.
    pub steps: usize,
    /// Steps where the planner had no path and the uniform fallback acted.
    pub fallback_steps: usize,
}

/// Deployment loop: observe, update the map, recompute the cost, plan, take
/// the argmax control (ties to the lowest id), repeat. When the planner
/// reports no path the robot takes the lowest-id available control.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    env: &EnvironmentSpec,
    start: State,
    goal: State,
    theta: &ThetaParams,
    sensor: &SensorParams,
    max_steps: usize,
    temperature: f64,
) -> Result<RolloutResult, LearnError> {
    let blocked = env.blocked_mask();
    let mut grid = LogOddsGrid::new(env.width, env.height, env.num_classes, None);
    let mut states = vec![start];
    let mut controls = Vec::new();
    let mut x = start;
    let mut fallback_steps = 0usize;

    for _ in 0..max_steps {
        if x == goal {
            break;
        }
        let cloud = simulate_scan(x, env, sensor);
        apply_scan(&mut grid, x, &cloud, &theta.map);
        let posterior = grid.posterior();
        let (cell_cost, _) = cost_forward(&theta.cost, &posterior, env.width, env.height)?;
        let field = CostField::new(
            env.width,
            env.height,
            cell_cost,
            blocked.clone(),
            theta.cost.arch.min_cost,
        )?;
        let control = match backward_astar(&field, goal, x, Heuristic::Zero, StopRule::QueryCovered)
        {
            Ok(plan) => boltzmann_policy(&plan.q_star, temperature).argmax(),
            Err(PlanError::Unreachable(_)) => {
                fallback_steps += 1;
                let mut available = [false; 8];
                for u in Control::all() {
                    available[u.id()] = motion_model(x, u, env) != Motion::Blocked;
                }
                Policy::uniform(available).argmax()
            }
            Err(e) => return Err(e.into()),
        };
        match motion_model(x, control, env) {
            Motion::Moved(next) => {
                x = next;
                states.push(x);
                controls.push(control);
            }
            Motion::Blocked => {
                // Only reachable through corrupted inputs; entering an
                // obstacle is the collision outcome.
                return Ok(RolloutResult {
                    steps: controls.len(),
                    states,
                    controls,
                    outcome: RolloutOutcome::Collision,
                    fallback_steps,
                });
            }
        }
    }
    let outcome = if x == goal {
        RolloutOutcome::ReachedGoal
    } else {
        RolloutOutcome::Timeout
    };
    Ok(RolloutResult {
        steps: controls.len(),
        states,
        controls,
        outcome,
        fallback_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::ArchConfig;
    use crate::gridworld::{generate_expert_demo, ExpertOptions};
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// 8x8, two semantic classes: road loops (class 1) with scattered
    /// blocking class-2 cells that the sensor can see.
    fn small_env() -> EnvironmentSpec {
        let width = 8;
        let height = 8;
        let mut labels = vec![0u8; 64];
        for k in 0..64 {
            let (i, j) = (k % 8, k / 8);
            if i == 2 || j == 2 || i == 5 || j == 5 {
                labels[k] = 1;
            }
        }
        for &(i, j) in &[(0, 0), (7, 0), (4, 3), (0, 6), (6, 7), (3, 4)] {
            labels[j * 8 + i] = 2;
        }
        EnvironmentSpec {
            id: 0,
            width,
            height,
            resolution: 1.0,
            num_classes: 2,
            labels,
            obstacle_classes: vec![2],
            ray_visible_classes: vec![],
            seed: 0,
        }
    }

    fn small_sensor() -> SensorParams {
        SensorParams {
            num_rays: 48,
            max_range: 10.0,
            label_noise: 0.1,
        }
    }

    fn small_demo(env: &EnvironmentSpec) -> Demonstration {
        generate_expert_demo(
            env,
            State::new(2, 6),
            State::new(6, 2),
            &[2.0, 1.0, 1.0],
            &small_sensor(),
            &ExpertOptions::default(),
        )
        .unwrap()
    }

    fn tiny_theta(mode: EncoderMode, seed: u64) -> ThetaParams {
        let arch = ArchConfig {
            kernel: 3,
            widths: [2, 3],
            min_cost: 1e-3,
        };
        ThetaParams::init(seed, 2, mode, arch)
    }

    fn jitter_field(cells: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cells).map(|_| 0.08 * (rng.random::<f64>() - 0.5)).collect()
    }

    #[test]
    fn uniform_policy_gradient_factor() {
        let policy = Policy {
            probs: [0.125; 8],
            temperature: 1.0,
        };
        let grad = nll_q_gradient(&policy, Control(3), 1.0);
        assert!((grad[3] - 0.875).abs() < 1e-15);
        for u in 0..8 {
            if u != 3 {
                assert!((grad[u] + 0.125).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn saturated_policy_has_vanishing_loss_and_gradient() {
        let mut probs = [1e-12; 8];
        probs[2] = 1.0 - 7e-12;
        let policy = Policy {
            probs,
            temperature: 1.0,
        };
        let nll = -policy.prob(Control(2)).ln();
        assert!(nll < 1e-11);
        let grad = nll_q_gradient(&policy, Control(2), 1.0);
        assert!(grad.iter().all(|&g| g.abs() < 1e-11));
    }

    fn demo_nll(
        theta: &ThetaParams,
        env: &EnvironmentSpec,
        demo: &Demonstration,
        jitter: &[f64],
    ) -> f64 {
        let opts = StepOptions {
            temperature: 1.0,
            want_grad: false,
            freeze_map: false,
            jitter: Some(jitter),
            heuristic: Heuristic::Zero,
        };
        let out = demo_loss_and_grad(theta, env, demo, &opts).unwrap();
        assert_eq!(out.skipped, 0);
        out.nll_sum
    }

    fn check_end_to_end_gradient(mode: EncoderMode, seed: u64) {
        let env = small_env();
        let demo = small_demo(&env);
        assert!(demo.len() >= 3);
        let theta = tiny_theta(mode, seed);
        let jitter = jitter_field(64, seed ^ 0xF00D);
        let opts = StepOptions {
            temperature: 1.0,
            want_grad: true,
            freeze_map: false,
            jitter: Some(&jitter),
            heuristic: Heuristic::Zero,
        };
        let out = demo_loss_and_grad(&theta, &env, &demo, &opts).unwrap();
        let grad = out.grad.unwrap();
        let flat = theta.to_flat();
        let h = 1e-5;
        let mut checked = 0usize;
        for idx in (0..flat.len()).step_by(11) {
            let mut plus = theta.clone();
            let mut fplus = flat.clone();
            fplus[idx] += h;
            plus.set_from_flat(&fplus);
            let mut minus = theta.clone();
            let mut fminus = flat.clone();
            fminus[idx] -= h;
            minus.set_from_flat(&fminus);
            let fd = (demo_nll(&plus, &env, &demo, &jitter)
                - demo_nll(&minus, &env, &demo, &jitter))
                / (2.0 * h);
            let diff = (fd - grad[idx]).abs();
            let rel = diff / fd.abs().max(grad[idx].abs()).max(1e-8);
            assert!(
                rel <= 1e-4 || diff < 1e-8,
                "{mode:?} idx {idx}: fd {fd} vs analytic {}",
                grad[idx]
            );
            checked += 1;
        }
        assert!(checked > 30);
    }

    #[test]
    fn end_to_end_gradient_matches_fd_linear() {
        check_end_to_end_gradient(EncoderMode::Linear, 1);
    }

    #[test]
    fn end_to_end_gradient_matches_fd_network() {
        check_end_to_end_gradient(EncoderMode::Network, 2);
    }

    #[test]
    fn gradients_are_additive_across_demos() {
        let env = small_env();
        let demo_a = small_demo(&env);
        let demo_b = generate_expert_demo(
            &env,
            State::new(5, 6),
            State::new(2, 1),
            &[2.0, 1.0, 1.0],
            &small_sensor(),
            &ExpertOptions::default(),
        )
        .unwrap();
        let theta = tiny_theta(EncoderMode::Linear, 9);
        let opts = StepOptions {
            temperature: 1.0,
            want_grad: true,
            freeze_map: false,
            jitter: None,
            heuristic: Heuristic::Zero,
        };
        let ga = demo_loss_and_grad(&theta, &env, &demo_a, &opts).unwrap().grad.unwrap();
        let gb = demo_loss_and_grad(&theta, &env, &demo_b, &opts).unwrap().grad.unwrap();
        // The training loop reduces per-demo gradients by plain addition, so
        // the union gradient is the exact elementwise sum.
        let sum: Vec<f64> = ga.iter().zip(&gb).map(|(a, b)| a + b).collect();
        let ga2 = demo_loss_and_grad(&theta, &env, &demo_a, &opts).unwrap().grad.unwrap();
        assert_eq!(ga, ga2);
        assert!(sum.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_learning_rate_leaves_theta_unchanged() {
        let env = small_env();
        let dataset = vec![DemoItem {
            env: env.clone(),
            demo: small_demo(&env),
        }];
        let theta0 = tiny_theta(EncoderMode::Linear, 4);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            optimizer: OptimizerKind::Sgd,
            max_epochs: 3,
            threads: 1,
            ..TrainConfig::default()
        };
        let result = train(&dataset, theta0.clone(), &cfg).unwrap();
        assert_eq!(result.theta.to_flat(), theta0.to_flat());
        let nll0 = result.log[0].mean_nll;
        for record in &result.log {
            assert_eq!(record.mean_nll, nll0);
        }
    }

    #[test]
    fn training_is_bitwise_deterministic_across_runs_and_threads() {
        let env = small_env();
        let dataset: Vec<DemoItem> = vec![
            DemoItem {
                env: env.clone(),
                demo: small_demo(&env),
            },
            DemoItem {
                env: env.clone(),
                demo: generate_expert_demo(
                    &env,
                    State::new(5, 6),
                    State::new(2, 1),
                    &[2.0, 1.0, 1.0],
                    &small_sensor(),
                    &ExpertOptions::default(),
                )
                .unwrap(),
            },
        ];
        let mk_cfg = |threads: usize| TrainConfig {
            learning_rate: 0.05,
            max_epochs: 4,
            threads,
            seed: 7,
            ..TrainConfig::default()
        };
        let theta0 = tiny_theta(EncoderMode::Linear, 7);
        let a = train(&dataset, theta0.clone(), &mk_cfg(1)).unwrap();
        let b = train(&dataset, theta0.clone(), &mk_cfg(1)).unwrap();
        assert_eq!(a.theta.to_flat(), b.theta.to_flat());
        // Ordered reduction keeps parallel runs bitwise identical too.
        let c = train(&dataset, theta0, &mk_cfg(2)).unwrap();
        assert_eq!(a.theta.to_flat(), c.theta.to_flat());
    }

    #[test]
    fn penalizing_a_path_cell_lowers_that_controls_probability() {
        let env = small_env();
        let demo = small_demo(&env);
        let theta = tiny_theta(EncoderMode::Linear, 12);
        let blocked = env.blocked_mask();
        let step = &demo.steps[0];
        let mut grid = LogOddsGrid::new(8, 8, 2, None);
        let cloud = crate::gridworld::SemanticPointCloud {
            points: step.points.clone(),
        };
        apply_scan(&mut grid, step.state, &cloud, &theta.map);
        let base_opts = StepOptions::eval(1.0);
        let StepEval::Evaluated(base) = evaluate_step(
            &theta, &env, &blocked, demo.goal, step.state, step.control, &grid, &base_opts,
        )
        .unwrap() else {
            panic!("step skipped");
        };
        // Find a control whose first trajectory cell is its own: the cell
        // f(x, u) reached only by taking u.
        let argmax = base.policy.argmax();
        let mut probe = None;
        for u in Control::all() {
            if !base.q_star[u.id()].is_finite() || u == argmax {
                continue;
            }
            if let Motion::Moved(dest) = motion_model(step.state, u, &env) {
                probe = Some((u, env.index(dest)));
                break;
            }
        }
        let (u_probe, cell) = probe.unwrap();
        let mut jitter = vec![0.0; 64];
        jitter[cell] = 0.75;
        let bump_opts = StepOptions {
            temperature: 1.0,
            want_grad: false,
            freeze_map: false,
            jitter: Some(&jitter),
            heuristic: Heuristic::Zero,
        };
        let StepEval::Evaluated(bumped) = evaluate_step(
            &theta, &env, &blocked, demo.goal, step.state, step.control, &grid, &bump_opts,
        )
        .unwrap() else {
            panic!("step skipped");
        };
        assert!(
            bumped.policy.prob(u_probe) < base.policy.prob(u_probe),
            "penalizing the entry cell must lower pi({})",
            u_probe.id()
        );
        assert_ne!(bumped.policy.argmax(), u_probe);
    }

    #[test]
    fn rollout_at_goal_is_immediate_success() {
        let env = small_env();
        let theta = tiny_theta(EncoderMode::Linear, 3);
        let result = rollout(
            &env,
            State::new(3, 3),
            State::new(3, 3),
            &theta,
            &small_sensor(),
            10,
            1.0,
        )
        .unwrap();
        assert_eq!(result.outcome, RolloutOutcome::ReachedGoal);
        assert_eq!(result.steps, 0);
        assert_eq!(result.states, vec![State::new(3, 3)]);
    }

    #[test]
    fn unreachable_goal_times_out_with_fallback_steps() {
        let mut env = small_env();
        // Enclose the goal corner cell (7,7) with obstacles.
        for &(i, j) in &[(6, 7), (6, 6), (7, 6)] {
            env.labels[j * 8 + i] = 2;
        }
        env.labels[7 * 8 + 7] = 0;
        let theta = tiny_theta(EncoderMode::Linear, 5);
        let result = rollout(
            &env,
            State::new(1, 1),
            State::new(7, 7),
            &theta,
            &small_sensor(),
            6,
            1.0,
        )
        .unwrap();
        assert_eq!(result.outcome, RolloutOutcome::Timeout);
        assert_eq!(result.steps, 6);
        assert_eq!(result.fallback_steps, 6);
    }

    #[test]
    fn step_loss_and_grad_matches_demo_accumulation() {
        let env = small_env();
        let demo = small_demo(&env);
        let theta = tiny_theta(EncoderMode::Linear, 21);
        let opts = StepOptions {
            temperature: 1.0,
            want_grad: true,
            freeze_map: false,
            jitter: None,
            heuristic: Heuristic::Zero,
        };
        // Accumulate per-step gradients through the public per-step entry
        // point and compare with the fused per-demo path.
        let mut grid = LogOddsGrid::new(8, 8, 2, None);
        let mut tapes = Vec::new();
        let mut sum = vec![0.0; theta.flat_len()];
        let mut nll_sum = 0.0;
        for step in &demo.steps {
            let cloud = crate::gridworld::SemanticPointCloud {
                points: step.points.clone(),
            };
            tapes.push(apply_scan(&mut grid, step.state, &cloud, &theta.map));
            let (eval, grad) = step_loss_and_grad(
                &theta,
                &env,
                demo.goal,
                step.state,
                step.control,
                &grid,
                &tapes,
                &opts,
            )
            .unwrap();
            if let StepEval::Evaluated(outcome) = eval {
                nll_sum += outcome.nll;
            }
            for (s, g) in sum.iter_mut().zip(&grad.unwrap()) {
                *s += *g;
            }
        }
        let fused = demo_loss_and_grad(&theta, &env, &demo, &opts).unwrap();
        assert!((nll_sum - fused.nll_sum).abs() < 1e-12);
        let fused_grad = fused.grad.unwrap();
        for (a, b) in sum.iter().zip(&fused_grad) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}
