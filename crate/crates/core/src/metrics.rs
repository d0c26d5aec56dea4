//! Evaluation metrics over a test set: negative log-likelihood, control
//! accuracy, trajectory success rate, and the Modified Hausdorff Distance.

use crate::gridworld::io::DemoItem;
use crate::gridworld::{Control, SensorParams, State};
use crate::learner::{
    demo_loss_and_grad, rollout, LearnError, RolloutOutcome, RolloutResult, StepOptions,
    ThetaParams,
};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Aggregate metrics plus the per-demonstration breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll: f64,
    pub acc: f64,
    pub traj_succ_rate: f64,
    pub mhd: f64,
    pub demos: Vec<DemoReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoReport {
    pub env_id: u32,
    pub nll: f64,
    pub acc: f64,
    pub success: bool,
    pub mhd: f64,
    pub expert_steps: usize,
    pub rollout_steps: usize,
    pub outcome: RolloutOutcome,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric            value")?;
        writeln!(f, "----------------  --------")?;
        writeln!(f, "NLL               {:.4}", self.nll)?;
        writeln!(f, "Acc               {:.1}%", 100.0 * self.acc)?;
        writeln!(f, "Traj. Succ. Rate  {:.1}%", 100.0 * self.traj_succ_rate)?;
        writeln!(f, "MHD               {:.3}", self.mhd)?;
        writeln!(f, "demos             {}", self.demos.len())
    }
}

/// Mean negative log-likelihood of the expert controls under per-step
/// policies: `-(1 / sum T_n) * sum log pi(u*)`.
pub fn nll<I: IntoIterator<Item = (f64, Control)>>(step_policies: I) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (p_star, _) in step_policies {
        total -= p_star.ln();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Fraction of steps whose argmax control (ties to the lowest id) matches
/// the expert control.
pub fn accuracy<I: IntoIterator<Item = ([f64; 8], Control)>>(step_policies: I) -> f64 {
    let mut matches = 0usize;
    let mut count = 0usize;
    for (probs, u_star) in step_policies {
        let mut best = 0usize;
        for u in 1..8 {
            if probs[u] > probs[best] {
                best = u;
            }
        }
        if best == u_star.id() {
            matches += 1;
        }
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        matches as f64 / count as f64
    }
}

/// Whether a rollout succeeded against its expert reference: reached the
/// goal within twice the expert step count (inclusive) without a collision.
pub fn rollout_success(outcome: RolloutOutcome, rollout_steps: usize, expert_steps: usize) -> bool {
    outcome == RolloutOutcome::ReachedGoal && rollout_steps <= 2 * expert_steps
}

fn min_dist_to(trajectory: &[State], s: State) -> f64 {
    trajectory
        .iter()
        .map(|t| {
            let (di, dj) = ((t.i - s.i) as f64, (t.j - s.j) as f64);
            (di * di + dj * dj).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Modified Hausdorff Distance between two non-empty state sequences:
/// the larger of the two directed mean nearest-point distances.
pub fn mhd(a: &[State], b: &[State]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "mhd needs non-empty trajectories");
    let d_ab = a.iter().map(|&s| min_dist_to(b, s)).sum::<f64>() / a.len() as f64;
    let d_ba = b.iter().map(|&s| min_dist_to(a, s)).sum::<f64>() / b.len() as f64;
    d_ab.max(d_ba)
}

/// Evaluation options; `success_factor` is the step-budget multiple of the
/// expert length (2 per the success definition).
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub temperature: f64,
    pub sensor: SensorParams,
    pub success_factor: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            temperature: 1.0,
            sensor: SensorParams::default(),
            success_factor: 2,
        }
    }
}

/// Full evaluation of a parameter set on a test dataset: per-step NLL and
/// accuracy by replaying the recorded observations, plus a fresh rollout per
/// demonstration for success rate and MHD.
pub fn evaluate(
    test_set: &[DemoItem],
    theta: &ThetaParams,
    opts: &EvalOptions,
) -> Result<EvalReport, LearnError> {
    let mut demos = Vec::with_capacity(test_set.len());
    let mut nll_total = 0.0;
    let mut steps_total = 0usize;
    let mut match_total = 0usize;
    let mut successes = 0usize;
    let mut mhd_sum = 0.0;
    for item in test_set {
        let outcome = demo_loss_and_grad(
            theta,
            &item.env,
            &item.demo,
            &StepOptions::eval(opts.temperature),
        )?;
        let expert_steps = item.demo.len();
        let budget = opts.success_factor * expert_steps;
        let roll: RolloutResult = rollout(
            &item.env,
            item.demo.start,
            item.demo.goal,
            theta,
            &opts.sensor,
            budget,
            opts.temperature,
        )?;
        let success = rollout_success(roll.outcome, roll.steps, expert_steps);
        let expert_states = item.demo.states();
        let demo_mhd = mhd(&roll.states, &expert_states);
        demos.push(DemoReport {
            env_id: item.env.id,
            nll: outcome.nll_sum / outcome.steps.max(1) as f64,
            acc: outcome.matches as f64 / outcome.steps.max(1) as f64,
            success,
            mhd: demo_mhd,
            expert_steps,
            rollout_steps: roll.steps,
            outcome: roll.outcome,
        });
        nll_total += outcome.nll_sum;
        steps_total += outcome.steps;
        match_total += outcome.matches;
        if success {
            successes += 1;
        }
        mhd_sum += demo_mhd;
    }
    let n = test_set.len().max(1);
    Ok(EvalReport {
        nll: nll_total / steps_total.max(1) as f64,
        acc: match_total as f64 / steps_total.max(1) as f64,
        traj_succ_rate: successes as f64 / n as f64,
        mhd: mhd_sum / n as f64,
        demos,
    })
}
