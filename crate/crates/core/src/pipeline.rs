//! End-to-end entry points behind the CLI: dataset generation, training to a
//! checkpoint, checkpoint evaluation, and single rollouts with map and cost
//! exports.

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::cost_model::{cost_forward, ArchConfig};
use crate::gridworld::io::{self, DatasetError, DemoItem};
use crate::gridworld::{
    generate_environment, generate_expert_demo, sample_road_cell, ExpertError, ExpertOptions,
    GenError, GeneratorParams, SensorParams,
};
use crate::learner::{
    rollout, train, LearnError, RolloutResult, ThetaParams, TrainConfig, TrainResult,
};
use crate::metrics::{evaluate, EvalOptions, EvalReport};
use crate::semantic_map::{apply_scan, EncoderMode, LogOddsGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Dataset generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Per-class traversal cost for the expert (indexed by class id).
    pub true_cost: Vec<f64>,
    /// Minimum Euclidean start-goal separation in cells.
    pub min_separation: f64,
    pub road_width: usize,
    pub sidewalk_width: usize,
    pub h_roads: usize,
    pub v_roads: usize,
    pub obstacle_fraction_min: f64,
    pub obstacle_fraction_max: f64,
    pub num_rays: usize,
    pub max_range: f64,
    pub label_noise: f64,
    /// Optional Boltzmann temperature for a suboptimal expert.
    pub expert_temperature: Option<f64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 10,
            width: 32,
            height: 32,
            num_classes: 3,
            seed: 0,
            true_cost: vec![5.0, 1.0, 5.0, 1.0],
            min_separation: 12.0,
            road_width: 1,
            sidewalk_width: 2,
            h_roads: 2,
            v_roads: 2,
            obstacle_fraction_min: 0.05,
            obstacle_fraction_max: 0.25,
            num_rays: 180,
            max_range: 20.0,
            label_noise: 0.1,
            expert_temperature: None,
        }
    }
}

impl GenConfig {
    pub fn generator_params(&self) -> GeneratorParams {
        GeneratorParams {
            road_width: self.road_width,
            sidewalk_width: self.sidewalk_width,
            h_roads: self.h_roads,
            v_roads: self.v_roads,
            obstacle_fraction: (self.obstacle_fraction_min, self.obstacle_fraction_max),
            ..GeneratorParams::default()
        }
    }

    pub fn sensor(&self) -> SensorParams {
        SensorParams {
            num_rays: self.num_rays,
            max_range: self.max_range,
            label_noise: self.label_noise,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSummary {
    pub environments: usize,
    pub demos: usize,
    pub total_steps: usize,
    pub out_dir: PathBuf,
}

/// Generates `count` environments with one expert demonstration each and
/// writes them to `out_dir`. Deterministic for a given config.
pub fn gen_dataset(out_dir: &Path, cfg: &GenConfig) -> Result<GenSummary, PipelineError> {
    if cfg.true_cost.len() != cfg.num_classes + 1 {
        return Err(PipelineError::Config(format!(
            "true_cost needs {} entries (classes 0..={}), got {}",
            cfg.num_classes + 1,
            cfg.num_classes,
            cfg.true_cost.len()
        )));
    }
    if cfg.true_cost.iter().any(|&c| c <= 0.0) {
        return Err(PipelineError::Config("true_cost entries must be positive".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let params = cfg.generator_params();
    let sensor = cfg.sensor();
    let mut total_steps = 0usize;
    for id in 0..cfg.count as u32 {
        let env_seed = cfg.seed.wrapping_add(id as u64);
        let mut env = generate_environment(cfg.width, cfg.height, cfg.num_classes, env_seed, &params)?;
        env.id = id;
        let mut rng = ChaCha8Rng::seed_from_u64(env_seed ^ 0x5EED_5EED);
        let demo = loop {
            let (Some(start), Some(goal)) = (
                sample_road_cell(&env, &mut rng),
                sample_road_cell(&env, &mut rng),
            ) else {
                return Err(PipelineError::Config("environment has no road cells".into()));
            };
            let (di, dj) = ((start.i - goal.i) as f64, (start.j - goal.j) as f64);
            if (di * di + dj * dj).sqrt() < cfg.min_separation || !env.connected(start, goal) {
                continue;
            }
            match generate_expert_demo(
                &env,
                start,
                goal,
                &cfg.true_cost,
                &sensor,
                &ExpertOptions {
                    temperature: cfg.expert_temperature,
                    seed: env_seed,
                    ..ExpertOptions::default()
                },
            ) {
                Ok(demo) => break demo,
                Err(ExpertError::Unreachable { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        };
        total_steps += demo.len();
        io::write_env(out_dir, &env)?;
        io::write_demo(out_dir, id, &demo)?;
    }
    Ok(GenSummary {
        environments: cfg.count,
        demos: cfg.count,
        total_steps,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Encoder settings shared by training and evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub epsilon: f64,
    pub endpoint_only: bool,
    pub lambda_free: f64,
    pub hidden: usize,
    pub kernel: usize,
    pub widths: [usize; 2],
    pub min_cost: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            mode: EncoderMode::Linear,
            epsilon: 1.0,
            endpoint_only: true,
            lambda_free: 0.3,
            hidden: 16,
            kernel: 3,
            widths: [8, 16],
            min_cost: 1e-3,
        }
    }
}

impl EncoderConfig {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            kernel: self.kernel,
            widths: self.widths,
            min_cost: self.min_cost,
        }
    }

    pub fn build_theta(&self, seed: u64, num_classes: usize) -> ThetaParams {
        let mut theta = ThetaParams::init(seed, num_classes, self.mode, self.arch());
        theta.map.epsilon = self.epsilon;
        theta.map.endpoint_only = self.endpoint_only;
        theta.map.lambda_free = self.lambda_free;
        if self.hidden != theta.map.net.hidden {
            theta.map.net = crate::semantic_map::MlpParams::init(
                seed.wrapping_mul(0x9E37_79B9),
                num_classes,
                self.hidden,
            );
        }
        theta
    }
}

#[derive(Debug)]
pub struct TrainRunOutcome {
    pub result: TrainResult,
    pub checkpoint: PathBuf,
    pub log_path: Option<PathBuf>,
}

/// Loads a dataset, trains from a fresh initialization, and writes the
/// checkpoint plus a line-delimited training log.
pub fn train_run(
    dataset_dir: &Path,
    checkpoint_out: &Path,
    log_out: Option<&Path>,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainRunOutcome, PipelineError> {
    let dataset = io::load_dataset(dataset_dir)?;
    let num_classes = dataset
        .first()
        .map(|item| item.env.num_classes)
        .ok_or_else(|| PipelineError::Config("empty dataset".into()))?;
    let theta0 = encoder.build_theta(cfg.seed, num_classes);
    let result = train(&dataset, theta0, cfg)?;
    save_checkpoint(checkpoint_out, &result.theta)?;
    if let Some(log_path) = log_out {
        let mut w = fs::File::create(log_path).map_err(io_err(log_path))?;
        for record in &result.log {
            let line = serde_json::to_string(record).expect("record serializes");
            writeln!(w, "{line}").map_err(io_err(log_path))?;
        }
    }
    Ok(TrainRunOutcome {
        result,
        checkpoint: checkpoint_out.to_path_buf(),
        log_path: log_out.map(Path::to_path_buf),
    })
}

/// Loads a checkpoint and dataset and computes the four metrics; optionally
/// writes the machine-readable report.
pub fn eval_run(
    dataset_dir: &Path,
    checkpoint: &Path,
    report_out: Option<&Path>,
    opts: &EvalOptions,
) -> Result<EvalReport, PipelineError> {
    let dataset = io::load_dataset(dataset_dir)?;
    let theta = load_checkpoint(checkpoint)?;
    let report = evaluate(&dataset, &theta, opts)?;
    if let Some(path) = report_out {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(path, json).map_err(io_err(path))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutRunReport {
    pub outcome: crate::learner::RolloutOutcome,
    pub steps: usize,
    pub expert_steps: usize,
    pub mhd_to_expert: f64,
}

/// Rolls out the learned policy on one dataset item, writing the trajectory
/// (JSONL) and, when `export_dir` is set, per-step posterior and cost-field
/// CSV grids for plotting.
pub fn rollout_run(
    dataset_dir: &Path,
    demo_id: u32,
    checkpoint: &Path,
    trajectory_out: &Path,
    export_dir: Option<&Path>,
    opts: &EvalOptions,
) -> Result<RolloutRunReport, PipelineError> {
    let env = io::read_env(&io::env_path(dataset_dir, demo_id))?;
    let demo = io::read_demo(&io::demo_path(dataset_dir, demo_id))?;
    let theta = load_checkpoint(checkpoint)?;
    let budget = (opts.success_factor * demo.len()).max(1);
    let result: RolloutResult = rollout(
        &env,
        demo.start,
        demo.goal,
        &theta,
        &opts.sensor,
        budget,
        opts.temperature,
    )?;

    let mut w = fs::File::create(trajectory_out).map_err(io_err(trajectory_out))?;
    for (t, state) in result.states.iter().enumerate() {
        let control = result.controls.get(t).copied();
        let line = serde_json::json!({ "t": t, "state": state, "control": control });
        writeln!(w, "{line}").map_err(io_err(trajectory_out))?;
    }
    let summary = RolloutRunReport {
        outcome: result.outcome,
        steps: result.steps,
        expert_steps: demo.len(),
        mhd_to_expert: crate::metrics::mhd(&result.states, &demo.states()),
    };
    let line = serde_json::json!({ "outcome": summary });
    writeln!(w, "{line}").map_err(io_err(trajectory_out))?;

    if let Some(dir) = export_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        export_rollout_grids(dir, &env, &theta, &result, &opts.sensor)?;
    }
    Ok(summary)
}

/// Replays the rollout's scans, writing the posterior CSVs and the cost grid
/// at each step.
fn export_rollout_grids(
    dir: &Path,
    env: &crate::gridworld::EnvironmentSpec,
    theta: &ThetaParams,
    result: &RolloutResult,
    sensor: &SensorParams,
) -> Result<(), PipelineError> {
    let mut grid = LogOddsGrid::new(env.width, env.height, env.num_classes, None);
    // The ground-truth class grid once, for side-by-side plots.
    let truth_path = dir.join("truth_classes.csv");
    let mut w = fs::File::create(&truth_path).map_err(io_err(&truth_path))?;
    for j in 0..env.height {
        let row: Vec<String> = (0..env.width)
            .map(|i| env.labels[j * env.width + i].to_string())
            .collect();
        writeln!(w, "{}", row.join(",")).map_err(io_err(&truth_path))?;
    }
    for (t, state) in result.states.iter().enumerate() {
        let cloud = crate::gridworld::simulate_scan(*state, env, sensor);
        apply_scan(&mut grid, *state, &cloud, &theta.map);
        let prefix = format!("step{t:03}");
        grid.write_posterior_csvs(dir, &prefix).map_err(io_err(dir))?;
        let posterior = grid.posterior();
        let (cell_cost, _) = cost_forward(&theta.cost, &posterior, env.width, env.height)
            .map_err(LearnError::from)?;
        let cost_path = dir.join(format!("{prefix}_cost.csv"));
        let mut w = fs::File::create(&cost_path).map_err(io_err(&cost_path))?;
        for j in 0..env.height {
            let row: Vec<String> = (0..env.width)
                .map(|i| format!("{:?}", cell_cost[j * env.width + i]))
                .collect();
            writeln!(w, "{}", row.join(",")).map_err(io_err(&cost_path))?;
        }
    }
    Ok(())
}

/// Validates a dataset directory; returns the report of violations.
pub fn validate_run(dataset_dir: &Path) -> Result<io::ValidationReport, PipelineError> {
    Ok(io::validate_dataset(dataset_dir)?)
}

/// Loads a dataset directory (re-exported for the CLI).
pub fn load_dataset(dataset_dir: &Path) -> Result<Vec<DemoItem>, PipelineError> {
    Ok(io::load_dataset(dataset_dir)?)
}

/// Convenience for tests: generate, train, evaluate in one pass, returning
/// the eval report and checkpoint bytes.
pub fn gen_train_eval(
    work_dir: &Path,
    gen_cfg: &GenConfig,
    encoder: &EncoderConfig,
    train_cfg: &TrainConfig,
    eval_opts: &EvalOptions,
) -> Result<(EvalReport, Vec<u8>, Vec<u8>), PipelineError> {
    let data_dir = work_dir.join("data");
    gen_dataset(&data_dir, gen_cfg)?;
    let ckpt = work_dir.join("model.ckpt");
    let report_path = work_dir.join("report.json");
    train_run(&data_dir, &ckpt, None, encoder, train_cfg)?;
    let report = eval_run(&data_dir, &ckpt, Some(&report_path), eval_opts)?;
    let ckpt_bytes = fs::read(&ckpt).map_err(io_err(&ckpt))?;
    let report_bytes = fs::read(&report_path).map_err(io_err(&report_path))?;
    Ok((report, ckpt_bytes, report_bytes))
}
