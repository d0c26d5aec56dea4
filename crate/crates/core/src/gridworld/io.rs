//! Dataset directory layout: `env_<id>.json` holds an `EnvironmentSpec`,
//! `demo_<id>.jsonl` holds one metadata line followed by one step per line
//! (`t`, state, control id, point list). Floats are decimal text and
//! round-trip exactly at double precision.

use super::{DemoStep, Demonstration, EnvironmentSpec, State};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("dataset directory {0} contains no environments")]
    Empty(PathBuf),
    #[error("demo {id} has no matching environment file")]
    OrphanDemo { id: u32 },
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct DemoMeta {
    env_id: u32,
    start: State,
    goal: State,
}

/// An environment paired with one demonstration recorded in it.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoItem {
    pub env: EnvironmentSpec,
    pub demo: Demonstration,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn env_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("env_{id}.json"))
}

pub fn demo_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("demo_{id}.jsonl"))
}

pub fn write_env(dir: &Path, env: &EnvironmentSpec) -> Result<(), DatasetError> {
    let path = env_path(dir, env.id);
    let json = serde_json::to_string(env).expect("environment serializes");
    fs::write(&path, json).map_err(io_err(&path))
}

pub fn read_env(path: &Path) -> Result<EnvironmentSpec, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_demo(dir: &Path, id: u32, demo: &Demonstration) -> Result<(), DatasetError> {
    let path = demo_path(dir, id);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(file);
    let meta = DemoMeta {
        env_id: demo.env_id,
        start: demo.start,
        goal: demo.goal,
    };
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{}", serde_json::to_string(&meta).unwrap())?;
        for step in &demo.steps {
            writeln!(w, "{}", serde_json::to_string(step).unwrap())?;
        }
        w.flush()
    };
    write().map_err(io_err(&path))
}

pub fn read_demo(path: &Path) -> Result<Demonstration, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let parse_err = |message: String| DatasetError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let meta_line = lines
        .next()
        .ok_or_else(|| parse_err("missing metadata line".into()))?
        .map_err(io_err(path))?;
    let meta: DemoMeta =
        serde_json::from_str(&meta_line).map_err(|e| parse_err(format!("metadata: {e}")))?;
    let mut steps = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let step: DemoStep =
            serde_json::from_str(&line).map_err(|e| parse_err(format!("step {}: {e}", n + 1)))?;
        steps.push(step);
    }
    Ok(Demonstration {
        env_id: meta.env_id,
        start: meta.start,
        goal: meta.goal,
        steps,
    })
}

fn dataset_ids(dir: &Path) -> Result<Vec<u32>, DatasetError> {
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(rest) = name.strip_prefix("env_").and_then(|s| s.strip_suffix(".json")) {
            if let Ok(id) = rest.parse::<u32>() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Loads every `env_<id>.json` / `demo_<id>.jsonl` pair in the directory,
/// sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<DemoItem>, DatasetError> {
    let ids = dataset_ids(dir)?;
    if ids.is_empty() {
        return Err(DatasetError::Empty(dir.to_path_buf()));
    }
    let mut items = Vec::with_capacity(ids.len());
    for id in ids {
        let env = read_env(&env_path(dir, id))?;
        let demo = read_demo(&demo_path(dir, id))?;
        items.push(DemoItem { env, demo });
    }
    Ok(items)
}

/// Result of validating a dataset directory.
#[derive(Debug, Default)]
pub struct ValidationReport {
    pub checked: usize,
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks every pair in the directory against the environment and
/// demonstration invariants, including scan geometry: each point must lie
/// within a plausible sensor range and the per-point likelihoods must be
/// valid distributions.
pub fn validate_dataset(dir: &Path) -> Result<ValidationReport, DatasetError> {
    let items = load_dataset(dir)?;
    let mut report = ValidationReport::default();
    for item in &items {
        report.checked += 1;
        let id = item.env.id;
        if let Err(e) = item.env.validate() {
            report.errors.push(format!("env {id}: {e}"));
        }
        if item.demo.env_id != id {
            report
                .errors
                .push(format!("demo {id}: env_id {} mismatch", item.demo.env_id));
        }
        if let Err(e) = item.demo.validate(&item.env) {
            report.errors.push(format!("demo {id}: {e}"));
        }
        for step in &item.demo.steps {
            let origin = step.state.center();
            for pt in &step.points {
                let (dx, dy) = (pt.p[0] - origin.0, pt.p[1] - origin.1);
                let dist = (dx * dx + dy * dy).sqrt();
                if dist <= 0.0 || !dist.is_finite() {
                    report
                        .errors
                        .push(format!("demo {id} t={}: degenerate point", step.t));
                    continue;
                }
                let nudge = 1e-6 / dist;
                let cell = State::new(
                    (pt.p[0] + dx * nudge).floor() as i32,
                    (pt.p[1] + dy * nudge).floor() as i32,
                );
                if !item.env.in_bounds(cell)
                    || !item.env.is_sensor_visible(item.env.label(cell))
                {
                    report.errors.push(format!(
                        "demo {id} t={}: point {:?} not on a sensor-visible cell",
                        step.t, pt.p
                    ));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{
        generate_environment, generate_expert_demo, sample_road_cell, ExpertOptions,
        GeneratorParams, SensorParams,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn make_item(seed: u64) -> DemoItem {
        // Narrow corridors leave background for the obstacle budget at 16x16.
        let params = GeneratorParams {
            road_width: 2,
            sidewalk_width: 1,
            h_roads: 1,
            v_roads: 1,
            obstacle_fraction: (0.03, 0.3),
            ..GeneratorParams::default()
        };
        let mut env = generate_environment(16, 16, 3, seed, &params).unwrap();
        env.id = seed as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let sensor = SensorParams {
            num_rays: 24,
            max_range: 10.0,
            label_noise: 0.1,
        };
        loop {
            let start = sample_road_cell(&env, &mut rng).unwrap();
            let goal = sample_road_cell(&env, &mut rng).unwrap();
            if start != goal && env.connected(start, goal) {
                let demo = generate_expert_demo(
                    &env,
                    start,
                    goal,
                    &[5.0, 1.0, 5.0, 1.0],
                    &sensor,
                    &ExpertOptions::default(),
                )
                .unwrap();
                return DemoItem { env, demo };
            }
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("semnav_io_test_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let item = make_item(3);
        write_env(&dir, &item.env).unwrap();
        write_demo(&dir, item.env.id, &item.demo).unwrap();
        let loaded = load_dataset(&dir).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].env, item.env);
        assert_eq!(loaded[0].demo, item.demo);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn validator_accepts_generated_data_and_catches_corruption() {
        let dir = std::env::temp_dir().join(format!("semnav_io_val_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let item = make_item(4);
        write_env(&dir, &item.env).unwrap();
        write_demo(&dir, item.env.id, &item.demo).unwrap();
        let report = validate_dataset(&dir).unwrap();
        assert!(report.ok(), "{:?}", report.errors);

        // Corrupt the demo: break the state chain.
        let mut bad = item.demo.clone();
        if bad.steps.len() >= 2 {
            bad.steps[1].state.i += 1;
        }
        write_demo(&dir, item.env.id, &bad).unwrap();
        let report = validate_dataset(&dir).unwrap();
        assert!(!report.ok());
        fs::remove_dir_all(&dir).unwrap();
    }
}
