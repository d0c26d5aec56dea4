//! Synthetic grid environments: deterministic 8-connected motion, semantic
//! range sensing, and expert demonstration generation.
//!
//! Cell coordinates are `(i, j)` with `0 <= i < width`, `0 <= j < height`.
//! Continuous positions are in cell units: cell `(i, j)` spans
//! `[i, i+1) x [j, j+1)` and has center `(i + 0.5, j + 0.5)`.

mod expert;
mod generate;
pub mod io;
mod ray;
mod sensor;

pub use expert::{generate_expert_demo, ExpertError, ExpertOptions};
pub use generate::{
    generate_environment, sample_road_cell, GenError, GeneratorParams, CLASS_FREE, CLASS_OBSTACLE,
    CLASS_ROAD, CLASS_SIDEWALK,
};
pub use ray::GridRay;
pub use sensor::{simulate_scan, soft_label};

use serde::{Deserialize, Serialize};

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Grid cell location of the robot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub i: i32,
    pub j: i32,
}

impl State {
    pub fn new(i: i32, j: i32) -> Self {
        State { i, j }
    }

    /// Center of the cell in continuous cell units.
    pub fn center(&self) -> (f64, f64) {
        (self.i as f64 + 0.5, self.j as f64 + 0.5)
    }
}

/// One of the 8 moves to a neighbor cell, identified by `0..8`.
///
/// Ids enumerate directions counterclockwise from east:
/// 0=E, 1=NE, 2=N, 3=NW, 4=W, 5=SW, 6=S, 7=SE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Control(pub u8);

const CONTROL_DELTAS: [(i32, i32); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

const CONTROL_NAMES: [&str; 8] = ["E", "NE", "N", "NW", "W", "SW", "S", "SE"];

impl Control {
    pub const COUNT: usize = 8;

    pub fn all() -> impl Iterator<Item = Control> {
        (0..8u8).map(Control)
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn delta(self) -> (i32, i32) {
        CONTROL_DELTAS[self.id()]
    }

    /// Euclidean move length in cells: 1 for axis moves, sqrt(2) for diagonals.
    pub fn length(self) -> f64 {
        let (di, dj) = self.delta();
        if di != 0 && dj != 0 {
            SQRT_2
        } else {
            1.0
        }
    }

    pub fn name(self) -> &'static str {
        CONTROL_NAMES[self.id()]
    }
}

/// Outcome of applying a control: the successor cell, or `Blocked` when the
/// target is out of bounds or an obstacle. `Blocked` is a value, not an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    Moved(State),
    Blocked,
}

impl Motion {
    pub fn moved(self) -> Option<State> {
        match self {
            Motion::Moved(s) => Some(s),
            Motion::Blocked => None,
        }
    }
}

/// Deterministic motion model over the 8-connected grid.
pub fn motion_model(x: State, u: Control, env: &EnvironmentSpec) -> Motion {
    let (di, dj) = u.delta();
    let target = State::new(x.i + di, x.j + dj);
    if !env.in_bounds(target) || env.is_obstacle(target) {
        Motion::Blocked
    } else {
        Motion::Moved(target)
    }
}

/// Ground-truth environment: per-cell semantic labels over classes `0..=K`,
/// where class 0 is free space. Obstacle classes block motion and terminate
/// sensor rays; ray-visible classes return sensor points without blocking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub id: u32,
    pub width: usize,
    pub height: usize,
    /// Meters per cell. All library distances are in cell units.
    pub resolution: f64,
    /// Number of semantic classes K (labels range over `0..=K`).
    pub num_classes: usize,
    /// Row-major per-cell true class ids, `labels[j * width + i]`.
    pub labels: Vec<u8>,
    pub obstacle_classes: Vec<u8>,
    pub ray_visible_classes: Vec<u8>,
    pub seed: u64,
}

impl EnvironmentSpec {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn in_bounds(&self, s: State) -> bool {
        s.i >= 0 && s.j >= 0 && (s.i as usize) < self.width && (s.j as usize) < self.height
    }

    pub fn index(&self, s: State) -> usize {
        debug_assert!(self.in_bounds(s));
        s.j as usize * self.width + s.i as usize
    }

    pub fn state_of(&self, index: usize) -> State {
        State::new((index % self.width) as i32, (index / self.width) as i32)
    }

    pub fn label(&self, s: State) -> u8 {
        self.labels[self.index(s)]
    }

    pub fn is_obstacle(&self, s: State) -> bool {
        self.obstacle_classes.contains(&self.label(s))
    }

    pub fn is_obstacle_class(&self, class: u8) -> bool {
        self.obstacle_classes.contains(&class)
    }

    /// Classes that terminate or return sensor rays: obstacles plus any
    /// class flagged ray-visible.
    pub fn is_sensor_visible(&self, class: u8) -> bool {
        self.obstacle_classes.contains(&class) || self.ray_visible_classes.contains(&class)
    }

    /// Row-major mask of cells that block motion.
    pub fn blocked_mask(&self) -> Vec<bool> {
        self.labels
            .iter()
            .map(|&c| self.obstacle_classes.contains(&c))
            .collect()
    }

    /// Checks the structural invariants: label count and range, and the
    /// existence of a traversable connected component of at least 2 cells.
    pub fn validate(&self) -> Result<(), String> {
        if self.labels.len() != self.cells() {
            return Err(format!(
                "label count {} does not match {}x{} grid",
                self.labels.len(),
                self.width,
                self.height
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&c| c as usize > self.num_classes) {
            return Err(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            ));
        }
        let largest = self.largest_free_component();
        if largest < 2 {
            return Err(format!(
                "largest traversable component has {largest} cells, need at least 2"
            ));
        }
        Ok(())
    }

    /// Size of the largest 8-connected component of non-obstacle cells.
    pub fn largest_free_component(&self) -> usize {
        let blocked = self.blocked_mask();
        let mut seen = vec![false; self.cells()];
        let mut best = 0usize;
        for start in 0..self.cells() {
            if blocked[start] || seen[start] {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let mut size = 0usize;
            while let Some(idx) = stack.pop() {
                size += 1;
                let s = self.state_of(idx);
                for u in Control::all() {
                    if let Motion::Moved(n) = motion_model(s, u, self) {
                        let ni = self.index(n);
                        if !seen[ni] {
                            seen[ni] = true;
                            stack.push(ni);
                        }
                    }
                }
            }
            best = best.max(size);
        }
        best
    }

    /// Whether `a` and `b` are in the same traversable component.
    pub fn connected(&self, a: State, b: State) -> bool {
        if !self.in_bounds(a) || !self.in_bounds(b) || self.is_obstacle(a) || self.is_obstacle(b) {
            return false;
        }
        let mut seen = vec![false; self.cells()];
        let mut stack = vec![self.index(a)];
        seen[self.index(a)] = true;
        while let Some(idx) = stack.pop() {
            if idx == self.index(b) {
                return true;
            }
            let s = self.state_of(idx);
            for u in Control::all() {
                if let Motion::Moved(n) = motion_model(s, u, self) {
                    let ni = self.index(n);
                    if !seen[ni] {
                        seen[ni] = true;
                        stack.push(ni);
                    }
                }
            }
        }
        false
    }
}

/// Range sensor configuration. Rays are cast evenly over 360 degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorParams {
    pub num_rays: usize,
    /// Maximum range in cell units.
    pub max_range: f64,
    /// Label noise: each returned point carries probability `1 - noise` on
    /// the true class with the remainder spread over the other classes.
    pub label_noise: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        SensorParams {
            num_rays: 180,
            max_range: 20.0,
            label_noise: 0.1,
        }
    }
}

/// One sensor return: a position in cell units and a class-likelihood vector
/// over classes `1..=K` (class 0 is never observed directly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    /// Position in continuous cell units relative to the map origin.
    pub p: [f64; 2],
    /// Likelihood over classes `1..=K`; nonnegative, sums to 1.
    pub y: Vec<f64>,
}

/// One scan: the set of labeled ray returns observed from a single state.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SemanticPointCloud {
    pub points: Vec<LabeledPoint>,
}

impl SemanticPointCloud {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }
}

/// One expert step: the state, the demonstrated control, and the scan
/// observed at that state before moving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub t: usize,
    pub state: State,
    pub control: Control,
    pub points: Vec<LabeledPoint>,
}

/// An expert trajectory with its observations. Ground truth stays in the
/// referenced `EnvironmentSpec`; only `env_id` links back to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub env_id: u32,
    pub start: State,
    pub goal: State,
    pub steps: Vec<DemoStep>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// The visited state sequence including start and goal.
    pub fn states(&self) -> Vec<State> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        out.push(self.start);
        for step in &self.steps {
            let (di, dj) = step.control.delta();
            out.push(State::new(step.state.i + di, step.state.j + dj));
        }
        out
    }

    /// Checks the demonstration invariants against its environment: the
    /// replayed controls reproduce the state sequence, no step enters an
    /// obstacle, and the final state equals the goal.
    pub fn validate(&self, env: &EnvironmentSpec) -> Result<(), String> {
        let mut x = self.start;
        if !env.in_bounds(x) || env.is_obstacle(x) {
            return Err(format!("start {:?} is not a valid free cell", self.start));
        }
        for (k, step) in self.steps.iter().enumerate() {
            if step.state != x {
                return Err(format!(
                    "step {k}: recorded state {:?} does not match replayed state {:?}",
                    step.state, x
                ));
            }
            match motion_model(x, step.control, env) {
                Motion::Moved(next) => x = next,
                Motion::Blocked => {
                    return Err(format!(
                        "step {k}: control {} from {:?} is blocked",
                        step.control.name(),
                        step.state
                    ));
                }
            }
            for point in &step.points {
                let sum: f64 = point.y.iter().sum();
                if point.y.len() != env.num_classes
                    || point.y.iter().any(|&v| v < 0.0)
                    || (sum - 1.0).abs() > 1e-9
                {
                    return Err(format!("step {k}: malformed class likelihood vector"));
                }
            }
        }
        if x != self.goal {
            return Err(format!(
                "final state {:?} does not equal goal {:?}",
                x, self.goal
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_env(width: usize, height: usize) -> EnvironmentSpec {
        EnvironmentSpec {
            id: 0,
            width,
            height,
            resolution: 1.0,
            num_classes: 3,
            labels: vec![0; width * height],
            obstacle_classes: vec![3],
            ray_visible_classes: vec![2],
            seed: 0,
        }
    }

    #[test]
    fn east_move_on_open_map() {
        let env = open_env(8, 8);
        assert_eq!(
            motion_model(State::new(3, 3), Control(0), &env),
            Motion::Moved(State::new(4, 3))
        );
    }

    #[test]
    fn west_from_origin_is_blocked() {
        let env = open_env(8, 8);
        assert_eq!(motion_model(State::new(0, 0), Control(4), &env), Motion::Blocked);
    }

    #[test]
    fn obstacle_target_is_blocked() {
        let mut env = open_env(8, 8);
        let idx = env.index(State::new(3, 3));
        env.labels[idx] = 3;
        assert_eq!(motion_model(State::new(2, 2), Control(1), &env), Motion::Blocked);
    }

    #[test]
    fn control_lengths() {
        let lengths: Vec<f64> = Control::all().map(|u| u.length()).collect();
        for (id, len) in lengths.iter().enumerate() {
            if id % 2 == 0 {
                assert_eq!(*len, 1.0);
            } else {
                assert_eq!(*len, SQRT_2);
            }
        }
    }

    #[test]
    fn validate_rejects_bad_labels() {
        let mut env = open_env(8, 8);
        env.labels[5] = 9;
        assert!(env.validate().is_err());
    }

    #[test]
    fn validate_requires_free_component() {
        let mut env = open_env(8, 8);
        env.labels = vec![3; 64];
        assert!(env.validate().is_err());
        env.labels[0] = 0;
        assert!(env.validate().is_err());
        env.labels[1] = 0;
        assert!(env.validate().is_ok());
    }
}
