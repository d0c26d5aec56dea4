//! Planar semantic range sensor over the label grid.
//!
//! Rays are cast from the cell center, evenly spaced over 360 degrees. A ray
//! returns a point at the first sensor-visible cell it crosses within range:
//! the point sits on the ray's entry into that cell and carries a likelihood
//! vector concentrated on the cell's true class. Obstacle cells terminate the
//! ray; so do ray-visible cells (visibility ends there either way). Rays that
//! cross nothing visible return no point.

use super::{EnvironmentSpec, GridRay, LabeledPoint, SemanticPointCloud, SensorParams, State};

/// Likelihood vector over classes `1..=K` for a true class `c >= 1`:
/// probability `1 - noise` on the truth, `noise` spread over the others.
pub fn soft_label(class: u8, num_classes: usize, noise: f64) -> Vec<f64> {
    debug_assert!(class >= 1 && class as usize <= num_classes);
    let mut y = if num_classes > 1 {
        vec![noise / (num_classes as f64 - 1.0); num_classes]
    } else {
        vec![0.0; num_classes]
    };
    y[class as usize - 1] = 1.0 - noise;
    y
}

/// Simulates one scan from state `x`. Deterministic: the label noise is a
/// fixed smoothing of the true class, not a sample.
pub fn simulate_scan(x: State, env: &EnvironmentSpec, sensor: &SensorParams) -> SemanticPointCloud {
    let origin = x.center();
    let mut points = Vec::new();
    for r in 0..sensor.num_rays {
        let angle = 2.0 * std::f64::consts::PI * (r as f64) / (sensor.num_rays as f64);
        let dir = (angle.cos(), angle.sin());
        for (i, j, t_entry) in GridRay::new(origin, dir, sensor.max_range) {
            let cell = State::new(i, j);
            if !env.in_bounds(cell) {
                break;
            }
            let class = env.label(cell);
            if env.is_sensor_visible(class) {
                points.push(LabeledPoint {
                    p: [origin.0 + dir.0 * t_entry, origin.1 + dir.1 * t_entry],
                    y: soft_label(class, env.num_classes, sensor.label_noise),
                });
                break;
            }
        }
    }
    SemanticPointCloud { points }
}
