//! Procedural corridor/intersection environments.
//!
//! Layouts place full-span road strips (class 1) flanked by sidewalk strips
//! (class 2), scatter blocking obstacle rectangles (class 3) on the remaining
//! background, and optionally add small patches of extra ray-visible classes.
//! Background cells stay free space (class 0).

use super::{EnvironmentSpec, State};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const CLASS_FREE: u8 = 0;
pub const CLASS_ROAD: u8 = 1;
pub const CLASS_SIDEWALK: u8 = 2;
pub const CLASS_OBSTACLE: u8 = 3;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("grid must be at least 8x8, got {0}x{1}")]
    GridTooSmall(usize, usize),
    #[error("need at least 2 semantic classes, got {0}")]
    TooFewClasses(usize),
    #[error("invalid obstacle fraction bounds [{0}, {1}]")]
    BadObstacleBounds(f64, f64),
    #[error("could not place road strips for a {0}x{1} grid")]
    RoadPlacement(usize, usize),
    #[error("could not reach obstacle fraction {target:.3} (placed {placed:.3})")]
    ObstacleBudget { target: f64, placed: f64 },
    #[error("generated environment failed validation: {0}")]
    Invalid(String),
}

/// Layout knobs for `generate_environment`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub road_width: usize,
    pub sidewalk_width: usize,
    /// Number of horizontal / vertical road strips.
    pub h_roads: usize,
    pub v_roads: usize,
    /// Inclusive bounds on the fraction of obstacle cells.
    pub obstacle_fraction: (f64, f64),
    /// Side-length range for obstacle rectangles.
    pub block_size: (usize, usize),
    /// Non-obstacle classes whose cells return sensor points.
    pub ray_visible_classes: Vec<u8>,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            // Single-lane roads keep expert paths unambiguous at desk scale.
            road_width: 1,
            sidewalk_width: 2,
            h_roads: 2,
            v_roads: 2,
            obstacle_fraction: (0.05, 0.25),
            block_size: (2, 5),
            ray_visible_classes: vec![CLASS_SIDEWALK],
        }
    }
}

/// Deterministically generates a corridor/intersection environment.
///
/// With `num_classes >= 3` the layout uses road/sidewalk/obstacle; with
/// exactly 2 classes it degenerates to road corridors plus obstacles (class 2
/// blocking, no sidewalks). Classes above 3 are decorative ray-visible
/// patches on the background.
pub fn generate_environment(
    width: usize,
    height: usize,
    num_classes: usize,
    seed: u64,
    params: &GeneratorParams,
) -> Result<EnvironmentSpec, GenError> {
    if width < 8 || height < 8 {
        return Err(GenError::GridTooSmall(width, height));
    }
    if num_classes < 2 {
        return Err(GenError::TooFewClasses(num_classes));
    }
    let (frac_lo, frac_hi) = params.obstacle_fraction;
    if !(0.0..=1.0).contains(&frac_lo) || frac_hi < frac_lo || frac_hi > 1.0 {
        return Err(GenError::BadObstacleBounds(frac_lo, frac_hi));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![CLASS_FREE; width * height];
    let obstacle_class = if num_classes >= 3 { CLASS_OBSTACLE } else { 2u8 };
    let has_sidewalk = num_classes >= 3;

    let v_positions = place_strips(&mut rng, width, params.road_width, params.v_roads)
        .ok_or(GenError::RoadPlacement(width, height))?;
    let h_positions = place_strips(&mut rng, height, params.road_width, params.h_roads)
        .ok_or(GenError::RoadPlacement(width, height))?;

    // Roads span the full grid so that every strip crosses every
    // perpendicular strip; the road network is connected by construction.
    for &x0 in &v_positions {
        for i in x0..x0 + params.road_width {
            for j in 0..height {
                labels[j * width + i] = CLASS_ROAD;
            }
        }
    }
    for &y0 in &h_positions {
        for j in y0..y0 + params.road_width {
            for i in 0..width {
                labels[j * width + i] = CLASS_ROAD;
            }
        }
    }

    if has_sidewalk {
        // Sidewalks: background cells within sidewalk_width of a road cell.
        let road_mask: Vec<bool> = labels.iter().map(|&c| c == CLASS_ROAD).collect();
        let w = params.sidewalk_width as i32;
        for j in 0..height as i32 {
            for i in 0..width as i32 {
                let idx = j as usize * width + i as usize;
                if labels[idx] != CLASS_FREE {
                    continue;
                }
                'scan: for dj in -w..=w {
                    for di in -w..=w {
                        let (ni, nj) = (i + di, j + dj);
                        if ni >= 0
                            && nj >= 0
                            && (ni as usize) < width
                            && (nj as usize) < height
                            && road_mask[nj as usize * width + ni as usize]
                        {
                            labels[idx] = CLASS_SIDEWALK;
                            break 'scan;
                        }
                    }
                }
            }
        }
    }

    // Decorative extra classes on background.
    for class in 4..=num_classes as u8 {
        for _ in 0..3 {
            let _ = place_block(&mut rng, &mut labels, width, height, (2, 3), class, usize::MAX);
        }
    }

    // Obstacle rectangles on remaining background until the fraction target.
    let total = (width * height) as f64;
    let target = frac_lo + (frac_hi - frac_lo) * rng.random::<f64>();
    let target_cells = (target * total).round() as usize;
    let cap_cells = (frac_hi * total).floor() as usize;
    let mut placed = 0usize;
    let mut attempts = 0usize;
    while placed < target_cells && attempts < 10_000 {
        attempts += 1;
        let budget = cap_cells - placed;
        placed += place_block(
            &mut rng,
            &mut labels,
            width,
            height,
            params.block_size,
            obstacle_class,
            budget,
        );
    }
    let placed_frac = placed as f64 / total;
    if placed_frac < frac_lo {
        return Err(GenError::ObstacleBudget {
            target,
            placed: placed_frac,
        });
    }

    let mut ray_visible = params.ray_visible_classes.clone();
    for class in 4..=num_classes as u8 {
        if !ray_visible.contains(&class) {
            ray_visible.push(class);
        }
    }
    ray_visible.retain(|&c| c != obstacle_class && c as usize <= num_classes);

    let env = EnvironmentSpec {
        id: 0,
        width,
        height,
        resolution: 1.0,
        num_classes,
        labels,
        obstacle_classes: vec![obstacle_class],
        ray_visible_classes: ray_visible,
        seed,
    };
    env.validate().map_err(GenError::Invalid)?;
    Ok(env)
}

/// Non-overlapping strip start positions with a margin from the borders.
fn place_strips(rng: &mut ChaCha8Rng, extent: usize, road_width: usize, count: usize) -> Option<Vec<usize>> {
    if count == 0 {
        return Some(Vec::new());
    }
    let margin = 2usize;
    if extent < 2 * margin + road_width {
        return None;
    }
    let hi = extent - margin - road_width;
    for _ in 0..200 {
        let mut positions: Vec<usize> = (0..count)
            .map(|_| rng.random_range(margin..=hi))
            .collect();
        positions.sort_unstable();
        let ok = positions
            .windows(2)
            .all(|w| w[1] >= w[0] + road_width + 2);
        if ok {
            return Some(positions);
        }
    }
    None
}

/// Places one rectangle of `class` on free background, returning the number
/// of cells painted (0 if the sampled rectangle overlaps anything).
fn place_block(
    rng: &mut ChaCha8Rng,
    labels: &mut [u8],
    width: usize,
    height: usize,
    size_range: (usize, usize),
    class: u8,
    budget: usize,
) -> usize {
    let bw = rng.random_range(size_range.0..=size_range.1);
    let bh = rng.random_range(size_range.0..=size_range.1);
    if bw * bh > budget || bw >= width || bh >= height {
        return 0;
    }
    let x0 = rng.random_range(0..width - bw);
    let y0 = rng.random_range(0..height - bh);
    for j in y0..y0 + bh {
        for i in x0..x0 + bw {
            if labels[j * width + i] != CLASS_FREE {
                return 0;
            }
        }
    }
    for j in y0..y0 + bh {
        for i in x0..x0 + bw {
            labels[j * width + i] = class;
        }
    }
    bw * bh
}

/// Uniformly samples a road cell (falls back to any traversable cell when no
/// road exists).
pub fn sample_road_cell(env: &EnvironmentSpec, rng: &mut ChaCha8Rng) -> Option<State> {
    let road: Vec<usize> = env
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == CLASS_ROAD)
        .map(|(k, _)| k)
        .collect();
    let pool: Vec<usize> = if road.is_empty() {
        env.labels
            .iter()
            .enumerate()
            .filter(|(_, &c)| !env.is_obstacle_class(c))
            .map(|(k, _)| k)
            .collect()
    } else {
        road
    };
    if pool.is_empty() {
        return None;
    }
    let idx = pool[rng.random_range(0..pool.len())];
    Some(env.state_of(idx))
}
