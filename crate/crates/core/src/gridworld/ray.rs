//! Integer grid traversal for ray casting and along-ray cell enumeration.

/// Iterator over the grid cells crossed by a ray, in order of increasing
/// distance from the origin. Yields `(i, j, t_entry)` where `t_entry` is the
/// distance along the ray at which the cell is entered. The cell containing
/// the origin is not yielded.
///
/// When the ray passes exactly through a cell corner the traversal steps
/// diagonally, entering the corner-adjacent cell only.
pub struct GridRay {
    i: i32,
    j: i32,
    step_i: i32,
    step_j: i32,
    t_max_i: f64,
    t_max_j: f64,
    t_delta_i: f64,
    t_delta_j: f64,
    t_limit: f64,
}

impl GridRay {
    /// A ray from `origin` in direction `dir` (need not be normalized),
    /// traversed up to distance `t_limit` (in units of `|dir|`).
    pub fn new(origin: (f64, f64), dir: (f64, f64), t_limit: f64) -> Self {
        let norm = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
        let (dx, dy) = if norm > 0.0 {
            (dir.0 / norm, dir.1 / norm)
        } else {
            (0.0, 0.0)
        };
        let i = origin.0.floor() as i32;
        let j = origin.1.floor() as i32;
        let (step_i, t_max_i, t_delta_i) = axis_setup(origin.0, dx);
        let (step_j, t_max_j, t_delta_j) = axis_setup(origin.1, dy);
        GridRay {
            i,
            j,
            step_i,
            step_j,
            t_max_i,
            t_max_j,
            t_delta_i,
            t_delta_j,
            t_limit,
        }
    }

    /// Ray through two points, traversed exactly from `a` to `b`.
    pub fn segment(a: (f64, f64), b: (f64, f64)) -> Self {
        let dir = (b.0 - a.0, b.1 - a.1);
        let len = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
        GridRay::new(a, dir, len)
    }
}

fn axis_setup(coord: f64, d: f64) -> (i32, f64, f64) {
    if d > 0.0 {
        let t_first = ((coord.floor() + 1.0 - coord) / d).max(0.0);
        (1, t_first, 1.0 / d)
    } else if d < 0.0 {
        let t_first = ((coord - coord.floor()) / -d).max(0.0);
        (-1, t_first, -1.0 / d)
    } else {
        (0, f64::INFINITY, f64::INFINITY)
    }
}

impl Iterator for GridRay {
    /// `(i, j, t_entry)` of the next cell crossed.
    type Item = (i32, i32, f64);

    fn next(&mut self) -> Option<Self::Item> {
        let t = if (self.t_max_i - self.t_max_j).abs() < 1e-12 {
            // Exact corner crossing: advance both axes.
            let t = self.t_max_i;
            if self.step_i == 0 && self.step_j == 0 {
                return None;
            }
            self.i += self.step_i;
            self.j += self.step_j;
            self.t_max_i += self.t_delta_i;
            self.t_max_j += self.t_delta_j;
            t
        } else if self.t_max_i < self.t_max_j {
            let t = self.t_max_i;
            self.i += self.step_i;
            self.t_max_i += self.t_delta_i;
            t
        } else {
            let t = self.t_max_j;
            self.j += self.step_j;
            self.t_max_j += self.t_delta_j;
            t
        };
        if t > self.t_limit {
            None
        } else {
            Some((self.i, self.j, t))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_ray_visits_row() {
        let cells: Vec<_> = GridRay::new((0.5, 0.5), (1.0, 0.0), 3.2).collect();
        assert_eq!(
            cells.iter().map(|&(i, j, _)| (i, j)).collect::<Vec<_>>(),
            vec![(1, 0), (2, 0), (3, 0)]
        );
        assert!((cells[0].2 - 0.5).abs() < 1e-12);
        assert!((cells[2].2 - 2.5).abs() < 1e-12);
    }

    #[test]
    fn diagonal_ray_steps_through_corners() {
        let cells: Vec<_> = GridRay::new((0.5, 0.5), (1.0, 1.0), 3.0).collect();
        assert_eq!(
            cells.iter().map(|&(i, j, _)| (i, j)).collect::<Vec<_>>(),
            vec![(1, 1), (2, 2)]
        );
    }

    #[test]
    fn segment_reaches_endpoint_cell() {
        let cells: Vec<_> = GridRay::segment((0.5, 0.5), (4.0, 2.5)).collect();
        let last = cells.last().unwrap();
        assert_eq!((last.0, last.1), (4, 2));
    }

    #[test]
    fn zero_direction_yields_nothing() {
        assert_eq!(GridRay::new((0.5, 0.5), (0.0, 0.0), 5.0).count(), 0);
    }
}
