//! Recurrent Bayesian multi-class log-odds mapping.
//!
//! Each cell `j` keeps a `(K+1)`-vector of log-odds against free space,
//! `h[j][k] = log P(class k) / P(class 0)`, with `h[j][0]` pinned at 0. A
//! scan updates the grid additively, `h <- h + g - h0`, where `g` is the
//! log-odds inverse observation model of a single labeled point: linear
//! (`diag(psi) y dp`, truncated at `epsilon`) or a small per-ray network.
//! The per-cell semantic posterior is the row-wise softmax of `h`.

use crate::gridworld::{GridRay, LabeledPoint, SemanticPointCloud, State};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("tape references cell {0} outside a grid of {1} cells")]
    TapeShape(usize, usize),
    #[error("upstream gradient count {got} does not match recorded steps {want}")]
    UpstreamCount { got: usize, want: usize },
    #[error("upstream gradient length {got} does not match grid size {want}")]
    UpstreamShape { got: usize, want: usize },
}

/// Numerically stable softmax with the log-ratio identity
/// `log(s_k / s_k') = z_k - z_k'`.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-cell semantic log-odds over classes `0..=K`; the recurrent hidden
/// state of the map encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LogOddsGrid {
    pub width: usize,
    pub height: usize,
    /// Number of semantic classes K (row length is K+1).
    pub num_classes: usize,
    /// Row-major per-cell rows: `h[j * (K+1) + k]`.
    h: Vec<f64>,
    /// Prior log-odds row (class 0 component must be 0).
    h0: Vec<f64>,
}

impl LogOddsGrid {
    /// Fresh grid at the prior. `h0 = None` is the uniform prior (all zeros).
    pub fn new(width: usize, height: usize, num_classes: usize, h0: Option<Vec<f64>>) -> Self {
        let h0 = h0.unwrap_or_else(|| vec![0.0; num_classes + 1]);
        assert_eq!(h0.len(), num_classes + 1);
        assert_eq!(h0[0], 0.0, "class-0 log-odds must stay 0");
        let cells = width * height;
        let mut h = Vec::with_capacity(cells * (num_classes + 1));
        for _ in 0..cells {
            h.extend_from_slice(&h0);
        }
        LogOddsGrid {
            width,
            height,
            num_classes,
            h,
            h0,
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn row_len(&self) -> usize {
        self.num_classes + 1
    }

    pub fn row(&self, cell: usize) -> &[f64] {
        let k = self.row_len();
        &self.h[cell * k..(cell + 1) * k]
    }

    pub fn h0(&self) -> &[f64] {
        &self.h0
    }

    /// Row-wise softmax: `J x (K+1)` probabilities, cell-major.
    pub fn posterior(&self) -> Vec<f64> {
        let k = self.row_len();
        let mut out = Vec::with_capacity(self.h.len());
        for cell in 0..self.cells() {
            out.extend(softmax(&self.h[cell * k..(cell + 1) * k]));
        }
        out
    }

    pub fn posterior_cell(&self, cell: usize) -> Vec<f64> {
        softmax(self.row(cell))
    }

    /// Most likely class per cell (ties to the lowest class id).
    pub fn argmax_classes(&self) -> Vec<u8> {
        let k = self.row_len();
        (0..self.cells())
            .map(|cell| {
                let row = &self.h[cell * k..(cell + 1) * k];
                let mut best = 0usize;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Writes one CSV per class (`<prefix>_class<k>.csv`, height rows of
    /// width probabilities) plus `<prefix>_argmax.csv` with the most likely
    /// class ids.
    pub fn write_posterior_csvs(&self, dir: &Path, prefix: &str) -> std::io::Result<()> {
        let post = self.posterior();
        let k = self.row_len();
        for class in 0..k {
            let path = dir.join(format!("{prefix}_class{class}.csv"));
            let mut w = std::io::BufWriter::new(fs::File::create(path)?);
            for j in 0..self.height {
                let row: Vec<String> = (0..self.width)
                    .map(|i| format!("{:?}", post[(j * self.width + i) * k + class]))
                    .collect();
                writeln!(w, "{}", row.join(","))?;
            }
        }
        let path = dir.join(format!("{prefix}_argmax.csv"));
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        let classes = self.argmax_classes();
        for j in 0..self.height {
            let row: Vec<String> = (0..self.width)
                .map(|i| classes[j * self.width + i].to_string())
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Linear,
    Network,
}

/// Two-layer perceptron for the network inverse observation model:
/// inputs `(y, dp, d)`, one tanh hidden layer, linear outputs for classes
/// `1..=K` (class 0 stays pinned at 0).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub num_classes: usize,
    pub hidden: usize,
    /// `[hidden][K + 2]` flattened.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[K][hidden]` flattened.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(num_classes: usize, hidden: usize) -> Self {
        let inputs = num_classes + 2;
        MlpParams {
            num_classes,
            hidden,
            w1: vec![0.0; hidden * inputs],
            b1: vec![0.0; hidden],
            w2: vec![0.0; num_classes * hidden],
            b2: vec![0.0; num_classes],
        }
    }

    pub fn init(seed: u64, num_classes: usize, hidden: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = MlpParams::zeros(num_classes, hidden);
        let inputs = (num_classes + 2) as f64;
        let bound1 = 1.0 / inputs.sqrt();
        for w in p.w1.iter_mut() {
            *w = (2.0 * rng.random::<f64>() - 1.0) * bound1;
        }
        let bound2 = 1.0 / (hidden as f64).sqrt();
        for w in p.w2.iter_mut() {
            *w = (2.0 * rng.random::<f64>() - 1.0) * bound2;
        }
        p
    }

    fn inputs(&self) -> usize {
        self.num_classes + 2
    }

    /// Forward pass; returns (hidden activations, outputs for classes 1..=K).
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.inputs());
        let mut hidden = vec![0.0; self.hidden];
        for (h, hval) in hidden.iter_mut().enumerate() {
            let mut acc = self.b1[h];
            let base = h * self.inputs();
            for (i, &xi) in x.iter().enumerate() {
                acc += self.w1[base + i] * xi;
            }
            *hval = acc.tanh();
        }
        let mut out = vec![0.0; self.num_classes];
        for (k, oval) in out.iter_mut().enumerate() {
            let mut acc = self.b2[k];
            let base = k * self.hidden;
            for (h, &hv) in hidden.iter().enumerate() {
                acc += self.w2[base + h] * hv;
            }
            *oval = acc;
        }
        (hidden, out)
    }

    /// Accumulates parameter gradients for an upstream gradient on the
    /// outputs (classes 1..=K).
    fn backward_into(&self, x: &[f64], upstream_out: &[f64], grads: &mut MlpGrads) {
        let (hidden, _) = self.forward(x);
        let mut d_hidden = vec![0.0; self.hidden];
        for (k, &up) in upstream_out.iter().enumerate() {
            if up == 0.0 {
                continue;
            }
            grads.b2[k] += up;
            let base = k * self.hidden;
            for (h, &hv) in hidden.iter().enumerate() {
                grads.w2[base + h] += up * hv;
                d_hidden[h] += up * self.w2[base + h];
            }
        }
        for (h, &dh) in d_hidden.iter().enumerate() {
            if dh == 0.0 {
                continue;
            }
            let d_pre = dh * (1.0 - hidden[h] * hidden[h]);
            grads.b1[h] += d_pre;
            let base = h * self.inputs();
            for (i, &xi) in x.iter().enumerate() {
                grads.w1[base + i] += d_pre * xi;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        MlpGrads {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            w2: vec![0.0; p.w2.len()],
            b2: vec![0.0; p.b2.len()],
        }
    }
}

/// Map encoder parameters: mode, per-class linear scales, network weights,
/// the truncation threshold, and the update policy knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct MapEncoderParams {
    pub mode: EncoderMode,
    /// Per-class scales for the linear inverse model (length K).
    pub psi: Vec<f64>,
    pub net: MlpParams,
    /// Truncation threshold in cells: observations with `dp > epsilon`
    /// carry no evidence.
    pub epsilon: f64,
    /// Update only the cell containing each point, not cells along the ray.
    pub endpoint_only: bool,
    /// Free-space log-odds bonus applied to intermediate ray cells when
    /// `endpoint_only` is off.
    pub lambda_free: f64,
    /// Symmetric log-odds clamp; saturated components carry no gradient.
    pub clamp: f64,
}

impl MapEncoderParams {
    pub fn new(mode: EncoderMode, num_classes: usize, seed: u64) -> Self {
        MapEncoderParams {
            mode,
            psi: vec![1.0; num_classes],
            net: MlpParams::init(seed, num_classes, 16),
            epsilon: 1.0,
            endpoint_only: true,
            lambda_free: 0.3,
            clamp: 50.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.psi.len()
    }

    /// Log-odds increment `g` (full K+1 row, class 0 pinned to 0) for one
    /// labeled point and one cell at distance differential `dp`, given the
    /// robot-to-cell distance `d`. Returns the prior row when truncated.
    pub fn increment(&self, y: &[f64], dp: f64, d: f64, h0: &[f64]) -> Vec<f64> {
        let k = self.num_classes();
        if dp > self.epsilon {
            return h0.to_vec();
        }
        let mut g = vec![0.0; k + 1];
        match self.mode {
            EncoderMode::Linear => {
                for c in 0..k {
                    g[c + 1] = self.psi[c] * y[c] * dp;
                }
            }
            EncoderMode::Network => {
                let x = net_input(y, dp, d);
                let (_, out) = self.net.forward(&x);
                g[1..].copy_from_slice(&out);
            }
        }
        g
    }
}

fn net_input(y: &[f64], dp: f64, d: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(y.len() + 2);
    x.extend_from_slice(y);
    x.push(dp);
    x.push(d);
    x
}

/// Linear inverse observation model for cell `j` of a `width`-wide grid:
/// `[0, psi_1 y_1 dp, ..., psi_K y_K dp]` when `dp <= epsilon`, else the
/// prior row.
pub fn inverse_obs_linear(
    x: State,
    point: &LabeledPoint,
    cell: usize,
    width: usize,
    params: &MapEncoderParams,
    h0: &[f64],
) -> Vec<f64> {
    let (dp, d) = delta_p(x, point, cell, width);
    debug_assert_eq!(params.mode, EncoderMode::Linear);
    params.increment(&point.y, dp, d, h0)
}

/// Network inverse observation model; same truncation rule.
pub fn inverse_obs_network(
    x: State,
    point: &LabeledPoint,
    cell: usize,
    width: usize,
    params: &MapEncoderParams,
    h0: &[f64],
) -> Vec<f64> {
    let (dp, d) = delta_p(x, point, cell, width);
    debug_assert_eq!(params.mode, EncoderMode::Network);
    params.increment(&point.y, dp, d, h0)
}

/// `(dp, d)` for a cell: `d` is the Euclidean distance from the robot cell
/// center to the cell center, `dp = d - |p - pos(x)|` the differential
/// against the measured range.
pub fn delta_p(x: State, point: &LabeledPoint, cell: usize, width: usize) -> (f64, f64) {
    let origin = x.center();
    let (ci, cj) = ((cell % width) as f64 + 0.5, (cell / width) as f64 + 0.5);
    let d = ((ci - origin.0).powi(2) + (cj - origin.1).powi(2)).sqrt();
    let range = ((point.p[0] - origin.0).powi(2) + (point.p[1] - origin.1).powi(2)).sqrt();
    (d - range, d)
}

/// One recorded endpoint contribution; the differentiable part of a scan.
#[derive(Debug, Clone)]
pub struct ObsRecord {
    pub cell: usize,
    pub y: Vec<f64>,
    pub dp: f64,
    pub d: f64,
}

/// What one scan did to the grid: the endpoint records that carry gradient
/// and the components that hit the log-odds clamp.
#[derive(Debug, Clone, Default)]
pub struct ScanTape {
    pub records: Vec<ObsRecord>,
    /// `(cell, class)` components saturated by the clamp during this scan.
    pub clamped: Vec<(usize, usize)>,
}

/// Cell containing the point, resolved by nudging along the ray direction so
/// points sitting exactly on a cell face land in the hit cell.
pub fn endpoint_cell(x: State, point: &LabeledPoint, width: usize, height: usize) -> Option<usize> {
    let origin = x.center();
    let (dx, dy) = (point.p[0] - origin.0, point.p[1] - origin.1);
    let norm = (dx * dx + dy * dy).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    let nudge = 1e-9 / norm;
    let (px, py) = (point.p[0] + dx * nudge, point.p[1] + dy * nudge);
    let (i, j) = (px.floor() as i32, py.floor() as i32);
    if i < 0 || j < 0 || i as usize >= width || j as usize >= height {
        None
    } else {
        Some(j as usize * width + i as usize)
    }
}

/// Applies one scan in place: `h[j] += g_j - h0` for each affected cell.
/// With `endpoint_only` only the cell containing each point is touched;
/// otherwise intermediate ray cells also receive the constant free-space
/// bonus (`-lambda_free` on every semantic class).
pub fn apply_scan(
    grid: &mut LogOddsGrid,
    x: State,
    cloud: &SemanticPointCloud,
    params: &MapEncoderParams,
) -> ScanTape {
    let mut tape = ScanTape::default();
    let rows = grid.row_len();
    let origin = x.center();
    let h0 = grid.h0.clone();
    for point in &cloud.points {
        let Some(cell) = endpoint_cell(x, point, grid.width, grid.height) else {
            continue;
        };
        let (dp, d) = delta_p(x, point, cell, grid.width);
        if dp <= params.epsilon {
            // Inside truncation: the increment g - h0 carries evidence.
            let g = params.increment(&point.y, dp, d, &h0);
            let base = cell * rows;
            for k in 1..rows {
                let v = grid.h[base + k] + g[k] - h0[k];
                let clamped = v.clamp(-params.clamp, params.clamp);
                if clamped != v {
                    tape.clamped.push((cell, k));
                }
                grid.h[base + k] = clamped;
            }
            tape.records.push(ObsRecord {
                cell,
                y: point.y.clone(),
                dp,
                d,
            });
        }
        if !params.endpoint_only {
            for (i, j, _) in GridRay::segment(origin, (point.p[0], point.p[1])) {
                if i < 0 || j < 0 || i as usize >= grid.width || j as usize >= grid.height {
                    break;
                }
                let ray_cell = j as usize * grid.width + i as usize;
                if ray_cell == cell {
                    continue;
                }
                let base = ray_cell * rows;
                for k in 1..rows {
                    let v = grid.h[base + k] - params.lambda_free;
                    let clamped = v.clamp(-params.clamp, params.clamp);
                    if clamped != v {
                        tape.clamped.push((ray_cell, k));
                    }
                    grid.h[base + k] = clamped;
                }
            }
        }
    }
    tape
}

/// Pure form of the recurrent update (`h_{t+1} = h_t + g - h0` per affected
/// cell); returns the updated grid.
pub fn update(
    grid: &LogOddsGrid,
    x: State,
    cloud: &SemanticPointCloud,
    params: &MapEncoderParams,
) -> LogOddsGrid {
    let mut next = grid.clone();
    apply_scan(&mut next, x, cloud, params);
    next
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapEncoderGrads {
    pub psi: Vec<f64>,
    pub net: MlpGrads,
}

impl MapEncoderGrads {
    pub fn zeros_like(params: &MapEncoderParams) -> Self {
        MapEncoderGrads {
            psi: vec![0.0; params.psi.len()],
            net: MlpGrads::zeros_like(&params.net),
        }
    }
}

/// Back-propagates per-step upstream gradients `dL_t/dh_t` through the
/// recurrence into the encoder parameters.
///
/// `tapes[t]` is the scan applied before computing the step-`t` loss and
/// `upstreams[t]` its upstream gradient (dense `J x (K+1)`, cell-major).
/// Components saturated by the clamp at step `t` stop gradient for that step
/// and all earlier ones. Only records inside the truncation threshold were
/// taped, so only those carry gradient.
pub fn map_encoder_backward(
    params: &MapEncoderParams,
    grid_cells: usize,
    num_classes: usize,
    tapes: &[ScanTape],
    upstreams: &[Vec<f64>],
) -> Result<MapEncoderGrads, MapError> {
    if tapes.len() != upstreams.len() {
        return Err(MapError::UpstreamCount {
            got: upstreams.len(),
            want: tapes.len(),
        });
    }
    let rows = num_classes + 1;
    let mut grads = MapEncoderGrads::zeros_like(params);
    let mut running = vec![0.0; grid_cells * rows];
    for (tape, upstream) in tapes.iter().zip(upstreams).rev() {
        if upstream.len() != running.len() {
            return Err(MapError::UpstreamShape {
                got: upstream.len(),
                want: running.len(),
            });
        }
        for (r, u) in running.iter_mut().zip(upstream) {
            *r += *u;
        }
        // A clamp at this step cuts gradient flow into this scan's increment
        // and into everything earlier on that component.
        for &(cell, k) in &tape.clamped {
            if cell * rows + k >= running.len() {
                return Err(MapError::TapeShape(cell, grid_cells));
            }
            running[cell * rows + k] = 0.0;
        }
        for rec in &tape.records {
            if rec.cell >= grid_cells {
                return Err(MapError::TapeShape(rec.cell, grid_cells));
            }
            let base = rec.cell * rows;
            match params.mode {
                EncoderMode::Linear => {
                    for c in 0..num_classes {
                        grads.psi[c] += running[base + 1 + c] * rec.y[c] * rec.dp;
                    }
                }
                EncoderMode::Network => {
                    let x = net_input(&rec.y, rec.dp, rec.d);
                    let upstream_out: Vec<f64> =
                        (0..num_classes).map(|c| running[base + 1 + c]).collect();
                    if upstream_out.iter().any(|&v| v != 0.0) {
                        params.net.backward_into(&x, &upstream_out, &mut grads.net);
                    }
                }
            }
        }
    }
    Ok(grads)
}
