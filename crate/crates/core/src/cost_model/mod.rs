//! Differentiable cost encoder: maps the per-cell semantic posterior to a
//! strictly positive stage cost with a small encoder-decoder convolutional
//! stack, with exact reverse-mode gradients for its parameters and input.

pub mod ops;

use crate::gridworld::{Control, EnvironmentSpec, State};
use ops::{
    avg_pool2, avg_pool2_backward, concat_channels, conv2d, conv2d_backward, sigmoid, softplus,
    split_channels, tanh_backward, tanh_forward, upsample_nearest, upsample_nearest_backward,
    Grid3,
};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostModelError {
    #[error("grid {0}x{1} is below the 8x8 minimum for the encoder")]
    GridTooSmall(usize, usize),
    #[error("posterior length {got} does not match {want} (J * (K+1))")]
    PosteriorShape { got: usize, want: usize },
    #[error("upstream length {got} does not match tape cell count {want}")]
    UpstreamShape { got: usize, want: usize },
    #[error("cost field entry {0} below the positive floor {1}")]
    BelowFloor(f64, f64),
    #[error("cell cost count {got} does not match {want} cells")]
    FieldShape { got: usize, want: usize },
}

/// Stage cost over the grid: a positive per-cell scalar with the lookup rule
/// `c(x, u) = cell_cost[f(x, u)] * length(u)`. Blocked transitions have no
/// finite cost and are excluded from planning.
#[derive(Debug, Clone, PartialEq)]
pub struct CostField {
    pub width: usize,
    pub height: usize,
    cell_cost: Vec<f64>,
    blocked: Vec<bool>,
    min_cost: f64,
}

impl CostField {
    pub fn new(
        width: usize,
        height: usize,
        cell_cost: Vec<f64>,
        blocked: Vec<bool>,
        min_cost: f64,
    ) -> Result<Self, CostModelError> {
        if cell_cost.len() != width * height || blocked.len() != width * height {
            return Err(CostModelError::FieldShape {
                got: cell_cost.len(),
                want: width * height,
            });
        }
        for (idx, &c) in cell_cost.iter().enumerate() {
            if !blocked[idx] && (!c.is_finite() || c < min_cost * (1.0 - 1e-12)) {
                return Err(CostModelError::BelowFloor(c, min_cost));
            }
        }
        Ok(CostField {
            width,
            height,
            cell_cost,
            blocked,
            min_cost,
        })
    }

    /// Ground-truth cost field: `cell_cost[j] = per_class[label(j)]`, with
    /// obstacle cells blocked.
    pub fn from_class_costs(env: &EnvironmentSpec, per_class: &[f64]) -> Self {
        let cell_cost: Vec<f64> = env
            .labels
            .iter()
            .map(|&c| per_class[c as usize])
            .collect();
        let min_cost = cell_cost
            .iter()
            .zip(env.blocked_mask())
            .filter(|(_, b)| !b)
            .map(|(&c, _)| c)
            .fold(f64::INFINITY, f64::min);
        CostField {
            width: env.width,
            height: env.height,
            cell_cost,
            blocked: env.blocked_mask(),
            min_cost,
        }
    }

    pub fn uniform(width: usize, height: usize, value: f64, blocked: Vec<bool>) -> Self {
        CostField {
            width,
            height,
            cell_cost: vec![value; width * height],
            blocked,
            min_cost: value,
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn min_cost(&self) -> f64 {
        self.min_cost
    }

    pub fn cell_cost(&self) -> &[f64] {
        &self.cell_cost
    }

    pub fn is_blocked(&self, index: usize) -> bool {
        self.blocked[index]
    }

    pub fn in_bounds(&self, s: State) -> bool {
        s.i >= 0 && s.j >= 0 && (s.i as usize) < self.width && (s.j as usize) < self.height
    }

    pub fn index(&self, s: State) -> usize {
        s.j as usize * self.width + s.i as usize
    }

    pub fn state_of(&self, index: usize) -> State {
        State::new((index % self.width) as i32, (index / self.width) as i32)
    }

    /// Successor under `u`, or `None` when the move is blocked.
    pub fn successor(&self, x: State, u: Control) -> Option<State> {
        let (di, dj) = u.delta();
        let t = State::new(x.i + di, x.j + dj);
        if self.in_bounds(t) && !self.blocked[self.index(t)] {
            Some(t)
        } else {
            None
        }
    }

    /// Stage cost of taking `u` at `x`; `None` encodes the infinite cost of a
    /// blocked transition.
    pub fn cost(&self, x: State, u: Control) -> Option<f64> {
        self.successor(x, u)
            .map(|t| self.cell_cost[self.index(t)] * u.length())
    }

    /// Adds a per-cell offset (tie-breaking jitter or a probe bump). The
    /// caller keeps offsets small enough to respect the positive floor.
    pub fn add_cell_offsets(&mut self, offsets: &[f64]) {
        debug_assert_eq!(offsets.len(), self.cell_cost.len());
        for (c, o) in self.cell_cost.iter_mut().zip(offsets) {
            *c += o;
        }
        self.min_cost = self
            .cell_cost
            .iter()
            .zip(&self.blocked)
            .filter(|(_, b)| !**b)
            .map(|(&c, _)| c)
            .fold(f64::INFINITY, f64::min)
            .min(self.min_cost);
    }

    pub fn bump_cell(&mut self, index: usize, delta: f64) {
        self.cell_cost[index] += delta;
    }
}

/// Architecture of the encoder-decoder stack: two encoder levels with the
/// given channel widths, mirrored by the decoder, odd square kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kernel: usize,
    pub widths: [usize; 2],
    /// Strictly positive cost floor added after softplus.
    pub min_cost: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            kernel: 3,
            widths: [8, 16],
            min_cost: 1e-3,
        }
    }
}

/// Conv-stack weights. Tensors are stored flat with shapes derived from the
/// architecture; see `tensor_shapes`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEncoderParams {
    pub arch: ArchConfig,
    pub in_channels: usize,
    pub enc1_w: Vec<f64>,
    pub enc1_b: Vec<f64>,
    pub enc2_w: Vec<f64>,
    pub enc2_b: Vec<f64>,
    pub bott_w: Vec<f64>,
    pub bott_b: Vec<f64>,
    pub dec2_w: Vec<f64>,
    pub dec2_b: Vec<f64>,
    pub dec1_w: Vec<f64>,
    pub dec1_b: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

/// `(name, [out_c, in_c, k, k])` for weights and `(name, [out_c])` for biases,
/// in canonical order.
pub fn tensor_shapes(arch: &ArchConfig, in_channels: usize) -> Vec<(&'static str, Vec<usize>)> {
    let k = arch.kernel;
    let [c1, c2] = arch.widths;
    vec![
        ("cost.enc1.w", vec![c1, in_channels, k, k]),
        ("cost.enc1.b", vec![c1]),
        ("cost.enc2.w", vec![c2, c1, k, k]),
        ("cost.enc2.b", vec![c2]),
        ("cost.bott.w", vec![c2, c2, k, k]),
        ("cost.bott.b", vec![c2]),
        ("cost.dec2.w", vec![c2, 2 * c2, k, k]),
        ("cost.dec2.b", vec![c2]),
        ("cost.dec1.w", vec![c1, c2 + c1, k, k]),
        ("cost.dec1.b", vec![c1]),
        // The head reads the decoder output plus a full-resolution skip of
        // the input posterior, so class evidence has a direct linear path
        // into the cost.
        ("cost.head.w", vec![1, c1 + in_channels, 1, 1]),
        ("cost.head.b", vec![1]),
    ]
}

impl CostEncoderParams {
    /// Zero-initialized parameters (useful as a deterministic baseline).
    pub fn zeros(arch: ArchConfig, in_channels: usize) -> Self {
        let shapes = tensor_shapes(&arch, in_channels);
        let mut tensors: Vec<Vec<f64>> = shapes
            .iter()
            .map(|(_, s)| vec![0.0; s.iter().product()])
            .collect();
        let head_b = tensors.pop().unwrap();
        let head_w = tensors.pop().unwrap();
        let dec1_b = tensors.pop().unwrap();
        let dec1_w = tensors.pop().unwrap();
        let dec2_b = tensors.pop().unwrap();
        let dec2_w = tensors.pop().unwrap();
        let bott_b = tensors.pop().unwrap();
        let bott_w = tensors.pop().unwrap();
        let enc2_b = tensors.pop().unwrap();
        let enc2_w = tensors.pop().unwrap();
        let enc1_b = tensors.pop().unwrap();
        let enc1_w = tensors.pop().unwrap();
        CostEncoderParams {
            arch,
            in_channels,
            enc1_w,
            enc1_b,
            enc2_w,
            enc2_b,
            bott_w,
            bott_b,
            dec2_w,
            dec2_b,
            dec1_w,
            dec1_b,
            head_w,
            head_b,
        }
    }

    /// Tensor views in canonical order, paired with their shapes.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let shapes = tensor_shapes(&self.arch, self.in_channels);
        let datas: Vec<&[f64]> = vec![
            &self.enc1_w,
            &self.enc1_b,
            &self.enc2_w,
            &self.enc2_b,
            &self.bott_w,
            &self.bott_b,
            &self.dec2_w,
            &self.dec2_b,
            &self.dec1_w,
            &self.dec1_b,
            &self.head_w,
            &self.head_b,
        ];
        shapes
            .into_iter()
            .zip(datas)
            .map(|((n, s), d)| (n, s, d))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.enc1_w,
            &mut self.enc1_b,
            &mut self.enc2_w,
            &mut self.enc2_b,
            &mut self.bott_w,
            &mut self.bott_b,
            &mut self.dec2_w,
            &mut self.dec2_b,
            &mut self.dec1_w,
            &mut self.dec1_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }
}

/// Deterministic scaled-uniform fan-in initialization: weights are
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
pub fn init_params(seed: u64, arch: &ArchConfig, in_channels: usize) -> CostEncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = CostEncoderParams::zeros(arch.clone(), in_channels);
    let shapes = tensor_shapes(arch, in_channels);
    for (tensor, (_, shape)) in params.tensors_mut().into_iter().zip(shapes) {
        if shape.len() == 4 {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = 1.0 / fan_in.sqrt();
            for w in tensor.iter_mut() {
                *w = (2.0 * rng.random::<f64>() - 1.0) * bound;
            }
        }
    }
    params
}

/// Gradients with the same layout as `CostEncoderParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEncoderGrads {
    pub enc1_w: Vec<f64>,
    pub enc1_b: Vec<f64>,
    pub enc2_w: Vec<f64>,
    pub enc2_b: Vec<f64>,
    pub bott_w: Vec<f64>,
    pub bott_b: Vec<f64>,
    pub dec2_w: Vec<f64>,
    pub dec2_b: Vec<f64>,
    pub dec1_w: Vec<f64>,
    pub dec1_b: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl CostEncoderGrads {
    pub fn zeros_like(params: &CostEncoderParams) -> Self {
        CostEncoderGrads {
            enc1_w: vec![0.0; params.enc1_w.len()],
            enc1_b: vec![0.0; params.enc1_b.len()],
            enc2_w: vec![0.0; params.enc2_w.len()],
            enc2_b: vec![0.0; params.enc2_b.len()],
            bott_w: vec![0.0; params.bott_w.len()],
            bott_b: vec![0.0; params.bott_b.len()],
            dec2_w: vec![0.0; params.dec2_w.len()],
            dec2_b: vec![0.0; params.dec2_b.len()],
            dec1_w: vec![0.0; params.dec1_w.len()],
            dec1_b: vec![0.0; params.dec1_b.len()],
            head_w: vec![0.0; params.head_w.len()],
            head_b: vec![0.0; params.head_b.len()],
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![
            &self.enc1_w,
            &self.enc1_b,
            &self.enc2_w,
            &self.enc2_b,
            &self.bott_w,
            &self.bott_b,
            &self.dec2_w,
            &self.dec2_b,
            &self.dec1_w,
            &self.dec1_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn add_assign(&mut self, other: &CostEncoderGrads) {
        for (a, b) in [
            (&mut self.enc1_w, &other.enc1_w),
            (&mut self.enc1_b, &other.enc1_b),
            (&mut self.enc2_w, &other.enc2_w),
            (&mut self.enc2_b, &other.enc2_b),
            (&mut self.bott_w, &other.bott_w),
            (&mut self.bott_b, &other.bott_b),
            (&mut self.dec2_w, &other.dec2_w),
            (&mut self.dec2_b, &other.dec2_b),
            (&mut self.dec1_w, &other.dec1_w),
            (&mut self.dec1_b, &other.dec1_b),
            (&mut self.head_w, &other.head_w),
            (&mut self.head_b, &other.head_b),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}

/// Activations recorded by `cost_forward` for the exact backward pass.
#[derive(Debug, Clone)]
pub struct CostTape {
    input: Grid3,
    a1: Grid3,
    p1: Grid3,
    a2: Grid3,
    p2: Grid3,
    a3: Grid3,
    u1cat: Grid3,
    a4: Grid3,
    u2cat: Grid3,
    a5: Grid3,
    z: Vec<f64>,
}

impl CostTape {
    pub fn cells(&self) -> usize {
        self.z.len()
    }
}

/// Runs the encoder over a `J x (K+1)` posterior (cell-major rows) and
/// returns the positive per-cell cost plus the tape for `cost_backward`.
pub fn cost_forward(
    params: &CostEncoderParams,
    posterior: &[f64],
    width: usize,
    height: usize,
) -> Result<(Vec<f64>, CostTape), CostModelError> {
    if width < 8 || height < 8 {
        return Err(CostModelError::GridTooSmall(width, height));
    }
    let channels = params.in_channels;
    let cells = width * height;
    if posterior.len() != cells * channels {
        return Err(CostModelError::PosteriorShape {
            got: posterior.len(),
            want: cells * channels,
        });
    }
    let k = params.arch.kernel;
    let [c1, c2] = params.arch.widths;

    let mut input = Grid3::zeros(channels, height, width);
    for j in 0..cells {
        for ch in 0..channels {
            input.data[ch * cells + j] = posterior[j * channels + ch];
        }
    }

    let a1 = tanh_forward(&conv2d(&input, &params.enc1_w, &params.enc1_b, c1, k));
    let p1 = avg_pool2(&a1);
    let a2 = tanh_forward(&conv2d(&p1, &params.enc2_w, &params.enc2_b, c2, k));
    let p2 = avg_pool2(&a2);
    let a3 = tanh_forward(&conv2d(&p2, &params.bott_w, &params.bott_b, c2, k));
    let u1 = upsample_nearest(&a3, a2.h, a2.w);
    let u1cat = concat_channels(&u1, &a2);
    let a4 = tanh_forward(&conv2d(&u1cat, &params.dec2_w, &params.dec2_b, c2, k));
    let u2 = upsample_nearest(&a4, a1.h, a1.w);
    let u2cat = concat_channels(&u2, &a1);
    let a5 = tanh_forward(&conv2d(&u2cat, &params.dec1_w, &params.dec1_b, c1, k));
    let head_in = concat_channels(&a5, &input);
    let z_grid = conv2d(&head_in, &params.head_w, &params.head_b, 1, 1);

    let z = z_grid.data;
    let cell_cost: Vec<f64> = z.iter().map(|&v| softplus(v) + params.arch.min_cost).collect();
    let tape = CostTape {
        input,
        a1,
        p1,
        a2,
        p2,
        a3,
        u1cat,
        a4,
        u2cat,
        a5,
        z,
    };
    Ok((cell_cost, tape))
}

/// Exact reverse-mode gradients of `cost_forward` for an upstream gradient
/// with respect to the per-cell costs. Returns parameter gradients and the
/// gradient with respect to the input posterior (cell-major layout).
pub fn cost_backward(
    params: &CostEncoderParams,
    tape: &CostTape,
    upstream: &[f64],
) -> Result<(CostEncoderGrads, Vec<f64>), CostModelError> {
    if upstream.len() != tape.z.len() {
        return Err(CostModelError::UpstreamShape {
            got: upstream.len(),
            want: tape.z.len(),
        });
    }
    let k = params.arch.kernel;
    let [c1, c2] = params.arch.widths;
    let (h, w) = (tape.input.h, tape.input.w);

    let dz = Grid3 {
        c: 1,
        h,
        w,
        data: tape
            .z
            .iter()
            .zip(upstream)
            .map(|(&z, &u)| u * sigmoid(z))
            .collect(),
    };

    let head_in = concat_channels(&tape.a5, &tape.input);
    let (head_gw, head_gb, d_head_in) = conv2d_backward(&head_in, &params.head_w, 1, 1, &dz);
    let (d_a5, d_input_skip) = split_channels(&d_head_in, c1);
    let d_pre5 = tanh_backward(&tape.a5, &d_a5);
    let (dec1_gw, dec1_gb, d_u2cat) = conv2d_backward(&tape.u2cat, &params.dec1_w, c1, k, &d_pre5);
    let (d_u2, d_a1_skip) = split_channels(&d_u2cat, c2);
    let d_a4_up = upsample_nearest_backward(&d_u2, tape.a4.h, tape.a4.w);
    let d_pre4 = tanh_backward(&tape.a4, &d_a4_up);
    let (dec2_gw, dec2_gb, d_u1cat) = conv2d_backward(&tape.u1cat, &params.dec2_w, c2, k, &d_pre4);
    let (d_u1, d_a2_skip) = split_channels(&d_u1cat, c2);
    let d_a3_up = upsample_nearest_backward(&d_u1, tape.a3.h, tape.a3.w);
    let d_pre3 = tanh_backward(&tape.a3, &d_a3_up);
    let (bott_gw, bott_gb, d_p2) = conv2d_backward(&tape.p2, &params.bott_w, c2, k, &d_pre3);
    let mut d_a2 = avg_pool2_backward(&d_p2, tape.a2.h, tape.a2.w);
    for (a, b) in d_a2.data.iter_mut().zip(&d_a2_skip.data) {
        *a += *b;
    }
    let d_pre2 = tanh_backward(&tape.a2, &d_a2);
    let (enc2_gw, enc2_gb, d_p1) = conv2d_backward(&tape.p1, &params.enc2_w, c2, k, &d_pre2);
    let mut d_a1 = avg_pool2_backward(&d_p1, tape.a1.h, tape.a1.w);
    for (a, b) in d_a1.data.iter_mut().zip(&d_a1_skip.data) {
        *a += *b;
    }
    let d_pre1 = tanh_backward(&tape.a1, &d_a1);
    let (enc1_gw, enc1_gb, mut d_input) =
        conv2d_backward(&tape.input, &params.enc1_w, c1, k, &d_pre1);
    for (a, b) in d_input.data.iter_mut().zip(&d_input_skip.data) {
        *a += *b;
    }

    let cells = h * w;
    let channels = params.in_channels;
    let mut grad_posterior = vec![0.0; cells * channels];
    for j in 0..cells {
        for ch in 0..channels {
            grad_posterior[j * channels + ch] = d_input.data[ch * cells + j];
        }
    }

    let grads = CostEncoderGrads {
        enc1_w: enc1_gw,
        enc1_b: enc1_gb,
        enc2_w: enc2_gw,
        enc2_b: enc2_gb,
        bott_w: bott_gw,
        bott_b: bott_gb,
        dec2_w: dec2_gw,
        dec2_b: dec2_gb,
        dec1_w: dec1_gw,
        dec1_b: dec1_gb,
        head_w: head_gw,
        head_b: head_gb,
    };
    Ok((grads, grad_posterior))
}
