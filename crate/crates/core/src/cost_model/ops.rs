//! Fixed operator set for the cost encoder: same-padding convolution,
//! 2x average pooling, nearest-neighbor upsampling, channel concatenation,
//! tanh, and softplus. Each operator ships its exact reverse-mode backward.

/// Channel-major 3-D array: `data[ch * h * w + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Grid3 {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn at(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, ch: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(ch * self.h + y) * self.w + x]
    }
}

/// Valid row overlap for an output row offset by a kernel tap: output x
/// range `[x0, x1)` pairs with input x range `[x0 + dx, x1 + dx)`.
#[inline]
fn tap_window(extent: usize, tap: i64, pad: i64) -> (usize, usize) {
    let d = tap - pad;
    let lo = (-d).max(0) as usize;
    let hi = ((extent as i64 - d).min(extent as i64)).max(0) as usize;
    (lo, hi)
}

/// Same-padding 2-D convolution. Weights are `[out_c][in_c][k][k]` flattened,
/// `k` odd; bias is per output channel. Implemented as one shifted
/// accumulation per kernel tap so the inner loops run over contiguous rows.
pub fn conv2d(input: &Grid3, weights: &[f64], bias: &[f64], out_c: usize, k: usize) -> Grid3 {
    let in_c = input.c;
    debug_assert_eq!(weights.len(), out_c * in_c * k * k);
    debug_assert_eq!(bias.len(), out_c);
    let pad = (k / 2) as i64;
    let (h, w) = (input.h, input.w);
    let plane = h * w;
    let mut out = Grid3::zeros(out_c, h, w);
    for oc in 0..out_c {
        let out_plane = &mut out.data[oc * plane..(oc + 1) * plane];
        out_plane.fill(bias[oc]);
        for ic in 0..in_c {
            let in_plane = &input.data[ic * plane..(ic + 1) * plane];
            let wbase = ((oc * in_c + ic) * k) * k;
            for ky in 0..k as i64 {
                let (y0, y1) = tap_window(h, ky, pad);
                let dy = ky - pad;
                for kx in 0..k as i64 {
                    let (x0, x1) = tap_window(w, kx, pad);
                    if x0 >= x1 {
                        continue;
                    }
                    let dx = kx - pad;
                    let weight = weights[wbase + (ky as usize) * k + kx as usize];
                    for y in y0..y1 {
                        let iy = (y as i64 + dy) as usize;
                        let out_row = &mut out_plane[y * w + x0..y * w + x1];
                        let in_row =
                            &in_plane[iy * w + (x0 as i64 + dx) as usize..][..x1 - x0];
                        for (o, i) in out_row.iter_mut().zip(in_row) {
                            *o += weight * i;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of `conv2d`: gradients for weights, bias, and input, with the
/// same shifted-row structure as the forward pass.
pub fn conv2d_backward(
    input: &Grid3,
    weights: &[f64],
    out_c: usize,
    k: usize,
    upstream: &Grid3,
) -> (Vec<f64>, Vec<f64>, Grid3) {
    let in_c = input.c;
    let pad = (k / 2) as i64;
    let (h, w) = (input.h, input.w);
    let plane = h * w;
    let mut grad_w = vec![0.0; out_c * in_c * k * k];
    let mut grad_b = vec![0.0; out_c];
    let mut grad_in = Grid3::zeros(in_c, h, w);
    for oc in 0..out_c {
        let up_plane = &upstream.data[oc * plane..(oc + 1) * plane];
        grad_b[oc] += up_plane.iter().sum::<f64>();
        for ic in 0..in_c {
            let in_plane = &input.data[ic * plane..(ic + 1) * plane];
            let gin_plane = &mut grad_in.data[ic * plane..(ic + 1) * plane];
            let wbase = ((oc * in_c + ic) * k) * k;
            for ky in 0..k as i64 {
                let (y0, y1) = tap_window(h, ky, pad);
                let dy = ky - pad;
                for kx in 0..k as i64 {
                    let (x0, x1) = tap_window(w, kx, pad);
                    if x0 >= x1 {
                        continue;
                    }
                    let dx = kx - pad;
                    let widx = wbase + (ky as usize) * k + kx as usize;
                    let weight = weights[widx];
                    let mut wacc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as i64 + dy) as usize;
                        let up_row = &up_plane[y * w + x0..y * w + x1];
                        let ibase = iy * w + (x0 as i64 + dx) as usize;
                        let in_row = &in_plane[ibase..ibase + (x1 - x0)];
                        let gin_row = &mut gin_plane[ibase..ibase + (x1 - x0)];
                        for ((u, i), g) in up_row.iter().zip(in_row).zip(gin_row) {
                            wacc += u * i;
                            *g += weight * u;
                        }
                    }
                    grad_w[widx] += wacc;
                }
            }
        }
    }
    (grad_w, grad_b, grad_in)
}

/// 2x average pooling with ceil semantics: output is `ceil(h/2) x ceil(w/2)`
/// and edge windows average over the cells that exist.
pub fn avg_pool2(input: &Grid3) -> Grid3 {
    let (h, w) = (input.h, input.w);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Grid3::zeros(input.c, oh, ow);
    for ch in 0..input.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let y1 = (2 * oy + 1).min(h - 1);
                let x1 = (2 * ox + 1).min(w - 1);
                let mut acc = 0.0;
                let mut n = 0.0;
                for y in 2 * oy..=y1 {
                    for x in 2 * ox..=x1 {
                        acc += input.at(ch, y, x);
                        n += 1.0;
                    }
                }
                *out.at_mut(ch, oy, ox) = acc / n;
            }
        }
    }
    out
}

pub fn avg_pool2_backward(upstream: &Grid3, in_h: usize, in_w: usize) -> Grid3 {
    let mut grad = Grid3::zeros(upstream.c, in_h, in_w);
    for ch in 0..upstream.c {
        for oy in 0..upstream.h {
            for ox in 0..upstream.w {
                let y1 = (2 * oy + 1).min(in_h - 1);
                let x1 = (2 * ox + 1).min(in_w - 1);
                let n = ((y1 + 1 - 2 * oy) * (x1 + 1 - 2 * ox)) as f64;
                let up = upstream.at(ch, oy, ox) / n;
                for y in 2 * oy..=y1 {
                    for x in 2 * ox..=x1 {
                        *grad.at_mut(ch, y, x) += up;
                    }
                }
            }
        }
    }
    grad
}

/// Nearest-neighbor upsampling to an explicit target size (the pre-pooling
/// size, so `out[y][x] = in[y/2][x/2]`).
pub fn upsample_nearest(input: &Grid3, out_h: usize, out_w: usize) -> Grid3 {
    let mut out = Grid3::zeros(input.c, out_h, out_w);
    for ch in 0..input.c {
        for y in 0..out_h {
            for x in 0..out_w {
                *out.at_mut(ch, y, x) = input.at(ch, y / 2, x / 2);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(upstream: &Grid3, in_h: usize, in_w: usize) -> Grid3 {
    let mut grad = Grid3::zeros(upstream.c, in_h, in_w);
    for ch in 0..upstream.c {
        for y in 0..upstream.h {
            for x in 0..upstream.w {
                *grad.at_mut(ch, y / 2, x / 2) += upstream.at(ch, y, x);
            }
        }
    }
    grad
}

/// Stacks `a`'s channels above `b`'s.
pub fn concat_channels(a: &Grid3, b: &Grid3) -> Grid3 {
    debug_assert!(a.h == b.h && a.w == b.w);
    let mut out = Grid3::zeros(a.c + b.c, a.h, a.w);
    out.data[..a.data.len()].copy_from_slice(&a.data);
    out.data[a.data.len()..].copy_from_slice(&b.data);
    out
}

/// Splits an upstream gradient back into the two concatenated parts.
pub fn split_channels(upstream: &Grid3, c_a: usize) -> (Grid3, Grid3) {
    let plane = upstream.h * upstream.w;
    let a = Grid3 {
        c: c_a,
        h: upstream.h,
        w: upstream.w,
        data: upstream.data[..c_a * plane].to_vec(),
    };
    let b = Grid3 {
        c: upstream.c - c_a,
        h: upstream.h,
        w: upstream.w,
        data: upstream.data[c_a * plane..].to_vec(),
    };
    (a, b)
}

pub fn tanh_forward(input: &Grid3) -> Grid3 {
    Grid3 {
        c: input.c,
        h: input.h,
        w: input.w,
        data: input.data.iter().map(|&v| v.tanh()).collect(),
    }
}

/// Backward of tanh given the forward *output*.
pub fn tanh_backward(output: &Grid3, upstream: &Grid3) -> Grid3 {
    Grid3 {
        c: output.c,
        h: output.h,
        w: output.w,
        data: output
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&o, &u)| u * (1.0 - o * o))
            .collect(),
    }
}

/// Numerically stable softplus `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Derivative of softplus: the logistic sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(grid: &mut Grid3, f: impl Fn(usize, usize, usize) -> f64) {
        for ch in 0..grid.c {
            for y in 0..grid.h {
                for x in 0..grid.w {
                    *grid.at_mut(ch, y, x) = f(ch, y, x);
                }
            }
        }
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        let mut input = Grid3::zeros(1, 4, 4);
        fill(&mut input, |_, y, x| (y * 4 + x) as f64);
        let mut w = vec![0.0; 9];
        w[4] = 1.0; // center tap
        let out = conv2d(&input, &w, &[0.0], 1, 3);
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn pool_then_upsample_preserves_shape() {
        let mut input = Grid3::zeros(2, 5, 7);
        fill(&mut input, |c, y, x| (c + y + x) as f64);
        let pooled = avg_pool2(&input);
        assert_eq!((pooled.h, pooled.w), (3, 4));
        let up = upsample_nearest(&pooled, 5, 7);
        assert_eq!((up.h, up.w), (5, 7));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut input = Grid3::zeros(2, 4, 4);
        fill(&mut input, |c, y, x| 0.1 * (c as f64) + 0.05 * (y as f64) - 0.03 * (x as f64));
        let w: Vec<f64> = (0..2 * 2 * 9).map(|k| 0.01 * (k as f64) - 0.08).collect();
        let b = vec![0.02, -0.01];
        let mut upstream = Grid3::zeros(2, 4, 4);
        fill(&mut upstream, |c, y, x| 0.3 - 0.02 * ((c + y + x) as f64));
        let loss = |w: &[f64], b: &[f64], input: &Grid3| -> f64 {
            let out = conv2d(input, w, b, 2, 3);
            out.data.iter().zip(&upstream.data).map(|(o, u)| o * u).sum()
        };
        let (gw, gb, gin) = conv2d_backward(&input, &w, 2, 3, &upstream);
        let h = 1e-6;
        for idx in [0usize, 7, 17, 23, 35] {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let fd = (loss(&wp, &b, &input) - loss(&wm, &b, &input)) / (2.0 * h);
            assert!((fd - gw[idx]).abs() < 1e-8, "w[{idx}]: fd {fd} vs {}", gw[idx]);
        }
        for idx in [0usize, 1] {
            let mut bp = b.clone();
            bp[idx] += h;
            let mut bm = b.clone();
            bm[idx] -= h;
            let fd = (loss(&w, &bp, &input) - loss(&w, &bm, &input)) / (2.0 * h);
            assert!((fd - gb[idx]).abs() < 1e-8);
        }
        for idx in [0usize, 9, 20, 31] {
            let mut ip = input.clone();
            ip.data[idx] += h;
            let mut im = input.clone();
            im.data[idx] -= h;
            let fd = (loss(&w, &b, &ip) - loss(&w, &b, &im)) / (2.0 * h);
            assert!((fd - gin.data[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn pool_backward_distributes_evenly() {
        let mut up = Grid3::zeros(1, 2, 2);
        fill(&mut up, |_, y, x| (1 + y * 2 + x) as f64);
        let grad = avg_pool2_backward(&up, 4, 4);
        assert!((grad.at(0, 0, 0) - 0.25).abs() < 1e-12);
        assert!((grad.at(0, 3, 3) - 1.0).abs() < 1e-12);
        let total: f64 = grad.data.iter().sum();
        assert!((total - up.data.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_stable_and_positive() {
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
