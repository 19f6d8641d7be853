//! Reference implementations written without the library's helpers, used
//! as oracles by the integration tests.

#![allow(dead_code)]

use lhc_core::tensor::Tensor4;
use nalgebra::DMatrix;
use rand::Rng;

pub const SURROGATE_OUTSIDE: f64 = 0.1;

/// The rigid catalog as 9-bit row-major masks, top-left cell = bit 0.
pub const RIGID_BITS: [u16; 15] = [
    0, 16, 56, 273, 146, 84, 219, 438, 63, 504, 27, 54, 216, 432, 511,
];

pub fn random_tensor<R: Rng>(rng: &mut R, dims: [usize; 4]) -> Tensor4 {
    Tensor4::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Zero-pads and loops over every output element and every tap, summing in
/// `(ky, kx, ci)` order.
pub fn naive_conv(x: &Tensor4, w: &Tensor4, stride: usize, pad: usize) -> Tensor4 {
    let [b, h, wd, ci_n] = x.dims();
    let [k, _, _, co_n] = w.dims();
    let (ho, wo) = (out_extent(h, k, stride, pad), out_extent(wd, k, stride, pad));
    let hp = h + 2 * pad;
    let wp = wd + 2 * pad;
    let padded = Tensor4::from_fn([b, hp, wp, ci_n], |[n, y, xx, c]| {
        if y < pad || xx < pad || y >= h + pad || xx >= wd + pad {
            0.0
        } else {
            x.at([n, y - pad, xx - pad, c])
        }
    });
    let mut out = Tensor4::zeros([b, ho, wo, co_n]);
    for n in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..co_n {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            for ci in 0..ci_n {
                                acc += padded.at([n, oy * stride + ky, ox * stride + kx, ci])
                                    * w.at([ky, kx, ci, co]);
                            }
                        }
                    }
                    out.set([n, oy, ox, co], acc);
                }
            }
        }
    }
    out
}

/// `(dL/dx, dL/dw)` of `L = <up, naive_conv(x, w)>`, by explicit loops.
pub fn naive_conv_grads(
    x: &Tensor4,
    w: &Tensor4,
    up: &Tensor4,
    stride: usize,
    pad: usize,
) -> (Tensor4, Tensor4) {
    let [b, h, wd, ci_n] = x.dims();
    let [k, _, _, co_n] = w.dims();
    let [_, ho, wo, _] = up.dims();
    let mut gx = Tensor4::zeros(x.dims());
    let mut gw = Tensor4::zeros(w.dims());
    for n in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..co_n {
                    let u = up.at([n, oy, ox, co]);
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            for ci in 0..ci_n {
                                let gxv = gx.at([n, iy, ix, ci]) + u * w.at([ky, kx, ci, co]);
                                gx.set([n, iy, ix, ci], gxv);
                                let gwv = gw.at([ky, kx, ci, co]) + u * x.at([n, iy, ix, ci]);
                                gw.set([ky, kx, ci, co], gwv);
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Central difference of `f` at every element of `p`.
pub fn finite_difference(
    p: &Tensor4,
    h: f64,
    mut f: impl FnMut(&Tensor4) -> f64,
) -> Tensor4 {
    let mut out = Tensor4::zeros(p.dims());
    for i in 0..p.len() {
        let mut a = p.clone();
        a.data_mut()[i] += h;
        let mut b = p.clone();
        b.data_mut()[i] -= h;
        out.data_mut()[i] = (f(&a) - f(&b)) / (2.0 * h);
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// One step-function evaluation: selected 9-bit slice and the surrogate
/// derivative per effect factor.
pub fn oracle_step(rigid: bool, e: &[f64]) -> (u16, Vec<f64>) {
    if rigid {
        let mut best = 0;
        for i in 1..e.len() {
            if e[i] > e[best] {
                best = i;
            }
        }
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let surr = e
            .iter()
            .map(|v| if (v - mean).abs() < 1.0 { 1.0 } else { SURROGATE_OUTSIDE })
            .collect();
        (RIGID_BITS[best], surr)
    } else {
        let mut bits = 0u16;
        for (i, &v) in e.iter().enumerate() {
            if v > 0.0 {
                bits |= 1 << i;
            }
        }
        let surr = e
            .iter()
            .map(|v| if v.abs() < 1.0 { 1.0 } else { SURROGATE_OUTSIDE })
            .collect();
        (bits, surr)
    }
}

/// Mask tensor `(3, 3, c_i, c_o)` from per-block effect vectors laid out
/// input-block major.
pub fn oracle_masks(
    rigid: bool,
    effect: &[f64],
    c_i: usize,
    c_o: usize,
    c_gi: usize,
    c_go: usize,
) -> Tensor4 {
    let per = if rigid { 15 } else { 9 };
    let gy = c_o / c_go;
    Tensor4::from_fn([3, 3, c_i, c_o], |[u, v, x, y]| {
        let blk = (x / c_gi) * gy + y / c_go;
        let (bits, _) = oracle_step(rigid, &effect[blk * per..(blk + 1) * per]);
        ((bits >> (u * 3 + v)) & 1) as f64
    })
}

/// Surrogate chain from the raw kernel gradient of the masked kernel:
/// `dL/dM = W * dL/d(W*M)`, summed over each block, then pushed through the
/// step surrogate (per cell for free shapes, projected on each catalog
/// shape for rigid ones).
#[allow(clippy::too_many_arguments)]
pub fn oracle_effect_grad(
    rigid: bool,
    effect: &[f64],
    kernel: &Tensor4,
    grad_masked_kernel: &Tensor4,
    c_i: usize,
    c_o: usize,
    c_gi: usize,
    c_go: usize,
) -> Vec<f64> {
    let per = if rigid { 15 } else { 9 };
    let (gx, gy) = (c_i / c_gi, c_o / c_go);
    let mut out = vec![0.0; effect.len()];
    for bx in 0..gx {
        for by in 0..gy {
            let blk = bx * gy + by;
            let mut gm = [0.0; 9];
            for (cell, g) in gm.iter_mut().enumerate() {
                let (u, v) = (cell / 3, cell % 3);
                for x in bx * c_gi..(bx + 1) * c_gi {
                    for y in by * c_go..(by + 1) * c_go {
                        *g += kernel.at([u, v, x, y]) * grad_masked_kernel.at([u, v, x, y]);
                    }
                }
            }
            let e = &effect[blk * per..(blk + 1) * per];
            let (_, surr) = oracle_step(rigid, e);
            for i in 0..per {
                let proj = if rigid {
                    (0..9)
                        .filter(|c| RIGID_BITS[i] >> c & 1 == 1)
                        .map(|c| gm[c])
                        .sum()
                } else {
                    gm[i]
                };
                out[blk * per + i] = surr[i] * proj;
            }
        }
    }
    out
}

/// Grouped convolution: `groups` independent convolutions over channel
/// slices.
pub fn grouped_conv(x: &Tensor4, w: &Tensor4, groups: usize, stride: usize, pad: usize) -> Tensor4 {
    let [_, _, c_i, c_o] = w.dims();
    let (ig, og) = (c_i / groups, c_o / groups);
    let masked = Tensor4::from_fn(w.dims(), |[u, v, x, y]| {
        if x / ig == y / og {
            w.at([u, v, x, y])
        } else {
            0.0
        }
    });
    // Sum only within the group, directly.
    let [b, h, wd, _] = x.dims();
    let k = w.dims()[0];
    let (ho, wo) = (out_extent(h, k, stride, pad), out_extent(wd, k, stride, pad));
    let mut out = Tensor4::zeros([b, ho, wo, c_o]);
    for n in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..c_o {
                    let g = co / og;
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in g * ig..(g + 1) * ig {
                                acc += x.at([n, iy as usize, ix as usize, ci])
                                    * masked.at([ky, kx, ci, co]);
                            }
                        }
                    }
                    out.set([n, oy, ox, co], acc);
                }
            }
        }
    }
    out
}

/// Depthwise convolution with a channel multiplier: output `y` filters
/// input `y / multiplier` only.
pub fn depthwise_conv(x: &Tensor4, w: &Tensor4, multiplier: usize, stride: usize, pad: usize) -> Tensor4 {
    let [b, h, wd, _] = x.dims();
    let [k, _, _, c_o] = w.dims();
    let (ho, wo) = (out_extent(h, k, stride, pad), out_extent(wd, k, stride, pad));
    let mut out = Tensor4::zeros([b, ho, wo, c_o]);
    for n in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..c_o {
                    let ci = co / multiplier;
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x.at([n, iy as usize, ix as usize, ci]) * w.at([ky, kx, ci, co]);
                        }
                    }
                    out.set([n, oy, ox, co], acc);
                }
            }
        }
    }
    out
}

/// HetConv: per (input, output) pair, a full `k x k` filter when
/// `(x + y - 1) % p == 0` (1-based), otherwise the pointwise center tap.
pub fn hetconv(x: &Tensor4, w: &Tensor4, p: usize, stride: usize, pad: usize) -> Tensor4 {
    let [b, h, wd, c_i] = x.dims();
    let [k, _, _, c_o] = w.dims();
    let (ho, wo) = (out_extent(h, k, stride, pad), out_extent(wd, k, stride, pad));
    let c = k / 2;
    let mut out = Tensor4::zeros([b, ho, wo, c_o]);
    for n in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..c_o {
                    let mut acc = 0.0;
                    for ci in 0..c_i {
                        let full = (ci + 1 + co + 1 - 1) % p == 0;
                        for ky in 0..k {
                            for kx in 0..k {
                                if !full && (ky != c || kx != c) {
                                    continue;
                                }
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at([n, iy as usize, ix as usize, ci]) * w.at([ky, kx, ci, co]);
                            }
                        }
                    }
                    out.set([n, oy, ox, co], acc);
                }
            }
        }
    }
    out
}

/// Operator matrix of a stride-1 convolution, column `j` being the response
/// to the `j`-th unit impulse, then its singular values (descending).
pub fn impulse_probe_singular_values(w: &Tensor4, h: usize, wd: usize, pad: usize) -> Vec<f64> {
    let c_i = w.dims()[2];
    let cols = h * wd * c_i;
    let mut columns = Vec::with_capacity(cols);
    for j in 0..cols {
        let probe = Tensor4::from_fn([1, h, wd, c_i], |[_, y, x, c]| {
            if (y * wd + x) * c_i + c == j {
                1.0
            } else {
                0.0
            }
        });
        columns.push(naive_conv(&probe, w, 1, pad).into_data());
    }
    let rows = columns[0].len();
    let m = DMatrix::from_fn(rows, cols, |r, c| columns[c][r]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Multiplies with a nonzero mask element, over every output position.
pub fn brute_force_macs(mask: &Tensor4, h_o: usize, w_o: usize) -> u64 {
    let mut n = 0;
    for _ in 0..h_o {
        for _ in 0..w_o {
            for &m in mask.data() {
                if m != 0.0 {
                    n += 1;
                }
            }
        }
    }
    n
}

/// Weight rows of width `c_gi * c_go` that hold at least one nonzero.
pub fn nonempty_rows(kernel: &Tensor4, c_gi: usize, c_go: usize) -> usize {
    let [k, _, c_i, c_o] = kernel.dims();
    let mut n = 0;
    for ky in 0..k {
        for kx in 0..k {
            for bx in 0..c_i / c_gi {
                for by in 0..c_o / c_go {
                    let any = (0..c_gi).any(|i| {
                        (0..c_go).any(|o| kernel.at([ky, kx, bx * c_gi + i, by * c_go + o]) != 0.0)
                    });
                    if any {
                        n += 1;
                    }
                }
            }
        }
    }
    n
}

/// Random block-constant `(3, 3, c_i, c_o)` mask.
pub fn random_block_mask<R: Rng>(rng: &mut R, c_i: usize, c_o: usize, c_gi: usize, c_go: usize) -> Tensor4 {
    let (gx, gy) = (c_i / c_gi, c_o / c_go);
    let slices: Vec<u16> = (0..gx * gy).map(|_| rng.random_range(0..512)).collect();
    Tensor4::from_fn([3, 3, c_i, c_o], |[u, v, x, y]| {
        ((slices[(x / c_gi) * gy + y / c_go] >> (u * 3 + v)) & 1) as f64
    })
}
