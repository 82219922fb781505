//! Raw compute kernels behind the tape ops. All layouts are row-major;
//! images are `[batch, channels, height, width]`.

use rayon::prelude::*;

use super::tensor::Element;

/// Output rows per conv work item.
const ROW_BAND: usize = 16;

/// `[m, k] · [k, n]`, optionally transposing either operand in place.
pub(crate) fn matmul<T: Element>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, T::zero(), &mut c);
    c
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Unfold output rows `[y0, y1)` of one image into a `[cin·kh·kw, rows·out_w]` matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, y0: usize, y1: usize, col: &mut [T]) {
    let ow = g.out_w();
    let cols = (y1 - y0) * ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - g.pad as isize;
                    let out = &mut dst[(y - y0) * ow..(y - y0 + 1) * ow];
                    if sy < 0 || sy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - g.pad as isize;
                        *o = if sx < 0 || sx >= g.w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn bands(g: &ConvGeom) -> Vec<(usize, usize, usize)> {
    let oh = g.out_h();
    (0..g.batch)
        .flat_map(|n| {
            (0..oh)
                .step_by(ROW_BAND)
                .map(move |y0| (n, y0, (y0 + ROW_BAND).min(oh)))
        })
        .collect()
}

/// Stride-1 zero-padded cross-correlation. `w` is `[cout, cin, kh, kw]`.
pub(crate) fn conv2d<T: Element>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let patch = g.patch();
    let in_img = g.cin * g.h * g.w;
    let pieces: Vec<_> = bands(g)
        .into_par_iter()
        .map(|(n, y0, y1)| {
            let cols = (y1 - y0) * ow;
            let mut col = vec![T::zero(); patch * cols];
            im2col(&x[n * in_img..(n + 1) * in_img], g, y0, y1, &mut col);
            let out = matmul(w, &col, g.cout, patch, cols, false, false);
            (n, y0, y1, out)
        })
        .collect();
    let mut y = vec![T::zero(); g.batch * g.cout * plane];
    for (n, y0, y1, out) in pieces {
        let cols = (y1 - y0) * ow;
        for co in 0..g.cout {
            let dst = (n * g.cout + co) * plane + y0 * ow;
            y[dst..dst + cols].copy_from_slice(&out[co * cols..(co + 1) * cols]);
        }
    }
    y
}

/// Gradient of `conv2d` with respect to its weights.
pub(crate) fn conv2d_grad_weight<T: Element>(x: &[T], dy: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let patch = g.patch();
    let in_img = g.cin * g.h * g.w;
    bands(g)
        .into_par_iter()
        .map(|(n, y0, y1)| {
            let cols = (y1 - y0) * ow;
            let mut col = vec![T::zero(); patch * cols];
            im2col(&x[n * in_img..(n + 1) * in_img], g, y0, y1, &mut col);
            let mut dy_band = vec![T::zero(); g.cout * cols];
            for co in 0..g.cout {
                let src = (n * g.cout + co) * plane + y0 * ow;
                dy_band[co * cols..(co + 1) * cols].copy_from_slice(&dy[src..src + cols]);
            }
            matmul(&dy_band, &col, g.cout, cols, patch, false, true)
        })
        .reduce(
            || vec![T::zero(); g.cout * patch],
            |mut acc, part| {
                for (a, p) in acc.iter_mut().zip(part) {
                    *a = *a + p;
                }
                acc
            },
        )
}

/// Gradient of `conv2d` with respect to its input: a full correlation of
/// `dy` with the spatially flipped, channel-transposed kernel.
pub(crate) fn conv2d_grad_input<T: Element>(w: &[T], dy: &[T], g: &ConvGeom) -> Vec<T> {
    let (kh, kw) = (g.kh, g.kw);
    let mut flipped = vec![T::zero(); w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = ((co * g.cin + ci) * kh + ky) * kw + kx;
                    let dst = ((ci * g.cout + co) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx);
                    flipped[dst] = w[src];
                }
            }
        }
    }
    // Padding chosen so the transposed correlation lands back on the
    // input grid; valid because pad < kernel size for every conv we build.
    debug_assert!(g.pad < kh && g.pad < kw && kh == kw);
    let back = ConvGeom {
        batch: g.batch,
        cin: g.cout,
        h: g.out_h(),
        w: g.out_w(),
        cout: g.cin,
        kh,
        kw,
        pad: kh - 1 - g.pad,
    };
    conv2d(dy, &flipped, &back)
}

/// 2×2 max pooling (floor on odd sizes). Returns pooled values and the flat
/// input index each output was taken from.
pub(crate) fn max_pool2<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour ×2 upsampling.
pub(crate) fn upsample2<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, dst)| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                dst[y * ow + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    });
    out
}

pub(crate) fn upsample2_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(p, dst)| {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                let d = &mut dst[(y / 2) * w + xo / 2];
                *d = *d + src[y * ow + xo];
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window correlation.
    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut y = vec![0.0; g.batch * g.cout * oh * ow];
        for n in 0..g.batch {
            for co in 0..g.cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let sy = oy as isize + ky as isize - g.pad as isize;
                                    let sx = ox as isize + kx as isize - g.pad as isize;
                                    if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.cin + ci) * g.h + sy as usize) * g.w + sx as usize]
                                        * w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                        y[((n * g.cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut s = 7;
        for (pad, k, h, w) in [(1, 3, 19, 21), (0, 3, 8, 8), (0, 1, 5, 40), (1, 3, 40, 3)] {
            let g = ConvGeom { batch: 2, cin: 3, h, w, cout: 4, kh: k, kw: k, pad };
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|_| lcg(&mut s)).collect();
            let wt: Vec<f64> = (0..4 * 3 * k * k).map(|_| lcg(&mut s)).collect();
            let fast = conv2d(&x, &wt, &g);
            let slow = naive_conv(&x, &wt, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn pool_picks_window_max() {
        let x = [1.0f32, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0];
        let (y, arg) = max_pool2(&x, 1, 2, 4);
        assert_eq!(y, vec![5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
    }
}
