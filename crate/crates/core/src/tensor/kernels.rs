//! Slice-level kernels behind the graph operations. Shapes are validated by
//! the caller; these functions only index.

use super::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output length of a sliding window, or `None` if the window does not fit.
pub(crate) fn window_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw_out = g.out_spatial();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let hw_out = g.out_spatial();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let hw_out = g.out_spatial();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * hw_out;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.patch() * hw_out] };
    for s in 0..g.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let cols_ref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        let ys = &mut out[s * out_len..(s + 1) * out_len];
        T::gemm(false, false, g.cout, hw_out, g.patch(), T::one(), weight, cols_ref, T::zero(), ys);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                ys[co * hw_out..(co + 1) * hw_out].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let hw_out = g.out_spatial();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * hw_out;
    let patch = g.patch();
    let mut dx = need_x.then(|| vec![T::zero(); g.n * in_len]);
    let mut dw = need_w.then(|| vec![T::zero(); g.cout * patch]);
    let mut db = need_b.then(|| vec![T::zero(); g.cout]);
    let mut cols = if need_w && !g.is_pointwise() { vec![T::zero(); patch * hw_out] } else { Vec::new() };
    let mut dcols = if need_x && !g.is_pointwise() { vec![T::zero(); patch * hw_out] } else { Vec::new() };
    for s in 0..g.n {
        let dys = &dy[s * out_len..(s + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dys[co * hw_out..(co + 1) * hw_out].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let cols_ref: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            T::gemm(false, true, g.cout, patch, hw_out, T::one(), dys, cols_ref, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(true, false, patch, hw_out, g.cout, T::one(), weight, dys, T::zero(), dxs);
            } else {
                T::gemm(true, false, patch, hw_out, g.cout, T::one(), weight, dys, T::zero(), &mut dcols);
                col2im(g, &dcols, dxs);
            }
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Returns pooled values and, per output, the flat input index of the max.
pub(crate) fn max_pool_forward<T: Element>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.planes * g.ho * g.wo);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..g.kernel {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * g.w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Average pool; padded cells count toward the divisor.
pub(crate) fn avg_pool_forward<T: Element>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let inv = T::one() / T::from_f64((g.kernel * g.kernel) as f64);
    let mut out = Vec::with_capacity(g.planes * g.ho * g.wo);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = T::zero();
                for ki in 0..g.kernel {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            acc += x[base + iy as usize * g.w + ix as usize];
                        }
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Element>(g: &PoolGeom, dy: &[T]) -> Vec<T> {
    let inv = T::one() / T::from_f64((g.kernel * g.kernel) as f64);
    let mut dx = vec![T::zero(); g.planes * g.h * g.w];
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let gv = dy[(p * g.ho + oy) * g.wo + ox] * inv;
                for ki in 0..g.kernel {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + iy as usize * g.w + ix as usize] += gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Bin edges of adaptive pooling: `[floor(i*n/out), ceil((i+1)*n/out))`.
pub(crate) fn adaptive_bins(n: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out).map(|i| (i * n / out, ((i + 1) * n).div_ceil(out))).collect()
}

pub(crate) fn adaptive_avg_forward<T: Element>(planes: usize, h: usize, w: usize, oh: usize, ow: usize, x: &[T]) -> Vec<T> {
    let rows = adaptive_bins(h, oh);
    let cols = adaptive_bins(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1) in &rows {
            for &(x0, x1) in &cols {
                let mut acc = T::zero();
                for y in y0..y1 {
                    acc += plane[y * w + x0..y * w + x1].iter().copied().sum::<T>();
                }
                out.push(acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_backward<T: Element>(
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dy: &[T],
) -> Vec<T> {
    let rows = adaptive_bins(h, oh);
    let cols = adaptive_bins(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1)) in rows.iter().enumerate() {
            for (j, &(x0, x1)) in cols.iter().enumerate() {
                let gv = dy[(p * oh + i) * ow + j] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    plane[y * w + x0..y * w + x1].iter_mut().for_each(|v| *v += gv);
                }
            }
        }
    }
    dx
}
