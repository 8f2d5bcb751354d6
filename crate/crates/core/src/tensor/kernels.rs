//! Raw forward/backward kernels over flat NCHW buffers.
//!
//! The stride-1 convolution paths are written as shifted-slice
//! multiply-accumulate loops so the compiler can vectorize them; everything
//! runs single-threaded and accumulates in a fixed order, which keeps all
//! results bit-reproducible.

use super::{Scalar, Shape};

/// Dot product with four independent accumulators (fixed order, better ILP).
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::ZERO;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (o, i) in y.iter_mut().zip(x) {
        *o += alpha * *i;
    }
}

pub fn conv2d_out_shape(input: Shape, weight: Shape, stride: usize, padding: usize) -> Shape {
    let oh = (input.h + 2 * padding - weight.h) / stride + 1;
    let ow = (input.w + 2 * padding - weight.w) / stride + 1;
    Shape {
        n: input.n,
        c: weight.n,
        h: oh,
        w: ow,
    }
}

/// `weight` is `(OC, IC, K, K)`; zero padding; `bias` is per output channel.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    ishape: Shape,
    weight: &[T],
    wshape: Shape,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
    out: &mut [T],
    oshape: Shape,
) {
    let k = wshape.h;
    let (iw, ih) = (ishape.w, ishape.h);
    let (ow, oh) = (oshape.w, oshape.h);
    let p = padding;
    for n in 0..ishape.n {
        for oc in 0..oshape.c {
            let out_plane = &mut out[oshape.plane(n, oc)..][..oh * ow];
            let b = bias.map_or(T::ZERO, |b| b[oc]);
            out_plane.fill(b);
            for ic in 0..ishape.c {
                let in_plane = &input[ishape.plane(n, ic)..][..ih * iw];
                let wbase = ((oc * ishape.c + ic) * k) * k;
                if stride == 1 {
                    for kh in 0..k {
                        let oh_lo = p.saturating_sub(kh);
                        let oh_hi = (ih + p).saturating_sub(kh).min(oh);
                        for kw in 0..k {
                            let wv = weight[wbase + kh * k + kw];
                            let ow_lo = p.saturating_sub(kw);
                            let ow_hi = (iw + p).saturating_sub(kw).min(ow);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let len = ow_hi - ow_lo;
                            for r in oh_lo..oh_hi {
                                let src = (r + kh - p) * iw + ow_lo + kw - p;
                                axpy(
                                    wv,
                                    &in_plane[src..src + len],
                                    &mut out_plane[r * ow + ow_lo..][..len],
                                );
                            }
                        }
                    }
                } else {
                    for r in 0..oh {
                        for cx in 0..ow {
                            let mut acc = T::ZERO;
                            for kh in 0..k {
                                let y = r * stride + kh;
                                if y < p || y - p >= ih {
                                    continue;
                                }
                                for kw in 0..k {
                                    let x = cx * stride + kw;
                                    if x < p || x - p >= iw {
                                        continue;
                                    }
                                    acc += weight[wbase + kh * k + kw]
                                        * in_plane[(y - p) * iw + (x - p)];
                                }
                            }
                            out_plane[r * ow + cx] += acc;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &[T],
    oshape: Shape,
    weight: &[T],
    wshape: Shape,
    stride: usize,
    padding: usize,
    grad_in: &mut [T],
    ishape: Shape,
) {
    let k = wshape.h;
    let (iw, ih) = (ishape.w, ishape.h);
    let (ow, oh) = (oshape.w, oshape.h);
    let p = padding;
    for n in 0..ishape.n {
        for ic in 0..ishape.c {
            let gin_plane = &mut grad_in[ishape.plane(n, ic)..][..ih * iw];
            for oc in 0..oshape.c {
                let g_plane = &grad_out[oshape.plane(n, oc)..][..oh * ow];
                let wbase = ((oc * ishape.c + ic) * k) * k;
                if stride == 1 {
                    for kh in 0..k {
                        // row r receives from output row r + p - kh
                        let r_lo = kh.saturating_sub(p);
                        let r_hi = (oh + kh).saturating_sub(p).min(ih);
                        for kw in 0..k {
                            let wv = weight[wbase + kh * k + kw];
                            let c_lo = kw.saturating_sub(p);
                            let c_hi = (ow + kw).saturating_sub(p).min(iw);
                            if c_lo >= c_hi {
                                continue;
                            }
                            let len = c_hi - c_lo;
                            for r in r_lo..r_hi {
                                let src = (r + p - kh) * ow + c_lo + p - kw;
                                axpy(
                                    wv,
                                    &g_plane[src..src + len],
                                    &mut gin_plane[r * iw + c_lo..][..len],
                                );
                            }
                        }
                    }
                } else {
                    for r in 0..oh {
                        for cx in 0..ow {
                            let g = g_plane[r * ow + cx];
                            for kh in 0..k {
                                let y = r * stride + kh;
                                if y < p || y - p >= ih {
                                    continue;
                                }
                                for kw in 0..k {
                                    let x = cx * stride + kw;
                                    if x < p || x - p >= iw {
                                        continue;
                                    }
                                    gin_plane[(y - p) * iw + (x - p)] +=
                                        g * weight[wbase + kh * k + kw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_weight<T: Scalar>(
    input: &[T],
    ishape: Shape,
    grad_out: &[T],
    oshape: Shape,
    wshape: Shape,
    stride: usize,
    padding: usize,
    grad_w: &mut [T],
    grad_b: Option<&mut [T]>,
) {
    let k = wshape.h;
    let (iw, ih) = (ishape.w, ishape.h);
    let (ow, oh) = (oshape.w, oshape.h);
    let p = padding;
    for oc in 0..oshape.c {
        for ic in 0..ishape.c {
            let wbase = ((oc * ishape.c + ic) * k) * k;
            for kh in 0..k {
                for kw in 0..k {
                    let mut acc = T::ZERO;
                    for n in 0..ishape.n {
                        let in_plane = &input[ishape.plane(n, ic)..][..ih * iw];
                        let g_plane = &grad_out[oshape.plane(n, oc)..][..oh * ow];
                        if stride == 1 {
                            let r_lo = p.saturating_sub(kh);
                            let r_hi = (ih + p).saturating_sub(kh).min(oh);
                            let c_lo = p.saturating_sub(kw);
                            let c_hi = (iw + p).saturating_sub(kw).min(ow);
                            if c_lo >= c_hi {
                                continue;
                            }
                            let len = c_hi - c_lo;
                            for r in r_lo..r_hi {
                                let src = (r + kh - p) * iw + c_lo + kw - p;
                                acc += dot(
                                    &g_plane[r * ow + c_lo..][..len],
                                    &in_plane[src..src + len],
                                );
                            }
                        } else {
                            for r in 0..oh {
                                let y = r * stride + kh;
                                if y < p || y - p >= ih {
                                    continue;
                                }
                                for cx in 0..ow {
                                    let x = cx * stride + kw;
                                    if x < p || x - p >= iw {
                                        continue;
                                    }
                                    acc += g_plane[r * ow + cx] * in_plane[(y - p) * iw + (x - p)];
                                }
                            }
                        }
                    }
                    grad_w[wbase + kh * k + kw] += acc;
                }
            }
        }
    }
    if let Some(gb) = grad_b {
        for oc in 0..oshape.c {
            let mut acc = T::ZERO;
            for n in 0..oshape.n {
                for g in &grad_out[oshape.plane(n, oc)..][..oh * ow] {
                    acc += *g;
                }
            }
            gb[oc] += acc;
        }
    }
}

/// Transposed convolution, kernel 2x2, stride 2. `weight` is `(IC, OC, 2, 2)`.
/// Output is exactly `(N, OC, 2H, 2W)`.
pub fn conv_transpose2d_forward<T: Scalar>(
    input: &[T],
    ishape: Shape,
    weight: &[T],
    oc_count: usize,
    bias: Option<&[T]>,
    out: &mut [T],
    oshape: Shape,
) {
    let (iw, ih) = (ishape.w, ishape.h);
    let ow = oshape.w;
    for n in 0..ishape.n {
        for oc in 0..oc_count {
            let out_plane = &mut out[oshape.plane(n, oc)..][..oshape.h * ow];
            let b = bias.map_or(T::ZERO, |b| b[oc]);
            out_plane.fill(b);
            for ic in 0..ishape.c {
                let in_plane = &input[ishape.plane(n, ic)..][..ih * iw];
                let wbase = ((ic * oc_count + oc) * 2) * 2;
                for di in 0..2 {
                    for dj in 0..2 {
                        let wv = weight[wbase + di * 2 + dj];
                        for r in 0..ih {
                            let orow = (2 * r + di) * ow + dj;
                            let irow = r * iw;
                            for c in 0..iw {
                                out_plane[orow + 2 * c] += wv * in_plane[irow + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_transpose2d_backward<T: Scalar>(
    input: &[T],
    ishape: Shape,
    weight: &[T],
    oc_count: usize,
    grad_out: &[T],
    oshape: Shape,
    grad_in: &mut [T],
    grad_w: &mut [T],
    grad_b: Option<&mut [T]>,
) {
    let (iw, ih) = (ishape.w, ishape.h);
    let ow = oshape.w;
    // d input: the matching stride-2 convolution of the output gradient.
    for n in 0..ishape.n {
        for ic in 0..ishape.c {
            let gin_plane = &mut grad_in[ishape.plane(n, ic)..][..ih * iw];
            for oc in 0..oc_count {
                let g_plane = &grad_out[oshape.plane(n, oc)..][..oshape.h * ow];
                let wbase = ((ic * oc_count + oc) * 2) * 2;
                for di in 0..2 {
                    for dj in 0..2 {
                        let wv = weight[wbase + di * 2 + dj];
                        for r in 0..ih {
                            let grow = (2 * r + di) * ow + dj;
                            let irow = r * iw;
                            for c in 0..iw {
                                gin_plane[irow + c] += wv * g_plane[grow + 2 * c];
                            }
                        }
                    }
                }
            }
        }
    }
    for ic in 0..ishape.c {
        for oc in 0..oc_count {
            let wbase = ((ic * oc_count + oc) * 2) * 2;
            for di in 0..2 {
                for dj in 0..2 {
                    let mut acc = T::ZERO;
                    for n in 0..ishape.n {
                        let in_plane = &input[ishape.plane(n, ic)..][..ih * iw];
                        let g_plane = &grad_out[oshape.plane(n, oc)..][..oshape.h * ow];
                        for r in 0..ih {
                            let grow = (2 * r + di) * ow + dj;
                            let irow = r * iw;
                            for c in 0..iw {
                                acc += in_plane[irow + c] * g_plane[grow + 2 * c];
                            }
                        }
                    }
                    grad_w[wbase + di * 2 + dj] += acc;
                }
            }
        }
    }
    if let Some(gb) = grad_b {
        for oc in 0..oc_count {
            let mut acc = T::ZERO;
            for n in 0..oshape.n {
                for g in &grad_out[oshape.plane(n, oc)..][..oshape.h * ow] {
                    acc += *g;
                }
            }
            gb[oc] += acc;
        }
    }
}

/// 2x2 max pooling; ties go to the first element in row-major window order.
/// `argmax` records, per output element, the flat in-plane input index.
pub fn maxpool2_forward<T: Scalar>(
    input: &[T],
    ishape: Shape,
    out: &mut [T],
    oshape: Shape,
    argmax: &mut Vec<u32>,
) {
    let (iw, _ih) = (ishape.w, ishape.h);
    let (ow, oh) = (oshape.w, oshape.h);
    argmax.clear();
    argmax.reserve(oshape.numel());
    for n in 0..ishape.n {
        for c in 0..ishape.c {
            let in_plane = &input[ishape.plane(n, c)..][..ishape.h * iw];
            let out_plane = &mut out[oshape.plane(n, c)..][..oh * ow];
            for r in 0..oh {
                for cx in 0..ow {
                    let base = (2 * r) * iw + 2 * cx;
                    let mut best_idx = base;
                    let mut best = in_plane[base];
                    for (di, dj) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = base + di * iw + dj;
                        let v = in_plane[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                    out_plane[r * ow + cx] = best;
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
}

pub fn maxpool2_backward<T: Scalar>(
    grad_out: &[T],
    oshape: Shape,
    argmax: &[u32],
    grad_in: &mut [T],
    ishape: Shape,
) {
    let plane = oshape.h * oshape.w;
    for n in 0..oshape.n {
        for c in 0..oshape.c {
            let off = oshape.plane(n, c);
            let gin_plane = &mut grad_in[ishape.plane(n, c)..][..ishape.h * ishape.w];
            for i in 0..plane {
                gin_plane[argmax[off + i] as usize] += grad_out[off + i];
            }
        }
    }
}
