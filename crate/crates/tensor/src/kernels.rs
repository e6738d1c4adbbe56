//! Raw loops behind the tape ops. Everything here works on flat row-major
//! slices; shape checking happens in `tape.rs`.
//!
//! Work is split across the leading (batch) dimension with rayon. Reductions
//! that cross the batch (weight gradients) are computed as per-item partials
//! and summed sequentially in item order, so results do not depend on the
//! thread count.

use rayon::prelude::*;

use crate::Element;

/// `out[b] = a[b] (m x k) * rhs[b] (k x n)`; when `shared_rhs`, every batch
/// item uses the same `rhs`.
pub(crate) fn matmul<T: Element>(
    a: &[T],
    rhs: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    out.par_chunks_mut(m * n).enumerate().for_each(|(bi, o)| {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let r = if shared_rhs {
            rhs
        } else {
            &rhs[bi * k * n..(bi + 1) * k * n]
        };
        matmul_into(a, r, o, m, k, n);
    });
    out
}

fn matmul_into<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// Gradient w.r.t. the left operand: `dA = dC * B^T`.
pub(crate) fn matmul_grad_lhs<T: Element>(
    grad: &[T],
    rhs: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * k];
    out.par_chunks_mut(m * k).enumerate().for_each(|(bi, o)| {
        let g = &grad[bi * m * n..(bi + 1) * m * n];
        let r = if shared_rhs {
            rhs
        } else {
            &rhs[bi * k * n..(bi + 1) * k * n]
        };
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &r[p * n..(p + 1) * n];
                let mut acc = T::zero();
                for (gv, bv) in grow.iter().zip(brow) {
                    acc = acc + *gv * *bv;
                }
                o[i * k + p] = acc;
            }
        }
    });
    out
}

/// Gradient w.r.t. the right operand: `dB = A^T * dC`, summed over the batch
/// when the right operand is shared.
pub(crate) fn matmul_grad_rhs<T: Element>(
    grad: &[T],
    a: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
) -> Vec<T> {
    let per_item: Vec<Vec<T>> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let g = &grad[bi * m * n..(bi + 1) * m * n];
            let a = &a[bi * m * k..(bi + 1) * m * k];
            let mut o = vec![T::zero(); k * n];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == T::zero() {
                        continue;
                    }
                    let orow = &mut o[p * n..(p + 1) * n];
                    for (ov, gv) in orow.iter_mut().zip(grow) {
                        *ov = *ov + aip * *gv;
                    }
                }
            }
            o
        })
        .collect();
    if shared_rhs {
        sum_in_order(per_item, k * n)
    } else {
        per_item.concat()
    }
}

pub(crate) fn sum_in_order<T: Element>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            *t = *t + p;
        }
    }
    total
}

/// NHWC convolution geometry with HWIO weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w * self.out_c
    }

    /// Input coordinate hit by output `o` and kernel offset `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub(crate) fn conv2d<T: Element>(input: &[T], weight: &[T], g: ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    out.par_chunks_mut(g.out_len()).enumerate().for_each(|(bi, o)| {
        let x = &input[bi * g.in_len()..(bi + 1) * g.in_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let orow = &mut o[(oy * g.out_w + ox) * g.out_c..][..g.out_c];
                for ky in 0..g.k_h {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else {
                            continue;
                        };
                        let xin = &x[(iy * g.in_w + ix) * g.in_c..][..g.in_c];
                        let wk = &weight[(ky * g.k_w + kx) * g.in_c * g.out_c..];
                        for (ci, &xv) in xin.iter().enumerate() {
                            let wrow = &wk[ci * g.out_c..(ci + 1) * g.out_c];
                            for (ov, wv) in orow.iter_mut().zip(wrow) {
                                *ov = *ov + xv * *wv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_grad_input<T: Element>(grad: &[T], weight: &[T], g: ConvGeom) -> Vec<T> {
    let mut dx = vec![T::zero(); g.batch * g.in_len()];
    dx.par_chunks_mut(g.in_len()).enumerate().for_each(|(bi, d)| {
        let go = &grad[bi * g.out_len()..(bi + 1) * g.out_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let grow = &go[(oy * g.out_w + ox) * g.out_c..][..g.out_c];
                for ky in 0..g.k_h {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else {
                            continue;
                        };
                        let drow = &mut d[(iy * g.in_w + ix) * g.in_c..][..g.in_c];
                        let wk = &weight[(ky * g.k_w + kx) * g.in_c * g.out_c..];
                        for (ci, dv) in drow.iter_mut().enumerate() {
                            let wrow = &wk[ci * g.out_c..(ci + 1) * g.out_c];
                            let mut acc = T::zero();
                            for (gv, wv) in grow.iter().zip(wrow) {
                                acc = acc + *gv * *wv;
                            }
                            *dv = *dv + acc;
                        }
                    }
                }
            }
        }
    });
    dx
}

pub(crate) fn conv2d_grad_weight<T: Element>(grad: &[T], input: &[T], g: ConvGeom) -> Vec<T> {
    let wlen = g.k_h * g.k_w * g.in_c * g.out_c;
    let parts: Vec<Vec<T>> = (0..g.batch)
        .into_par_iter()
        .map(|bi| {
            let x = &input[bi * g.in_len()..(bi + 1) * g.in_len()];
            let go = &grad[bi * g.out_len()..(bi + 1) * g.out_len()];
            let mut dw = vec![T::zero(); wlen];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let grow = &go[(oy * g.out_w + ox) * g.out_c..][..g.out_c];
                    for ky in 0..g.k_h {
                        let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else {
                            continue;
                        };
                        for kx in 0..g.k_w {
                            let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else {
                                continue;
                            };
                            let xin = &x[(iy * g.in_w + ix) * g.in_c..][..g.in_c];
                            let base = (ky * g.k_w + kx) * g.in_c * g.out_c;
                            for (ci, &xv) in xin.iter().enumerate() {
                                let drow = &mut dw[base + ci * g.out_c..][..g.out_c];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv = *dv + xv * *gv;
                                }
                            }
                        }
                    }
                }
            }
            dw
        })
        .collect();
    sum_in_order(parts, wlen)
}

/// Non-overlapping `size x size` max pooling over NHWC input (floor mode).
/// Returns the pooled values and, per output element, the flat input index
/// that won. Ties go to the first element in row-major window order.
pub(crate) fn maxpool2d<T: Element>(
    input: &[T],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    size: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(batch * oh * ow * c);
    let mut arg = Vec::with_capacity(batch * oh * ow * c);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_ix = 0;
                    for dy in 0..size {
                        for dx in 0..size {
                            let ix = ((b * h + oy * size + dy) * w + ox * size + dx) * c + ch;
                            if input[ix] > best {
                                best = input[ix];
                                best_ix = ix;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_ix);
                }
            }
        }
    }
    (out, arg)
}

/// Copies `src` (shape `shape`) into axis order `axes`.
pub(crate) fn permute<T: Element>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_matrix() {
        let src: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let out = permute(&src, &[2, 3], &[1, 0]);
        assert_eq!(out, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn permute_identity_is_copy() {
        let src: Vec<f64> = (0..24).map(|v| v as f64).collect();
        assert_eq!(permute(&src, &[2, 3, 4], &[0, 1, 2]), src);
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let x = vec![1.0f32, 1.0, 1.0, 1.0];
        let (v, a) = maxpool2d(&x, 1, 2, 2, 1, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
    }
}
