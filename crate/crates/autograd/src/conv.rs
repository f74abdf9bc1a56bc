//! Same-padding stride-1 convolution kernels (NCHW).
//!
//! The three kernels close under differentiation:
//! the input-gradient of `conv2d` is `conv2d` with a flipped/transposed
//! weight, and both partials of `conv2d_weight_grad` are again `conv2d`.

use crate::float::Float;
use crate::tensor::Tensor;

fn im2col<T: Float>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for u in 0..k {
            for v in 0..k {
                let row = ((ci * k + u) * k + v) * hw;
                let dst = &mut cols[row..row + hw];
                let du = u as isize - pad;
                let dv = v as isize - pad;
                for i in 0..h {
                    let si = i as isize + du;
                    let drow = &mut dst[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        drow.iter_mut().for_each(|d| *d = T::zero());
                        continue;
                    }
                    let srow = &plane[si as usize * w..(si as usize + 1) * w];
                    // valid j range: 0 <= j + dv < w
                    let j0 = (-dv).max(0) as usize;
                    let j1 = ((w as isize - dv).min(w as isize)).max(0) as usize;
                    for d in drow[..j0.min(w)].iter_mut() {
                        *d = T::zero();
                    }
                    if j1 > j0 {
                        let s0 = (j0 as isize + dv) as usize;
                        drow[j0..j1].copy_from_slice(&srow[s0..s0 + (j1 - j0)]);
                    }
                    for d in drow[j1.max(j0)..].iter_mut() {
                        *d = T::zero();
                    }
                }
            }
        }
    }
}

fn dims4(t: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(t.len(), 4, "expected a rank-4 tensor, got {t:?}");
    (t[0], t[1], t[2], t[3])
}

/// `y[b,o] = sum_c w[o,c] * x[b,c]` with same zero padding.
pub fn conv2d<T: Float>(x: &Tensor<T>, weight: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = dims4(x.shape());
    let (o, wc, k, k2) = dims4(weight.shape());
    assert!(
        wc == c && k == k2 && k % 2 == 1,
        "conv2d: input {:?} incompatible with weight {:?}",
        x.shape(),
        weight.shape()
    );
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = vec![T::zero(); b * o * hw];
    let mut cols = vec![T::zero(); ckk * hw];
    for bi in 0..b {
        im2col(&x.data()[bi * c * hw..(bi + 1) * c * hw], c, h, w, k, &mut cols);
        unsafe {
            T::gemm(
                o,
                ckk,
                hw,
                T::one(),
                weight.data().as_ptr(),
                ckk as isize,
                1,
                cols.as_ptr(),
                hw as isize,
                1,
                T::zero(),
                out[bi * o * hw..].as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    }
    Tensor::from_vec(&[b, o, h, w], out).expect("conv2d output")
}

/// Gradient of `conv2d(x, w)` w.r.t. `w` given upstream `g`.
pub fn conv2d_weight_grad<T: Float>(x: &Tensor<T>, g: &Tensor<T>, k: usize) -> Tensor<T> {
    let (b, c, h, w) = dims4(x.shape());
    let (gb, o, gh, gw) = dims4(g.shape());
    assert!(
        gb == b && gh == h && gw == w,
        "conv2d_weight_grad: input {:?} vs upstream {:?}",
        x.shape(),
        g.shape()
    );
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = vec![T::zero(); o * ckk];
    let mut cols = vec![T::zero(); ckk * hw];
    for bi in 0..b {
        im2col(&x.data()[bi * c * hw..(bi + 1) * c * hw], c, h, w, k, &mut cols);
        unsafe {
            // out[o, ckk] += g_b[o, hw] * cols^T[hw, ckk]
            T::gemm(
                o,
                hw,
                ckk,
                T::one(),
                g.data()[bi * o * hw..].as_ptr(),
                hw as isize,
                1,
                cols.as_ptr(),
                1,
                hw as isize,
                T::one(),
                out.as_mut_ptr(),
                ckk as isize,
                1,
            );
        }
    }
    Tensor::from_vec(&[o, c, k, k], out).expect("weight grad output")
}

/// `[O,C,k,k] -> [C,O,k,k]` with both spatial axes reversed.
pub fn flip_transpose<T: Float>(weight: &Tensor<T>) -> Tensor<T> {
    let (o, c, k, _) = dims4(weight.shape());
    let src = weight.data();
    let mut out = vec![T::zero(); src.len()];
    for oi in 0..o {
        for ci in 0..c {
            for u in 0..k {
                for v in 0..k {
                    out[((ci * o + oi) * k + (k - 1 - u)) * k + (k - 1 - v)] =
                        src[((oi * c + ci) * k + u) * k + v];
                }
            }
        }
    }
    Tensor::from_vec(&[c, o, k, k], out).expect("flip transpose")
}

/// Flat source indices of the 2x2/stride-2 max for each output cell.
pub fn max_pool2_indices<T: Float>(x: &Tensor<T>) -> (Vec<usize>, Vec<usize>) {
    let (b, c, h, w) = dims4(x.shape());
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * i + di) * w + 2 * j + dj;
                    // first maximum wins on ties
                    if data[cand] > data[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    (idx, vec![b, c, oh, ow])
}
