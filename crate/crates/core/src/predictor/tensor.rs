//! Channel-major feature maps and the primitive layers of the predictor, each
//! with its forward and reverse-mode rule.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type of the network: `f32` for training, `f64` for gradient checks.
pub trait Real: Float + AddAssign + SubAssign + MulAssign + Debug + Default + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );
}

/// Strides of a row-major matrix viewed as `rows x cols`, optionally transposed.
fn strides(cols_stored: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, cols_stored as isize)
    } else {
        (cols_stored as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if a_trans { strides(m, true) } else { strides(k, false) };
                let (rsb, csb) = if b_trans { strides(k, true) } else { strides(n, false) };
                // SAFETY: the asserts above bound every index reached with
                // these strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A `channels x height x width` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Zero-padded `k x k` patches of `x`, laid out `(c * k * k) x (h * w)`.
pub fn im2col_zero<T: Real>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let (c, h, w) = x.shape();
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ch in 0..c {
        let plane = &x.data[ch * hw..(ch + 1) * hw];
        for dy in -r..=r {
            for dx in -r..=r {
                let row = (ch * k + (dy + r) as usize) * k + (dx + r) as usize;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx.max(0)).max(0) as usize;
                    for xx in x0..x1 {
                        dst_row[xx] = src_row[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_zero`]: scatters patch gradients back onto the input.
pub fn col2im_zero<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Tensor<T> {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for dy in -r..=r {
            for dx in -r..=r {
                let row = (ch * k + (dy + r) as usize) * k + (dx + r) as usize;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx.max(0)).max(0) as usize;
                    let base = ch * hw + sy as usize * w;
                    for xx in x0..x1 {
                        out.data[base + (xx as isize + dx) as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

/// Same-size convolution (cross-correlation) with zero padding. `weight` is
/// `out x (in * k * k)`. Returns the output and the patch matrix for reuse in
/// the backward pass (`None` for 1x1 kernels, whose patches are the input).
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_c: usize,
    k: usize,
) -> (Tensor<T>, Option<Vec<T>>) {
    let (c, h, w) = x.shape();
    let hw = h * w;
    let depth = c * k * k;
    assert_eq!(weight.len(), out_c * depth, "conv weight shape");
    assert_eq!(bias.len(), out_c, "conv bias shape");
    let mut out = Tensor::zeros(out_c, h, w);
    for (o, b) in bias.iter().enumerate() {
        out.data[o * hw..(o + 1) * hw].fill(*b);
    }
    let cols = if k == 1 { None } else { Some(im2col_zero(x, k)) };
    let patches = cols.as_deref().unwrap_or(&x.data);
    T::gemm(out_c, depth, hw, T::one(), weight, false, patches, false, T::one(), &mut out.data);
    (out, cols)
}

/// Reverse rule of [`conv2d`]. Accumulates into `grad_w` and `grad_b` and
/// returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    cols: Option<&[T]>,
    weight: &[T],
    grad_out: &Tensor<T>,
    k: usize,
    grad_w: &mut [T],
    grad_b: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let (c, h, w) = x.shape();
    let hw = h * w;
    let depth = c * k * k;
    let out_c = grad_out.c;
    let patches = cols.unwrap_or(&x.data);
    T::gemm(out_c, hw, depth, T::one(), &grad_out.data, false, patches, true, T::one(), grad_w);
    for (o, gb) in grad_b.iter_mut().enumerate() {
        let mut s = T::zero();
        for v in &grad_out.data[o * hw..(o + 1) * hw] {
            s += *v;
        }
        *gb += s;
    }
    if !need_input_grad {
        return None;
    }
    let mut dcols = vec![T::zero(); depth * hw];
    T::gemm(depth, out_c, hw, T::one(), weight, true, &grad_out.data, false, T::zero(), &mut dcols);
    if k == 1 {
        Some(Tensor {
            c,
            h,
            w,
            data: dcols,
        })
    } else {
        Some(col2im_zero(&dcols, c, h, w, k))
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
    }
}

pub fn relu_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    Tensor {
        c: y.c,
        h: y.h,
        w: y.w,
        data: y
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

/// Stride-2 2x2 mean pooling; `h` and `w` must be even.
pub fn pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dimensions");
    let (oh, ow) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let s = x.at(ch, 2 * y, 2 * xx)
                    + x.at(ch, 2 * y, 2 * xx + 1)
                    + x.at(ch, 2 * y + 1, 2 * xx)
                    + x.at(ch, 2 * y + 1, 2 * xx + 1);
                out.data[(ch * oh + y) * ow + xx] = s * q;
            }
        }
    }
    out
}

pub fn pool2_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let (c, oh, ow) = grad.shape();
    let q = T::lit(0.25);
    let mut out = Tensor::zeros(c, 2 * oh, 2 * ow);
    for ch in 0..c {
        for y in 0..2 * oh {
            for xx in 0..2 * ow {
                out.data[(ch * 2 * oh + y) * 2 * ow + xx] = grad.at(ch, y / 2, xx / 2) * q;
            }
        }
    }
    out
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let mut out = Tensor::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out.data[(ch * 2 * h + y) * 2 * w + xx] = x.at(ch, y / 2, xx / 2);
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = grad.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(ch * oh + y / 2) * ow + xx / 2] += grad.at(ch, y, xx);
            }
        }
    }
    out
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "add shapes");
    let mut out = a.clone();
    out.add_assign(b);
    out
}

/// Channel concatenation `[a; b]`.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial shapes");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn direct_conv(x: &Tensor<f64>, wt: &[f64], b: &[f64], out_c: usize, k: usize) -> Tensor<f64> {
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(out_c, x.h, x.w);
        for o in 0..out_c {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut s = b[o];
                    for c in 0..x.c {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (sy, sx) = (y + dy, xx + dx);
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wi = ((o * x.c + c) * k + (dy + r) as usize) * k + (dx + r) as usize;
                                s += wt[wi] * x.at(c, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.data[(o * x.h + y as usize) * x.w + xx as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for k in [1, 3, 5] {
            let x = random(3, 5, 6, k as u64);
            let wt = random(4, 3 * k, k, 10 + k as u64).data;
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let (out, _) = conv2d(&x, &wt, &b, 4, k);
            let direct = direct_conv(&x, &wt, &b, 4, k);
            for (a, d) in out.data.iter().zip(&direct.data) {
                assert!((a - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_conv_weight_gradient_is_input_upstream_correlation() {
        // For out = W * x with one output channel, dL/dW[c, dy, dx] equals
        // sum_p upstream(p) * x_c(p + (dy, dx)) with zero padding.
        let x = random(2, 4, 5, 1);
        let up = random(1, 4, 5, 2);
        let wt = random(1, 2 * 3, 3, 3).data;
        let (_, cols) = conv2d(&x, &wt, &[0.0], 1, 3);
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; 1];
        conv2d_backward(&x, cols.as_deref(), &wt, &up, 3, &mut gw, &mut gb, false);
        for c in 0..2 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let mut s = 0.0;
                    for y in 0..4isize {
                        for xx in 0..5isize {
                            let (sy, sx) = (y + dy, xx + dx);
                            if sy >= 0 && sx >= 0 && sy < 4 && sx < 5 {
                                s += up.at(0, y as usize, xx as usize) * x.at(c, sy as usize, sx as usize);
                            }
                        }
                    }
                    let wi = (c * 3 + (dy + 1) as usize) * 3 + (dx + 1) as usize;
                    assert!((gw[wi] - s).abs() < 1e-12);
                }
            }
        }
        assert!((gb[0] - up.data.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = random(2, 4, 3, 5);
        let cols = im2col_zero(&x, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y: Vec<f64> = (0..cols.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im_zero(&y, 2, 4, 3, 3);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let x = random(2, 4, 6, 7);
        let g = random(2, 2, 3, 8);
        let lhs: f64 = pool2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&pool2_backward(&g).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let small = random(2, 2, 3, 9);
        let big = random(2, 4, 6, 10);
        let lhs: f64 = upsample2(&small).data.iter().zip(&big.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = small.data.iter().zip(&upsample2_backward(&big).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gemm_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 3, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T stored as 3x2
        let at = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0f32; 4];
        f32::gemm(2, 3, 2, 1.0, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c2, c);
        // b^T stored as 2x3
        let bt = [1.0f32, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c3 = [0.0f32; 4];
        f32::gemm(2, 3, 2, 1.0, &a, false, &bt, true, 0.0, &mut c3);
        assert_eq!(c3, c);
    }
}
