//! Convolution, pooling and transposed-convolution primitives with their
//! hand-written backward passes.

use super::real::Real;
use super::tensor::Tensor;

/// Square convolution, stride 1, "same" zero padding (`k` odd).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    fn pad(&self) -> usize {
        self.k / 2
    }
}

fn im2col<T: Real>(x: &Tensor<T>, k: usize, pad: usize) -> Vec<T> {
    let (c, h, w) = x.shape();
    let hw = h * w;
    let mut col = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let src = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[y * w + xx] = src[sy * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Tensor<T> {
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[sy * w + sx as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d<T: Real>(x: &Tensor<T>, shape: ConvShape, weight: &[T], bias: &[T]) -> Tensor<T> {
    assert_eq!(x.channels, shape.cin, "conv input channels");
    let (h, w) = (x.height, x.width);
    let hw = h * w;
    let mut out = Tensor::zeros(shape.cout, h, w);
    for (o, b) in bias.iter().enumerate() {
        out.data[o * hw..(o + 1) * hw].fill(*b);
    }
    let kk = shape.cin * shape.k * shape.k;
    if shape.k == 1 {
        T::gemm(shape.cout, kk, hw, T::one(), weight, false, &x.data, false, T::one(), &mut out.data);
    } else {
        let col = im2col(x, shape.k, shape.pad());
        T::gemm(shape.cout, kk, hw, T::one(), weight, false, &col, false, T::one(), &mut out.data);
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    shape: ConvShape,
    weight: &[T],
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Tensor<T> {
    let (h, w) = (x.height, x.width);
    let hw = h * w;
    let kk = shape.cin * shape.k * shape.k;
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out.data[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
    }
    if shape.k == 1 {
        T::gemm(shape.cout, hw, kk, T::one(), &grad_out.data, false, &x.data, true, T::one(), grad_weight);
        let mut dx = Tensor::zeros(shape.cin, h, w);
        T::gemm(kk, shape.cout, hw, T::one(), weight, true, &grad_out.data, false, T::zero(), &mut dx.data);
        dx
    } else {
        let col = im2col(x, shape.k, shape.pad());
        T::gemm(shape.cout, hw, kk, T::one(), &grad_out.data, false, &col, true, T::one(), grad_weight);
        let mut dcol = vec![T::zero(); kk * hw];
        T::gemm(kk, shape.cout, hw, T::one(), weight, true, &grad_out.data, false, T::zero(), &mut dcol);
        col2im(&dcol, shape.cin, h, w, shape.k, shape.pad())
    }
}

/// 2×2 max pooling, stride 2. Returns the pooled map and, per output cell,
/// the offset (0..4) of the winning input.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut arg = vec![0u8; c * oh * ow];
    for ci in 0..c {
        let src = x.channel(ci);
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = src[(2 * y) * w + 2 * xx];
                let mut best_k = 0u8;
                for k in 1..4u8 {
                    let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                    let v = src[(2 * y + dy) * w + 2 * xx + dx];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                let o = (ci * oh + y) * ow + xx;
                out.data[o] = best;
                arg[o] = best_k;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(grad_out: &Tensor<T>, arg: &[u8], h: usize, w: usize) -> Tensor<T> {
    let (c, oh, ow) = grad_out.shape();
    let mut dx = Tensor::zeros(c, h, w);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let o = (ci * oh + y) * ow + xx;
                let k = arg[o] as usize;
                dx.data[(ci * h + 2 * y + k / 2) * w + 2 * xx + k % 2] += grad_out.data[o];
            }
        }
    }
    dx
}

/// 2×2 transposed convolution with stride 2 (exact 2× upsampling).
/// Weight layout is `[cin][cout][2][2]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpShape {
    pub cin: usize,
    pub cout: usize,
}

impl UpShape {
    pub fn weight_len(&self) -> usize {
        self.cin * self.cout * 4
    }
}

pub fn upconv2<T: Real>(x: &Tensor<T>, shape: UpShape, weight: &[T], bias: &[T]) -> Tensor<T> {
    assert_eq!(x.channels, shape.cin, "upconv input channels");
    let (h, w) = (x.height, x.width);
    let hw = h * w;
    let co4 = shape.cout * 4;
    let mut y = vec![T::zero(); co4 * hw];
    T::gemm(co4, shape.cin, hw, T::one(), weight, true, &x.data, false, T::zero(), &mut y);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(shape.cout, oh, ow);
    for o in 0..shape.cout {
        for d in 0..4 {
            let (dy, dx) = (d / 2, d % 2);
            let row = &y[(o * 4 + d) * hw..(o * 4 + d + 1) * hw];
            for yy in 0..h {
                for xx in 0..w {
                    out.data[(o * oh + 2 * yy + dy) * ow + 2 * xx + dx] = row[yy * w + xx] + bias[o];
                }
            }
        }
    }
    out
}

pub fn upconv2_backward<T: Real>(
    x: &Tensor<T>,
    shape: UpShape,
    weight: &[T],
    grad_out: &Tensor<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
) -> Tensor<T> {
    let (h, w) = (x.height, x.width);
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let co4 = shape.cout * 4;
    let mut dy_mat = vec![T::zero(); co4 * hw];
    for o in 0..shape.cout {
        let plane = &grad_out.data[o * oh * ow..(o + 1) * oh * ow];
        grad_bias[o] += plane.iter().copied().sum::<T>();
        for d in 0..4 {
            let (dy, dx) = (d / 2, d % 2);
            let row = &mut dy_mat[(o * 4 + d) * hw..(o * 4 + d + 1) * hw];
            for yy in 0..h {
                for xx in 0..w {
                    row[yy * w + xx] = plane[(2 * yy + dy) * ow + 2 * xx + dx];
                }
            }
        }
    }
    T::gemm(shape.cin, hw, co4, T::one(), &x.data, false, &dy_mat, true, T::one(), grad_weight);
    let mut dx = Tensor::zeros(shape.cin, h, w);
    T::gemm(shape.cin, co4, hw, T::one(), weight, false, &dy_mat, false, T::zero(), &mut dx.data);
    dx
}
