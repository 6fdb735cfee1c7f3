use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

/// Floating point element type of tensors: `f32` for coding and training,
/// `f64` for gradient checks.
pub trait Real: Float + Default + Debug + Send + Sync + AddAssign + MulAssign + Sum + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha·a·b + beta·c` on row-major buffers. `a` is `m×k` (stored
    /// `k×m` when `a_t`), `b` is `k×n` (stored `n×k` when `b_t`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        beta: Self,
    );
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(v: f64) -> Self {
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
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                beta: Self,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                // SAFETY: the asserts above bound every index the kernel
                // touches; strides describe dense row-major storage.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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

/// Dense row-major tensor. Feature maps are `(channels, height, width)`;
/// convolution weights are `(out, in, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(
            self.shape.len(),
            3,
            "expected a feature map, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn same_padding(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) / 2
}

/// Unfolds `(c, h, w)` into a `(c·k·k) × (h·w)` patch matrix.
fn im2col<T: Real>(x: &Tensor<T>, kernel: usize, dilation: usize) -> Vec<T> {
    let (c, h, w) = x.chw();
    let pad = same_padding(kernel, dilation) as isize;
    let hw = h * w;
    let mut col = vec![T::zero(); c * kernel * kernel * hw];
    let src = x.data();
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..kernel {
            let dy = (ky * dilation) as isize - pad;
            for kx in 0..kernel {
                let dx = (kx * dilation) as isize - pad;
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        drow[xx] = srow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Folds a patch-matrix gradient back onto `(c, h, w)`, accumulating.
fn col2im<T: Real>(col: &[T], dx: &mut Tensor<T>, kernel: usize, dilation: usize) {
    let (c, h, w) = dx.chw();
    let pad = same_padding(kernel, dilation) as isize;
    let hw = h * w;
    let out = dx.data_mut();
    for ci in 0..c {
        for ky in 0..kernel {
            let dy = (ky * dilation) as isize - pad;
            for kx in 0..kernel {
                let ddx = (kx * dilation) as isize - pad;
                let row = (ci * kernel + ky) * kernel + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-ddx).max(0) as usize;
                    let x1 = (w as isize - ddx).min(w as isize).max(0) as usize;
                    let base = ci * hw + sy as usize * w;
                    for xx in x0..x1 {
                        out[base + (xx as isize + ddx) as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
}

fn check_conv<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> (usize, usize) {
    let (c, _, _) = x.chw();
    let ws = weight.shape();
    assert!(
        ws.len() == 4 && ws[1] == c && ws[2] == ws[3] && ws[2] % 2 == 1,
        "weight {ws:?} does not fit input with {c} channels"
    );
    assert_eq!(bias.shape(), &[ws[0]], "bias shape");
    (ws[0], ws[2])
}

/// Same-size cross-correlation with bias; 3×3 kernels pad by `dilation`.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, dilation: usize) -> Tensor<T> {
    let (co, kernel) = check_conv(x, weight, bias);
    let (c, h, w) = x.chw();
    let hw = h * w;
    let mut out = Tensor::zeros(&[co, h, w]);
    for (o, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        plane.fill(bias.data()[o]);
    }
    let kk = c * kernel * kernel;
    if kernel == 1 {
        T::gemm(
            co,
            kk,
            hw,
            weight.data(),
            false,
            x.data(),
            false,
            out.data_mut(),
            T::one(),
        );
    } else {
        let col = im2col(x, kernel, dilation);
        T::gemm(
            co,
            kk,
            hw,
            weight.data(),
            false,
            &col,
            false,
            out.data_mut(),
            T::one(),
        );
    }
    out
}

/// Accumulates weight, bias and (optionally) input gradients of [`conv2d`].
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dilation: usize,
    dout: &Tensor<T>,
    dx: Option<&mut Tensor<T>>,
    dweight: &mut Tensor<T>,
    dbias: &mut Tensor<T>,
) {
    let (c, h, w) = x.chw();
    let ws = weight.shape();
    let (co, kernel) = (ws[0], ws[2]);
    let hw = h * w;
    let kk = c * kernel * kernel;
    assert_eq!(dout.shape(), &[co, h, w]);
    for (o, plane) in dout.data().chunks(hw).enumerate() {
        dbias.data_mut()[o] += plane.iter().copied().sum();
    }
    let col_owned;
    let col: &[T] = if kernel == 1 {
        x.data()
    } else {
        col_owned = im2col(x, kernel, dilation);
        &col_owned
    };
    // dW (co × kk) += dout (co × hw) · colᵀ (hw × kk)
    T::gemm(
        co,
        hw,
        kk,
        dout.data(),
        false,
        col,
        true,
        dweight.data_mut(),
        T::one(),
    );
    if let Some(dx) = dx {
        assert_eq!(dx.shape(), x.shape());
        if kernel == 1 {
            T::gemm(
                kk,
                co,
                hw,
                weight.data(),
                true,
                dout.data(),
                false,
                dx.data_mut(),
                T::one(),
            );
        } else {
            let mut dcol = vec![T::zero(); kk * hw];
            T::gemm(
                kk,
                co,
                hw,
                weight.data(),
                true,
                dout.data(),
                false,
                &mut dcol,
                T::zero(),
            );
            col2im(&dcol, dx, kernel, dilation);
        }
    }
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .map(|&v| if v >= T::zero() { v } else { v * slope })
            .collect(),
    }
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, dout: &Tensor<T>, slope: T) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&dout.data)
            .map(|(&v, &g)| if v >= T::zero() { g } else { g * slope })
            .collect(),
    }
}

/// `(4c, h, w) → (c, 2h, 2w)`: input channel `4·o + g` fills offset
/// `(g / 2, g % 2)` of output channel `o`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c4, h, w) = x.chw();
    assert_eq!(c4 % 4, 0, "pixel shuffle needs a multiple of 4 channels");
    let c = c4 / 4;
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    let (src, dst) = (x.data(), out.data_mut());
    for o in 0..c {
        for g in 0..4 {
            let (dy, dx) = (g / 2, g % 2);
            let plane = &src[(4 * o + g) * h * w..(4 * o + g + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    dst[(o * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx] = plane[y * w + xx];
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = x.chw();
    assert!(h2 % 2 == 0 && w2 % 2 == 0);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[4 * c, h, w]);
    let (src, dst) = (x.data(), out.data_mut());
    for o in 0..c {
        for g in 0..4 {
            let (dy, dx) = (g / 2, g % 2);
            for y in 0..h {
                for xx in 0..w {
                    dst[((4 * o + g) * h + y) * w + xx] = src[(o * h2 + 2 * y + dy) * w2 + 2 * xx + dx];
                }
            }
        }
    }
    out
}

/// Keeps the top-left `h × w` window of every channel.
pub fn crop<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, sh, sw) = x.chw();
    assert!(h <= sh && w <= sw);
    if (h, w) == (sh, sw) {
        return x.clone();
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for y in 0..h {
            let s = (ci * sh + y) * sw;
            let d = (ci * h + y) * w;
            out.data[d..d + w].copy_from_slice(&x.data[s..s + w]);
        }
    }
    out
}

/// Gradient of [`crop`]: zero-pads back to `(c, full_h, full_w)`.
pub fn uncrop<T: Real>(dout: &Tensor<T>, full_h: usize, full_w: usize) -> Tensor<T> {
    let (c, h, w) = dout.chw();
    let mut out = Tensor::zeros(&[c, full_h, full_w]);
    for ci in 0..c {
        for y in 0..h {
            let s = (ci * h + y) * w;
            let d = (ci * full_h + y) * full_w;
            out.data[d..d + w].copy_from_slice(&dout.data[s..s + w]);
        }
    }
    out
}
