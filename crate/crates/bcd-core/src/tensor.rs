//! Dense 4-axis tensors (batch, channels, height, width) with the forward
//! and backward kernels used by the autodiff graph.
//!
//! Convolutions go through im2col and a slice-contiguous dot/axpy inner
//! loop; everything is single-threaded and deterministic (identical inputs
//! produce bit-identical outputs).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor with shape (batch, channels, height, width), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    /// Scalar (1,1,1,1) tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        let [b, c, h, w] = shape;
        let mut idx = 0;
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        t.data[idx] = f(bi, ci, hi, wi);
                        idx += 1;
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(b, c, h, w);
        self.data[i] = v;
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "elementwise",
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign_scaled(&mut self, other: &Self, scale: T) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + scale * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast elementwise into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap()))
                .collect(),
        }
    }
}

/// Dot product with an 8-lane accumulator so LLVM can vectorize it.
/// The lane split is fixed, so summation order (and the result) is
/// deterministic.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        for k in 0..8 {
            acc[k] = acc[k] + ca[k] * cb[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ai.remainder().iter().zip(bi.remainder()) {
        s = s + x * y;
    }
    s
}

/// y += alpha * x over contiguous slices.
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi = *yi + alpha * xi;
    }
}

/// Output spatial extent of a convolution axis.
pub(crate) fn conv_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Lay out every kernel-sized patch of one batch item as a row of length
/// cin*kh*kw, matching the kernel's row layout.
fn im2col<T: Scalar>(
    x: &Tensor<T>,
    batch: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
    out: (usize, usize),
) -> Vec<T> {
    let [_, cin, h, w] = x.shape();
    let (kh, kw) = k;
    let (oh, ow) = out;
    let kdim = cin * kh * kw;
    let mut cols = vec![T::zero(); oh * ow * kdim];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * kdim;
            for ci in 0..cin {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = x.index(batch, ci, iy as usize, 0);
                    let dst = row + (ci * kh + ky) * kw;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[dst + kx] = x.data[src + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the column matrix back onto the input layout (adjoint of
/// im2col). Overlapping patches accumulate.
fn col2im_add<T: Scalar>(
    cols: &[T],
    dx: &mut Tensor<T>,
    batch: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
    out: (usize, usize),
) {
    let [_, cin, h, w] = dx.shape();
    let (kh, kw) = k;
    let (oh, ow) = out;
    let kdim = cin * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * kdim;
            for ci in 0..cin {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = dx.index(batch, ci, iy as usize, 0);
                    let src = row + (ci * kh + ky) * kw;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx.data[dst + ix as usize] = dx.data[dst + ix as usize] + cols[src + kx];
                    }
                }
            }
        }
    }
}

/// 2-D convolution (cross-correlation, zero padding).
///
/// x: (B, Cin, H, W), kernel: (Cout, Cin, kh, kw), bias: (1, Cout, 1, 1).
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [b, cin, h, w] = x.shape();
    let [cout, kcin, kh, kw] = kernel.shape();
    if cin != kcin {
        return Err(Error::ShapeMismatch {
            context: "conv2d input channels vs kernel",
            left: x.shape(),
            right: kernel.shape(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    if let Some(bt) = bias {
        if bt.shape() != [1, cout, 1, 1] {
            return Err(Error::ShapeMismatch {
                context: "conv2d bias",
                left: bt.shape(),
                right: [1, cout, 1, 1],
            });
        }
    }
    let (oh, ow) = match (conv_extent(h, kh, stride, pad), conv_extent(w, kw, stride, pad)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "conv2d: input {}x{} with pad {} admits no {}x{} kernel placement",
                h, w, pad, kh, kw
            )))
        }
    };

    let kdim = cin * kh * kw;
    let positions = oh * ow;
    let mut out = Tensor::zeros([b, cout, oh, ow]);
    for bi in 0..b {
        let cols = im2col(x, bi, (kh, kw), stride, pad, (oh, ow));
        for co in 0..cout {
            let wrow = &kernel.data[co * kdim..(co + 1) * kdim];
            let base = out.index(bi, co, 0, 0);
            let bval = bias.map_or(T::zero(), |bt| bt.data[co]);
            for p in 0..positions {
                out.data[base + p] = dot(wrow, &cols[p * kdim..(p + 1) * kdim]) + bval;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] w.r.t. input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [b, cin, _, _] = x.shape();
    let [cout, _, kh, kw] = kernel.shape();
    let [_, _, oh, ow] = dy.shape();
    let kdim = cin * kh * kw;
    let positions = oh * ow;

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(kernel.shape());
    let mut db = Tensor::zeros([1, cout, 1, 1]);

    let mut dcols = vec![T::zero(); positions * kdim];
    for bi in 0..b {
        let cols = im2col(x, bi, (kh, kw), stride, pad, (oh, ow));
        for v in dcols.iter_mut() {
            *v = T::zero();
        }
        for co in 0..cout {
            let dyrow = &dy.data[dy.index(bi, co, 0, 0)..dy.index(bi, co, 0, 0) + positions];
            let wrow = &kernel.data[co * kdim..(co + 1) * kdim];
            let dwrow = &mut dw.data[co * kdim..(co + 1) * kdim];
            let mut bsum = T::zero();
            for p in 0..positions {
                let g = dyrow[p];
                bsum = bsum + g;
                axpy(g, &cols[p * kdim..(p + 1) * kdim], dwrow);
                axpy(g, wrow, &mut dcols[p * kdim..(p + 1) * kdim]);
            }
            db.data[co] = db.data[co] + bsum;
        }
        col2im_add(&dcols, &mut dx, bi, (kh, kw), stride, pad, (oh, ow));
    }
    (dx, dw, db)
}

/// Depth-to-space: (B, C, H, W) -> (B, C/r^2, H*r, W*r) with
/// out[b][c][h*r+i][w*r+j] = in[b][c*r^2 + i*r + j][h][w].
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.shape();
    if r == 0 {
        return Err(Error::InvalidArgument("pixel_shuffle factor must be positive".into()));
    }
    if c % (r * r) != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel_shuffle: {} channels not divisible by r^2 = {}",
            c,
            r * r
        )));
    }
    let co = c / (r * r);
    let mut out = Tensor::zeros([b, co, h * r, w * r]);
    for bi in 0..b {
        for ci in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ci * r * r + i * r + j;
                    for hi in 0..h {
                        for wi in 0..w {
                            let v = x.at(bi, src_c, hi, wi);
                            out.set(bi, ci, hi * r + i, wi * r + j, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Space-to-depth, the exact inverse of [`pixel_shuffle`] under the same
/// index formula.
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::InvalidArgument(format!(
            "space_to_depth: spatial {}x{} not divisible by {}",
            h, w, r
        )));
    }
    let mut out = Tensor::zeros([b, c * r * r, h / r, w / r]);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = ci * r * r + i * r + j;
                    for hi in 0..h / r {
                        for wi in 0..w / r {
                            let v = x.at(bi, ci, hi * r + i, wi * r + j);
                            out.set(bi, dst_c, hi, wi, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 2x2 average pooling. Odd trailing rows/columns are averaged over the
/// cells that exist.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let oh = (h + 1) / 2;
    let ow = (w + 1) / 2;
    let mut out = Tensor::zeros([b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = T::zero();
                    let mut count = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, xx) = (oy * 2 + dy, ox * 2 + dx);
                            if y < h && xx < w {
                                sum = sum + x.at(bi, ci, y, xx);
                                count += 1;
                            }
                        }
                    }
                    out.set(bi, ci, oy, ox, sum / T::from_f64_lossy(count as f64));
                }
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`].
pub fn avg_pool2_backward<T: Scalar>(x_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x_shape;
    let [_, _, oh, ow] = dy.shape();
    let mut dx = Tensor::zeros(x_shape);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut count = 0usize;
                    for dy_ in 0..2 {
                        for dx_ in 0..2 {
                            if oy * 2 + dy_ < h && ox * 2 + dx_ < w {
                                count += 1;
                            }
                        }
                    }
                    let g = dy.at(bi, ci, oy, ox) / T::from_f64_lossy(count as f64);
                    for dy_ in 0..2 {
                        for dx_ in 0..2 {
                            let (y, xx) = (oy * 2 + dy_, ox * 2 + dx_);
                            if y < h && xx < w {
                                let v = dx.at(bi, ci, y, xx) + g;
                                dx.set(bi, ci, y, xx, v);
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
