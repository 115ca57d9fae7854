//! Dense row-major `f64` arrays and the raw numeric kernels shared by the
//! autograd tape and the image-processing code.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self, other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let [m, n] = dims2(self, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [m, k] = dims2(self, "matmul lhs")?;
        let [k2, n] = dims2(other, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    pub fn conv2d(&self, kernel: &Tensor, padding: usize) -> Result<Tensor> {
        let geom = ConvGeom::new(self.shape(), kernel.shape(), padding)?;
        let mut out = vec![0.0; geom.out_len()];
        conv2d_forward(&geom, &self.data, &kernel.data, &mut out);
        Tensor::new(&[geom.c_out, geom.h_out, geom.w_out], out)
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub(crate) fn dims2(t: &Tensor, what: &str) -> Result<[usize; 2]> {
    match t.shape() {
        &[m, n] => Ok([m, n]),
        s => Err(Error::dim(format!("{what}: expected 2-D tensor, got {s:?}"))),
    }
}

pub(crate) fn dims3(t: &Tensor, what: &str) -> Result<[usize; 3]> {
    match t.shape() {
        &[c, h, w] => Ok([c, h, w]),
        s => Err(Error::dim(format!("{what}: expected c×h×w tensor, got {s:?}"))),
    }
}

/// `y += alpha * x`, written so the loop vectorizes.
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent accumulators. The summation order is
/// fixed, so results are reproducible bit for bit.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// Geometry of a stride-1 zero-padded cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], pad: usize) -> Result<Self> {
        let (&[c_in, h, w], &[c_out, kc, kh, kw]) = (x, k) else {
            return Err(Error::dim(format!(
                "conv2d expects x c×h×w and kernel o×c×kh×kw, got {x:?} and {k:?}"
            )));
        };
        if kc != c_in {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {x:?}, kernel {k:?}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(format!("conv2d kernel extents must be odd, got {k:?}")));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(format!(
                "conv2d kernel {k:?} larger than padded input {x:?} (padding {pad})"
            )));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            pad,
            h_out: h + 2 * pad - kh + 1,
            w_out: w + 2 * pad - kw + 1,
        })
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }

    /// Valid output-column range for kernel column `dx`, and the input column
    /// that the first of them reads.
    #[inline]
    fn col_span(&self, dx: usize) -> Option<(usize, usize, usize)> {
        // input col = ox + dx - pad must lie in [0, w)
        let lo = self.pad.saturating_sub(dx);
        let hi = (self.w + self.pad).saturating_sub(dx).min(self.w_out);
        (lo < hi).then(|| (lo, hi, lo + dx - self.pad))
    }

    #[inline]
    fn row_span(&self, dy: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(dy);
        let hi = (self.h + self.pad).saturating_sub(dy).min(self.h_out);
        (lo, hi.max(lo))
    }
}

impl ConvGeom {
    /// Rows of the unfolded input: one per (input channel, ky, kx).
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn hw_out(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds `x` into a `patch_len × hw_out` matrix (zero where the window
/// reaches into padding).
pub(crate) fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let hw_out = g.hw_out();
    let mut cols = vec![0.0; g.patch_len() * hw_out];
    for ci in 0..g.c_in {
        let x_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dy in 0..g.kh {
            let (r0, r1) = g.row_span(dy);
            for dx in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                let Some((c0, c1, ix0)) = g.col_span(dx) else { continue };
                let len = c1 - c0;
                for oy in r0..r1 {
                    let iy = oy + dy - g.pad;
                    dst[oy * g.w_out + c0..oy * g.w_out + c1]
                        .copy_from_slice(&x_plane[iy * g.w + ix0..iy * g.w + ix0 + len]);
                }
            }
        }
    }
    cols
}

/// Scatter-adds an unfolded gradient back onto the input layout.
fn col2im_acc(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let hw_out = g.hw_out();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dy in 0..g.kh {
            let (r0, r1) = g.row_span(dy);
            for dxk in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dxk;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                let Some((c0, c1, ix0)) = g.col_span(dxk) else { continue };
                let len = c1 - c0;
                for oy in r0..r1 {
                    let iy = oy + dy - g.pad;
                    let d = &mut plane[iy * g.w + ix0..iy * g.w + ix0 + len];
                    for (a, b) in d.iter_mut().zip(&src[oy * g.w_out + c0..oy * g.w_out + c1]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// `out += conv(x, k)`, computed as `K[c_out × patch] · im2col(x)`.
pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], k: &[f64], out: &mut [f64]) {
    if g.kh == 1 && g.kw == 1 && g.pad == 0 {
        matmul_acc(k, x, out, g.c_out, g.c_in, g.hw_out());
        return;
    }
    let cols = im2col(g, x);
    matmul_acc(k, &cols, out, g.c_out, g.patch_len(), g.hw_out());
}

/// Accumulates input and kernel gradients for `conv2d_forward`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    dout: &[f64],
    dx_acc: Option<&mut [f64]>,
    dk_acc: Option<&mut [f64]>,
) {
    let (patch, hw_out) = (g.patch_len(), g.hw_out());
    let pointwise = g.kh == 1 && g.kw == 1 && g.pad == 0;
    if let Some(dks) = dk_acc {
        let owned;
        let cols: &[f64] = if pointwise {
            x
        } else {
            owned = im2col(g, x);
            &owned
        };
        for co in 0..g.c_out {
            let d = &dout[co * hw_out..(co + 1) * hw_out];
            for j in 0..patch {
                dks[co * patch + j] += dot(d, &cols[j * hw_out..(j + 1) * hw_out]);
            }
        }
    }
    if let Some(dxs) = dx_acc {
        // dcols = Kᵀ · dout
        let mut dcols = vec![0.0; patch * hw_out];
        for co in 0..g.c_out {
            let d = &dout[co * hw_out..(co + 1) * hw_out];
            for j in 0..patch {
                let w = k[co * patch + j];
                if w != 0.0 {
                    axpy(w, d, &mut dcols[j * hw_out..(j + 1) * hw_out]);
                }
            }
        }
        if pointwise {
            dxs.iter_mut().zip(&dcols).for_each(|(a, b)| *a += b);
        } else {
            col2im_acc(g, &dcols, dxs);
        }
    }
}
