//! Dense row-major tensors and the numeric kernels shared by the rest of the crate.
//!
//! [`Tensor`] stores 32-bit values. Every kernel accumulates in 64-bit and sums
//! in a fixed order, so results are reproducible bit for bit across runs.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
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
    /// Builds a tensor from external data, rejecting NaN/Inf and inconsistent shapes.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { context: "tensor construction".into(), index, value: value as f64 });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: vec![value; len] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let len: usize = shape.iter().product();
        Tensor { shape, data: (0..len).map(&mut f).collect() }
    }

    /// Rounds 64-bit values to a 32-bit tensor.
    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.map(|v| v * factor)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| (a as f64 - b as f64).abs()).fold(0.0, f64::max))
    }

    /// Matrix product of an `m×k` and a `k×n` tensor.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.shape.as_slice(), other.shape.as_slice()) else {
            return Err(Error::shape("matmul", format!("expected two matrices, got {:?} and {:?}", self.shape, other.shape)));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents differ: {:?} x {:?}", self.shape, other.shape)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(&self.to_f64(), &other.to_f64(), &mut out, m, k, n);
        Tensor::from_f64(vec![m, n], &out)
    }

    /// Cross-correlation of a `C_in×H×W` input with `C_out×C_in×kh×kw` filters.
    pub fn conv2d(&self, filters: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let &[c, h, w] = self.shape.as_slice() else {
            return Err(Error::shape("conv2d", format!("input must be C×H×W, got {:?}", self.shape)));
        };
        let geom = ConvGeometry::new(c, h, w, filters.shape(), stride, pad)?;
        let mut out = vec![0.0; geom.out_len()];
        let bias = vec![0.0; geom.c_out];
        kernels::conv2d_forward(&geom, 1, &self.to_f64(), &filters.to_f64(), &bias, &mut out);
        Tensor::from_f64(vec![geom.c_out, geom.out_h, geom.out_w], &out)
    }

    /// Collapses the spatial extent of a filter bank: `[o, i] = Σ_{j,k} filters[o, i, j, k]`.
    pub fn reduce_spatial_sum(&self) -> Result<Tensor> {
        let &[o, i, kh, kw] = self.shape.as_slice() else {
            return Err(Error::shape("reduce_spatial_sum", format!("expected a 4-d filter tensor, got {:?}", self.shape)));
        };
        let out = kernels::spatial_sum(&self.to_f64(), o * i, kh * kw);
        Tensor::from_f64(vec![o, i], &out)
    }
}

/// Shape bookkeeping for a 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(c_in: usize, h: usize, w: usize, filter_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let &[c_out, fc, kh, kw] = filter_shape else {
            return Err(Error::shape("conv2d", format!("filters must be 4-d, got {filter_shape:?}")));
        };
        if fc != c_in {
            return Err(Error::shape("conv2d", format!("filters expect {fc} input channels, input has {c_in}")));
        }
        Self::from_dims(c_in, h, w, c_out, kh, kw, stride, pad)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_dims(c_in: usize, h: usize, w: usize, c_out: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape("conv2d", format!("kernel {kh}×{kw} does not fit padded input {}×{}", h + 2 * pad, w + 2 * pad)));
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        if out_h == 0 || out_w == 0 || c_out == 0 {
            return Err(Error::shape("conv2d", "empty output"));
        }
        Ok(ConvGeometry { c_in, h, w, c_out, kh, kw, stride, pad, out_h, out_w })
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// 64-bit kernels on flat row-major slices.
pub mod kernels {
    use super::ConvGeometry;

    /// `c += a·b` with `a: m×k`, `b: k×n`.
    pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cj, &bj) in row.iter_mut().zip(brow) {
                    *cj += aip * bj;
                }
            }
        }
    }

    /// `c += a·bᵀ` with `a: m×k`, `b: n×k`.
    pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (x, y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                c[i * n + j] += acc;
            }
        }
    }

    /// `c += aᵀ·b` with `a: k×m`, `b: k×n`.
    pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), k * m);
        debug_assert_eq!(b.len(), k * n);
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let api = a[p * m + i];
                if api == 0.0 {
                    continue;
                }
                let row = &mut c[i * n..(i + 1) * n];
                for (cj, &bj) in row.iter_mut().zip(brow) {
                    *cj += api * bj;
                }
            }
        }
    }

    /// Sums consecutive groups of `group` values.
    pub fn spatial_sum(values: &[f64], groups: usize, group: usize) -> Vec<f64> {
        (0..groups).map(|g| values[g * group..(g + 1) * group].iter().sum()).collect()
    }

    /// Unfolds one example into a `patch_len × out_pixels` matrix.
    pub fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
        let pixels = g.out_pixels();
        for c in 0..g.c_in {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let dst = &mut cols[row * pixels..(row + 1) * pixels];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                        if ih < 0 || ih as usize >= g.h {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * g.h + ih as usize) * g.w..(c * g.h + ih as usize + 1) * g.w];
                        for (ow, v) in line.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            *v = if iw < 0 || iw as usize >= g.w { 0.0 } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatters (adds) columns back into an example.
    pub fn col2im(g: &ConvGeometry, cols: &[f64], x: &mut [f64]) {
        let pixels = g.out_pixels();
        for c in 0..g.c_in {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let src = &cols[row * pixels..(row + 1) * pixels];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih as usize >= g.h {
                            continue;
                        }
                        let base = (c * g.h + ih as usize) * g.w;
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && (iw as usize) < g.w {
                                x[base + iw as usize] += src[oh * g.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Batched convolution with per-output-channel bias.
    pub fn conv2d_forward(g: &ConvGeometry, batch: usize, x: &[f64], filters: &[f64], bias: &[f64], out: &mut [f64]) {
        let pixels = g.out_pixels();
        let mut cols = vec![0.0; g.patch_len() * pixels];
        for n in 0..batch {
            im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
            let y = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
            for (o, chunk) in y.chunks_mut(pixels).enumerate() {
                chunk.fill(bias[o]);
            }
            gemm_nn(filters, &cols, y, g.c_out, g.patch_len(), pixels);
        }
    }

    /// Accumulates gradients of a batched convolution into `dx`, `dfilters`, `dbias`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_backward(
        g: &ConvGeometry,
        batch: usize,
        x: &[f64],
        filters: &[f64],
        dy: &[f64],
        dx: &mut [f64],
        dfilters: &mut [f64],
        dbias: &mut [f64],
    ) {
        let pixels = g.out_pixels();
        let mut cols = vec![0.0; g.patch_len() * pixels];
        let mut dcols = vec![0.0; g.patch_len() * pixels];
        for n in 0..batch {
            let dyn_ = &dy[n * g.out_len()..(n + 1) * g.out_len()];
            for (o, chunk) in dyn_.chunks(pixels).enumerate() {
                dbias[o] += chunk.iter().sum::<f64>();
            }
            im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
            gemm_nt(dyn_, &cols, dfilters, g.c_out, pixels, g.patch_len());
            dcols.fill(0.0);
            gemm_tn(filters, dyn_, &mut dcols, g.patch_len(), g.c_out, pixels);
            col2im(g, &dcols, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
}
