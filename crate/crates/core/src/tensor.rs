//! Dense row-major arrays of `f64` and the handful of kernels the layers need.
//!
//! Every reduction runs in a fixed left-to-right order so that two runs with
//! the same inputs produce bit-identical results.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision for vectors written to trajectory logs. Compute is
/// always `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Checked mode: surfaces NaN/Inf as an error instead of propagating it.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(other, op)?;
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

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Dimension(format!(
                "{op}: expected a matrix, got {s:?}"
            ))),
        }
    }
}

/// `a[m×k] · b[k×n]`, summing over `k` left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul: inner dimensions {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0;
            for (p, &av) in row.iter().enumerate() {
                acc += av * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for `a[k×m]`, `b[k×n]` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.matrix_dims("matmul_tn")?;
    let (k2, n) = b.matrix_dims("matmul_tn")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_tn: leading dimensions {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data[p * m + i] * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul_nt")?;
    let (n, k2) = b.matrix_dims("matmul_nt")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_nt: trailing dimensions {k} and {k2} differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ra = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot_unchecked(ra, &b.data[j * k..(j + 1) * k]);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Geometry of a 2-D cross-correlation, validated once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernels: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [c_in, height, width] = input;
        let [c_out, kc, kh, kw] = kernels;
        if kc != c_in {
            return Err(Error::Dimension(format!(
                "conv2d: kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d: stride must be positive".into()));
        }
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if kh > ph || kw > pw {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}×{kw} exceeds padded input {ph}×{pw}"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Dimension(format!(
                "conv2d: output extent not integral for padded {ph}×{pw}, kernel {kh}×{kw}, stride {stride}"
            )));
        }
        Ok(Self {
            c_in,
            height,
            width,
            c_out,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `t`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t).checked_sub(self.padding)?;
        (pos < extent).then_some(pos)
    }
}

fn conv_geometry(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let input_dims: [usize; 3] = input.shape().try_into().map_err(|_| {
        Error::Dimension(format!(
            "conv2d: input must be C×H×W, got {:?}",
            input.shape()
        ))
    })?;
    let kernel_dims: [usize; 4] = kernels.shape().try_into().map_err(|_| {
        Error::Dimension(format!(
            "conv2d: kernels must be Cout×Cin×kh×kw, got {:?}",
            kernels.shape()
        ))
    })?;
    ConvGeometry::new(input_dims, kernel_dims, stride, padding)
}

/// Direct cross-correlation (no kernel flip) of one `C_in×H×W` sample.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, stride, padding)?;
    let out = conv2d_raw(&g, input.data(), kernels.data());
    Tensor::new(vec![g.c_out, g.out_h, g.out_w], out)
}

pub(crate) fn conv2d_raw(g: &ConvGeometry, input: &[f64], kernels: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.c_out * g.out_h * g.out_w];
    for co in 0..g.c_out {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0;
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(ix) = g.source(ox, kx, g.width) else {
                                continue;
                            };
                            acc += input[(ci * g.height + iy) * g.width + ix]
                                * kernels[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                        }
                    }
                }
                out[(co * g.out_h + oy) * g.out_w + ox] = acc;
            }
        }
    }
    out
}

/// Accumulates the gradients of one conv2d sample: `grad_input += ∂/∂input`
/// and `grad_kernels += ∂/∂kernels` for upstream gradient `grad_out`.
pub(crate) fn conv2d_backward_raw(
    g: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    grad_input: &mut [f64],
    grad_kernels: &mut [f64],
) {
    for co in 0..g.c_out {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let go = grad_out[(co * g.out_h + oy) * g.out_w + ox];
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(ix) = g.source(ox, kx, g.width) else {
                                continue;
                            };
                            let ii = (ci * g.height + iy) * g.width + ix;
                            let ki = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                            grad_input[ii] += go * kernels[ki];
                            grad_kernels[ki] += go * input[ii];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `Σ aᵢbᵢ` in index order.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "dot: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_unchecked(a, b))
}

pub fn sq_norm(a: &[f64]) -> f64 {
    dot_unchecked(a, a)
}

/// `‖a − b‖²` without allocating the difference.
pub fn sq_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "sq_dist: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc)
}
