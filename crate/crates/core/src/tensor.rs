//! Dense row-major tensors and the numeric kernels shared by every layer.
//!
//! Convolution is cross-correlation (the kernel is not flipped), both in
//! [`conv2d_forward`] and in the gradients returned by [`conv2d_backward`]:
//!
//! ```text
//! out[n, f, y, x] = bias[f] + sum_{c, i, j} in[n, c, y*s + i - p, x*s + j - p] * k[f, c, i, j]
//! ```
//!
//! with out-of-range input positions reading as zero (zero padding).
//!
//! Every operation is a pure function of its inputs. Results are checked for
//! NaN/Inf and a non-finite result is reported as [`Error::NonFinite`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: vec![],
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if data.len() != len {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {len} elements, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// # Panics
    /// If `shape` is empty or has a zero dimension.
    pub fn full(shape: &[usize], value: T) -> Self {
        let len = check_shape(shape).unwrap_or_else(|e| panic!("{e}"));
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// # Panics
    /// If `shape` is empty or has a zero dimension.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let len = check_shape(shape)?;
        Self::new(shape, (0..len).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::mismatch("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a full multi-index.
    ///
    /// # Panics
    /// If the index has the wrong rank or is out of bounds.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Number of elements in one slice along axis 0.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Slice `i` along axis 0.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Gathers slices along axis 0 in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let rows = self.shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(&shape, data)
    }

    /// Concatenates tensors along axis 0.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::mismatch("concat_rows", &first.shape, &p.shape));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Tensor::new(&shape, data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn finite<T: Scalar>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::mismatch(op, &a.shape, &b.shape));
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    finite(
        op,
        Tensor {
            shape: a.shape.clone(),
            data,
        },
    )
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("hadamard", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    finite("scale", a.map(|x| x * s))
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    finite("relu", a.map(|x| if x > T::zero() { x } else { T::zero() }))
}

/// Gradient of [`relu`] at `x`, applied to `grad`. The derivative at exactly
/// zero is taken as 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("relu_backward", x, grad, |x, g| {
        if x > T::zero() {
            g
        } else {
            T::zero()
        }
    })
}

pub fn sum<T: Scalar>(a: &Tensor<T>) -> Result<T> {
    let s = a.data.iter().copied().sum::<T>();
    if s.is_finite() {
        Ok(s)
    } else {
        Err(Error::NonFinite { op: "sum" })
    }
}

pub fn mean<T: Scalar>(a: &Tensor<T>) -> Result<T> {
    Ok(sum(a)? / T::lit(a.len() as f64))
}

/// Index of the maximum along `axis`; ties go to the lowest index.
///
/// The result lists one index per position of the remaining axes, in
/// row-major order.
pub fn argmax<T: Scalar>(a: &Tensor<T>, axis: usize) -> Result<Vec<usize>> {
    if axis >= a.rank() {
        return Err(Error::InvalidArgument(format!(
            "argmax axis {axis} out of range for rank {}",
            a.rank()
        )));
    }
    let outer: usize = a.shape[..axis].iter().product();
    let extent = a.shape[axis];
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut best = 0;
            let mut best_val = a.data[base];
            for e in 1..extent {
                let v = a.data[base + e * inner];
                if v > best_val {
                    best = e;
                    best_val = v;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

fn require_rank2<T>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape[..] {
        [r, c] => Ok((r, c)),
        _ => Err(Error::InvalidShape {
            shape: t.shape.clone(),
            reason: format!("{op} expects a rank-2 tensor"),
        }),
    }
}

/// Standard matrix product of `[m x k]` and `[k x p]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_rank2("matmul", a)?;
    let (k2, p) = require_rank2("matmul", b)?;
    if k != k2 {
        return Err(Error::mismatch("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * p];
    T::gemm(
        m,
        k,
        p,
        T::one(),
        (&a.data, k as isize, 1),
        (&b.data, p as isize, 1),
        T::zero(),
        (&mut out, p as isize, 1),
    );
    finite("matmul", Tensor::new(&[m, p], out)?)
}

/// `a^T * b` for `a: [k x m]`, `b: [k x p]`.
pub fn matmul_at_b<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = require_rank2("matmul_at_b", a)?;
    let (k2, p) = require_rank2("matmul_at_b", b)?;
    if k != k2 {
        return Err(Error::mismatch("matmul_at_b", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * p];
    T::gemm(
        m,
        k,
        p,
        T::one(),
        (&a.data, 1, m as isize),
        (&b.data, p as isize, 1),
        T::zero(),
        (&mut out, p as isize, 1),
    );
    finite("matmul_at_b", Tensor::new(&[m, p], out)?)
}

/// `a * b^T` for `a: [m x k]`, `b: [p x k]`.
pub fn matmul_a_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_rank2("matmul_a_bt", a)?;
    let (p, k2) = require_rank2("matmul_a_bt", b)?;
    if k != k2 {
        return Err(Error::mismatch("matmul_a_bt", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * p];
    T::gemm(
        m,
        k,
        p,
        T::one(),
        (&a.data, k as isize, 1),
        (&b.data, 1, k as isize),
        T::zero(),
        (&mut out, p as isize, 1),
    );
    finite("matmul_a_bt", Tensor::new(&[m, p], out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub padding: usize,
    pub stride: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            padding: 0,
            stride: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    padding: usize,
    stride: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernels: &[usize], params: Conv2dParams) -> Result<Self> {
        let (&[n, c, h, w], &[f, kc, kh, kw]) = (input, kernels) else {
            return Err(Error::mismatch("conv2d", input, kernels));
        };
        if c != kc {
            return Err(Error::mismatch("conv2d", input, kernels));
        }
        if params.stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let ph = h + 2 * params.padding;
        let pw = w + 2 * params.padding;
        if ph < kh || pw < kw {
            return Err(Error::InvalidShape {
                shape: input.to_vec(),
                reason: format!(
                    "padded input {ph}x{pw} smaller than kernel {kh}x{kw}"
                ),
            });
        }
        Ok(ConvGeometry {
            batch: n,
            channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            out_h: (ph - kh) / params.stride + 1,
            out_w: (pw - kw) / params.stride + 1,
            padding: params.padding,
            stride: params.stride,
        })
    }

    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    fn sample_in(&self) -> usize {
        self.channels * self.height * self.width
    }

    // Input coordinate for output position `o` and kernel tap `k`, if inside.
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&i| i < limit)
    }

    // cols[(c*kh + i)*kw + j][y*out_w + x] = input[c, y*s + i - p, x*s + j - p]
    fn im2col<T: Scalar>(&self, input: &[T], cols: &mut [T]) {
        let area = self.out_area();
        for c in 0..self.channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * area..][..area];
                    for y in 0..self.out_h {
                        let dst = &mut row[y * self.out_w..(y + 1) * self.out_w];
                        match self.source(y, i, self.height) {
                            None => dst.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.width..(iy + 1) * self.width];
                                for (x, d) in dst.iter_mut().enumerate() {
                                    *d = self.source(x, j, self.width).map_or(T::zero(), |ix| src[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // Adjoint of im2col: scatter-add columns back onto the input grid.
    fn col2im<T: Scalar>(&self, cols: &[T], grad_input: &mut [T]) {
        let area = self.out_area();
        for c in 0..self.channels {
            let plane =
                &mut grad_input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * area..][..area];
                    for y in 0..self.out_h {
                        let Some(iy) = self.source(y, i, self.height) else {
                            continue;
                        };
                        for x in 0..self.out_w {
                            if let Some(ix) = self.source(x, j, self.width) {
                                plane[iy * self.width + ix] += row[y * self.out_w + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding and per-filter bias.
///
/// `input: [N, C, H, W]`, `kernels: [F, C, kh, kw]`, `bias: [F]`; the output
/// is `[N, F, H', W']` with `H' = (H + 2p - kh) / stride + 1` (floor).
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    params: Conv2dParams,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(&input.shape, &kernels.shape, params)?;
    if bias.shape != [g.filters] {
        return Err(Error::mismatch("conv2d bias", &kernels.shape, &bias.shape));
    }
    let (patch, area) = (g.patch(), g.out_area());
    let mut cols = vec![T::zero(); patch * area];
    let mut out = vec![T::zero(); g.batch * g.filters * area];
    for (n, out_n) in out.chunks_exact_mut(g.filters * area).enumerate() {
        g.im2col(&input.data[n * g.sample_in()..(n + 1) * g.sample_in()], &mut cols);
        for (f, plane) in out_n.chunks_exact_mut(area).enumerate() {
            plane.fill(bias.data[f]);
        }
        T::gemm(
            g.filters,
            patch,
            area,
            T::one(),
            (&kernels.data, patch as isize, 1),
            (&cols, area as isize, 1),
            T::one(),
            (out_n, area as isize, 1),
        );
    }
    finite(
        "conv2d_forward",
        Tensor::new(&[g.batch, g.filters, g.out_h, g.out_w], out)?,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Exact gradients of [`conv2d_forward`] given the upstream gradient and the
/// input that produced it.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    params: Conv2dParams,
) -> Result<Conv2dGrads<T>> {
    let g = ConvGeometry::new(&input.shape, &kernels.shape, params)?;
    let expected = [g.batch, g.filters, g.out_h, g.out_w];
    if grad_out.shape != expected {
        return Err(Error::mismatch("conv2d_backward", &expected, &grad_out.shape));
    }
    let (patch, area) = (g.patch(), g.out_area());
    let mut cols = vec![T::zero(); patch * area];
    let mut grad_cols = vec![T::zero(); patch * area];
    let mut grad_input = vec![T::zero(); input.len()];
    let mut grad_kernels = vec![T::zero(); kernels.len()];
    let mut grad_bias = vec![T::zero(); g.filters];
    for n in 0..g.batch {
        let gout_n = &grad_out.data[n * g.filters * area..(n + 1) * g.filters * area];
        g.im2col(&input.data[n * g.sample_in()..(n + 1) * g.sample_in()], &mut cols);
        // dK += dY * cols^T
        T::gemm(
            g.filters,
            area,
            patch,
            T::one(),
            (gout_n, area as isize, 1),
            (&cols, 1, area as isize),
            T::one(),
            (&mut grad_kernels, patch as isize, 1),
        );
        // dcols = K^T * dY
        T::gemm(
            patch,
            g.filters,
            area,
            T::one(),
            (&kernels.data, 1, patch as isize),
            (gout_n, area as isize, 1),
            T::zero(),
            (&mut grad_cols, area as isize, 1),
        );
        g.col2im(
            &grad_cols,
            &mut grad_input[n * g.sample_in()..(n + 1) * g.sample_in()],
        );
        for (gb, plane) in grad_bias.iter_mut().zip(gout_n.chunks_exact(area)) {
            *gb += plane.iter().copied().sum::<T>();
        }
    }
    Ok(Conv2dGrads {
        input: finite("conv2d_backward", Tensor::new(&input.shape, grad_input)?)?,
        kernels: finite("conv2d_backward", Tensor::new(&kernels.shape, grad_kernels)?)?,
        bias: finite("conv2d_backward", Tensor::new(&[g.filters], grad_bias)?)?,
    })
}

/// Argmax positions recorded by [`maxpool2d_forward`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    // flat input offset of the winner of each output cell
    winners: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn winners(&self) -> &[usize] {
        &self.winners
    }
}

/// 2x2 max pooling with stride 2. Ties go to the first element of the window
/// in row-major order.
pub fn maxpool2d_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let &[n, c, h, w] = &input.shape[..] else {
        return Err(Error::InvalidShape {
            shape: input.shape.clone(),
            reason: "maxpool2d expects [N, C, H, W]".into(),
        });
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: input.shape.clone(),
            reason: "maxpool2d needs even spatial dimensions".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut winners = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let first = base + 2 * y * w + 2 * x;
                let mut best = first;
                for cand in [first + 1, first + w, first + w + 1] {
                    if input.data[cand] > input.data[best] {
                        best = cand;
                    }
                }
                out.push(input.data[best]);
                winners.push(best);
            }
        }
    }
    let output = finite("maxpool2d_forward", Tensor::new(&[n, c, oh, ow], out)?)?;
    Ok((
        output,
        PoolIndices {
            input_shape: input.shape.clone(),
            winners,
        },
    ))
}

/// Routes each output gradient to its recorded argmax; zero elsewhere.
pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    indices: &PoolIndices,
) -> Result<Tensor<T>> {
    if grad_out.len() != indices.winners.len() {
        return Err(Error::mismatch(
            "maxpool2d_backward",
            &indices.input_shape,
            &grad_out.shape,
        ));
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    for (&w, &g) in indices.winners.iter().zip(&grad_out.data) {
        grad.data[w] += g;
    }
    finite("maxpool2d_backward", grad)
}
