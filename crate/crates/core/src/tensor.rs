//! Dense row-major tensors of `f64` and the raw kernels the gradient tape
//! builds on.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Immutable dense tensor. Rank-4 tensors use the `(batch, channel, height,
/// width)` layout throughout the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return dim_err(format!("shape extents must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(vec![n, n], data).expect("positive extents")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect()).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    /// Returns `(b, c, h, w)` or a dimension error if the tensor is not rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => dim_err(format!("expected a rank-4 tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => dim_err(format!("expected a rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cc, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * cc + c) * h + y) * w + x]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copies the `h × w` spatial window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let (b, c, hh, ww) = self.dims4()?;
        if y0 + h > hh || x0 + w > ww || h == 0 || w == 0 {
            return dim_err(format!(
                "window {h}x{w} at ({y0},{x0}) exceeds {hh}x{ww} map"
            ));
        }
        let mut out = Vec::with_capacity(b * c * h * w);
        for plane in 0..b * c {
            let base = plane * hh * ww;
            for y in y0..y0 + h {
                let row = base + y * ww;
                out.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Self::new(vec![b, c, h, w], out)
    }
}

/// Plain `(m × k) · (k × n)` product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return dim_err(format!("matmul inner extents differ: {k} vs {k2}"));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let src = &b.data[p * n..(p + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(src) {
                *d += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Geometry of a 2-D convolution, resolved from operand shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn resolve(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (&[batch, c_in, h_in, w_in], &[c_out, kc, k_h, k_w]) = (input, kernel) else {
            return dim_err(format!(
                "conv2d needs rank-4 input and kernel, got {input:?} and {kernel:?}"
            ));
        };
        if kc != c_in {
            return dim_err(format!(
                "kernel expects {kc} input channels, input has {c_in}"
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (ph, pw) = (h_in + 2 * padding, w_in + 2 * padding);
        if k_h > ph || k_w > pw {
            return dim_err(format!(
                "kernel {k_h}x{k_w} larger than padded input {ph}x{pw}"
            ));
        }
        Ok(Self {
            batch,
            c_in,
            c_out,
            h_in,
            w_in,
            k_h,
            k_w,
            h_out: (ph - k_h) / stride + 1,
            w_out: (pw - k_w) / stride + 1,
            stride,
            padding,
        })
    }

    /// Input coordinate hit by output `o` and kernel tap `k`, if inside the
    /// unpadded map.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::resolve(input.shape(), kernel.shape(), stride, padding)?;
    let mut out = vec![0.0; g.batch * g.c_out * g.h_out * g.w_out];
    let (x, k) = (input.data(), kernel.data());
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let dst = &mut out[((b * g.c_out + o) * g.h_out) * g.w_out..][..g.h_out * g.w_out];
            for i in 0..g.c_in {
                let plane = &x[((b * g.c_in + i) * g.h_in) * g.w_in..][..g.h_in * g.w_in];
                let taps = &k[((o * g.c_in + i) * g.k_h) * g.k_w..][..g.k_h * g.k_w];
                for ky in 0..g.k_h {
                    for kx in 0..g.k_w {
                        let wv = taps[ky * g.k_w + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..g.h_out {
                            let Some(iy) = g.src(oy, ky, g.h_in) else {
                                continue;
                            };
                            for ox in 0..g.w_out {
                                if let Some(ix) = g.src(ox, kx, g.w_in) {
                                    dst[oy * g.w_out + ox] += wv * plane[iy * g.w_in + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.c_out, g.h_out, g.w_out], out)
}

/// Vector-Jacobian products of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::resolve(input.shape(), kernel.shape(), stride, padding)?;
    let mut dx = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    let (x, k, go) = (input.data(), kernel.data(), grad_out.data());
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let gplane = &go[((b * g.c_out + o) * g.h_out) * g.w_out..][..g.h_out * g.w_out];
            for i in 0..g.c_in {
                let xoff = ((b * g.c_in + i) * g.h_in) * g.w_in;
                let koff = ((o * g.c_in + i) * g.k_h) * g.k_w;
                for ky in 0..g.k_h {
                    for kx in 0..g.k_w {
                        let wv = k[koff + ky * g.k_w + kx];
                        let mut acc = 0.0;
                        for oy in 0..g.h_out {
                            let Some(iy) = g.src(oy, ky, g.h_in) else {
                                continue;
                            };
                            for ox in 0..g.w_out {
                                if let Some(ix) = g.src(ox, kx, g.w_in) {
                                    let gv = gplane[oy * g.w_out + ox];
                                    let xi = xoff + iy * g.w_in + ix;
                                    acc += gv * x[xi];
                                    dx[xi] += gv * wv;
                                }
                            }
                        }
                        dk[koff + ky * g.k_w + kx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let m = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn scalar_matmul() {
        let a = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_zero_input() {
        let x = Tensor::zeros(&[2, 3, 5, 5]);
        let k = Tensor::from_fn(&[4, 3, 3, 3], |i| i as f64);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_output_extent() {
        let x = Tensor::zeros(&[1, 1, 7, 6]);
        let k = Tensor::zeros(&[1, 1, 3, 2]);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        // floor((7 + 2 - 3) / 2) + 1 = 4, floor((6 + 2 - 2) / 2) + 1 = 4
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(Error::Dimension(_))));
        assert!(conv2d(&x, &k, 1, 1).is_ok());
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &k, 1, 0).is_err());
    }

    #[test]
    fn crop_extracts_window() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let c = x.crop(2, 1, 2, 3).unwrap();
        assert_eq!(c.data(), &[9.0, 10.0, 11.0, 13.0, 14.0, 15.0]);
        assert!(x.crop(3, 0, 2, 2).is_err());
    }
}
