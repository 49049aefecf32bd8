//! Shaped plaintext tensors and the plain-domain layer kernels.
//!
//! Everything is row-major `(channels, height, width)` and generic over the
//! element type, so the same loops serve the float reference engine (`f64`)
//! and the integer-exact engine (`BigInt`). Accumulation order is fixed as
//! ascending `(in_channel, ky, kx)` everywhere; the encrypted kernels mirror
//! it so results are bit-identical across engines and runs.

use num_bigint::BigInt;
use num_traits::Zero;
use std::ops::{Add, Mul};

use crate::encoding::ScaleTag;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Plaintext tensor; `scale` is meaningful for fixed-point integer data and
/// zero for raw reals.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainTensor<T> {
    pub shape: Shape,
    pub data: Vec<T>,
    pub scale: ScaleTag,
}

pub type IntTensor = PlainTensor<BigInt>;
pub type FloatTensor = PlainTensor<f64>;

impl<T> PlainTensor<T> {
    pub fn new(shape: Shape, data: Vec<T>, scale: ScaleTag) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data, scale })
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> &T {
        &self.data[self.shape.idx(c, y, x)]
    }
}

impl<T: Clone + Zero> PlainTensor<T> {
    pub fn zeros(shape: Shape, scale: ScaleTag) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.len()],
            scale,
        }
    }
}

impl FloatTensor {
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            shape,
            data,
            scale: ScaleTag::default(),
        }
    }
}

/// Convolution weights, `(out_channels, in_channels, k, k)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub data: Vec<T>,
}

impl<T> ConvWeights<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        if data.len() != out_channels * in_channels * kernel * kernel {
            return Err(Error::Shape("conv weight payload size mismatch".into()));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            data,
        })
    }

    #[inline]
    pub fn at(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> &T {
        &self.data[((oc * self.in_channels + ic) * self.kernel + ky) * self.kernel + kx]
    }
}

/// Transposed-convolution weights, `(in_channels, out_channels, k, k)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTransposeWeights<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub data: Vec<T>,
}

impl<T> ConvTransposeWeights<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        if data.len() != in_channels * out_channels * kernel * kernel {
            return Err(Error::Shape(
                "transposed conv weight payload size mismatch".into(),
            ));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            data,
        })
    }

    #[inline]
    pub fn at(&self, ic: usize, oc: usize, ky: usize, kx: usize) -> &T {
        &self.data[((ic * self.out_channels + oc) * self.kernel + ky) * self.kernel + kx]
    }
}

/// Fully-connected weights, `(out_dim, in_dim)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights<T> {
    pub out_dim: usize,
    pub in_dim: usize,
    pub data: Vec<T>,
}

impl<T> LinearWeights<T> {
    pub fn new(out_dim: usize, in_dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != out_dim * in_dim {
            return Err(Error::Shape("linear weight payload size mismatch".into()));
        }
        Ok(Self {
            out_dim,
            in_dim,
            data,
        })
    }
}

pub fn conv_output_shape(
    input: Shape,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Shape> {
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    let h = input.height + 2 * padding;
    let w = input.width + 2 * padding;
    if kernel > h || kernel > w {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {h}x{w}"
        )));
    }
    Ok(Shape::new(
        out_channels,
        (h - kernel) / stride + 1,
        (w - kernel) / stride + 1,
    ))
}

pub fn conv_transpose_output_shape(
    input: Shape,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Shape> {
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    let h = (input.height - 1) * stride + kernel;
    let w = (input.width - 1) * stride + kernel;
    if 2 * padding >= h || 2 * padding >= w {
        return Err(Error::Shape(
            "padding crops entire transposed output".into(),
        ));
    }
    Ok(Shape::new(out_channels, h - 2 * padding, w - 2 * padding))
}

/// Plain discrete convolution; the oracle the encrypted kernel is checked
/// against. `weight_frac_bits` is added to the output scale.
pub fn conv2d_plain<T>(
    input: &PlainTensor<T>,
    weights: &ConvWeights<T>,
    stride: usize,
    padding: usize,
    weight_frac_bits: u32,
) -> Result<PlainTensor<T>>
where
    T: Clone + Zero + Add<Output = T>,
    for<'a> &'a T: Mul<&'a T, Output = T>,
{
    if input.shape.channels != weights.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, tensor has {}",
            weights.in_channels, input.shape.channels
        )));
    }
    let out_shape = conv_output_shape(
        input.shape,
        weights.out_channels,
        weights.kernel,
        stride,
        padding,
    )?;
    let mut out = Vec::with_capacity(out_shape.len());
    let (ih, iw) = (input.shape.height as isize, input.shape.width as isize);

    for oc in 0..out_shape.channels {
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let mut acc = T::zero();
                for ic in 0..weights.in_channels {
                    for ky in 0..weights.kernel {
                        for kx in 0..weights.kernel {
                            let y = (oy * stride + ky) as isize - padding as isize;
                            let x = (ox * stride + kx) as isize - padding as isize;
                            if y < 0 || y >= ih || x < 0 || x >= iw {
                                continue; // zero padding contributes nothing
                            }
                            let w = weights.at(oc, ic, ky, kx);
                            let v = input.get(ic, y as usize, x as usize);
                            acc = acc + (w * v);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    PlainTensor::new(out_shape, out, input.scale.after_mul(weight_frac_bits))
}

/// Plain transposed convolution in gather form: each output position collects
/// the kernel taps whose scatter lands on it.
pub fn conv2d_transpose_plain<T>(
    input: &PlainTensor<T>,
    weights: &ConvTransposeWeights<T>,
    stride: usize,
    padding: usize,
    weight_frac_bits: u32,
) -> Result<PlainTensor<T>>
where
    T: Clone + Zero + Add<Output = T>,
    for<'a> &'a T: Mul<&'a T, Output = T>,
{
    if input.shape.channels != weights.in_channels {
        return Err(Error::Shape(format!(
            "transposed conv expects {} input channels, tensor has {}",
            weights.in_channels, input.shape.channels
        )));
    }
    let out_shape = conv_transpose_output_shape(
        input.shape,
        weights.out_channels,
        weights.kernel,
        stride,
        padding,
    )?;
    let mut out = Vec::with_capacity(out_shape.len());

    for oc in 0..out_shape.channels {
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let mut acc = T::zero();
                for ic in 0..weights.in_channels {
                    for ky in 0..weights.kernel {
                        for kx in 0..weights.kernel {
                            let sy = oy + padding;
                            let sx = ox + padding;
                            if sy < ky || sx < kx {
                                continue;
                            }
                            let (ry, rx) = (sy - ky, sx - kx);
                            if ry % stride != 0 || rx % stride != 0 {
                                continue;
                            }
                            let (iy, ix) = (ry / stride, rx / stride);
                            if iy >= input.shape.height || ix >= input.shape.width {
                                continue;
                            }
                            let w = weights.at(ic, oc, ky, kx);
                            let v = input.get(ic, iy, ix);
                            acc = acc + (w * v);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    PlainTensor::new(out_shape, out, input.scale.after_mul(weight_frac_bits))
}

/// Plain matrix-vector product over the flattened input.
pub fn linear_plain<T>(
    input: &PlainTensor<T>,
    weights: &LinearWeights<T>,
    weight_frac_bits: u32,
) -> Result<PlainTensor<T>>
where
    T: Clone + Zero + Add<Output = T>,
    for<'a> &'a T: Mul<&'a T, Output = T>,
{
    if input.shape.len() != weights.in_dim {
        return Err(Error::Shape(format!(
            "linear expects {} inputs, tensor has {}",
            weights.in_dim,
            input.shape.len()
        )));
    }
    let mut out = Vec::with_capacity(weights.out_dim);
    for row in 0..weights.out_dim {
        let mut acc = T::zero();
        for col in 0..weights.in_dim {
            acc = acc + (&weights.data[row * weights.in_dim + col] * &input.data[col]);
        }
        out.push(acc);
    }
    PlainTensor::new(
        Shape::new(weights.out_dim, 1, 1),
        out,
        input.scale.after_mul(weight_frac_bits),
    )
}

/// Elementwise sum; scales must already agree.
pub fn add_plain<T>(a: &PlainTensor<T>, b: &PlainTensor<T>) -> Result<PlainTensor<T>>
where
    T: Clone + Add<Output = T>,
{
    if a.shape != b.shape {
        return Err(Error::Shape(format!("add: {} vs {}", a.shape, b.shape)));
    }
    if a.scale != b.scale {
        return Err(Error::ScaleMismatch {
            expected: a.scale.total_frac_bits,
            got: b.scale.total_frac_bits,
        });
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| x.clone() + y.clone())
        .collect();
    PlainTensor::new(a.shape, data, a.scale)
}

/// Per-channel bias add (bias length = channel count, at the tensor's scale).
pub fn bias_add_plain<T>(x: &PlainTensor<T>, bias: &PlainTensor<T>) -> Result<PlainTensor<T>>
where
    T: Clone + Add<Output = T>,
{
    if bias.shape.len() != x.shape.channels {
        return Err(Error::Shape(format!(
            "bias length {} vs {} channels",
            bias.shape.len(),
            x.shape.channels
        )));
    }
    if bias.scale != x.scale {
        return Err(Error::ScaleMismatch {
            expected: x.scale.total_frac_bits,
            got: bias.scale.total_frac_bits,
        });
    }
    let mut data = Vec::with_capacity(x.shape.len());
    for c in 0..x.shape.channels {
        for y in 0..x.shape.height {
            for xx in 0..x.shape.width {
                data.push(x.get(c, y, xx).clone() + bias.data[c].clone());
            }
        }
    }
    PlainTensor::new(x.shape, data, x.scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn int_tensor(shape: Shape, vals: &[i64]) -> IntTensor {
        PlainTensor::new(
            shape,
            vals.iter().map(|&v| BigInt::from(v)).collect(),
            ScaleTag::default(),
        )
        .unwrap()
    }

    #[test]
    fn one_by_one_kernel_scales() {
        // [[1,2],[3,4]] * [2] -> [[2,4],[6,8]]
        let input = int_tensor(Shape::new(1, 2, 2), &[1, 2, 3, 4]);
        let w = ConvWeights::new(1, 1, 1, vec![BigInt::from(2)]).unwrap();
        let out = conv2d_plain(&input, &w, 1, 0, 0).unwrap();
        assert_eq!(
            out.data,
            vec![
                BigInt::from(2),
                BigInt::from(4),
                BigInt::from(6),
                BigInt::from(8)
            ]
        );
    }

    #[test]
    fn identity_kernel_is_identity() {
        let input = int_tensor(Shape::new(1, 3, 3), &[1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let w = ConvWeights::new(1, 1, 1, vec![BigInt::from(1)]).unwrap();
        let out = conv2d_plain(&input, &w, 1, 0, 0).unwrap();
        assert_eq!(out.data, input.data);
    }

    /// Independent second implementation: scatter-form convolution that walks
    /// input positions instead of output positions.
    fn conv2d_scatter_oracle(
        input: &IntTensor,
        w: &ConvWeights<BigInt>,
        stride: usize,
        padding: usize,
    ) -> IntTensor {
        let out_shape =
            conv_output_shape(input.shape, w.out_channels, w.kernel, stride, padding).unwrap();
        let mut out = IntTensor::zeros(out_shape, input.scale);
        for oc in 0..w.out_channels {
            for ic in 0..w.in_channels {
                for iy in 0..input.shape.height {
                    for ix in 0..input.shape.width {
                        for ky in 0..w.kernel {
                            for kx in 0..w.kernel {
                                let oy = iy + padding;
                                let ox = ix + padding;
                                if oy < ky || ox < kx {
                                    continue;
                                }
                                if !(oy - ky).is_multiple_of(stride)
                                    || !(ox - kx).is_multiple_of(stride)
                                {
                                    continue;
                                }
                                let (oy, ox) = ((oy - ky) / stride, (ox - kx) / stride);
                                if oy >= out_shape.height || ox >= out_shape.width {
                                    continue;
                                }
                                let idx = out_shape.idx(oc, oy, ox);
                                out.data[idx] += w.at(oc, ic, ky, kx) * input.get(ic, iy, ix);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_independent_scatter_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1), (2, 0)] {
            let shape = Shape::new(2, 6, 5);
            let input = PlainTensor::new(
                shape,
                (0..shape.len())
                    .map(|_| BigInt::from(rng.gen_range(-50i64..50)))
                    .collect(),
                ScaleTag::default(),
            )
            .unwrap();
            let w = ConvWeights::new(
                3,
                2,
                3,
                (0..3 * 2 * 9)
                    .map(|_| BigInt::from(rng.gen_range(-9i64..9)))
                    .collect(),
            )
            .unwrap();
            let a = conv2d_plain(&input, &w, stride, padding, 0).unwrap();
            let b = conv2d_scatter_oracle(&input, &w, stride, padding);
            assert_eq!(a, b, "stride={stride} padding={padding}");
        }
    }

    #[test]
    fn transpose_gather_matches_scatter_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let shape = Shape::new(2, 4, 4);
            let input = PlainTensor::new(
                shape,
                (0..shape.len())
                    .map(|_| BigInt::from(rng.gen_range(-50i64..50)))
                    .collect(),
                ScaleTag::default(),
            )
            .unwrap();
            let w = ConvTransposeWeights::new(
                2,
                3,
                3,
                (0..2 * 3 * 9)
                    .map(|_| BigInt::from(rng.gen_range(-9i64..9)))
                    .collect(),
            )
            .unwrap();
            let got = conv2d_transpose_plain(&input, &w, stride, padding, 0).unwrap();

            // scatter-form oracle
            let full = Shape::new(3, (4 - 1) * stride + 3, (4 - 1) * stride + 3);
            let mut scat = IntTensor::zeros(full, ScaleTag::default());
            for ic in 0..2 {
                for iy in 0..4 {
                    for ix in 0..4 {
                        for oc in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let idx = full.idx(oc, iy * stride + ky, ix * stride + kx);
                                    scat.data[idx] += w.at(ic, oc, ky, kx) * input.get(ic, iy, ix);
                                }
                            }
                        }
                    }
                }
            }
            // crop padding
            let out_shape = got.shape;
            for oc in 0..out_shape.channels {
                for oy in 0..out_shape.height {
                    for ox in 0..out_shape.width {
                        assert_eq!(
                            got.get(oc, oy, ox),
                            scat.get(oc, oy + padding, ox + padding),
                            "stride={stride} padding={padding} at ({oc},{oy},{ox})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn stride_one_unit_transpose_equals_conv() {
        let input = int_tensor(Shape::new(1, 3, 3), &[1, -2, 3, 4, 5, -6, 7, 8, 9]);
        let wt = ConvTransposeWeights::new(1, 1, 1, vec![BigInt::from(3)]).unwrap();
        let wc = ConvWeights::new(1, 1, 1, vec![BigInt::from(3)]).unwrap();
        assert_eq!(
            conv2d_transpose_plain(&input, &wt, 1, 0, 0).unwrap().data,
            conv2d_plain(&input, &wc, 1, 0, 0).unwrap().data
        );
    }

    #[test]
    fn add_requires_matching_scale() {
        let a = int_tensor(Shape::new(1, 1, 2), &[1, 2]);
        let mut b = int_tensor(Shape::new(1, 1, 2), &[3, 4]);
        b.scale = ScaleTag::new(4);
        assert!(matches!(
            add_plain(&a, &b),
            Err(Error::ScaleMismatch { .. })
        ));
    }

    #[test]
    fn linear_identity_and_shapes() {
        let input = int_tensor(Shape::new(4, 1, 1), &[1, -2, 3, -4]);
        let mut eye = vec![BigInt::from(0); 16];
        for i in 0..4 {
            eye[i * 4 + i] = BigInt::from(1);
        }
        let w = LinearWeights::new(4, 4, eye).unwrap();
        let out = linear_plain(&input, &w, 0).unwrap();
        assert_eq!(out.data, input.data);
        assert!(linear_plain(&int_tensor(Shape::new(3, 1, 1), &[1, 2, 3]), &w, 0).is_err());
    }
}
