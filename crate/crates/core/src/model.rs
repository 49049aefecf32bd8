//! Model description, weight quantization, and the reference inference
//! engines.
//!
//! A `.cdm` file is a self-describing container: magic `CDM1`, a 32-bit
//! little-endian length, a JSON header (architecture, shapes, weight
//! precision), then the raw little-endian `f32` weight blob in layer order
//! (weights then biases per parametric layer).
//!
//! Two reference engines live here. [`infer_plain_float`] is the ordinary
//! float forward pass. [`infer_plain_fixed`] is the integer-exact pass that
//! mirrors the encrypted pipeline's arithmetic step for step (same
//! accumulation order, same activation semantics at the integer level); its
//! output is the ground truth the encrypted path must reproduce exactly.

use num_bigint::{BigInt, BigUint};
use num_traits::{Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::encoding::{quantize, ScaleTag};
use crate::tensor::{
    add_plain, bias_add_plain, conv2d_plain, conv2d_transpose_plain, conv_output_shape,
    conv_transpose_output_shape, linear_plain, ConvTransposeWeights, ConvWeights, FloatTensor,
    IntTensor, LinearWeights, PlainTensor, Shape,
};
use crate::{Error, Result};

pub const CDM_MAGIC: &[u8; 4] = b"CDM1";

/// One layer of a model, with raw `f32` parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerDesc {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    Linear {
        out_dim: usize,
        in_dim: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    Relu,
    LeakyRelu {
        alpha: f32,
    },
    ResidualAdd {
        /// Index into the tensor tape: 0 is the model input, `i` the output
        /// of layer `i - 1`. Must reference an earlier tensor.
        source: usize,
    },
}

impl LayerDesc {
    pub fn is_activation(&self) -> bool {
        matches!(self, LayerDesc::Relu | LayerDesc::LeakyRelu { .. })
    }
}

/// Ordered layer stack plus input geometry and weight precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Shape,
    pub frac_bits_weights: u32,
    pub layers: Vec<LayerDesc>,
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        input_shape: Shape,
        frac_bits_weights: u32,
        layers: Vec<LayerDesc>,
    ) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            input_shape,
            frac_bits_weights,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// True when the model contains no activation layers, enabling the
    /// one-round-trip linear framework.
    pub fn is_linear(&self) -> bool {
        !self.layers.iter().any(LayerDesc::is_activation)
    }

    /// Shape of every tensor on the tape (input first, one entry per layer
    /// output after it).
    pub fn shape_tape(&self) -> Result<Vec<Shape>> {
        let mut tape = vec![self.input_shape];
        for (idx, layer) in self.layers.iter().enumerate() {
            let cur = *tape.last().expect("tape non-empty");
            let next = match layer {
                LayerDesc::Conv {
                    out_channels,
                    in_channels,
                    kernel,
                    stride,
                    padding,
                    weight,
                    bias,
                } => {
                    if cur.channels != *in_channels {
                        return Err(Error::Shape(format!(
                            "layer {idx} (conv): expects {in_channels} channels, gets {}",
                            cur.channels
                        )));
                    }
                    if weight.len() != out_channels * in_channels * kernel * kernel {
                        return Err(Error::Shape(format!(
                            "layer {idx} (conv): weight payload {} does not match {out_channels}x{in_channels}x{kernel}x{kernel}",
                            weight.len()
                        )));
                    }
                    if bias.len() != *out_channels {
                        return Err(Error::Shape(format!("layer {idx} (conv): bias length")));
                    }
                    conv_output_shape(cur, *out_channels, *kernel, *stride, *padding)
                        .map_err(|e| Error::Shape(format!("layer {idx}: {e}")))?
                }
                LayerDesc::ConvTranspose {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    weight,
                    bias,
                } => {
                    if cur.channels != *in_channels {
                        return Err(Error::Shape(format!(
                            "layer {idx} (conv_transpose): expects {in_channels} channels, gets {}",
                            cur.channels
                        )));
                    }
                    if weight.len() != out_channels * in_channels * kernel * kernel {
                        return Err(Error::Shape(format!(
                            "layer {idx} (conv_transpose): weight payload size"
                        )));
                    }
                    if bias.len() != *out_channels {
                        return Err(Error::Shape(format!(
                            "layer {idx} (conv_transpose): bias length"
                        )));
                    }
                    conv_transpose_output_shape(cur, *out_channels, *kernel, *stride, *padding)
                        .map_err(|e| Error::Shape(format!("layer {idx}: {e}")))?
                }
                LayerDesc::Linear {
                    out_dim,
                    in_dim,
                    weight,
                    bias,
                } => {
                    if cur.len() != *in_dim {
                        return Err(Error::Shape(format!(
                            "layer {idx} (linear): expects {in_dim} inputs, gets {}",
                            cur.len()
                        )));
                    }
                    if weight.len() != out_dim * in_dim || bias.len() != *out_dim {
                        return Err(Error::Shape(format!("layer {idx} (linear): payload size")));
                    }
                    Shape::new(*out_dim, 1, 1)
                }
                LayerDesc::Relu | LayerDesc::LeakyRelu { .. } => cur,
                LayerDesc::ResidualAdd { source } => {
                    let src = *tape.get(*source).ok_or_else(|| {
                        Error::Shape(format!(
                            "layer {idx} (residual_add): source {source} not earlier in the pipeline"
                        ))
                    })?;
                    if src != cur {
                        return Err(Error::Shape(format!(
                            "layer {idx} (residual_add): source shape {src} vs current {cur}"
                        )));
                    }
                    cur
                }
            };
            tape.push(next);
        }
        Ok(tape)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(*self.shape_tape()?.last().expect("tape non-empty"))
    }

    fn validate(&self) -> Result<()> {
        self.shape_tape()?;
        for window in self.layers.windows(2) {
            if window[0].is_activation() && window[1].is_activation() {
                return Err(Error::Shape(
                    "consecutive activation layers are not allowed".into(),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// .cdm container
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    input_shape: [usize; 3],
    frac_bits_weights: u32,
    layers: Vec<HeaderLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HeaderLayer {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        out_dim: usize,
        in_dim: usize,
    },
    Relu,
    LeakyRelu {
        alpha: f32,
    },
    ResidualAdd {
        source: usize,
    },
}

pub fn save_model(model: &ModelSpec, path: &Path) -> Result<()> {
    let header = Header {
        name: model.name.clone(),
        input_shape: [
            model.input_shape.channels,
            model.input_shape.height,
            model.input_shape.width,
        ],
        frac_bits_weights: model.frac_bits_weights,
        layers: model
            .layers
            .iter()
            .map(|l| match l {
                LayerDesc::Conv {
                    out_channels,
                    in_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => HeaderLayer::Conv {
                    out_channels: *out_channels,
                    in_channels: *in_channels,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                },
                LayerDesc::ConvTranspose {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => HeaderLayer::ConvTranspose {
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                },
                LayerDesc::Linear {
                    out_dim, in_dim, ..
                } => HeaderLayer::Linear {
                    out_dim: *out_dim,
                    in_dim: *in_dim,
                },
                LayerDesc::Relu => HeaderLayer::Relu,
                LayerDesc::LeakyRelu { alpha } => HeaderLayer::LeakyRelu { alpha: *alpha },
                LayerDesc::ResidualAdd { source } => HeaderLayer::ResidualAdd { source: *source },
            })
            .collect(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Parse(format!("header: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(CDM_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for layer in &model.layers {
        match layer {
            LayerDesc::Conv { weight, bias, .. }
            | LayerDesc::ConvTranspose { weight, bias, .. }
            | LayerDesc::Linear { weight, bias, .. } => {
                for v in weight.iter().chain(bias) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            _ => {}
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelSpec> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != CDM_MAGIC {
        return Err(Error::Parse("not a CDM1 model file".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::Parse("model header truncated".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::Parse(format!("model header: {e}")))?;

    let mut blob = bytes[8 + header_len..].chunks_exact(4);
    let mut take = |count: usize, what: &str| -> Result<Vec<f32>> {
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            let chunk = blob
                .next()
                .ok_or_else(|| Error::Parse(format!("weight blob truncated at {what}")))?;
            v.push(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
        Ok(v)
    };

    let mut layers = Vec::with_capacity(header.layers.len());
    for (idx, hl) in header.layers.iter().enumerate() {
        layers.push(match *hl {
            HeaderLayer::Conv {
                out_channels,
                in_channels,
                kernel,
                stride,
                padding,
            } => LayerDesc::Conv {
                out_channels,
                in_channels,
                kernel,
                stride,
                padding,
                weight: take(
                    out_channels * in_channels * kernel * kernel,
                    &format!("layer {idx} weight"),
                )?,
                bias: take(out_channels, &format!("layer {idx} bias"))?,
            },
            HeaderLayer::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => LayerDesc::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight: take(
                    out_channels * in_channels * kernel * kernel,
                    &format!("layer {idx} weight"),
                )?,
                bias: take(out_channels, &format!("layer {idx} bias"))?,
            },
            HeaderLayer::Linear { out_dim, in_dim } => LayerDesc::Linear {
                out_dim,
                in_dim,
                weight: take(out_dim * in_dim, &format!("layer {idx} weight"))?,
                bias: take(out_dim, &format!("layer {idx} bias"))?,
            },
            HeaderLayer::Relu => LayerDesc::Relu,
            HeaderLayer::LeakyRelu { alpha } => LayerDesc::LeakyRelu { alpha },
            HeaderLayer::ResidualAdd { source } => LayerDesc::ResidualAdd { source },
        });
    }
    if blob.next().is_some() {
        return Err(Error::Parse("trailing bytes after weight blob".into()));
    }

    ModelSpec::new(
        header.name,
        Shape::new(
            header.input_shape[0],
            header.input_shape[1],
            header.input_shape[2],
        ),
        header.frac_bits_weights,
        layers,
    )
}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

/// A layer with integer weights and its place in the scale plan.
#[derive(Debug, Clone)]
pub enum QuantizedLayer {
    Conv {
        weights: ConvWeights<BigInt>,
        bias: IntTensor,
        stride: usize,
        padding: usize,
    },
    ConvTranspose {
        weights: ConvTransposeWeights<BigInt>,
        bias: IntTensor,
        stride: usize,
        padding: usize,
    },
    Linear {
        weights: LinearWeights<BigInt>,
        bias: IntTensor,
    },
    Relu,
    LeakyRelu {
        alpha_int: BigInt,
    },
    ResidualAdd {
        source: usize,
        shift_bits: u32,
    },
}

impl QuantizedLayer {
    pub fn is_activation(&self) -> bool {
        matches!(
            self,
            QuantizedLayer::Relu | QuantizedLayer::LeakyRelu { .. }
        )
    }
}

/// Integer model bound to a concrete input scale. Weights are quantized once
/// here; biases are quantized directly at the scale they will meet at
/// runtime, so no runtime re-quantization ever happens.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub name: String,
    pub input_shape: Shape,
    pub input_frac_bits: u32,
    pub frac_bits_weights: u32,
    pub layers: Vec<QuantizedLayer>,
    /// Scale of the tensor entering each layer (input first).
    pub scale_tape: Vec<u32>,
    pub linear: bool,
}

impl QuantizedModel {
    pub fn output_frac_bits(&self) -> u32 {
        *self.scale_tape.last().expect("tape non-empty")
    }
}

impl ModelSpec {
    /// Quantize weights at `frac_bits_weights` and plan scales for a given
    /// input scale.
    pub fn quantize(&self, input_frac_bits: u32) -> Result<QuantizedModel> {
        let wb = self.frac_bits_weights;
        let mut scale_tape = vec![input_frac_bits];
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let cur = *scale_tape.last().expect("tape non-empty");
            let (q, next) = match layer {
                LayerDesc::Conv {
                    out_channels,
                    in_channels,
                    kernel,
                    stride,
                    padding,
                    weight,
                    bias,
                } => (
                    QuantizedLayer::Conv {
                        weights: ConvWeights::new(
                            *out_channels,
                            *in_channels,
                            *kernel,
                            quantize_all(weight, wb),
                        )?,
                        bias: bias_tensor(bias, cur + wb)?,
                        stride: *stride,
                        padding: *padding,
                    },
                    cur + wb,
                ),
                LayerDesc::ConvTranspose {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    weight,
                    bias,
                } => (
                    QuantizedLayer::ConvTranspose {
                        weights: ConvTransposeWeights::new(
                            *in_channels,
                            *out_channels,
                            *kernel,
                            quantize_all(weight, wb),
                        )?,
                        bias: bias_tensor(bias, cur + wb)?,
                        stride: *stride,
                        padding: *padding,
                    },
                    cur + wb,
                ),
                LayerDesc::Linear {
                    out_dim,
                    in_dim,
                    weight,
                    bias,
                } => (
                    QuantizedLayer::Linear {
                        weights: LinearWeights::new(*out_dim, *in_dim, quantize_all(weight, wb))?,
                        bias: bias_tensor(bias, cur + wb)?,
                    },
                    cur + wb,
                ),
                LayerDesc::Relu => (QuantizedLayer::Relu, cur),
                LayerDesc::LeakyRelu { alpha } => (
                    QuantizedLayer::LeakyRelu {
                        alpha_int: quantize(f64::from(*alpha), wb),
                    },
                    cur + wb,
                ),
                LayerDesc::ResidualAdd { source } => {
                    let src = scale_tape[*source];
                    if src > cur {
                        return Err(Error::ScaleMismatch {
                            expected: cur,
                            got: src,
                        });
                    }
                    (
                        QuantizedLayer::ResidualAdd {
                            source: *source,
                            shift_bits: cur - src,
                        },
                        cur,
                    )
                }
            };
            layers.push(q);
            scale_tape.push(next);
        }
        Ok(QuantizedModel {
            name: self.name.clone(),
            input_shape: self.input_shape,
            input_frac_bits,
            frac_bits_weights: wb,
            layers,
            scale_tape,
            linear: self.is_linear(),
        })
    }
}

fn quantize_all(weights: &[f32], bits: u32) -> Vec<BigInt> {
    weights
        .iter()
        .map(|&w| quantize(f64::from(w), bits))
        .collect()
}

fn bias_tensor(bias: &[f32], at_bits: u32) -> Result<IntTensor> {
    PlainTensor::new(
        Shape::new(bias.len(), 1, 1),
        quantize_all(bias, at_bits),
        ScaleTag::new(at_bits),
    )
}

// ---------------------------------------------------------------------------
// Reference inference engines
// ---------------------------------------------------------------------------

/// Ordinary float forward pass over the raw `f32` parameters.
pub fn infer_plain_float(model: &ModelSpec, image: &FloatTensor) -> Result<FloatTensor> {
    if image.shape != model.input_shape {
        return Err(Error::Shape(format!(
            "image {} vs model input {}",
            image.shape, model.input_shape
        )));
    }
    let mut tape: Vec<FloatTensor> = vec![image.clone()];
    for layer in &model.layers {
        let cur = tape.last().expect("tape non-empty");
        let next = match layer {
            LayerDesc::Conv {
                out_channels,
                in_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            } => {
                let w = ConvWeights::new(
                    *out_channels,
                    *in_channels,
                    *kernel,
                    weight.iter().map(|&v| f64::from(v)).collect(),
                )?;
                let mut out = conv2d_plain(cur, &w, *stride, *padding, 0)?;
                add_channel_bias_f64(&mut out, bias);
                out
            }
            LayerDesc::ConvTranspose {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            } => {
                let w = ConvTransposeWeights::new(
                    *in_channels,
                    *out_channels,
                    *kernel,
                    weight.iter().map(|&v| f64::from(v)).collect(),
                )?;
                let mut out = conv2d_transpose_plain(cur, &w, *stride, *padding, 0)?;
                add_channel_bias_f64(&mut out, bias);
                out
            }
            LayerDesc::Linear {
                out_dim,
                in_dim,
                weight,
                bias,
            } => {
                let w = LinearWeights::new(
                    *out_dim,
                    *in_dim,
                    weight.iter().map(|&v| f64::from(v)).collect(),
                )?;
                let mut out = linear_plain(cur, &w, 0)?;
                add_channel_bias_f64(&mut out, bias);
                out
            }
            LayerDesc::Relu => map_float(cur, |v| if v >= 0.0 { v } else { 0.0 }),
            LayerDesc::LeakyRelu { alpha } => {
                let a = f64::from(*alpha);
                map_float(cur, |v| if v >= 0.0 { v } else { a * v })
            }
            LayerDesc::ResidualAdd { source } => add_plain(cur, &tape[*source])?,
        };
        tape.push(next);
    }
    Ok(tape.pop().expect("tape non-empty"))
}

fn add_channel_bias_f64(t: &mut FloatTensor, bias: &[f32]) {
    let plane = t.shape.height * t.shape.width;
    for (i, v) in t.data.iter_mut().enumerate() {
        *v += f64::from(bias[i / plane]);
    }
}

fn map_float(t: &FloatTensor, f: impl Fn(f64) -> f64) -> FloatTensor {
    FloatTensor {
        shape: t.shape,
        data: t.data.iter().map(|&v| f(v)).collect(),
        scale: t.scale,
    }
}

/// Integer-exact forward pass mirroring the encrypted pipeline: fixed
/// accumulation order, `ReLU(q) = q iff q >= 0`, residual sources shifted up
/// to the current scale. When `modulus` is given, every intermediate is
/// checked to stay strictly inside `(-n/2, n/2)`, the losslessness
/// precondition.
pub fn infer_plain_fixed(
    qmodel: &QuantizedModel,
    image: &IntTensor,
    modulus: Option<&BigUint>,
) -> Result<IntTensor> {
    let tape = infer_plain_fixed_tape(qmodel, image, modulus)?;
    Ok(tape.into_iter().last().expect("tape non-empty"))
}

/// Same as [`infer_plain_fixed`] but returns the full tensor tape (input
/// first), which the verification harness diffs layer by layer.
pub fn infer_plain_fixed_tape(
    qmodel: &QuantizedModel,
    image: &IntTensor,
    modulus: Option<&BigUint>,
) -> Result<Vec<IntTensor>> {
    if image.shape != qmodel.input_shape {
        return Err(Error::Shape(format!(
            "image {} vs model input {}",
            image.shape, qmodel.input_shape
        )));
    }
    if image.scale.total_frac_bits != qmodel.input_frac_bits {
        return Err(Error::ScaleMismatch {
            expected: qmodel.input_frac_bits,
            got: image.scale.total_frac_bits,
        });
    }
    let wb = qmodel.frac_bits_weights;
    let mut tape: Vec<IntTensor> = vec![image.clone()];
    for (idx, layer) in qmodel.layers.iter().enumerate() {
        let cur = tape.last().expect("tape non-empty");
        let next = match layer {
            QuantizedLayer::Conv {
                weights,
                bias,
                stride,
                padding,
            } => {
                let out = conv2d_plain(cur, weights, *stride, *padding, wb)?;
                bias_add_plain(&out, bias)?
            }
            QuantizedLayer::ConvTranspose {
                weights,
                bias,
                stride,
                padding,
            } => {
                let out = conv2d_transpose_plain(cur, weights, *stride, *padding, wb)?;
                bias_add_plain(&out, bias)?
            }
            QuantizedLayer::Linear { weights, bias } => {
                let out = linear_plain(cur, weights, wb)?;
                bias_add_plain(&out, bias)?
            }
            QuantizedLayer::Relu => IntTensor {
                shape: cur.shape,
                data: cur
                    .data
                    .iter()
                    .map(|q| {
                        if q.is_negative() {
                            BigInt::zero()
                        } else {
                            q.clone()
                        }
                    })
                    .collect(),
                scale: cur.scale,
            },
            QuantizedLayer::LeakyRelu { alpha_int } => IntTensor {
                shape: cur.shape,
                data: cur
                    .data
                    .iter()
                    .map(|q| {
                        if q.is_negative() {
                            q * alpha_int
                        } else {
                            q << wb
                        }
                    })
                    .collect(),
                scale: cur.scale.after_mul(wb),
            },
            QuantizedLayer::ResidualAdd { source, shift_bits } => {
                let src = &tape[*source];
                let shifted = IntTensor {
                    shape: src.shape,
                    data: src.data.iter().map(|q| q << shift_bits).collect(),
                    scale: ScaleTag::new(src.scale.total_frac_bits + shift_bits),
                };
                add_plain(cur, &shifted)?
            }
        };
        if let Some(n) = modulus {
            if let Some(worst) = next.data.iter().map(|q| q.magnitude()).max() {
                if worst * 2u32 >= *n {
                    return Err(Error::OverflowBudget {
                        layer: idx,
                        required_bits: (worst * 2u32).bits() + 1,
                        available_bits: n.bits(),
                    });
                }
            }
        }
        tape.push(next);
    }
    Ok(tape)
}

/// Per-layer quantization drift: the worst absolute difference between the
/// decoded fixed-point tape and the float tape, one entry per layer output.
pub fn quantization_drift_per_layer(
    model: &ModelSpec,
    image: &FloatTensor,
    input_frac_bits: u32,
) -> Result<Vec<f64>> {
    let fixed_tape = infer_plain_fixed_tape(
        &model.quantize(input_frac_bits)?,
        &quantize_image(image, input_frac_bits),
        None,
    )?;

    // float tape, one layer at a time
    let mut float_tape: Vec<FloatTensor> = vec![image.clone()];
    for (idx, _) in model.layers.iter().enumerate() {
        let prefix = ModelSpec {
            name: String::new(),
            input_shape: model.input_shape,
            frac_bits_weights: model.frac_bits_weights,
            layers: model.layers[..=idx].to_vec(),
        };
        float_tape.push(infer_plain_float(&prefix, image)?);
    }

    Ok(fixed_tape
        .iter()
        .zip(&float_tape)
        .skip(1)
        .map(|(fx, fl)| {
            dequantize_image(fx)
                .data
                .iter()
                .zip(&fl.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Built-in model constructors
// ---------------------------------------------------------------------------

/// Snap a real to the nearest multiple of `2^-bits` (exactly representable in
/// `f32` for the ranges used here), so stored weights carry no further
/// quantization error at deployment precision.
pub fn snap_to_grid(v: f64, bits: u32) -> f32 {
    ((v * (bits as f64).exp2()).round() / (bits as f64).exp2()) as f32
}

impl ModelSpec {
    /// Demo nonlinear denoiser: conv(1->8) / ReLU / conv(8->8) / ReLU /
    /// conv_transpose(8->1) with a residual connection from the input.
    /// Random weights on the fixed-point grid, deterministic per seed.
    pub fn demo(input: Shape, frac_bits_weights: u32, seed: u64) -> ModelSpec {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let wb = frac_bits_weights;
        let mut grid_uniform = |scale: f64, count: usize| -> Vec<f32> {
            (0..count)
                .map(|_| snap_to_grid(rng.gen_range(-scale..scale), wb))
                .collect()
        };
        let layers = vec![
            LayerDesc::Conv {
                out_channels: 8,
                in_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
                weight: grid_uniform(1.0 / 3.0, 8 * 9),
                bias: grid_uniform(0.05, 8),
            },
            LayerDesc::Relu,
            LayerDesc::Conv {
                out_channels: 8,
                in_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
                weight: grid_uniform(1.0 / 8.5, 8 * 8 * 9),
                bias: grid_uniform(0.05, 8),
            },
            LayerDesc::Relu,
            LayerDesc::ConvTranspose {
                in_channels: 8,
                out_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
                weight: grid_uniform(1.0 / 8.5, 8 * 9),
                bias: grid_uniform(0.05, 1),
            },
            LayerDesc::ResidualAdd { source: 0 },
        ];
        ModelSpec::new("demo-nonlinear", input, wb, layers).expect("demo model is well-formed")
    }

    /// Linear-only counterpart (no activations): two convolutions plus the
    /// input residual.
    pub fn demo_linear(input: Shape, frac_bits_weights: u32, seed: u64) -> ModelSpec {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let wb = frac_bits_weights;
        let mut grid_uniform = |scale: f64, count: usize| -> Vec<f32> {
            (0..count)
                .map(|_| snap_to_grid(rng.gen_range(-scale..scale), wb))
                .collect()
        };
        let layers = vec![
            LayerDesc::Conv {
                out_channels: 4,
                in_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
                weight: grid_uniform(1.0 / 3.0, 4 * 9),
                bias: grid_uniform(0.05, 4),
            },
            LayerDesc::Conv {
                out_channels: 1,
                in_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
                weight: grid_uniform(1.0 / 6.0, 4 * 9),
                bias: grid_uniform(0.05, 1),
            },
            LayerDesc::ResidualAdd { source: 0 },
        ];
        ModelSpec::new("demo-linear", input, wb, layers).expect("demo model is well-formed")
    }

    /// `k` stacked 1x1 identity convolutions (weight 1.0, zero bias).
    pub fn stack_of_identity_convs(k: usize, frac_bits_weights: u32) -> ModelSpec {
        let layers = (0..k)
            .map(|_| LayerDesc::Conv {
                out_channels: 1,
                in_channels: 1,
                kernel: 1,
                stride: 1,
                padding: 0,
                weight: vec![1.0],
                bias: vec![0.0],
            })
            .collect();
        ModelSpec::new(
            "identity-stack",
            Shape::new(1, 4, 4),
            frac_bits_weights,
            layers,
        )
        .expect("identity stack is well-formed")
    }

    /// `k` stacked 3x3 all-ones convolutions, the worst case for magnitude
    /// accumulation.
    pub fn stack_of_ones_convs(k: usize, frac_bits_weights: u32) -> ModelSpec {
        let layers = (0..k)
            .map(|_| LayerDesc::Conv {
                out_channels: 1,
                in_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
                weight: vec![1.0; 9],
                bias: vec![0.0],
            })
            .collect();
        ModelSpec::new("ones-stack", Shape::new(1, 4, 4), frac_bits_weights, layers)
            .expect("ones stack is well-formed")
    }

    /// Identity model: a single 1x1 conv with weight 1.0.
    pub fn identity(input: Shape, frac_bits_weights: u32) -> ModelSpec {
        ModelSpec::new(
            "identity",
            input,
            frac_bits_weights,
            vec![LayerDesc::Conv {
                out_channels: input.channels,
                in_channels: input.channels,
                kernel: 1,
                stride: 1,
                padding: 0,
                weight: identity_1x1(input.channels),
                bias: vec![0.0; input.channels],
            }],
        )
        .expect("identity model is well-formed")
    }
}

fn identity_1x1(channels: usize) -> Vec<f32> {
    let mut w = vec![0.0f32; channels * channels];
    for c in 0..channels {
        w[c * channels + c] = 1.0;
    }
    w
}

/// Encode a float image tensor as fixed-point integers at `frac_bits`.
pub fn quantize_image(image: &FloatTensor, frac_bits: u32) -> IntTensor {
    IntTensor {
        shape: image.shape,
        data: image.data.iter().map(|&v| quantize(v, frac_bits)).collect(),
        scale: ScaleTag::new(frac_bits),
    }
}

/// Decode a fixed-point integer tensor back to floats.
pub fn dequantize_image(t: &IntTensor) -> FloatTensor {
    FloatTensor {
        shape: t.shape,
        data: t
            .data
            .iter()
            .map(|q| crate::encoding::dequantize(q, t.scale.total_frac_bits))
            .collect(),
        scale: ScaleTag::default(),
    }
}
