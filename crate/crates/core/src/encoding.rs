//! Signed fixed-point codec between real values and `Z_n` residues.
//!
//! Reals are scaled by `2^frac_bits`, rounded half-away-from-zero, and mapped
//! into `[0, n)` with negatives in the upper half (two's-complement style).
//! Multiplying two encodings adds their fractional-bit counts; the pipeline
//! never rescales mid-flight, so every tensor carries a [`ScaleTag`] recording
//! the cumulative count and decoding divides once at the end.

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};

use crate::model::{LayerDesc, ModelSpec};
use crate::{Error, Result};

pub const DEFAULT_FRAC_BITS: u32 = 16;

/// Encoding parameters tied to a public modulus.
#[derive(Debug, Clone)]
pub struct FixedPointParams {
    pub frac_bits: u32,
    pub n: BigUint,
}

impl FixedPointParams {
    pub fn new(frac_bits: u32, n: BigUint) -> Result<Self> {
        // headroom for at least one signed value
        if (BigUint::one() << frac_bits) * 4u32 >= n {
            return Err(Error::Domain(format!(
                "2^{frac_bits} leaves no headroom under n ({} bits)",
                n.bits()
            )));
        }
        Ok(Self { frac_bits, n })
    }
}

/// Cumulative fractional-bit count of a tensor; grows with every
/// fixed-point multiplication, never shrinks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScaleTag {
    pub total_frac_bits: u32,
}

impl ScaleTag {
    pub fn new(total_frac_bits: u32) -> Self {
        Self { total_frac_bits }
    }

    /// Scale after multiplying by a weight encoded with `w_bits`.
    pub fn after_mul(self, w_bits: u32) -> Self {
        Self {
            total_frac_bits: self.total_frac_bits + w_bits,
        }
    }
}

/// Round-half-away-from-zero quantization to a signed integer at `2^frac_bits`.
pub fn quantize(v: f64, frac_bits: u32) -> BigInt {
    let scaled = (v * (frac_bits as f64).exp2()).round();
    BigInt::from_f64(scaled).unwrap_or_else(BigInt::zero)
}

/// Inverse of [`quantize`] for signed integers at a known scale.
pub fn dequantize(x: &BigInt, total_frac_bits: u32) -> f64 {
    x.to_f64().unwrap_or(f64::INFINITY) / (total_frac_bits as f64).exp2()
}

/// Map a signed integer into `[0, n)` (negatives to the upper half).
pub fn residue_of(x: &BigInt, n: &BigUint) -> BigUint {
    x.mod_floor(&BigInt::from(n.clone()))
        .to_biguint()
        .expect("mod_floor of positive modulus is non-negative")
}

/// Center-lift a residue to the signed representative in `(-n/2, n/2]`.
pub fn center_lift(e: &BigUint, n: &BigUint) -> BigInt {
    let e_int = BigInt::from(e.clone());
    let n_int = BigInt::from(n.clone());
    if &e_int * 2 <= n_int {
        e_int
    } else {
        e_int - n_int
    }
}

/// Encode a real into `[0, n)`: `round(v * 2^frac_bits) mod n`.
pub fn encode(v: f64, params: &FixedPointParams) -> Result<BigUint> {
    if !v.is_finite() {
        return Err(Error::EncodeOverflow {
            value: v,
            frac_bits: params.frac_bits,
        });
    }
    let q = quantize(v, params.frac_bits);
    let bound = BigInt::from(params.n.clone());
    if q.abs() * 2 >= bound {
        return Err(Error::EncodeOverflow {
            value: v,
            frac_bits: params.frac_bits,
        });
    }
    Ok(residue_of(&q, &params.n))
}

/// Decode a residue back to a real: center-lift, then divide by the
/// cumulative scale.
pub fn decode(e: &BigUint, tag: ScaleTag, n: &BigUint) -> f64 {
    dequantize(&center_lift(e, n), tag.total_frac_bits)
}

/// Worst-case scale and magnitude accounting for a model pipeline.
#[derive(Debug, Clone)]
pub struct BudgetReport {
    /// Cumulative fractional bits at the pipeline output.
    pub max_frac_bits: u32,
    /// Worst-case absolute integer magnitude anywhere in the pipeline.
    pub magnitude_bound: BigUint,
    /// Modulus bit length needed to keep every value strictly inside
    /// `(-n/2, n/2)`.
    pub required_bits: u64,
}

impl BudgetReport {
    pub fn magnitude_bound_f64(&self) -> f64 {
        self.magnitude_bound.to_f64().unwrap_or(f64::INFINITY)
    }
}

/// Walk the model and bound the accumulated scale and magnitude of every
/// intermediate tensor, assuming inputs bounded by `input_magnitude`.
///
/// Fails with the offending layer and the required key size when any value
/// could leave `(-n/2, n/2)`.
pub fn overflow_budget(
    model: &ModelSpec,
    params: &FixedPointParams,
    input_magnitude: f64,
) -> Result<BudgetReport> {
    let wb = model.frac_bits_weights;
    let input_bound = quantize(input_magnitude, params.frac_bits)
        .magnitude()
        .clone()
        + BigUint::one();

    // tape[i] = (frac bits, magnitude bound) of the tensor entering layer i;
    // tape[0] is the model input.
    let mut tape: Vec<(u32, BigUint)> = vec![(params.frac_bits, input_bound)];
    let mut worst = tape[0].clone();
    let mut first_violation: Option<usize> = None;

    for (idx, layer) in model.layers.iter().enumerate() {
        let (frac, bound) = tape.last().expect("tape non-empty").clone();
        let next = match layer {
            LayerDesc::Conv {
                weight,
                bias,
                out_channels,
                in_channels,
                kernel,
                ..
            } => {
                let amp = max_row_abs_sum(weight, *out_channels, in_channels * kernel * kernel, wb);
                let bias_bound = max_abs_quantized(bias, frac + wb);
                (frac + wb, bound * amp + bias_bound)
            }
            LayerDesc::ConvTranspose {
                weight,
                bias,
                out_channels,
                in_channels,
                kernel,
                ..
            } => {
                // safe upper bound: every tap of a column may land on one output
                let amp = max_col_abs_sum(weight, *in_channels, *out_channels, kernel * kernel, wb);
                let bias_bound = max_abs_quantized(bias, frac + wb);
                (frac + wb, bound * amp + bias_bound)
            }
            LayerDesc::Linear {
                weight,
                bias,
                out_dim,
                in_dim,
            } => {
                let amp = max_row_abs_sum(weight, *out_dim, *in_dim, wb);
                let bias_bound = max_abs_quantized(bias, frac + wb);
                (frac + wb, bound * amp + bias_bound)
            }
            LayerDesc::Relu => (frac, bound),
            LayerDesc::LeakyRelu { alpha } => {
                let alpha_mag = quantize(f64::from(*alpha), wb).magnitude().clone();
                let pos = BigUint::one() << wb;
                (frac + wb, bound * pos.max(alpha_mag))
            }
            LayerDesc::ResidualAdd { source } => {
                let (src_frac, src_bound) = tape
                    .get(*source)
                    .ok_or_else(|| {
                        Error::Shape(format!(
                            "layer {idx}: residual source {source} out of range"
                        ))
                    })?
                    .clone();
                if src_frac > frac {
                    return Err(Error::ScaleMismatch {
                        expected: frac,
                        got: src_frac,
                    });
                }
                (
                    frac,
                    bound + src_bound * (BigUint::one() << (frac - src_frac)),
                )
            }
        };
        if next.1 > worst.1 {
            worst.1 = next.1.clone();
        }
        worst.0 = worst.0.max(next.0);
        if first_violation.is_none() && &next.1 * 2u32 >= params.n {
            first_violation = Some(idx);
        }
        tape.push(next);
    }

    // the requirement reported covers the whole pipeline, not just the first
    // layer that breaks
    let required_bits = (&worst.1 * 2u32).bits() + 1;
    if let Some(layer) = first_violation {
        return Err(Error::OverflowBudget {
            layer,
            required_bits,
            available_bits: params.n.bits(),
        });
    }

    let (out_frac, _) = tape.last().expect("tape non-empty");
    Ok(BudgetReport {
        max_frac_bits: *out_frac,
        required_bits,
        magnitude_bound: worst.1,
    })
}

fn max_row_abs_sum(weights: &[f32], rows: usize, cols: usize, wb: u32) -> BigUint {
    let mut worst = BigUint::zero();
    for r in 0..rows {
        let mut sum = BigUint::zero();
        for c in 0..cols {
            sum += quantize(f64::from(weights[r * cols + c]), wb).magnitude();
        }
        worst = worst.max(sum);
    }
    worst.max(BigUint::one())
}

fn max_col_abs_sum(weights: &[f32], in_ch: usize, out_ch: usize, k2: usize, wb: u32) -> BigUint {
    // weight layout (ic, oc, kh, kw): bound per output channel
    let mut worst = BigUint::zero();
    for oc in 0..out_ch {
        let mut sum = BigUint::zero();
        for ic in 0..in_ch {
            for k in 0..k2 {
                sum += quantize(f64::from(weights[(ic * out_ch + oc) * k2 + k]), wb).magnitude();
            }
        }
        worst = worst.max(sum);
    }
    worst.max(BigUint::one())
}

fn max_abs_quantized(values: &[f32], at_bits: u32) -> BigUint {
    values
        .iter()
        .map(|&v| quantize(f64::from(v), at_bits).magnitude().clone())
        .max()
        .unwrap_or_else(BigUint::zero)
}
