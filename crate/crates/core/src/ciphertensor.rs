//! Encrypted tensors and the encrypted-domain layer kernels.
//!
//! Every kernel is a composition of the two Paillier primitives: products of
//! ciphertext powers for multiply-accumulate, ciphertext products for adds.
//! Decrypting the output of any kernel here equals running the plain kernel
//! from [`crate::tensor`] on the decrypted input (mod n) — the oracle tests
//! pin that elementwise.
//!
//! Randomness (padding encryptions, bias encryptions) is always drawn from
//! the caller's RNG *before* the parallel compute sections, so runs with the
//! same seed are byte-identical regardless of thread scheduling.

use num_bigint::{BigInt, BigUint};
use num_traits::{One, Signed, Zero};
use rand::Rng;
use rayon::prelude::*;

use crate::encoding::{center_lift, residue_of, ScaleTag};
use crate::paillier::{self, Ciphertext, KeyFingerprint, PaillierPrivateKey, PaillierPublicKey};
use crate::tensor::{
    conv_output_shape, conv_transpose_output_shape, ConvTransposeWeights, ConvWeights, IntTensor,
    LinearWeights, PlainTensor, Shape,
};
use crate::{Error, Result};

/// Shaped array of ciphertexts sharing one scale and one key.
#[derive(Debug, Clone, PartialEq)]
pub struct CipherTensor {
    pub shape: Shape,
    pub data: Vec<Ciphertext>,
    pub scale: ScaleTag,
    pub key_id: KeyFingerprint,
}

impl CipherTensor {
    pub fn new(
        shape: Shape,
        data: Vec<Ciphertext>,
        scale: ScaleTag,
        key_id: KeyFingerprint,
    ) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "ciphertext count {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            scale,
            key_id,
        })
    }

    fn check_key(&self, pk: &PaillierPublicKey) -> Result<()> {
        if self.key_id != pk.fingerprint() {
            return Err(Error::KeyMismatch(format!(
                "tensor encrypted under {}, expected {}",
                self.key_id,
                pk.fingerprint()
            )));
        }
        Ok(())
    }
}

/// Encrypt a signed integer tensor elementwise.
pub fn encrypt_tensor<R: Rng + ?Sized>(
    pk: &PaillierPublicKey,
    t: &IntTensor,
    rng: &mut R,
) -> Result<CipherTensor> {
    let residues: Vec<BigUint> = t.data.iter().map(|v| residue_of(v, &pk.n)).collect();
    let rs = draw_units(pk, residues.len(), rng);
    let data = residues
        .par_iter()
        .zip(rs.par_iter())
        .map(|(m, r)| paillier::encrypt_with_r(pk, m, r))
        .collect::<Result<Vec<_>>>()?;
    CipherTensor::new(t.shape, data, t.scale, pk.fingerprint())
}

/// Decrypt elementwise to center-lifted signed integers.
pub fn decrypt_tensor(
    pk: &PaillierPublicKey,
    sk: &PaillierPrivateKey,
    t: &CipherTensor,
) -> Result<IntTensor> {
    t.check_key(pk)?;
    let data = t
        .data
        .par_iter()
        .map(|c| paillier::decrypt_crt(pk, sk, c).map(|m| center_lift(&m, &pk.n)))
        .collect::<Result<Vec<_>>>()?;
    PlainTensor::new(t.shape, data, t.scale)
}

/// Encrypted convolution: each output element is the product of input
/// ciphertexts raised to the corresponding integer kernel weights, reduced
/// mod n^2 after every factor. Zero padding enters as fresh encryptions of
/// zero so padded positions are indistinguishable from data.
pub fn conv2d_enc<R: Rng + ?Sized>(
    pk: &PaillierPublicKey,
    input: &CipherTensor,
    weights: &ConvWeights<BigInt>,
    stride: usize,
    padding: usize,
    weight_frac_bits: u32,
    rng: &mut R,
) -> Result<CipherTensor> {
    input.check_key(pk)?;
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

    let (padded, padded_shape) = pad_with_zero_encryptions(pk, input, padding, rng)?;
    let inv = precompute_inverses(pk, &padded, any_negative(&weights.data))?;

    let k = weights.kernel;
    let data: Vec<Ciphertext> = flat_indices(out_shape)
        .into_par_iter()
        .map(|(oc, oy, ox)| {
            let mut acc = BigUint::one();
            for ic in 0..weights.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = padded_shape.idx(ic, oy * stride + ky, ox * stride + kx);
                        let w = weights.at(oc, ic, ky, kx);
                        accumulate_power(
                            &mut acc,
                            &padded[idx],
                            inv.as_deref().map(|v| &v[idx]),
                            w,
                            pk,
                        );
                    }
                }
            }
            Ciphertext { value: acc }
        })
        .collect();

    CipherTensor::new(
        out_shape,
        data,
        input.scale.after_mul(weight_frac_bits),
        input.key_id,
    )
}

/// Encrypted transposed convolution (gather form of the scatter-add).
pub fn conv2d_transpose_enc(
    pk: &PaillierPublicKey,
    input: &CipherTensor,
    weights: &ConvTransposeWeights<BigInt>,
    stride: usize,
    padding: usize,
    weight_frac_bits: u32,
) -> Result<CipherTensor> {
    input.check_key(pk)?;
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
    let values: Vec<BigUint> = input.data.iter().map(|c| c.value.clone()).collect();
    let inv = precompute_inverses(pk, &values, any_negative(&weights.data))?;

    let k = weights.kernel;
    let in_shape = input.shape;
    let data: Vec<Ciphertext> = flat_indices(out_shape)
        .into_par_iter()
        .map(|(oc, oy, ox)| {
            let mut acc = BigUint::one();
            for ic in 0..weights.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
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
                        if iy >= in_shape.height || ix >= in_shape.width {
                            continue;
                        }
                        let idx = in_shape.idx(ic, iy, ix);
                        let w = weights.at(ic, oc, ky, kx);
                        accumulate_power(
                            &mut acc,
                            &values[idx],
                            inv.as_deref().map(|v| &v[idx]),
                            w,
                            pk,
                        );
                    }
                }
            }
            Ciphertext { value: acc }
        })
        .collect();

    CipherTensor::new(
        out_shape,
        data,
        input.scale.after_mul(weight_frac_bits),
        input.key_id,
    )
}

/// Encrypted matrix-vector product over the flattened input.
pub fn linear_enc(
    pk: &PaillierPublicKey,
    input: &CipherTensor,
    weights: &LinearWeights<BigInt>,
    weight_frac_bits: u32,
) -> Result<CipherTensor> {
    input.check_key(pk)?;
    if input.shape.len() != weights.in_dim {
        return Err(Error::Shape(format!(
            "linear expects {} inputs, tensor has {}",
            weights.in_dim,
            input.shape.len()
        )));
    }
    let values: Vec<BigUint> = input.data.iter().map(|c| c.value.clone()).collect();
    let inv = precompute_inverses(pk, &values, any_negative(&weights.data))?;

    let data: Vec<Ciphertext> = (0..weights.out_dim)
        .into_par_iter()
        .map(|row| {
            let mut acc = BigUint::one();
            for col in 0..weights.in_dim {
                let w = &weights.data[row * weights.in_dim + col];
                accumulate_power(
                    &mut acc,
                    &values[col],
                    inv.as_deref().map(|v| &v[col]),
                    w,
                    pk,
                );
            }
            Ciphertext { value: acc }
        })
        .collect();

    CipherTensor::new(
        Shape::new(weights.out_dim, 1, 1),
        data,
        input.scale.after_mul(weight_frac_bits),
        input.key_id,
    )
}

/// Elementwise homomorphic addition of equal-shape, equal-scale tensors.
pub fn add_enc(pk: &PaillierPublicKey, a: &CipherTensor, b: &CipherTensor) -> Result<CipherTensor> {
    a.check_key(pk)?;
    b.check_key(pk)?;
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
        .par_iter()
        .zip(b.data.par_iter())
        .map(|(x, y)| paillier::add_cipher(pk, x, y))
        .collect::<Result<Vec<_>>>()?;
    CipherTensor::new(a.shape, data, a.scale, a.key_id)
}

/// Per-channel bias: the server encrypts each integer bias under the client's
/// public key and folds it in homomorphically. Bias must be pre-aligned to the
/// tensor's scale.
pub fn bias_add_enc<R: Rng + ?Sized>(
    pk: &PaillierPublicKey,
    x: &CipherTensor,
    bias: &IntTensor,
    rng: &mut R,
) -> Result<CipherTensor> {
    x.check_key(pk)?;
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
    let mut enc_bias = Vec::with_capacity(bias.data.len());
    for b in &bias.data {
        enc_bias.push(paillier::encrypt(pk, &residue_of(b, &pk.n), rng)?);
    }
    let plane = x.shape.height * x.shape.width;
    let data = x
        .data
        .par_iter()
        .enumerate()
        .map(|(i, c)| paillier::add_cipher(pk, c, &enc_bias[i / plane]))
        .collect::<Result<Vec<_>>>()?;
    CipherTensor::new(x.shape, data, x.scale, x.key_id)
}

/// Raise every element to its own signed exponent (Hadamard power). Exponents
/// must be nonzero unless `allow_zero`; the sign-exchange activation uses the
/// zero case deliberately.
pub fn hadamard_pow(
    pk: &PaillierPublicKey,
    x: &CipherTensor,
    exponents: &[BigInt],
    scale_added: u32,
) -> Result<CipherTensor> {
    x.check_key(pk)?;
    if exponents.len() != x.data.len() {
        return Err(Error::Shape(format!(
            "exponent count {} vs {} elements",
            exponents.len(),
            x.data.len()
        )));
    }
    let data = x
        .data
        .par_iter()
        .zip(exponents.par_iter())
        .map(|(c, e)| paillier::scalar_mul(pk, c, e))
        .collect::<Result<Vec<_>>>()?;
    CipherTensor::new(
        x.shape,
        data,
        ScaleTag::new(x.scale.total_frac_bits + scale_added),
        x.key_id,
    )
}

/// Refresh the randomness of every element.
pub fn rerandomize_tensor<R: Rng + ?Sized>(
    pk: &PaillierPublicKey,
    x: &CipherTensor,
    rng: &mut R,
) -> Result<CipherTensor> {
    x.check_key(pk)?;
    let rs = draw_units(pk, x.data.len(), rng);
    let data = x
        .data
        .par_iter()
        .zip(rs.par_iter())
        .map(|(c, r)| {
            let r_n = r.modpow(&pk.n, &pk.n_sq);
            Ok(Ciphertext {
                value: &c.value * r_n % &pk.n_sq,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CipherTensor::new(x.shape, data, x.scale, x.key_id)
}

fn any_negative(weights: &[BigInt]) -> bool {
    weights.iter().any(|w| w.is_negative())
}

/// One multiply-accumulate step: `acc *= base^w mod n^2`, going through the
/// precomputed inverse for negative weights. Zero weights contribute nothing.
fn accumulate_power(
    acc: &mut BigUint,
    value: &BigUint,
    inverse: Option<&BigUint>,
    w: &BigInt,
    pk: &PaillierPublicKey,
) {
    if w.is_zero() {
        return;
    }
    let base = if w.is_negative() {
        inverse.expect("inverses precomputed when any weight is negative")
    } else {
        value
    };
    let factor = base.modpow(w.magnitude(), &pk.n_sq);
    *acc = &*acc * factor % &pk.n_sq;
}

fn precompute_inverses(
    pk: &PaillierPublicKey,
    values: &[BigUint],
    needed: bool,
) -> Result<Option<Vec<BigUint>>> {
    if !needed {
        return Ok(None);
    }
    let inv = values
        .par_iter()
        .map(|v| {
            paillier::mod_inverse(v, &pk.n_sq)
                .ok_or_else(|| Error::MalformedCiphertext("element not invertible mod n^2".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(inv))
}

/// Surround the spatial plane with fresh encryptions of zero.
fn pad_with_zero_encryptions<R: Rng + ?Sized>(
    pk: &PaillierPublicKey,
    input: &CipherTensor,
    padding: usize,
    rng: &mut R,
) -> Result<(Vec<BigUint>, Shape)> {
    let s = input.shape;
    if padding == 0 {
        return Ok((input.data.iter().map(|c| c.value.clone()).collect(), s));
    }
    let padded = Shape::new(s.channels, s.height + 2 * padding, s.width + 2 * padding);
    let pad_count = padded.len() - s.len();
    let mut zeros = Vec::with_capacity(pad_count);
    for _ in 0..pad_count {
        zeros.push(paillier::encrypt(pk, &BigUint::zero(), rng)?.value);
    }
    let mut zero_iter = zeros.into_iter();
    let mut out = Vec::with_capacity(padded.len());
    for c in 0..padded.channels {
        for y in 0..padded.height {
            for x in 0..padded.width {
                let inside =
                    y >= padding && y < padding + s.height && x >= padding && x < padding + s.width;
                if inside {
                    out.push(input.data[s.idx(c, y - padding, x - padding)].value.clone());
                } else {
                    out.push(zero_iter.next().expect("pad count"));
                }
            }
        }
    }
    Ok((out, padded))
}

fn draw_units<R: Rng + ?Sized>(pk: &PaillierPublicKey, count: usize, rng: &mut R) -> Vec<BigUint> {
    use num_bigint::RandBigInt;
    use num_integer::Integer;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let r = rng.gen_biguint_below(&pk.n);
        if !r.is_zero() && r.gcd(&pk.n).is_one() {
            out.push(r);
        }
    }
    out
}

fn flat_indices(shape: Shape) -> Vec<(usize, usize, usize)> {
    let mut v = Vec::with_capacity(shape.len());
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for x in 0..shape.width {
                v.push((c, y, x));
            }
        }
    }
    v
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------
//
// Header: shape (3 x u32 BE), total_frac_bits (u32 BE), key fingerprint
// (64 ASCII hex bytes), element byte length (u32 BE); then the elements as
// fixed-width big-endian values, row-major. Used verbatim on the wire; `.ctz`
// files prepend the magic "CTZ1".

pub const CTZ_MAGIC: &[u8; 4] = b"CTZ1";
/// shape (3 x u32) + total_frac_bits (u32) + fingerprint hex (64) + element
/// byte length (u32)
const HEADER_LEN: usize = 3 * 4 + 4 + 64 + 4;

/// Total serialized size for a given geometry.
pub fn serialized_len(shape: Shape, elem_len: usize) -> usize {
    HEADER_LEN + shape.len() * elem_len
}

impl CipherTensor {
    pub fn to_bytes(&self, elem_len: usize) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(serialized_len(self.shape, elem_len));
        out.extend_from_slice(&(self.shape.channels as u32).to_be_bytes());
        out.extend_from_slice(&(self.shape.height as u32).to_be_bytes());
        out.extend_from_slice(&(self.shape.width as u32).to_be_bytes());
        out.extend_from_slice(&self.scale.total_frac_bits.to_be_bytes());
        out.extend_from_slice(self.key_id.to_hex().as_bytes());
        out.extend_from_slice(&(elem_len as u32).to_be_bytes());
        for c in &self.data {
            let bytes = c.value.to_bytes_be();
            if bytes.len() > elem_len {
                return Err(Error::Shape(format!(
                    "ciphertext needs {} bytes, element width is {elem_len}",
                    bytes.len()
                )));
            }
            out.resize(out.len() + (elem_len - bytes.len()), 0);
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Parse("ciphertensor header truncated".into()));
        }
        let u32_at = |off: usize| {
            u32::from_be_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize
        };
        let shape = Shape::new(u32_at(0), u32_at(4), u32_at(8));
        let scale = ScaleTag::new(u32_at(12) as u32);
        let fp_hex = std::str::from_utf8(&bytes[16..80])
            .map_err(|_| Error::Parse("fingerprint not UTF-8".into()))?;
        let key_id = KeyFingerprint::from_hex(fp_hex)?;
        let elem_len = u32_at(80);
        if elem_len == 0 {
            return Err(Error::Parse("zero element width".into()));
        }
        let body = &bytes[HEADER_LEN..];
        if body.len() != shape.len() * elem_len {
            return Err(Error::Parse(format!(
                "ciphertensor body is {} bytes, expected {}",
                body.len(),
                shape.len() * elem_len
            )));
        }
        let data = body
            .chunks_exact(elem_len)
            .map(|chunk| Ciphertext {
                value: BigUint::from_bytes_be(chunk),
            })
            .collect();
        CipherTensor::new(shape, data, scale, key_id)
    }

    pub fn write_ctz(&self, path: &std::path::Path, elem_len: usize) -> Result<()> {
        let mut bytes = Vec::with_capacity(4 + serialized_len(self.shape, elem_len));
        bytes.extend_from_slice(CTZ_MAGIC);
        bytes.extend_from_slice(&self.to_bytes(elem_len)?);
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read_ctz(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 4 || &bytes[..4] != CTZ_MAGIC {
            return Err(Error::Parse("not a CTZ1 file".into()));
        }
        Self::from_bytes(&bytes[4..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::paillier::keygen;
    use crate::tensor::{
        add_plain, bias_add_plain, conv2d_plain, conv2d_transpose_plain, linear_plain,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn test_key(bits: u64, seed: u64) -> (PaillierPublicKey, PaillierPrivateKey) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        keygen(bits, &mut rng).unwrap()
    }

    fn random_int_tensor(shape: Shape, range: i64, scale: u32, rng: &mut ChaCha20Rng) -> IntTensor {
        PlainTensor::new(
            shape,
            (0..shape.len())
                .map(|_| BigInt::from(rng.gen_range(-range..=range)))
                .collect(),
            ScaleTag::new(scale),
        )
        .unwrap()
    }

    #[test]
    fn encrypt_decrypt_round_trip_signed() {
        let (pk, sk) = test_key(128, 41);
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let t = random_int_tensor(Shape::new(2, 3, 3), 1000, 4, &mut rng);
        let enc = encrypt_tensor(&pk, &t, &mut rng).unwrap();
        let dec = decrypt_tensor(&pk, &sk, &enc).unwrap();
        assert_eq!(dec, t);
    }

    #[test]
    fn conv_identity_kernel_shifts_scale_only() {
        let (pk, sk) = test_key(128, 43);
        let mut rng = ChaCha20Rng::seed_from_u64(44);
        let t = random_int_tensor(Shape::new(1, 4, 4), 100, 4, &mut rng);
        let enc = encrypt_tensor(&pk, &t, &mut rng).unwrap();
        // weight = encode(1.0) at 4 bits = 16
        let w = ConvWeights::new(1, 1, 1, vec![BigInt::from(16)]).unwrap();
        let out = conv2d_enc(&pk, &enc, &w, 1, 0, 4, &mut rng).unwrap();
        assert_eq!(out.scale.total_frac_bits, 8);
        let dec = decrypt_tensor(&pk, &sk, &out).unwrap();
        for (d, orig) in dec.data.iter().zip(&t.data) {
            assert_eq!(d, &(orig * 16));
        }
    }

    #[test]
    fn conv_zero_kernel_decrypts_to_zero() {
        let (pk, sk) = test_key(128, 45);
        let mut rng = ChaCha20Rng::seed_from_u64(46);
        let t = random_int_tensor(Shape::new(2, 4, 4), 100, 4, &mut rng);
        let enc = encrypt_tensor(&pk, &t, &mut rng).unwrap();
        let w = ConvWeights::new(1, 2, 3, vec![BigInt::zero(); 18]).unwrap();
        let out = conv2d_enc(&pk, &enc, &w, 1, 1, 4, &mut rng).unwrap();
        let dec = decrypt_tensor(&pk, &sk, &out).unwrap();
        assert!(dec.data.iter().all(|v| v.is_zero()));
    }

    #[test]
    fn conv_matches_plain_oracle_exactly() {
        let (pk, sk) = test_key(192, 47);
        let mut rng = ChaCha20Rng::seed_from_u64(48);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let t = random_int_tensor(Shape::new(2, 8, 8), 500, 6, &mut rng);
            let w = ConvWeights::new(
                3,
                2,
                3,
                (0..3 * 2 * 9)
                    .map(|_| BigInt::from(rng.gen_range(-64i64..=64)))
                    .collect(),
            )
            .unwrap();
            let enc = encrypt_tensor(&pk, &t, &mut rng).unwrap();
            let out = conv2d_enc(&pk, &enc, &w, stride, padding, 6, &mut rng).unwrap();
            let dec = decrypt_tensor(&pk, &sk, &out).unwrap();
            let oracle = conv2d_plain(&t, &w, stride, padding, 6).unwrap();
            assert_eq!(dec, oracle, "stride={stride} padding={padding}");
        }
    }

    #[test]
    fn transpose_matches_plain_oracle_exactly() {
        let (pk, sk) = test_key(192, 49);
        let mut rng = ChaCha20Rng::seed_from_u64(50);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let t = random_int_tensor(Shape::new(2, 4, 4), 500, 6, &mut rng);
            let w = ConvTransposeWeights::new(
                2,
                1,
                3,
                (0..2 * 9)
                    .map(|_| BigInt::from(rng.gen_range(-64i64..=64)))
                    .collect(),
            )
            .unwrap();
            let enc = encrypt_tensor(&pk, &t, &mut rng).unwrap();
            let out = conv2d_transpose_enc(&pk, &enc, &w, stride, padding, 6).unwrap();
            let dec = decrypt_tensor(&pk, &sk, &out).unwrap();
            let oracle = conv2d_transpose_plain(&t, &w, stride, padding, 6).unwrap();
            assert_eq!(dec, oracle, "stride={stride} padding={padding}");
        }
    }

    #[test]
    fn add_matches_plain_and_rejects_mismatches() {
        let (pk, sk) = test_key(128, 51);
        let mut rng = ChaCha20Rng::seed_from_u64(52);
        let a = random_int_tensor(Shape::new(1, 3, 3), 1000, 4, &mut rng);
        let b = random_int_tensor(Shape::new(1, 3, 3), 1000, 4, &mut rng);
        let ea = encrypt_tensor(&pk, &a, &mut rng).unwrap();
        let eb = encrypt_tensor(&pk, &b, &mut rng).unwrap();
        let sum = add_enc(&pk, &ea, &eb).unwrap();
        assert_eq!(
            decrypt_tensor(&pk, &sk, &sum).unwrap(),
            add_plain(&a, &b).unwrap()
        );

        let mut wrong_scale = eb.clone();
        wrong_scale.scale = ScaleTag::new(9);
        assert!(matches!(
            add_enc(&pk, &ea, &wrong_scale),
            Err(Error::ScaleMismatch { .. })
        ));

        let (pk2, _) = test_key(128, 53);
        let eb2 = encrypt_tensor(&pk2, &b, &mut rng).unwrap();
        assert!(matches!(
            add_enc(&pk, &ea, &eb2),
            Err(Error::KeyMismatch(_))
        ));
    }

    #[test]
    fn add_zero_tensor_is_identity() {
        let (pk, sk) = test_key(128, 54);
        let mut rng = ChaCha20Rng::seed_from_u64(55);
        let a = random_int_tensor(Shape::new(1, 2, 2), 1000, 4, &mut rng);
        let zero = IntTensor::zeros(a.shape, a.scale);
        let ea = encrypt_tensor(&pk, &a, &mut rng).unwrap();
        let ez = encrypt_tensor(&pk, &zero, &mut rng).unwrap();
        let sum = add_enc(&pk, &ea, &ez).unwrap();
        assert_eq!(decrypt_tensor(&pk, &sk, &sum).unwrap(), a);
    }

    #[test]
    fn bias_broadcast_matches_plain_oracle() {
        let (pk, sk) = test_key(128, 56);
        let mut rng = ChaCha20Rng::seed_from_u64(57);
        let x = random_int_tensor(Shape::new(3, 4, 4), 1000, 8, &mut rng);
        let bias = random_int_tensor(Shape::new(3, 1, 1), 500, 8, &mut rng);
        let ex = encrypt_tensor(&pk, &x, &mut rng).unwrap();
        let out = bias_add_enc(&pk, &ex, &bias, &mut rng).unwrap();
        assert_eq!(
            decrypt_tensor(&pk, &sk, &out).unwrap(),
            bias_add_plain(&x, &bias).unwrap()
        );

        // zero bias leaves the decryption unchanged
        let zb = IntTensor::zeros(Shape::new(3, 1, 1), x.scale);
        let same = bias_add_enc(&pk, &ex, &zb, &mut rng).unwrap();
        assert_eq!(decrypt_tensor(&pk, &sk, &same).unwrap(), x);

        // wrong scale refused
        let mut wb = bias.clone();
        wb.scale = ScaleTag::new(1);
        assert!(matches!(
            bias_add_enc(&pk, &ex, &wb, &mut rng),
            Err(Error::ScaleMismatch { .. })
        ));
    }

    #[test]
    fn linear_matches_plain_oracle() {
        let (pk, sk) = test_key(192, 58);
        let mut rng = ChaCha20Rng::seed_from_u64(59);
        let x = random_int_tensor(Shape::new(8, 1, 1), 1000, 6, &mut rng);
        let w = LinearWeights::new(
            8,
            8,
            (0..64)
                .map(|_| BigInt::from(rng.gen_range(-64i64..=64)))
                .collect(),
        )
        .unwrap();
        let ex = encrypt_tensor(&pk, &x, &mut rng).unwrap();
        let out = linear_enc(&pk, &ex, &w, 6).unwrap();
        assert_eq!(
            decrypt_tensor(&pk, &sk, &out).unwrap(),
            linear_plain(&x, &w, 6).unwrap()
        );
    }

    #[test]
    fn conv_distributes_over_homomorphic_add() {
        let (pk, sk) = test_key(192, 60);
        let mut rng = ChaCha20Rng::seed_from_u64(61);
        let a = random_int_tensor(Shape::new(1, 5, 5), 300, 6, &mut rng);
        let b = random_int_tensor(Shape::new(1, 5, 5), 300, 6, &mut rng);
        let w = ConvWeights::new(
            2,
            1,
            3,
            (0..18)
                .map(|_| BigInt::from(rng.gen_range(-32i64..=32)))
                .collect(),
        )
        .unwrap();
        let ea = encrypt_tensor(&pk, &a, &mut rng).unwrap();
        let eb = encrypt_tensor(&pk, &b, &mut rng).unwrap();

        let conv_of_sum =
            conv2d_enc(&pk, &add_enc(&pk, &ea, &eb).unwrap(), &w, 1, 0, 6, &mut rng).unwrap();
        let sum_of_convs = add_enc(
            &pk,
            &conv2d_enc(&pk, &ea, &w, 1, 0, 6, &mut rng).unwrap(),
            &conv2d_enc(&pk, &eb, &w, 1, 0, 6, &mut rng).unwrap(),
        )
        .unwrap();
        assert_eq!(
            decrypt_tensor(&pk, &sk, &conv_of_sum).unwrap(),
            decrypt_tensor(&pk, &sk, &sum_of_convs).unwrap()
        );
    }

    #[test]
    fn serialization_round_trips() {
        let (pk, sk) = test_key(128, 62);
        let mut rng = ChaCha20Rng::seed_from_u64(63);
        let t = random_int_tensor(Shape::new(2, 3, 4), 1000, 16, &mut rng);
        let enc = encrypt_tensor(&pk, &t, &mut rng).unwrap();
        let elem_len = pk.ciphertext_byte_len();
        let bytes = enc.to_bytes(elem_len).unwrap();
        assert_eq!(bytes.len(), serialized_len(enc.shape, elem_len));
        let back = CipherTensor::from_bytes(&bytes).unwrap();
        assert_eq!(back, enc);
        assert_eq!(decrypt_tensor(&pk, &sk, &back).unwrap(), t);
    }

    #[test]
    fn ctz_file_round_trip_and_magic_check() {
        let (pk, _) = test_key(128, 64);
        let mut rng = ChaCha20Rng::seed_from_u64(65);
        let t = random_int_tensor(Shape::new(1, 2, 2), 100, 16, &mut rng);
        let enc = encrypt_tensor(&pk, &t, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ctz");
        enc.write_ctz(&path, pk.ciphertext_byte_len()).unwrap();
        assert_eq!(CipherTensor::read_ctz(&path).unwrap(), enc);

        std::fs::write(dir.path().join("bad.ctz"), b"nope").unwrap();
        assert!(CipherTensor::read_ctz(&dir.path().join("bad.ctz")).is_err());
    }

    #[test]
    fn scale_determinism_is_pure_function_of_inputs() {
        let (pk, _) = test_key(128, 66);
        let mut rng = ChaCha20Rng::seed_from_u64(67);
        let t = random_int_tensor(Shape::new(1, 4, 4), 100, 16, &mut rng);
        let enc = encrypt_tensor(&pk, &t, &mut rng).unwrap();
        let w = ConvWeights::new(1, 1, 3, vec![BigInt::from(3); 9]).unwrap();
        let a = conv2d_enc(&pk, &enc, &w, 1, 1, 16, &mut rng).unwrap();
        let b = conv2d_enc(&pk, &enc, &w, 1, 1, 16, &mut rng).unwrap();
        assert_eq!(a.scale, b.scale);
        assert_eq!(a.scale.total_frac_bits, 32);
    }

    #[test]
    fn encryption_with_fixed_seed_is_reproducible() {
        let (pk, _) = test_key(128, 68);
        let t = random_int_tensor(
            Shape::new(1, 3, 3),
            100,
            16,
            &mut ChaCha20Rng::seed_from_u64(1),
        );
        let e1 = encrypt_tensor(&pk, &t, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let e2 = encrypt_tensor(&pk, &t, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let e3 = encrypt_tensor(&pk, &t, &mut ChaCha20Rng::seed_from_u64(10)).unwrap();
        assert_eq!(e1, e2);
        assert_ne!(e1, e3);
    }
}
