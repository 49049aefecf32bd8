//! The sign-exchange activation: perturbance matrices, sign matrices, and the
//! server/client halves of the encrypted ReLU family.
//!
//! The server multiplies each encrypted feature by a private nonzero random
//! integer (via the scalar homomorphism), the client decrypts only the
//! perturbed values and uploads their sign bits, and the server recovers the
//! true feature signs by checking *agreement* between the uploaded bits and
//! the signs of its own multipliers: the true feature is non-negative exactly
//! when sign(M*Q) equals sign(M), with sign(0) counted as positive. Agreement
//! rather than a literal bit product is what keeps negative multipliers
//! usable (see the truth-table tests); negative multipliers are what prevent
//! the sign bits from leaking the features.

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use rand::Rng;

use crate::ciphertensor::{hadamard_pow, rerandomize_tensor, CipherTensor};
use crate::paillier::{PaillierPrivateKey, PaillierPublicKey};
use crate::tensor::Shape;
use crate::{ciphertensor, Error, Result};

pub const DEFAULT_PERTURB_BOUND: u32 = 1 << 16;

/// Binary matrix over a feature shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignMatrix {
    pub shape: Shape,
    pub bits: Vec<bool>,
}

impl SignMatrix {
    pub fn new(shape: Shape, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != shape.len() {
            return Err(Error::Shape(format!(
                "sign matrix has {} bits for shape {shape}",
                bits.len()
            )));
        }
        Ok(Self { shape, bits })
    }
}

/// Server-private per-activation multipliers. Never serialized; the only
/// things derived from it that touch the wire are ciphertext powers.
#[derive(Debug, Clone)]
pub struct PerturbanceMatrix {
    pub shape: Shape,
    pub values: Vec<i64>,
    /// `S_s`: sign bits of `values` (1 for non-negative).
    pub sign_server: SignMatrix,
}

impl PerturbanceMatrix {
    pub fn from_values(shape: Shape, values: Vec<i64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::Shape(format!(
                "perturbance matrix has {} entries for shape {shape}",
                values.len()
            )));
        }
        if values.contains(&0) {
            return Err(Error::Domain("perturbance entries must be nonzero".into()));
        }
        let sign_server = SignMatrix::new(shape, values.iter().map(|&v| v >= 0).collect())?;
        Ok(Self {
            shape,
            values,
            sign_server,
        })
    }

    /// Uniform over `[-bound, -1] u [1, bound]`, fresh per activation.
    pub fn sample<R: Rng + ?Sized>(shape: Shape, bound: u32, rng: &mut R) -> Self {
        let bound = i64::from(bound.max(1));
        let values = (0..shape.len())
            .map(|_| {
                let magnitude = rng.gen_range(1..=bound);
                if rng.gen_bool(0.5) {
                    magnitude
                } else {
                    -magnitude
                }
            })
            .collect();
        Self::from_values(shape, values).expect("sampled entries are nonzero")
    }

    /// All-ones identity perturbation (test and attack-experiment hook).
    pub fn identity(shape: Shape) -> Self {
        Self::from_values(shape, vec![1; shape.len()]).expect("ones are nonzero")
    }
}

/// Server side, step one: raise each feature ciphertext to its multiplier.
/// The result decrypts to `M (.) Q`; the matrix stays on the server.
pub fn server_perturb(
    pk: &PaillierPublicKey,
    feature: &CipherTensor,
    m: &PerturbanceMatrix,
) -> Result<CipherTensor> {
    if m.shape != feature.shape {
        return Err(Error::Shape(format!(
            "perturbance {} vs feature {}",
            m.shape, feature.shape
        )));
    }
    let exponents: Vec<BigInt> = m.values.iter().map(|&v| BigInt::from(v)).collect();
    hadamard_pow(pk, feature, &exponents, 0)
}

/// Client side: decrypt the perturbed feature and return the sign bits of
/// `ReLU(M (.) Q)` - equivalently, the non-negativity bits, with the zero
/// value counted positive.
pub fn client_act(
    pk: &PaillierPublicKey,
    sk: &PaillierPrivateKey,
    perturbed: &CipherTensor,
) -> Result<SignMatrix> {
    let plain = ciphertensor::decrypt_tensor(pk, sk, perturbed)?;
    SignMatrix::new(
        plain.shape,
        plain.data.iter().map(|q| !q.is_negative()).collect(),
    )
}

/// Sign agreement: bit k is 1 iff the client and server bits match, which
/// equals `Q[k] >= 0`.
pub fn combine_signs(user: &SignMatrix, server: &SignMatrix) -> Result<SignMatrix> {
    if user.shape != server.shape {
        return Err(Error::Shape(format!(
            "sign matrices {} vs {}",
            user.shape, server.shape
        )));
    }
    SignMatrix::new(
        user.shape,
        user.bits
            .iter()
            .zip(&server.bits)
            .map(|(u, s)| u == s)
            .collect(),
    )
}

/// Server side, step two (ReLU): apply the recovered sign matrix to the
/// *original* feature - exponent 1 keeps the value, exponent 0 encrypts zero
/// - then re-randomize so the wire does not reveal which happened.
pub fn server_combine_and_activate<R: Rng + ?Sized>(
    pk: &PaillierPublicKey,
    feature: &CipherTensor,
    user_signs: &SignMatrix,
    m: &PerturbanceMatrix,
    rng: &mut R,
) -> Result<CipherTensor> {
    if m.shape != feature.shape {
        return Err(Error::Shape(format!(
            "perturbance {} vs feature {}",
            m.shape, feature.shape
        )));
    }
    let signs = combine_signs(user_signs, &m.sign_server)?;
    let exponents: Vec<BigInt> = signs
        .bits
        .iter()
        .map(|&keep| if keep { BigInt::one() } else { BigInt::zero() })
        .collect();
    let activated = hadamard_pow(pk, feature, &exponents, 0)?;
    rerandomize_tensor(pk, &activated, rng)
}

/// Server side, step two (LeakyReLU): positive features are scaled by
/// `2^alpha_bits` (one on the fixed-point grid), negative ones by the encoded
/// slope, so both branches land on the same output scale.
pub fn server_activate_leaky<R: Rng + ?Sized>(
    pk: &PaillierPublicKey,
    feature: &CipherTensor,
    signs: &SignMatrix,
    alpha_encoded: &BigInt,
    alpha_bits: u32,
    rng: &mut R,
) -> Result<CipherTensor> {
    if signs.shape != feature.shape {
        return Err(Error::Shape(format!(
            "sign matrix {} vs feature {}",
            signs.shape, feature.shape
        )));
    }
    let unit = BigInt::one() << alpha_bits;
    let exponents: Vec<BigInt> = signs
        .bits
        .iter()
        .map(|&pos| {
            if pos {
                unit.clone()
            } else {
                alpha_encoded.clone()
            }
        })
        .collect();
    let activated = hadamard_pow(pk, feature, &exponents, alpha_bits)?;
    rerandomize_tensor(pk, &activated, rng)
}

/// Threshold extension: shift the comparison point to zero by folding in a
/// client-encrypted `-t` before the sign exchange. The recovered signs are
/// then applied to the *original, unshifted* feature.
///
/// Boundary: when a feature equals the threshold exactly, the shifted value
/// is zero and the product with the multiplier erases the multiplier's sign,
/// so the recovered bit is `q >= t` under a positive multiplier but `q > t`
/// under a negative one. Plain ReLU is immune (the kept value is zero either
/// way); threshold users must not rely on exact-boundary behavior.
pub fn server_threshold_shift(
    pk: &PaillierPublicKey,
    feature: &CipherTensor,
    enc_neg_threshold: &CipherTensor,
) -> Result<CipherTensor> {
    ciphertensor::add_enc(pk, feature, enc_neg_threshold)
}
