//! Paillier cryptosystem over arbitrary-precision integers.
//!
//! Plaintexts live in `Z_n`, ciphertexts in `Z*_{n^2}`. The two homomorphic
//! primitives everything else is built from:
//!
//! - [`add_cipher`]: ciphertext product decrypts to the plaintext sum.
//! - [`scalar_mul`]: ciphertext power decrypts to the plaintext scaled by the
//!   (signed) exponent.
//!
//! Keys default to `g = n + 1`, which guarantees the decryption gcd condition
//! and makes encryption a single multiplication instead of a modpow. Arbitrary
//! generators are still accepted through [`keypair_from_primes`] so small
//! hand-computed test keys work.

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::Rng;
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;

use crate::{Error, Result};

const MILLER_RABIN_ROUNDS: u32 = 64;
const KEYGEN_MAX_RETRIES: u32 = 10_000;
const KEY_FILE_VERSION: u32 = 1;

/// Public half of a Paillier keypair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaillierPublicKey {
    /// Modulus `n = p * q`.
    pub n: BigUint,
    /// Cached `n^2`.
    pub n_sq: BigUint,
    /// Generator in `Z*_{n^2}`.
    pub g: BigUint,
    fingerprint: KeyFingerprint,
}

/// Private half: Carmichael value, its inverse, and the retained primes for
/// the CRT decryption fast path.
#[derive(Clone, PartialEq, Eq)]
pub struct PaillierPrivateKey {
    pub lambda: BigUint,
    pub mu: BigUint,
    pub p: BigUint,
    pub q: BigUint,
}

impl fmt::Debug for PaillierPrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Never print private material.
        f.write_str("PaillierPrivateKey{..}")
    }
}

/// One element of `Z*_{n^2}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub value: BigUint,
}

/// SHA-256 of `n || g` (big-endian bytes), the key identity used by tensors
/// and the wire protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyFingerprint(pub [u8; 32]);

impl KeyFingerprint {
    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Parse(format!("fingerprint: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Parse("fingerprint: wrong length".into()))?;
        Ok(KeyFingerprint(arr))
    }
}

impl fmt::Display for KeyFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl PaillierPublicKey {
    pub fn new(n: BigUint, g: BigUint) -> Result<Self> {
        if n < BigUint::from(15u32) {
            return Err(Error::KeygenFailure(format!("modulus too small: {n}")));
        }
        let n_sq = &n * &n;
        if g.is_zero() || g >= n_sq || !g.gcd(&n_sq).is_one() {
            return Err(Error::KeygenFailure("generator not in Z*_{n^2}".into()));
        }
        let fingerprint = fingerprint_of(&n, &g);
        Ok(Self {
            n,
            n_sq,
            g,
            fingerprint,
        })
    }

    pub fn fingerprint(&self) -> KeyFingerprint {
        self.fingerprint
    }

    /// Bit length of the modulus.
    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    /// Fixed byte width of a serialized ciphertext under this key.
    pub fn ciphertext_byte_len(&self) -> usize {
        self.n_sq.bits().div_ceil(8) as usize
    }
}

fn fingerprint_of(n: &BigUint, g: &BigUint) -> KeyFingerprint {
    let mut hasher = Sha256::new();
    hasher.update(n.to_bytes_be());
    hasher.update(g.to_bytes_be());
    KeyFingerprint(hasher.finalize().into())
}

/// Generate a keypair with an `bit_length`-bit modulus (two primes of half
/// that size, `g = n + 1`).
pub fn keygen<R: Rng + ?Sized>(
    bit_length: u64,
    rng: &mut R,
) -> Result<(PaillierPublicKey, PaillierPrivateKey)> {
    if bit_length < 16 {
        return Err(Error::KeygenFailure(format!(
            "bit length {bit_length} below minimum 16"
        )));
    }
    let half = bit_length / 2;
    for _ in 0..KEYGEN_MAX_RETRIES {
        let p = gen_prime(half, rng)?;
        let q = gen_prime(bit_length - half, rng)?;
        match keypair_from_primes(&p, &q, None) {
            Ok(keys) => return Ok(keys),
            Err(_) => continue,
        }
    }
    Err(Error::KeygenFailure(format!(
        "no valid prime pair after {KEYGEN_MAX_RETRIES} attempts"
    )))
}

/// Build a keypair from given primes, with an optional explicit generator
/// (defaults to `n + 1`). Used by tests to inject toy keys.
pub fn keypair_from_primes(
    p: &BigUint,
    q: &BigUint,
    g: Option<BigUint>,
) -> Result<(PaillierPublicKey, PaillierPrivateKey)> {
    if p == q {
        return Err(Error::KeygenFailure("p and q must be distinct".into()));
    }
    let one = BigUint::one();
    let n = p * q;
    let pm1 = p - &one;
    let qm1 = q - &one;
    if !n.gcd(&(&pm1 * &qm1)).is_one() {
        return Err(Error::KeygenFailure("gcd(pq, (p-1)(q-1)) != 1".into()));
    }
    let g = g.unwrap_or_else(|| &n + &one);
    let pk = PaillierPublicKey::new(n.clone(), g)?;
    let lambda = pm1.lcm(&qm1);

    // mu = (L(g^lambda mod n^2))^-1 mod n; the gcd condition on g is exactly
    // the invertibility of that L value.
    let u = pk.g.modpow(&lambda, &pk.n_sq);
    let l = l_function(&u, &n)?;
    let mu = mod_inverse(&l, &n)
        .ok_or_else(|| Error::KeygenFailure("gcd(L(g^lambda mod n^2), n) != 1".into()))?;

    let sk = PaillierPrivateKey {
        lambda,
        mu,
        p: p.clone(),
        q: q.clone(),
    };
    Ok((pk, sk))
}

/// `L(u) = (u - 1) / n`, defined only when `u = 1 (mod n)`.
fn l_function(u: &BigUint, n: &BigUint) -> Result<BigUint> {
    let um1 = u - BigUint::one();
    let (quot, rem) = um1.div_rem(n);
    if !rem.is_zero() {
        return Err(Error::MalformedCiphertext(
            "L-function input not congruent to 1 mod n".into(),
        ));
    }
    Ok(quot)
}

/// Encrypt `m` in `[0, n)` with fresh randomness.
pub fn encrypt<R: Rng + ?Sized>(
    pk: &PaillierPublicKey,
    m: &BigUint,
    rng: &mut R,
) -> Result<Ciphertext> {
    let r = sample_unit(pk, rng);
    encrypt_with_r(pk, m, &r)
}

/// Encrypt with caller-supplied randomness `r` (deterministic; tests and
/// transcript-replay harnesses).
pub fn encrypt_with_r(pk: &PaillierPublicKey, m: &BigUint, r: &BigUint) -> Result<Ciphertext> {
    if m >= &pk.n {
        return Err(Error::Domain(format!("plaintext {m} >= n")));
    }
    if r.is_zero() || r >= &pk.n || !r.gcd(&pk.n).is_one() {
        return Err(Error::Domain("randomness r not a unit of Z_n".into()));
    }
    let g_m = if pk.g == &pk.n + BigUint::one() {
        // (1 + n)^m = 1 + m*n  (mod n^2)
        (BigUint::one() + m * &pk.n) % &pk.n_sq
    } else {
        pk.g.modpow(m, &pk.n_sq)
    };
    let r_n = r.modpow(&pk.n, &pk.n_sq);
    Ok(Ciphertext {
        value: g_m * r_n % &pk.n_sq,
    })
}

/// Decrypt via `L(c^lambda mod n^2) * mu mod n`.
pub fn decrypt(pk: &PaillierPublicKey, sk: &PaillierPrivateKey, c: &Ciphertext) -> Result<BigUint> {
    check_ciphertext(pk, c)?;
    let u = c.value.modpow(&sk.lambda, &pk.n_sq);
    let l = l_function(&u, &pk.n)?;
    Ok(l * &sk.mu % &pk.n)
}

/// CRT decryption fast path using the retained primes. Agrees bit-exactly
/// with [`decrypt`].
pub fn decrypt_crt(
    pk: &PaillierPublicKey,
    sk: &PaillierPrivateKey,
    c: &Ciphertext,
) -> Result<BigUint> {
    check_ciphertext(pk, c)?;
    let one = BigUint::one();
    let p_sq = &sk.p * &sk.p;
    let q_sq = &sk.q * &sk.q;
    let pm1 = &sk.p - &one;
    let qm1 = &sk.q - &one;

    let lp = |u: &BigUint| (u - &one) / &sk.p;
    let lq = |u: &BigUint| (u - &one) / &sk.q;

    let hp = mod_inverse(&lp(&pk.g.modpow(&pm1, &p_sq)), &sk.p)
        .ok_or_else(|| Error::MalformedCiphertext("CRT precompute (p)".into()))?;
    let hq = mod_inverse(&lq(&pk.g.modpow(&qm1, &q_sq)), &sk.q)
        .ok_or_else(|| Error::MalformedCiphertext("CRT precompute (q)".into()))?;

    let mp = lp(&c.value.modpow(&pm1, &p_sq)) * hp % &sk.p;
    let mq = lq(&c.value.modpow(&qm1, &q_sq)) * hq % &sk.q;

    // Garner recombination: m = mp + p * ((mq - mp) * p^-1 mod q)
    let p_inv_q = mod_inverse(&(&sk.p % &sk.q), &sk.q)
        .ok_or_else(|| Error::MalformedCiphertext("p not invertible mod q".into()))?;
    let diff = (&mq + &sk.q - &mp % &sk.q) % &sk.q;
    let t = diff * p_inv_q % &sk.q;
    Ok(mp + &sk.p * t)
}

/// Homomorphic addition: `Dec(a*b mod n^2) = Dec(a) + Dec(b) (mod n)`.
pub fn add_cipher(pk: &PaillierPublicKey, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
    check_key_context(pk, a)?;
    check_key_context(pk, b)?;
    Ok(Ciphertext {
        value: &a.value * &b.value % &pk.n_sq,
    })
}

/// Homomorphic plaintext-scalar multiplication: `Dec(c^a) = a * Dec(c) (mod n)`.
/// Negative scalars go through the modular inverse of the ciphertext.
pub fn scalar_mul(pk: &PaillierPublicKey, c: &Ciphertext, a: &BigInt) -> Result<Ciphertext> {
    check_key_context(pk, c)?;
    let exp = a.magnitude();
    let base = if a.is_negative() {
        mod_inverse(&c.value, &pk.n_sq)
            .ok_or_else(|| Error::MalformedCiphertext("ciphertext not invertible mod n^2".into()))?
    } else {
        c.value.clone()
    };
    Ok(Ciphertext {
        value: base.modpow(exp, &pk.n_sq),
    })
}

pub fn scalar_mul_i64(pk: &PaillierPublicKey, c: &Ciphertext, a: i64) -> Result<Ciphertext> {
    scalar_mul(pk, c, &BigInt::from(a))
}

/// Multiply in a fresh `r^n`: plaintext unchanged, bytes refreshed. Restores
/// semantic security after exponent-0/1 results.
pub fn rerandomize<R: Rng + ?Sized>(
    pk: &PaillierPublicKey,
    c: &Ciphertext,
    rng: &mut R,
) -> Result<Ciphertext> {
    check_key_context(pk, c)?;
    let r = sample_unit(pk, rng);
    let r_n = r.modpow(&pk.n, &pk.n_sq);
    Ok(Ciphertext {
        value: &c.value * r_n % &pk.n_sq,
    })
}

fn check_ciphertext(pk: &PaillierPublicKey, c: &Ciphertext) -> Result<()> {
    check_key_context(pk, c)?;
    if !c.value.gcd(&pk.n).is_one() {
        return Err(Error::MalformedCiphertext("gcd(value, n) != 1".into()));
    }
    Ok(())
}

fn check_key_context(pk: &PaillierPublicKey, c: &Ciphertext) -> Result<()> {
    if c.value.is_zero() || c.value >= pk.n_sq {
        return Err(Error::KeyMismatch(
            "ciphertext outside Z*_{n^2} for this key".into(),
        ));
    }
    Ok(())
}

/// Fresh `r` with `0 < r < n`, `gcd(r, n) = 1`.
fn sample_unit<R: Rng + ?Sized>(pk: &PaillierPublicKey, rng: &mut R) -> BigUint {
    loop {
        let r = rng.gen_biguint_below(&pk.n);
        if !r.is_zero() && r.gcd(&pk.n).is_one() {
            return r;
        }
    }
}

/// Modular inverse via extended gcd; `None` when not coprime.
pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    let a = BigInt::from(a.clone());
    let m_int = BigInt::from(m.clone());
    let ext = a.extended_gcd(&m_int);
    if !ext.gcd.is_one() {
        return None;
    }
    let x = ext.x.mod_floor(&m_int);
    x.to_biguint()
}

// ---------------------------------------------------------------------------
// Prime generation
// ---------------------------------------------------------------------------

const SMALL_PRIMES: [u32; 60] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193,
    197, 199, 211, 223, 227, 229, 233, 239, 241, 251, 257, 263, 269, 271, 277, 281, 283,
];

/// Random probable prime with exactly `bits` bits (Miller-Rabin, 64 rounds).
/// The top two bits are set so a product of two such primes always reaches
/// the full target width.
pub fn gen_prime<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> Result<BigUint> {
    if bits < 4 {
        return Err(Error::KeygenFailure("prime size below 4 bits".into()));
    }
    for _ in 0..KEYGEN_MAX_RETRIES {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if SMALL_PRIMES
            .iter()
            .any(|&sp| (&candidate % sp).is_zero() && candidate != BigUint::from(sp))
        {
            continue;
        }
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return Ok(candidate);
        }
    }
    Err(Error::KeygenFailure(format!(
        "no {bits}-bit prime found after {KEYGEN_MAX_RETRIES} attempts"
    )))
}

/// Miller-Rabin with `rounds` random bases.
pub fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rounds: u32, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    let three = BigUint::from(3u32);
    if n < &two {
        return false;
    }
    if n == &two || n == &three {
        return true;
    }
    if n.is_even() {
        return false;
    }
    let one = BigUint::one();
    let n_m1 = n - &one;
    let s = n_m1.trailing_zeros().unwrap_or(0);
    let d = &n_m1 >> s;

    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_m1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_m1 {
            continue;
        }
        for _ in 0..s.saturating_sub(1) {
            x = x.modpow(&two, n);
            if x == n_m1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

// ---------------------------------------------------------------------------
// Key files
// ---------------------------------------------------------------------------
//
// A key file is newline-terminated UTF-8, one `name=hex` pair per line with
// lowercase big-endian hex values. A public key file carries only
// {version, n, g}; the private file adds {lambda, mu, p, q}.

pub fn save_public_key(pk: &PaillierPublicKey, path: &Path) -> Result<()> {
    let body = format!(
        "version={:x}\nn={}\ng={}\n",
        KEY_FILE_VERSION,
        hex_of(&pk.n),
        hex_of(&pk.g)
    );
    std::fs::write(path, body)?;
    Ok(())
}

pub fn save_private_key(
    pk: &PaillierPublicKey,
    sk: &PaillierPrivateKey,
    path: &Path,
) -> Result<()> {
    let body = format!(
        "version={:x}\nn={}\ng={}\nlambda={}\nmu={}\np={}\nq={}\n",
        KEY_FILE_VERSION,
        hex_of(&pk.n),
        hex_of(&pk.g),
        hex_of(&sk.lambda),
        hex_of(&sk.mu),
        hex_of(&sk.p),
        hex_of(&sk.q)
    );
    std::fs::write(path, body)?;
    Ok(())
}

pub fn load_public_key(path: &Path) -> Result<PaillierPublicKey> {
    let fields = parse_key_file(path)?;
    PaillierPublicKey::new(field(&fields, "n")?, field(&fields, "g")?)
}

pub fn load_private_key(path: &Path) -> Result<(PaillierPublicKey, PaillierPrivateKey)> {
    let fields = parse_key_file(path)?;
    let pk = PaillierPublicKey::new(field(&fields, "n")?, field(&fields, "g")?)?;
    let sk = PaillierPrivateKey {
        lambda: field(&fields, "lambda")?,
        mu: field(&fields, "mu")?,
        p: field(&fields, "p")?,
        q: field(&fields, "q")?,
    };
    Ok((pk, sk))
}

fn hex_of(v: &BigUint) -> String {
    format!("{v:x}")
}

fn parse_key_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut fields = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("key file line without '=': {line:?}")))?;
        fields.push((name.to_string(), value.to_string()));
    }
    let version = field::<BigUint>(&fields, "version")?;
    if version.to_u32() != Some(KEY_FILE_VERSION) {
        return Err(Error::Parse(format!(
            "unsupported key file version {version}"
        )));
    }
    Ok(fields)
}

fn field<T: num_traits::Num>(fields: &[(String, String)], name: &str) -> Result<T> {
    let raw = fields
        .iter()
        .find(|(k, _)| k == name)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::Parse(format!("key file missing field {name}")))?;
    T::from_str_radix(raw, 16).map_err(|_| Error::Parse(format!("bad hex in field {name}")))
}
