//! Privacy-preserving LDCT denoising over Paillier-encrypted images.
//!
//! The crate is organized around the pipeline it implements:
//!
//! - [`paillier`]: the cryptosystem (keygen, encrypt/decrypt, homomorphic
//!   addition and plaintext-scalar multiplication).
//! - [`encoding`]: signed fixed-point codec between real values and `Z_n`
//!   residues, with cumulative-scale bookkeeping.
//! - [`tensor`] / [`ciphertensor`]: shaped plaintext and encrypted tensors
//!   and the layer kernels (convolution, transposed convolution, linear,
//!   bias/elementwise add) in both domains.
//! - [`model`]: model file format, quantization, the float and integer-exact
//!   reference inference engines, and a small trainer for demo denoisers.
//! - [`protocol`]: the client/server interactive frameworks (linear, and
//!   nonlinear with perturbed-sign activation) over a framed wire protocol.
//! - [`attacks`]: the model-stealing experiment (least-squares weight
//!   recovery from clean vs. perturbed features).
//! - [`phantom`] / [`pgm`]: synthetic ellipse phantoms and PGM image I/O.

pub mod attacks;
pub mod ciphertensor;
pub mod encoding;
mod error;
pub mod model;
pub mod paillier;
pub mod pgm;
pub mod phantom;
pub mod protocol;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{codes, Error, Result};
