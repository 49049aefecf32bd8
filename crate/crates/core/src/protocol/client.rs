//! Client side: encrypt and upload the image, answer sign-exchange requests
//! with bit matrices, decrypt the final result. The private key never leaves
//! this side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::activation::client_act;
use super::transport::FrameTransport;
use super::wire::{
    decode_act_request, encode_act_response, ErrorPayload, Frame, HelloAckPayload, HelloPayload,
    Tag, PROTOCOL_VERSION_NONLINEAR, SESSION_ID_LEN,
};
use super::{Direction, SessionMetrics, TranscriptEntry};
use crate::ciphertensor::{decrypt_tensor, encrypt_tensor, CipherTensor};
use crate::model::quantize_image;
use crate::paillier::{PaillierPrivateKey, PaillierPublicKey};
use crate::tensor::{FloatTensor, IntTensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Which interactive framework to request (wire protocol version).
    pub version: u16,
    pub frac_bits: u32,
    /// Model name to request; empty accepts whatever the server runs.
    pub model_name: String,
    pub seed: Option<u64>,
    /// Instrumentation: retain the decrypted perturbed features from every
    /// sign exchange (the attack experiment consumes these).
    pub record_act_features: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            version: PROTOCOL_VERSION_NONLINEAR,
            frac_bits: crate::encoding::DEFAULT_FRAC_BITS,
            model_name: String::new(),
            seed: None,
            record_act_features: false,
        }
    }
}

pub struct ClientSession {
    pub pk: PaillierPublicKey,
    sk: PaillierPrivateKey,
    cfg: ClientConfig,
    rng: ChaCha20Rng,
    metrics: SessionMetrics,
    pub transcript: Vec<TranscriptEntry>,
    /// (layer index, decrypted perturbed feature) per ACT exchange, when
    /// recording is on.
    pub recorded_act_features: Vec<(u16, IntTensor)>,
}

impl ClientSession {
    pub fn new(pk: PaillierPublicKey, sk: PaillierPrivateKey, cfg: ClientConfig) -> Self {
        let rng = match cfg.seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        Self {
            pk,
            sk,
            cfg,
            rng,
            metrics: SessionMetrics::default(),
            transcript: Vec::new(),
            recorded_act_features: Vec::new(),
        }
    }

    pub fn metrics(&self) -> &SessionMetrics {
        &self.metrics
    }

    /// Run one full session over `transport`: returns the decrypted,
    /// center-lifted result tensor (its scale tag tells the caller what to
    /// divide by).
    pub fn run(
        &mut self,
        image: &FloatTensor,
        transport: &mut dyn FrameTransport,
    ) -> Result<IntTensor> {
        let mut session_id = [0u8; SESSION_ID_LEN];
        self.rng.fill(&mut session_id);

        let hello = HelloPayload {
            version: self.cfg.version,
            model_name: self.cfg.model_name.clone(),
            frac_bits: self.cfg.frac_bits as u16,
            n: self.pk.n.clone(),
            g: self.pk.g.clone(),
        };
        self.send(
            transport,
            Frame::new(Tag::Hello, session_id, hello.encode()),
        )?;
        let ack = self.recv(transport)?;
        match ack.tag {
            Tag::HelloAck => {
                HelloAckPayload::decode(&ack.payload)?;
            }
            Tag::Error => return Err(error_from(&ack)),
            other => {
                return Err(Error::OrderViolation(format!(
                    "expected HELLO_ACK, got {other:?}"
                )))
            }
        }

        let encoded = quantize_image(image, self.cfg.frac_bits);
        let encrypted = encrypt_tensor(&self.pk, &encoded, &mut self.rng)?;
        let elem_len = self.pk.ciphertext_byte_len();
        let payload = encrypted.to_bytes(elem_len)?;
        self.metrics.enc_image_payload_bytes = payload.len() as u64;
        self.metrics.upload_payload_bytes += payload.len() as u64;
        self.send(transport, Frame::new(Tag::EncImage, session_id, payload))?;

        loop {
            let frame = self.recv(transport)?;
            if frame.session_id != session_id {
                return Err(Error::OrderViolation(
                    "session id changed mid-session".into(),
                ));
            }
            match frame.tag {
                Tag::ActRequest => {
                    self.metrics.act_requests += 1;
                    self.metrics.download_payload_bytes += frame.payload.len() as u64;
                    let (layer, tensor_bytes) = decode_act_request(&frame.payload)?;
                    let perturbed = CipherTensor::from_bytes(tensor_bytes)?;
                    let signs = client_act(&self.pk, &self.sk, &perturbed)?;
                    if self.cfg.record_act_features {
                        let plain = decrypt_tensor(&self.pk, &self.sk, &perturbed)?;
                        self.recorded_act_features.push((layer, plain));
                    }
                    let payload = encode_act_response(layer, &signs.bits);
                    self.metrics.act_responses += 1;
                    self.metrics.upload_payload_bytes += payload.len() as u64;
                    self.send(transport, Frame::new(Tag::ActResponse, session_id, payload))?;
                }
                Tag::Result => {
                    self.metrics.result_payload_bytes = frame.payload.len() as u64;
                    self.metrics.download_payload_bytes += frame.payload.len() as u64;
                    let tensor = CipherTensor::from_bytes(&frame.payload)?;
                    return decrypt_tensor(&self.pk, &self.sk, &tensor);
                }
                Tag::Error => return Err(error_from(&frame)),
                other => {
                    return Err(Error::OrderViolation(format!(
                        "unexpected {other:?} mid-session"
                    )))
                }
            }
        }
    }

    fn send(&mut self, transport: &mut dyn FrameTransport, frame: Frame) -> Result<()> {
        self.transcript.push(TranscriptEntry {
            direction: Direction::Sent,
            bytes: frame.encode(),
        });
        transport.send(&frame)
    }

    fn recv(&mut self, transport: &mut dyn FrameTransport) -> Result<Frame> {
        let frame = transport.recv()?;
        self.transcript.push(TranscriptEntry {
            direction: Direction::Received,
            bytes: frame.encode(),
        });
        Ok(frame)
    }
}

fn error_from(frame: &Frame) -> Error {
    match ErrorPayload::decode(&frame.payload) {
        Ok(p) => Error::Protocol {
            code: p.code,
            message: p.message,
        },
        Err(e) => e,
    }
}
