//! Server side of the interactive frameworks.
//!
//! One session is one strict-alternation state machine: HELLO, then the
//! encrypted image, then (for models with activations) one sign exchange per
//! activation layer, then the encrypted result. Anything out of order aborts
//! the session with an ERROR frame.
//!
//! The server holds only the client's public key. Nothing in this module can
//! decrypt; the blindness test enumerates this file to keep it that way.

use num_bigint::BigInt;
use num_traits::One;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use super::activation::{
    server_activate_leaky, server_combine_and_activate, server_perturb, PerturbanceMatrix,
    SignMatrix, DEFAULT_PERTURB_BOUND,
};
use super::transport::{FrameTransport, TcpTransport};
use super::wire::{
    decode_act_response, encode_act_request, ErrorPayload, Frame, HelloAckPayload, HelloPayload,
    Tag, PROTOCOL_VERSION_LINEAR, PROTOCOL_VERSION_NONLINEAR, SESSION_ID_LEN,
};
use super::SessionMetrics;
use crate::ciphertensor::{
    add_enc, bias_add_enc, conv2d_enc, conv2d_transpose_enc, hadamard_pow, linear_enc, CipherTensor,
};
use crate::encoding::{overflow_budget, FixedPointParams};
use crate::error::codes;
use crate::model::{ModelSpec, QuantizedLayer, QuantizedModel};
use crate::paillier::PaillierPublicKey;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub enum PerturbPolicy {
    /// Fresh multipliers per activation per session (the default and the
    /// strictest reading).
    Fresh,
    /// One multiplier set per layer, identical across sessions. The hardest
    /// case of the attack experiment.
    FixedSeed(u64),
    /// No perturbation (all-ones). Test and attack-counterfactual hook only.
    Identity,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub model: Arc<ModelSpec>,
    pub perturb_bound: u32,
    pub perturb_policy: PerturbPolicy,
    /// Seed for all server-side randomness in a session; entropy when absent.
    pub session_seed: Option<u64>,
    pub min_key_bits: u64,
    /// Keep a copy of every layer output for offline verification.
    pub capture_layer_taps: bool,
    /// Fault-injection hook: bump one weight of this quantized layer.
    pub corrupt_weight_layer: Option<usize>,
}

impl ServerConfig {
    pub fn new(model: Arc<ModelSpec>) -> Self {
        Self {
            model,
            perturb_bound: DEFAULT_PERTURB_BOUND,
            perturb_policy: PerturbPolicy::Fresh,
            session_seed: None,
            min_key_bits: 64,
            capture_layer_taps: false,
            corrupt_weight_layer: None,
        }
    }
}

enum Phase {
    AwaitHello,
    AwaitImage,
    AwaitSign { layer: usize },
    Done,
    Failed,
}

struct PendingAct {
    layer: usize,
    perturbance: PerturbanceMatrix,
    feature: CipherTensor,
}

pub struct ServerSession {
    cfg: ServerConfig,
    phase: Phase,
    rng: ChaCha20Rng,
    session_id: [u8; SESSION_ID_LEN],
    pk: Option<PaillierPublicKey>,
    qmodel: Option<QuantizedModel>,
    elem_len: usize,
    /// Tensor entering each layer; index 0 is the encrypted input image.
    tape: Vec<CipherTensor>,
    next_layer: usize,
    pending: Option<PendingAct>,
    metrics: SessionMetrics,
    /// (layer index, that layer's output) when capture is enabled.
    pub layer_taps: Vec<(usize, CipherTensor)>,
}

impl ServerSession {
    pub fn new(cfg: ServerConfig) -> Self {
        let rng = match cfg.session_seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        Self {
            cfg,
            phase: Phase::AwaitHello,
            rng,
            session_id: [0; SESSION_ID_LEN],
            pk: None,
            qmodel: None,
            elem_len: 0,
            tape: Vec::new(),
            next_layer: 0,
            pending: None,
            metrics: SessionMetrics::default(),
            layer_taps: Vec::new(),
        }
    }

    pub fn metrics(&self) -> &SessionMetrics {
        &self.metrics
    }

    pub fn is_done(&self) -> bool {
        matches!(self.phase, Phase::Done)
    }

    pub fn is_failed(&self) -> bool {
        matches!(self.phase, Phase::Failed)
    }

    /// Process one client frame and produce exactly one response frame.
    pub fn handle_frame(&mut self, frame: &Frame) -> Frame {
        match self.dispatch(frame) {
            Ok(resp) => {
                self.count_sent(&resp);
                resp
            }
            Err(err) => {
                self.phase = Phase::Failed;
                let payload = ErrorPayload {
                    code: err.protocol_code(),
                    message: err.to_string(),
                }
                .encode();
                let resp = Frame::new(Tag::Error, self.session_id, payload);
                self.count_sent(&resp);
                resp
            }
        }
    }

    fn count_sent(&mut self, frame: &Frame) {
        match frame.tag {
            Tag::ActRequest => {
                self.metrics.act_requests += 1;
                self.metrics.download_payload_bytes += frame.payload.len() as u64;
            }
            Tag::Result => {
                self.metrics.result_payload_bytes = frame.payload.len() as u64;
                self.metrics.download_payload_bytes += frame.payload.len() as u64;
            }
            _ => {}
        }
    }

    fn dispatch(&mut self, frame: &Frame) -> Result<Frame> {
        match (&self.phase, frame.tag) {
            (Phase::AwaitHello, Tag::Hello) => {
                self.session_id = frame.session_id;
                self.on_hello(&frame.payload)
            }
            (Phase::AwaitImage, Tag::EncImage) => {
                self.check_session(frame)?;
                self.metrics.enc_image_payload_bytes = frame.payload.len() as u64;
                self.metrics.upload_payload_bytes += frame.payload.len() as u64;
                self.on_image(&frame.payload)
            }
            (Phase::AwaitSign { layer }, Tag::ActResponse) => {
                let layer = *layer;
                self.check_session(frame)?;
                self.metrics.act_responses += 1;
                self.metrics.upload_payload_bytes += frame.payload.len() as u64;
                self.on_sign(layer, &frame.payload)
            }
            (_, tag) => Err(Error::OrderViolation(format!(
                "unexpected {tag:?} in current session phase"
            ))),
        }
    }

    fn check_session(&self, frame: &Frame) -> Result<()> {
        if frame.session_id != self.session_id {
            return Err(Error::OrderViolation(
                "session id changed mid-session".into(),
            ));
        }
        Ok(())
    }

    fn on_hello(&mut self, payload: &[u8]) -> Result<Frame> {
        let hello = HelloPayload::decode(payload)?;
        if hello.version != PROTOCOL_VERSION_LINEAR && hello.version != PROTOCOL_VERSION_NONLINEAR {
            return Err(Error::Protocol {
                code: codes::UNSUPPORTED,
                message: format!("unsupported protocol version {}", hello.version),
            });
        }
        if hello.version == PROTOCOL_VERSION_LINEAR && !self.cfg.model.is_linear() {
            return Err(Error::Protocol {
                code: codes::MODEL_NOT_LINEAR,
                message: format!(
                    "model {} contains activations; the linear framework cannot serve it",
                    self.cfg.model.name
                ),
            });
        }
        if !hello.model_name.is_empty() && hello.model_name != self.cfg.model.name {
            return Err(Error::Protocol {
                code: codes::UNSUPPORTED,
                message: format!("model {} not served here", hello.model_name),
            });
        }
        if hello.n.bits() < self.cfg.min_key_bits {
            return Err(Error::Protocol {
                code: codes::UNSUPPORTED,
                message: format!(
                    "{}-bit modulus below the configured minimum of {}",
                    hello.n.bits(),
                    self.cfg.min_key_bits
                ),
            });
        }
        let pk = PaillierPublicKey::new(hello.n.clone(), hello.g.clone()).map_err(|e| {
            Error::Protocol {
                code: codes::BAD_PAYLOAD,
                message: format!("bad public key: {e}"),
            }
        })?;

        // refuse configurations that could overflow the plaintext space
        let params =
            FixedPointParams::new(u32::from(hello.frac_bits), pk.n.clone()).map_err(|e| {
                Error::Protocol {
                    code: codes::BUDGET,
                    message: e.to_string(),
                }
            })?;
        overflow_budget(&self.cfg.model, &params, 1.0).map_err(|e| Error::Protocol {
            code: codes::BUDGET,
            message: e.to_string(),
        })?;

        let mut qmodel = self.cfg.model.quantize(u32::from(hello.frac_bits))?;
        if let Some(layer) = self.cfg.corrupt_weight_layer {
            corrupt_one_weight(&mut qmodel, layer)?;
        }

        self.elem_len = pk.ciphertext_byte_len();
        self.pk = Some(pk);
        self.qmodel = Some(qmodel);
        self.phase = Phase::AwaitImage;
        Ok(Frame::new(
            Tag::HelloAck,
            self.session_id,
            HelloAckPayload {
                version: hello.version,
                model_linear: self.cfg.model.is_linear(),
            }
            .encode(),
        ))
    }

    fn on_image(&mut self, payload: &[u8]) -> Result<Frame> {
        let pk = self.pk.as_ref().expect("pk set at HELLO");
        let qmodel = self.qmodel.as_ref().expect("model set at HELLO");
        let tensor = CipherTensor::from_bytes(payload)?;
        if tensor.key_id != pk.fingerprint() {
            return Err(Error::KeyMismatch(
                "image encrypted under a different key than HELLO announced".into(),
            ));
        }
        if tensor.shape != qmodel.input_shape {
            return Err(Error::Shape(format!(
                "image {} vs model input {}",
                tensor.shape, qmodel.input_shape
            )));
        }
        if tensor.scale.total_frac_bits != qmodel.input_frac_bits {
            return Err(Error::ScaleMismatch {
                expected: qmodel.input_frac_bits,
                got: tensor.scale.total_frac_bits,
            });
        }
        self.tape = vec![tensor];
        self.next_layer = 0;
        self.run_layers()
    }

    fn on_sign(&mut self, layer: usize, payload: &[u8]) -> Result<Frame> {
        let pending = self
            .pending
            .take()
            .ok_or_else(|| Error::OrderViolation("no sign exchange pending".into()))?;
        let (got_layer, bits) = decode_act_response(payload, pending.feature.shape.len())?;
        if usize::from(got_layer) != layer || pending.layer != layer {
            return Err(Error::OrderViolation(format!(
                "sign response for layer {got_layer}, expected {layer}"
            )));
        }
        let user_signs = SignMatrix::new(pending.feature.shape, bits)?;
        let pk = self.pk.as_ref().expect("pk set at HELLO");
        let qmodel = self.qmodel.as_ref().expect("model set at HELLO");

        let activated = match &qmodel.layers[layer] {
            QuantizedLayer::Relu => server_combine_and_activate(
                pk,
                &pending.feature,
                &user_signs,
                &pending.perturbance,
                &mut self.rng,
            )?,
            QuantizedLayer::LeakyRelu { alpha_int } => {
                let signs = super::activation::combine_signs(
                    &user_signs,
                    &pending.perturbance.sign_server,
                )?;
                server_activate_leaky(
                    pk,
                    &pending.feature,
                    &signs,
                    alpha_int,
                    qmodel.frac_bits_weights,
                    &mut self.rng,
                )?
            }
            _ => {
                return Err(Error::OrderViolation(format!(
                    "layer {layer} is not an activation"
                )))
            }
        };
        self.push_layer_output(layer, activated);
        self.run_layers()
    }

    /// Run layers until the next activation (which needs the client) or the
    /// end of the model.
    fn run_layers(&mut self) -> Result<Frame> {
        let pk = self.pk.clone().expect("pk set at HELLO");
        let qmodel = self.qmodel.clone().expect("model set at HELLO");
        while self.next_layer < qmodel.layers.len() {
            let layer = self.next_layer;
            let current = self.tape.last().expect("tape holds the input").clone();
            match &qmodel.layers[layer] {
                QuantizedLayer::Conv {
                    weights,
                    bias,
                    stride,
                    padding,
                } => {
                    let out = conv2d_enc(
                        &pk,
                        &current,
                        weights,
                        *stride,
                        *padding,
                        qmodel.frac_bits_weights,
                        &mut self.rng,
                    )?;
                    let out = bias_add_enc(&pk, &out, bias, &mut self.rng)?;
                    self.push_layer_output(layer, out);
                }
                QuantizedLayer::ConvTranspose {
                    weights,
                    bias,
                    stride,
                    padding,
                } => {
                    let out = conv2d_transpose_enc(
                        &pk,
                        &current,
                        weights,
                        *stride,
                        *padding,
                        qmodel.frac_bits_weights,
                    )?;
                    let out = bias_add_enc(&pk, &out, bias, &mut self.rng)?;
                    self.push_layer_output(layer, out);
                }
                QuantizedLayer::Linear { weights, bias } => {
                    let out = linear_enc(&pk, &current, weights, qmodel.frac_bits_weights)?;
                    let out = bias_add_enc(&pk, &out, bias, &mut self.rng)?;
                    self.push_layer_output(layer, out);
                }
                QuantizedLayer::ResidualAdd { source, shift_bits } => {
                    let src = &self.tape[*source];
                    let aligned = if *shift_bits == 0 {
                        src.clone()
                    } else {
                        let shift = BigInt::one() << *shift_bits;
                        let exps = vec![shift; src.shape.len()];
                        hadamard_pow(&pk, src, &exps, *shift_bits)?
                    };
                    let out = add_enc(&pk, &current, &aligned)?;
                    self.push_layer_output(layer, out);
                }
                QuantizedLayer::Relu | QuantizedLayer::LeakyRelu { .. } => {
                    let perturbance = self.sample_perturbance(layer, current.shape);
                    let perturbed = server_perturb(&pk, &current, &perturbance)?;
                    let payload =
                        encode_act_request(layer as u16, &perturbed.to_bytes(self.elem_len)?);
                    self.pending = Some(PendingAct {
                        layer,
                        perturbance,
                        feature: current,
                    });
                    self.phase = Phase::AwaitSign { layer };
                    return Ok(Frame::new(Tag::ActRequest, self.session_id, payload));
                }
            }
        }
        let result = self.tape.last().expect("tape holds the output");
        let payload = result.to_bytes(self.elem_len)?;
        self.phase = Phase::Done;
        Ok(Frame::new(Tag::Result, self.session_id, payload))
    }

    fn push_layer_output(&mut self, layer: usize, out: CipherTensor) {
        if self.cfg.capture_layer_taps {
            self.layer_taps.push((layer, out.clone()));
        }
        self.tape.push(out);
        self.next_layer = layer + 1;
    }

    fn sample_perturbance(
        &mut self,
        layer: usize,
        shape: crate::tensor::Shape,
    ) -> PerturbanceMatrix {
        match self.cfg.perturb_policy {
            PerturbPolicy::Fresh => {
                PerturbanceMatrix::sample(shape, self.cfg.perturb_bound, &mut self.rng)
            }
            PerturbPolicy::FixedSeed(seed) => {
                let mut layer_rng = ChaCha20Rng::seed_from_u64(seed ^ (layer as u64) << 32);
                PerturbanceMatrix::sample(shape, self.cfg.perturb_bound, &mut layer_rng)
            }
            PerturbPolicy::Identity => PerturbanceMatrix::identity(shape),
        }
    }
}

fn corrupt_one_weight(qmodel: &mut QuantizedModel, layer: usize) -> Result<()> {
    let target = qmodel
        .layers
        .get_mut(layer)
        .ok_or_else(|| Error::Shape(format!("corrupt hook: no layer {layer}")))?;
    let slot = match target {
        QuantizedLayer::Conv { weights, .. } => weights.data.first_mut(),
        QuantizedLayer::ConvTranspose { weights, .. } => weights.data.first_mut(),
        QuantizedLayer::Linear { weights, .. } => weights.data.first_mut(),
        _ => None,
    };
    match slot {
        Some(w) => {
            *w += 1;
            Ok(())
        }
        None => Err(Error::Shape(format!(
            "corrupt hook: layer {layer} has no weights"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Blocking TCP server
// ---------------------------------------------------------------------------

/// Accept sessions until `shutdown` is set. One thread per connection, capped
/// at `max_sessions` concurrent. Emits one log line per finished session.
pub fn serve_blocking(
    listener: std::net::TcpListener,
    cfg: Arc<ServerConfig>,
    shutdown: Arc<AtomicBool>,
    max_sessions: usize,
) -> Result<()> {
    listener.set_nonblocking(true)?;
    let active = Arc::new(AtomicUsize::new(0));
    let mut handles = Vec::new();
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                while active.load(Ordering::SeqCst) >= max_sessions {
                    std::thread::sleep(std::time::Duration::from_millis(5));
                }
                stream.set_nonblocking(false)?;
                let cfg = cfg.clone();
                let active = active.clone();
                active.fetch_add(1, Ordering::SeqCst);
                handles.push(std::thread::spawn(move || {
                    let outcome = run_tcp_session(stream, &cfg);
                    active.fetch_sub(1, Ordering::SeqCst);
                    match outcome {
                        Ok(metrics) => eprintln!(
                            "session peer={peer} status=ok up_bytes={} down_bytes={} act_round_trips={}",
                            metrics.upload_payload_bytes,
                            metrics.download_payload_bytes,
                            metrics.act_requests
                        ),
                        Err(e) => eprintln!("session peer={peer} status=error detail={e}"),
                    }
                }));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(std::time::Duration::from_millis(20));
            }
            Err(e) => return Err(e.into()),
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

fn run_tcp_session(stream: std::net::TcpStream, cfg: &ServerConfig) -> Result<SessionMetrics> {
    let mut transport = TcpTransport::new(stream)?;
    let mut session = ServerSession::new(cfg.clone());
    loop {
        let frame = match transport.recv() {
            Ok(frame) => frame,
            Err(Error::Io(e)) => return Err(e.into()),
            Err(e) => {
                // undecodable frame: tell the peer, then tear the session down
                let payload = ErrorPayload {
                    code: e.protocol_code(),
                    message: e.to_string(),
                }
                .encode();
                let _ = transport.send(&Frame::new(Tag::Error, [0; 16], payload));
                return Err(e);
            }
        };
        let resp = session.handle_frame(&frame);
        let is_error = resp.tag == Tag::Error;
        transport.send(&resp)?;
        if is_error {
            return Err(Error::Protocol {
                code: ErrorPayload::decode(&resp.payload)
                    .map(|p| p.code)
                    .unwrap_or(0),
                message: "session aborted".into(),
            });
        }
        if session.is_done() {
            return Ok(session.metrics().clone());
        }
    }
}
