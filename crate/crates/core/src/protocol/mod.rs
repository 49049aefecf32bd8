//! The two client/server interactive inference frameworks.
//!
//! Linear models run in one round trip: encrypted image up, encrypted result
//! down. Nonlinear models add exactly one sign exchange per activation layer:
//! the server sends the perturbed encrypted feature, the client answers with
//! a bit matrix. Session metrics count the data payload bytes in each
//! direction (the handshake is constant-size and excluded).

pub mod activation;
pub mod client;
pub mod server;
pub mod transport;
pub mod wire;

pub use activation::{PerturbanceMatrix, SignMatrix};
pub use client::{ClientConfig, ClientSession};
pub use server::{serve_blocking, PerturbPolicy, ServerConfig, ServerSession};
pub use transport::{loopback_pair, FrameTransport, LoopbackEnd, TcpTransport};
pub use wire::{Frame, Tag, PROTOCOL_VERSION_LINEAR, PROTOCOL_VERSION_NONLINEAR};

use crate::tensor::{FloatTensor, IntTensor};
use crate::Result;

/// Byte and round-trip accounting for one session.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionMetrics {
    /// Client-to-server data payload bytes (encrypted image + sign matrices).
    pub upload_payload_bytes: u64,
    /// Server-to-client data payload bytes (perturbed features + result).
    pub download_payload_bytes: u64,
    pub act_requests: u32,
    pub act_responses: u32,
    pub enc_image_payload_bytes: u64,
    pub result_payload_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// One frame of a client-side transcript, as encoded wire bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

/// Everything a completed in-process session produced.
pub struct SessionOutcome {
    /// Decrypted, center-lifted result (scale tag included).
    pub output: IntTensor,
    pub client_metrics: SessionMetrics,
    pub server_metrics: SessionMetrics,
    pub transcript: Vec<TranscriptEntry>,
    pub recorded_act_features: Vec<(u16, IntTensor)>,
    pub server_layer_taps: Vec<(usize, crate::ciphertensor::CipherTensor)>,
}

/// Drive a client and a server to completion over an in-process transport.
/// Single-threaded and strictly lockstep; any ordering bug surfaces as an
/// error rather than a deadlock.
pub fn run_session_local(
    mut client: ClientSession,
    mut server: ServerSession,
    image: &FloatTensor,
) -> Result<SessionOutcome> {
    let (mut client_end, mut server_end) = loopback_pair();

    // The client blocks on responses, so interleave manually: after every
    // client send, let the server consume and reply before the client reads.
    struct Lockstep<'a> {
        end: &'a mut LoopbackEnd,
        server: &'a mut ServerSession,
        server_end: &'a mut LoopbackEnd,
    }
    impl FrameTransport for Lockstep<'_> {
        fn send(&mut self, frame: &Frame) -> Result<()> {
            self.end.send(frame)?;
            let incoming = self.server_end.recv()?;
            let resp = self.server.handle_frame(&incoming);
            self.server_end.send(&resp)
        }
        fn recv(&mut self) -> Result<Frame> {
            self.end.recv()
        }
    }

    let mut transport = Lockstep {
        end: &mut client_end,
        server: &mut server,
        server_end: &mut server_end,
    };
    let output = client.run(image, &mut transport)?;
    Ok(SessionOutcome {
        output,
        client_metrics: client.metrics().clone(),
        server_metrics: server.metrics().clone(),
        transcript: client.transcript,
        recorded_act_features: client.recorded_act_features,
        server_layer_taps: server.layer_taps,
    })
}

/// One-round-trip framework for linear models. Refused at HELLO when the
/// model contains activations.
pub fn run_linear_session(
    client: ClientSession,
    server: ServerSession,
    image: &FloatTensor,
) -> Result<SessionOutcome> {
    run_session_local(client, server, image)
}

/// Per-activation sign-exchange framework.
pub fn run_nonlinear_session(
    client: ClientSession,
    server: ServerSession,
    image: &FloatTensor,
) -> Result<SessionOutcome> {
    run_session_local(client, server, image)
}

/// Format metrics the way the CLI prints them (one per direction, matching
/// the communication-cost table shape).
pub fn format_metrics(m: &SessionMetrics) -> String {
    format!(
        "upload_bytes={} (image={} + signs={}) download_bytes={} (features={} + result={}) act_round_trips={}",
        m.upload_payload_bytes,
        m.enc_image_payload_bytes,
        m.upload_payload_bytes - m.enc_image_payload_bytes,
        m.download_payload_bytes,
        m.download_payload_bytes - m.result_payload_bytes,
        m.result_payload_bytes,
        m.act_requests
    )
}

/// Convenience wrapper used by tests and the verification harness: fresh
/// keys, seeded client and server, one session.
pub struct LocalSessionSetup {
    pub model: std::sync::Arc<crate::model::ModelSpec>,
    pub bits: u64,
    pub frac_bits: u32,
    pub seed: u64,
    pub version: u16,
    pub record_act_features: bool,
    pub capture_layer_taps: bool,
    pub corrupt_weight_layer: Option<usize>,
    pub perturb_policy: PerturbPolicy,
}

impl LocalSessionSetup {
    pub fn new(model: crate::model::ModelSpec) -> Self {
        Self {
            model: std::sync::Arc::new(model),
            bits: 512,
            frac_bits: crate::encoding::DEFAULT_FRAC_BITS,
            seed: 0,
            version: PROTOCOL_VERSION_NONLINEAR,
            record_act_features: false,
            capture_layer_taps: false,
            corrupt_weight_layer: None,
            perturb_policy: PerturbPolicy::Fresh,
        }
    }

    /// Generate keys and run one session on `image`.
    pub fn run(&self, image: &FloatTensor) -> Result<SessionOutcome> {
        use rand::SeedableRng;
        let mut key_rng = rand_chacha::ChaCha20Rng::seed_from_u64(self.seed ^ 0x6b65_7967_656e);
        let (pk, sk) = crate::paillier::keygen(self.bits, &mut key_rng)?;
        let client = ClientSession::new(
            pk,
            sk,
            ClientConfig {
                version: self.version,
                frac_bits: self.frac_bits,
                model_name: String::new(),
                seed: Some(self.seed.wrapping_add(1)),
                record_act_features: self.record_act_features,
            },
        );
        let mut server_cfg = ServerConfig::new(self.model.clone());
        server_cfg.session_seed = Some(self.seed.wrapping_add(2));
        server_cfg.capture_layer_taps = self.capture_layer_taps;
        server_cfg.corrupt_weight_layer = self.corrupt_weight_layer;
        server_cfg.perturb_policy = self.perturb_policy.clone();
        let server = ServerSession::new(server_cfg);
        run_session_local(client, server, image)
    }
}

impl std::fmt::Debug for SessionOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionOutcome")
            .field("client_metrics", &self.client_metrics)
            .field("server_metrics", &self.server_metrics)
            .field("transcript_frames", &self.transcript.len())
            .finish()
    }
}
