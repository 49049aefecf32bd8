//! Framed wire format.
//!
//! Frame: 4-byte big-endian length (of everything after it), 1-byte tag,
//! 16-byte session id, payload. All multi-byte integers are big-endian.
//!
//! The protocol version in HELLO names the interactive framework the client
//! wants: 1 is the linear framework (one upload, one download, no
//! intermediate exchanges), 2 is the nonlinear framework with per-activation
//! sign exchanges.

use num_bigint::BigUint;
use std::io::{Read, Write};

use crate::{Error, Result};

pub const PROTOCOL_VERSION_LINEAR: u16 = 1;
pub const PROTOCOL_VERSION_NONLINEAR: u16 = 2;

/// Refuse frames beyond this size (ciphertensors are large but bounded).
const MAX_FRAME_LEN: usize = 1 << 30;

pub const SESSION_ID_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tag {
    Hello = 1,
    HelloAck = 2,
    EncImage = 3,
    ActRequest = 4,
    ActResponse = 5,
    Result = 6,
    Error = 7,
}

impl Tag {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Tag::Hello,
            2 => Tag::HelloAck,
            3 => Tag::EncImage,
            4 => Tag::ActRequest,
            5 => Tag::ActResponse,
            6 => Tag::Result,
            7 => Tag::Error,
            other => return Err(Error::Parse(format!("unknown frame tag {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub tag: Tag,
    pub session_id: [u8; SESSION_ID_LEN],
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(tag: Tag, session_id: [u8; SESSION_ID_LEN], payload: Vec<u8>) -> Self {
        Self {
            tag,
            session_id,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let body_len = 1 + SESSION_ID_LEN + self.payload.len();
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_be_bytes());
        out.push(self.tag as u8);
        out.extend_from_slice(&self.session_id);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Parse("frame shorter than length prefix".into()));
        }
        let body_len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        if bytes.len() != 4 + body_len {
            return Err(Error::Parse(format!(
                "frame length {} does not match prefix {body_len}",
                bytes.len() - 4
            )));
        }
        Self::decode_body(&bytes[4..])
    }

    fn decode_body(body: &[u8]) -> Result<Self> {
        if body.len() < 1 + SESSION_ID_LEN {
            return Err(Error::Parse("frame body truncated".into()));
        }
        let tag = Tag::from_u8(body[0])?;
        let mut session_id = [0u8; SESSION_ID_LEN];
        session_id.copy_from_slice(&body[1..1 + SESSION_ID_LEN]);
        Ok(Frame {
            tag,
            session_id,
            payload: body[1 + SESSION_ID_LEN..].to_vec(),
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut len_buf = [0u8; 4];
        r.read_exact(&mut len_buf)?;
        let body_len = u32::from_be_bytes(len_buf) as usize;
        if !(1 + SESSION_ID_LEN..=MAX_FRAME_LEN).contains(&body_len) {
            return Err(Error::Parse(format!(
                "frame length {body_len} out of range"
            )));
        }
        let mut body = vec![0u8; body_len];
        r.read_exact(&mut body)?;
        Self::decode_body(&body)
    }

    /// Size of this frame on the wire.
    pub fn wire_len(&self) -> usize {
        4 + 1 + SESSION_ID_LEN + self.payload.len()
    }
}

// ---------------------------------------------------------------------------
// Payload codecs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HelloPayload {
    pub version: u16,
    pub model_name: String,
    pub frac_bits: u16,
    pub n: BigUint,
    pub g: BigUint,
}

impl HelloPayload {
    pub fn encode(&self) -> Vec<u8> {
        let name = self.model_name.as_bytes();
        let n_bytes = self.n.to_bytes_be();
        let g_bytes = self.g.to_bytes_be();
        let mut out =
            Vec::with_capacity(2 + 2 + name.len() + 2 + 8 + n_bytes.len() + g_bytes.len());
        out.extend_from_slice(&self.version.to_be_bytes());
        out.extend_from_slice(&(name.len() as u16).to_be_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&self.frac_bits.to_be_bytes());
        out.extend_from_slice(&(n_bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(&n_bytes);
        out.extend_from_slice(&(g_bytes.len() as u32).to_be_bytes());
        out.extend_from_slice(&g_bytes);
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(payload);
        let version = cur.u16()?;
        let name_len = cur.u16()? as usize;
        let model_name = String::from_utf8(cur.bytes(name_len)?.to_vec())
            .map_err(|_| Error::Parse("model name not UTF-8".into()))?;
        let frac_bits = cur.u16()?;
        let n_len = cur.u32()? as usize;
        let n = BigUint::from_bytes_be(cur.bytes(n_len)?);
        let g_len = cur.u32()? as usize;
        let g = BigUint::from_bytes_be(cur.bytes(g_len)?);
        cur.finish()?;
        Ok(Self {
            version,
            model_name,
            frac_bits,
            n,
            g,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HelloAckPayload {
    pub version: u16,
    pub model_linear: bool,
}

impl HelloAckPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3);
        out.extend_from_slice(&self.version.to_be_bytes());
        out.push(u8::from(self.model_linear));
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(payload);
        let version = cur.u16()?;
        let model_linear = cur.u8()? != 0;
        cur.finish()?;
        Ok(Self {
            version,
            model_linear,
        })
    }
}

/// ACT_REQUEST: layer index then the serialized ciphertensor.
pub fn encode_act_request(layer_index: u16, tensor_bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + tensor_bytes.len());
    out.extend_from_slice(&layer_index.to_be_bytes());
    out.extend_from_slice(tensor_bytes);
    out
}

pub fn decode_act_request(payload: &[u8]) -> Result<(u16, &[u8])> {
    if payload.len() < 2 {
        return Err(Error::Parse("ACT_REQUEST truncated".into()));
    }
    let layer = u16::from_be_bytes(payload[..2].try_into().expect("2 bytes"));
    Ok((layer, &payload[2..]))
}

/// ACT_RESPONSE: layer index (u16), pad bit count (u8), then the sign bits
/// packed MSB-first row-major. Always exactly `ceil(bits/8) + 3` bytes.
pub fn encode_act_response(layer_index: u16, bits: &[bool]) -> Vec<u8> {
    let packed_len = bits.len().div_ceil(8);
    let pad_bits = (packed_len * 8 - bits.len()) as u8;
    let mut out = Vec::with_capacity(3 + packed_len);
    out.extend_from_slice(&layer_index.to_be_bytes());
    out.push(pad_bits);
    let mut byte = 0u8;
    for (i, &b) in bits.iter().enumerate() {
        byte = (byte << 1) | u8::from(b);
        if i % 8 == 7 {
            out.push(byte);
            byte = 0;
        }
    }
    if !bits.len().is_multiple_of(8) {
        out.push(byte << pad_bits);
    }
    out
}

pub fn decode_act_response(payload: &[u8], expected_bits: usize) -> Result<(u16, Vec<bool>)> {
    if payload.len() < 3 {
        return Err(Error::Parse("ACT_RESPONSE truncated".into()));
    }
    let layer = u16::from_be_bytes(payload[..2].try_into().expect("2 bytes"));
    let pad_bits = payload[2] as usize;
    let packed = &payload[3..];
    if packed.len() * 8 < pad_bits || packed.len() * 8 - pad_bits != expected_bits {
        return Err(Error::Parse(format!(
            "ACT_RESPONSE carries {} bits, expected {expected_bits}",
            packed.len() * 8 - pad_bits
        )));
    }
    let mut bits = Vec::with_capacity(expected_bits);
    for (i, byte) in packed.iter().enumerate() {
        for bit in 0..8 {
            if i * 8 + bit >= expected_bits {
                break;
            }
            bits.push(byte & (0x80 >> bit) != 0);
        }
    }
    Ok((layer, bits))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorPayload {
    pub code: u16,
    pub message: String,
}

impl ErrorPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + self.message.len());
        out.extend_from_slice(&self.code.to_be_bytes());
        out.extend_from_slice(self.message.as_bytes());
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        if payload.len() < 2 {
            return Err(Error::Parse("ERROR payload truncated".into()));
        }
        Ok(Self {
            code: u16::from_be_bytes(payload[..2].try_into().expect("2 bytes")),
            message: String::from_utf8_lossy(&payload[2..]).into_owned(),
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn bytes(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Parse("payload truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(
            self.bytes(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(
            self.bytes(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Parse("trailing bytes in payload".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_encode_decode_round_trip() {
        let f = Frame::new(Tag::EncImage, [7u8; 16], vec![1, 2, 3, 4, 5]);
        let bytes = f.encode();
        assert_eq!(bytes.len(), f.wire_len());
        assert_eq!(Frame::decode(&bytes).unwrap(), f);

        let mut cursor = std::io::Cursor::new(bytes);
        assert_eq!(Frame::read_from(&mut cursor).unwrap(), f);
    }

    #[test]
    fn malformed_frames_rejected() {
        assert!(Frame::decode(&[0, 0]).is_err());
        // bad tag
        let mut f = Frame::new(Tag::Hello, [0u8; 16], vec![]).encode();
        f[4] = 99;
        assert!(Frame::decode(&f).is_err());
        // length prefix mismatch
        let mut f = Frame::new(Tag::Hello, [0u8; 16], vec![1]).encode();
        f[3] += 1;
        assert!(Frame::decode(&f).is_err());
    }

    #[test]
    fn hello_round_trip() {
        let h = HelloPayload {
            version: PROTOCOL_VERSION_NONLINEAR,
            model_name: "demo".into(),
            frac_bits: 16,
            n: BigUint::from(123456789u64),
            g: BigUint::from(123456790u64),
        };
        assert_eq!(HelloPayload::decode(&h.encode()).unwrap(), h);
    }

    #[test]
    fn act_response_size_is_ceil_bits_over_8_plus_3() {
        for count in [1usize, 7, 8, 9, 64, 100, 1024] {
            let bits: Vec<bool> = (0..count).map(|i| i % 3 == 0).collect();
            let payload = encode_act_response(4, &bits);
            assert_eq!(payload.len(), count.div_ceil(8) + 3, "count {count}");
            let (layer, back) = decode_act_response(&payload, count).unwrap();
            assert_eq!(layer, 4);
            assert_eq!(back, bits);
        }
    }

    #[test]
    fn act_response_wrong_bit_count_rejected() {
        let bits = vec![true; 10];
        let payload = encode_act_response(0, &bits);
        assert!(decode_act_response(&payload, 11).is_err());
    }

    #[test]
    fn error_payload_round_trip() {
        let e = ErrorPayload {
            code: 3,
            message: "out of order".into(),
        };
        assert_eq!(ErrorPayload::decode(&e.encode()).unwrap(), e);
    }
}
