//! Framed TCP protocol for split inference: "BNRT" magic, version, message
//! type, little-endian length prefix, body.

use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 4] = b"BNRT";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 4;
/// Upper bound on body size; anything larger is rejected before allocation.
pub const MAX_BODY: usize = 16 * 1024 * 1024;

pub mod msg_type {
    pub const INFER_REQ: u8 = 1;
    pub const INFER_RESP: u8 = 2;
    pub const LOAD_QUERY: u8 = 3;
    pub const LOAD_REPORT: u8 = 4;
    pub const ERROR: u8 = 5;
}

pub mod error_code {
    /// Unknown partition id.
    pub const NOT_FOUND: u16 = 404;
    /// Malformed request body.
    pub const BAD_REQUEST: u16 = 400;
    /// Server-side failure during inference.
    pub const INTERNAL: u16 = 500;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    InferReq {
        partition_id: u16,
        /// Serialized EncodedFeature bytes.
        feature: Vec<u8>,
    },
    InferResp {
        logits: Vec<f32>,
    },
    LoadQuery,
    LoadReport {
        k_cloud: f32,
        queue_depth: u32,
    },
    Error {
        code: u16,
        message: String,
    },
}

impl Message {
    fn type_byte(&self) -> u8 {
        match self {
            Message::InferReq { .. } => msg_type::INFER_REQ,
            Message::InferResp { .. } => msg_type::INFER_RESP,
            Message::LoadQuery => msg_type::LOAD_QUERY,
            Message::LoadReport { .. } => msg_type::LOAD_REPORT,
            Message::Error { .. } => msg_type::ERROR,
        }
    }

    fn body(&self) -> Vec<u8> {
        match self {
            Message::InferReq {
                partition_id,
                feature,
            } => {
                let mut b = Vec::with_capacity(2 + feature.len());
                b.extend_from_slice(&partition_id.to_le_bytes());
                b.extend_from_slice(feature);
                b
            }
            Message::InferResp { logits } => {
                let mut b = Vec::with_capacity(2 + logits.len() * 4);
                b.extend_from_slice(&(logits.len() as u16).to_le_bytes());
                for v in logits {
                    b.extend_from_slice(&v.to_le_bytes());
                }
                b
            }
            Message::LoadQuery => Vec::new(),
            Message::LoadReport {
                k_cloud,
                queue_depth,
            } => {
                let mut b = Vec::with_capacity(8);
                b.extend_from_slice(&k_cloud.to_le_bytes());
                b.extend_from_slice(&queue_depth.to_le_bytes());
                b
            }
            Message::Error { code, message } => {
                let mut b = Vec::with_capacity(2 + message.len());
                b.extend_from_slice(&code.to_le_bytes());
                b.extend_from_slice(message.as_bytes());
                b
            }
        }
    }

    pub fn to_frame_bytes(&self) -> Vec<u8> {
        let body = self.body();
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.type_byte());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn parse_body(msg_type_byte: u8, body: &[u8]) -> Result<Message> {
        let bad = |reason: &str| Error::Protocol(reason.to_string());
        match msg_type_byte {
            msg_type::INFER_REQ => {
                if body.len() < 2 {
                    return Err(bad("INFER_REQ body too short"));
                }
                Ok(Message::InferReq {
                    partition_id: u16::from_le_bytes([body[0], body[1]]),
                    feature: body[2..].to_vec(),
                })
            }
            msg_type::INFER_RESP => {
                if body.len() < 2 {
                    return Err(bad("INFER_RESP body too short"));
                }
                let count = u16::from_le_bytes([body[0], body[1]]) as usize;
                if body.len() != 2 + count * 4 {
                    return Err(bad("INFER_RESP length inconsistent with class count"));
                }
                let mut logits = Vec::with_capacity(count);
                for i in 0..count {
                    let off = 2 + i * 4;
                    let v = f32::from_le_bytes([
                        body[off],
                        body[off + 1],
                        body[off + 2],
                        body[off + 3],
                    ]);
                    if !v.is_finite() {
                        return Err(bad("non-finite logit"));
                    }
                    logits.push(v);
                }
                Ok(Message::InferResp { logits })
            }
            msg_type::LOAD_QUERY => {
                if !body.is_empty() {
                    return Err(bad("LOAD_QUERY body must be empty"));
                }
                Ok(Message::LoadQuery)
            }
            msg_type::LOAD_REPORT => {
                if body.len() != 8 {
                    return Err(bad("LOAD_REPORT body must be 8 bytes"));
                }
                Ok(Message::LoadReport {
                    k_cloud: f32::from_le_bytes([body[0], body[1], body[2], body[3]]),
                    queue_depth: u32::from_le_bytes([body[4], body[5], body[6], body[7]]),
                })
            }
            msg_type::ERROR => {
                if body.len() < 2 {
                    return Err(bad("ERROR body too short"));
                }
                Ok(Message::Error {
                    code: u16::from_le_bytes([body[0], body[1]]),
                    message: String::from_utf8(body[2..].to_vec())
                        .map_err(|_| bad("ERROR message not utf8"))?,
                })
            }
            other => Err(bad(&format!("unknown message type {other}"))),
        }
    }

    /// Parse a complete frame from a byte slice (fuzz/test entry point).
    pub fn from_frame_bytes(bytes: &[u8]) -> Result<Message> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Protocol("truncated frame header".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Protocol("bad frame magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Protocol(format!("unsupported version {}", bytes[4])));
        }
        let len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        if len > MAX_BODY {
            return Err(Error::Protocol("frame body exceeds limit".into()));
        }
        if bytes.len() != HEADER_LEN + len {
            return Err(Error::Protocol("frame length mismatch".into()));
        }
        Message::parse_body(bytes[5], &bytes[HEADER_LEN..])
    }
}

/// Write one frame to a stream.
pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&msg.to_frame_bytes())?;
    w.flush()?;
    Ok(())
}

/// Read one frame from a stream. Protocol violations are distinguished from
/// IO failures so the server can answer the former and drop the latter.
pub fn read_message(r: &mut impl Read) -> Result<Message> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    if &header[0..4] != MAGIC {
        return Err(Error::Protocol("bad frame magic".into()));
    }
    if header[4] != VERSION {
        return Err(Error::Protocol(format!("unsupported version {}", header[4])));
    }
    let len = u32::from_le_bytes([header[6], header[7], header[8], header[9]]) as usize;
    if len > MAX_BODY {
        return Err(Error::Protocol("frame body exceeds limit".into()));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Message::parse_body(header[5], &body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_messages() -> Vec<Message> {
        vec![
            Message::InferReq {
                partition_id: 3,
                feature: vec![1, 2, 3, 4, 5],
            },
            Message::InferResp {
                logits: vec![0.5, -1.25, 3.0],
            },
            Message::LoadQuery,
            Message::LoadReport {
                k_cloud: 2.5,
                queue_depth: 7,
            },
            Message::Error {
                code: 404,
                message: "unknown partition".into(),
            },
        ]
    }

    #[test]
    fn frame_roundtrip_identity() {
        for msg in sample_messages() {
            let bytes = msg.to_frame_bytes();
            assert_eq!(Message::from_frame_bytes(&bytes).unwrap(), msg);
            // and through a stream
            let mut cursor = std::io::Cursor::new(bytes);
            assert_eq!(read_message(&mut cursor).unwrap(), msg);
        }
    }

    #[test]
    fn fuzzed_frames_never_panic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let samples = sample_messages();
        for _ in 0..10_000 {
            let mut bytes = samples[rng.gen_range(0..samples.len())].to_frame_bytes();
            match rng.gen_range(0..4) {
                0 => {
                    let cut = rng.gen_range(0..=bytes.len());
                    bytes.truncate(cut);
                }
                1 => {
                    if !bytes.is_empty() {
                        let i = rng.gen_range(0..bytes.len());
                        bytes[i] ^= 1 << rng.gen_range(0..8);
                    }
                }
                2 => {
                    // oversized length field
                    if bytes.len() >= 10 {
                        let len: u32 = rng.gen();
                        bytes[6..10].copy_from_slice(&len.to_le_bytes());
                    }
                }
                _ => {
                    bytes = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect();
                }
            }
            let _ = Message::from_frame_bytes(&bytes); // must not panic
        }
    }

    #[test]
    fn oversized_length_rejected_without_allocation() {
        let mut bytes = Message::LoadQuery.to_frame_bytes();
        bytes[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(Message::from_frame_bytes(&bytes).is_err());
    }

    #[test]
    fn unknown_type_rejected() {
        let mut bytes = Message::LoadQuery.to_frame_bytes();
        bytes[5] = 99;
        assert!(matches!(
            Message::from_frame_bytes(&bytes),
            Err(Error::Protocol(_))
        ));
    }
}
