//! Binary framing for messages and journal records.
//!
//! A frame is a fixed 20-byte header followed by a postcard-encoded
//! [`Message`]:
//!
//! ```text
//! "MM" | version u8 | tag u8 | sender u32 LE | seq u64 LE | body len u32 LE | body
//! ```
//!
//! The tag duplicates the message kind so a reader can reject unknown kinds
//! without decoding the body. Journal records are `len u32 LE | postcard`.

use alloc::vec::Vec;
use core::fmt;

use crate::message::{Envelope, Message, MessageKind};
use crate::process::JournalRecord;
use crate::round::NodeId;

pub const MAGIC: [u8; 2] = *b"MM";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
/// Frames with larger bodies are rejected.
pub const MAX_BODY: usize = 64 << 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodeError {
    /// More bytes are needed; `needed` is the total frame length if known.
    Truncated { needed: Option<usize> },
    BadMagic,
    BadVersion(u8),
    UnknownTag(u8),
    TagMismatch { tag: MessageKind, body: MessageKind },
    TooLarge(usize),
    Body,
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeError::Truncated { .. } => f.write_str("truncated frame"),
            DecodeError::BadMagic => f.write_str("bad magic"),
            DecodeError::BadVersion(v) => write!(f, "unsupported version {v}"),
            DecodeError::UnknownTag(t) => write!(f, "unknown message tag {t}"),
            DecodeError::TagMismatch { tag, body } => {
                write!(f, "header says {} but body is {}", tag.name(), body.name())
            }
            DecodeError::TooLarge(n) => write!(f, "body of {n} bytes exceeds limit"),
            DecodeError::Body => f.write_str("malformed body"),
        }
    }
}

pub fn encode(env: &Envelope) -> Vec<u8> {
    let body = postcard::to_allocvec(&env.msg).expect("messages always serialize");
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(env.msg.kind().tag());
    out.extend_from_slice(&env.from.0.to_le_bytes());
    out.extend_from_slice(&env.seq.to_le_bytes());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Validates a header and returns the length of the whole frame.
pub fn frame_len(header: &[u8]) -> Result<usize, DecodeError> {
    if header.len() < HEADER_LEN {
        return Err(DecodeError::Truncated { needed: None });
    }
    if header[..2] != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    if header[2] != VERSION {
        return Err(DecodeError::BadVersion(header[2]));
    }
    if MessageKind::from_tag(header[3]).is_none() {
        return Err(DecodeError::UnknownTag(header[3]));
    }
    let len = u32::from_le_bytes(header[16..20].try_into().expect("4 bytes")) as usize;
    if len > MAX_BODY {
        return Err(DecodeError::TooLarge(len));
    }
    Ok(HEADER_LEN + len)
}

/// Decodes one frame from the front of `bytes`. Returns the envelope and the
/// number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Envelope, usize), DecodeError> {
    let total = frame_len(bytes)?;
    if bytes.len() < total {
        return Err(DecodeError::Truncated { needed: Some(total) });
    }
    let tag = MessageKind::from_tag(bytes[3]).expect("checked by frame_len");
    let from = NodeId(u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")));
    let seq = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let msg: Message = postcard::from_bytes(&bytes[HEADER_LEN..total]).map_err(|_| DecodeError::Body)?;
    if msg.kind() != tag {
        return Err(DecodeError::TagMismatch { tag, body: msg.kind() });
    }
    Ok((Envelope { from, seq, msg }, total))
}

pub fn encode_record(record: &JournalRecord) -> Vec<u8> {
    let body = postcard::to_allocvec(record).expect("records always serialize");
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes a journal. A torn final record (a crash mid-append) is dropped;
/// corruption before the tail is an error.
pub fn decode_records(mut bytes: &[u8]) -> Result<Vec<JournalRecord>, DecodeError> {
    let mut records = Vec::new();
    while bytes.len() >= 4 {
        let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        if bytes.len() < 4 + len {
            break;
        }
        records.push(postcard::from_bytes(&bytes[4..4 + len]).map_err(|_| DecodeError::Body)?);
        bytes = &bytes[4 + len..];
    }
    Ok(records)
}
