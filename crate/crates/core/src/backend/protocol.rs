//! Step protocol spoken between an external diffusion process and the engine.
//!
//! Every message is `u32 length | u8 type | payload`, little-endian, where
//! `length` counts the type byte plus the payload. Tensors inside payloads
//! use the tensor frame format from [`crate::tensors::frame`].
//!
//! | type | message       | payload                                              |
//! |------|---------------|------------------------------------------------------|
//! | 0x01 | Hello         | `"DMWP"`, version u16, role u8                        |
//! | 0x02 | Welcome       | session id u64, version u16                           |
//! | 0x03 | Configure     | UTF-8 session config text                             |
//! | 0x04 | Ack           | empty                                                 |
//! | 0x10 | StepRequest   | t u32, step index u32, count u32, entries             |
//! | 0x11 | StepResponse  | t u32, step index u32, count u32, entries             |
//! | 0x20 | Close         | empty                                                 |
//! | 0x7F | Error         | code u8, UTF-8 message                                |
//!
//! An entry is `tag u8 | layer u8 | branch u8 | tensor frame`.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};
use crate::tensors::frame::RawFrame;

pub const PROTOCOL_MAGIC: [u8; 4] = *b"DMWP";
pub const PROTOCOL_VERSION: u16 = 1;
/// Role byte sent by a client that owns the diffusion loop.
pub const ROLE_DRIVER: u8 = 1;

pub const ERR_MALFORMED: u8 = 0x01;
pub const ERR_SHAPE: u8 = 0x02;
pub const ERR_VERSION: u8 = 0x03;
pub const ERR_STATE: u8 = 0x04;

/// Upper bound on a single message body.
pub const MAX_MESSAGE_LEN: u32 = 1 << 30;

pub const MSG_HELLO: u8 = 0x01;
pub const MSG_WELCOME: u8 = 0x02;
pub const MSG_CONFIGURE: u8 = 0x03;
pub const MSG_ACK: u8 = 0x04;
pub const MSG_STEP_REQUEST: u8 = 0x10;
pub const MSG_STEP_RESPONSE: u8 = 0x11;
pub const MSG_CLOSE: u8 = 0x20;
pub const MSG_ERROR: u8 = 0x7F;

/// Entry tags. Request tags sit below 0x20, response tags above.
pub mod tag {
    /// Reference decoder features; `layer` is the decoder layer.
    pub const FEAT_REF: u8 = 0x01;
    pub const FEAT_TGT: u8 = 0x02;
    /// Target self-attention projections; `layer` and `branch` set.
    pub const Q_TGT: u8 = 0x03;
    pub const K_TGT: u8 = 0x04;
    pub const V_TGT: u8 = 0x05;
    /// Reference values; `layer` set, `branch` ignored.
    pub const V_REF: u8 = 0x06;
    /// Subject cross-attention map; `layer` is an ordinal.
    pub const CROSS_ATTN: u8 = 0x07;
    pub const Z_TGT: u8 = 0x08;
    /// Target noise prediction per branch, before guidance.
    pub const EPS_TGT: u8 = 0x09;
    /// Reference clean-latent estimate.
    pub const Z0_REF: u8 = 0x0A;

    /// Blended values `V^W` per layer and branch.
    pub const VALUES: u8 = 0x21;
    /// Semantic-consistent mask at descriptor resolution.
    pub const MASK: u8 = 0x22;
    /// Amount to subtract from the branch noise prediction.
    pub const GUIDANCE: u8 = 0x23;
    /// Guidance energy per branch, a 1×1×1 tensor.
    pub const ENERGY: u8 = 0x24;
    /// Flow `F^{X→Y}` at descriptor resolution.
    pub const FLOW: u8 = 0x25;
    /// Attention output over `V^W` per layer and branch, sent when the
    /// request carried queries and keys.
    pub const ATTN_OUT: u8 = 0x26;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub tag: u8,
    pub layer: u8,
    pub branch: u8,
    pub frame: RawFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepPayload {
    pub t: u32,
    pub step_index: u32,
    pub entries: Vec<Entry>,
}

impl StepPayload {
    pub fn find(&self, tag: u8, layer: u8, branch: u8) -> Option<&RawFrame> {
        self.entries
            .iter()
            .find(|e| e.tag == tag && e.layer == layer && e.branch == branch)
            .map(|e| &e.frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { version: u16, role: u8 },
    Welcome { session_id: u64, version: u16 },
    Configure(String),
    Ack,
    StepRequest(StepPayload),
    StepResponse(StepPayload),
    Close,
    Error { code: u8, message: String },
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Protocol {
        code: ERR_MALFORMED,
        message: msg.into(),
    }
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello { .. } => MSG_HELLO,
            Message::Welcome { .. } => MSG_WELCOME,
            Message::Configure(_) => MSG_CONFIGURE,
            Message::Ack => MSG_ACK,
            Message::StepRequest(_) => MSG_STEP_REQUEST,
            Message::StepResponse(_) => MSG_STEP_RESPONSE,
            Message::Close => MSG_CLOSE,
            Message::Error { .. } => MSG_ERROR,
        }
    }

    /// Full wire form, length prefix included.
    pub fn encode(&self) -> Vec<u8> {
        let mut body = vec![self.type_byte()];
        match self {
            Message::Hello { version, role } => {
                body.extend_from_slice(&PROTOCOL_MAGIC);
                body.extend_from_slice(&version.to_le_bytes());
                body.push(*role);
            }
            Message::Welcome { session_id, version } => {
                body.extend_from_slice(&session_id.to_le_bytes());
                body.extend_from_slice(&version.to_le_bytes());
            }
            Message::Configure(text) => body.extend_from_slice(text.as_bytes()),
            Message::Ack | Message::Close => {}
            Message::StepRequest(p) | Message::StepResponse(p) => {
                body.extend_from_slice(&p.t.to_le_bytes());
                body.extend_from_slice(&p.step_index.to_le_bytes());
                body.extend_from_slice(&(p.entries.len() as u32).to_le_bytes());
                for e in &p.entries {
                    body.extend_from_slice(&[e.tag, e.layer, e.branch]);
                    e.frame.encode(&mut body);
                }
            }
            Message::Error { code, message } => {
                body.push(*code);
                body.extend_from_slice(message.as_bytes());
            }
        }
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    /// Parses a message body (type byte plus payload, no length prefix).
    pub fn decode_body(body: &[u8]) -> Result<Message> {
        let (&kind, payload) = body.split_first().ok_or_else(|| malformed("empty message"))?;
        let mut cur = Cursor { buf: payload, pos: 0 };
        let msg = match kind {
            MSG_HELLO => {
                let magic = cur.take(4)?;
                if magic != PROTOCOL_MAGIC {
                    return Err(malformed(format!("bad handshake magic {magic:02x?}")));
                }
                Message::Hello {
                    version: cur.u16()?,
                    role: cur.u8()?,
                }
            }
            MSG_WELCOME => Message::Welcome {
                session_id: cur.u64()?,
                version: cur.u16()?,
            },
            MSG_CONFIGURE => {
                let text = std::str::from_utf8(cur.take_rest()).map_err(|_| malformed("config text is not UTF-8"))?;
                Message::Configure(text.to_string())
            }
            MSG_ACK => Message::Ack,
            MSG_CLOSE => Message::Close,
            MSG_STEP_REQUEST | MSG_STEP_RESPONSE => {
                let t = cur.u32()?;
                let step_index = cur.u32()?;
                let count = cur.u32()?;
                let mut entries = Vec::new();
                for _ in 0..count {
                    let head = cur.take(3)?;
                    let (frame, used) = RawFrame::decode(cur.rest())?;
                    cur.pos += used;
                    entries.push(Entry {
                        tag: head[0],
                        layer: head[1],
                        branch: head[2],
                        frame,
                    });
                }
                let p = StepPayload {
                    t,
                    step_index,
                    entries,
                };
                if kind == MSG_STEP_REQUEST {
                    Message::StepRequest(p)
                } else {
                    Message::StepResponse(p)
                }
            }
            MSG_ERROR => {
                let code = cur.u8()?;
                let message = String::from_utf8_lossy(cur.take_rest()).into_owned();
                Message::Error { code, message }
            }
            other => return Err(malformed(format!("unknown message type {other:#04x}"))),
        };
        if !cur.rest().is_empty() {
            return Err(malformed(format!(
                "{} trailing bytes after message {kind:#04x}",
                cur.rest().len()
            )));
        }
        Ok(msg)
    }

    /// Decodes one complete message from the front of `bytes`, returning
    /// the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Message, usize)> {
        if bytes.len() < 4 {
            return Err(malformed("truncated length prefix"));
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap());
        check_len(len)?;
        let end = 4 + len as usize;
        if bytes.len() < end {
            return Err(malformed(format!("message claims {len} bytes, {} available", bytes.len() - 4)));
        }
        Ok((Message::decode_body(&bytes[4..end])?, end))
    }
}

fn check_len(len: u32) -> Result<()> {
    if len == 0 {
        return Err(malformed("zero-length message"));
    }
    if len > MAX_MESSAGE_LEN {
        return Err(malformed(format!("message length {len} exceeds limit")));
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| malformed("truncated payload"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }

    fn take_rest(&mut self) -> &'a [u8] {
        let s = self.rest();
        self.pos = self.buf.len();
        s
    }
}

/// Reads one message; `Ok(None)` on a clean end of stream before the length
/// prefix.
pub fn read_message(reader: &mut impl Read) -> Result<Option<Message>> {
    let mut len_buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match reader.read(&mut len_buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(malformed("stream ended inside a length prefix")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len_buf);
    check_len(len)?;
    let mut body = vec![0u8; len as usize];
    reader.read_exact(&mut body).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => malformed("stream ended inside a message"),
        _ => e.into(),
    })?;
    Message::decode_body(&body).map(Some)
}

pub fn write_message(writer: &mut impl Write, msg: &Message) -> Result<()> {
    writer.write_all(&msg.encode())?;
    writer.flush()?;
    Ok(())
}
