//! Framed binary wire protocol shared by every TCP surface in this crate.
//!
//! Every frame has the same layout:
//!
//! ```text
//! +----------------+-----------+----------+------------------+
//! | length: u32 BE | ver: u8   | type: u8 | body (length-2)  |
//! +----------------+-----------+----------+------------------+
//! ```
//!
//! `length` counts everything after the length field itself (version byte,
//! type byte and body). The version byte leads every frame and is currently
//! [`WIRE_VERSION`]; frames with any other version are rejected.
//!
//! Integers inside bodies are big-endian. Strings and byte blobs are
//! length-prefixed with a `u32`. Optional fields are a presence `u8`
//! (0 or 1) followed by the value when present.
//!
//! # Message type catalog
//!
//! Rendezvous, client to server (`0x01`..):
//!
//! | type | name             | body |
//! |------|------------------|------|
//! | 0x01 | `ATTACH`         | req_id u64, namespace str, rank u32, size u32, token str |
//! | 0x02 | `PUT`            | req_id u64, key str, value bytes |
//! | 0x03 | `FENCE`          | req_id u64 |
//! | 0x04 | `GET`            | req_id u64, owner namespace str, owner rank u32, key str |
//! | 0x05 | `CONNECT`        | req_id u64, participant count u32, then per participant (namespace str, rank u32), tag opt str, timeout_ms opt u64 |
//! | 0x06 | `DISCONNECT`     | req_id u64, group namespace str |
//! | 0x07 | `FINALIZE`       | req_id u64 |
//! | 0x08 | `PING`           | empty |
//! | 0x09 | `COLL_BEGIN`     | group namespace str |
//! | 0x0A | `COLL_END`       | group namespace str |
//!
//! Rendezvous, server to client (`0x20`..):
//!
//! | type | name        | body |
//! |------|-------------|------|
//! | 0x20 | `REPLY_OK`  | req_id u64, payload bytes (operation specific) |
//! | 0x21 | `REPLY_ERR` | req_id u64, code u16, message str |
//! | 0x22 | `EVENT`     | kind u8, payload bytes (see `rendezvous::event`) |
//!
//! Task driver and worker (`0x40`..):
//!
//! | type | name     | body |
//! |------|----------|------|
//! | 0x40 | `HELLO`  | worker_id u32 |
//! | 0x41 | `TASK`   | stage str, params bytes (JSON), record count u32, then records as bytes |
//! | 0x42 | `RESULT` | payload bytes |
//! | 0x43 | `FAILED` | error class str, message str |
//! | 0x44 | `ACK`    | empty |
//!
//! Collective transport, rank to rank (`0x60`..):
//!
//! | type | name     | body |
//! |------|----------|------|
//! | 0x60 | `CHELLO` | group namespace str, sender group rank u32 |
//! | 0x61 | `CMSG`   | channel u8 (0 user, 1 system), tag u64, payload bytes |

use std::io::{self, Read, Write};

use thiserror::Error;

/// Protocol version carried in every frame.
pub const WIRE_VERSION: u8 = 1;

/// Hard cap on a single frame body; guards against corrupt length prefixes.
pub const MAX_FRAME_LEN: u32 = 256 * 1024 * 1024;

pub mod msg {
    //! Message type bytes; see the module-level catalog.
    pub const ATTACH: u8 = 0x01;
    pub const PUT: u8 = 0x02;
    pub const FENCE: u8 = 0x03;
    pub const GET: u8 = 0x04;
    pub const CONNECT: u8 = 0x05;
    pub const DISCONNECT: u8 = 0x06;
    pub const FINALIZE: u8 = 0x07;
    pub const PING: u8 = 0x08;
    pub const COLL_BEGIN: u8 = 0x09;
    pub const COLL_END: u8 = 0x0A;

    pub const REPLY_OK: u8 = 0x20;
    pub const REPLY_ERR: u8 = 0x21;
    pub const EVENT: u8 = 0x22;

    pub const HELLO: u8 = 0x40;
    pub const TASK: u8 = 0x41;
    pub const RESULT: u8 = 0x42;
    pub const FAILED: u8 = 0x43;
    pub const ACK: u8 = 0x44;

    pub const CHELLO: u8 = 0x60;
    pub const CMSG: u8 = 0x61;
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported wire version {0}")]
    BadVersion(u8),
    #[error("frame length {0} exceeds limit")]
    Oversized(u32),
    #[error("truncated or malformed message body")]
    Malformed,
    #[error("invalid utf-8 in string field")]
    BadString,
}

/// One decoded frame: the type byte plus its raw body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: u8, body: Vec<u8>) -> Self {
        Frame { msg_type, body }
    }

    /// Serialize into `[len][version][type][body]` and write to `w`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), WireError> {
        let len = self.body.len() as u32 + 2;
        if len > MAX_FRAME_LEN {
            return Err(WireError::Oversized(len));
        }
        let mut head = [0u8; 6];
        head[..4].copy_from_slice(&len.to_be_bytes());
        head[4] = WIRE_VERSION;
        head[5] = self.msg_type;
        w.write_all(&head)?;
        w.write_all(&self.body)?;
        w.flush()?;
        Ok(())
    }

    /// Read one frame, blocking until complete or the stream closes.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Frame, WireError> {
        let mut len_buf = [0u8; 4];
        r.read_exact(&mut len_buf)?;
        let len = u32::from_be_bytes(len_buf);
        if len < 2 {
            return Err(WireError::Malformed);
        }
        if len > MAX_FRAME_LEN {
            return Err(WireError::Oversized(len));
        }
        let mut rest = vec![0u8; len as usize];
        r.read_exact(&mut rest)?;
        if rest[0] != WIRE_VERSION {
            return Err(WireError::BadVersion(rest[0]));
        }
        let msg_type = rest[1];
        rest.drain(..2);
        Ok(Frame {
            msg_type,
            body: rest,
        })
    }
}

/// Append-only body writer with the field encodings described above.
#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Encoder::default()
    }

    pub fn u8(mut self, v: u8) -> Self {
        self.buf.push(v);
        self
    }

    pub fn u16(mut self, v: u16) -> Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(mut self, v: u32) -> Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn i64(self, v: i64) -> Self {
        self.u64(v as u64)
    }

    pub fn bytes(mut self, v: &[u8]) -> Self {
        self = self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(self, v: &str) -> Self {
        self.bytes(v.as_bytes())
    }

    pub fn opt_str(self, v: Option<&str>) -> Self {
        match v {
            Some(s) => self.u8(1).str(s),
            None => self.u8(0),
        }
    }

    pub fn opt_u64(self, v: Option<u64>) -> Self {
        match v {
            Some(n) => self.u8(1).u64(n),
            None => self.u8(0),
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor-style body reader matching [`Encoder`].
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.buf.len() {
            return Err(WireError::Malformed);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, WireError> {
        Ok(self.u64()? as i64)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn str(&mut self) -> Result<String, WireError> {
        String::from_utf8(self.bytes()?).map_err(|_| WireError::BadString)
    }

    pub fn opt_str(&mut self) -> Result<Option<String>, WireError> {
        if self.u8()? == 1 {
            Ok(Some(self.str()?))
        } else {
            Ok(None)
        }
    }

    pub fn opt_u64(&mut self) -> Result<Option<u64>, WireError> {
        if self.u8()? == 1 {
            Ok(Some(self.u64()?))
        } else {
            Ok(None)
        }
    }

    /// Fails unless the whole body has been consumed.
    pub fn finish(self) -> Result<(), WireError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(WireError::Malformed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_roundtrip() {
        let f = Frame::new(msg::PUT, vec![1, 2, 3]);
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(buf[4], WIRE_VERSION);
        let g = Frame::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn rejects_wrong_version() {
        let f = Frame::new(msg::PING, vec![]);
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        buf[4] = 9;
        match Frame::read_from(&mut buf.as_slice()) {
            Err(WireError::BadVersion(9)) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_oversized_length() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(MAX_FRAME_LEN + 1).to_be_bytes());
        buf.extend_from_slice(&[WIRE_VERSION, msg::PING]);
        assert!(matches!(
            Frame::read_from(&mut buf.as_slice()),
            Err(WireError::Oversized(_))
        ));
    }

    #[test]
    fn decoder_rejects_trailing_garbage() {
        let body = Encoder::new().u8(7).finish();
        let mut d = Decoder::new(&body);
        assert_eq!(d.u8().unwrap(), 7);
        assert!(d.finish().is_ok());

        let body = Encoder::new().u8(7).u8(8).finish();
        let mut d = Decoder::new(&body);
        d.u8().unwrap();
        assert!(d.finish().is_err());
    }

    proptest! {
        #[test]
        fn codec_roundtrip(a in any::<u64>(), b in any::<u32>(), s in ".{0,64}", v in proptest::collection::vec(any::<u8>(), 0..256), t in proptest::option::of(".{0,16}"), n in proptest::option::of(any::<u64>())) {
            let body = Encoder::new()
                .u64(a)
                .u32(b)
                .str(&s)
                .bytes(&v)
                .opt_str(t.as_deref())
                .opt_u64(n)
                .finish();
            let mut d = Decoder::new(&body);
            prop_assert_eq!(d.u64().unwrap(), a);
            prop_assert_eq!(d.u32().unwrap(), b);
            prop_assert_eq!(d.str().unwrap(), s);
            prop_assert_eq!(d.bytes().unwrap(), v);
            prop_assert_eq!(d.opt_str().unwrap(), t);
            prop_assert_eq!(d.opt_u64().unwrap(), n);
            d.finish().unwrap();
        }
    }
}
