//! Wire formats: length-prefixed frames over a reliable byte stream.
//!
//! Every frame starts with a version byte and a kind byte. Layouts are
//! fixed and little endian:
//!
//! ```text
//! request: 01 01 | chl[32] | app_id[16]
//! report:  01 02 | sigma_len:u16 | sigma | cflog_len:u32 | entry:u32 ...
//!          | h_app[32] | chl[32] | out_len:u16 | out
//! error:   01 03 | code:u8 | text_len:u16 | text
//! ```
//!
//! On the stream each frame is preceded by a u32 byte length. Frames are
//! bounded; decoders return typed errors and never panic on garbage.

use std::io::{Read, Write};

use crate::runtime::crypto::CHL_LEN;
use crate::runtime::Report;
use crate::vm::Word;

pub const WIRE_VERSION: u8 = 1;
pub const MAX_FRAME: usize = 64 * 1024;

pub const KIND_REQUEST: u8 = 1;
pub const KIND_REPORT: u8 = 2;
pub const KIND_ERROR: u8 = 3;

pub const APP_ID_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("truncated frame")]
    Truncated,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("length field inconsistent with payload")]
    LengthMismatch,
    #[error("frame exceeds {MAX_FRAME} bytes")]
    Oversize,
}

/// Error frame codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Busy = 1,
    NoReport = 2,
    UnknownApp = 3,
    Malformed = 4,
}

impl ErrorCode {
    pub fn from_byte(b: u8) -> Option<ErrorCode> {
        Some(match b {
            1 => ErrorCode::Busy,
            2 => ErrorCode::NoReport,
            3 => ErrorCode::UnknownApp,
            4 => ErrorCode::Malformed,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationRequest {
    pub chl: [u8; CHL_LEN],
    pub app_id: [u8; APP_ID_LEN],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorFrame {
    pub code: u8,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Request(AttestationRequest),
    Report(Report),
    Error(ErrorFrame),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        if end > self.buf.len() {
            return Err(DecodeError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn encode_request(req: &AttestationRequest) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + CHL_LEN + APP_ID_LEN);
    out.push(WIRE_VERSION);
    out.push(KIND_REQUEST);
    out.extend_from_slice(&req.chl);
    out.extend_from_slice(&req.app_id);
    out
}

pub fn encode_report(report: &Report) -> Vec<u8> {
    let out_bytes = report.out.as_deref().unwrap_or(&[]);
    let mut buf = Vec::new();
    buf.push(WIRE_VERSION);
    buf.push(KIND_REPORT);
    buf.extend_from_slice(&(report.sigma.len() as u16).to_le_bytes());
    buf.extend_from_slice(&report.sigma);
    buf.extend_from_slice(&(report.cflog.len() as u32).to_le_bytes());
    for e in &report.cflog {
        buf.extend_from_slice(&e.to_le_bytes());
    }
    buf.extend_from_slice(&report.h_app);
    buf.extend_from_slice(&report.chl);
    buf.extend_from_slice(&(out_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(out_bytes);
    buf
}

pub fn encode_error(code: ErrorCode, text: &str) -> Vec<u8> {
    let bytes = text.as_bytes();
    let mut buf = Vec::with_capacity(5 + bytes.len());
    buf.push(WIRE_VERSION);
    buf.push(KIND_ERROR);
    buf.push(code as u8);
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
    buf
}

/// Decodes any frame. Total decoder: every input either parses or yields
/// a typed error.
pub fn decode_frame(buf: &[u8]) -> Result<Frame, DecodeError> {
    if buf.len() > MAX_FRAME {
        return Err(DecodeError::Oversize);
    }
    let mut r = Reader::new(buf);
    let version = r.u8()?;
    if version != WIRE_VERSION {
        return Err(DecodeError::BadVersion(version));
    }
    match r.u8()? {
        KIND_REQUEST => {
            let chl: [u8; CHL_LEN] = r.take(CHL_LEN)?.try_into().expect("fixed length");
            let app_id: [u8; APP_ID_LEN] = r.take(APP_ID_LEN)?.try_into().expect("fixed length");
            if !r.done() {
                return Err(DecodeError::LengthMismatch);
            }
            Ok(Frame::Request(AttestationRequest { chl, app_id }))
        }
        KIND_REPORT => {
            let sigma_len = r.u16()? as usize;
            let sigma = r.take(sigma_len)?.to_vec();
            let cflog_len = r.u32()? as usize;
            // entries are 4 bytes each; claimed count must fit the buffer
            if cflog_len > buf.len() / 4 {
                return Err(DecodeError::LengthMismatch);
            }
            let mut cflog = Vec::with_capacity(cflog_len);
            for _ in 0..cflog_len {
                cflog.push(r.u32()? as Word);
            }
            let h_app: [u8; 32] = r.take(32)?.try_into().expect("fixed length");
            let chl: [u8; CHL_LEN] = r.take(CHL_LEN)?.try_into().expect("fixed length");
            let out_len = r.u16()? as usize;
            let out_bytes = r.take(out_len)?.to_vec();
            if !r.done() {
                return Err(DecodeError::LengthMismatch);
            }
            let out = if out_bytes.is_empty() { None } else { Some(out_bytes) };
            Ok(Frame::Report(Report { sigma, cflog, h_app, chl, out }))
        }
        KIND_ERROR => {
            let code = r.u8()?;
            let len = r.u16()? as usize;
            let text_bytes = r.take(len)?.to_vec();
            if !r.done() {
                return Err(DecodeError::LengthMismatch);
            }
            let text = String::from_utf8_lossy(&text_bytes).into_owned();
            Ok(Frame::Error(ErrorFrame { code, text }))
        }
        other => Err(DecodeError::UnknownKind(other)),
    }
}

pub fn decode_request(buf: &[u8]) -> Result<AttestationRequest, DecodeError> {
    match decode_frame(buf)? {
        Frame::Request(r) => Ok(r),
        _ => Err(DecodeError::UnknownKind(buf.get(1).copied().unwrap_or(0))),
    }
}

pub fn decode_report(buf: &[u8]) -> Result<Report, DecodeError> {
    match decode_frame(buf)? {
        Frame::Report(r) => Ok(r),
        _ => Err(DecodeError::UnknownKind(buf.get(1).copied().unwrap_or(0))),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer frame too large ({0} bytes)")]
    Oversize(u32),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Writes one length-prefixed frame.
pub fn write_frame(stream: &mut impl Write, frame: &[u8]) -> Result<(), TransportError> {
    stream.write_all(&(frame.len() as u32).to_le_bytes())?;
    stream.write_all(frame)?;
    stream.flush()?;
    Ok(())
}

/// Reads one length-prefixed frame, bounded by [`MAX_FRAME`].
pub fn read_frame(stream: &mut impl Read) -> Result<Vec<u8>, TransportError> {
    let mut len_bytes = [0u8; 4];
    stream.read_exact(&mut len_bytes)?;
    let len = u32::from_le_bytes(len_bytes);
    if len as usize > MAX_FRAME {
        return Err(TransportError::Oversize(len));
    }
    let mut buf = vec![0u8; len as usize];
    stream.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report(out: Option<Vec<u8>>) -> Report {
        Report {
            sigma: vec![7u8; 64],
            cflog: vec![0x4000, 0x4010, 0x4100],
            h_app: [9u8; 32],
            chl: [3u8; CHL_LEN],
            out,
        }
    }

    #[test]
    fn request_roundtrip() {
        let req = AttestationRequest { chl: [5u8; CHL_LEN], app_id: [8u8; APP_ID_LEN] };
        let buf = encode_request(&req);
        assert_eq!(decode_request(&buf).unwrap(), req);
    }

    #[test]
    fn report_roundtrip_with_and_without_out() {
        for out in [None, Some(vec![1, 2, 3, 4])] {
            let r = sample_report(out);
            let buf = encode_report(&r);
            assert_eq!(decode_report(&buf).unwrap(), r);
        }
    }

    #[test]
    fn truncation_detected_at_every_length() {
        let r = sample_report(Some(vec![1, 2, 3]));
        let buf = encode_report(&r);
        for cut in 0..buf.len() {
            let e = decode_report(&buf[..cut]).unwrap_err();
            assert!(
                matches!(e, DecodeError::Truncated | DecodeError::LengthMismatch),
                "cut {cut}: {e:?}"
            );
        }
    }

    #[test]
    fn length_mismatch_detected() {
        let r = sample_report(None);
        let mut buf = encode_report(&r);
        // claim more log entries than bytes present
        let sigma_end = 2 + 2 + 64;
        buf[sigma_end..sigma_end + 4].copy_from_slice(&1000u32.to_le_bytes());
        assert!(matches!(
            decode_report(&buf).unwrap_err(),
            DecodeError::LengthMismatch | DecodeError::Truncated
        ));
        // trailing junk
        let mut buf = encode_report(&r);
        buf.push(0);
        assert_eq!(decode_report(&buf).unwrap_err(), DecodeError::LengthMismatch);
    }

    #[test]
    fn version_and_kind_checked() {
        let mut buf = encode_request(&AttestationRequest {
            chl: [0; CHL_LEN],
            app_id: [0; APP_ID_LEN],
        });
        buf[0] = 9;
        assert_eq!(decode_frame(&buf).unwrap_err(), DecodeError::BadVersion(9));
        buf[0] = WIRE_VERSION;
        buf[1] = 42;
        assert_eq!(decode_frame(&buf).unwrap_err(), DecodeError::UnknownKind(42));
    }

    #[test]
    fn oversize_rejected() {
        let huge = vec![0u8; MAX_FRAME + 1];
        assert_eq!(decode_frame(&huge).unwrap_err(), DecodeError::Oversize);
    }

    #[test]
    fn error_frame_roundtrip() {
        let buf = encode_error(ErrorCode::Busy, "session in progress");
        match decode_frame(&buf).unwrap() {
            Frame::Error(e) => {
                assert_eq!(e.code, ErrorCode::Busy as u8);
                assert_eq!(e.text, "session in progress");
            }
            other => panic!("{other:?}"),
        }
    }
}
