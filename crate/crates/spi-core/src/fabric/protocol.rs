//! Length-prefixed binary wire protocol.
//!
//! Frame layout, all little-endian:
//!
//! ```text
//! length: u32           -- bytes after this field = 1 + 8 + payload len
//! msg_type: u8
//! request_id: u64
//! payload: [u8]
//! ```
//!
//! Every received frame yields exactly one response frame with the same
//! request id; malformed or unknown input yields an Error frame. The same
//! encoding runs in-process and over sockets.

use std::io::{Read, Write};

use crate::cache::CacheStats;
use crate::error::{Result, SpiError};
use crate::index::{SearchHit, SearchStats};

pub const MAX_FRAME_BYTES: u32 = 64 * 1024 * 1024;
const HEADER_BYTES: usize = 1 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Search = 1,
    SearchResult = 2,
    Insert = 3,
    Ack = 4,
    Health = 5,
    LoadReport = 6,
    Error = 7,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(MsgType::Search),
            2 => Some(MsgType::SearchResult),
            3 => Some(MsgType::Insert),
            4 => Some(MsgType::Ack),
            5 => Some(MsgType::Health),
            6 => Some(MsgType::LoadReport),
            7 => Some(MsgType::Error),
            _ => None,
        }
    }
}

/// A raw frame; `msg_type` is kept as the wire byte so handlers can answer
/// unknown types with an Error frame instead of dropping the request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub request_id: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, request_id: u64, payload: Vec<u8>) -> Self {
        Frame {
            msg_type: msg_type as u8,
            request_id,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        4 + HEADER_BYTES + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(&((HEADER_BYTES + self.payload.len()) as u32).to_le_bytes());
        buf.push(self.msg_type);
        buf.extend_from_slice(&self.request_id.to_le_bytes());
        buf.extend_from_slice(&self.payload);
        buf
    }

    /// Decode one frame from the head of `buf`. `Ok(None)` means the buffer
    /// does not yet hold a complete frame.
    pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>> {
        if buf.len() < 4 {
            return Ok(None);
        }
        let length = u32::from_le_bytes(buf[..4].try_into().unwrap());
        if length > MAX_FRAME_BYTES {
            return Err(SpiError::Protocol(format!(
                "frame length {length} exceeds maximum"
            )));
        }
        if (length as usize) < HEADER_BYTES {
            return Err(SpiError::Protocol(format!(
                "frame length {length} below header size"
            )));
        }
        let total = 4 + length as usize;
        if buf.len() < total {
            return Ok(None);
        }
        let msg_type = buf[4];
        let request_id = u64::from_le_bytes(buf[5..13].try_into().unwrap());
        let payload = buf[13..total].to_vec();
        Ok(Some((
            Frame {
                msg_type,
                request_id,
                payload,
            },
            total,
        )))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.encode())
    }

    /// Blocking read of one frame from a stream.
    pub fn read_from(r: &mut impl Read) -> Result<Frame> {
        let mut len_buf = [0u8; 4];
        r.read_exact(&mut len_buf)?;
        let length = u32::from_le_bytes(len_buf);
        if length > MAX_FRAME_BYTES || (length as usize) < HEADER_BYTES {
            return Err(SpiError::Protocol(format!("bad frame length {length}")));
        }
        let mut rest = vec![0u8; length as usize];
        r.read_exact(&mut rest)?;
        let msg_type = rest[0];
        let request_id = u64::from_le_bytes(rest[1..9].try_into().unwrap());
        Ok(Frame {
            msg_type,
            request_id,
            payload: rest[9..].to_vec(),
        })
    }
}

// ---------------------------------------------------------------------------
// Payload codecs (hand-rolled little-endian, mirrors the file formats)
// ---------------------------------------------------------------------------

struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        PayloadReader { buf, pos: 0 }
    }
    fn need(&self, n: usize) -> Result<()> {
        if self.pos + n > self.buf.len() {
            return Err(SpiError::Protocol("truncated payload".into()));
        }
        Ok(())
    }
    fn u8(&mut self) -> Result<u8> {
        self.need(1)?;
        let v = self.buf[self.pos];
        self.pos += 1;
        Ok(v)
    }
    fn u32(&mut self) -> Result<u32> {
        self.need(4)?;
        let v = u32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }
    fn u64(&mut self) -> Result<u64> {
        self.need(8)?;
        let v = u64::from_le_bytes(self.buf[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        Ok(v)
    }
    fn f32(&mut self) -> Result<f32> {
        self.need(4)?;
        let v = f32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }
    fn f64(&mut self) -> Result<f64> {
        self.need(8)?;
        let v = f64::from_le_bytes(self.buf[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        Ok(v)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f32()?);
        }
        Ok(out)
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(SpiError::Protocol("trailing payload bytes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchRequest {
    pub shard: u32,
    pub level: u8,
    pub k: u32,
    pub query: Vec<f32>,
    pub restrict: Option<Vec<u64>>,
}

impl SearchRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.shard.to_le_bytes());
        b.push(self.level);
        b.extend_from_slice(&self.k.to_le_bytes());
        b.extend_from_slice(&(self.query.len() as u32).to_le_bytes());
        for v in &self.query {
            b.extend_from_slice(&v.to_le_bytes());
        }
        match &self.restrict {
            None => b.push(0),
            Some(ids) => {
                b.push(1);
                b.extend_from_slice(&(ids.len() as u32).to_le_bytes());
                for id in ids {
                    b.extend_from_slice(&id.to_le_bytes());
                }
            }
        }
        b
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut r = PayloadReader::new(payload);
        let shard = r.u32()?;
        let level = r.u8()?;
        let k = r.u32()?;
        let dim = r.u32()? as usize;
        let query = r.f32s(dim)?;
        let restrict = match r.u8()? {
            0 => None,
            1 => {
                let n = r.u32()? as usize;
                let mut ids = Vec::with_capacity(n);
                for _ in 0..n {
                    ids.push(r.u64()?);
                }
                Some(ids)
            }
            other => {
                return Err(SpiError::Protocol(format!("bad restrict flag {other}")));
            }
        };
        r.done()?;
        Ok(SearchRequest {
            shard,
            level,
            k,
            query,
            restrict,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResponse {
    pub served_by: u32,
    pub level: u8,
    pub hits: Vec<(u64, f32)>,
    pub scored_docs: u64,
    pub scored_centroids: u64,
    pub restrict_misses: u64,
}

impl SearchResponse {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.served_by.to_le_bytes());
        b.push(self.level);
        b.extend_from_slice(&(self.hits.len() as u32).to_le_bytes());
        for (id, score) in &self.hits {
            b.extend_from_slice(&id.to_le_bytes());
            b.extend_from_slice(&score.to_le_bytes());
        }
        b.extend_from_slice(&self.scored_docs.to_le_bytes());
        b.extend_from_slice(&self.scored_centroids.to_le_bytes());
        b.extend_from_slice(&self.restrict_misses.to_le_bytes());
        b
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut r = PayloadReader::new(payload);
        let served_by = r.u32()?;
        let level = r.u8()?;
        let n = r.u32()? as usize;
        let mut hits = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.u64()?;
            let score = r.f32()?;
            hits.push((id, score));
        }
        let scored_docs = r.u64()?;
        let scored_centroids = r.u64()?;
        let restrict_misses = r.u64()?;
        r.done()?;
        Ok(SearchResponse {
            served_by,
            level,
            hits,
            scored_docs,
            scored_centroids,
            restrict_misses,
        })
    }

    pub fn to_hits(&self) -> Vec<SearchHit> {
        self.hits
            .iter()
            .map(|&(doc_id, score)| SearchHit {
                doc_id,
                score,
                level: self.level,
            })
            .collect()
    }

    pub fn stats(&self) -> SearchStats {
        SearchStats {
            scored_docs: self.scored_docs as usize,
            scored_centroids: self.scored_centroids as usize,
            restrict_misses: self.restrict_misses as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InsertRequest {
    pub shard: u32,
    pub doc_id: u64,
    /// Level vectors 1..=L.
    pub levels: Vec<Vec<f32>>,
}

impl InsertRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.shard.to_le_bytes());
        b.extend_from_slice(&self.doc_id.to_le_bytes());
        b.push(self.levels.len() as u8);
        for level in &self.levels {
            b.extend_from_slice(&(level.len() as u32).to_le_bytes());
            for v in level {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut r = PayloadReader::new(payload);
        let shard = r.u32()?;
        let doc_id = r.u64()?;
        let n_levels = r.u8()? as usize;
        let mut levels = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            let dim = r.u32()? as usize;
            levels.push(r.f32s(dim)?);
        }
        r.done()?;
        Ok(InsertRequest {
            shard,
            doc_id,
            levels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum HealthState {
    Up = 0,
    Suspect = 1,
    Down = 2,
}

impl HealthState {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(HealthState::Up),
            1 => Ok(HealthState::Suspect),
            2 => Ok(HealthState::Down),
            other => Err(SpiError::Protocol(format!("bad health state {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReportPayload {
    pub node_id: u32,
    pub load: f64,
    pub cache: CacheStats,
}

impl LoadReportPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.node_id.to_le_bytes());
        b.extend_from_slice(&self.load.to_le_bytes());
        b.extend_from_slice(&self.cache.lookups.to_le_bytes());
        for h in &self.cache.hits {
            b.extend_from_slice(&h.to_le_bytes());
        }
        b.extend_from_slice(&self.cache.misses.to_le_bytes());
        b.extend_from_slice(&self.cache.evictions.to_le_bytes());
        b.extend_from_slice(&self.cache.promotions.to_le_bytes());
        b
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut r = PayloadReader::new(payload);
        let node_id = r.u32()?;
        let load = r.f64()?;
        let lookups = r.u64()?;
        let hits = [r.u64()?, r.u64()?, r.u64()?];
        let misses = r.u64()?;
        let evictions = r.u64()?;
        let promotions = r.u64()?;
        r.done()?;
        Ok(LoadReportPayload {
            node_id,
            load,
            cache: CacheStats {
                lookups,
                hits,
                misses,
                evictions,
                promotions,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    BadRequest = 1,
    UnknownType = 2,
    UnknownShard = 3,
    DuplicateDoc = 4,
    UnknownDoc = 5,
    Internal = 6,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPayload {
    pub code: u8,
    pub message: String,
}

impl ErrorPayload {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ErrorPayload {
            code: code as u8,
            message: message.into(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let msg = self.message.as_bytes();
        let mut b = Vec::with_capacity(3 + msg.len());
        b.push(self.code);
        b.extend_from_slice(&(msg.len() as u16).to_le_bytes());
        b.extend_from_slice(msg);
        b
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut r = PayloadReader::new(payload);
        let code = r.u8()?;
        let len = {
            r.need(2)?;
            let v = u16::from_le_bytes(r.buf[r.pos..r.pos + 2].try_into().unwrap());
            r.pos += 2;
            v as usize
        };
        r.need(len)?;
        let message = String::from_utf8_lossy(&r.buf[r.pos..r.pos + len]).into_owned();
        Ok(ErrorPayload { code, message })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip_and_length_invariant() {
        let f = Frame::new(MsgType::Search, 42, vec![1, 2, 3, 4, 5]);
        let bytes = f.encode();
        let length = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(length, f.payload.len() + 9, "length = payload + header");
        let (decoded, consumed) = Frame::decode(&bytes).unwrap().unwrap();
        assert_eq!(consumed, bytes.len());
        assert_eq!(decoded, f);
    }

    #[test]
    fn incomplete_buffers_wait_oversize_rejected() {
        let f = Frame::new(MsgType::Ack, 7, vec![0; 100]);
        let bytes = f.encode();
        assert!(Frame::decode(&bytes[..3]).unwrap().is_none());
        assert!(Frame::decode(&bytes[..50]).unwrap().is_none());
        let mut huge = bytes.clone();
        huge[..4].copy_from_slice(&(MAX_FRAME_BYTES + 1).to_le_bytes());
        assert!(Frame::decode(&huge).is_err());
    }

    #[test]
    fn search_payload_roundtrip() {
        let req = SearchRequest {
            shard: 3,
            level: 2,
            k: 10,
            query: vec![0.1, -0.5, 0.9],
            restrict: Some(vec![5, 9, 1000]),
        };
        assert_eq!(SearchRequest::decode(&req.encode()).unwrap(), req);
        let no_restrict = SearchRequest {
            restrict: None,
            ..req
        };
        assert_eq!(
            SearchRequest::decode(&no_restrict.encode()).unwrap(),
            no_restrict
        );

        let resp = SearchResponse {
            served_by: 1,
            level: 2,
            hits: vec![(10, 0.9), (4, 0.3)],
            scored_docs: 55,
            scored_centroids: 8,
            restrict_misses: 2,
        };
        assert_eq!(SearchResponse::decode(&resp.encode()).unwrap(), resp);
    }

    #[test]
    fn insert_and_error_payload_roundtrip() {
        let ins = InsertRequest {
            shard: 0,
            doc_id: 12345,
            levels: vec![vec![0.1, 0.2], vec![0.3, 0.4, 0.5, 0.6]],
        };
        assert_eq!(InsertRequest::decode(&ins.encode()).unwrap(), ins);

        let err = ErrorPayload::new(ErrorCode::UnknownShard, "shard 9 not here");
        assert_eq!(ErrorPayload::decode(&err.encode()).unwrap(), err);
    }

    #[test]
    fn truncated_payloads_error() {
        let req = SearchRequest {
            shard: 1,
            level: 1,
            k: 5,
            query: vec![0.5; 8],
            restrict: None,
        };
        let enc = req.encode();
        assert!(SearchRequest::decode(&enc[..enc.len() - 2]).is_err());
        assert!(SearchRequest::decode(&[]).is_err());
    }
}
