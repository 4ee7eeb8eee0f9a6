//! Framed transport for running the draft server as a separate process.
//!
//! Every message is a frame: a 4-byte big-endian length `L` followed by `L`
//! bytes of record. A record starts with a one-byte op tag. Strings are a
//! big-endian u16 byte length followed by UTF-8; all integers are big-endian.
//!
//! Requests:
//!
//! ```text
//! 0x01 register_group   group_id:str  ttl_seconds:u32
//! 0x02 update_cst       group_id:str  request_id:u32  prev_token_count:u32
//!                       n:u32  tokens:u32*n
//! 0x03 fetch_cst        n:u32  then n * (group_id:str  cached_version:u64)
//! 0x04 advance_clock    now_seconds:f64 (IEEE-754 bits as u64)
//! ```
//!
//! Responses:
//!
//! ```text
//! 0x81 ack              version:u64
//! 0x82 resync           acknowledged:u32  got:u32
//! 0x83 fetch_results    n:u32  then n * (kind:u8 [len:u32 blob])
//!                       kind 0 up_to_date, 1 delta, 2 full, 3 unknown_group;
//!                       blob (kinds 1, 2 only) is a draft delta blob
//! 0x84 ok
//! 0xff error            message:str
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};

use super::{DraftCacheInfo, DraftServer, DraftService, FetchReply};
use crate::cst::DraftDelta;
use crate::error::{Error, Result};
use crate::workload::TokenId;

pub const MAX_FRAME: u32 = 256 << 20;

#[derive(Debug, Clone, PartialEq)]
pub enum WireRequest {
    RegisterGroup { group_id: String, ttl_seconds: u32 },
    UpdateCst { group_id: String, request_id: u32, prev_token_count: u32, new_tokens: Vec<TokenId> },
    FetchCst { infos: Vec<DraftCacheInfo> },
    AdvanceClock { now: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireResponse {
    Ack { version: u64 },
    Resync { acknowledged: u32, got: u32 },
    FetchResults(Vec<FetchReply>),
    Ok,
    Error(String),
}

struct Buf(Vec<u8>);

impl Buf {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn str(&mut self, s: &str) {
        let b = s.as_bytes();
        let n = b.len().min(u16::MAX as usize);
        self.0.extend_from_slice(&(n as u16).to_be_bytes());
        self.0.extend_from_slice(&b[..n]);
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Wire("truncated record".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Wire("string is not UTF-8".into()))
    }
    fn count(&mut self, min_item: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item) > self.buf.len() - self.pos {
            return Err(Error::Wire("item count exceeds record".into()));
        }
        Ok(n)
    }
    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Wire(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

impl WireRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Buf(Vec::new());
        match self {
            WireRequest::RegisterGroup { group_id, ttl_seconds } => {
                b.u8(0x01);
                b.str(group_id);
                b.u32(*ttl_seconds);
            }
            WireRequest::UpdateCst { group_id, request_id, prev_token_count, new_tokens } => {
                b.u8(0x02);
                b.str(group_id);
                b.u32(*request_id);
                b.u32(*prev_token_count);
                b.u32(new_tokens.len() as u32);
                for t in new_tokens {
                    b.u32(*t);
                }
            }
            WireRequest::FetchCst { infos } => {
                b.u8(0x03);
                b.u32(infos.len() as u32);
                for i in infos {
                    b.str(&i.group_id);
                    b.u64(i.cached_version);
                }
            }
            WireRequest::AdvanceClock { now } => {
                b.u8(0x04);
                b.u64(now.to_bits());
            }
        }
        b.0
    }

    pub fn decode(rec: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: rec, pos: 0 };
        let req = match c.u8()? {
            0x01 => WireRequest::RegisterGroup { group_id: c.str()?, ttl_seconds: c.u32()? },
            0x02 => {
                let group_id = c.str()?;
                let request_id = c.u32()?;
                let prev_token_count = c.u32()?;
                let n = c.count(4)?;
                let new_tokens = (0..n).map(|_| c.u32()).collect::<Result<_>>()?;
                WireRequest::UpdateCst { group_id, request_id, prev_token_count, new_tokens }
            }
            0x03 => {
                let n = c.count(10)?;
                let infos = (0..n)
                    .map(|_| Ok(DraftCacheInfo { group_id: c.str()?, cached_version: c.u64()? }))
                    .collect::<Result<_>>()?;
                WireRequest::FetchCst { infos }
            }
            0x04 => WireRequest::AdvanceClock { now: f64::from_bits(c.u64()?) },
            op => return Err(Error::Wire(format!("unknown request op 0x{op:02x}"))),
        };
        c.finish()?;
        Ok(req)
    }
}

impl WireResponse {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Buf(Vec::new());
        match self {
            WireResponse::Ack { version } => {
                b.u8(0x81);
                b.u64(*version);
            }
            WireResponse::Resync { acknowledged, got } => {
                b.u8(0x82);
                b.u32(*acknowledged);
                b.u32(*got);
            }
            WireResponse::FetchResults(replies) => {
                b.u8(0x83);
                b.u32(replies.len() as u32);
                for r in replies {
                    match r {
                        FetchReply::UpToDate => b.u8(0),
                        FetchReply::Delta(d) | FetchReply::Full(d) => {
                            b.u8(if matches!(r, FetchReply::Delta(_)) { 1 } else { 2 });
                            let blob = d.encode();
                            b.u32(blob.len() as u32);
                            b.0.extend_from_slice(&blob);
                        }
                        FetchReply::UnknownGroup => b.u8(3),
                    }
                }
            }
            WireResponse::Ok => b.u8(0x84),
            WireResponse::Error(msg) => {
                b.u8(0xff);
                b.str(msg);
            }
        }
        b.0
    }

    pub fn decode(rec: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: rec, pos: 0 };
        let resp = match c.u8()? {
            0x81 => WireResponse::Ack { version: c.u64()? },
            0x82 => WireResponse::Resync { acknowledged: c.u32()?, got: c.u32()? },
            0x83 => {
                let n = c.count(1)?;
                let mut replies = Vec::with_capacity(n);
                for _ in 0..n {
                    let kind = c.u8()?;
                    replies.push(match kind {
                        0 => FetchReply::UpToDate,
                        1 | 2 => {
                            let len = c.u32()? as usize;
                            let d = DraftDelta::decode(c.take(len)?)?;
                            if kind == 1 {
                                FetchReply::Delta(d)
                            } else {
                                FetchReply::Full(d)
                            }
                        }
                        3 => FetchReply::UnknownGroup,
                        k => return Err(Error::Wire(format!("unknown fetch reply kind {k}"))),
                    });
                }
                WireResponse::FetchResults(replies)
            }
            0x84 => WireResponse::Ok,
            0xff => WireResponse::Error(c.str()?),
            op => return Err(Error::Wire(format!("unknown response op 0x{op:02x}"))),
        };
        c.finish()?;
        Ok(resp)
    }
}

pub fn write_frame<W: Write>(w: &mut W, record: &[u8]) -> Result<()> {
    w.write_all(&(record.len() as u32).to_be_bytes())?;
    w.write_all(record)?;
    w.flush()?;
    Ok(())
}

/// Read one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME {
        return Err(Error::Wire(format!("frame of {len} bytes exceeds limit")));
    }
    let mut rec = vec![0u8; len as usize];
    r.read_exact(&mut rec)?;
    Ok(Some(rec))
}

/// Execute one request against a server.
pub fn handle(server: &DraftServer, req: WireRequest) -> WireResponse {
    let res = match req {
        WireRequest::RegisterGroup { group_id, ttl_seconds } => {
            server.register_group(&group_id, ttl_seconds).map(|_| WireResponse::Ok)
        }
        WireRequest::UpdateCst { group_id, request_id, prev_token_count, new_tokens } => server
            .update_cst(&group_id, request_id, prev_token_count, &new_tokens)
            .map(|version| WireResponse::Ack { version }),
        WireRequest::FetchCst { infos } => {
            let ids: Vec<String> = infos.iter().map(|i| i.group_id.clone()).collect();
            server.fetch_cst(&ids, &infos).map(WireResponse::FetchResults)
        }
        WireRequest::AdvanceClock { now } => server.advance_clock(now).map(|_| WireResponse::Ok),
    };
    match res {
        Ok(r) => r,
        Err(Error::OutOfOrder { acknowledged, got }) => WireResponse::Resync { acknowledged, got },
        Err(e) => WireResponse::Error(e.to_string()),
    }
}

fn serve_connection(server: &DraftServer, stream: TcpStream) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(rec) = read_frame(&mut reader)? {
        let resp = match WireRequest::decode(&rec) {
            Ok(req) => handle(server, req),
            Err(e) => WireResponse::Error(e.to_string()),
        };
        write_frame(&mut writer, &resp.encode())?;
    }
    Ok(())
}

/// Accept connections forever, one thread per connection.
pub fn serve(listener: TcpListener, server: Arc<DraftServer>) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true).ok();
        let server = Arc::clone(&server);
        std::thread::spawn(move || {
            if let Err(e) = serve_connection(&server, stream) {
                log::warn!("draft server connection ended: {e}");
            }
        });
    }
    Ok(())
}

/// Client side of the framed transport.
#[derive(Debug)]
pub struct RemoteDraftService {
    conn: Mutex<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
}

impl RemoteDraftService {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true).ok();
        let reader = BufReader::new(stream.try_clone()?);
        Ok(RemoteDraftService { conn: Mutex::new((reader, BufWriter::new(stream))) })
    }

    fn call(&self, req: &WireRequest) -> Result<WireResponse> {
        let mut conn = self.conn.lock().expect("connection lock poisoned");
        let (reader, writer) = &mut *conn;
        write_frame(writer, &req.encode())?;
        let rec = read_frame(reader)?.ok_or_else(|| Error::Wire("server closed the connection".into()))?;
        WireResponse::decode(&rec)
    }
}

fn unexpected(r: WireResponse) -> Error {
    match r {
        WireResponse::Error(msg) => Error::Wire(msg),
        other => Error::Wire(format!("unexpected response {other:?}")),
    }
}

impl DraftService for RemoteDraftService {
    fn register_group(&self, group_id: &str, ttl_seconds: u32) -> Result<()> {
        match self.call(&WireRequest::RegisterGroup { group_id: group_id.into(), ttl_seconds })? {
            WireResponse::Ok => Ok(()),
            r => Err(unexpected(r)),
        }
    }

    fn update_cst(&self, group_id: &str, request_id: u32, prev_token_count: u32, new_tokens: &[TokenId]) -> Result<u64> {
        let req = WireRequest::UpdateCst {
            group_id: group_id.into(),
            request_id,
            prev_token_count,
            new_tokens: new_tokens.to_vec(),
        };
        match self.call(&req)? {
            WireResponse::Ack { version } => Ok(version),
            WireResponse::Resync { acknowledged, got } => Err(Error::OutOfOrder { acknowledged, got }),
            r => Err(unexpected(r)),
        }
    }

    fn fetch_cst(&self, group_ids: &[String], infos: &[DraftCacheInfo]) -> Result<Vec<FetchReply>> {
        if group_ids.len() != infos.len() {
            return Err(Error::Config("group_ids and draft_cache_infos differ in length".into()));
        }
        let infos = group_ids
            .iter()
            .zip(infos)
            .map(|(g, i)| DraftCacheInfo {
                group_id: g.clone(),
                cached_version: if i.group_id == *g { i.cached_version } else { 0 },
            })
            .collect();
        match self.call(&WireRequest::FetchCst { infos })? {
            WireResponse::FetchResults(r) => Ok(r),
            r => Err(unexpected(r)),
        }
    }

    fn advance_clock(&self, now: f64) -> Result<()> {
        match self.call(&WireRequest::AdvanceClock { now })? {
            WireResponse::Ok => Ok(()),
            r => Err(unexpected(r)),
        }
    }
}
