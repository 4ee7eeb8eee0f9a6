//! Self-describing byte format for draft index synchronization.
//!
//! All integers are big-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GDLT"
//! 4       2     format version (1)
//! 6       1     kind: 0 = incremental, 1 = full snapshot
//! 7       2     group id length G
//! 9       G     group id, UTF-8
//! 9+G     8     base version
//! 17+G    8     target version
//! 25+G    4     entry count N
//! then N entries:
//!         4     request id
//!         4     prev token count
//!         4     token count T
//!         4*T   tokens
//! ```

use crate::error::{Error, Result};
use crate::workload::TokenId;

pub const DELTA_MAGIC: [u8; 4] = *b"GDLT";
pub const DELTA_FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaKind {
    Incremental,
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DraftDelta {
    pub group_id: String,
    pub kind: DeltaKind,
    pub base_version: u64,
    pub target_version: u64,
    /// (request id, prev token count, tokens)
    pub entries: Vec<(u32, u32, Vec<TokenId>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeltaOutcome {
    Delta(DraftDelta),
    /// The requested base version is not covered by retained history.
    FullRequired,
}

impl DraftDelta {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encoded_len(&self) -> usize {
        29 + self.group_id.len() + self.entries.iter().map(|e| 12 + 4 * e.2.len()).sum::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&DELTA_MAGIC);
        out.extend_from_slice(&DELTA_FORMAT_VERSION.to_be_bytes());
        out.push(match self.kind {
            DeltaKind::Incremental => 0,
            DeltaKind::Full => 1,
        });
        out.extend_from_slice(&(self.group_id.len() as u16).to_be_bytes());
        out.extend_from_slice(self.group_id.as_bytes());
        out.extend_from_slice(&self.base_version.to_be_bytes());
        out.extend_from_slice(&self.target_version.to_be_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for (r, prev, toks) in &self.entries {
            out.extend_from_slice(&r.to_be_bytes());
            out.extend_from_slice(&prev.to_be_bytes());
            out.extend_from_slice(&(toks.len() as u32).to_be_bytes());
            for t in toks {
                out.extend_from_slice(&t.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != DELTA_MAGIC {
            return Err(Error::Delta("bad magic".into()));
        }
        let format = r.u16()?;
        if format != DELTA_FORMAT_VERSION {
            return Err(Error::Delta(format!("unsupported format version {format}")));
        }
        let kind = match r.u8()? {
            0 => DeltaKind::Incremental,
            1 => DeltaKind::Full,
            k => return Err(Error::Delta(format!("unknown kind {k}"))),
        };
        let glen = r.u16()? as usize;
        let group_id = String::from_utf8(r.take(glen)?.to_vec())
            .map_err(|_| Error::Delta("group id is not UTF-8".into()))?;
        let base_version = r.u64()?;
        let target_version = r.u64()?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let req = r.u32()?;
            let prev = r.u32()?;
            let t = r.u32()? as usize;
            if t > r.remaining() / 4 {
                return Err(Error::Delta("token count exceeds payload".into()));
            }
            let toks = (0..t).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            entries.push((req, prev, toks));
        }
        if r.remaining() != 0 {
            return Err(Error::Delta(format!("{} trailing bytes", r.remaining())));
        }
        if target_version < base_version {
            return Err(Error::Delta("target version precedes base version".into()));
        }
        Ok(DraftDelta { group_id, kind, base_version, target_version, entries })
    }
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Delta("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_fixed() {
        let d = DraftDelta {
            group_id: "ab".into(),
            kind: DeltaKind::Incremental,
            base_version: 1,
            target_version: 2,
            entries: vec![(7, 3, vec![9])],
        };
        let b = d.encode();
        assert_eq!(b.len(), d.encoded_len());
        assert_eq!(
            b,
            [
                b"GDLT".as_slice(),
                &[0, 1, 0, 0, 2, b'a', b'b'],
                &[0, 0, 0, 0, 0, 0, 0, 1],
                &[0, 0, 0, 0, 0, 0, 0, 2],
                &[0, 0, 0, 1],
                &[0, 0, 0, 7, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0, 9],
            ]
            .concat()
        );
    }

    #[test]
    fn rejects_garbage() {
        assert!(DraftDelta::decode(b"nope").is_err());
        let mut b = DraftDelta {
            group_id: "g".into(),
            kind: DeltaKind::Full,
            base_version: 0,
            target_version: 1,
            entries: vec![],
        }
        .encode();
        b.push(0);
        assert!(DraftDelta::decode(&b).is_err());
        b.pop();
        b[6] = 5;
        assert!(DraftDelta::decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(
            gid in "[a-z0-9#]{0,12}",
            full in any::<bool>(),
            base in 0u64..1000,
            span in 0u64..1000,
            entries in prop::collection::vec((any::<u32>(), any::<u32>(), prop::collection::vec(any::<u32>(), 0..20)), 0..6),
        ) {
            let d = DraftDelta {
                group_id: gid,
                kind: if full { DeltaKind::Full } else { DeltaKind::Incremental },
                base_version: base,
                target_version: base + span,
                entries,
            };
            prop_assert_eq!(DraftDelta::decode(&d.encode()).unwrap(), d);
        }
    }
}
