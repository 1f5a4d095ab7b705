//! 2-byte type, 2-byte length TLV primitives, big-endian.
//!
//! Shared by the packet codec, the manifest codec, and the configuration
//! encoding carried in `/vm-name/config` objects.

use alloc::vec::Vec;

use thiserror::Error;

pub const HEADER_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TlvError {
    #[error("TLV truncated")]
    Truncated,
    #[error("TLV value of {0} bytes exceeds 16-bit length")]
    TooLong(usize),
}

#[derive(Debug, Default, Clone)]
pub struct TlvWriter {
    buf: Vec<u8>,
}

impl TlvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(cap: usize) -> Self {
        TlvWriter {
            buf: Vec::with_capacity(cap),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn put(&mut self, typ: u16, value: &[u8]) -> Result<(), TlvError> {
        let len = u16::try_from(value.len()).map_err(|_| TlvError::TooLong(value.len()))?;
        self.buf.extend_from_slice(&typ.to_be_bytes());
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(value);
        Ok(())
    }

    /// Starts a nested TLV; pass the returned mark to [`TlvWriter::close`].
    pub fn open(&mut self, typ: u16) -> usize {
        let mark = self.buf.len();
        self.buf.extend_from_slice(&typ.to_be_bytes());
        self.buf.extend_from_slice(&[0, 0]);
        mark
    }

    pub fn close(&mut self, mark: usize) -> Result<(), TlvError> {
        let value_len = self.buf.len() - mark - HEADER_LEN;
        let len = u16::try_from(value_len).map_err(|_| TlvError::TooLong(value_len))?;
        self.buf[mark + 2..mark + 4].copy_from_slice(&len.to_be_bytes());
        Ok(())
    }

    pub fn raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Iterates the TLVs at one nesting level.
#[derive(Debug, Clone)]
pub struct TlvReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> TlvReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        TlvReader { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub fn read(&mut self) -> Result<Option<(u16, &'a [u8])>, TlvError> {
        if self.is_empty() {
            return Ok(None);
        }
        let rest = &self.buf[self.pos..];
        if rest.len() < HEADER_LEN {
            return Err(TlvError::Truncated);
        }
        let typ = u16::from_be_bytes([rest[0], rest[1]]);
        let len = u16::from_be_bytes([rest[2], rest[3]]) as usize;
        let value = rest
            .get(HEADER_LEN..HEADER_LEN + len)
            .ok_or(TlvError::Truncated)?;
        self.pos += HEADER_LEN + len;
        Ok(Some((typ, value)))
    }
}

/// Big-endian fixed-width field readers over a byte slice.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Cursor { buf }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.buf.len() < n {
            return None;
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Some(head)
    }

    pub(crate) fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| {
            let mut a = [0u8; 8];
            a.copy_from_slice(b);
            u64::from_be_bytes(a)
        })
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_write_and_read() {
        let mut w = TlvWriter::new();
        let m = w.open(0x0002);
        w.put(0x0001, b"abc").unwrap();
        w.close(m).unwrap();
        let bytes = w.into_inner();
        assert_eq!(bytes, [0, 2, 0, 7, 0, 1, 0, 3, b'a', b'b', b'c']);

        let mut r = TlvReader::new(&bytes);
        let (t, v) = r.read().unwrap().unwrap();
        assert_eq!(t, 2);
        let mut inner = TlvReader::new(v);
        assert_eq!(inner.read().unwrap(), Some((1, &b"abc"[..])));
        assert_eq!(inner.read().unwrap(), None);
        assert_eq!(r.read().unwrap(), None);
    }

    #[test]
    fn truncated_value() {
        let bytes = [0, 1, 0, 5, 1, 2];
        assert_eq!(TlvReader::new(&bytes).read(), Err(TlvError::Truncated));
        assert_eq!(TlvReader::new(&bytes[..3]).read(), Err(TlvError::Truncated));
    }

    #[test]
    fn oversized_value_rejected() {
        let big = alloc::vec![0u8; 70_000];
        assert_eq!(
            TlvWriter::new().put(1, &big),
            Err(TlvError::TooLong(70_000))
        );
    }
}
