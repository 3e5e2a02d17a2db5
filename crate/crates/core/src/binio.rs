//! Little-endian helpers shared by the binary artifact codecs.

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::ParseError;

/// Cursor over an untrusted byte slice. Every read is bounds-checked and
/// reports which artifact was truncated.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub(crate) fn what(&self) -> &'static str {
        self.what
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], ParseError> {
        if self.remaining() < n {
            return Err(ParseError::Truncated {
                what: self.what,
                detail: format!(
                    "{field} needs {n} bytes at offset {}, only {} left",
                    self.pos,
                    self.remaining()
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<(), ParseError> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(ParseError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u16) -> Result<u16, ParseError> {
        let found = self.u16("version")?;
        if found != expected {
            return Err(ParseError::UnsupportedVersion {
                what: self.what,
                found,
                expected,
            });
        }
        Ok(found)
    }

    pub(crate) fn u8(&mut self, field: &str) -> Result<u8, ParseError> {
        Ok(self.take(1, field)?[0])
    }

    pub(crate) fn u16(&mut self, field: &str) -> Result<u16, ParseError> {
        Ok(LittleEndian::read_u16(self.take(2, field)?))
    }

    pub(crate) fn i16(&mut self, field: &str) -> Result<i16, ParseError> {
        Ok(LittleEndian::read_i16(self.take(2, field)?))
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32, ParseError> {
        Ok(LittleEndian::read_u32(self.take(4, field)?))
    }

    pub(crate) fn u64(&mut self, field: &str) -> Result<u64, ParseError> {
        Ok(LittleEndian::read_u64(self.take(8, field)?))
    }

    pub(crate) fn f64(&mut self, field: &str) -> Result<f64, ParseError> {
        Ok(LittleEndian::read_f64(self.take(8, field)?))
    }

    pub(crate) fn f64_vec(&mut self, n: usize, field: &str) -> Result<Vec<f64>, ParseError> {
        let bytes = self.take(checked_len(n, 8, self.what, field)?, field)?;
        Ok(bytes.chunks_exact(8).map(LittleEndian::read_f64).collect())
    }

    pub(crate) fn u16_vec(&mut self, n: usize, field: &str) -> Result<Vec<u16>, ParseError> {
        let bytes = self.take(checked_len(n, 2, self.what, field)?, field)?;
        Ok(bytes.chunks_exact(2).map(LittleEndian::read_u16).collect())
    }

    pub(crate) fn finish(self) -> Result<(), ParseError> {
        match self.remaining() {
            0 => Ok(()),
            count => Err(ParseError::TrailingBytes {
                what: self.what,
                count,
            }),
        }
    }

    pub(crate) fn malformed(&self, detail: impl Into<String>) -> ParseError {
        ParseError::Malformed {
            what: self.what,
            detail: detail.into(),
        }
    }
}

fn checked_len(n: usize, width: usize, what: &'static str, field: &str) -> Result<usize, ParseError> {
    n.checked_mul(width).ok_or_else(|| ParseError::Malformed {
        what,
        detail: format!("{field} length {n} overflows"),
    })
}

// Writes into a Vec<u8> cannot fail.
pub(crate) trait VecWrite {
    fn put_u8(&mut self, v: u8);
    fn put_u16(&mut self, v: u16);
    fn put_i16(&mut self, v: i16);
    fn put_u32(&mut self, v: u32);
    fn put_u64(&mut self, v: u64);
    fn put_f64(&mut self, v: f64);
}

impl VecWrite for Vec<u8> {
    fn put_u8(&mut self, v: u8) {
        self.push(v);
    }
    fn put_u16(&mut self, v: u16) {
        self.write_u16::<LittleEndian>(v).unwrap();
    }
    fn put_i16(&mut self, v: i16) {
        self.write_i16::<LittleEndian>(v).unwrap();
    }
    fn put_u32(&mut self, v: u32) {
        self.write_u32::<LittleEndian>(v).unwrap();
    }
    fn put_u64(&mut self, v: u64) {
        self.write_u64::<LittleEndian>(v).unwrap();
    }
    fn put_f64(&mut self, v: f64) {
        self.write_f64::<LittleEndian>(v).unwrap();
    }
}
