//! Little-endian binary helpers shared by the corpus, checkpoint and sample
//! set formats.

use crate::error::{Error, Result};
use crate::tape::Mat;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    /// `rows u32 | cols u32 | data`
    pub fn mat(&mut self, m: &Mat) {
        self.u32(m.rows as u32);
        self.u32(m.cols as u32);
        self.f64s(&m.data);
    }

    /// Length-prefixed nested record.
    pub fn record(&mut self, inner: Writer) {
        self.u64(inner.buf.len() as u64);
        self.bytes(&inner.buf);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a byte slice; every error names the context being decoded.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    context: String,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], context: impl Into<String>) -> Self {
        Reader {
            buf,
            pos: 0,
            context: context.into(),
        }
    }

    pub fn rename(&mut self, context: String) {
        self.context = context;
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "{}: truncated (needed {n} bytes at offset {}, {} left)",
                self.context,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self
            .take(4)
            .map_err(|_| Error::Format(format!("{}: file too short for magic bytes", self.context)))?;
        if got != expected {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.context,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format(format!("{}: length overflow", self.context)))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format(format!("{}: invalid utf-8 string", self.context)))
    }

    pub fn mat(&mut self) -> Result<Mat> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let data = self.f64s(rows * cols)?;
        Ok(Mat::from_vec(rows, cols, data))
    }

    /// Reader over the next length-prefixed record.
    pub fn record(&mut self, context: &str) -> Result<Reader<'a>> {
        let len = self
            .u64()
            .map_err(|_| Error::Format(format!("{context}: truncated record header")))? as usize;
        let body = self
            .take(len)
            .map_err(|_| Error::Format(format!("{context}: truncated record body")))?;
        Ok(Reader::new(body, context))
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.context,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
