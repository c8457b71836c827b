//! On-disk formats: EVT1 event files (plus a CSV alternative), FLO1 flow
//! dumps, EVFICKPT checkpoints, binary PPM/PGM images and the key-value
//! run configuration. All binary formats are little-endian and round-trip
//! bitwise.

mod checkpoint;
mod events;
mod flo;
mod image;
mod runconfig;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use events::{read_events_csv, read_evt1, write_events_csv, write_evt1};
pub use flo::{read_flo, write_flo};
pub use image::{read_image, read_image_bytes, write_image, write_image_bytes};
pub use runconfig::{DatasetKind, EvalMode, RunConfig};

use crate::error::{Error, Result};

/// Little-endian cursor with byte offsets in error messages.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                format!("expected {n} bytes, only {} available", self.buf.len() - self.pos),
                Some(self.pos as u64),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8]) -> Result<()> {
        let at = self.offset();
        let got = self.take(expected.len())?;
        if got != expected {
            return Err(Error::format(
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(expected)),
                Some(at),
            ));
        }
        Ok(())
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i8(&mut self) -> Result<i8> {
        Ok(self.take(1)?[0] as i8)
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                format!("{} trailing bytes", self.buf.len() - self.pos),
                Some(self.pos as u64),
            ));
        }
        Ok(())
    }
}
