//! Little-endian cursor with offset-carrying errors.

use std::path::{Path, PathBuf};

use crate::error::OflError;

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8], path: &Path) -> Self {
        Self {
            data,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn error(&self, offset: u64, message: impl Into<String>) -> OflError {
        OflError::Format {
            path: self.path.clone(),
            offset,
            message: message.into(),
        }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], OflError> {
        if self.data.len() - self.pos < n {
            return Err(self.error(
                self.offset(),
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.data.len() - self.pos
                ),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, OflError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64, OflError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, OflError> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| self.error(self.offset(), "size overflow"))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, OflError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| self.error(self.offset(), "size overflow"))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
