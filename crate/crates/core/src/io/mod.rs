//! Persistent formats. Numeric fields are little-endian except IDX headers,
//! which are big-endian.

mod config;
mod dataset;
mod model;
mod report;

use std::path::Path;

pub use config::{format_profile, parse_profile, CampaignConfig, Delivery, KeyValues, SearchMode};
pub use dataset::{
    class_mean, decode_idx, decode_idx_images, decode_idx_labels, encode_idx_images, encode_idx_labels, load_idx, synth_dataset,
    synth_dataset_with_spread, Dataset,
};
pub use model::{
    decode_fixture, decode_model, encode_fixture, encode_model, load_fixture, load_model, save_fixture, save_model, FixtureItem,
    ReferenceFixture,
};
pub use report::{
    calibration_csv, confusion_csv, ga_trace_csv, read_trials_jsonl, sensitivity_csv, summary_csv, trials_jsonl, Provenance,
};

use crate::error::FormatError;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    std::fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Bounds-checked cursor that reports offsets in its errors.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn magic(&mut self, expected: &[u8]) -> Result<(), FormatError> {
        let offset = self.pos;
        let found = self.take(expected.len())?;
        if found != expected {
            return Err(FormatError::BadMagic {
                found: found.to_vec(),
                expected: expected.to_vec(),
                offset,
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u16_le(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32_le(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64_le(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32_be(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub(crate) fn f32s_le(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).unwrap_or(usize::MAX))?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect())
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(FormatError::TrailingBytes {
                offset: self.pos,
                trailing: self.buf.len() - self.pos,
            })
        }
    }
}
