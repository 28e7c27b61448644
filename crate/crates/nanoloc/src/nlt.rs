//! On-disk binary formats, little-endian throughout, CRC32-trailed.
//!
//! Pair datasets (`NLT1`):
//!
//! ```text
//! magic "NLT1" | u32 version | u32 crop_px | f32 pixel_size_nm | f32 delta_nm | u64 count
//! per sample: u64 particle_id | u8 split (0 train, 1 test) | f32 dz_label_nm
//!             | f32 bottom_z_stage_nm | crop^2 f32 bottom | crop^2 f32 top
//! u32 crc32 of all preceding bytes
//! ```
//!
//! Stack runs (`NLS1`) reuse the same conventions with per-frame records:
//!
//! ```text
//! magic "NLS1" | u32 version | u32 crop_px | f32 pixel_size_nm | f32 z_step_nm | u64 count
//! per frame: u64 particle_id | f32 z_stage_nm | f32 z_actual_nm | crop^2 f32 pixels
//! u32 crc32
//! ```
//!
//! Model checkpoints (`NLM1`) are defined in [`crate::nn::checkpoint`].

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pairs::{PairDataset, PairSample, Split};

pub const DATASET_MAGIC: [u8; 4] = *b"NLT1";
pub const STACKS_MAGIC: [u8; 4] = *b"NLS1";
pub const FORMAT_VERSION: u32 = 1;

/// Byte builder that tracks the running checksum.
pub(crate) struct Builder {
    bytes: Vec<u8>,
}

impl Builder {
    pub fn new(capacity: usize) -> Self {
        Builder {
            bytes: Vec::with_capacity(capacity),
        }
    }
    pub fn raw(&mut self, b: &[u8]) {
        self.bytes.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.raw(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.raw(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.raw(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, vs: &[f32]) {
        for &v in vs {
            self.raw(&v.to_le_bytes());
        }
    }
    /// Append the CRC32 of everything so far and return the buffer.
    pub fn seal(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.bytes);
        self.u32(crc);
        self.bytes
    }
}

/// Cursor over a fully loaded file with truncation-aware reads.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8], path: &Path) -> Self {
        Cursor {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    fn take(&mut self, n: usize, reading: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedFile {
                path: self.path.clone(),
                offset: self.pos as u64,
                reading,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, reading: &'static str) -> Result<u8> {
        Ok(self.take(1, reading)?[0])
    }
    pub fn u32(&mut self, reading: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, reading)?.try_into().unwrap()))
    }
    pub fn u64(&mut self, reading: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, reading)?.try_into().unwrap()))
    }
    pub fn f32(&mut self, reading: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, reading)?.try_into().unwrap()))
    }
    pub fn f64(&mut self, reading: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, reading)?.try_into().unwrap()))
    }
    pub fn f32s(&mut self, n: usize, reading: &'static str) -> Result<Vec<f32>> {
        let raw = self.take(4 * n, reading)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let got: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if got != expected {
            return Err(Error::BadMagic {
                path: self.path.clone(),
                got,
                expected,
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let got = self.u32("version")?;
        if got != expected {
            return Err(Error::VersionMismatch {
                path: self.path.clone(),
                got,
                expected,
            });
        }
        Ok(())
    }

    /// Structural length check followed by checksum verification. Call after
    /// the header is parsed so magic/version problems are reported first.
    pub fn verify_body(&self, record_bytes: u64, count: u64) -> Result<()> {
        let expected = self.pos as u64 + record_bytes.checked_mul(count).unwrap_or(u64::MAX) + 4;
        let actual = self.bytes.len() as u64;
        if actual < expected {
            return Err(Error::TruncatedFile {
                path: self.path.clone(),
                offset: actual,
                reading: "records",
            });
        }
        if actual > expected {
            return Err(Error::CorruptRecord {
                path: self.path.clone(),
                what: format!("{} trailing bytes after checksum", actual - expected),
            });
        }
        let body = &self.bytes[..self.bytes.len() - 4];
        let stored = u32::from_le_bytes(self.bytes[self.bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch {
                path: self.path.clone(),
                stored,
                computed,
            });
        }
        Ok(())
    }

    pub fn corrupt(&self, what: impl Into<String>) -> Error {
        Error::CorruptRecord {
            path: self.path.clone(),
            what: what.into(),
        }
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serialize a dataset to bytes (exposed for byte-equality tests).
pub fn dataset_to_bytes(ds: &PairDataset) -> Vec<u8> {
    let frame = ds.frame_len();
    let record = 8 + 1 + 4 + 4 + 2 * 4 * frame;
    let mut b = Builder::new(28 + ds.len() * record + 4);
    b.raw(&DATASET_MAGIC);
    b.u32(FORMAT_VERSION);
    b.u32(ds.crop_px);
    b.f32(ds.pixel_size_nm);
    b.f32(ds.delta_nm);
    b.u64(ds.len() as u64);
    for (sample, split) in ds.samples.iter().zip(&ds.splits) {
        b.u64(sample.particle_id);
        b.u8(*split as u8);
        b.f32(sample.dz_label_nm);
        b.f32(sample.bottom_z_stage_nm);
        b.f32s(&sample.bottom_px);
        b.f32s(&sample.top_px);
    }
    b.seal()
}

pub fn save_dataset(ds: &PairDataset, path: &Path) -> Result<()> {
    for sample in &ds.samples {
        debug_assert_eq!(sample.bottom_px.len(), ds.frame_len());
        debug_assert_eq!(sample.top_px.len(), ds.frame_len());
    }
    write_atomic(path, &dataset_to_bytes(ds))
}

pub fn load_dataset(path: &Path) -> Result<PairDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    dataset_from_bytes(&bytes, path)
}

pub fn dataset_from_bytes(bytes: &[u8], path: &Path) -> Result<PairDataset> {
    let mut c = Cursor::new(bytes, path);
    c.magic(DATASET_MAGIC)?;
    c.version(FORMAT_VERSION)?;
    let crop_px = c.u32("crop_px")?;
    let pixel_size_nm = c.f32("pixel_size_nm")?;
    let delta_nm = c.f32("delta_nm")?;
    let count = c.u64("sample count")?;

    let frame = (crop_px as u64) * (crop_px as u64);
    let record = 8 + 1 + 4 + 4 + 2 * 4 * frame;
    c.verify_body(record, count)?;

    let mut samples = Vec::with_capacity(count as usize);
    let mut splits = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let particle_id = c.u64("particle_id")?;
        let split = match c.u8("split tag")? {
            0 => Split::Train,
            1 => Split::Test,
            other => return Err(c.corrupt(format!("split tag {other}"))),
        };
        let dz_label_nm = c.f32("dz_label_nm")?;
        let bottom_z_stage_nm = c.f32("bottom_z_stage_nm")?;
        let bottom_px = c.f32s(frame as usize, "bottom pixels")?;
        let top_px = c.f32s(frame as usize, "top pixels")?;
        samples.push(PairSample {
            particle_id,
            dz_label_nm,
            bottom_z_stage_nm,
            bottom_px,
            top_px,
        });
        splits.push(split);
    }

    Ok(PairDataset {
        delta_nm,
        crop_px,
        pixel_size_nm,
        samples,
        splits,
    })
}

/// One frame record of a stack run file.
#[derive(Debug, Clone, PartialEq)]
pub struct StackRecord {
    pub particle_id: u64,
    pub z_stage_nm: f32,
    pub z_actual_nm: f32,
    pub pixels: Vec<f32>,
}

/// Flat frame store for a simulation run; frames of one particle are
/// consecutive and ordered by depth.
#[derive(Debug, Clone, PartialEq)]
pub struct StackFile {
    pub crop_px: u32,
    pub pixel_size_nm: f32,
    pub z_step_nm: f32,
    pub records: Vec<StackRecord>,
}

pub fn stacks_to_bytes(sf: &StackFile) -> Vec<u8> {
    let frame = (sf.crop_px as usize) * (sf.crop_px as usize);
    let record = 8 + 4 + 4 + 4 * frame;
    let mut b = Builder::new(28 + sf.records.len() * record + 4);
    b.raw(&STACKS_MAGIC);
    b.u32(FORMAT_VERSION);
    b.u32(sf.crop_px);
    b.f32(sf.pixel_size_nm);
    b.f32(sf.z_step_nm);
    b.u64(sf.records.len() as u64);
    for r in &sf.records {
        b.u64(r.particle_id);
        b.f32(r.z_stage_nm);
        b.f32(r.z_actual_nm);
        b.f32s(&r.pixels);
    }
    b.seal()
}

pub fn save_stacks(sf: &StackFile, path: &Path) -> Result<()> {
    write_atomic(path, &stacks_to_bytes(sf))
}

pub fn load_stacks(path: &Path) -> Result<StackFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor::new(&bytes, path);
    c.magic(STACKS_MAGIC)?;
    c.version(FORMAT_VERSION)?;
    let crop_px = c.u32("crop_px")?;
    let pixel_size_nm = c.f32("pixel_size_nm")?;
    let z_step_nm = c.f32("z_step_nm")?;
    let count = c.u64("frame count")?;

    let frame = (crop_px as u64) * (crop_px as u64);
    let record = 8 + 4 + 4 + 4 * frame;
    c.verify_body(record, count)?;

    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let particle_id = c.u64("particle_id")?;
        let z_stage_nm = c.f32("z_stage_nm")?;
        let z_actual_nm = c.f32("z_actual_nm")?;
        let pixels = c.f32s(frame as usize, "pixels")?;
        records.push(StackRecord {
            particle_id,
            z_stage_nm,
            z_actual_nm,
            pixels,
        });
    }
    Ok(StackFile {
        crop_px,
        pixel_size_nm,
        z_step_nm,
        records,
    })
}
