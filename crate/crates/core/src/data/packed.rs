//! Packed split format: one file per dataset split holding fixed-size
//! records so any sample is addressable by index.
//!
//! Layout, all integers little-endian:
//!   magic "RSSLDATA" | version u32 | count u32 | height u16 | width u16
//!   then per record: id u32 | label i32 | height*width*3 RGB bytes.

use super::SampleRecord;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

pub const PACKED_MAGIC: &[u8; 8] = b"RSSLDATA";
pub const PACKED_VERSION: u32 = 1;

const HEADER_LEN: u64 = 8 + 4 + 4 + 2 + 2;

/// Read handle addressing records by index without loading the file.
#[derive(Debug)]
pub struct PackedDataset {
    file: File,
    path: PathBuf,
    count: u32,
    height: u16,
    width: u16,
}

impl PackedDataset {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut header).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: "file shorter than header".to_string(),
        })?;
        if &header[0..8] != PACKED_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "bad magic".to_string(),
            });
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != PACKED_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported version {version}"),
            });
        }
        let count = u32::from_le_bytes(header[12..16].try_into().unwrap());
        let height = u16::from_le_bytes(header[16..18].try_into().unwrap());
        let width = u16::from_le_bytes(header[18..20].try_into().unwrap());
        if height == 0 || width == 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "zero image dimensions".to_string(),
            });
        }
        let expected = HEADER_LEN + u64::from(count) * Self::record_len(height, width);
        let actual = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if actual != expected {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected {expected} bytes for {count} records, found {actual}"),
            });
        }
        Ok(PackedDataset {
            file,
            path: path.to_path_buf(),
            count,
            height,
            width,
        })
    }

    fn record_len(height: u16, width: u16) -> u64 {
        8 + u64::from(height) * u64::from(width) * 3
    }

    #[must_use]
    pub fn count(&self) -> usize {
        self.count as usize
    }

    #[must_use]
    pub fn height(&self) -> usize {
        usize::from(self.height)
    }

    #[must_use]
    pub fn width(&self) -> usize {
        usize::from(self.width)
    }

    #[must_use]
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read_record(&self, index: usize) -> Result<SampleRecord> {
        if index >= self.count as usize {
            return Err(Error::Shape(format!(
                "record {index} out of range (count {})",
                self.count
            )));
        }
        let rec_len = Self::record_len(self.height, self.width);
        let offset = HEADER_LEN + index as u64 * rec_len;
        let mut buf = vec![0u8; rec_len as usize];
        self.file
            .read_exact_at(&mut buf, offset)
            .map_err(|e| Error::io(&self.path, e))?;
        let id = u32::from_le_bytes(buf[0..4].try_into().unwrap());
        let label = i32::from_le_bytes(buf[4..8].try_into().unwrap());
        buf.drain(0..8);
        Ok(SampleRecord {
            id,
            label,
            pixels: buf,
        })
    }

    /// Labels of every record in index order, without pixel I/O per call.
    pub fn read_labels(&self) -> Result<Vec<i32>> {
        (0..self.count as usize)
            .map(|i| {
                let rec_len = Self::record_len(self.height, self.width);
                let offset = HEADER_LEN + i as u64 * rec_len;
                let mut buf = [0u8; 8];
                self.file
                    .read_exact_at(&mut buf, offset)
                    .map_err(|e| Error::io(&self.path, e))?;
                Ok(i32::from_le_bytes(buf[4..8].try_into().unwrap()))
            })
            .collect()
    }
}

/// Streaming writer that records the SHA-256 of everything written.
pub struct PackedWriter {
    out: BufWriter<File>,
    hasher: sha2::Sha256,
    path: PathBuf,
    height: u16,
    width: u16,
    written: u32,
    declared: u32,
}

impl PackedWriter {
    pub fn create(path: &Path, count: u32, height: u16, width: u16) -> Result<Self> {
        use sha2::Digest;
        if height == 0 || width == 0 {
            return Err(Error::Config("image dimensions must be positive".to_string()));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = PackedWriter {
            out: BufWriter::new(file),
            hasher: sha2::Sha256::new(),
            path: path.to_path_buf(),
            height,
            width,
            written: 0,
            declared: count,
        };
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(PACKED_MAGIC);
        header.extend_from_slice(&PACKED_VERSION.to_le_bytes());
        header.extend_from_slice(&count.to_le_bytes());
        header.extend_from_slice(&height.to_le_bytes());
        header.extend_from_slice(&width.to_le_bytes());
        w.write_raw(&header)?;
        Ok(w)
    }

    fn write_raw(&mut self, bytes: &[u8]) -> Result<()> {
        use sha2::Digest;
        self.out
            .write_all(bytes)
            .map_err(|e| Error::io(&self.path, e))?;
        self.hasher.update(bytes);
        Ok(())
    }

    pub fn write_record(&mut self, id: u32, label: i32, pixels: &[u8]) -> Result<()> {
        let expect = usize::from(self.height) * usize::from(self.width) * 3;
        if pixels.len() != expect {
            return Err(Error::Shape(format!(
                "record pixel buffer holds {} bytes, expected {expect}",
                pixels.len()
            )));
        }
        if self.written == self.declared {
            return Err(Error::Format {
                path: self.path.clone(),
                reason: format!("more records than the declared count {}", self.declared),
            });
        }
        let mut head = [0u8; 8];
        head[0..4].copy_from_slice(&id.to_le_bytes());
        head[4..8].copy_from_slice(&label.to_le_bytes());
        self.write_raw(&head)?;
        self.write_raw(pixels)?;
        self.written += 1;
        Ok(())
    }

    /// Flushes and returns the hex SHA-256 of the complete file.
    pub fn finish(mut self) -> Result<String> {
        use sha2::Digest;
        if self.written != self.declared {
            return Err(Error::Format {
                path: self.path.clone(),
                reason: format!(
                    "wrote {} records but declared {}",
                    self.written, self.declared
                ),
            });
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(super::hex_string(&self.hasher.finalize()))
    }
}
