//! Binary embedding shard format (`.unic` files).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "UNIC"
//! 4       2     format version (currently 1)
//! 6       4     dim (u32)
//! 10      8     count (u64)
//! 18      1     modality code
//! 19      1     normalized flag (0 or 1)
//! 20      4*dim*count   payload: row-major IEEE-754 f32
//! end     8     CRC-64/XZ of the payload bytes
//! ```
//!
//! The checksum is CRC-64/XZ (reflected, polynomial 0x42F0E1EBA9EA3693,
//! init and xorout all-ones); `crc64("123456789") = 0x995DC9BBDF1939FA`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::embedding::Modality;

pub const SHARD_MAGIC: [u8; 4] = *b"UNIC";
pub const SHARD_VERSION: u16 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u16,
    pub dim: u32,
    pub count: u64,
    pub modality: Modality,
    pub normalized: bool,
}

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {got:?}, expected {expected:?}")]
    BadMagic { path: String, got: [u8; 4], expected: [u8; 4] },
    #[error("{path}: unsupported format version {got}")]
    BadVersion { path: String, got: u16 },
    #[error("{path}: unknown modality code {got}")]
    BadModality { path: String, got: u8 },
    #[error("{path}: payload length mismatch: header implies {expected} bytes, file holds {got}")]
    PayloadLength { path: String, expected: u64, got: u64 },
    #[error("{path}: checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { path: String, stored: u64, computed: u64 },
    #[error("{path}: row {row} has {got} entries, expected dim {dim}")]
    RowDim { path: String, row: usize, got: usize, dim: u32 },
}

/// Write one shard file. Rows must all have length `header.dim`.
pub fn write_shard(path: &Path, header: &ShardHeader, rows: &[Vec<f32>]) -> Result<(), ShardError> {
    let io_err = |e| ShardError::Io {
        path: path.display().to_string(),
        source: e,
    };
    for (row, values) in rows.iter().enumerate() {
        if values.len() != header.dim as usize {
            return Err(ShardError::RowDim {
                path: path.display().to_string(),
                row,
                got: values.len(),
                dim: header.dim,
            });
        }
    }
    debug_assert_eq!(rows.len() as u64, header.count);

    let mut payload = Vec::with_capacity(rows.len() * header.dim as usize * 4);
    for values in rows {
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = crc64_xz(&payload);

    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(&SHARD_MAGIC).map_err(io_err)?;
    w.write_all(&header.version.to_le_bytes()).map_err(io_err)?;
    w.write_all(&header.dim.to_le_bytes()).map_err(io_err)?;
    w.write_all(&header.count.to_le_bytes()).map_err(io_err)?;
    w.write_all(&[header.modality.code()]).map_err(io_err)?;
    w.write_all(&[u8::from(header.normalized)]).map_err(io_err)?;
    w.write_all(&payload).map_err(io_err)?;
    w.write_all(&checksum.to_le_bytes()).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Read and fully validate one shard file.
pub fn read_shard(path: &Path) -> Result<(ShardHeader, Vec<Vec<f32>>), ShardError> {
    let io_err = |e| ShardError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let display = path.display().to_string();
    let file = File::open(path).map_err(io_err)?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(io_err)?;

    if bytes.len() < HEADER_LEN + 8 {
        return Err(ShardError::PayloadLength {
            path: display,
            expected: (HEADER_LEN + 8) as u64,
            got: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != SHARD_MAGIC {
        return Err(ShardError::BadMagic {
            path: display,
            got: magic,
            expected: SHARD_MAGIC,
        });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != SHARD_VERSION {
        return Err(ShardError::BadVersion { path: display, got: version });
    }
    let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let modality_code = bytes[18];
    let modality = Modality::from_code(modality_code).ok_or(ShardError::BadModality {
        path: display.clone(),
        got: modality_code,
    })?;
    let normalized = bytes[19] != 0;

    let payload_len = count
        .checked_mul(u64::from(dim))
        .and_then(|n| n.checked_mul(4))
        .unwrap_or(u64::MAX);
    let expected_total = HEADER_LEN as u64 + payload_len + 8;
    if bytes.len() as u64 != expected_total {
        return Err(ShardError::PayloadLength {
            path: display,
            expected: expected_total,
            got: bytes.len() as u64,
        });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len as usize];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = crc64_xz(payload);
    if stored != computed {
        return Err(ShardError::Checksum {
            path: display,
            stored,
            computed,
        });
    }

    let dim_usize = dim as usize;
    let mut rows = Vec::with_capacity(count as usize);
    for r in 0..count as usize {
        let start = r * dim_usize * 4;
        let mut row = Vec::with_capacity(dim_usize);
        for c in 0..dim_usize {
            let off = start + c * 4;
            row.push(f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()));
        }
        rows.push(row);
    }
    Ok((
        ShardHeader {
            version,
            dim,
            count,
            modality,
            normalized,
        },
        rows,
    ))
}

/// CRC-64/XZ over `bytes`.
pub fn crc64_xz(bytes: &[u8]) -> u64 {
    let table = crc64_table();
    let mut crc: u64 = !0;
    for b in bytes {
        let idx = ((crc ^ u64::from(*b)) & 0xFF) as usize;
        crc = table[idx] ^ (crc >> 8);
    }
    !crc
}

fn crc64_table() -> &'static [u64; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[u64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        // Reflected form of polynomial 0x42F0E1EBA9EA3693.
        const POLY_REFLECTED: u64 = 0xC96C_5795_D787_0F42;
        let mut table = [0u64; 256];
        let mut i = 0usize;
        while i < 256 {
            let mut crc = i as u64;
            let mut bit = 0;
            while bit < 8 {
                crc = if crc & 1 == 1 {
                    (crc >> 1) ^ POLY_REFLECTED
                } else {
                    crc >> 1
                };
                bit += 1;
            }
            table[i] = crc;
            i += 1;
        }
        table
    })
}
