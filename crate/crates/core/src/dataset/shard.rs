//! Binary shard format for EditTriplets.
//!
//! Little-endian layout. Header: magic "EVD1", u32 version = 1, u64
//! record_count. Each record: u32 instruction_len, instruction UTF-8,
//! u32 x 4 video_in dims (T,C,H,W), f32 data, u32 x 4 video_out dims, f32
//! data, u8 source_tag, u64 seed, u32 CRC32 of the record body (all record
//! bytes before the checksum).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crc32fast::Hasher;
use thiserror::Error;

use crate::augment::{EditTriplet, SourceTag};
use crate::numkit::Tensor;

pub const SHARD_MAGIC: &[u8; 4] = b"EVD1";
pub const SHARD_VERSION: u32 = 1;
pub const MAX_INSTRUCTION_BYTES: usize = 4096;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt shard: bad magic")]
    BadMagic,
    #[error("corrupt shard: unsupported version {0}")]
    BadVersion(u32),
    #[error("corrupt shard: record {record} truncated")]
    Truncated { record: usize },
    #[error("corrupt shard: CRC mismatch on record {record}")]
    CrcMismatch { record: usize },
    #[error("record {record}: instruction length {len} exceeds {MAX_INSTRUCTION_BYTES}")]
    InstructionTooLong { record: usize, len: usize },
    #[error("record {record}: instruction is not valid UTF-8")]
    BadUtf8 { record: usize },
    #[error("record {record}: unknown source tag {tag}")]
    BadSourceTag { record: usize, tag: u8 },
    #[error("record {record}: non-finite pixel value")]
    NonFinitePixel { record: usize },
    #[error("record {record}: invalid video shape")]
    BadShape { record: usize },
}

fn encode_video(buf: &mut Vec<u8>, video: &Tensor) {
    for &d in video.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in video.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize one record (body + CRC trailer) into `buf`.
fn encode_record(buf: &mut Vec<u8>, t: &EditTriplet, record: usize) -> Result<(), ShardError> {
    if t.instruction.len() > MAX_INSTRUCTION_BYTES {
        return Err(ShardError::InstructionTooLong { record, len: t.instruction.len() });
    }
    if t.video_in.shape().len() != 4 || t.video_out.shape().len() != 4 {
        return Err(ShardError::BadShape { record });
    }
    if t.video_in.data().iter().chain(t.video_out.data()).any(|v| !v.is_finite()) {
        return Err(ShardError::NonFinitePixel { record });
    }
    let body_start = buf.len();
    buf.extend_from_slice(&(t.instruction.len() as u32).to_le_bytes());
    buf.extend_from_slice(t.instruction.as_bytes());
    encode_video(buf, &t.video_in);
    encode_video(buf, &t.video_out);
    buf.push(t.source_tag.to_byte());
    buf.extend_from_slice(&t.seed.to_le_bytes());
    let mut hasher = Hasher::new();
    hasher.update(&buf[body_start..]);
    buf.extend_from_slice(&hasher.finalize().to_le_bytes());
    Ok(())
}

/// Serialize a full shard to bytes; useful for byte-equality tests.
pub fn shard_bytes(records: &[EditTriplet]) -> Result<Vec<u8>, ShardError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SHARD_MAGIC);
    buf.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (record, t) in records.iter().enumerate() {
        encode_record(&mut buf, t, record)?;
    }
    Ok(buf)
}

/// Write records in order; returns the record count.
pub fn write_shard(path: &Path, records: &[EditTriplet]) -> Result<u64, ShardError> {
    let bytes = shard_bytes(records)?;
    let mut f = fs::File::create(path).map_err(|source| ShardError::Io { path: path.into(), source })?;
    f.write_all(&bytes).map_err(|source| ShardError::Io { path: path.into(), source })?;
    Ok(records.len() as u64)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, record: usize) -> Result<&'a [u8], ShardError> {
        if self.pos + n > self.buf.len() {
            return Err(ShardError::Truncated { record });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, record: usize) -> Result<u32, ShardError> {
        Ok(u32::from_le_bytes(self.take(4, record)?.try_into().unwrap()))
    }

    fn u64(&mut self, record: usize) -> Result<u64, ShardError> {
        Ok(u64::from_le_bytes(self.take(8, record)?.try_into().unwrap()))
    }
}

fn decode_video(cur: &mut Cursor, record: usize) -> Result<Tensor, ShardError> {
    let mut shape = Vec::with_capacity(4);
    for _ in 0..4 {
        shape.push(cur.u32(record)? as usize);
    }
    let numel: usize = shape.iter().product();
    if shape.iter().any(|&d| d == 0) {
        return Err(ShardError::BadShape { record });
    }
    let raw = cur.take(numel * 4, record)?;
    let data: Vec<f32> =
        raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|_| ShardError::NonFinitePixel { record })
}

/// One record's decode, CRC verified. `strict_crc=false` reports the flag
/// instead of failing (used by scan).
fn decode_record(
    cur: &mut Cursor,
    record: usize,
    strict_crc: bool,
) -> Result<(EditTriplet, bool), ShardError> {
    let body_start = cur.pos;
    let ilen = cur.u32(record)? as usize;
    if ilen > MAX_INSTRUCTION_BYTES {
        return Err(ShardError::InstructionTooLong { record, len: ilen });
    }
    let instruction = std::str::from_utf8(cur.take(ilen, record)?)
        .map_err(|_| ShardError::BadUtf8 { record })?
        .to_string();
    let video_in = decode_video(cur, record)?;
    let video_out = decode_video(cur, record)?;
    let tag = cur.take(1, record)?[0];
    let source_tag =
        SourceTag::from_byte(tag).ok_or(ShardError::BadSourceTag { record, tag })?;
    let seed = cur.u64(record)?;
    let body_end = cur.pos;
    let stored_crc = cur.u32(record)?;
    let mut hasher = Hasher::new();
    hasher.update(&cur.buf[body_start..body_end]);
    let crc_ok = hasher.finalize() == stored_crc;
    if strict_crc && !crc_ok {
        return Err(ShardError::CrcMismatch { record });
    }
    Ok((EditTriplet { video_in, instruction, video_out, source_tag, seed }, crc_ok))
}

fn parse_header(cur: &mut Cursor) -> Result<u64, ShardError> {
    let magic = cur.take(4, 0).map_err(|_| ShardError::BadMagic)?;
    if magic != SHARD_MAGIC {
        return Err(ShardError::BadMagic);
    }
    let version = cur.u32(0).map_err(|_| ShardError::BadMagic)?;
    if version != SHARD_VERSION {
        return Err(ShardError::BadVersion(version));
    }
    cur.u64(0).map_err(|_| ShardError::BadMagic)
}

/// Exact inverse of write_shard; CRC failures abort with the record index.
pub fn read_shard(path: &Path) -> Result<Vec<EditTriplet>, ShardError> {
    let buf = fs::read(path).map_err(|source| ShardError::Io { path: path.into(), source })?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let count = parse_header(&mut cur)?;
    let mut records = Vec::with_capacity(count as usize);
    for record in 0..count as usize {
        records.push(decode_record(&mut cur, record, true)?.0);
    }
    Ok(records)
}

/// Per-record summary for inspection tooling.
#[derive(Debug, Clone)]
pub struct RecordSummary {
    pub index: usize,
    pub instruction: String,
    pub video_in_shape: Vec<usize>,
    pub video_out_shape: Vec<usize>,
    pub source_tag: SourceTag,
    pub seed: u64,
    pub crc_ok: bool,
}

/// Walk a shard without failing on checksum mismatches; each record's CRC
/// status is reported instead. Structural corruption still errors.
pub fn scan_shard(path: &Path) -> Result<Vec<RecordSummary>, ShardError> {
    let buf = fs::read(path).map_err(|source| ShardError::Io { path: path.into(), source })?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let count = parse_header(&mut cur)?;
    let mut out = Vec::with_capacity(count as usize);
    for record in 0..count as usize {
        let (t, crc_ok) = decode_record(&mut cur, record, false)?;
        out.push(RecordSummary {
            index: record,
            instruction: t.instruction,
            video_in_shape: t.video_in.shape().to_vec(),
            video_out_shape: t.video_out.shape().to_vec(),
            source_tag: t.source_tag,
            seed: t.seed,
            crc_ok,
        });
    }
    Ok(out)
}
