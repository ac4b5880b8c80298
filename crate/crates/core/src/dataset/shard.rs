//! The `DLBS` shard format. All integers little-endian.
//!
//! ```text
//! header:  magic "DLBS" (4) | version u16 | record_count u32
//! record:  label u16 | width u16 | height u16 | channels u8 | payload_len u32 | payload
//! ```

use super::{DatasetError, ImageRecord, Result};

pub const MAGIC: &[u8; 4] = b"DLBS";
pub const VERSION: u16 = 1;
pub const SHARD_HEADER_LEN: usize = 4 + 2 + 4;
pub const RECORD_HEADER_LEN: usize = 2 + 2 + 2 + 1 + 4;

fn malformed(msg: impl Into<String>) -> DatasetError {
    DatasetError::Malformed(msg.into())
}

pub fn encode_record(record: &ImageRecord, out: &mut Vec<u8>) -> Result<()> {
    record.validate()?;
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| malformed(format!("{what} {v} does not fit in 16 bits")))
    };
    let label = narrow(record.label as usize, "label")?;
    let width = narrow(record.width, "width")?;
    let height = narrow(record.height, "height")?;
    let channels =
        u8::try_from(record.channels).map_err(|_| malformed("channels do not fit in 8 bits"))?;
    let payload_len =
        u32::try_from(record.pixels.len()).map_err(|_| malformed("payload exceeds 4 GiB"))?;
    out.extend_from_slice(&label.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.push(channels);
    out.extend_from_slice(&payload_len.to_le_bytes());
    out.extend_from_slice(&record.pixels);
    Ok(())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a record occupying exactly `bytes`.
pub fn decode_record(bytes: &[u8]) -> Result<ImageRecord> {
    let (record, used) = decode_record_prefix(bytes)?;
    if used != bytes.len() {
        return Err(malformed(format!(
            "{} trailing bytes after record",
            bytes.len() - used
        )));
    }
    Ok(record)
}

fn decode_record_prefix(bytes: &[u8]) -> Result<(ImageRecord, usize)> {
    if bytes.len() < RECORD_HEADER_LEN {
        return Err(malformed(format!(
            "record header truncated at {} bytes",
            bytes.len()
        )));
    }
    let label = u32::from(u16_at(bytes, 0));
    let width = usize::from(u16_at(bytes, 2));
    let height = usize::from(u16_at(bytes, 4));
    let channels = usize::from(bytes[6]);
    let payload_len = u32_at(bytes, 7) as usize;
    if payload_len != width * height * channels {
        return Err(malformed(format!(
            "payload_len {payload_len} does not match {height}x{width}x{channels}"
        )));
    }
    let end = RECORD_HEADER_LEN + payload_len;
    if bytes.len() < end {
        return Err(malformed("record payload truncated"));
    }
    let record = ImageRecord {
        label,
        width,
        height,
        channels,
        pixels: bytes[RECORD_HEADER_LEN..end].to_vec(),
    };
    Ok((record, end))
}

/// Parses a whole shard, validating header and record extents.
pub fn parse_shard(bytes: &[u8]) -> Result<Vec<ImageRecord>> {
    if bytes.len() < SHARD_HEADER_LEN {
        return Err(malformed("shard header truncated"));
    }
    if &bytes[..4] != MAGIC {
        return Err(malformed("bad shard magic"));
    }
    let version = u16_at(bytes, 4);
    if version != VERSION {
        return Err(malformed(format!("unsupported shard version {version}")));
    }
    let count = u32_at(bytes, 6) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    let mut at = SHARD_HEADER_LEN;
    for _ in 0..count {
        let (record, used) = decode_record_prefix(&bytes[at..])?;
        records.push(record);
        at += used;
    }
    if at != bytes.len() {
        return Err(malformed(format!(
            "record extents cover {} bytes but shard body is {}",
            at - SHARD_HEADER_LEN,
            bytes.len() - SHARD_HEADER_LEN
        )));
    }
    Ok(records)
}

/// Accumulates records into one shard image.
#[derive(Debug)]
pub struct ShardWriter {
    buf: Vec<u8>,
    count: u32,
}

impl Default for ShardWriter {
    fn default() -> Self {
        Self::with_capacity(0, 0)
    }
}

impl ShardWriter {
    pub fn with_capacity(records: usize, record_len: usize) -> Self {
        let mut buf = Vec::with_capacity(SHARD_HEADER_LEN + records * record_len);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        Self { buf, count: 0 }
    }

    /// Appends a record and returns its byte offset within the shard.
    pub fn push(&mut self, record: &ImageRecord) -> Result<u64> {
        let offset = self.buf.len() as u64;
        encode_record(record, &mut self.buf)?;
        self.count += 1;
        Ok(offset)
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.buf[6..10].copy_from_slice(&self.count.to_le_bytes());
        self.buf
    }
}
