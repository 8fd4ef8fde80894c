//! APK ingestion: a minimal ZIP central-directory reader and DEX extraction.
//!
//! Only what DEX extraction needs is supported: the end-of-central-directory
//! record (plus its ZIP64 variant), central directory entries, local headers,
//! and the stored (0) and deflate (8) compression methods.

use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use flate2::read::DeflateDecoder;
use thiserror::Error;

const EOCD_SIG: u32 = 0x0605_4b50;
const EOCD64_SIG: u32 = 0x0606_4b50;
const EOCD64_LOCATOR_SIG: u32 = 0x0706_4b50;
const CENTRAL_SIG: u32 = 0x0201_4b50;
const LOCAL_SIG: u32 = 0x0403_4b50;
const EOCD_LEN: usize = 22;
const MAX_COMMENT: usize = u16::MAX as usize;

const METHOD_STORED: u16 = 0;
const METHOD_DEFLATE: u16 = 8;

#[derive(Debug, Error)]
pub enum ApkError {
    #[error("not a zip archive: {0}")]
    NotAZip(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("truncated archive: {0}")]
    TruncatedArchive(String),
    #[error("duplicate entry name {0:?}")]
    DuplicateEntry(String),
    #[error("no root-level classes.dex / classesN.dex entry")]
    NoDexFound,
    #[error("cannot decompress {entry:?}: {reason}")]
    DecompressionFailure { entry: String, reason: String },
}

impl ApkError {
    /// Short stable name used in manifests and summaries.
    pub fn kind(&self) -> &'static str {
        match self {
            ApkError::NotAZip(_) => "NotAZip",
            ApkError::IoFailure(_) => "IoFailure",
            ApkError::TruncatedArchive(_) => "TruncatedArchive",
            ApkError::DuplicateEntry(_) => "DuplicateEntry",
            ApkError::NoDexFound => "NoDexFound",
            ApkError::DecompressionFailure { .. } => "DecompressionFailure",
        }
    }
}

pub type Result<T> = std::result::Result<T, ApkError>;

/// One central-directory entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZipEntry {
    pub name: String,
    pub method: u16,
    pub flags: u16,
    pub crc32: u32,
    pub compressed_size: u64,
    pub uncompressed_size: u64,
    pub local_header_offset: u64,
    /// Raw MS-DOS date/time fields.
    pub dos_date: u16,
    pub dos_time: u16,
}

impl ZipEntry {
    /// Calendar date of the entry's modification timestamp, if it is valid.
    pub fn modified_date(&self) -> Option<NaiveDate> {
        let day = u32::from(self.dos_date & 0x1f);
        let month = u32::from((self.dos_date >> 5) & 0x0f);
        let year = 1980 + i32::from(self.dos_date >> 9);
        NaiveDate::from_ymd_opt(year, month, day)
    }
}

/// An opened APK. Entry bodies are only decompressed on demand; the archive
/// is immutable after opening and can be shared across threads.
#[derive(Clone)]
pub struct ApkArchive {
    path: PathBuf,
    data: Vec<u8>,
    entries: Vec<ZipEntry>,
}

impl fmt::Debug for ApkArchive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ApkArchive")
            .field("path", &self.path)
            .field("len", &self.data.len())
            .field("entries", &self.entries.len())
            .finish()
    }
}

/// Concatenated raw DEX bytes of one app, in canonical multidex order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteStream {
    pub bytes: Vec<u8>,
    pub source_count: usize,
}

impl ByteStream {
    pub fn new(bytes: Vec<u8>, source_count: usize) -> Self {
        ByteStream { bytes, source_count }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// Open an APK from disk and read its central directory.
pub fn open_archive(path: impl AsRef<Path>) -> Result<ApkArchive> {
    let path = path.as_ref();
    let data = std::fs::read(path)?;
    ApkArchive::from_bytes(path, data)
}

fn u16_at(buf: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([buf[at], buf[at + 1]])
}

fn u32_at(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn u64_at(buf: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(buf[at..at + 8].try_into().unwrap())
}

fn truncated(what: impl Into<String>) -> ApkError {
    ApkError::TruncatedArchive(what.into())
}

/// Locate the end-of-central-directory record, scanning backwards over a
/// possible trailing comment.
fn find_eocd(data: &[u8]) -> Result<usize> {
    if data.len() < EOCD_LEN {
        return Err(ApkError::NotAZip(format!(
            "{} bytes is too short for an end-of-central-directory record",
            data.len()
        )));
    }
    let last = data.len() - EOCD_LEN;
    let first = last.saturating_sub(MAX_COMMENT);
    (first..=last)
        .rev()
        .find(|&pos| u32_at(data, pos) == EOCD_SIG)
        .ok_or_else(|| ApkError::NotAZip("end-of-central-directory signature not found".into()))
}

struct Directory {
    entries: u64,
    size: u64,
    offset: u64,
}

fn read_directory_location(data: &[u8], eocd: usize) -> Result<Directory> {
    let mut dir = Directory {
        entries: u64::from(u16_at(data, eocd + 10)),
        size: u64::from(u32_at(data, eocd + 12)),
        offset: u64::from(u32_at(data, eocd + 16)),
    };
    let zip64 = dir.entries == 0xffff || dir.size == 0xffff_ffff || dir.offset == 0xffff_ffff;
    if zip64 && eocd >= 20 && u32_at(data, eocd - 20) == EOCD64_LOCATOR_SIG {
        let record = u64_at(data, eocd - 20 + 8);
        let record = usize::try_from(record).map_err(|_| truncated("zip64 record offset"))?;
        if record.checked_add(56).is_none_or(|end| end > data.len()) {
            return Err(truncated("zip64 end-of-central-directory record past end of file"));
        }
        if u32_at(data, record) != EOCD64_SIG {
            return Err(ApkError::NotAZip("bad zip64 end-of-central-directory signature".into()));
        }
        dir.entries = u64_at(data, record + 32);
        dir.size = u64_at(data, record + 40);
        dir.offset = u64_at(data, record + 48);
    }
    Ok(dir)
}

/// Apply a ZIP64 extended-information extra field to the entry fields that
/// overflowed their 32-bit slots.
fn apply_zip64_extra(extra: &[u8], entry: &mut ZipEntry) {
    let mut at = 0;
    while at + 4 <= extra.len() {
        let id = u16_at(extra, at);
        let len = usize::from(u16_at(extra, at + 2));
        let body = &extra[(at + 4).min(extra.len())..(at + 4 + len).min(extra.len())];
        if id == 0x0001 {
            let mut fields = body.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()));
            if entry.uncompressed_size == 0xffff_ffff {
                if let Some(v) = fields.next() {
                    entry.uncompressed_size = v;
                }
            }
            if entry.compressed_size == 0xffff_ffff {
                if let Some(v) = fields.next() {
                    entry.compressed_size = v;
                }
            }
            if entry.local_header_offset == 0xffff_ffff {
                if let Some(v) = fields.next() {
                    entry.local_header_offset = v;
                }
            }
            return;
        }
        at += 4 + len;
    }
}

impl ApkArchive {
    /// Parse an archive already held in memory. `path` is informational.
    pub fn from_bytes(path: impl Into<PathBuf>, data: Vec<u8>) -> Result<Self> {
        let eocd = find_eocd(&data)?;
        let dir = read_directory_location(&data, eocd)?;
        let start = usize::try_from(dir.offset).map_err(|_| truncated("directory offset"))?;
        let size = usize::try_from(dir.size).map_err(|_| truncated("directory size"))?;
        let end = start
            .checked_add(size)
            .filter(|&end| end <= data.len())
            .ok_or_else(|| {
                truncated(format!(
                    "central directory [{start}, +{size}) extends past end of file ({} bytes)",
                    data.len()
                ))
            })?;

        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        let mut at = start;
        for index in 0..dir.entries {
            if at + 46 > end {
                return Err(truncated(format!("central directory entry {index} is cut short")));
            }
            if u32_at(&data, at) != CENTRAL_SIG {
                return Err(ApkError::NotAZip(format!(
                    "bad central directory signature at offset {at}"
                )));
            }
            let name_len = usize::from(u16_at(&data, at + 28));
            let extra_len = usize::from(u16_at(&data, at + 30));
            let comment_len = usize::from(u16_at(&data, at + 32));
            let name_start = at + 46;
            let next = name_start + name_len + extra_len + comment_len;
            if next > end {
                return Err(truncated(format!("central directory entry {index} is cut short")));
            }
            let name = String::from_utf8_lossy(&data[name_start..name_start + name_len]).into_owned();
            let mut entry = ZipEntry {
                name,
                flags: u16_at(&data, at + 8),
                method: u16_at(&data, at + 10),
                dos_time: u16_at(&data, at + 12),
                dos_date: u16_at(&data, at + 14),
                crc32: u32_at(&data, at + 16),
                compressed_size: u64::from(u32_at(&data, at + 20)),
                uncompressed_size: u64::from(u32_at(&data, at + 24)),
                local_header_offset: u64::from(u32_at(&data, at + 42)),
            };
            let extra = &data[name_start + name_len..name_start + name_len + extra_len];
            apply_zip64_extra(extra, &mut entry);
            if !seen.insert(entry.name.clone()) {
                return Err(ApkError::DuplicateEntry(entry.name));
            }
            entries.push(entry);
            at = next;
        }

        Ok(ApkArchive { path: path.into(), data, entries })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> &[ZipEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ZipEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Raw archive bytes as read from disk.
    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    /// Names of the root-level DEX entries in canonical multidex order.
    pub fn list_dex_entries(&self) -> Result<Vec<String>> {
        let mut dex: Vec<(u32, &str)> = self
            .entries
            .iter()
            .filter_map(|e| dex_index(&e.name).map(|i| (i, e.name.as_str())))
            .collect();
        if dex.is_empty() {
            return Err(ApkError::NoDexFound);
        }
        dex.sort_unstable_by_key(|&(i, _)| i);
        Ok(dex.into_iter().map(|(_, n)| n.to_owned()).collect())
    }

    /// Decompress one entry, checking its declared size and CRC-32.
    pub fn read_entry(&self, name: &str) -> Result<Vec<u8>> {
        let fail = |reason: String| ApkError::DecompressionFailure { entry: name.to_owned(), reason };
        let entry = self.entry(name).ok_or_else(|| fail("no such entry".into()))?;
        if entry.flags & 0x1 != 0 {
            return Err(fail("entry is encrypted".into()));
        }
        let at = usize::try_from(entry.local_header_offset).map_err(|_| truncated("local header offset"))?;
        if at.checked_add(30).is_none_or(|end| end > self.data.len()) {
            return Err(truncated(format!("local header of {name:?} past end of file")));
        }
        if u32_at(&self.data, at) != LOCAL_SIG {
            return Err(fail(format!("bad local header signature at offset {at}")));
        }
        let name_len = usize::from(u16_at(&self.data, at + 26));
        let extra_len = usize::from(u16_at(&self.data, at + 28));
        let body_start = at + 30 + name_len + extra_len;
        let body_len = usize::try_from(entry.compressed_size).map_err(|_| truncated("entry size"))?;
        let body = body_start
            .checked_add(body_len)
            .filter(|&end| end <= self.data.len())
            .map(|end| &self.data[body_start..end])
            .ok_or_else(|| truncated(format!("body of {name:?} extends past end of file")))?;
        let expected = usize::try_from(entry.uncompressed_size).map_err(|_| truncated("entry size"))?;

        let out = match entry.method {
            METHOD_STORED => {
                if body.len() != expected {
                    return Err(fail(format!(
                        "stored entry has {} bytes, declared {expected}",
                        body.len()
                    )));
                }
                body.to_vec()
            }
            METHOD_DEFLATE => {
                let mut out = Vec::with_capacity(expected);
                // One byte of slack so an over-long stream is detected.
                DeflateDecoder::new(body)
                    .take(expected as u64 + 1)
                    .read_to_end(&mut out)
                    .map_err(|e| fail(format!("inflate: {e}")))?;
                if out.len() != expected {
                    return Err(fail(format!(
                        "inflated to {} bytes, declared {expected}",
                        out.len()
                    )));
                }
                out
            }
            other => return Err(fail(format!("unsupported compression method {other}"))),
        };
        let crc = crc32fast::hash(&out);
        if crc != entry.crc32 {
            return Err(fail(format!("crc32 {crc:08x} != declared {:08x}", entry.crc32)));
        }
        Ok(out)
    }

    /// Concatenate every DEX entry in canonical order.
    pub fn extract_bytestream(&self) -> Result<ByteStream> {
        let names = self.list_dex_entries()?;
        let mut bytes = Vec::new();
        for name in &names {
            let body = self.read_entry(name)?;
            if !has_dex_magic(&body) {
                log::warn!("{}: {name} does not start with a DEX magic", self.path.display());
            }
            bytes.extend_from_slice(&body);
        }
        Ok(ByteStream { bytes, source_count: names.len() })
    }

    /// Modification date of `classes.dex`, the conventional "dex date" of an app.
    pub fn dex_date(&self) -> Option<NaiveDate> {
        self.entry("classes.dex").and_then(ZipEntry::modified_date)
    }
}

/// Multidex position of a root-level DEX entry name: `classes.dex` is 1,
/// `classesN.dex` is N for N >= 2. Anything else is not a DEX entry.
pub fn dex_index(name: &str) -> Option<u32> {
    let digits = name.strip_prefix("classes")?.strip_suffix(".dex")?;
    if digits.is_empty() {
        return Some(1);
    }
    if !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return None;
    }
    digits.parse().ok().filter(|&n| n >= 2)
}

/// `dex\n` followed by three version digits and a NUL.
pub fn has_dex_magic(body: &[u8]) -> bool {
    body.len() >= 8 && &body[..4] == b"dex\n" && body[4..7].iter().all(u8::is_ascii_digit) && body[7] == 0
}

/// Open `path` and return its concatenated DEX bytes.
pub fn read_bytestream(path: impl AsRef<Path>) -> Result<ByteStream> {
    open_archive(path)?.extract_bytestream()
}

/// Write the raw byte stream with no header, for debugging.
pub fn dump_bytestream(stream: &ByteStream, path: impl AsRef<Path>) -> std::io::Result<()> {
    std::fs::write(path, &stream.bytes)
}
