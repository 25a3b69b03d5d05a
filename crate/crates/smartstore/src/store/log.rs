//! Append-only file log backing the durable store.
//!
//! Layout: a 5-byte header (magic `SMDS`, format version `0x01`) followed by
//! frames. Each frame is a 4-byte big-endian payload length, the canonical
//! encoding of one record document, and a 4-byte big-endian CRC32 of those
//! payload bytes. Replay accepts the longest valid prefix: the first bad
//! frame (short read, CRC mismatch, undecodable document) stops replay and
//! is reported with its byte offset. Opening for append truncates the file
//! back to the valid prefix so new frames always extend good data.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, ErrorKind, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::codec::{decode, DocumentValue};

pub(crate) const LOG_MAGIC: [u8; 4] = *b"SMDS";
pub(crate) const LOG_FORMAT_VERSION: u8 = 0x01;
const HEADER_LEN: u64 = 5;

/// Guard against absurd frame lengths from corrupt length fields.
const MAX_FRAME_LEN: u32 = 256 * 1024 * 1024;

/// A frame that replayed cleanly, with the offset it starts at.
pub(crate) struct ReplayedFrame {
    pub offset: u64,
    pub document: DocumentValue,
}

pub(crate) struct ReplayOutcome {
    pub frames: Vec<ReplayedFrame>,
    /// End of the last clean frame; everything past this is suspect.
    pub valid_len: u64,
    /// Offset and description of the first bad frame, if any.
    pub corruption: Option<(u64, String)>,
}

/// Reads every clean frame from an existing log file.
pub(crate) fn replay(path: &Path) -> std::io::Result<ReplayOutcome> {
    let mut file = File::open(path)?;
    let mut header = [0u8; HEADER_LEN as usize];
    match read_exact_or_eof(&mut file, &mut header)? {
        n if n == 0 => {
            // Brand-new empty file: nothing to replay.
            return Ok(ReplayOutcome {
                frames: Vec::new(),
                valid_len: 0,
                corruption: None,
            });
        }
        n if n < HEADER_LEN as usize => {
            return Ok(ReplayOutcome {
                frames: Vec::new(),
                valid_len: 0,
                corruption: Some((0, "short log header".to_string())),
            });
        }
        _ => {}
    }
    if header[..4] != LOG_MAGIC {
        return Ok(ReplayOutcome {
            frames: Vec::new(),
            valid_len: 0,
            corruption: Some((0, "bad log magic".to_string())),
        });
    }
    if header[4] != LOG_FORMAT_VERSION {
        return Ok(ReplayOutcome {
            frames: Vec::new(),
            valid_len: 0,
            corruption: Some((4, format!("unsupported log version 0x{:02x}", header[4]))),
        });
    }

    let mut frames = Vec::new();
    let mut offset = HEADER_LEN;
    loop {
        let mut len_bytes = [0u8; 4];
        match read_exact_or_eof(&mut file, &mut len_bytes)? {
            0 => break, // clean end of log
            4 => {}
            _ => {
                return Ok(ReplayOutcome {
                    frames,
                    valid_len: offset,
                    corruption: Some((offset, "torn frame length".to_string())),
                });
            }
        }
        let len = u32::from_be_bytes(len_bytes);
        if len > MAX_FRAME_LEN {
            return Ok(ReplayOutcome {
                frames,
                valid_len: offset,
                corruption: Some((offset, format!("implausible frame length {len}"))),
            });
        }
        let mut body = vec![0u8; len as usize + 4];
        let got = read_exact_or_eof(&mut file, &mut body)?;
        if got < body.len() {
            return Ok(ReplayOutcome {
                frames,
                valid_len: offset,
                corruption: Some((offset, "torn frame body".to_string())),
            });
        }
        let (payload, crc_bytes) = body.split_at(len as usize);
        let stored_crc = u32::from_be_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(payload) != stored_crc {
            return Ok(ReplayOutcome {
                frames,
                valid_len: offset,
                corruption: Some((offset, "frame checksum mismatch".to_string())),
            });
        }
        let document = match decode(payload) {
            Ok(doc) => doc,
            Err(e) => {
                return Ok(ReplayOutcome {
                    frames,
                    valid_len: offset,
                    corruption: Some((offset, format!("undecodable frame: {e}"))),
                });
            }
        };
        frames.push(ReplayedFrame { offset, document });
        offset += 4 + len as u64 + 4;
    }
    Ok(ReplayOutcome {
        frames,
        valid_len: offset,
        corruption: None,
    })
}

fn read_exact_or_eof(file: &mut File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match file.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

pub(crate) struct LogWriter {
    file: BufWriter<File>,
}

impl LogWriter {
    /// Opens the log for appending at `valid_len`, writing the header for a
    /// fresh file and truncating away any corrupt tail otherwise.
    pub(crate) fn open(path: &Path, valid_len: u64) -> std::io::Result<LogWriter> {
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(path)?;
        if valid_len == 0 {
            file.set_len(0)?;
            file.write_all(&LOG_MAGIC)?;
            file.write_all(&[LOG_FORMAT_VERSION])?;
            file.flush()?;
        } else {
            file.set_len(valid_len)?;
            file.seek(SeekFrom::Start(valid_len))?;
        }
        Ok(LogWriter {
            file: BufWriter::new(file),
        })
    }

    pub(crate) fn append(&mut self, payload: &[u8]) -> std::io::Result<()> {
        let len = u32::try_from(payload.len())
            .map_err(|_| std::io::Error::new(ErrorKind::InvalidInput, "frame too large"))?;
        self.file.write_all(&len.to_be_bytes())?;
        self.file.write_all(payload)?;
        self.file.write_all(&crc32fast::hash(payload).to_be_bytes())?;
        self.file.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode_canonical;
    use std::collections::BTreeMap;

    fn doc(n: i64) -> DocumentValue {
        let mut m = BTreeMap::new();
        m.insert("n".to_string(), DocumentValue::Integer(n));
        DocumentValue::Map(m)
    }

    #[test]
    fn append_then_replay_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.log");
        {
            let mut writer = LogWriter::open(&path, 0).unwrap();
            for n in 0..5 {
                writer.append(&encode_canonical(&doc(n)).unwrap()).unwrap();
            }
        }
        let outcome = replay(&path).unwrap();
        assert!(outcome.corruption.is_none());
        assert_eq!(outcome.frames.len(), 5);
        for (i, frame) in outcome.frames.iter().enumerate() {
            assert_eq!(frame.document, doc(i as i64));
        }
        assert_eq!(outcome.valid_len, std::fs::metadata(&path).unwrap().len());
    }

    #[test]
    fn truncated_tail_reports_offset_of_first_bad_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.log");
        let mut offsets = Vec::new();
        {
            let mut writer = LogWriter::open(&path, 0).unwrap();
            let mut offset = HEADER_LEN;
            for n in 0..3 {
                offsets.push(offset);
                let payload = encode_canonical(&doc(n)).unwrap();
                writer.append(&payload).unwrap();
                offset += 4 + payload.len() as u64 + 4;
            }
        }
        // chop the file mid-way through the last frame
        let full = std::fs::metadata(&path).unwrap().len();
        let file = OpenOptions::new().write(true).open(&path).unwrap();
        file.set_len(full - 3).unwrap();

        let outcome = replay(&path).unwrap();
        assert_eq!(outcome.frames.len(), 2);
        assert_eq!(outcome.valid_len, offsets[2]);
        let (offset, _) = outcome.corruption.unwrap();
        assert_eq!(offset, offsets[2]);
    }

    #[test]
    fn bit_flip_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.log");
        {
            let mut writer = LogWriter::open(&path, 0).unwrap();
            writer.append(&encode_canonical(&doc(1)).unwrap()).unwrap();
            writer.append(&encode_canonical(&doc(2)).unwrap()).unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 6; // inside the second frame's payload
        bytes[mid] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();

        let outcome = replay(&path).unwrap();
        assert_eq!(outcome.frames.len(), 1);
        let (_, detail) = outcome.corruption.unwrap();
        assert!(detail.contains("checksum"));
    }

    #[test]
    fn reopening_after_corruption_truncates_the_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.log");
        {
            let mut writer = LogWriter::open(&path, 0).unwrap();
            writer.append(&encode_canonical(&doc(1)).unwrap()).unwrap();
        }
        let good_len = std::fs::metadata(&path).unwrap().len();
        {
            let mut garbage = OpenOptions::new().append(true).open(&path).unwrap();
            garbage.write_all(b"\xde\xad\xbe").unwrap();
        }
        let outcome = replay(&path).unwrap();
        assert_eq!(outcome.valid_len, good_len);
        {
            let mut writer = LogWriter::open(&path, outcome.valid_len).unwrap();
            writer.append(&encode_canonical(&doc(2)).unwrap()).unwrap();
        }
        let healed = replay(&path).unwrap();
        assert!(healed.corruption.is_none());
        assert_eq!(healed.frames.len(), 2);
    }

    #[test]
    fn bad_magic_is_corruption_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.log");
        std::fs::write(&path, b"NOPE\x01").unwrap();
        let outcome = replay(&path).unwrap();
        assert_eq!(outcome.corruption, Some((0, "bad log magic".to_string())));
        assert_eq!(outcome.valid_len, 0);
    }
}
