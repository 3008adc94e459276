//! Manifest files and the `DS2F` frame container.
//!
//! A manifest is UTF-8 JSON lines: a header object first, then one object per
//! record. Frame matrices live in sidecar files next to the manifest, in a
//! directory named after the manifest with a `.frames` suffix.
//!
//! `DS2F` layout, little-endian: magic `DS2F`, version `u32`, rows `u32`,
//! cols `u32`, then `rows * cols` `f64` values in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Manifest, ManifestMeta, SpeechFrames, UtterancePair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FRAME_MAGIC: &[u8; 4] = b"DS2F";
pub const FRAME_VERSION: u32 = 1;

pub fn encode_frames(frames: &SpeechFrames) -> Vec<u8> {
    let t = frames.tensor();
    let mut out = Vec::with_capacity(16 + t.len() * 8);
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.features() as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_frames(bytes: &[u8], path: &Path, frame_rate: f64) -> Result<SpeechFrames> {
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != FRAME_MAGIC {
        return Err(bad("missing DS2F header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FRAME_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FRAME_VERSION,
        });
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + rows * cols * 8 {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    SpeechFrames::new(Tensor::new(vec![rows, cols], data)?, frame_rate)
}

pub fn write_frames(frames: &SpeechFrames, path: &Path) -> Result<()> {
    fs::write(path, encode_frames(frames)).map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: &Path, frame_rate: f64) -> Result<SpeechFrames> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frames(&bytes, path, frame_rate)
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    kind: String,
    #[serde(flatten)]
    meta: ManifestMeta,
    records: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    src_frames: String,
    src_text: Vec<usize>,
    tgt_text: Vec<usize>,
    tgt_frames: String,
    speaker_id: String,
    similarity: f64,
}

fn sidecar_dir(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "manifest".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.frames"))
}

/// Writes `m` to `path` plus its frame sidecar directory.
pub fn write_manifest(m: &Manifest, path: &Path) -> Result<()> {
    m.validate()?;
    let dir = sidecar_dir(path);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let dir_name = dir.file_name().expect("named dir").to_string_lossy().into_owned();
    let mut out = String::new();
    let header = HeaderLine {
        kind: "header".into(),
        meta: m.meta.clone(),
        records: m.len(),
    };
    out.push_str(&serde_json::to_string(&header).expect("serializable"));
    out.push('\n');
    for r in &m.records {
        let src = format!("{}.src.ds2f", r.id);
        let tgt = format!("{}.tgt.ds2f", r.id);
        write_frames(&r.src_frames, &dir.join(&src))?;
        write_frames(&r.tgt_frames, &dir.join(&tgt))?;
        let line = RecordLine {
            id: r.id.clone(),
            src_frames: format!("{dir_name}/{src}"),
            src_text: r.src_text.clone(),
            tgt_text: r.tgt_text.clone(),
            tgt_frames: format!("{dir_name}/{tgt}"),
            speaker_id: r.speaker_id.clone(),
            similarity: r.similarity,
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty manifest".into()))?;
    let header: HeaderLine = serde_json::from_str(first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.kind != "header" {
        return Err(parse_err(1, "first line must be the header".into()));
    }
    let rate = header.meta.frame_rate;
    let mut records = Vec::with_capacity(header.records);
    for (i, line) in lines {
        let rec: RecordLine = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        records.push(UtterancePair {
            src_frames: read_frames(&base.join(&rec.src_frames), rate)?,
            tgt_frames: read_frames(&base.join(&rec.tgt_frames), rate)?,
            id: rec.id,
            src_text: rec.src_text,
            tgt_text: rec.tgt_text,
            speaker_id: rec.speaker_id,
            similarity: rec.similarity,
        });
    }
    if records.len() != header.records {
        return Err(parse_err(
            1,
            format!("header announces {} records, found {}", header.records, records.len()),
        ));
    }
    Manifest::new(header.meta, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_toy_corpus, ToyCorpusConfig};

    #[test]
    fn manifest_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig { pairs: 12, ..Default::default() };
        let mut m = generate_toy_corpus(&cfg, 5).unwrap();
        m.records[3].similarity = 0.1 + 0.2;
        let path = dir.path().join("train.jsonl");
        write_manifest(&m, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.records[3].similarity.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig { pairs: 2, ..Default::default() };
        let path = dir.path().join("m.jsonl");
        write_manifest(&generate_toy_corpus(&cfg, 1).unwrap(), &path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        fs::write(&path, text).unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_frame_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig { pairs: 1, ..Default::default() };
        let path = dir.path().join("m.jsonl");
        write_manifest(&generate_toy_corpus(&cfg, 1).unwrap(), &path).unwrap();
        fs::remove_file(dir.path().join("m.frames/toy-00000.tgt.ds2f")).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Io { .. })));
    }

    #[test]
    fn frame_header_checks() {
        let f = SpeechFrames::new(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), 50.0).unwrap();
        let mut bytes = encode_frames(&f);
        assert_eq!(&bytes[..4], b"DS2F");
        assert_eq!(decode_frames(&bytes, Path::new("x"), 50.0).unwrap(), f);
        bytes[4] = 9;
        assert!(matches!(
            decode_frames(&bytes, Path::new("x"), 50.0),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        assert!(decode_frames(&bytes[..10], Path::new("x"), 50.0).is_err());
    }
}
