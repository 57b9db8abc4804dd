//! Ingestion, validation and deduplication of yearly sequence releases.
//!
//! A release is parsed from FASTA or JSONL, residues are normalized onto the
//! 20 canonical amino acids plus `X`, and exact duplicates on the pair
//! (identifier, sequence) are removed keeping the first occurrence in file
//! order. Snapshots are immutable after load.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The 20 canonical amino acids, in the fixed alphabet order used everywhere.
pub const CANONICAL_RESIDUES: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

/// Residues accepted on input beyond the canonical set; all map to `X`.
pub const EXTENDED_RESIDUES: &[u8; 6] = b"XBZUO*";

pub fn is_canonical(c: u8) -> bool {
    CANONICAL_RESIDUES.contains(&c)
}

pub fn is_accepted(c: u8) -> bool {
    is_canonical(c) || EXTENDED_RESIDUES.contains(&c)
}

/// One (identifier, residue string) entry of a yearly release.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub identifier: String,
    pub sequence: String,
    pub year: i32,
}

/// Raw/deduplicated record counts of a snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotCounts {
    pub raw: usize,
    pub deduplicated: usize,
}

/// One year's deduplicated release.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub year: i32,
    pub records: Vec<SequenceRecord>,
    pub counts: SnapshotCounts,
}

impl Snapshot {
    pub fn sequences(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.sequence.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotFormat {
    Fasta,
    Jsonl,
}

/// Pointer to a release file plus optional integrity checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub year: i32,
    pub path: PathBuf,
    pub format: SnapshotFormat,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub declared_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content_digest: Option<String>,
}

/// Parse FASTA from a byte stream. Header lines start with '>'; the
/// identifier is the first whitespace-delimited token; sequence lines may
/// wrap. Residues outside the accepted superset are a validation error
/// identifying the record and offset within its sequence.
pub fn parse_fasta<R: Read>(stream: R, year: i32) -> Result<Vec<SequenceRecord>> {
    let reader = BufReader::new(stream);
    let mut records: Vec<SequenceRecord> = Vec::new();
    let mut current: Option<(String, String)> = None;

    let flush = |cur: Option<(String, String)>, out: &mut Vec<SequenceRecord>| -> Result<()> {
        if let Some((id, seq)) = cur {
            if seq.is_empty() {
                return Err(Error::Validation {
                    id,
                    offset: 0,
                    msg: "empty sequence".into(),
                });
            }
            out.push(SequenceRecord {
                identifier: id,
                sequence: seq,
                year,
            });
        }
        Ok(())
    };

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            flush(current.take(), &mut records)?;
            let id = header.split_whitespace().next().unwrap_or("");
            if id.is_empty() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "header has no identifier".into(),
                });
            }
            current = Some((id.to_string(), String::new()));
        } else {
            let Some((id, seq)) = current.as_mut() else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "sequence data before first header".into(),
                });
            };
            for ch in line.bytes() {
                let up = ch.to_ascii_uppercase();
                if !is_accepted(up) {
                    return Err(Error::Validation {
                        id: id.clone(),
                        offset: seq.len(),
                        msg: format!("residue '{}' outside accepted alphabet", ch as char),
                    });
                }
                seq.push(up as char);
            }
        }
    }
    flush(current, &mut records)?;
    Ok(records)
}

/// Parse JSONL with one `{"id":..., "seq":...}` object per line.
pub fn parse_jsonl<R: Read>(stream: R, year: i32) -> Result<Vec<SequenceRecord>> {
    #[derive(Deserialize)]
    struct Line {
        id: String,
        seq: String,
    }
    let reader = BufReader::new(stream);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if parsed.id.is_empty() || parsed.id.contains(char::is_whitespace) {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "identifier empty or contains whitespace".into(),
            });
        }
        let mut seq = String::with_capacity(parsed.seq.len());
        for (offset, ch) in parsed.seq.bytes().enumerate() {
            let up = ch.to_ascii_uppercase();
            if !is_accepted(up) {
                return Err(Error::Validation {
                    id: parsed.id.clone(),
                    offset,
                    msg: format!("residue '{}' outside accepted alphabet", ch as char),
                });
            }
            seq.push(up as char);
        }
        if seq.is_empty() {
            return Err(Error::Validation {
                id: parsed.id,
                offset: 0,
                msg: "empty sequence".into(),
            });
        }
        records.push(SequenceRecord {
            identifier: parsed.id,
            sequence: seq,
            year,
        });
    }
    Ok(records)
}

/// Map extended residues (B, Z, U, O, *) to X. Idempotent, length-preserving.
pub fn normalize_sequence(seq: &str) -> String {
    seq.bytes()
        .map(|c| if is_canonical(c) { c as char } else { 'X' })
        .collect()
}

pub fn normalize(record: &SequenceRecord) -> SequenceRecord {
    SequenceRecord {
        identifier: record.identifier.clone(),
        sequence: normalize_sequence(&record.sequence),
        year: record.year,
    }
}

/// Remove exact duplicates on (identifier, sequence), keeping the first
/// occurrence in input order.
pub fn deduplicate(records: Vec<SequenceRecord>) -> Result<Snapshot> {
    let year = match records.first() {
        Some(r) => r.year,
        None => {
            return Ok(Snapshot {
                year: 0,
                records: Vec::new(),
                counts: SnapshotCounts {
                    raw: 0,
                    deduplicated: 0,
                },
            })
        }
    };
    if records.iter().any(|r| r.year != year) {
        return Err(Error::Argument("mixed years in deduplicate input".into()));
    }
    let raw = records.len();
    let mut seen: HashSet<(String, String)> = HashSet::with_capacity(raw);
    let mut out = Vec::with_capacity(raw);
    for r in records {
        if seen.insert((r.identifier.clone(), r.sequence.clone())) {
            out.push(r);
        }
    }
    let deduplicated = out.len();
    Ok(Snapshot {
        year,
        records: out,
        counts: SnapshotCounts { raw, deduplicated },
    })
}

/// SHA-256 of raw file bytes, lowercase hex.
pub fn file_digest(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Full parse -> normalize -> deduplicate pipeline with integrity checks.
pub fn load_snapshot(manifest: &SnapshotManifest) -> Result<Snapshot> {
    if let Some(expected) = &manifest.content_digest {
        let actual = file_digest(&manifest.path)?;
        if !actual.eq_ignore_ascii_case(expected) {
            return Err(Error::Integrity(format!(
                "digest mismatch for {}: expected {expected}, got {actual}",
                manifest.path.display()
            )));
        }
    }
    let file = File::open(&manifest.path)?;
    let parsed = match manifest.format {
        SnapshotFormat::Fasta => parse_fasta(file, manifest.year)?,
        SnapshotFormat::Jsonl => parse_jsonl(file, manifest.year)?,
    };
    if let Some(declared) = manifest.declared_count {
        if parsed.len() != declared {
            return Err(Error::Integrity(format!(
                "count mismatch for {}: declared {declared}, parsed {}",
                manifest.path.display(),
                parsed.len()
            )));
        }
    }
    let normalized: Vec<SequenceRecord> = parsed.iter().map(normalize).collect();
    let mut snap = deduplicate(normalized)?;
    snap.year = manifest.year;
    Ok(snap)
}

pub fn load_manifest(path: &Path) -> Result<SnapshotManifest> {
    let file = File::open(path)?;
    let manifest: SnapshotManifest = serde_json::from_reader(BufReader::new(file))?;
    Ok(manifest)
}

/// Write a snapshot back out as FASTA (60-column wrapping).
pub fn serialize_fasta<W: Write>(snapshot: &Snapshot, out: &mut W) -> Result<()> {
    for r in &snapshot.records {
        writeln!(out, ">{}", r.identifier)?;
        for chunk in r.sequence.as_bytes().chunks(60) {
            out.write_all(chunk)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Write a snapshot as JSONL.
pub fn serialize_jsonl<W: Write>(snapshot: &Snapshot, out: &mut W) -> Result<()> {
    for r in &snapshot.records {
        let line = serde_json::json!({"id": r.identifier, "seq": r.sequence});
        writeln!(out, "{line}")?;
    }
    Ok(())
}
