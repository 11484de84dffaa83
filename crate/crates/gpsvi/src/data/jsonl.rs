//! JSON-Lines ingestion and emission for impression logs.
//!
//! A dataset directory may carry a `manifest.json` (written by
//! `generate-data`) declaring vocab sizes and per-split content hashes; when
//! present, ids are validated against the declared vocab. A bare JSONL file
//! without a manifest infers its vocab from the largest id seen.

use super::{DataError, Dataset, ExampleRecord, Provenance, Result, SynthConfig, Vocab};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    user_id: u32,
    group: Vec<u32>,
    item_id: u32,
    context_id: u32,
    behaviors: Vec<u32>,
    label: u8,
}

/// Sidecar document describing a generated dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_users: u32,
    pub n_groups: u32,
    pub n_items: u32,
    pub n_contexts: u32,
    pub max_seq_len: usize,
    pub splits: BTreeMap<String, SplitInfo>,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitInfo {
    pub file: String,
    pub records: usize,
    pub sha256: String,
}

impl Manifest {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_users: self.n_users,
            n_groups: self.n_groups,
            n_items: self.n_items,
            n_contexts: self.n_contexts,
        }
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// Look for `manifest.json` next to a data file.
pub fn sibling_manifest(data_path: &Path) -> Option<Manifest> {
    let dir = data_path.parent()?;
    let mpath = dir.join("manifest.json");
    if mpath.is_file() {
        Manifest::load(&mpath).ok()
    } else {
        None
    }
}

/// Load one JSONL file. If a `manifest.json` sits next to it, ids are checked
/// against the declared vocab; otherwise the vocab is inferred as max-id + 1
/// per field. Behavior sequences keep only their most recent `max_seq_len`
/// entries.
pub fn load_jsonl(path: &Path, max_seq_len: usize) -> Result<Dataset> {
    match sibling_manifest(path) {
        Some(m) => load_jsonl_with_vocab(path, max_seq_len, m.vocab()),
        None => {
            let records = parse_lines(path, max_seq_len)?;
            let mut vocab = Vocab { n_users: 1, n_groups: 1, n_items: 1, n_contexts: 1 };
            for r in &records {
                vocab.n_users = vocab.n_users.max(r.user_id + 1);
                vocab.n_items = vocab.n_items.max(r.item_id + 1);
                vocab.n_contexts = vocab.n_contexts.max(r.context_id + 1);
                for &g in &r.group {
                    vocab.n_groups = vocab.n_groups.max(g + 1);
                }
                for &b in &r.behaviors {
                    vocab.n_items = vocab.n_items.max(b + 1);
                }
            }
            Ok(Dataset {
                records,
                vocab,
                max_seq_len,
                provenance: Provenance::Loaded { path: path.display().to_string() },
            })
        }
    }
}

/// [`load_jsonl`] against an explicitly declared vocab; out-of-range ids are
/// rejected with their line number.
pub fn load_jsonl_with_vocab(path: &Path, max_seq_len: usize, vocab: Vocab) -> Result<Dataset> {
    let records = parse_lines(path, max_seq_len)?;
    let p = || path.display().to_string();
    for (i, r) in records.iter().enumerate() {
        let line = i + 1;
        let check = |field: &'static str, id: u32, size: u32| -> Result<()> {
            if id >= size {
                return Err(DataError::Vocab { path: p(), line, field, id, size });
            }
            Ok(())
        };
        check("user_id", r.user_id, vocab.n_users)?;
        check("item_id", r.item_id, vocab.n_items)?;
        check("context_id", r.context_id, vocab.n_contexts)?;
        for &g in &r.group {
            check("group", g, vocab.n_groups)?;
        }
        for &b in &r.behaviors {
            check("behaviors", b, vocab.n_items)?;
        }
    }
    Ok(Dataset {
        records,
        vocab,
        max_seq_len,
        provenance: Provenance::Loaded { path: p() },
    })
}

fn parse_lines(path: &Path, max_seq_len: usize) -> Result<Vec<ExampleRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if raw.label > 1 {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("label must be 0 or 1, got {}", raw.label),
            });
        }
        let behaviors = if raw.behaviors.len() > max_seq_len {
            // Keep the most recent suffix.
            raw.behaviors[raw.behaviors.len() - max_seq_len..].to_vec()
        } else {
            raw.behaviors
        };
        records.push(ExampleRecord {
            user_id: raw.user_id,
            group: raw.group,
            item_id: raw.item_id,
            context_id: raw.context_id,
            behaviors,
            label: raw.label,
        });
    }
    Ok(records)
}

/// Write records as canonical JSONL (the same bytes the content hash covers).
pub fn write_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in &ds.records {
        out.push_str(&r.canonical_line());
        out.push('\n');
    }
    crate::jsonfmt::write_atomic(path, out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn tiny_synth() -> SynthConfig {
        serde_json::from_str(
            r#"{"n_users": 40, "n_items": 60, "n_groups": 4, "max_seq_len": 30}"#,
        )
        .unwrap()
    }

    #[test]
    fn empty_file_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, "").unwrap();
        let ds = load_jsonl(&p, 500).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn round_trip_preserves_hash() {
        let ds = generate_synthetic(&tiny_synth(), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_jsonl(&ds, &p).unwrap();
        let back = load_jsonl(&p, ds.max_seq_len).unwrap();
        assert_eq!(back.content_hash(), ds.content_hash());
        assert_eq!(back.records, ds.records);
    }

    #[test]
    fn long_history_truncates_to_recent_suffix() {
        let behaviors: Vec<u32> = (0..800).collect();
        let line = ExampleRecord {
            user_id: 0,
            group: vec![0],
            item_id: 1,
            context_id: 0,
            behaviors,
            label: 0,
        }
        .canonical_line();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, format!("{line}\n")).unwrap();
        let ds = load_jsonl(&p, 500).unwrap();
        assert_eq!(ds.records[0].behaviors.len(), 500);
        assert_eq!(ds.records[0].behaviors[0], 300);
        assert_eq!(*ds.records[0].behaviors.last().unwrap(), 799);
        // Loading the already-truncated sequence changes nothing.
        write_jsonl(&ds, &p).unwrap();
        let again = load_jsonl(&p, 500).unwrap();
        assert_eq!(again.records[0].behaviors, ds.records[0].behaviors);
    }

    #[test]
    fn malformed_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, "{\"user_id\":0,\"group\":[0],\"item_id\":0,\"context_id\":0,\"behaviors\":[],\"label\":0}\nnot json\n").unwrap();
        match load_jsonl(&p, 500) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_records_both_kept() {
        let r = ExampleRecord {
            user_id: 3,
            group: vec![1],
            item_id: 2,
            context_id: 0,
            behaviors: vec![4, 5],
            label: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, format!("{}\n{}\n", r.canonical_line(), r.canonical_line())).unwrap();
        let ds = load_jsonl(&p, 500).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.records[0], ds.records[1]);
    }

    #[test]
    fn vocab_violation_reports_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let r = ExampleRecord {
            user_id: 10,
            group: vec![0],
            item_id: 0,
            context_id: 0,
            behaviors: vec![],
            label: 0,
        };
        fs::write(&p, format!("{}\n", r.canonical_line())).unwrap();
        let vocab = Vocab { n_users: 5, n_groups: 2, n_items: 3, n_contexts: 1 };
        match load_jsonl_with_vocab(&p, 500, vocab) {
            Err(DataError::Vocab { line, field, id, size, .. }) => {
                assert_eq!((line, field, id, size), (1, "user_id", 10, 5));
            }
            other => panic!("expected vocab error, got {other:?}"),
        }
    }
}
