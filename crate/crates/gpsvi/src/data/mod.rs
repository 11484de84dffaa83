//! Impression schema, synthetic long-tail population generator, JSONL
//! ingestion, head/tail segmentation, and seeded batching.

mod batch;
mod jsonl;
mod synth;

pub use batch::{batch_iter, batch_iter_sequential, Batch};
pub use jsonl::{
    load_jsonl, load_jsonl_with_vocab, sibling_manifest, write_jsonl, Manifest, SplitInfo,
};
pub use synth::{generate_synthetic, group_signal_fraction, holdout_split, SynthConfig};

use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}:{line}: parse error: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}:{line}: {field} id {id} outside declared vocab size {size}")]
    Vocab { path: String, line: usize, field: &'static str, id: u32, size: u32 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One impression: did `user_id` (with categorical profile ids `group` and
/// behavior history `behaviors`) click `item_id` in `context_id`?
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleRecord {
    pub user_id: u32,
    pub group: Vec<u32>,
    pub item_id: u32,
    pub context_id: u32,
    pub behaviors: Vec<u32>,
    pub label: u8,
}

impl ExampleRecord {
    /// Fixed-field-order compact JSON line; this exact byte form feeds both
    /// the JSONL files and the dataset content hash.
    pub fn canonical_line(&self) -> String {
        let mut s = String::new();
        write!(s, "{{\"user_id\":{},\"group\":[", self.user_id).unwrap();
        for (i, g) in self.group.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{g}").unwrap();
        }
        write!(
            s,
            "],\"item_id\":{},\"context_id\":{},\"behaviors\":[",
            self.item_id, self.context_id
        )
        .unwrap();
        for (i, b) in self.behaviors.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{b}").unwrap();
        }
        write!(s, "],\"label\":{}}}", self.label).unwrap();
        s
    }
}

/// Declared id-space sizes; embedding tables are dimensioned from these, and
/// the loader rejects ids at or beyond them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_users: u32,
    pub n_groups: u32,
    pub n_items: u32,
    pub n_contexts: u32,
}

/// Where a dataset's records came from, for the provenance field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Generated { seed: u64 },
    Loaded { path: String },
    Derived,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<ExampleRecord>,
    pub vocab: Vocab,
    pub max_seq_len: usize,
    pub provenance: Provenance,
}

impl Dataset {
    /// SHA-256 hex digest over the canonical line serialization, one record
    /// per line with a trailing newline each.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for r in &self.records {
            hasher.update(r.canonical_line().as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            write!(hex, "{b:02x}").unwrap();
        }
        hex
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Longest observed behavior sequence per user — the interaction-count
    /// proxy the head/tail split sorts on.
    pub fn interaction_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for r in &self.records {
            let e = counts.entry(r.user_id).or_insert(0);
            *e = (*e).max(r.behaviors.len());
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Head,
    Tail,
}

/// Per-user head/tail assignment produced by [`split_head_tail`].
#[derive(Debug, Clone)]
pub struct SegmentLabel {
    map: BTreeMap<u32, Segment>,
}

impl SegmentLabel {
    pub fn get(&self, user_id: u32) -> Option<Segment> {
        self.map.get(&user_id).copied()
    }

    pub fn n_users(&self) -> usize {
        self.map.len()
    }

    pub fn n_head(&self) -> usize {
        self.map.values().filter(|s| **s == Segment::Head).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, Segment)> + '_ {
        self.map.iter().map(|(u, s)| (*u, *s))
    }
}

/// Rank users by interaction count (longest observed sequence), descending,
/// ties by ascending user id; the top `ceil(head_quantile * n_users)` are
/// Head. Record order in `ds` cannot affect the result.
pub fn split_head_tail(ds: &Dataset, head_quantile: f64) -> Result<SegmentLabel> {
    if !(head_quantile > 0.0 && head_quantile < 1.0) {
        return Err(DataError::Config(format!(
            "head_quantile must lie in (0,1), got {head_quantile}"
        )));
    }
    let counts = ds.interaction_counts();
    if counts.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut order: Vec<(u32, usize)> = counts.into_iter().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let n_head = (head_quantile * order.len() as f64).ceil() as usize;
    let map = order
        .into_iter()
        .enumerate()
        .map(|(rank, (user, _))| {
            let seg = if rank < n_head { Segment::Head } else { Segment::Tail };
            (user, seg)
        })
        .collect();
    Ok(SegmentLabel { map })
}
