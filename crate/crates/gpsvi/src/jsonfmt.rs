//! Deterministic JSON/CSV emission for run artifacts.
//!
//! Output documents preserve field insertion order and print every float with
//! 17 significant digits (`{:.16e}`), enough for exact f64 round-trips, so a
//! repeated run writes byte-identical files. Parsing of inputs stays on
//! serde_json; this module only owns the writing side.

use std::fs;
use std::io;
use std::path::Path;

/// JSON document with explicitly ordered object fields.
#[derive(Debug, Clone, PartialEq)]
pub enum JsonValue {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Array(Vec<JsonValue>),
    Object(Vec<(String, JsonValue)>),
}

impl JsonValue {
    pub fn object() -> JsonValue {
        JsonValue::Object(Vec::new())
    }

    /// Append a field; panics on duplicate keys (artifact schemas never
    /// repeat a key, so a repeat is a bug upstream).
    pub fn push(&mut self, key: &str, value: JsonValue) -> &mut Self {
        match self {
            JsonValue::Object(fields) => {
                assert!(
                    fields.iter().all(|(k, _)| k != key),
                    "duplicate JSON key {key:?}"
                );
                fields.push((key.to_string(), value));
            }
            _ => panic!("push on non-object JSON value"),
        }
        self
    }

    pub fn floats(xs: &[f64]) -> JsonValue {
        JsonValue::Array(xs.iter().map(|&x| JsonValue::Float(x)).collect())
    }

    pub fn ints(xs: &[usize]) -> JsonValue {
        JsonValue::Array(xs.iter().map(|&x| JsonValue::Int(x as i64)).collect())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out, 0);
        out.push('\n');
        out
    }

    fn render_into(&self, out: &mut String, indent: usize) {
        match self {
            JsonValue::Null => out.push_str("null"),
            JsonValue::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            JsonValue::Int(i) => out.push_str(&i.to_string()),
            JsonValue::Float(x) => out.push_str(&format_f64(*x)),
            JsonValue::Str(s) => push_escaped(out, s),
            JsonValue::Array(items) => {
                if items.is_empty() {
                    out.push_str("[]");
                } else if items.iter().all(is_leaf) {
                    // Numeric/short rows stay on one line to keep parameter
                    // dumps readable.
                    out.push('[');
                    for (i, item) in items.iter().enumerate() {
                        if i > 0 {
                            out.push_str(", ");
                        }
                        item.render_into(out, indent);
                    }
                    out.push(']');
                } else {
                    out.push_str("[\n");
                    for (i, item) in items.iter().enumerate() {
                        push_pad(out, indent + 1);
                        item.render_into(out, indent + 1);
                        if i + 1 < items.len() {
                            out.push(',');
                        }
                        out.push('\n');
                    }
                    push_pad(out, indent);
                    out.push(']');
                }
            }
            JsonValue::Object(fields) => {
                if fields.is_empty() {
                    out.push_str("{}");
                    return;
                }
                out.push_str("{\n");
                for (i, (k, v)) in fields.iter().enumerate() {
                    push_pad(out, indent + 1);
                    push_escaped(out, k);
                    out.push_str(": ");
                    v.render_into(out, indent + 1);
                    if i + 1 < fields.len() {
                        out.push(',');
                    }
                    out.push('\n');
                }
                push_pad(out, indent);
                out.push('}');
            }
        }
    }

    /// Serialize and write via a same-directory temp file plus rename, so a
    /// crash never leaves a half-written artifact behind.
    pub fn write_atomic(&self, path: &Path) -> io::Result<()> {
        write_atomic(path, self.render().as_bytes())
    }
}

fn is_leaf(v: &JsonValue) -> bool {
    !matches!(v, JsonValue::Array(_) | JsonValue::Object(_))
}

fn push_pad(out: &mut String, indent: usize) {
    for _ in 0..indent {
        out.push_str("  ");
    }
}

fn push_escaped(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                out.push_str(&format!("\\u{:04x}", c as u32));
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

/// 17-significant-digit scientific form; round-trips any finite f64 exactly.
/// Non-finite values have no JSON spelling and training aborts before writing
/// them, so they are rejected here.
pub fn format_f64(x: f64) -> String {
    assert!(x.is_finite(), "non-finite float {x} in JSON output");
    format!("{x:.16e}")
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// CSV with a fixed header; caller formats numeric cells (floats through
/// [`format_f64`]) so the byte-stability rule holds here too.
pub fn write_csv_atomic(path: &Path, header: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}
