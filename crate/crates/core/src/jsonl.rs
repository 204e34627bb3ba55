//! JSONL artifacts with an optional provenance header line.
//!
//! Every stage writes one self-describing record per line. The first line of
//! a stage output may be a header object of the form `{"_provenance": {...}}`;
//! readers skip it transparently. Writes are atomic: content goes to a
//! temporary file in the destination directory which is then renamed over
//! the final path, so a crashed stage never leaves a partial artifact.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::sha256_hex;

/// Key of the header object.
pub const PROVENANCE_KEY: &str = "_provenance";

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("serializing record: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl JsonlError {
    fn io(path: &Path, source: io::Error) -> Self {
        JsonlError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Digest of one input artifact, recorded into downstream headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub name: String,
    pub sha256: String,
}

/// Header embedded as the first line of every stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub seed: u64,
    pub config_digest: String,
    pub inputs: Vec<InputDigest>,
    /// Wall-clock creation time (RFC 3339-ish, UTC seconds). The only
    /// field that legitimately differs between reruns.
    pub created_at: String,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    #[serde(rename = "_provenance")]
    provenance: Provenance,
}

fn is_header_line(line: &str) -> bool {
    line.trim_start().starts_with("{\"_provenance\"")
}

/// Reads every record of a JSONL file, skipping blank lines and the
/// provenance header.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, JsonlError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| JsonlError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| JsonlError::io(path, e))?;
        if line.trim().is_empty() || (idx == 0 && is_header_line(&line)) {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Reads the provenance header of a JSONL file, if it has one.
pub fn read_provenance(path: impl AsRef<Path>) -> Result<Option<Provenance>, JsonlError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| JsonlError::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| JsonlError::io(path, e))?;
    if !is_header_line(&first) {
        return Ok(None);
    }
    let header: HeaderLine = serde_json::from_str(first.trim()).map_err(|source| JsonlError::Parse {
        path: path.to_path_buf(),
        line: 1,
        source,
    })?;
    Ok(Some(header.provenance))
}

/// SHA-256 over the file's content lines, excluding a provenance header, so
/// that an input's digest does not change when only its timestamp does.
pub fn content_digest(path: impl AsRef<Path>) -> Result<String, JsonlError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| JsonlError::io(path, e))?;
    let text = String::from_utf8_lossy(&bytes);
    let body = match text.split_once('\n') {
        Some((first, rest)) if is_header_line(first) => rest,
        _ => text.as_ref(),
    };
    Ok(sha256_hex(body.as_bytes()))
}

/// Serializes records to JSONL text, one record per line, with an optional
/// header line.
pub fn to_jsonl_string<T: Serialize>(header: Option<&Provenance>, records: &[T]) -> Result<String, JsonlError> {
    let mut out = String::new();
    if let Some(provenance) = header {
        out.push_str(&serde_json::to_string(&HeaderLine {
            provenance: provenance.clone(),
        })?);
        out.push('\n');
    }
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}

/// Write-temp-then-rename.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<(), JsonlError> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| JsonlError::io(&dir, e))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".perfforge-")
        .suffix(".tmp")
        .tempfile_in(&dir)
        .map_err(|e| JsonlError::io(&dir, e))?;
    tmp.write_all(contents).map_err(|e| JsonlError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| JsonlError::io(path, e))?;
    tmp.persist(path).map_err(|e| JsonlError::io(path, e.error))?;
    Ok(())
}

pub fn write_jsonl_atomic<T: Serialize>(
    path: impl AsRef<Path>,
    header: Option<&Provenance>,
    records: &[T],
) -> Result<(), JsonlError> {
    let text = to_jsonl_string(header, records)?;
    write_atomic(path, text.as_bytes())
}

/// Removes the `created_at` field from a provenance header line so two
/// artifacts can be compared byte for byte.
pub fn strip_timestamp(text: &str) -> String {
    let mut lines = text.split_inclusive('\n');
    let Some(first) = lines.next() else {
        return String::new();
    };
    let rest: String = lines.collect();
    // CSV artifacts carry the header as a `# ` comment line.
    let (prefix, first_trimmed) = match first.trim_end_matches('\n').strip_prefix("# ") {
        Some(line) => ("# ", line),
        None => ("", first.trim_end_matches('\n')),
    };
    if is_header_line(first_trimmed) {
        if let Ok(mut value) = serde_json::from_str::<serde_json::Value>(first_trimmed) {
            if let Some(obj) = value.get_mut(PROVENANCE_KEY).and_then(serde_json::Value::as_object_mut) {
                obj.remove("created_at");
            }
            return format!("{prefix}{value}\n{rest}");
        }
    }
    format!("{first}{rest}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        id: u32,
        name: String,
    }

    fn header(ts: &str) -> Provenance {
        Provenance {
            tool: "perfforge".into(),
            version: "0.1.0".into(),
            stage: "test".into(),
            seed: 7,
            config_digest: "abc".into(),
            inputs: vec![],
            created_at: ts.into(),
        }
    }

    #[test]
    fn header_is_skipped_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let rows = vec![
            Row {
                id: 1,
                name: "a".into(),
            },
            Row {
                id: 2,
                name: "b".into(),
            },
        ];
        write_jsonl_atomic(&path, Some(&header("t0")), &rows).unwrap();
        let back: Vec<Row> = read_jsonl(&path).unwrap();
        assert_eq!(back, rows);
        assert_eq!(read_provenance(&path).unwrap().unwrap().seed, 7);
    }

    #[test]
    fn digest_ignores_header() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let rows = vec![Row {
            id: 1,
            name: "x".into(),
        }];
        write_jsonl_atomic(&a, Some(&header("t0")), &rows).unwrap();
        write_jsonl_atomic(&b, Some(&header("t1")), &rows).unwrap();
        assert_eq!(content_digest(&a).unwrap(), content_digest(&b).unwrap());
        let ta = fs::read_to_string(&a).unwrap();
        let tb = fs::read_to_string(&b).unwrap();
        assert_ne!(ta, tb);
        assert_eq!(strip_timestamp(&ta), strip_timestamp(&tb));
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"id\":1,\"name\":\"a\"}\nnot json\n").unwrap();
        match read_jsonl::<Row>(&path) {
            Err(JsonlError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
