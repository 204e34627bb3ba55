//! Provenance headers and atomic artifact writes.

use std::path::Path;

use perfforge_core::jsonl::{self, InputDigest, Provenance};
use perfforge_core::sha256_hex;
use serde::Serialize;

use crate::error::{StageError, StageResult};

pub struct Artifact {
    stage: &'static str,
    seed: u64,
    config_digest: String,
    inputs: Vec<InputDigest>,
}

fn display_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn dir_digest(dir: &Path) -> std::io::Result<String> {
    fn walk(root: &Path, dir: &Path, lines: &mut Vec<String>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, lines)?;
            } else {
                let rel = path.strip_prefix(root).unwrap_or(&path).display().to_string();
                lines.push(format!("{rel}\t{}", sha256_hex(std::fs::read(&path)?)));
            }
        }
        Ok(())
    }
    let mut lines = Vec::new();
    walk(dir, dir, &mut lines)?;
    lines.sort();
    Ok(sha256_hex(lines.join("\n")))
}

impl Artifact {
    /// `settings` is the stage's effective configuration after merging the
    /// config file and flags; its JSON encoding is digested into the header.
    pub fn new(stage: &'static str, seed: u64, settings: &impl Serialize) -> Self {
        let encoded = serde_json::to_vec(settings).expect("settings serialize");
        Self {
            stage,
            seed,
            config_digest: sha256_hex(encoded),
            inputs: Vec::new(),
        }
    }

    /// Records the digest of an input file or directory (missing → input error).
    pub fn input(&mut self, path: &Path) -> StageResult<()> {
        if !path.exists() {
            return Err(StageError::input(format!("missing input {}", path.display())));
        }
        let sha256 = if path.is_dir() {
            dir_digest(path)?
        } else {
            jsonl::content_digest(path)?
        };
        self.inputs.push(InputDigest {
            name: display_name(path),
            sha256,
        });
        Ok(())
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            tool: "perfforge".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            stage: self.stage.into(),
            seed: self.seed,
            config_digest: self.config_digest.clone(),
            inputs: self.inputs.clone(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn write_jsonl<T: Serialize>(&self, path: &Path, records: &[T]) -> StageResult<()> {
        jsonl::write_jsonl_atomic(path, Some(&self.provenance()), records)?;
        Ok(())
    }

    /// CSV with the provenance header as a leading `# ` comment line.
    pub fn write_csv(&self, path: &Path, body: &str) -> StageResult<()> {
        let header = serde_json::json!({ jsonl::PROVENANCE_KEY: self.provenance() });
        let text = format!("# {header}\n{body}");
        jsonl::write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

/// Prints the stage's machine-readable summary as one JSON line.
pub fn summary(stage: &str, value: serde_json::Value) {
    let mut obj = serde_json::Map::new();
    obj.insert("stage".into(), stage.into());
    if let serde_json::Value::Object(fields) = value {
        obj.extend(fields);
    }
    println!("{}", serde_json::Value::Object(obj));
}

/// Reads a JSONL input, reporting a missing file as an input error.
pub fn read_input<T: serde::de::DeserializeOwned>(path: &Path) -> StageResult<Vec<T>> {
    if !path.exists() {
        return Err(StageError::input(format!("missing input {}", path.display())));
    }
    Ok(jsonl::read_jsonl(path)?)
}

/// Finishes an in-memory CSV writer.
pub fn finish_csv(writer: csv::Writer<Vec<u8>>) -> StageResult<String> {
    let bytes = writer
        .into_inner()
        .map_err(|e| StageError::new(crate::error::ExitKind::Environment, anyhow::anyhow!("{e}")))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}
