//! Append-only request journal.
//!
//! Each completed model call is appended as one JSONL line
//! `{request_hash, request, reply}` and synced before the reply is handed
//! back. A rerun pointed at the same journal replays completed calls without
//! touching the network, so a killed run resumes where it stopped. The
//! journal doubles as the per-run request/response transcript.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::client::ChatRequest;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    request_hash: String,
    request: ChatRequest,
    reply: String,
}

pub struct Journal {
    path: PathBuf,
    replies: Mutex<HashMap<String, String>>,
    file: Mutex<File>,
}

impl Journal {
    /// Opens (or creates) the journal. A torn last line left by a crash
    /// mid-write is truncated away.
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let existing = match std::fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let complete_len = existing.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        let mut replies = HashMap::new();
        for line in String::from_utf8_lossy(&existing[..complete_len]).lines() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Entry>(line) {
                Ok(entry) => {
                    replies.insert(entry.request_hash, entry.reply);
                }
                Err(e) => tracing::warn!(error = %e, "skipping unreadable journal line"),
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if complete_len < existing.len() {
            file.set_len(complete_len as u64)?;
        }
        Ok(Self {
            path,
            replies: Mutex::new(replies),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, request_hash: &str) -> Option<String> {
        self.replies.lock().expect("journal lock").get(request_hash).cloned()
    }

    pub fn len(&self) -> usize {
        self.replies.lock().expect("journal lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn record(&self, request_hash: &str, request: &ChatRequest, reply: &str) -> io::Result<()> {
        let entry = Entry {
            request_hash: request_hash.to_string(),
            request: request.clone(),
            reply: reply.to_string(),
        };
        let mut line = serde_json::to_string(&entry).map_err(io::Error::other)?;
        line.push('\n');
        {
            let mut file = self.file.lock().expect("journal lock");
            file.write_all(line.as_bytes())?;
            file.sync_data()?;
        }
        self.replies
            .lock()
            .expect("journal lock")
            .insert(request_hash.to_string(), reply.to_string());
        Ok(())
    }
}
