use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{write_file, HarnessError};

/// Content hash of the library sources this binary was built from.
pub fn code_hash() -> &'static str {
    env!("OTP_CODE_HASH")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Record of one command invocation.
///
/// `hash` covers everything that determines the outputs (command, code
/// version, resolved configuration, seeds and input digests) but not the
/// wall-clock timestamps or the output location, so repeating a run
/// reproduces the same hash and therefore byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub code_hash: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// `(path, sha256)` of every file the command read; only the digests
    /// enter the hash.
    pub inputs: Vec<(String, String)>,
    pub outdir: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// `ok`, or why the command stopped early.
    pub status: String,
    pub hash: String,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        seeds: Vec<u64>,
        inputs: Vec<(String, String)>,
        outdir: &Path,
    ) -> Self {
        let mut m = RunManifest {
            schema: "manifest/1".into(),
            command: command.into(),
            code_hash: code_hash().into(),
            config,
            seeds,
            inputs,
            outdir: outdir.display().to_string(),
            started_unix: now_unix(),
            finished_unix: 0,
            status: "ok".into(),
            hash: String::new(),
        };
        m.hash = m.content_hash();
        m
    }

    pub fn content_hash(&self) -> String {
        let content = serde_json::json!({
            "schema": self.schema,
            "command": self.command,
            "code_hash": self.code_hash,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs.iter().map(|(_, digest)| digest).collect::<Vec<_>>(),
        });
        sha256_hex(content.to_string().as_bytes())
    }

    /// Short form used inside emitted files.
    pub fn short_hash(&self) -> &str {
        &self.hash[..16]
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`.
    pub fn finish(&mut self, dir: &Path) -> Result<(), HarnessError> {
        self.finished_unix = now_unix();
        let text = serde_json::to_string_pretty(self)?;
        write_file(&dir.join("manifest.json"), text.as_bytes())
    }
}
