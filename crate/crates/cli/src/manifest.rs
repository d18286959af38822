use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha1::{Digest, Sha1};

/// Record written to every run directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config: String,
    pub config_hash: String,
    pub seed: u64,
    pub start_unix: u64,
    pub end_unix: u64,
    pub resumed_from: Option<String>,
    pub start_step: u64,
    pub end_step: u64,
    pub loss_csv: String,
    pub checkpoints: Vec<String>,
    pub final_checkpoint: String,
}

/// Same digest `git hash-object` gives for a file with this content.
pub fn git_blob_hash(content: &str) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn display(p: &Path) -> String {
    p.display().to_string()
}
