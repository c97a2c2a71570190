//! Content-addressed packet store: `<hex digest>.m2kt` files plus an
//! `index.json` summary, guarded by one mutex.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{info, warn};
use m2kt::packet::{digest_bytes, public_key_from_hex, verify_bytes, RejectReason, PUBLIC_KEY_LEN};
use serde::{Deserialize, Serialize};

use crate::Result;

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketSummary {
    pub digest: String,
    pub teacher_id: String,
    pub timestamp: String,
    pub concept_count: usize,
}

/// Why a publish was refused; the string form goes on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Refusal {
    Untrusted(String),
    Invalid(String),
}

impl Refusal {
    pub fn code(&self) -> &'static str {
        match self {
            Refusal::Untrusted(_) => "untrusted",
            Refusal::Invalid(_) => "invalid",
        }
    }

    pub fn wire(&self) -> String {
        match self {
            Refusal::Untrusted(d) | Refusal::Invalid(d) => format!("{}: {d}", self.code()),
        }
    }
}

pub struct Registry {
    dir: PathBuf,
    trusted: Vec<[u8; PUBLIC_KEY_LEN]>,
    index: Mutex<BTreeMap<String, PacketSummary>>,
}

/// One hex-encoded 32-byte key per line; blank lines and `#` comments are ignored.
pub fn load_trusted_keys(path: &Path) -> Result<Vec<[u8; PUBLIC_KEY_LEN]>> {
    let text = fs::read_to_string(path)?;
    let mut keys = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        keys.push(public_key_from_hex(line)?);
    }
    Ok(keys)
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, dir.join(name))
}

impl Registry {
    /// Opens (or creates) a registry directory. The index is rebuilt from
    /// the stored files, so a crash between writing a packet and updating
    /// the index cannot leave them inconsistent. Files that no longer verify
    /// under the trusted keys are left on disk but not indexed.
    pub fn open(dir: &Path, trusted: Vec<[u8; PUBLIC_KEY_LEN]>) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut index = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            if name.ends_with(".tmp") {
                fs::remove_file(&path)?;
                continue;
            }
            let Some(stem) = name.strip_suffix(".m2kt") else { continue };
            let bytes = fs::read(&path)?;
            if hex::encode(digest_bytes(&bytes)) != stem {
                warn!("skipping {name}: digest does not match its name");
                continue;
            }
            match verify_bytes(&bytes) {
                Ok(p) if trusted.contains(&p.public_key) => {
                    index.insert(stem.to_string(), summary(stem, &p));
                }
                _ => warn!("skipping {name}: no longer verifies under the trusted keys"),
            }
        }
        let registry = Self {
            dir: dir.to_path_buf(),
            trusted,
            index: Mutex::new(index),
        };
        registry.write_index(&registry.index.lock().unwrap())?;
        Ok(registry)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_index(&self, index: &BTreeMap<String, PacketSummary>) -> Result<()> {
        let entries: Vec<&PacketSummary> = index.values().collect();
        write_atomic(&self.dir, INDEX_FILE, &serde_json::to_vec_pretty(&entries)?)?;
        Ok(())
    }

    /// Verifies and stores a packet, returning its hex digest. Publishing a
    /// packet that is already stored returns the same digest.
    pub fn publish(&self, bytes: &[u8]) -> Result<std::result::Result<String, Refusal>> {
        let packet = match verify_bytes(bytes) {
            Ok(p) => p,
            Err(RejectReason::Signature) => return Ok(Err(Refusal::Untrusted("bad signature".into()))),
            Err(r) => return Ok(Err(Refusal::Invalid(r.to_string()))),
        };
        if !self.trusted.contains(&packet.public_key) {
            return Ok(Err(Refusal::Untrusted(format!(
                "signer {} is not trusted",
                hex::encode(packet.public_key)
            ))));
        }
        let digest = hex::encode(digest_bytes(bytes));
        let mut index = self.index.lock().unwrap();
        if !index.contains_key(&digest) {
            write_atomic(&self.dir, &format!("{digest}.m2kt"), bytes)?;
            index.insert(digest.clone(), summary(&digest, &packet));
            self.write_index(&index)?;
            info!("stored packet {digest}");
        }
        Ok(Ok(digest))
    }

    /// Stored bytes for a digest, re-checked against the digest.
    pub fn fetch(&self, digest: &str) -> Result<Option<Vec<u8>>> {
        if !self.index.lock().unwrap().contains_key(digest) {
            return Ok(None);
        }
        let bytes = fs::read(self.dir.join(format!("{digest}.m2kt")))?;
        if hex::encode(digest_bytes(&bytes)) != digest {
            warn!("stored packet {digest} no longer matches its digest");
            return Ok(None);
        }
        Ok(Some(bytes))
    }

    /// Summaries ordered by digest.
    pub fn list(&self) -> Vec<PacketSummary> {
        self.index.lock().unwrap().values().cloned().collect()
    }
}

fn summary(digest: &str, p: &m2kt::packet::KnowledgePacket) -> PacketSummary {
    PacketSummary {
        digest: digest.to_string(),
        teacher_id: p.body.blob.teacher_id.clone(),
        timestamp: p.body.blob.timestamp.clone(),
        concept_count: p.body.concepts.len(),
    }
}
