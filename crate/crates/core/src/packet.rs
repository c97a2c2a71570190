//! Knowledge packets: the signed bundle of concept embeddings, relevance
//! maps, reasoning traces and metadata, with its canonical `.m2kt` encoding.

use std::fmt;

use chrono::{DateTime, SecondsFormat, Utc};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::error::{arg_err, M2ktError, Result};
use crate::extract::{ConceptRecord, ReasoningTrace};
use crate::numerics::SeededRng;
use crate::substrate::SubstrateModel;
use crate::task::{ConceptId, INPUT_DIM, INSTANCES_PER_CONCEPT, SYMBOLS, TRACE_STEPS};

pub const PACKET_MAGIC: &[u8; 4] = b"M2KT";
pub const SCHEMA_VERSION: u16 = 1;
pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
/// Tolerance for sums of f32-quantized distributions.
pub const SUM_TOLERANCE: f64 = 1e-5;

/// Source of packet timestamps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Clock {
    System,
    Fixed(String),
}

impl Clock {
    pub fn fixed(timestamp: &str) -> Result<Self> {
        DateTime::parse_from_rfc3339(timestamp)
            .map_err(|e| M2ktError::Argument(format!("timestamp {timestamp:?}: {e}")))?;
        Ok(Clock::Fixed(timestamp.to_string()))
    }

    pub fn now(&self) -> String {
        match self {
            Clock::System => Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
            Clock::Fixed(s) => s.clone(),
        }
    }
}

/// The JSON metadata blob carried on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataBlob {
    pub teacher_id: String,
    pub timestamp: String,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Full metadata view: the wire blob plus the per-concept fields that the
/// encoding stores alongside each concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketMetadata {
    pub teacher_id: String,
    pub timestamp: String,
    pub domain: String,
    pub concept_names: Vec<String>,
    pub confidences: Vec<f64>,
    pub probe_seeds: Vec<u64>,
    pub schema_version: u16,
    pub warnings: Vec<String>,
}

impl PacketMetadata {
    pub fn probe_seed(&self, concept: ConceptId) -> Result<u64> {
        let name = concept.name();
        self.concept_names
            .iter()
            .position(|n| *n == name)
            .map(|i| self.probe_seeds[i])
            .ok_or_else(|| M2ktError::Argument(format!("concept {name} is not in the packet")))
    }
}

/// Packet contents before signing.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketBody {
    pub latent_dim: usize,
    pub concepts: Vec<ConceptRecord>,
    pub blob: MetadataBlob,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgePacket {
    pub body: PacketBody,
    pub public_key: [u8; PUBLIC_KEY_LEN],
    pub signature: [u8; SIGNATURE_LEN],
}

fn quantize(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

/// Assembles metadata for the extracted concepts. Warnings (e.g. degenerate
/// teacher latents) travel in the blob.
pub fn build_metadata(
    teacher_id: &str,
    domain: &str,
    clock: &Clock,
    records: &[ConceptRecord],
    warnings: Vec<String>,
) -> PacketMetadata {
    PacketMetadata {
        teacher_id: teacher_id.to_string(),
        timestamp: clock.now(),
        domain: domain.to_string(),
        concept_names: records.iter().map(|r| r.concept.name()).collect(),
        confidences: records.iter().map(|r| r.confidence).collect(),
        probe_seeds: records.iter().map(|r| r.trace.probe_seed).collect(),
        schema_version: SCHEMA_VERSION,
        warnings,
    }
}

impl PacketBody {
    /// Builds a body, rounding every float to f32 so that the in-memory
    /// packet equals what a receiver decodes.
    pub fn new(teacher: &SubstrateModel, mut concepts: Vec<ConceptRecord>, metadata: &PacketMetadata) -> Result<Self> {
        if metadata.concept_names.len() != concepts.len()
            || metadata.confidences.len() != concepts.len()
            || metadata.probe_seeds.len() != concepts.len()
        {
            return arg_err("metadata lists do not match the concept count");
        }
        for (rec, ((name, conf), seed)) in concepts.iter_mut().zip(
            metadata
                .concept_names
                .iter()
                .zip(&metadata.confidences)
                .zip(&metadata.probe_seeds),
        ) {
            if rec.concept.name() != *name || rec.trace.probe_seed != *seed {
                return arg_err(format!("metadata does not describe concept {}", rec.concept.name()));
            }
            rec.confidence = *conf;
            quantize(&mut rec.embedding);
            quantize(&mut rec.relevance);
            rec.confidence = rec.confidence as f32 as f64;
            for step in &mut rec.trace.steps {
                for dist in step {
                    quantize(dist);
                }
            }
        }
        Ok(Self {
            latent_dim: teacher.latent_dim(),
            concepts,
            blob: MetadataBlob {
                teacher_id: metadata.teacher_id.clone(),
                timestamp: metadata.timestamp.clone(),
                domain: metadata.domain.clone(),
                warnings: metadata.warnings.clone(),
            },
        })
    }

    pub fn metadata(&self) -> PacketMetadata {
        PacketMetadata {
            teacher_id: self.blob.teacher_id.clone(),
            timestamp: self.blob.timestamp.clone(),
            domain: self.blob.domain.clone(),
            concept_names: self.concepts.iter().map(|r| r.concept.name()).collect(),
            confidences: self.concepts.iter().map(|r| r.confidence).collect(),
            probe_seeds: self.concepts.iter().map(|r| r.trace.probe_seed).collect(),
            schema_version: SCHEMA_VERSION,
            warnings: self.blob.warnings.clone(),
        }
    }

    /// Canonical byte encoding of everything the signature covers except the key.
    pub fn encode_canonical(&self) -> Result<Vec<u8>> {
        if self.concepts.is_empty() {
            return Err(M2ktError::Encode("a packet needs at least one concept".into()));
        }
        let mut w = Writer::default();
        w.bytes(PACKET_MAGIC);
        w.u16(SCHEMA_VERSION);
        w.u32(self.concepts.len() as u32);
        w.u32(self.latent_dim as u32);
        for rec in &self.concepts {
            let name = rec.concept.name();
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            if rec.embedding.len() != self.latent_dim || rec.relevance.len() != INPUT_DIM {
                return Err(M2ktError::Encode(format!("concept {name} has wrong vector lengths")));
            }
            write_f32s(&mut w, &rec.embedding, "embedding")?;
            write_f32s(&mut w, &rec.relevance, "relevance")?;
            let t = &rec.trace;
            w.u64(t.probe_seed);
            w.u32(t.probe_count as u32);
            w.u32(t.steps.len() as u32);
            for step in &t.steps {
                if step.len() != t.probe_count {
                    return Err(M2ktError::Encode(format!("trace of {name} has ragged steps")));
                }
                for dist in step {
                    if dist.len() != SYMBOLS {
                        return Err(M2ktError::Encode(format!("trace of {name} has a short distribution")));
                    }
                    write_f32s(&mut w, dist, "trace")?;
                }
            }
            write_f32s(&mut w, &[rec.confidence], "confidence")?;
        }
        let json = serde_json::to_vec(&self.blob)?;
        w.u32(json.len() as u32);
        w.bytes(&json);
        Ok(w.buf)
    }

    pub fn sign(self, key: &SigningKey) -> Result<KnowledgePacket> {
        let public_key = key.verifying_key().to_bytes();
        let mut bytes = self.encode_canonical()?;
        bytes.extend_from_slice(&public_key);
        let signature = key.sign(&bytes).to_bytes();
        Ok(KnowledgePacket {
            body: self,
            public_key,
            signature,
        })
    }
}

fn write_f32s(w: &mut Writer, values: &[f64], what: &str) -> Result<()> {
    for &v in values {
        let q = v as f32;
        if !q.is_finite() {
            return Err(M2ktError::Encode(format!("non-finite {what} value")));
        }
        w.f32(q);
    }
    Ok(())
}

fn read_f32s(r: &mut Reader, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| r.f32().map(f64::from)).collect()
}

/// Why a packet failed verification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    Malformed(String),
    Signature,
    Untrusted,
    Invariant(String),
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::Malformed(_) => "malformed",
            RejectReason::Signature => "signature",
            RejectReason::Untrusted => "untrusted",
            RejectReason::Invariant(_) => "invariant",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Malformed(m) | RejectReason::Invariant(m) => write!(f, "{}: {m}", self.code()),
            _ => f.write_str(self.code()),
        }
    }
}

impl KnowledgePacket {
    pub fn metadata(&self) -> PacketMetadata {
        self.body.metadata()
    }

    pub fn concept_ids(&self) -> Vec<ConceptId> {
        self.body.concepts.iter().map(|r| r.concept).collect()
    }

    pub fn record(&self, concept: ConceptId) -> Option<&ConceptRecord> {
        self.body.concepts.iter().find(|r| r.concept == concept)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut bytes = self.body.encode_canonical()?;
        bytes.extend_from_slice(&self.public_key);
        bytes.extend_from_slice(&self.signature);
        Ok(bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != PACKET_MAGIC {
            return Err(M2ktError::Decode("not an M2KT packet".into()));
        }
        let version = r.u16()?;
        if version != SCHEMA_VERSION {
            return Err(M2ktError::Decode(format!("unsupported schema version {version}")));
        }
        let count = r.u32()? as usize;
        let latent_dim = r.u32()? as usize;
        if count == 0 || latent_dim == 0 {
            return Err(M2ktError::Decode("empty packet".into()));
        }
        let mut concepts = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| M2ktError::Decode("concept name is not UTF-8".into()))?;
            let concept: ConceptId = name
                .parse()
                .map_err(|_| M2ktError::Decode(format!("unknown concept {name:?}")))?;
            if latent_dim.saturating_mul(4) > r.remaining() {
                return Err(M2ktError::Decode("embedding exceeds input".into()));
            }
            let embedding = read_f32s(&mut r, latent_dim)?;
            let relevance = read_f32s(&mut r, INPUT_DIM)?;
            let probe_seed = r.u64()?;
            let probe_count = r.u32()? as usize;
            let step_count = r.u32()? as usize;
            if step_count != TRACE_STEPS {
                return Err(M2ktError::Decode(format!("trace has {step_count} steps")));
            }
            if probe_count.saturating_mul(step_count * SYMBOLS * 4) > r.remaining() {
                return Err(M2ktError::Decode("trace exceeds input".into()));
            }
            let mut steps = Vec::with_capacity(step_count);
            for _ in 0..step_count {
                steps.push(
                    (0..probe_count)
                        .map(|_| read_f32s(&mut r, SYMBOLS))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            let confidence = r.f32()? as f64;
            concepts.push(ConceptRecord {
                concept,
                embedding,
                relevance,
                trace: ReasoningTrace {
                    probe_seed,
                    probe_count,
                    steps,
                },
                confidence,
            });
        }
        let json_len = r.count(1)?;
        let json = r.take(json_len)?;
        let blob: MetadataBlob = serde_json::from_slice(json)
            .map_err(|e| M2ktError::Decode(format!("metadata: {e}")))?;
        if serde_json::to_vec(&blob)? != json {
            return Err(M2ktError::Decode("metadata JSON is not in canonical form".into()));
        }
        let public_key = r.take(PUBLIC_KEY_LEN)?.try_into().unwrap();
        let signature = r.take(SIGNATURE_LEN)?.try_into().unwrap();
        r.finish()?;
        Ok(Self {
            body: PacketBody {
                latent_dim,
                concepts,
                blob,
            },
            public_key,
            signature,
        })
    }

    /// Checks the signature over the re-encoded body and every structural
    /// invariant. Returns the first failure found.
    pub fn verify(&self) -> std::result::Result<(), RejectReason> {
        let mut signed = self
            .body
            .encode_canonical()
            .map_err(|e| RejectReason::Malformed(e.to_string()))?;
        signed.extend_from_slice(&self.public_key);
        let key = VerifyingKey::from_bytes(&self.public_key).map_err(|_| RejectReason::Signature)?;
        key.verify_strict(&signed, &Signature::from_bytes(&self.signature))
            .map_err(|_| RejectReason::Signature)?;
        self.check_invariants().map_err(RejectReason::Invariant)
    }

    /// As [`verify`](Self::verify), additionally requiring the signer to be trusted.
    pub fn verify_trusted(&self, trusted: &[[u8; PUBLIC_KEY_LEN]]) -> std::result::Result<(), RejectReason> {
        self.verify()?;
        if !trusted.contains(&self.public_key) {
            return Err(RejectReason::Untrusted);
        }
        Ok(())
    }

    fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut seen = Vec::new();
        for rec in &self.body.concepts {
            let name = rec.concept.name();
            if seen.contains(&rec.concept) {
                return Err(format!("concept {name} appears twice"));
            }
            seen.push(rec.concept);
            if !rec.embedding.iter().all(|v| v.is_finite()) {
                return Err(format!("{name}: non-finite embedding"));
            }
            if rec.relevance.iter().any(|v| !(*v >= 0.0)) {
                return Err(format!("{name}: negative relevance"));
            }
            let total: f64 = rec.relevance.iter().sum();
            if (total - 1.0).abs() > SUM_TOLERANCE {
                return Err(format!("{name}: relevance sums to {total}"));
            }
            if !(0.0..=1.0).contains(&rec.confidence) {
                return Err(format!("{name}: confidence {} outside [0,1]", rec.confidence));
            }
            let t = &rec.trace;
            if t.probe_count == 0 || t.probe_count > INSTANCES_PER_CONCEPT {
                return Err(format!("{name}: probe count {}", t.probe_count));
            }
            for dist in t.steps.iter().flatten() {
                if dist.iter().any(|p| !(*p >= 0.0)) {
                    return Err(format!("{name}: negative trace probability"));
                }
                let s: f64 = dist.iter().sum();
                if (s - 1.0).abs() > SUM_TOLERANCE {
                    return Err(format!("{name}: trace distribution sums to {s}"));
                }
            }
        }
        if self.body.blob.teacher_id.is_empty() {
            return Err("empty teacher id".into());
        }
        if DateTime::parse_from_rfc3339(&self.body.blob.timestamp).is_err() {
            return Err("timestamp is not RFC3339".into());
        }
        Ok(())
    }

    /// Total trace entries (concepts × probes × steps).
    pub fn trace_entries(&self) -> usize {
        self.body.concepts.iter().map(|r| r.trace.entry_count()).sum()
    }

    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(digest_bytes(&self.encode()?))
    }

    pub fn digest_hex(&self) -> Result<String> {
        Ok(hex::encode(self.digest()?))
    }
}

/// Decodes and verifies in one step; decoding failures count as rejection.
pub fn verify_bytes(bytes: &[u8]) -> std::result::Result<KnowledgePacket, RejectReason> {
    let packet = KnowledgePacket::decode(bytes).map_err(|e| RejectReason::Malformed(e.to_string()))?;
    packet.verify()?;
    Ok(packet)
}

pub fn digest_bytes(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Deterministic signing key derived from a seed.
pub fn signing_key_from_seed(seed: u64) -> SigningKey {
    let mut rng = SeededRng::new(seed);
    let mut secret = [0u8; 32];
    for chunk in secret.chunks_mut(8) {
        chunk.copy_from_slice(&rng.next_u64().to_le_bytes());
    }
    SigningKey::from_bytes(&secret)
}

pub fn signing_key_from_hex(text: &str) -> Result<SigningKey> {
    let bytes = hex::decode(text.trim()).map_err(|e| M2ktError::Key(e.to_string()))?;
    let secret: [u8; 32] = bytes
        .try_into()
        .map_err(|_| M2ktError::Key("private key must be 32 bytes".into()))?;
    Ok(SigningKey::from_bytes(&secret))
}

pub fn public_key_from_hex(text: &str) -> Result<[u8; PUBLIC_KEY_LEN]> {
    let bytes = hex::decode(text.trim()).map_err(|e| M2ktError::Key(e.to_string()))?;
    let key: [u8; PUBLIC_KEY_LEN] = bytes
        .try_into()
        .map_err(|_| M2ktError::Key("public key must be 32 bytes".into()))?;
    VerifyingKey::from_bytes(&key).map_err(|e| M2ktError::Key(e.to_string()))?;
    Ok(key)
}
