//! Deliberately harmful packets for exercising the safety gate and the
//! rollback path. Both are validly signed, so only the student-side checks
//! can stop them.

use crate::error::{arg_err, Result};
use crate::extract::ConceptRecord;
use crate::numerics::SeededRng;
use crate::packet::{build_metadata, Clock, KnowledgePacket, PacketBody};
use crate::pipeline::TeacherSide;
use crate::task::ConceptId;
use ed25519_dalek::SigningKey;

fn sign(side: &TeacherSide, records: Vec<ConceptRecord>, clock: &Clock, key: &SigningKey) -> Result<KnowledgePacket> {
    let metadata = build_metadata("m2kt-teacher-64", "modular-arithmetic-chains", clock, &records, Vec::new());
    PacketBody::new(&side.teacher, records, &metadata)?.sign(key)
}

fn record(side: &TeacherSide, concept: ConceptId) -> Result<ConceptRecord> {
    match side.records.iter().find(|r| r.concept == concept) {
        Some(r) => Ok(r.clone()),
        None => arg_err(format!("concept {} was not extracted", concept.name())),
    }
}

/// Genuine embeddings and relevance maps, but every trace distribution is
/// rotated by `shift` symbols so the traces teach wrong answers.
pub fn corrupted_trace_packet(
    side: &TeacherSide,
    concepts: &[ConceptId],
    shift: usize,
    clock: &Clock,
    key: &SigningKey,
) -> Result<KnowledgePacket> {
    let mut records = Vec::new();
    for &c in concepts {
        let mut rec = record(side, c)?;
        for dist in rec.trace.steps.iter_mut().flatten() {
            let n = dist.len();
            dist.rotate_right(shift % n);
        }
        records.push(rec);
    }
    sign(side, records, clock, key)
}

/// Embeddings replaced by Gaussian noise scaled to `scale` safe-set
/// standard deviations per coordinate around the safe mean.
pub fn noise_embedding_packet(
    side: &TeacherSide,
    concepts: &[ConceptId],
    scale: f64,
    rng: &mut SeededRng,
    clock: &Clock,
    key: &SigningKey,
) -> Result<KnowledgePacket> {
    let safe = &side.safe_set;
    let mut records = Vec::new();
    for &c in concepts {
        let mut rec = record(side, c)?;
        for ((e, m), v) in rec.embedding.iter_mut().zip(&safe.mean).zip(&safe.variance) {
            *e = m + scale * v.sqrt() * rng.normal();
        }
        records.push(rec);
    }
    sign(side, records, clock, key)
}
