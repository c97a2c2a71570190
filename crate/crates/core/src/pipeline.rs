//! End-to-end orchestration: train, extract, package, transport, ingest,
//! verify, distill, report. One master seed determines every artifact.

use std::collections::BTreeMap;
use std::io;
use std::path::PathBuf;

use log::info;
use serde::{Deserialize, Serialize};

use crate::alignment::{ingest_packet, AlignmentConfig, AlignmentState, IngestOutcome};
use crate::error::{M2ktError, Result};
use crate::extract::{extract_concept, ConceptRecord, ExtractionConfig, SafeSetModel};
use crate::kd::{generate_soft_labels, train_kd, KdConfig, KdResult};
use crate::numerics::derive_seed;
use crate::packet::{build_metadata, signing_key_from_seed, Clock, KnowledgePacket, PacketBody};
use crate::substrate::{train_model, Role, SubstrateModel, TrainConfig};
use crate::task::{encode_input, enumerate_concept_inputs, probes_from_seed, ConceptId};
use crate::verify::{
    accuracy_map, concept_kl, data_usage_report, mean_accuracy, retention_drop, safety_audit,
    transfer_efficiency, KdSummary, LossSummary, NormalizedView, VerificationReport, VerifierConfig,
};
use ed25519_dalek::SigningKey;

const TEACHER_STREAM: u64 = 1;
const STUDENT_STREAM: u64 = 2;
const EXTRACT_STREAM: u64 = 3;
const ALIGN_STREAM: u64 = 4;
const KD_STREAM: u64 = 5;
const KEY_STREAM: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketConfig {
    pub teacher_id: String,
    pub domain: String,
    /// Concepts carried by the packet.
    pub transmitted: Vec<ConceptId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyConfig {
    /// τ = margin × largest Mahalanobis distance among the teacher's own embeddings.
    pub tau_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerConfig {
    pub address: String,
    /// Route the packet through a loopback broker during `pipeline`.
    pub round_trip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub output_dir: PathBuf,
    pub signing_key: PathBuf,
    pub trusted_keys: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub extraction: ExtractionConfig,
    pub packet: PacketConfig,
    pub safety: SafetyConfig,
    pub alignment: AlignmentConfig,
    pub verifier: VerifierConfig,
    pub kd: KdConfig,
    pub broker: BrokerConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut config = Self {
            seed: 2024,
            teacher: TrainConfig::teacher_default(),
            student: TrainConfig::student_default(),
            extraction: ExtractionConfig::default(),
            packet: PacketConfig {
                teacher_id: "m2kt-teacher-64".into(),
                domain: "modular-arithmetic-chains".into(),
                transmitted: ConceptId::off_diagonal(),
            },
            safety: SafetyConfig { tau_margin: 1.5 },
            alignment: AlignmentConfig::default(),
            verifier: VerifierConfig::default(),
            kd: KdConfig::default(),
            broker: BrokerConfig {
                address: "127.0.0.1:7878".into(),
                round_trip: true,
            },
            paths: PathsConfig {
                output_dir: "m2kt-out".into(),
                signing_key: "m2kt-out/teacher.key".into(),
                trusted_keys: "m2kt-out/trusted_keys.txt".into(),
            },
        };
        config.resolve_seeds();
        config
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut config: Self =
            serde_json::from_str(text).map_err(|e| M2ktError::Config(e.to_string()))?;
        config.resolve_seeds();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Derives every component seed from the master seed.
    pub fn resolve_seeds(&mut self) {
        self.teacher.seed = derive_seed(self.seed, TEACHER_STREAM);
        self.student.seed = derive_seed(self.seed, STUDENT_STREAM);
        self.extraction.seed = derive_seed(self.seed, EXTRACT_STREAM);
        self.alignment.seed = derive_seed(self.seed, ALIGN_STREAM);
        self.kd.seed = derive_seed(self.seed, KD_STREAM);
    }

    pub fn signing_key(&self) -> SigningKey {
        signing_key_from_seed(derive_seed(self.seed, KEY_STREAM))
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.alignment.weights.validate()?;
        self.verifier.validate()?;
        if self.packet.transmitted.is_empty() {
            return Err(M2ktError::Config("no concepts to transmit".into()));
        }
        if !(self.safety.tau_margin > 0.0) {
            return Err(M2ktError::Config("tau margin must be positive".into()));
        }
        if !(self.kd.temperature > 0.0) {
            return Err(M2ktError::Config("distillation temperature must be positive".into()));
        }
        let e = &self.extraction;
        if e.embedding_probes == 0 || e.trace_probes == 0 || e.clusters == 0 {
            return Err(M2ktError::Config("extraction counts must be positive".into()));
        }
        Ok(())
    }
}

/// Teacher-side artifacts.
#[derive(Debug, Clone)]
pub struct TeacherSide {
    pub teacher: SubstrateModel,
    pub teacher_accuracy: f64,
    /// Records for every concept the teacher knows.
    pub records: Vec<ConceptRecord>,
    pub warnings: Vec<String>,
    pub safe_set: SafeSetModel,
}

/// Extracts all concepts and fits the safe set on their embeddings.
pub fn extract_all(teacher: SubstrateModel, config: &PipelineConfig) -> Result<TeacherSide> {
    let teacher_accuracy = teacher.accuracy(&ConceptId::all().collect::<Vec<_>>())?;
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for c in ConceptId::all() {
        let (rec, degenerate) = extract_concept(&teacher, c, &config.extraction)?;
        if degenerate {
            warnings.push(format!("degenerate latents for {}", c.name()));
        }
        records.push(rec);
    }
    let embeddings: Vec<Vec<f64>> = records.iter().map(|r| r.embedding.clone()).collect();
    let safe_set = SafeSetModel::fit_with_margin(&embeddings, config.safety.tau_margin)?;
    Ok(TeacherSide {
        teacher,
        teacher_accuracy,
        records,
        warnings,
        safe_set,
    })
}

/// Builds and signs a packet carrying the configured concepts.
pub fn package(
    side: &TeacherSide,
    config: &PipelineConfig,
    clock: &Clock,
    key: &SigningKey,
) -> Result<KnowledgePacket> {
    let chosen: Vec<ConceptRecord> = config
        .packet
        .transmitted
        .iter()
        .map(|c| {
            side.records
                .iter()
                .find(|r| r.concept == *c)
                .cloned()
                .ok_or_else(|| M2ktError::Config(format!("concept {} was not extracted", c.name())))
        })
        .collect::<Result<_>>()?;
    let metadata = build_metadata(
        &config.packet.teacher_id,
        &config.packet.domain,
        clock,
        &chosen,
        side.warnings.clone(),
    );
    PacketBody::new(&side.teacher, chosen, &metadata)?.sign(key)
}

pub struct PipelineOutcome {
    pub side: TeacherSide,
    pub student: SubstrateModel,
    pub packet: KnowledgePacket,
    pub packet_bytes: Vec<u8>,
    pub state: AlignmentState,
    pub ingest: IngestOutcome,
    pub kd: KdResult,
    pub report: VerificationReport,
}

/// Runs the whole chain. `transport` carries the encoded packet from sender
/// to receiver (identity, file, or broker round-trip).
pub fn run_pipeline(
    config: &PipelineConfig,
    clock: &Clock,
    transport: &mut dyn FnMut(&[u8]) -> Result<Vec<u8>>,
) -> Result<PipelineOutcome> {
    config.validate()?;
    info!("training teacher");
    let (teacher, _) = train_model(&config.teacher, Role::Teacher)?;
    info!("training student");
    let (student, _) = train_model(&config.student, Role::Student)?;
    let side = extract_all(teacher, config)?;
    let packet = package(&side, config, clock, &config.signing_key())?;
    let sent = packet.encode()?;
    let received = transport(&sent)?;
    let packet_bytes = received.clone();
    let packet = KnowledgePacket::decode(&received)?;

    let mut state = AlignmentState::new(&student, side.teacher.latent_dim(), &config.alignment)?;
    info!("ingesting packet");
    let ingest = ingest_packet(
        &student,
        &mut state,
        &packet,
        &side.safe_set,
        &config.verifier,
        &config.alignment,
    )?;

    info!("distillation baseline");
    let all: Vec<_> = ConceptId::all().flat_map(enumerate_concept_inputs).collect();
    let labels = generate_soft_labels(&side.teacher, &all, config.kd.temperature)?;
    let (_, kd) = train_kd(&student, &labels, side.teacher_accuracy, &config.kd)?;

    let report = build_report(config, &side, &student, &state, &packet, &ingest, &kd, labels.len() as u64)?;
    Ok(PipelineOutcome {
        side,
        student,
        packet,
        packet_bytes,
        state,
        ingest,
        kd,
        report,
    })
}

/// KL between φ-projected teacher latents and student latents per transmitted concept.
pub fn concept_kl_map(
    teacher: &SubstrateModel,
    student: &SubstrateModel,
    state: &AlignmentState,
    packet: &KnowledgePacket,
    probe_count: usize,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for rec in &packet.body.concepts {
        let probes = probes_from_seed(rec.concept, probe_count, rec.trace.probe_seed)?;
        let mut projected = Vec::with_capacity(probes.len());
        let mut native = Vec::with_capacity(probes.len());
        for p in &probes {
            let x = encode_input(p).vector;
            projected.push(state.project_concept(&teacher.latent(&x)?)?);
            native.push(student.latent(&x)?);
        }
        out.insert(rec.concept.name(), concept_kl(&projected, &native)?);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn build_report(
    config: &PipelineConfig,
    side: &TeacherSide,
    student: &SubstrateModel,
    state: &AlignmentState,
    packet: &KnowledgePacket,
    ingest: &IngestOutcome,
    kd: &KdResult,
    kd_outputs: u64,
) -> Result<VerificationReport> {
    let transmitted = packet.concept_ids();
    let before = &ingest.before;
    // A rejected packet never reaches the probes; report the committed state.
    let after = if ingest.after.is_empty() {
        crate::verify::performance_probe(
            student,
            state,
            &ConceptId::all().collect::<Vec<_>>(),
            config.verifier.routing,
        )?
    } else if ingest.verdict == crate::alignment::Verdict::Accepted {
        ingest.after.clone()
    } else {
        // Rolled back: the committed state is the pre-ingestion one.
        before.clone()
    };
    let before = if before.is_empty() { after.clone() } else { before.clone() };
    let all: Vec<ConceptId> = ConceptId::all().collect();
    let heldout: Vec<ConceptId> = all
        .iter()
        .copied()
        .filter(|c| !student.trained_concepts.contains(c))
        .collect();
    let overall_before = mean_accuracy(&before, &all);
    let overall_after = mean_accuracy(&after, &all);
    let te = transfer_efficiency(overall_after, side.teacher_accuracy)?;
    let te_kd = kd.transfer_efficiency;
    let loss = match (&ingest.final_loss, ingest.loss_history.first()) {
        (Some(f), Some(first)) => Some(LossSummary {
            initial: *first,
            last: f.total,
            geo: f.geo,
            structure: f.structure,
            reason: f.reason,
            safety: f.safety,
            steps: ingest.loss_history.len(),
        }),
        _ => None,
    };
    Ok(VerificationReport {
        verdict: ingest.verdict,
        reasons: ingest.reasons.clone(),
        routing: config.verifier.routing,
        transmitted_concepts: transmitted,
        accuracy_before: accuracy_map(&before),
        accuracy_after: accuracy_map(&after),
        overall_before,
        overall_after,
        heldout_before: mean_accuracy(&before, &heldout),
        heldout_after: mean_accuracy(&after, &heldout),
        retention_drop: retention_drop(&before, &after, &student.trained_concepts),
        teacher_accuracy: side.teacher_accuracy,
        transfer_efficiency: te,
        transfer_efficiency_before: transfer_efficiency(overall_before, side.teacher_accuracy)?,
        safety_score: safety_audit(packet, &side.safe_set),
        data_usage: data_usage_report(kd_outputs, packet)?,
        loss,
        kd: Some(KdSummary {
            accuracy: kd.accuracy,
            heldout_accuracy: mean_accuracy(&kd.per_concept, &heldout),
            transfer_efficiency: te_kd,
            soft_labels: kd_outputs,
            temperature: config.kd.temperature,
        }),
        concept_kl: concept_kl_map(&side.teacher, student, state, packet, config.alignment.structure_probes)?,
        normalized: NormalizedView {
            teacher: 100.0,
            student_m2kt: 100.0 * te,
            student_kd: Some(100.0 * te_kd),
        },
        packet_digest: packet.digest_hex()?,
    })
}

/// Writes floats with 17 significant digits so reports replay bit-exactly.
struct SignificantDigits;

impl serde_json::ser::Formatter for SignificantDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes any report-like value as JSON with 17-significant-digit floats.
pub fn to_report_json<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SignificantDigits);
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

/// Plain-text comparison table in the usual KD-vs-M2KT row order.
pub fn summary_table(report: &VerificationReport) -> String {
    let kd = report.kd.as_ref();
    let du = &report.data_usage;
    let pct = |v: f64| format!("{:.1}", 100.0 * v);
    let rows: Vec<(String, String, String)> = vec![
        (
            "Teacher Accuracy (%)".into(),
            pct(report.teacher_accuracy),
            pct(report.teacher_accuracy),
        ),
        (
            "Student Accuracy (%)".into(),
            kd.map_or("-".into(), |k| pct(k.accuracy)),
            pct(report.overall_after),
        ),
        (
            "Transfer Efficiency (TE)".into(),
            kd.map_or("-".into(), |k| format!("{:.3}", k.transfer_efficiency)),
            format!("{:.3}", report.transfer_efficiency),
        ),
        (
            "Teacher Outputs Used".into(),
            du.kd_equivalent_outputs.to_string(),
            du.teacher_task_outputs.to_string(),
        ),
        (
            "Concept Embeddings Used".into(),
            "0".into(),
            du.concept_embeddings_used.to_string(),
        ),
        (
            "Data Movement".into(),
            format!("{} soft labels", du.kd_equivalent_outputs),
            format!("{} trace entries", du.trace_entries),
        ),
        (
            "Cross-Architecture Support".into(),
            "shared output space".into(),
            "latent alignment".into(),
        ),
    ];
    let mut out = format!("{:<28} {:>20} {:>20}\n", "Metric", "KD", "M2KT");
    out.push_str(&format!("{}\n", "-".repeat(70)));
    for (m, a, b) in rows {
        out.push_str(&format!("{m:<28} {a:>20} {b:>20}\n"));
    }
    out.push_str(&format!(
        "\nverdict: {:?}   held-out accuracy {:.3} -> {:.3}   retention drop {:.3}   trace/label ratio {:.4}\n",
        report.verdict,
        report.heldout_before,
        report.heldout_after,
        report.retention_drop,
        du.trace_ratio()
    ));
    out
}
