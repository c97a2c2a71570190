//! Verifier and safety auditor: performance probes, the accept/rollback
//! rule, transfer efficiency, data-usage accounting, and the concept-level
//! KL diagnostic.

use std::collections::{BTreeMap, HashMap};

use log::info;
use serde::{Deserialize, Serialize};

use crate::alignment::{injection_for_input, AlignmentState, Verdict};
use crate::error::{arg_err, M2ktError, Result};
use crate::extract::{SafeSetModel, VARIANCE_FLOOR};
use crate::numerics::argmax;
use crate::packet::KnowledgePacket;
use crate::substrate::SubstrateModel;
use crate::task::{encode_input, enumerate_concept_inputs, ConceptId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routing {
    /// The true concept id selects the injection.
    Oracle,
    /// Nearest student-latent centroid selects the injection.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierConfig {
    pub retention_drop_limit: f64,
    pub safety_threshold: f64,
    pub routing: Routing,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            retention_drop_limit: 0.02,
            safety_threshold: 0.0,
            routing: Routing::Oracle,
        }
    }
}

impl VerifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.retention_drop_limit >= 0.0) || !(self.safety_threshold >= 0.0) {
            return Err(M2ktError::Config("verifier thresholds must be non-negative".into()));
        }
        Ok(())
    }
}

/// Exact per-concept accuracy over each concept's full enumeration, with
/// injection chosen by the routing mode.
pub fn performance_probe(
    student: &SubstrateModel,
    state: &AlignmentState,
    concepts: &[ConceptId],
    routing: Routing,
) -> Result<Vec<(ConceptId, f64)>> {
    let mut cache: HashMap<ConceptId, Option<Vec<f64>>> = HashMap::new();
    let mut out = Vec::with_capacity(concepts.len());
    for &concept in concepts {
        let all = enumerate_concept_inputs(concept);
        let mut hits = 0usize;
        for inst in &all {
            let x = encode_input(inst).vector;
            let routed = match routing {
                Routing::Oracle => Some(concept),
                Routing::Auto => state.route(&student.latent(&x)?),
            };
            let bias = match routed {
                Some(c) => match cache.get(&c) {
                    Some(b) => b.clone(),
                    None => {
                        let b = injection_for_input(student, state, c, &x, Routing::Oracle)?;
                        cache.insert(c, b.clone());
                        b
                    }
                },
                None => None,
            };
            let pass = student.network.forward_injected(&x, bias.as_deref())?;
            if argmax(pass.output()) as u8 == inst.result() {
                hits += 1;
            }
        }
        out.push((concept, hits as f64 / all.len() as f64));
    }
    Ok(out)
}

pub fn mean_accuracy(per_concept: &[(ConceptId, f64)], subset: &[ConceptId]) -> f64 {
    let picked: Vec<f64> = per_concept
        .iter()
        .filter(|(c, _)| subset.contains(c))
        .map(|(_, a)| *a)
        .collect();
    if picked.is_empty() {
        return 0.0;
    }
    picked.iter().sum::<f64>() / picked.len() as f64
}

/// Total safety penalty of a packet's embeddings.
pub fn safety_audit(packet: &KnowledgePacket, safe: &SafeSetModel) -> f64 {
    packet.body.concepts.iter().map(|r| safe.penalty(&r.embedding)).sum()
}

pub fn transfer_efficiency(student_acc: f64, teacher_acc: f64) -> Result<f64> {
    if !(teacher_acc > 0.0) {
        return Err(M2ktError::Undefined("transfer efficiency with zero teacher accuracy".into()));
    }
    Ok(student_acc / teacher_acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataUsage {
    /// Teacher outputs on task-dataset inputs that were transmitted.
    pub teacher_task_outputs: u64,
    /// Distributions carried in the packet's reasoning traces.
    pub trace_entries: u64,
    /// Soft labels the distillation baseline consumes.
    pub kd_equivalent_outputs: u64,
    pub concept_embeddings_used: u64,
    /// `1 − trace_entries / kd_equivalent_outputs`.
    pub reduction_ratio: f64,
    /// `1 − teacher_task_outputs / kd_equivalent_outputs`.
    pub task_output_reduction: f64,
}

impl DataUsage {
    pub fn from_counts(kd_outputs: u64, trace_entries: u64, concepts: u64) -> Result<Self> {
        if kd_outputs == 0 {
            return Err(M2ktError::Undefined("data-usage ratio with zero KD outputs".into()));
        }
        Ok(Self {
            teacher_task_outputs: 0,
            trace_entries,
            kd_equivalent_outputs: kd_outputs,
            concept_embeddings_used: concepts,
            reduction_ratio: (1.0 - trace_entries as f64 / kd_outputs as f64).max(0.0),
            task_output_reduction: 1.0,
        })
    }

    /// Trace entries ÷ KD soft labels.
    pub fn trace_ratio(&self) -> f64 {
        self.trace_entries as f64 / self.kd_equivalent_outputs as f64
    }
}

pub fn data_usage_report(kd_outputs: u64, packet: &KnowledgePacket) -> Result<DataUsage> {
    DataUsage::from_counts(
        kd_outputs,
        packet.trace_entries() as u64,
        packet.body.concepts.len() as u64,
    )
}

/// Diagonal Gaussian fit with population variance floored at 1e-8.
pub fn fit_diagonal_gaussian(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.len() < 2 {
        return arg_err("need at least two samples");
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return arg_err("samples differ in length");
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *acc += (v - m) * (v - m) / n;
        }
    }
    var.iter_mut().for_each(|v| *v = v.max(VARIANCE_FLOOR));
    Ok((mean, var))
}

/// `KL(N(μ₁, diag σ₁²) ‖ N(μ₂, diag σ₂²))`.
pub fn kl_diagonal_gaussian(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> f64 {
    mu1.iter()
        .zip(var1)
        .zip(mu2.iter().zip(var2))
        .map(|((m1, v1), (m2, v2))| 0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2) * (m1 - m2)) / v2 - 1.0))
        .sum()
}

/// KL between Gaussians fitted to projected teacher latents and student latents.
pub fn concept_kl(teacher_projected: &[Vec<f64>], student: &[Vec<f64>]) -> Result<f64> {
    let (m1, v1) = fit_diagonal_gaussian(teacher_projected)?;
    let (m2, v2) = fit_diagonal_gaussian(student)?;
    if m1.len() != m2.len() {
        return arg_err("teacher and student samples differ in dimension");
    }
    Ok(kl_diagonal_gaussian(&m1, &v1, &m2, &v2).max(0.0))
}

/// Rolls back when a pre-trained concept loses more than the retention
/// limit or the safety audit exceeds its threshold.
pub fn decide(
    before: &[(ConceptId, f64)],
    after: &[(ConceptId, f64)],
    pretrained: &[ConceptId],
    safety_score: f64,
    config: &VerifierConfig,
) -> Result<(Verdict, Vec<String>)> {
    let before_ids: Vec<ConceptId> = before.iter().map(|(c, _)| *c).collect();
    let after_ids: Vec<ConceptId> = after.iter().map(|(c, _)| *c).collect();
    if before_ids != after_ids {
        return arg_err("before and after reports cover different concepts");
    }
    let mut reasons = Vec::new();
    for ((c, b), (_, a)) in before.iter().zip(after) {
        if pretrained.contains(c) && b - a > config.retention_drop_limit {
            reasons.push(format!(
                "{} dropped from {b:.4} to {a:.4} (limit {})",
                c.name(),
                config.retention_drop_limit
            ));
        }
    }
    if safety_score > config.safety_threshold {
        reasons.push(format!("safety penalty {safety_score} exceeds {}", config.safety_threshold));
    }
    let verdict = if reasons.is_empty() {
        Verdict::Accepted
    } else {
        Verdict::RolledBack
    };
    for r in &reasons {
        info!("rollback reason: {r}");
    }
    Ok((verdict, reasons))
}

/// Largest drop among the pre-trained concepts (zero if none dropped).
pub fn retention_drop(before: &[(ConceptId, f64)], after: &[(ConceptId, f64)], pretrained: &[ConceptId]) -> f64 {
    before
        .iter()
        .zip(after)
        .filter(|((c, _), _)| pretrained.contains(c))
        .map(|((_, b), (_, a))| b - a)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    pub geo: f64,
    pub structure: f64,
    pub reason: f64,
    pub safety: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdSummary {
    pub accuracy: f64,
    pub heldout_accuracy: f64,
    pub transfer_efficiency: f64,
    pub soft_labels: u64,
    pub temperature: f64,
}

/// Secondary view with teacher accuracy normalized to 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedView {
    pub teacher: f64,
    pub student_m2kt: f64,
    pub student_kd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub verdict: Verdict,
    pub reasons: Vec<String>,
    pub routing: Routing,
    pub transmitted_concepts: Vec<ConceptId>,
    pub accuracy_before: BTreeMap<String, f64>,
    pub accuracy_after: BTreeMap<String, f64>,
    pub overall_before: f64,
    pub overall_after: f64,
    pub heldout_before: f64,
    pub heldout_after: f64,
    pub retention_drop: f64,
    pub teacher_accuracy: f64,
    pub transfer_efficiency: f64,
    pub transfer_efficiency_before: f64,
    pub safety_score: f64,
    pub data_usage: DataUsage,
    pub loss: Option<LossSummary>,
    pub kd: Option<KdSummary>,
    pub concept_kl: BTreeMap<String, f64>,
    pub normalized: NormalizedView,
    pub packet_digest: String,
}

pub fn accuracy_map(per_concept: &[(ConceptId, f64)]) -> BTreeMap<String, f64> {
    per_concept.iter().map(|(c, a)| (c.name(), *a)).collect()
}
