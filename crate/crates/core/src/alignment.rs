//! Student-side alignment: the concept alignment layer φ (teacher latent →
//! student latent), the injection gate, the composite objective and the
//! ingest loop with checkpoint and rollback.
//!
//! Trainable parameters are laid out flat as `[cal | gate | trace_head]`.

use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::binio::{frame_file, unframe_file, Reader, Writer};
use crate::error::{dim_err, M2ktError, Result};
use crate::extract::{ReasoningTrace, SafeSetModel};
use crate::numerics::{
    adam_step, cross_entropy_unchecked, derive_seed, squared_distance, Activation, ForwardPass,
    MlpModel, OptimState, SeededRng, Tensor, TopGrad,
};
use crate::packet::KnowledgePacket;
use crate::substrate::SubstrateModel;
use crate::task::{encode_input, probes_from_seed, ConceptId, TRACE_STEPS};
use crate::verify::{decide, performance_probe, safety_audit, Routing, VerifierConfig};

pub const ALIGN_MAGIC: &[u8; 4] = b"M2KA";
pub const ALIGN_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gamma: 1.0,
            lambda: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.lambda];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(M2ktError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    pub cal_hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    /// Probes regenerated per concept for the student centroid and relevance map.
    pub structure_probes: usize,
    /// Filled in from the pipeline's master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            cal_hidden: 48,
            steps: 500,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            structure_probes: 128,
            seed: 11,
        }
    }
}

/// Frozen student-side targets for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConceptProbe {
    pub concept: ConceptId,
    pub centroid: Vec<f64>,
    pub relevance: Vec<f64>,
}

/// Everything the losses need for one transmitted concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptTargets {
    pub concept: ConceptId,
    pub teacher_embedding: Vec<f64>,
    pub teacher_relevance: Vec<f64>,
    pub teacher_trace: ReasoningTrace,
    pub structure_probes: Vec<Vec<f64>>,
    pub trace_probes: Vec<Vec<f64>>,
    pub student: StudentConceptProbe,
}

/// A concept the student has accepted: its teacher embedding drives the
/// injection, its student centroid drives auto routing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestedConcept {
    pub concept: ConceptId,
    pub teacher_embedding: Vec<f64>,
    pub student_centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Snapshot {
    params: Vec<f64>,
    optimizer: OptimState,
    ingested: Vec<IngestedConcept>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentState {
    pub cal: MlpModel,
    /// `hidden width × d_S`, zero at construction.
    pub injection_gate: Tensor,
    pub student_trace_head: MlpModel,
    pub optimizer: OptimState,
    pub weights: LossWeights,
    pub ingested: Vec<IngestedConcept>,
    /// Centroids of the student's own concepts; routing to one of them means no injection.
    pub native_centroids: Vec<(ConceptId, Vec<f64>)>,
    checkpoint: Snapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accepted,
    RejectedSignature,
    RejectedSafety,
    RolledBack,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Accepted => 0,
            Verdict::RejectedSignature | Verdict::RejectedSafety => 2,
            Verdict::RolledBack => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeLoss {
    pub geo: f64,
    pub structure: f64,
    pub reason: f64,
    pub safety: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

struct Projection {
    pass: ForwardPass,
    bias: Vec<f64>,
}

impl AlignmentState {
    /// Fresh state for a student. The trace head starts as a copy of the
    /// student's own; the gate starts at zero.
    pub fn new(student: &SubstrateModel, teacher_dim: usize, config: &AlignmentConfig) -> Result<Self> {
        config.weights.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let cal = MlpModel::new(
            &[teacher_dim, config.cal_hidden, student.latent_dim()],
            &[Activation::Tanh, Activation::Identity],
            &mut rng,
        )?;
        let native_centroids = student
            .trained_concepts
            .iter()
            .map(|&c| {
                let seed = derive_seed(config.seed, 0x100 + c.index() as u64);
                Ok((c, probe_student_concept(student, c, seed, config.structure_probes)?.centroid))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(
            cal,
            Tensor::zeros(&[student.hidden_width(), student.latent_dim()]),
            student.trace_head.clone(),
            config.weights,
            native_centroids,
        )
    }

    fn from_parts(
        cal: MlpModel,
        injection_gate: Tensor,
        student_trace_head: MlpModel,
        weights: LossWeights,
        native_centroids: Vec<(ConceptId, Vec<f64>)>,
    ) -> Result<Self> {
        let (h, ds) = injection_gate.dims2()?;
        if cal.output_dim() != ds || student_trace_head.input_dim() != h {
            return dim_err("alignment parts disagree on widths");
        }
        let n = cal.param_count() + injection_gate.len() + student_trace_head.param_count();
        let optimizer = OptimState::new(n);
        let mut state = Self {
            cal,
            injection_gate,
            student_trace_head,
            optimizer,
            weights,
            ingested: Vec::new(),
            native_centroids,
            checkpoint: Snapshot {
                params: Vec::new(),
                optimizer: OptimState::new(0),
                ingested: Vec::new(),
            },
        };
        state.commit();
        Ok(state)
    }

    pub fn param_count(&self) -> usize {
        self.cal.param_count() + self.injection_gate.len() + self.student_trace_head.param_count()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.cal.params_flat();
        p.extend_from_slice(self.injection_gate.data());
        p.extend(self.student_trace_head.params_flat());
        p
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return dim_err(format!("expected {} parameters, got {}", self.param_count(), flat.len()));
        }
        let a = self.cal.param_count();
        let b = a + self.injection_gate.len();
        self.cal.set_params_flat(&flat[..a])?;
        self.injection_gate.data_mut().copy_from_slice(&flat[a..b]);
        self.student_trace_head.set_params_flat(&flat[b..])
    }

    fn slices(&self) -> (usize, usize) {
        let a = self.cal.param_count();
        (a, a + self.injection_gate.len())
    }

    /// Records the current parameters as the last verified-good state.
    pub fn commit(&mut self) {
        self.checkpoint = Snapshot {
            params: self.params_flat(),
            optimizer: self.optimizer.clone(),
            ingested: self.ingested.clone(),
        };
    }

    /// Restores the last committed state bit-exactly.
    pub fn rollback(&mut self) -> Result<()> {
        let snap = self.checkpoint.clone();
        self.set_params_flat(&snap.params)?;
        self.optimizer = snap.optimizer;
        self.ingested = snap.ingested;
        Ok(())
    }

    pub fn checkpoint_params(&self) -> &[f64] {
        &self.checkpoint.params
    }

    /// φ(c): CAL forward pass.
    pub fn project_concept(&self, c: &[f64]) -> Result<Vec<f64>> {
        self.cal.predict(c)
    }

    fn project(&self, c: &[f64]) -> Result<Projection> {
        let pass = self.cal.forward(c)?;
        let bias = self.injection_gate.matvec(pass.output())?;
        Ok(Projection { pass, bias })
    }

    /// Injection bias `G · φ(c)` for an embedding.
    pub fn injection_bias(&self, c: &[f64]) -> Result<Vec<f64>> {
        Ok(self.project(c)?.bias)
    }

    /// Injection for a concept if it has been ingested.
    pub fn injection_for(&self, concept: ConceptId) -> Result<Option<Vec<f64>>> {
        match self.ingested.iter().find(|i| i.concept == concept) {
            Some(i) => Ok(Some(self.injection_bias(&i.teacher_embedding)?)),
            None => Ok(None),
        }
    }

    /// Nearest-centroid routing over native and ingested concepts using the
    /// un-injected student latent.
    pub fn route(&self, student_latent: &[f64]) -> Option<ConceptId> {
        self.native_centroids
            .iter()
            .map(|(c, v)| (*c, v))
            .chain(self.ingested.iter().map(|i| (i.concept, &i.student_centroid)))
            .map(|(c, v)| (c, squared_distance(student_latent, v)))
            .fold(None, |best: Option<(ConceptId, f64)>, (c, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((c, d)),
            })
            .map(|(c, _)| c)
    }

    /// Pushes `dphi` (and optionally a bias gradient) back into `grad`.
    fn backprop_projection(
        &self,
        proj: &Projection,
        dphi: &[f64],
        dbias: Option<&[f64]>,
        grad: &mut [f64],
    ) -> Result<()> {
        let (a, b) = self.slices();
        let mut total = dphi.to_vec();
        if let Some(db) = dbias {
            let phi = proj.pass.output();
            let (_, cols) = self.injection_gate.dims2()?;
            let gate_grad = &mut grad[a..b];
            for (i, &d) in db.iter().enumerate() {
                if d != 0.0 {
                    for (g, p) in gate_grad[i * cols..(i + 1) * cols].iter_mut().zip(phi) {
                        *g += d * p;
                    }
                }
            }
            for (t, v) in total.iter_mut().zip(self.injection_gate.matvec_t(db)?) {
                *t += v;
            }
        }
        self.cal
            .backward_into(&proj.pass, TopGrad::Output(&total), &[], &mut grad[..a], 1.0)?;
        Ok(())
    }

    /// `Σ_k ‖φ(c_k) − c_k^S‖²`.
    pub fn loss_geo(&self, targets: &[ConceptTargets]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.param_count()];
        let mut value = 0.0;
        for t in targets {
            let proj = self.project(&t.teacher_embedding)?;
            let phi = proj.pass.output();
            if phi.len() != t.student.centroid.len() {
                return dim_err("student centroid length");
            }
            value += squared_distance(phi, &t.student.centroid);
            let dphi: Vec<f64> = phi.iter().zip(&t.student.centroid).map(|(p, s)| 2.0 * (p - s)).collect();
            self.backprop_projection(&proj, &dphi, None, &mut grad)?;
        }
        Ok((value, grad))
    }

    /// `Σ_k ‖A_T − A_S(θ)‖₁` with the student map recomputed under injection.
    pub fn loss_struct(&self, student: &SubstrateModel, targets: &[ConceptTargets]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.param_count()];
        let mut value = 0.0;
        let zero_phi = vec![0.0; self.cal.output_dim()];
        for t in targets {
            let proj = self.project(&t.teacher_embedding)?;
            let current = student.relevance_map(&t.structure_probes, Some(&proj.bias))?;
            let sign: Vec<f64> = current
                .iter()
                .zip(&t.teacher_relevance)
                .map(|(s, a)| {
                    value += (a - s).abs();
                    if s > a {
                        1.0
                    } else if s < a {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let (_, dbias) = student.relevance_vjp(&t.structure_probes, &proj.bias, &sign)?;
            self.backprop_projection(&proj, &zero_phi, Some(&dbias), &mut grad)?;
        }
        Ok((value, grad))
    }

    /// `Σ_k mean_p Σ_i CE(teacher step i, student step i)` over the trace probes.
    pub fn loss_reason(&self, student: &SubstrateModel, targets: &[ConceptTargets]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.param_count()];
        let (_, b) = self.slices();
        let mut scratch = vec![0.0; student.network.param_count()];
        let zero_phi = vec![0.0; self.cal.output_dim()];
        let mut value = 0.0;
        for t in targets {
            let proj = self.project(&t.teacher_embedding)?;
            let n = t.trace_probes.len();
            if n == 0 || t.teacher_trace.steps.len() != TRACE_STEPS {
                return Err(M2ktError::Integrity(format!("trace of {} is empty", t.concept.name())));
            }
            let scale = 1.0 / n as f64;
            let mut dbias = vec![0.0; proj.bias.len()];
            for (p, x) in t.trace_probes.iter().enumerate() {
                let pass = student.network.forward_injected(x, Some(&proj.bias))?;
                let trace = self.student_trace_head.forward(&pass.post[0])?;
                let (l1, g1) = cross_entropy_unchecked(trace.logits(), &t.teacher_trace.steps[0][p]);
                let (l2, g2) = cross_entropy_unchecked(pass.logits(), &t.teacher_trace.steps[1][p]);
                value += scale * (l1 + l2);
                let (d_hidden, _) = self.student_trace_head.backward_into(
                    &trace,
                    TopGrad::Logits(&g1),
                    &[],
                    &mut grad[b..],
                    scale,
                )?;
                let (_, d_pre) = student.network.backward_into(
                    &pass,
                    TopGrad::Logits(&g2),
                    &[(0, &d_hidden)],
                    &mut scratch,
                    0.0,
                )?;
                for (d, v) in dbias.iter_mut().zip(&d_pre) {
                    *d += scale * v;
                }
            }
            self.backprop_projection(&proj, &zero_phi, Some(&dbias), &mut grad)?;
        }
        Ok((value, grad))
    }

    /// Weighted sum of the four terms and their gradients. The safety term
    /// has no gradient.
    pub fn composite_loss(
        &self,
        student: &SubstrateModel,
        targets: &[ConceptTargets],
        safe: &SafeSetModel,
    ) -> Result<CompositeLoss> {
        let w = self.weights;
        w.validate()?;
        let mut grad = vec![0.0; self.param_count()];
        let mut term = |weight: f64, f: &dyn Fn() -> Result<(f64, Vec<f64>)>| -> Result<f64> {
            if weight == 0.0 {
                return Ok(0.0);
            }
            let (v, g) = f()?;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += weight * b;
            }
            Ok(v)
        };
        let geo = term(w.alpha, &|| self.loss_geo(targets))?;
        let structure = term(w.beta, &|| self.loss_struct(student, targets))?;
        let reason = term(w.gamma, &|| self.loss_reason(student, targets))?;
        let safety = if w.lambda == 0.0 { 0.0 } else { loss_safety(targets, safe) };
        let total = w.alpha * geo + w.beta * structure + w.gamma * reason + w.lambda * safety;
        Ok(CompositeLoss {
            geo,
            structure,
            reason,
            safety,
            total,
            grad,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.mlp(&self.cal);
        w.tensor(&self.injection_gate);
        w.mlp(&self.student_trace_head);
        w.tensor(&self.optimizer.first_moment);
        w.tensor(&self.optimizer.second_moment);
        w.u64(self.optimizer.step_count);
        for v in [self.weights.alpha, self.weights.beta, self.weights.gamma, self.weights.lambda] {
            w.f64(v);
        }
        w.u32(self.ingested.len() as u32);
        for i in &self.ingested {
            w.u8(i.concept.index() as u8);
            write_vec(&mut w, &i.teacher_embedding);
            write_vec(&mut w, &i.student_centroid);
        }
        w.u32(self.native_centroids.len() as u32);
        for (c, v) in &self.native_centroids {
            w.u8(c.index() as u8);
            write_vec(&mut w, v);
        }
        frame_file(ALIGN_MAGIC, ALIGN_VERSION, &w.buf)
    }

    /// Loads a committed state; the checkpoint is set to the loaded parameters.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let payload = unframe_file(ALIGN_MAGIC, ALIGN_VERSION, bytes)?;
        let mut r = Reader::new(payload);
        let cal = r.mlp()?;
        let gate = r.tensor()?;
        let trace_head = r.mlp()?;
        let first_moment = r.tensor()?;
        let second_moment = r.tensor()?;
        let step_count = r.u64()?;
        let weights = LossWeights {
            alpha: r.f64()?,
            beta: r.f64()?,
            gamma: r.f64()?,
            lambda: r.f64()?,
        };
        let n = r.count(1)?;
        let mut ingested = Vec::with_capacity(n);
        for _ in 0..n {
            ingested.push(IngestedConcept {
                concept: ConceptId::new(r.u8()? as usize)?,
                teacher_embedding: read_vec(&mut r)?,
                student_centroid: read_vec(&mut r)?,
            });
        }
        let n = r.count(1)?;
        let mut native = Vec::with_capacity(n);
        for _ in 0..n {
            native.push((ConceptId::new(r.u8()? as usize)?, read_vec(&mut r)?));
        }
        r.finish()?;
        let decode = |e: M2ktError| M2ktError::Decode(e.to_string());
        let mut state = Self::from_parts(cal, gate, trace_head, weights, native).map_err(decode)?;
        if first_moment.len() != state.param_count() || second_moment.len() != state.param_count() {
            return Err(M2ktError::Decode("optimizer moments do not match the parameters".into()));
        }
        state.optimizer = OptimState {
            first_moment,
            second_moment,
            step_count,
        };
        state.ingested = ingested;
        state.commit();
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_vec(w: &mut Writer, v: &[f64]) {
    w.u32(v.len() as u32);
    for &x in v {
        w.f64(x);
    }
}

fn read_vec(r: &mut Reader) -> Result<Vec<f64>> {
    let n = r.count(8)?;
    (0..n).map(|_| r.f64()).collect()
}

/// `Σ_k max(0, Mahalanobis(c_k) − τ)`; constant in θ.
pub fn loss_safety(targets: &[ConceptTargets], safe: &SafeSetModel) -> f64 {
    targets.iter().map(|t| safe.penalty(&t.teacher_embedding)).sum()
}

fn probe_inputs(concept: ConceptId, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(probes_from_seed(concept, n, seed)?
        .iter()
        .map(|p| encode_input(p).vector)
        .collect())
}

/// Mean un-injected student latent and student relevance map over the
/// probes regenerated from `(concept, seed)`.
pub fn probe_student_concept(
    student: &SubstrateModel,
    concept: ConceptId,
    seed: u64,
    probe_count: usize,
) -> Result<StudentConceptProbe> {
    let probes = probe_inputs(concept, probe_count, seed)?;
    let mut centroid = vec![0.0; student.latent_dim()];
    for x in &probes {
        for (c, v) in centroid.iter_mut().zip(student.latent(x)?) {
            *c += v;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= probes.len() as f64);
    Ok(StudentConceptProbe {
        concept,
        centroid,
        relevance: student.relevance_map(&probes, None)?,
    })
}

/// Regenerates probes from the packet's seeds and probes the student once.
pub fn prepare_targets(
    student: &SubstrateModel,
    packet: &KnowledgePacket,
    structure_probes: usize,
) -> Result<Vec<ConceptTargets>> {
    packet
        .body
        .concepts
        .iter()
        .map(|rec| {
            let trace = &rec.trace;
            if trace.steps.len() != TRACE_STEPS || trace.steps.iter().any(|s| s.len() != trace.probe_count) {
                return Err(M2ktError::Integrity(format!(
                    "trace of {} does not match its probe count",
                    rec.concept.name()
                )));
            }
            Ok(ConceptTargets {
                concept: rec.concept,
                teacher_embedding: rec.embedding.clone(),
                teacher_relevance: rec.relevance.clone(),
                teacher_trace: trace.clone(),
                structure_probes: probe_inputs(rec.concept, structure_probes, trace.probe_seed)?,
                trace_probes: probe_inputs(rec.concept, trace.probe_count, trace.probe_seed)?,
                student: probe_student_concept(student, rec.concept, trace.probe_seed, structure_probes)?,
            })
        })
        .collect()
}

/// Runs Adam on the composite loss for `steps` full-batch steps. On a
/// non-finite loss the state is restored from its checkpoint.
pub fn train_alignment(
    student: &SubstrateModel,
    state: &mut AlignmentState,
    targets: &[ConceptTargets],
    safe: &SafeSetModel,
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<f64>> {
    let mut history = Vec::with_capacity(steps);
    let mut params = state.params_flat();
    for step in 0..steps {
        let loss = state.composite_loss(student, targets, safe)?;
        if !loss.total.is_finite() || !loss.grad.iter().all(|g| g.is_finite()) {
            state.rollback()?;
            return Err(M2ktError::Numeric(format!("alignment loss diverged at step {step}")));
        }
        history.push(loss.total);
        adam_step(&mut params, &loss.grad, &mut state.optimizer, learning_rate)?;
        state.set_params_flat(&params)?;
        if step % 100 == 0 {
            info!(
                "align step {step}: total {:.5} geo {:.5} struct {:.5} reason {:.5}",
                loss.total, loss.geo, loss.structure, loss.reason
            );
        }
    }
    Ok(history)
}

/// Result of one ingestion attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub verdict: Verdict,
    pub reasons: Vec<String>,
    pub loss_history: Vec<f64>,
    pub before: Vec<(ConceptId, f64)>,
    pub after: Vec<(ConceptId, f64)>,
    pub final_loss: Option<CompositeLoss>,
}

impl IngestOutcome {
    fn rejected(verdict: Verdict, reason: String) -> Self {
        Self {
            verdict,
            reasons: vec![reason],
            loss_history: Vec::new(),
            before: Vec::new(),
            after: Vec::new(),
            final_loss: None,
        }
    }
}

/// Verifies, audits, trains, probes, and either commits or rolls back.
pub fn ingest_packet(
    student: &SubstrateModel,
    state: &mut AlignmentState,
    packet: &KnowledgePacket,
    safe: &SafeSetModel,
    verifier: &VerifierConfig,
    config: &AlignmentConfig,
) -> Result<IngestOutcome> {
    if let Err(reason) = packet.verify() {
        warn!("packet rejected: {reason}");
        return Ok(IngestOutcome::rejected(Verdict::RejectedSignature, reason.to_string()));
    }
    let audit = safety_audit(packet, safe);
    if audit > verifier.safety_threshold {
        warn!("packet rejected by safety audit: total penalty {audit}");
        return Ok(IngestOutcome::rejected(
            Verdict::RejectedSafety,
            format!("safety penalty {audit} exceeds {}", verifier.safety_threshold),
        ));
    }
    let targets = match prepare_targets(student, packet, config.structure_probes) {
        Ok(t) => t,
        Err(e) => return Ok(IngestOutcome::rejected(Verdict::RejectedSignature, e.to_string())),
    };

    state.commit();
    let all: Vec<ConceptId> = ConceptId::all().collect();
    let before = performance_probe(student, state, &all, verifier.routing)?;

    for t in &targets {
        state.ingested.retain(|i| i.concept != t.concept);
        state.ingested.push(IngestedConcept {
            concept: t.concept,
            teacher_embedding: t.teacher_embedding.clone(),
            student_centroid: t.student.centroid.clone(),
        });
    }
    let trained = train_alignment(student, state, &targets, safe, config.steps, config.learning_rate);
    let history = match trained {
        Ok(h) => h,
        Err(e) => {
            state.rollback()?;
            let mut out = IngestOutcome::rejected(Verdict::RolledBack, e.to_string());
            out.before = before;
            return Ok(out);
        }
    };
    let final_loss = state.composite_loss(student, &targets, safe)?;
    let after = performance_probe(student, state, &all, verifier.routing)?;
    let (verdict, reasons) = decide(&before, &after, &student.trained_concepts, audit, verifier)?;
    match verdict {
        Verdict::Accepted => state.commit(),
        _ => state.rollback()?,
    }
    info!("ingestion verdict {verdict:?}");
    Ok(IngestOutcome {
        verdict,
        reasons,
        loss_history: history,
        before,
        after,
        final_loss: Some(final_loss),
    })
}

/// Routing helper for evaluation: the injection to apply for an input.
pub(crate) fn injection_for_input(
    student: &SubstrateModel,
    state: &AlignmentState,
    concept: ConceptId,
    x: &[f64],
    routing: Routing,
) -> Result<Option<Vec<f64>>> {
    let routed = match routing {
        Routing::Oracle => Some(concept),
        Routing::Auto => state.route(&student.latent(x)?),
    };
    match routed {
        Some(c) => state.injection_for(c),
        None => Ok(None),
    }
}
