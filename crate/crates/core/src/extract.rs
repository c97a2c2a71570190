//! Teacher-side extraction: concept embeddings, relevance maps, reasoning
//! traces, and the safe-set model used to score incoming embeddings.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::numerics::{derive_seed, kmeans, SeededRng};
use crate::substrate::SubstrateModel;
use crate::task::{encode_input, probes_from_seed, ConceptId, INSTANCES_PER_CONCEPT, TRACE_STEPS};

pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionConfig {
    pub embedding_probes: usize,
    pub trace_probes: usize,
    /// k for the latent clustering; the largest cluster's centroid is kept.
    pub clusters: usize,
    pub kmeans_iters: usize,
    /// Filled in from the pipeline's master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            embedding_probes: 128,
            trace_probes: 32,
            clusters: 1,
            kmeans_iters: 100,
            seed: 7,
        }
    }
}

impl ExtractionConfig {
    /// Probe seed for one concept. Embedding, relevance and trace probes all
    /// come from this seed, so the trace probes are a prefix of the others.
    pub fn probe_seed(&self, concept: ConceptId) -> u64 {
        derive_seed(self.seed, concept.index() as u64)
    }
}

/// Per-step probe distributions: step 1 is the intermediate symbol, step 2
/// the final result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub probe_seed: u64,
    pub probe_count: usize,
    /// `steps[i][p]` is the 10-way distribution for step `i` on probe `p`.
    pub steps: Vec<Vec<Vec<f64>>>,
}

impl ReasoningTrace {
    pub fn entry_count(&self) -> usize {
        self.steps.len() * self.probe_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub concept: ConceptId,
    pub embedding: Vec<f64>,
    pub relevance: Vec<f64>,
    pub trace: ReasoningTrace,
    pub confidence: f64,
}

fn probe_vectors(concept: ConceptId, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(probes_from_seed(concept, n, seed)?
        .iter()
        .map(|p| encode_input(p).vector)
        .collect())
}

/// Centroid of the largest k-means cluster over teacher latents of seeded
/// probes. The flag reports constant latents, which signal a degenerate teacher.
pub fn extract_embedding(
    teacher: &SubstrateModel,
    concept: ConceptId,
    probe_seed: u64,
    config: &ExtractionConfig,
) -> Result<(Vec<f64>, bool)> {
    let latents = probe_vectors(concept, config.embedding_probes, probe_seed)?
        .iter()
        .map(|x| teacher.latent(x))
        .collect::<Result<Vec<_>>>()?;
    let degenerate = latents.iter().all(|l| l == &latents[0]);
    if degenerate {
        warn!("teacher latents for {} are constant", concept.name());
    }
    let mut rng = SeededRng::new(derive_seed(probe_seed, 0x6b6d));
    let result = kmeans(&latents, config.clusters, &mut rng, config.kmeans_iters)?;
    let best = result.largest_cluster();
    Ok((result.centroids[best].clone(), degenerate))
}

/// Relevance map of the teacher over the same seeded probes, no injection.
pub fn extract_attention(
    teacher: &SubstrateModel,
    concept: ConceptId,
    probe_seed: u64,
    config: &ExtractionConfig,
) -> Result<Vec<f64>> {
    let probes = probe_vectors(concept, config.embedding_probes, probe_seed)?;
    teacher.relevance_map(&probes, None)
}

pub fn extract_reasoning_trace(
    teacher: &SubstrateModel,
    concept: ConceptId,
    probe_count: usize,
    probe_seed: u64,
) -> Result<ReasoningTrace> {
    if probe_count == 0 || probe_count > INSTANCES_PER_CONCEPT {
        return arg_err(format!("probe count {probe_count} outside 1..={INSTANCES_PER_CONCEPT}"));
    }
    let mut steps = (0..TRACE_STEPS).map(|_| Vec::with_capacity(probe_count)).collect::<Vec<Vec<_>>>();
    for x in probe_vectors(concept, probe_count, probe_seed)? {
        let cap = teacher.forward_with_capture(&x)?;
        steps[0].push(cap.trace);
        steps[1].push(cap.probs);
    }
    Ok(ReasoningTrace {
        probe_seed,
        probe_count,
        steps,
    })
}

/// Teacher's exact accuracy over the concept's full enumeration.
pub fn compute_confidence(teacher: &SubstrateModel, concept: ConceptId) -> Result<f64> {
    teacher.concept_accuracy(concept, None)
}

/// Runs every extractor for one concept. The flag is true when the teacher
/// latents were degenerate.
pub fn extract_concept(
    teacher: &SubstrateModel,
    concept: ConceptId,
    config: &ExtractionConfig,
) -> Result<(ConceptRecord, bool)> {
    let seed = config.probe_seed(concept);
    let (embedding, degenerate) = extract_embedding(teacher, concept, seed, config)?;
    let record = ConceptRecord {
        concept,
        embedding,
        relevance: extract_attention(teacher, concept, seed, config)?,
        trace: extract_reasoning_trace(teacher, concept, config.trace_probes, seed)?,
        confidence: compute_confidence(teacher, concept)?,
    };
    Ok((record, degenerate))
}

/// Diagonal Gaussian over known-safe concept embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeSetModel {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub tau: f64,
}

impl SafeSetModel {
    pub fn fit(embeddings: &[Vec<f64>], tau: f64) -> Result<Self> {
        if embeddings.len() < 2 {
            return arg_err("safe set needs at least two embeddings");
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return arg_err("safe-set threshold must be positive and finite");
        }
        let d = embeddings[0].len();
        if embeddings.iter().any(|e| e.len() != d) {
            return arg_err("safe-set embeddings differ in length");
        }
        let n = embeddings.len() as f64;
        let mut mean = vec![0.0; d];
        for e in embeddings {
            for (m, v) in mean.iter_mut().zip(e) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut variance = vec![0.0; d];
        for e in embeddings {
            for ((s, v), m) in variance.iter_mut().zip(e).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        variance
            .iter_mut()
            .for_each(|s| *s = (*s / n).max(VARIANCE_FLOOR));
        Ok(Self { mean, variance, tau })
    }

    /// Fits the Gaussian, then sets `τ = margin × max training distance`.
    pub fn fit_with_margin(embeddings: &[Vec<f64>], margin: f64) -> Result<Self> {
        let mut model = Self::fit(embeddings, 1.0)?;
        let max = embeddings
            .iter()
            .map(|e| model.mahalanobis(e))
            .fold(0.0, f64::max);
        model.tau = margin * max;
        if !(model.tau > 0.0) {
            return arg_err("safe-set threshold collapsed to zero");
        }
        Ok(model)
    }

    pub fn mahalanobis(&self, c: &[f64]) -> f64 {
        c.iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((x, m), s)| (x - m) * (x - m) / s)
            .sum::<f64>()
            .sqrt()
    }

    pub fn penalty(&self, c: &[f64]) -> f64 {
        (self.mahalanobis(c) - self.tau).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::Role;
    use crate::task::INPUT_DIM;

    fn small(seed: u64) -> SubstrateModel {
        let mut rng = SeededRng::new(seed);
        SubstrateModel::init(Role::Teacher, &[INPUT_DIM, 8, 6], &mut rng).unwrap()
    }

    fn concept() -> ConceptId {
        "add-mul".parse().unwrap()
    }

    #[test]
    fn constant_encoder_gives_that_vector() {
        let mut m = small(1);
        // Zero the second layer's weights so the latent is tanh(bias).
        m.network.weight_mut(1).data_mut().iter_mut().for_each(|w| *w = 0.0);
        let target = [0.1, -0.2, 0.3, 0.0, 0.5, -0.6];
        for (b, t) in m.network.bias_mut(1).data_mut().iter_mut().zip(target) {
            *b = f64::atanh(t);
        }
        let config = ExtractionConfig::default();
        let (e, degenerate) = extract_embedding(&m, concept(), 3, &config).unwrap();
        assert!(degenerate);
        for (a, t) in e.iter().zip(target) {
            assert!((a - t).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cluster_is_probe_mean() {
        let m = small(2);
        let config = ExtractionConfig::default();
        let (e, degenerate) = extract_embedding(&m, concept(), 77, &config).unwrap();
        assert!(!degenerate);
        let probes = probes_from_seed(concept(), 128, 77).unwrap();
        let mut mean = vec![0.0; 6];
        for p in &probes {
            for (m_, v) in mean.iter_mut().zip(m.latent(&encode_input(p).vector).unwrap()) {
                *m_ += v / 128.0;
            }
        }
        for (a, b) in e.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn larger_k_picks_a_member_centroid() {
        let m = small(3);
        let config = ExtractionConfig {
            clusters: 3,
            ..ExtractionConfig::default()
        };
        let (e, _) = extract_embedding(&m, concept(), 5, &config).unwrap();
        assert_eq!(e.len(), 6);
        assert!(e.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn attention_is_normalized() {
        let m = small(4);
        let a = extract_attention(&m, concept(), 5, &ExtractionConfig::default()).unwrap();
        assert_eq!(a.len(), INPUT_DIM);
        assert!(a.iter().all(|v| *v >= 0.0));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn traces_are_distributions_and_deterministic() {
        let m = small(5);
        let t = extract_reasoning_trace(&m, concept(), 32, 9).unwrap();
        assert_eq!(t.steps.len(), TRACE_STEPS);
        assert_eq!(t.entry_count(), 64);
        for d in t.steps.iter().flatten() {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(t, extract_reasoning_trace(&m, concept(), 32, 9).unwrap());
        assert!(extract_reasoning_trace(&m, concept(), 0, 9).is_err());
        assert!(extract_reasoning_trace(&m, concept(), 1001, 9).is_err());
    }

    #[test]
    fn trace_probes_prefix_embedding_probes() {
        let long = probes_from_seed(concept(), 128, 41).unwrap();
        let short = probes_from_seed(concept(), 32, 41).unwrap();
        assert_eq!(&long[..32], &short[..]);
    }

    #[test]
    fn safe_set_two_points() {
        let s = SafeSetModel::fit(&[vec![0.0, 0.0], vec![2.0, 0.0]], 1.0).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert_eq!(s.variance, vec![1.0, VARIANCE_FLOOR]);
    }

    #[test]
    fn safe_set_identical_points_floor() {
        let s = SafeSetModel::fit(&[vec![3.0; 4], vec![3.0; 4], vec![3.0; 4]], 2.0).unwrap();
        assert!(s.variance.iter().all(|v| *v == VARIANCE_FLOOR));
        assert_eq!(s.penalty(&[3.0; 4]), 0.0);
    }

    #[test]
    fn safe_set_argument_errors() {
        assert!(SafeSetModel::fit(&[vec![1.0]], 1.0).is_err());
        assert!(SafeSetModel::fit(&[vec![1.0], vec![2.0]], 0.0).is_err());
        assert!(SafeSetModel::fit(&[vec![1.0], vec![2.0, 3.0]], 1.0).is_err());
    }

    #[test]
    fn penalty_is_hinge_on_mahalanobis() {
        let s = SafeSetModel::fit(&[vec![0.0, 0.0], vec![2.0, 2.0]], 1.5).unwrap();
        // variance (1,1), mean (1,1)
        assert_eq!(s.mahalanobis(&[1.0, 1.0]), 0.0);
        assert!((s.mahalanobis(&[4.0, 5.0]) - 5.0).abs() < 1e-12);
        assert!((s.penalty(&[4.0, 5.0]) - 3.5).abs() < 1e-12);
        assert_eq!(s.penalty(&[1.0 + 1.5, 1.0]), 0.0);
    }

    #[test]
    fn margin_fit_sets_tau_above_training_points() {
        let mut rng = SeededRng::new(8);
        let pts: Vec<Vec<f64>> = (0..9).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let s = SafeSetModel::fit_with_margin(&pts, 1.5).unwrap();
        let max = pts.iter().map(|p| s.mahalanobis(p)).fold(0.0, f64::max);
        assert!((s.tau - 1.5 * max).abs() < 1e-12);
        assert!(pts.iter().all(|p| s.penalty(p) == 0.0));
    }

    #[test]
    fn untrained_confidence_near_chance() {
        let c = compute_confidence(&small(6), concept()).unwrap();
        assert!((c - 0.10).abs() <= 0.05, "{c}");
    }
}
