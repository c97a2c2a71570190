//! Standard soft-label distillation baseline. Unlike alignment, it updates
//! every student weight.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, M2ktError, Result};
use crate::numerics::{adam_step, cross_entropy_unchecked, softmax, OptimState, SeededRng, TopGrad};
use crate::substrate::SubstrateModel;
use crate::task::{encode_input, ChainInstance, ConceptId, InputEncoding};
use crate::verify::transfer_efficiency;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Filled in from the pipeline's master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    pub inputs: Vec<InputEncoding>,
    pub distributions: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl SoftLabelSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// `softmax(logits / T)` of the teacher for every input.
pub fn generate_soft_labels(
    teacher: &SubstrateModel,
    inputs: &[ChainInstance],
    temperature: f64,
) -> Result<SoftLabelSet> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return arg_err(format!("temperature must be positive, got {temperature}"));
    }
    let mut encodings = Vec::with_capacity(inputs.len());
    let mut distributions = Vec::with_capacity(inputs.len());
    for inst in inputs {
        let enc = encode_input(inst);
        let logits = teacher.forward_with_capture(&enc.vector)?.logits;
        let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
        distributions.push(softmax(&scaled));
        encodings.push(enc);
    }
    Ok(SoftLabelSet {
        inputs: encodings,
        distributions,
        temperature,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdResult {
    pub accuracy: f64,
    pub per_concept: Vec<(ConceptId, f64)>,
    pub transfer_efficiency: f64,
    pub loss_history: Vec<f64>,
}

/// Trains a copy of the student on the soft labels with the T²-scaled
/// distillation loss and reports its exact accuracy over all concepts.
pub fn train_kd(
    student: &SubstrateModel,
    labels: &SoftLabelSet,
    teacher_accuracy: f64,
    config: &KdConfig,
) -> Result<(SubstrateModel, KdResult)> {
    if labels.is_empty() || config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return arg_err("distillation needs labels, a positive batch size and learning rate");
    }
    let t = labels.temperature;
    let mut model = student.clone();
    let mut rng = SeededRng::new(config.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut params = model.network.params_flat();
    let mut state = OptimState::new(params.len());
    let mut grad = vec![0.0; params.len()];
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let pass = model.network.forward(&labels.inputs[i].vector)?;
                let scaled: Vec<f64> = pass.logits().iter().map(|z| z / t).collect();
                let (loss, g) = cross_entropy_unchecked(&scaled, &labels.distributions[i]);
                epoch_loss += t * t * loss;
                // d(T²·CE)/dz = T·(softmax(z/T) − q)
                let dz: Vec<f64> = g.iter().map(|v| t * v).collect();
                model
                    .network
                    .backward_into(&pass, TopGrad::Logits(&dz), &[], &mut grad, scale)?;
            }
            adam_step(&mut params, &grad, &mut state, config.learning_rate)?;
            model.network.set_params_flat(&params)?;
        }
        if !epoch_loss.is_finite() {
            return Err(M2ktError::Numeric(format!("distillation loss diverged at epoch {epoch}")));
        }
        let mean = epoch_loss / labels.len() as f64;
        debug!("kd epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }

    let per_concept = ConceptId::all()
        .map(|c| Ok((c, model.concept_accuracy(c, None)?)))
        .collect::<Result<Vec<_>>>()?;
    let accuracy = per_concept.iter().map(|(_, a)| a).sum::<f64>() / per_concept.len() as f64;
    let te = transfer_efficiency(accuracy, teacher_accuracy)?;
    Ok((
        model,
        KdResult {
            accuracy,
            per_concept,
            transfer_efficiency: te,
            loss_history: history,
        },
    ))
}
