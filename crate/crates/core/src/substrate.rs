//! Teacher and student networks for the chain task.
//!
//! A substrate model is one tanh MLP ending in a softmax over the ten result
//! symbols; the post-activation feeding the softmax layer is the latent
//! representation. A separate softmax trace head reads the first hidden layer
//! and predicts the intermediate symbol. Concept-conditioned injection adds a
//! bias to the first hidden pre-activation.

use std::path::Path;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::binio::{frame_file, unframe_file, Reader, Writer};
use crate::error::{arg_err, dim_err, M2ktError, Result};
use crate::numerics::{
    adam_step, argmax, cross_entropy_unchecked, one_hot, Activation, MlpModel, OptimState,
    SeededRng, TopGrad,
};
use crate::task::{
    encode_input, enumerate_concept_inputs, ChainInstance, ConceptId, INPUT_DIM, SYMBOLS,
};

pub const MODEL_MAGIC: &[u8; 4] = b"M2KM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstrateModel {
    pub role: Role,
    /// Encoder layers followed by the softmax head.
    pub network: MlpModel,
    pub trace_head: MlpModel,
    /// Concepts seen during training; the verifier guards these against regression.
    pub trained_concepts: Vec<ConceptId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Encoder widths from the 36-dim input through the latent layer.
    pub encoder_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Filled in from the pipeline's master seed.
    #[serde(skip)]
    pub seed: u64,
    pub concepts: Vec<ConceptId>,
}

impl TrainConfig {
    pub fn teacher_default() -> Self {
        Self {
            encoder_dims: vec![INPUT_DIM, 64, 64],
            epochs: 60,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: 1,
            concepts: ConceptId::all().collect(),
        }
    }

    pub fn student_default() -> Self {
        Self {
            encoder_dims: vec![INPUT_DIM, 64, 24],
            epochs: 300,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: 2,
            concepts: ConceptId::diagonal(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_dims.len() < 2 || self.encoder_dims[0] != INPUT_DIM {
            return Err(M2ktError::Config(format!(
                "encoder dims must start at {INPUT_DIM} and have at least one layer"
            )));
        }
        if self.encoder_dims.contains(&0) {
            return Err(M2ktError::Config("encoder widths must be positive".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(M2ktError::Config("batch size and learning rate must be positive".into()));
        }
        if self.concepts.is_empty() {
            return Err(M2ktError::Config("training concept subset is empty".into()));
        }
        Ok(())
    }
}

/// Everything one forward pass exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub latent: Vec<f64>,
    pub hidden1: Vec<f64>,
    pub trace: Vec<f64>,
}

impl SubstrateModel {
    /// Fresh model with Glorot-initialized weights.
    pub fn init(role: Role, encoder_dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        let mut dims = encoder_dims.to_vec();
        dims.push(SYMBOLS);
        let mut acts = vec![Activation::Tanh; dims.len() - 1];
        *acts.last_mut().unwrap() = Activation::Softmax;
        let network = MlpModel::new(&dims, &acts, rng)?;
        let trace_head = MlpModel::new(&[encoder_dims[1], SYMBOLS], &[Activation::Softmax], rng)?;
        Ok(Self {
            role,
            network,
            trace_head,
            trained_concepts: Vec::new(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        let dims = self.network.layer_dims();
        dims[dims.len() - 2]
    }

    pub fn hidden_width(&self) -> usize {
        self.network.layer_dims()[1]
    }

    fn latent_layer(&self) -> usize {
        self.network.layer_count() - 2
    }

    pub fn forward_with_capture(&self, x: &[f64]) -> Result<Capture> {
        self.capture(x, None)
    }

    pub fn forward_with_injection(&self, x: &[f64], bias: &[f64]) -> Result<Capture> {
        self.capture(x, Some(bias))
    }

    fn capture(&self, x: &[f64], bias: Option<&[f64]>) -> Result<Capture> {
        let pass = self.network.forward_injected(x, bias)?;
        let hidden1 = pass.post[0].clone();
        let trace = self.trace_head.predict(&hidden1)?;
        Ok(Capture {
            probs: pass.output().to_vec(),
            logits: pass.logits().to_vec(),
            latent: pass.post[self.latent_layer()].clone(),
            hidden1,
            trace,
        })
    }

    pub fn latent(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.network.forward(x)?.post[self.latent_layer()].clone())
    }

    pub fn predict(&self, instance: &ChainInstance, bias: Option<&[f64]>) -> Result<u8> {
        let pass = self.network.forward_injected(&encode_input(instance).vector, bias)?;
        Ok(argmax(pass.output()) as u8)
    }

    /// Exact accuracy over the full enumeration of `concept`.
    pub fn concept_accuracy(&self, concept: ConceptId, bias: Option<&[f64]>) -> Result<f64> {
        let all = enumerate_concept_inputs(concept);
        let mut hits = 0usize;
        for inst in &all {
            if self.predict(inst, bias)? == inst.result() {
                hits += 1;
            }
        }
        Ok(hits as f64 / all.len() as f64)
    }

    /// Exact accuracy over the union of the given concepts.
    pub fn accuracy(&self, concepts: &[ConceptId]) -> Result<f64> {
        if concepts.is_empty() {
            return arg_err("no concepts to evaluate");
        }
        let mut total = 0.0;
        for &c in concepts {
            total += self.concept_accuracy(c, None)?;
        }
        Ok(total / concepts.len() as f64)
    }

    /// Normalized first-order relevance of each input position:
    /// `normalize(|W1|ᵀ · r̄)`, where `r̄` is the mean absolute first-hidden
    /// activation over the probes. A zero `r̄` yields the uniform map.
    pub fn relevance_map(&self, probes: &[Vec<f64>], injection: Option<&[f64]>) -> Result<Vec<f64>> {
        let (map, _, _) = self.relevance_parts(probes, injection)?;
        Ok(map)
    }

    fn relevance_parts(
        &self,
        probes: &[Vec<f64>],
        injection: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>, f64)> {
        if probes.is_empty() {
            return arg_err("relevance map needs at least one probe");
        }
        let width = self.hidden_width();
        let mut mean_abs = vec![0.0; width];
        let mut hidden = Vec::with_capacity(probes.len());
        for x in probes {
            let h = self.network.first_layer(x, injection)?;
            for (m, v) in mean_abs.iter_mut().zip(&h) {
                *m += v.abs();
            }
            hidden.push(h);
        }
        let n = probes.len() as f64;
        for m in &mut mean_abs {
            *m /= n;
        }
        let w1 = &self.network.weights()[0];
        let mut u = vec![0.0; w1.shape()[1]];
        for (j, &r) in mean_abs.iter().enumerate() {
            if r != 0.0 {
                for (ui, w) in u.iter_mut().zip(w1.row(j)) {
                    *ui += w.abs() * r;
                }
            }
        }
        let total: f64 = u.iter().sum();
        if !(total > 0.0) {
            return Ok((vec![1.0 / u.len() as f64; u.len()], hidden, 0.0));
        }
        Ok((u.iter().map(|v| v / total).collect(), hidden, total))
    }

    /// Relevance map plus the gradient of `⟨grad_map, map⟩` w.r.t. the injected bias.
    pub fn relevance_vjp(
        &self,
        probes: &[Vec<f64>],
        injection: &[f64],
        grad_map: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (map, hidden, total) = self.relevance_parts(probes, Some(injection))?;
        if grad_map.len() != map.len() {
            return dim_err("relevance gradient length");
        }
        let width = self.hidden_width();
        if total == 0.0 {
            return Ok((map, vec![0.0; width]));
        }
        let inner: f64 = grad_map.iter().zip(&map).map(|(g, a)| g * a).sum();
        let du: Vec<f64> = grad_map.iter().map(|g| (g - inner) / total).collect();
        let w1 = &self.network.weights()[0];
        let dr: Vec<f64> = (0..width)
            .map(|j| w1.row(j).iter().zip(&du).map(|(w, d)| w.abs() * d).sum())
            .collect();
        let n = probes.len() as f64;
        let mut dbias = vec![0.0; width];
        for h in &hidden {
            for j in 0..width {
                let y = h[j];
                let sign = if y > 0.0 {
                    1.0
                } else if y < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dbias[j] += dr[j] * sign * (1.0 - y * y) / n;
            }
        }
        Ok((map, dbias))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u8(match self.role {
            Role::Teacher => 0,
            Role::Student => 1,
        });
        w.u8(self.trained_concepts.len() as u8);
        for c in &self.trained_concepts {
            w.u8(c.index() as u8);
        }
        w.mlp(&self.network);
        w.mlp(&self.trace_head);
        frame_file(MODEL_MAGIC, MODEL_VERSION, &w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let payload = unframe_file(MODEL_MAGIC, MODEL_VERSION, bytes)?;
        let mut r = Reader::new(payload);
        let role = match r.u8()? {
            0 => Role::Teacher,
            1 => Role::Student,
            other => return Err(M2ktError::Decode(format!("unknown role {other}"))),
        };
        let n = r.u8()? as usize;
        let trained_concepts = (0..n)
            .map(|_| ConceptId::new(r.u8()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let network = r.mlp()?;
        let trace_head = r.mlp()?;
        r.finish()?;
        if network.layer_count() < 2
            || network.input_dim() != INPUT_DIM
            || network.output_dim() != SYMBOLS
            || trace_head.input_dim() != network.layer_dims()[1]
            || trace_head.output_dim() != SYMBOLS
        {
            return Err(M2ktError::Decode("checkpoint widths do not fit the chain task".into()));
        }
        Ok(Self {
            role,
            network,
            trace_head,
            trained_concepts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut p = self.network.params_flat();
        p.extend(self.trace_head.params_flat());
        p
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let a = self.network.param_count();
        self.network.set_params_flat(&flat[..a])?;
        self.trace_head.set_params_flat(&flat[a..])
    }

    /// Accumulates the gradient of `CE(head, result) + CE(trace, s1)` for one
    /// instance into `grad` and returns the loss.
    fn accumulate_supervised(&self, inst: &ChainInstance, grad: &mut [f64], scale: f64) -> Result<f64> {
        let x = encode_input(inst).vector;
        let pass = self.network.forward(&x)?;
        let trace = self.trace_head.forward(&pass.post[0])?;
        let (l_res, g_res) = cross_entropy_unchecked(pass.logits(), &one_hot(inst.result() as usize, SYMBOLS));
        let (l_s1, g_s1) = cross_entropy_unchecked(trace.logits(), &one_hot(inst.intermediate() as usize, SYMBOLS));

        let (net_g, trace_g) = grad.split_at_mut(self.network.param_count());
        let (d_hidden1, _) = self.trace_head.backward_into(&trace, TopGrad::Logits(&g_s1), &[], trace_g, scale)?;
        self.network
            .backward_into(&pass, TopGrad::Logits(&g_res), &[(0, &d_hidden1)], net_g, scale)?;
        Ok(l_res + l_s1)
    }
}

/// Trains a substrate model with Adam on cross-entropy of the head (final
/// result) plus the trace head (intermediate symbol) over every instance of
/// the configured concepts. Returns the model and its exact accuracy on them.
pub fn train_model(config: &TrainConfig, role: Role) -> Result<(SubstrateModel, f64)> {
    config.validate()?;
    let mut rng = SeededRng::new(config.seed);
    let mut model = SubstrateModel::init(role, &config.encoder_dims, &mut rng)?;
    model.trained_concepts = config.concepts.clone();

    let mut data: Vec<ChainInstance> = config
        .concepts
        .iter()
        .flat_map(|&c| enumerate_concept_inputs(c))
        .collect();
    let mut params = model.params_flat();
    let mut state = OptimState::new(params.len());
    let mut grad = vec![0.0; params.len()];

    for epoch in 0..config.epochs {
        rng.shuffle(&mut data);
        let mut epoch_loss = 0.0;
        for batch in data.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for inst in batch {
                epoch_loss += model.accumulate_supervised(inst, &mut grad, scale)?;
            }
            adam_step(&mut params, &grad, &mut state, config.learning_rate)?;
            model.set_params_flat(&params)?;
        }
        if !epoch_loss.is_finite() {
            return Err(M2ktError::Numeric(format!("training loss diverged at epoch {epoch}")));
        }
        debug!(
            "{role:?} epoch {epoch}: mean loss {:.5}",
            epoch_loss / data.len() as f64
        );
    }
    let acc = model.accuracy(&config.concepts)?;
    Ok((model, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::task::Operator;

    fn small(seed: u64) -> SubstrateModel {
        let mut rng = SeededRng::new(seed);
        SubstrateModel::init(Role::Student, &[INPUT_DIM, 7, 5], &mut rng).unwrap()
    }

    fn probe_inputs(n: usize) -> Vec<Vec<f64>> {
        enumerate_concept_inputs(ConceptId::new(4).unwrap())
            .iter()
            .take(n)
            .map(|i| encode_input(i).vector)
            .collect()
    }

    fn tanh_layer(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = w.dims2().unwrap();
        (0..rows)
            .map(|i| {
                let mut z = b.data()[i];
                for j in 0..cols {
                    z += w.data()[i * cols + j] * x[j];
                }
                z.tanh()
            })
            .collect()
    }

    #[test]
    fn capture_matches_manual_composition() {
        let m = small(3);
        let x = &probe_inputs(1)[0];
        let cap = m.forward_with_capture(x).unwrap();
        let w = m.network.weights();
        let b = m.network.biases();
        let h1 = tanh_layer(&w[0], &b[0], x);
        let latent = tanh_layer(&w[1], &b[1], &h1);
        let logits: Vec<f64> = (0..SYMBOLS)
            .map(|i| b[2].data()[i] + w[2].row(i).iter().zip(&latent).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for i in 0..SYMBOLS {
            assert!((cap.probs[i] - (logits[i] - max).exp() / z).abs() < 1e-12);
        }
        for (a, e) in cap.latent.iter().zip(&latent) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(cap.latent.len(), m.latent_dim());
        assert_eq!(cap.hidden1.len(), 7);
        assert!((cap.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((cap.trace.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_injection_is_bit_identical() {
        let m = small(4);
        for x in probe_inputs(20) {
            let plain = m.forward_with_capture(&x).unwrap();
            let injected = m.forward_with_injection(&x, &[0.0; 7]).unwrap();
            assert_eq!(plain, injected);
        }
    }

    #[test]
    fn injection_gradient_matches_finite_differences() {
        let m = small(5);
        let x = &probe_inputs(3)[2];
        let mut rng = SeededRng::new(9);
        let bias: Vec<f64> = (0..7).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let probe: Vec<f64> = (0..SYMBOLS).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let f = |b: &[f64]| -> f64 {
            let c = m.forward_with_injection(x, b).unwrap();
            c.probs.iter().zip(&probe).map(|(p, g)| p * g).sum()
        };
        let pass = m.network.forward_injected(x, Some(&bias)).unwrap();
        let mut scratch = vec![0.0; m.network.param_count()];
        let (_, analytic) = m
            .network
            .backward_into(&pass, TopGrad::Output(&probe), &[], &mut scratch, 1.0)
            .unwrap();
        for j in 0..7 {
            let (mut up, mut down) = (bias.clone(), bias.clone());
            up[j] += 1e-4;
            down[j] -= 1e-4;
            let numeric = (f(&up) - f(&down)) / 2e-4;
            assert!((numeric - analytic[j]).abs() <= 1e-4 * numeric.abs().max(analytic[j].abs()).max(1e-3));
        }
    }

    #[test]
    fn relevance_matches_straight_line_formula() {
        let m = small(6);
        let probes = probe_inputs(32);
        let map = m.relevance_map(&probes, None).unwrap();
        let w = &m.network.weights()[0];
        let b = &m.network.biases()[0];
        let mut rbar = [0.0; 7];
        for x in &probes {
            for (r, h) in rbar.iter_mut().zip(tanh_layer(w, b, x)) {
                *r += h.abs() / 32.0;
            }
        }
        let mut u = [0.0; INPUT_DIM];
        for (i, ui) in u.iter_mut().enumerate() {
            for (j, r) in rbar.iter().enumerate() {
                *ui += w.data()[j * INPUT_DIM + i].abs() * r;
            }
        }
        let total: f64 = u.iter().sum();
        for (a, e) in map.iter().zip(u.iter()) {
            assert!((a - e / total).abs() < 1e-12);
        }
        assert!((map.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relevance_degenerate_cases_are_uniform() {
        let mut m = small(7);
        m.network.weight_mut(0).data_mut().iter_mut().for_each(|w| *w = 1.0);
        let map = m.relevance_map(&probe_inputs(5), None).unwrap();
        assert!(map.iter().all(|v| (v - 1.0 / 36.0).abs() < 1e-15));

        let mut dead = small(8);
        dead.network.weight_mut(0).data_mut().iter_mut().for_each(|w| *w = 0.0);
        dead.network.bias_mut(0).data_mut().iter_mut().for_each(|b| *b = 0.0);
        let map = dead.relevance_map(&probe_inputs(5), None).unwrap();
        assert!(map.iter().all(|v| *v == 1.0 / 36.0));
        assert!(dead.relevance_map(&[], None).is_err());
    }

    #[test]
    fn relevance_vjp_matches_finite_differences() {
        let m = small(10);
        let probes = probe_inputs(6);
        let mut rng = SeededRng::new(1);
        let bias: Vec<f64> = (0..7).map(|_| rng.uniform(-0.3, 0.3)).collect();
        let g: Vec<f64> = (0..INPUT_DIM).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let f = |b: &[f64]| -> f64 {
            m.relevance_map(&probes, Some(b)).unwrap().iter().zip(&g).map(|(a, c)| a * c).sum()
        };
        let (_, analytic) = m.relevance_vjp(&probes, &bias, &g).unwrap();
        for j in 0..7 {
            let (mut up, mut down) = (bias.clone(), bias.clone());
            up[j] += 1e-4;
            down[j] -= 1e-4;
            let numeric = (f(&up) - f(&down)) / 2e-4;
            assert!(
                (numeric - analytic[j]).abs() <= 1e-4 * numeric.abs().max(analytic[j].abs()).max(1e-3),
                "coordinate {j}: {numeric} vs {}",
                analytic[j]
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = small(11);
        m.trained_concepts = ConceptId::diagonal();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"M2KM");
        let back = SubstrateModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SubstrateModel::from_bytes(&bad).is_err());
        assert!(SubstrateModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn zero_epochs_is_near_chance() {
        let config = TrainConfig {
            epochs: 0,
            seed: 5,
            ..TrainConfig::teacher_default()
        };
        let (_, acc) = train_model(&config, Role::Teacher).unwrap();
        assert!((acc - 0.10).abs() <= 0.05, "untrained accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let config = TrainConfig {
            encoder_dims: vec![INPUT_DIM, 16, 8],
            epochs: 3,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 21,
            concepts: vec![ConceptId::from_ops(Operator::Add, Operator::Add)],
        };
        let (a, acc_a) = train_model(&config, Role::Student).unwrap();
        let (b, acc_b) = train_model(&config, Role::Student).unwrap();
        assert_eq!(a, b);
        assert_eq!(acc_a, acc_b);
        assert_eq!(a.concept_accuracy(config.concepts[0], None).unwrap(), acc_a);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = TrainConfig::teacher_default();
        c.concepts.clear();
        assert!(matches!(train_model(&c, Role::Teacher), Err(M2ktError::Config(_))));
        let mut c = TrainConfig::teacher_default();
        c.encoder_dims = vec![10, 5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn injection_length_is_checked() {
        let m = small(12);
        let x = &probe_inputs(1)[0];
        assert!(matches!(m.forward_with_injection(x, &[0.0; 3]), Err(M2ktError::Dimension(_))));
    }
}
