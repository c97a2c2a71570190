use m2kt::alignment::{
    loss_safety, probe_student_concept, train_alignment, AlignmentConfig, AlignmentState,
    ConceptTargets, LossWeights,
};
use m2kt::extract::{ReasoningTrace, SafeSetModel};
use m2kt::numerics::gradcheck::{central_differences, max_relative_error};
use m2kt::numerics::{softmax, SeededRng};
use m2kt::substrate::{Role, SubstrateModel};
use m2kt::task::{encode_input, probes_from_seed, ConceptId, INPUT_DIM, SYMBOLS};

const TEACHER_DIM: usize = 5;

struct Fixture {
    student: SubstrateModel,
    state: AlignmentState,
    targets: Vec<ConceptTargets>,
    safe: SafeSetModel,
}

fn random_dist(rng: &mut SeededRng) -> Vec<f64> {
    softmax(&(0..SYMBOLS).map(|_| 2.0 * rng.normal()).collect::<Vec<_>>())
}

fn fixture(seed: u64, concepts: usize) -> Fixture {
    let mut rng = SeededRng::new(seed);
    let student = SubstrateModel::init(Role::Student, &[INPUT_DIM, 6, 4], &mut rng).unwrap();
    let config = AlignmentConfig {
        cal_hidden: 4,
        structure_probes: 5,
        seed,
        ..AlignmentConfig::default()
    };
    let mut state = AlignmentState::new(&student, TEACHER_DIM, &config).unwrap();
    let theta: Vec<f64> = (0..state.param_count()).map(|_| 0.5 * rng.normal()).collect();
    state.set_params_flat(&theta).unwrap();
    let targets = (0..concepts)
        .map(|k| {
            let concept = ConceptId::new((seed as usize + 2 * k) % 9).unwrap();
            let probe_seed = rng.next_u64();
            let inputs = |n| -> Vec<Vec<f64>> {
                probes_from_seed(concept, n, probe_seed)
                    .unwrap()
                    .iter()
                    .map(|p| encode_input(p).vector)
                    .collect()
            };
            let raw: Vec<f64> = (0..INPUT_DIM).map(|_| rng.next_f64() + 0.01).collect();
            let total: f64 = raw.iter().sum();
            ConceptTargets {
                concept,
                teacher_embedding: (0..TEACHER_DIM).map(|_| rng.normal()).collect(),
                teacher_relevance: raw.iter().map(|v| v / total).collect(),
                teacher_trace: ReasoningTrace {
                    probe_seed,
                    probe_count: 3,
                    steps: (0..2).map(|_| (0..3).map(|_| random_dist(&mut rng)).collect()).collect(),
                },
                structure_probes: inputs(5),
                trace_probes: inputs(3),
                student: probe_student_concept(&student, concept, probe_seed, 5).unwrap(),
            }
        })
        .collect();
    let pts: Vec<Vec<f64>> = (0..4).map(|_| (0..TEACHER_DIM).map(|_| rng.normal()).collect()).collect();
    let safe = SafeSetModel::fit(&pts, 1.0).unwrap();
    Fixture {
        student,
        state,
        targets,
        safe,
    }
}

fn check<F>(fx: &Fixture, loss: F) -> f64
where
    F: Fn(&AlignmentState) -> (f64, Vec<f64>),
{
    let theta = fx.state.params_flat();
    let (_, analytic) = loss(&fx.state);
    let mut probe = fx.state.clone();
    let numeric = central_differences(
        |t| {
            probe.set_params_flat(t).unwrap();
            loss(&probe).0
        },
        &theta,
        1e-4,
    );
    max_relative_error(&analytic, &numeric, 1e-6)
}

#[test]
fn geo_gradient() {
    for seed in 0..10 {
        let fx = fixture(seed, 2);
        let err = check(&fx, |s| s.loss_geo(&fx.targets).unwrap());
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn reason_gradient() {
    for seed in 0..10 {
        let fx = fixture(seed, 2);
        let err = check(&fx, |s| s.loss_reason(&fx.student, &fx.targets).unwrap());
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn struct_gradient_away_from_ties() {
    for seed in 0..10 {
        let fx = fixture(seed, 2);
        let err = check(&fx, |s| s.loss_struct(&fx.student, &fx.targets).unwrap());
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn composite_gradient_and_recomposition() {
    for seed in 0..10 {
        let mut fx = fixture(seed, 2);
        fx.state.weights = LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lambda: 1.0,
        };
        let err = check(&fx, |s| {
            let c = s.composite_loss(&fx.student, &fx.targets, &fx.safe).unwrap();
            (c.total, c.grad)
        });
        assert!(err <= 1e-4, "seed {seed}: {err}");
        let c = fx.state.composite_loss(&fx.student, &fx.targets, &fx.safe).unwrap();
        let sum = fx.state.loss_geo(&fx.targets).unwrap().0
            + fx.state.loss_struct(&fx.student, &fx.targets).unwrap().0
            + fx.state.loss_reason(&fx.student, &fx.targets).unwrap().0
            + loss_safety(&fx.targets, &fx.safe);
        assert!((c.total - sum).abs() <= 1e-12 * sum.abs().max(1.0));
    }
}

#[test]
fn composite_weight_linearity() {
    let mut fx = fixture(3, 2);
    fx.state.weights = LossWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
        lambda: 0.0,
    };
    let c = fx.state.composite_loss(&fx.student, &fx.targets, &fx.safe).unwrap();
    let (geo, grad) = fx.state.loss_geo(&fx.targets).unwrap();
    assert_eq!(c.total, geo);
    assert_eq!(c.grad, grad);
    fx.state.weights = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        lambda: 0.0,
    };
    let c = fx.state.composite_loss(&fx.student, &fx.targets, &fx.safe).unwrap();
    assert_eq!(c.total, 0.0);
    assert!(c.grad.iter().all(|g| *g == 0.0));
    fx.state.weights.beta = -1.0;
    assert!(fx.state.composite_loss(&fx.student, &fx.targets, &fx.safe).is_err());
}

#[test]
fn geo_matches_exact_target_and_unit_distance() {
    let mut fx = fixture(4, 1);
    let phi = fx.state.project_concept(&fx.targets[0].teacher_embedding).unwrap();
    fx.targets[0].student.centroid = phi.clone();
    assert_eq!(fx.state.loss_geo(&fx.targets).unwrap().0, 0.0);
    let mut shifted = phi;
    shifted[0] -= 1.0;
    fx.targets[0].student.centroid = shifted;
    assert!((fx.state.loss_geo(&fx.targets).unwrap().0 - 1.0).abs() < 1e-12);
}

#[test]
fn zero_gate_struct_equals_uninjected_gap() {
    let fx = fixture(5, 2);
    let mut state = fx.state.clone();
    state.injection_gate.data_mut().iter_mut().for_each(|g| *g = 0.0);
    let (value, _) = state.loss_struct(&fx.student, &fx.targets).unwrap();
    let expected: f64 = fx
        .targets
        .iter()
        .map(|t| {
            let s = fx.student.relevance_map(&t.structure_probes, None).unwrap();
            s.iter().zip(&t.teacher_relevance).map(|(a, b)| (a - b).abs()).sum::<f64>()
        })
        .sum();
    assert!((value - expected).abs() < 1e-12);
}

#[test]
fn struct_l1_arithmetic() {
    let mut fx = fixture(6, 1);
    fx.state.injection_gate.data_mut().iter_mut().for_each(|g| *g = 0.0);
    let current = fx.student.relevance_map(&fx.targets[0].structure_probes, None).unwrap();
    // Teacher map = student map with 0.01 of mass moved between two positions.
    let mut teacher = current.clone();
    let i = teacher.iter().position(|v| *v > 0.01).unwrap();
    let j = (i + 1) % INPUT_DIM;
    teacher[i] -= 0.01;
    teacher[j] += 0.01;
    fx.targets[0].teacher_relevance = teacher;
    assert!((fx.state.loss_struct(&fx.student, &fx.targets).unwrap().0 - 0.02).abs() < 1e-12);
}

#[test]
fn uniform_student_against_one_hot_teacher() {
    let mut fx = fixture(7, 1);
    // Zero head and trace-head weights give uniform student distributions.
    let last = fx.student.network.layer_count() - 1;
    fx.student.network.weight_mut(last).data_mut().iter_mut().for_each(|w| *w = 0.0);
    fx.student.network.bias_mut(last).data_mut().iter_mut().for_each(|w| *w = 0.0);
    fx.state.student_trace_head.weight_mut(0).data_mut().iter_mut().for_each(|w| *w = 0.0);
    fx.state.student_trace_head.bias_mut(0).data_mut().iter_mut().for_each(|w| *w = 0.0);
    for step in &mut fx.targets[0].teacher_trace.steps {
        for d in step.iter_mut() {
            *d = m2kt::numerics::one_hot(3, SYMBOLS);
        }
    }
    let (v, _) = fx.state.loss_reason(&fx.student, &fx.targets).unwrap();
    assert!((v - 2.0 * 10f64.ln()).abs() < 1e-12, "{v}");
}

#[test]
fn safety_hinge() {
    let fx = fixture(8, 1);
    let mut t = fx.targets.clone();
    t[0].teacher_embedding = fx.safe.mean.clone();
    assert_eq!(loss_safety(&t, &fx.safe), 0.0);
    let mut at_tau = fx.safe.mean.clone();
    at_tau[0] += fx.safe.tau * fx.safe.variance[0].sqrt();
    t[0].teacher_embedding = at_tau;
    assert!(loss_safety(&t, &fx.safe) < 1e-12);
    let mut rng = SeededRng::new(1);
    let noise: Vec<f64> = (0..TEACHER_DIM).map(|i| fx.safe.mean[i] + 10.0 * rng.normal()).collect();
    let d: f64 = noise
        .iter()
        .zip(&fx.safe.mean)
        .zip(&fx.safe.variance)
        .map(|((x, m), v)| (x - m) * (x - m) / v)
        .sum::<f64>()
        .sqrt();
    t[0].teacher_embedding = noise;
    let expected = (d - fx.safe.tau).max(0.0);
    assert!(expected > 0.0);
    assert!((loss_safety(&t, &fx.safe) - expected).abs() < 1e-9);
}

#[test]
fn zero_cal_projects_to_zero_and_shapes_hold() {
    let fx = fixture(9, 1);
    let mut s = fx.state.clone();
    let zeros = vec![0.0; s.param_count()];
    s.set_params_flat(&zeros).unwrap();
    assert_eq!(s.project_concept(&[1.0; TEACHER_DIM]).unwrap(), vec![0.0; 4]);
    assert!(s.project_concept(&[1.0; 3]).is_err());
}

#[test]
fn cal_jacobian_matches_finite_differences() {
    let fx = fixture(10, 1);
    let c: Vec<f64> = fx.targets[0].teacher_embedding.clone();
    for out in 0..4 {
        let numeric = central_differences(|x| fx.state.project_concept(x).unwrap()[out], &c, 1e-4);
        let pass = fx.state.cal.forward(&c).unwrap();
        let mut seed = vec![0.0; 4];
        seed[out] = 1.0;
        let g = fx.state.cal.backward(&pass, &seed).unwrap();
        assert!(max_relative_error(&g.input, &numeric, 1e-6) <= 1e-4);
    }
}

#[test]
fn zero_steps_leave_state_unchanged_and_training_descends() {
    let fx = fixture(11, 2);
    let mut s = fx.state.clone();
    let h = train_alignment(&fx.student, &mut s, &fx.targets, &fx.safe, 0, 1e-2).unwrap();
    assert!(h.is_empty());
    assert_eq!(s, fx.state);
    let core = fx.student.clone();
    let h = train_alignment(&fx.student, &mut s, &fx.targets, &fx.safe, 60, 1e-2).unwrap();
    assert!(h.last().unwrap() < &h[0]);
    assert_eq!(fx.student, core);
}

#[test]
fn checkpoint_file_round_trip_and_rollback() {
    let fx = fixture(12, 1);
    let mut s = fx.state.clone();
    s.commit();
    let bytes = s.to_bytes();
    assert_eq!(&bytes[..4], b"M2KA");
    let back = AlignmentState::from_bytes(&bytes).unwrap();
    assert_eq!(back.params_flat(), s.params_flat());
    assert_eq!(back.to_bytes(), bytes);

    let before = s.params_flat();
    train_alignment(&fx.student, &mut s, &fx.targets, &fx.safe, 5, 1e-2).unwrap();
    assert_ne!(s.params_flat(), before);
    s.rollback().unwrap();
    assert_eq!(s.params_flat(), before);
    assert_eq!(s.optimizer, back.optimizer);
}

#[test]
fn zero_gate_is_neutral() {
    let fx = fixture(13, 1);
    let mut rng = SeededRng::new(2);
    let student = fx.student.clone();
    let config = AlignmentConfig {
        cal_hidden: 4,
        ..AlignmentConfig::default()
    };
    let state = AlignmentState::new(&student, TEACHER_DIM, &config).unwrap();
    assert!(state.injection_gate.data().iter().all(|g| *g == 0.0));
    let c: Vec<f64> = (0..TEACHER_DIM).map(|_| rng.normal()).collect();
    let bias = state.injection_bias(&c).unwrap();
    for p in probes_from_seed(ConceptId::new(1).unwrap(), 50, 3).unwrap() {
        let x = encode_input(&p).vector;
        assert_eq!(
            student.forward_with_injection(&x, &bias).unwrap(),
            student.forward_with_capture(&x).unwrap()
        );
    }
}

#[test]
fn student_probe_is_deterministic_mean() {
    let fx = fixture(14, 1);
    let c = ConceptId::new(0).unwrap();
    let a = probe_student_concept(&fx.student, c, 42, 16).unwrap();
    assert_eq!(a, probe_student_concept(&fx.student, c, 42, 16).unwrap());
    let mut mean = [0.0; 4];
    for p in probes_from_seed(c, 16, 42).unwrap() {
        for (m, v) in mean.iter_mut().zip(fx.student.latent(&encode_input(&p).vector).unwrap()) {
            *m += v / 16.0;
        }
    }
    for (x, y) in a.centroid.iter().zip(mean) {
        assert!((x - y).abs() < 1e-12);
    }
}
