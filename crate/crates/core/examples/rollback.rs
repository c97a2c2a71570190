//! A packet with corrupted traces for a concept the student already knows
//! damages that concept during alignment; the verifier rolls the update back.

use m2kt::adversarial::corrupted_trace_packet;
use m2kt::alignment::{ingest_packet, AlignmentState};
use m2kt::packet::Clock;
use m2kt::pipeline::{extract_all, PipelineConfig};
use m2kt::substrate::{train_model, Role};
use m2kt::task::ConceptId;

fn main() -> m2kt::Result<()> {
    let config = PipelineConfig::default();
    let (teacher, _) = train_model(&config.teacher, Role::Teacher)?;
    let (student, _) = train_model(&config.student, Role::Student)?;
    let side = extract_all(teacher, &config)?;
    let target: ConceptId = "add-add".parse()?;
    let packet = corrupted_trace_packet(
        &side,
        &[target],
        5,
        &Clock::fixed("2025-01-01T00:00:00Z")?,
        &config.signing_key(),
    )?;

    let mut state = AlignmentState::new(&student, side.teacher.latent_dim(), &config.alignment)?;
    let checkpoint = state.params_flat();
    let outcome = ingest_packet(&student, &mut state, &packet, &side.safe_set, &config.verifier, &config.alignment)?;
    let lookup = |v: &[(ConceptId, f64)]| v.iter().find(|(c, _)| *c == target).map(|p| p.1).unwrap_or(f64::NAN);
    println!(
        "{} accuracy during verification: {:.3} -> {:.3}",
        target.name(),
        lookup(&outcome.before),
        lookup(&outcome.after)
    );
    println!("verdict {:?}: {:?}", outcome.verdict, outcome.reasons);
    let exact = state
        .params_flat()
        .iter()
        .zip(&checkpoint)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("parameters restored bit-exactly: {exact}");
    println!("student accuracy after rollback: {:.3}", {
        let bias = state.injection_for(target)?;
        student.concept_accuracy(target, bias.as_deref())?
    });
    Ok(())
}
