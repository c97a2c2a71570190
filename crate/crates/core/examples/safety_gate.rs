//! A validly signed packet whose embeddings are noise far outside the safe
//! set is rejected before any training step.

use m2kt::adversarial::noise_embedding_packet;
use m2kt::alignment::{ingest_packet, AlignmentState};
use m2kt::numerics::SeededRng;
use m2kt::packet::Clock;
use m2kt::pipeline::{extract_all, PipelineConfig};
use m2kt::substrate::{train_model, Role};
use m2kt::task::ConceptId;
use m2kt::verify::safety_audit;

fn main() -> m2kt::Result<()> {
    let config = PipelineConfig::default();
    let (teacher, _) = train_model(&config.teacher, Role::Teacher)?;
    let (student, _) = train_model(&config.student, Role::Student)?;
    let side = extract_all(teacher, &config)?;
    let clock = Clock::fixed("2025-01-01T00:00:00Z")?;

    let mut rng = SeededRng::new(3);
    for scale in [1.0, 10.0] {
        let packet =
            noise_embedding_packet(&side, &ConceptId::off_diagonal(), scale, &mut rng, &clock, &config.signing_key())?;
        let distances: Vec<String> = packet
            .body
            .concepts
            .iter()
            .map(|r| format!("{:.1}", side.safe_set.mahalanobis(&r.embedding)))
            .collect();
        let mut state = AlignmentState::new(&student, side.teacher.latent_dim(), &config.alignment)?;
        let before = state.to_bytes();
        let outcome =
            ingest_packet(&student, &mut state, &packet, &side.safe_set, &config.verifier, &config.alignment)?;
        println!(
            "noise x{scale}: distances [{}] tau {:.2} penalty {:.2} -> {:?}, state unchanged: {}",
            distances.join(", "),
            side.safe_set.tau,
            safety_audit(&packet, &side.safe_set),
            outcome.verdict,
            state.to_bytes() == before
        );
    }
    Ok(())
}
