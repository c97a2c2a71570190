//! Ingests a genuine packet: the alignment layer and injection gate are
//! trained with the composite loss, then the verifier decides.

use m2kt::alignment::{ingest_packet, AlignmentState};
use m2kt::packet::Clock;
use m2kt::pipeline::{extract_all, package, PipelineConfig};
use m2kt::substrate::{train_model, Role};
use m2kt::verify::accuracy_map;

fn main() -> m2kt::Result<()> {
    let config = PipelineConfig::default();
    let (teacher, _) = train_model(&config.teacher, Role::Teacher)?;
    let (student, _) = train_model(&config.student, Role::Student)?;
    let side = extract_all(teacher, &config)?;
    let packet = package(&side, &config, &Clock::fixed("2025-01-01T00:00:00Z")?, &config.signing_key())?;

    let mut state = AlignmentState::new(&student, side.teacher.latent_dim(), &config.alignment)?;
    println!("trainable parameters: {}", state.param_count());
    let outcome = ingest_packet(&student, &mut state, &packet, &side.safe_set, &config.verifier, &config.alignment)?;

    for (step, loss) in outcome.loss_history.iter().enumerate().step_by(50) {
        println!("step {step:>3}  loss {loss:.4}");
    }
    if let Some(f) = &outcome.final_loss {
        println!(
            "final  geo {:.4}  struct {:.4}  reason {:.4}  safety {:.4}  total {:.4}",
            f.geo, f.structure, f.reason, f.safety, f.total
        );
    }
    let before = accuracy_map(&outcome.before);
    let after = accuracy_map(&outcome.after);
    println!("\n{:<9} {:>7} {:>7}", "concept", "before", "after");
    for (name, b) in &before {
        println!("{name:<9} {b:>7.3} {:>7.3}", after[name]);
    }
    println!("\nverdict {:?} {:?}", outcome.verdict, outcome.reasons);
    Ok(())
}
