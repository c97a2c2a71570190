//! Classic distillation baseline: the same student snapshot trained on the
//! teacher's temperature-softened outputs for every task input.

use m2kt::kd::{generate_soft_labels, train_kd};
use m2kt::pipeline::PipelineConfig;
use m2kt::substrate::{train_model, Role};
use m2kt::task::{enumerate_concept_inputs, ConceptId};

fn main() -> m2kt::Result<()> {
    let config = PipelineConfig::default();
    let (teacher, _) = train_model(&config.teacher, Role::Teacher)?;
    let (student, _) = train_model(&config.student, Role::Student)?;
    let all: Vec<ConceptId> = ConceptId::all().collect();
    let teacher_acc = teacher.accuracy(&all)?;

    let inputs: Vec<_> = all.iter().copied().flat_map(enumerate_concept_inputs).collect();
    let labels = generate_soft_labels(&teacher, &inputs, config.kd.temperature)?;
    println!("{} soft labels at T = {}", labels.len(), labels.temperature);
    let (_, result) = train_kd(&student, &labels, teacher_acc, &config.kd)?;
    for (epoch, loss) in result.loss_history.iter().enumerate().step_by(5) {
        println!("epoch {epoch:>2}  loss {loss:.4}");
    }
    for (c, acc) in &result.per_concept {
        println!("{:<9} {acc:.3}", c.name());
    }
    println!("accuracy {:.4}, TE {:.4}", result.accuracy, result.transfer_efficiency);
    Ok(())
}
