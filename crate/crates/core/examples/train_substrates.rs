//! Trains the teacher on all nine concepts and the student on the three
//! diagonal ones, then prints per-concept accuracy for both.

use m2kt::pipeline::PipelineConfig;
use m2kt::substrate::{train_model, Role};
use m2kt::task::ConceptId;

fn main() -> m2kt::Result<()> {
    let config = PipelineConfig::default();
    let (teacher, t_acc) = train_model(&config.teacher, Role::Teacher)?;
    let (student, s_acc) = train_model(&config.student, Role::Student)?;
    println!("teacher {:?} trained-set accuracy {t_acc:.4}", config.teacher.encoder_dims);
    println!("student {:?} trained-set accuracy {s_acc:.4}", config.student.encoder_dims);
    println!("\n{:<10} {:>8} {:>8}", "concept", "teacher", "student");
    for c in ConceptId::all() {
        let mark = if student.trained_concepts.contains(&c) { "" } else { "  (held out)" };
        println!(
            "{:<10} {:>8.3} {:>8.3}{mark}",
            c.name(),
            teacher.concept_accuracy(c, None)?,
            student.concept_accuracy(c, None)?
        );
    }
    let dir = std::env::temp_dir().join("m2kt-example");
    std::fs::create_dir_all(&dir)?;
    teacher.save(&dir.join("teacher.m2km"))?;
    student.save(&dir.join("student.m2km"))?;
    println!("\ncheckpoints written to {}", dir.display());
    Ok(())
}
