//! Extracts concept embeddings, relevance maps and reasoning traces from a
//! trained teacher and fits the safe set over the embeddings.

use m2kt::pipeline::{extract_all, PipelineConfig};
use m2kt::substrate::{train_model, Role};

fn top_inputs(relevance: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<(usize, f64)> = relevance.iter().copied().enumerate().collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1));
    idx.truncate(k);
    idx
}

fn main() -> m2kt::Result<()> {
    let config = PipelineConfig::default();
    let (teacher, _) = train_model(&config.teacher, Role::Teacher)?;
    let side = extract_all(teacher, &config)?;

    println!("{:<9} {:>6} {:>9} {:>7}  top relevance (input index: mass)", "concept", "conf", "|c|", "trace");
    for r in &side.records {
        let norm = r.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        let top: Vec<String> = top_inputs(&r.relevance, 3)
            .iter()
            .map(|(i, m)| format!("{i}: {m:.3}"))
            .collect();
        println!(
            "{:<9} {:>6.3} {:>9.3} {:>7}  {}",
            r.concept.name(),
            r.confidence,
            norm,
            r.trace.entry_count(),
            top.join(", ")
        );
    }
    let safe = &side.safe_set;
    println!("\nsafe set tau {:.3}", safe.tau);
    for r in &side.records {
        println!("  {:<9} Mahalanobis {:.3}", r.concept.name(), safe.mahalanobis(&r.embedding));
    }
    for w in &side.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
