//! The whole chain from one seed: train, extract, package, ingest, verify,
//! distill, report. Prints the comparison table and the report JSON.

use m2kt::packet::Clock;
use m2kt::pipeline::{run_pipeline, summary_table, to_report_json, PipelineConfig};

fn main() -> m2kt::Result<()> {
    let config = PipelineConfig::default();
    let clock = Clock::fixed("2025-01-01T00:00:00Z")?;
    let outcome = run_pipeline(&config, &clock, &mut |bytes| Ok(bytes.to_vec()))?;
    print!("{}", summary_table(&outcome.report));
    println!("\n{}", to_report_json(&outcome.report)?);
    Ok(())
}
