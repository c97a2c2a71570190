use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use m2kt::alignment::{ingest_packet, AlignmentState, Verdict};
use m2kt::extract::{ConceptRecord, SafeSetModel};
use m2kt::kd::{generate_soft_labels, train_kd};
use m2kt::packet::{
    digest_bytes, signing_key_from_hex, signing_key_from_seed, verify_bytes, Clock,
};
use m2kt::pipeline::{
    extract_all, package, run_pipeline, summary_table, to_report_json, PipelineConfig, TeacherSide,
};
use m2kt::substrate::{train_model, Role, SubstrateModel};
use m2kt::task::{enumerate_concept_inputs, ConceptId};
use m2kt::verify::{accuracy_map, VerificationReport};
use m2kt::SigningKey;
use m2kt_broker::{load_trusted_keys, serve, Client, Registry};

const TEACHER_FILE: &str = "teacher.m2km";
const STUDENT_FILE: &str = "student.m2km";
const CONCEPTS_FILE: &str = "concepts.json";
const PACKET_FILE: &str = "packet.m2kt";
const ALIGNMENT_FILE: &str = "alignment.m2ka";
const REPORT_FILE: &str = "report.json";
const SUMMARY_FILE: &str = "summary.txt";

#[derive(Parser)]
#[command(name = "m2kt", version, about = "Concept-level knowledge transfer between networks")]
struct Cli {
    /// Pipeline config (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// RFC 3339 timestamp stamped into packets instead of the wall clock.
    #[arg(long, global = true)]
    fixed_timestamp: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an Ed25519 signing key and the matching trusted-keys file.
    GenKeys {
        /// Key seed; defaults to the one derived from the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the teacher on all nine concepts.
    TrainTeacher,
    /// Train the student on its native concepts.
    TrainStudent,
    /// Extract embeddings, relevance maps and traces from the teacher.
    Extract,
    /// Build and sign a knowledge packet from extracted concepts.
    Package,
    /// Publish a packet to a broker.
    Publish {
        #[arg(long)]
        packet: Option<PathBuf>,
        #[arg(long)]
        address: Option<String>,
    },
    /// Fetch a packet by digest from a broker.
    Fetch {
        digest: String,
        #[arg(long)]
        address: Option<String>,
        /// Destination file; `<out-dir>/<digest>.m2kt` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify, audit and ingest a packet into the student's alignment state.
    Ingest {
        #[arg(long)]
        packet: Option<PathBuf>,
    },
    /// Distill the student from teacher soft labels on every task input.
    KdBaseline,
    /// Run the whole chain from one seed and write every artifact.
    Pipeline,
    /// Render a report JSON as the comparison table.
    Report {
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a broker until interrupted.
    Serve {
        #[arg(long)]
        address: Option<String>,
        /// Registry directory; `<out-dir>/registry` by default.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
}

/// Teacher-side extraction output, consumed by `package` and `ingest`.
#[derive(Serialize, Deserialize)]
struct ExtractedConcepts {
    teacher_accuracy: f64,
    warnings: Vec<String>,
    safe_set: SafeSetModel,
    records: Vec<ConceptRecord>,
}

#[derive(Serialize)]
struct IngestSummary {
    verdict: Verdict,
    reasons: Vec<String>,
    accuracy_before: std::collections::BTreeMap<String, f64>,
    accuracy_after: std::collections::BTreeMap<String, f64>,
    final_loss: Option<f64>,
    steps: usize,
}

struct Ctx {
    config: PipelineConfig,
    clock: Clock,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.config.paths.output_dir.join(name)
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.config.paths.output_dir)
            .with_context(|| format!("creating {}", self.config.paths.output_dir.display()))
    }

    fn load_model(&self, name: &str) -> Result<SubstrateModel> {
        let path = self.out(name);
        SubstrateModel::load(&path).with_context(|| format!("loading {}", path.display()))
    }

    fn load_concepts(&self) -> Result<ExtractedConcepts> {
        let path = self.out(CONCEPTS_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The key file if present, otherwise the key derived from the master seed.
    fn signing_key(&self) -> Result<SigningKey> {
        let path = &self.config.paths.signing_key;
        if path.exists() {
            let text = fs::read_to_string(path)?;
            return Ok(signing_key_from_hex(text.trim())?);
        }
        Ok(self.config.signing_key())
    }

    fn trusted_keys(&self) -> Result<Option<Vec<[u8; 32]>>> {
        let path = &self.config.paths.trusted_keys;
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(load_trusted_keys(path)?))
    }

    fn address(&self, flag: Option<String>) -> String {
        flag.unwrap_or_else(|| self.config.broker.address.clone())
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = cli.out_dir {
        config.paths.output_dir = dir;
    }
    let clock = match cli.fixed_timestamp {
        Some(ts) => Clock::fixed(&ts)?,
        None => Clock::System,
    };
    let ctx = Ctx { config, clock };

    match cli.command {
        Command::GenKeys { seed } => gen_keys(&ctx, seed),
        Command::TrainTeacher => train(&ctx, Role::Teacher),
        Command::TrainStudent => train(&ctx, Role::Student),
        Command::Extract => extract(&ctx),
        Command::Package => package_cmd(&ctx),
        Command::Publish { packet, address } => publish(&ctx, packet, address),
        Command::Fetch { digest, address, out } => fetch(&ctx, &digest, address, out),
        Command::Ingest { packet } => ingest(&ctx, packet),
        Command::KdBaseline => kd_baseline(&ctx),
        Command::Pipeline => pipeline(&ctx),
        Command::Report { report } => report_cmd(&ctx, report),
        Command::Serve { address, registry } => serve_cmd(&ctx, address, registry),
    }
}

fn gen_keys(ctx: &Ctx, seed: Option<u64>) -> Result<u8> {
    let key = match seed {
        Some(s) => signing_key_from_seed(s),
        None => ctx.config.signing_key(),
    };
    let public = hex::encode(key.verifying_key().to_bytes());
    write(&ctx.config.paths.signing_key, format!("{}\n", hex::encode(key.to_bytes())))?;
    write(&ctx.config.paths.trusted_keys, format!("{public}\n"))?;
    println!("{public}");
    Ok(0)
}

fn train(ctx: &Ctx, role: Role) -> Result<u8> {
    ctx.ensure_out()?;
    let (config, file) = match role {
        Role::Teacher => (&ctx.config.teacher, TEACHER_FILE),
        Role::Student => (&ctx.config.student, STUDENT_FILE),
    };
    let (model, acc) = train_model(config, role)?;
    model.save(&ctx.out(file))?;
    println!("{role:?} accuracy on trained concepts: {acc:.4}");
    if role == Role::Student {
        let all: Vec<ConceptId> = ConceptId::all().collect();
        let held: Vec<ConceptId> = all.iter().copied().filter(|c| !model.trained_concepts.contains(c)).collect();
        println!("held-out accuracy: {:.4}", model.accuracy(&held)?);
    }
    Ok(0)
}

fn extract(ctx: &Ctx) -> Result<u8> {
    let teacher = ctx.load_model(TEACHER_FILE)?;
    let side = extract_all(teacher, &ctx.config)?;
    for w in &side.warnings {
        warn!("{w}");
    }
    let artifact = ExtractedConcepts {
        teacher_accuracy: side.teacher_accuracy,
        warnings: side.warnings,
        safe_set: side.safe_set,
        records: side.records,
    };
    write(&ctx.out(CONCEPTS_FILE), serde_json::to_string_pretty(&artifact)?)?;
    println!("extracted {} concepts, tau {:.3}", artifact.records.len(), artifact.safe_set.tau);
    Ok(0)
}

fn teacher_side(ctx: &Ctx) -> Result<TeacherSide> {
    let concepts = ctx.load_concepts()?;
    Ok(TeacherSide {
        teacher: ctx.load_model(TEACHER_FILE)?,
        teacher_accuracy: concepts.teacher_accuracy,
        records: concepts.records,
        warnings: concepts.warnings,
        safe_set: concepts.safe_set,
    })
}

fn package_cmd(ctx: &Ctx) -> Result<u8> {
    let side = teacher_side(ctx)?;
    let packet = package(&side, &ctx.config, &ctx.clock, &ctx.signing_key()?)?;
    write(&ctx.out(PACKET_FILE), packet.encode()?)?;
    println!("{}", packet.digest_hex()?);
    Ok(0)
}

fn publish(ctx: &Ctx, packet: Option<PathBuf>, address: Option<String>) -> Result<u8> {
    let path = packet.unwrap_or_else(|| ctx.out(PACKET_FILE));
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut client = Client::connect(ctx.address(address))?;
    match client.publish(&bytes) {
        Ok(digest) => {
            println!("{digest}");
            Ok(0)
        }
        Err(e) if e.refusal_code().is_some() => {
            eprintln!("{e}");
            Ok(2)
        }
        Err(e) => Err(e.into()),
    }
}

fn fetch(ctx: &Ctx, digest: &str, address: Option<String>, out: Option<PathBuf>) -> Result<u8> {
    let mut client = Client::connect(ctx.address(address))?;
    let bytes = client.fetch(digest)?;
    if let Err(reason) = verify_bytes(&bytes) {
        eprintln!("fetched packet does not verify: {reason}");
        return Ok(2);
    }
    let path = out.unwrap_or_else(|| ctx.out(&format!("{digest}.m2kt")));
    write(&path, &bytes)?;
    println!("{}", path.display());
    Ok(0)
}

fn ingest(ctx: &Ctx, packet: Option<PathBuf>) -> Result<u8> {
    let path = packet.unwrap_or_else(|| ctx.out(PACKET_FILE));
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let packet = match verify_bytes(&bytes) {
        Ok(p) => p,
        Err(reason) => {
            eprintln!("packet rejected: {reason}");
            return Ok(Verdict::RejectedSignature.exit_code() as u8);
        }
    };
    if let Some(trusted) = ctx.trusted_keys()? {
        if let Err(reason) = packet.verify_trusted(&trusted) {
            eprintln!("packet rejected: {reason}");
            return Ok(Verdict::RejectedSignature.exit_code() as u8);
        }
    }
    let student = ctx.load_model(STUDENT_FILE)?;
    let safe = ctx.load_concepts()?.safe_set;
    let state_path = ctx.out(ALIGNMENT_FILE);
    let mut state = if state_path.exists() {
        AlignmentState::load(&state_path)?
    } else {
        AlignmentState::new(&student, packet.body.latent_dim, &ctx.config.alignment)?
    };
    let outcome = ingest_packet(&student, &mut state, &packet, &safe, &ctx.config.verifier, &ctx.config.alignment)?;
    state.save(&state_path)?;
    let summary = IngestSummary {
        verdict: outcome.verdict,
        reasons: outcome.reasons.clone(),
        accuracy_before: accuracy_map(&outcome.before),
        accuracy_after: accuracy_map(&outcome.after),
        final_loss: outcome.final_loss.as_ref().map(|l| l.total),
        steps: outcome.loss_history.len(),
    };
    write(&ctx.out("ingest.json"), to_report_json(&summary)?)?;
    println!("verdict: {:?}", outcome.verdict);
    for r in &outcome.reasons {
        println!("  {r}");
    }
    Ok(outcome.verdict.exit_code() as u8)
}

fn kd_baseline(ctx: &Ctx) -> Result<u8> {
    let teacher = ctx.load_model(TEACHER_FILE)?;
    let student = ctx.load_model(STUDENT_FILE)?;
    let all: Vec<ConceptId> = ConceptId::all().collect();
    let teacher_acc = teacher.accuracy(&all)?;
    let inputs: Vec<_> = all.iter().copied().flat_map(enumerate_concept_inputs).collect();
    let labels = generate_soft_labels(&teacher, &inputs, ctx.config.kd.temperature)?;
    let (distilled, result) = train_kd(&student, &labels, teacher_acc, &ctx.config.kd)?;
    distilled.save(&ctx.out("student-kd.m2km"))?;
    write(&ctx.out("kd.json"), to_report_json(&result)?)?;
    println!(
        "KD accuracy {:.4}, TE {:.4}, {} soft labels",
        result.accuracy,
        result.transfer_efficiency,
        labels.len()
    );
    Ok(0)
}

/// Publishes through a broker on an ephemeral loopback port and fetches the
/// packet back; the registry lives under the output directory.
fn broker_round_trip(ctx: &Ctx, bytes: &[u8]) -> m2kt::Result<Vec<u8>> {
    let to_core = |e: m2kt_broker::BrokerError| m2kt::M2ktError::Integrity(format!("broker: {e}"));
    let trusted = vec![ctx.config.signing_key().verifying_key().to_bytes()];
    let registry = Arc::new(Registry::open(&ctx.out("registry"), trusted).map_err(to_core)?);
    let server = serve("127.0.0.1:0", registry).map_err(to_core)?;
    let mut client = Client::connect(server.local_addr()).map_err(to_core)?;
    let digest = client.publish(bytes).map_err(to_core)?;
    let fetched = client.fetch(&digest).map_err(to_core)?;
    server.shutdown();
    info!("packet {digest} round-tripped through the broker");
    Ok(fetched)
}

fn pipeline(ctx: &Ctx) -> Result<u8> {
    ctx.ensure_out()?;
    let mut transport = |bytes: &[u8]| -> m2kt::Result<Vec<u8>> {
        if ctx.config.broker.round_trip {
            broker_round_trip(ctx, bytes)
        } else {
            Ok(bytes.to_vec())
        }
    };
    let outcome = run_pipeline(&ctx.config, &ctx.clock, &mut transport)?;
    if digest_bytes(&outcome.packet_bytes) != outcome.packet.digest()? {
        bail!("received packet does not re-encode to the transmitted bytes");
    }
    outcome.side.teacher.save(&ctx.out(TEACHER_FILE))?;
    outcome.student.save(&ctx.out(STUDENT_FILE))?;
    outcome.state.save(&ctx.out(ALIGNMENT_FILE))?;
    write(&ctx.out(PACKET_FILE), &outcome.packet_bytes)?;
    let concepts = ExtractedConcepts {
        teacher_accuracy: outcome.side.teacher_accuracy,
        warnings: outcome.side.warnings.clone(),
        safe_set: outcome.side.safe_set.clone(),
        records: outcome.side.records.clone(),
    };
    write(&ctx.out(CONCEPTS_FILE), serde_json::to_string_pretty(&concepts)?)?;
    write(&ctx.out(REPORT_FILE), to_report_json(&outcome.report)?)?;
    let table = summary_table(&outcome.report);
    write(&ctx.out(SUMMARY_FILE), &table)?;
    print!("{table}");
    println!("packet digest: {}", outcome.report.packet_digest);
    Ok(outcome.report.verdict.exit_code() as u8)
}

fn report_cmd(ctx: &Ctx, report: Option<PathBuf>) -> Result<u8> {
    let path = report.unwrap_or_else(|| ctx.out(REPORT_FILE));
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: VerificationReport = serde_json::from_str(&text)?;
    print!("{}", summary_table(&report));
    Ok(0)
}

fn serve_cmd(ctx: &Ctx, address: Option<String>, registry: Option<PathBuf>) -> Result<u8> {
    let trusted = ctx
        .trusted_keys()?
        .with_context(|| format!("no trusted keys at {}", ctx.config.paths.trusted_keys.display()))?;
    let dir = registry.unwrap_or_else(|| ctx.out("registry"));
    let registry = Arc::new(Registry::open(&dir, trusted)?);
    let handle = serve(ctx.address(address), registry)?;
    println!("serving on {}", handle.local_addr());
    let stop = handle.stop_flag();
    ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst))?;
    handle.wait();
    Ok(0)
}
