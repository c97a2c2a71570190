//! Starts a broker on an ephemeral loopback port, publishes a packet from a
//! trusted teacher, lists and fetches it, and shows the refusals.

use std::sync::Arc;

use m2kt::extract::{extract_concept, ExtractionConfig};
use m2kt::numerics::SeededRng;
use m2kt::packet::{build_metadata, signing_key_from_seed, verify_bytes, Clock, PacketBody};
use m2kt::substrate::{Role, SubstrateModel};
use m2kt::task::{ConceptId, INPUT_DIM};
use m2kt_broker::{serve, Client, Registry};

fn packet(key_seed: u64) -> Result<Vec<u8>, Box<dyn std::error::Error>> {
    let mut rng = SeededRng::new(1);
    let teacher = SubstrateModel::init(Role::Teacher, &[INPUT_DIM, 16, 8], &mut rng)?;
    let config = ExtractionConfig {
        seed: 2,
        ..ExtractionConfig::default()
    };
    let records = ConceptId::off_diagonal()
        .into_iter()
        .map(|c| extract_concept(&teacher, c, &config).map(|(r, _)| r))
        .collect::<m2kt::Result<Vec<_>>>()?;
    let meta = build_metadata("demo-teacher", "arith", &Clock::fixed("2025-01-01T00:00:00Z")?, &records, vec![]);
    Ok(PacketBody::new(&teacher, records, &meta)?
        .sign(&signing_key_from_seed(key_seed))?
        .encode()?)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let trusted = vec![signing_key_from_seed(1).verifying_key().to_bytes()];
    let registry = Arc::new(Registry::open(dir.path(), trusted)?);
    let server = serve("127.0.0.1:0", registry)?;
    println!("broker on {}, registry {}", server.local_addr(), dir.path().display());

    let mut client = Client::connect(server.local_addr())?;
    let bytes = packet(1)?;
    let digest = client.publish(&bytes)?;
    println!("published {digest}");
    for entry in client.list()? {
        println!("listed {} from {} at {} ({} concepts)", entry.digest, entry.teacher_id, entry.timestamp, entry.concept_count);
    }
    let fetched = client.fetch(&digest)?;
    println!("fetched byte-identical: {}, verifies: {}", fetched == bytes, verify_bytes(&fetched).is_ok());

    match client.publish(&packet(2)?) {
        Err(e) => println!("unknown signer: {e}"),
        Ok(d) => println!("unexpectedly stored {d}"),
    }
    let mut tampered = bytes.clone();
    tampered[50] ^= 0x10;
    match client.publish(&tampered) {
        Err(e) => println!("tampered body: {e}"),
        Ok(d) => println!("unexpectedly stored {d}"),
    }
    match client.fetch(&"0".repeat(64)) {
        Err(e) => println!("unknown digest: {e}"),
        Ok(_) => println!("unexpected hit"),
    }
    server.shutdown();
    Ok(())
}
