//! Builds a knowledge packet from a small untrained teacher, signs it,
//! round-trips the wire bytes and shows what tampering does.

use m2kt::extract::{extract_concept, ExtractionConfig};
use m2kt::numerics::SeededRng;
use m2kt::packet::{build_metadata, signing_key_from_seed, verify_bytes, Clock, KnowledgePacket, PacketBody};
use m2kt::substrate::{Role, SubstrateModel};
use m2kt::task::{ConceptId, INPUT_DIM};

fn main() -> m2kt::Result<()> {
    let mut rng = SeededRng::new(1);
    let teacher = SubstrateModel::init(Role::Teacher, &[INPUT_DIM, 16, 8], &mut rng)?;
    let config = ExtractionConfig {
        seed: 42,
        ..ExtractionConfig::default()
    };
    let records = ConceptId::off_diagonal()
        .into_iter()
        .take(2)
        .map(|c| extract_concept(&teacher, c, &config).map(|(r, _)| r))
        .collect::<m2kt::Result<Vec<_>>>()?;
    let clock = Clock::fixed("2025-01-01T00:00:00Z")?;
    let metadata = build_metadata("demo-teacher", "arith", &clock, &records, Vec::new());
    let key = signing_key_from_seed(7);
    let packet = PacketBody::new(&teacher, records, &metadata)?.sign(&key)?;

    let bytes = packet.encode()?;
    println!("packet: {} bytes, digest {}", bytes.len(), packet.digest_hex()?);
    println!("signer: {}", hex::encode(packet.public_key));
    let decoded = KnowledgePacket::decode(&bytes)?;
    println!("decode -> encode identical: {}", decoded.encode()? == bytes);
    println!("verify: {:?}", decoded.verify());
    println!("metadata: {}", serde_json::to_string(&decoded.metadata())?);

    let mut tampered = bytes.clone();
    tampered[30] ^= 0x01;
    println!("after flipping one body byte: {:?}", verify_bytes(&tampered).map(|_| ()));
    let stranger = signing_key_from_seed(8).verifying_key().to_bytes();
    println!("against an allowlist without the signer: {:?}", decoded.verify_trusted(&[stranger]));
    Ok(())
}
