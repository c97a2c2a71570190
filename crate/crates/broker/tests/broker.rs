use std::sync::Arc;
use std::thread;

use m2kt::extract::{extract_concept, ExtractionConfig};
use m2kt::numerics::SeededRng;
use m2kt::packet::{build_metadata, digest_bytes, signing_key_from_seed, verify_bytes, Clock, PacketBody};
use m2kt::substrate::{Role, SubstrateModel};
use m2kt::task::INPUT_DIM;
use m2kt_broker::protocol::{read_frame, write_frame, Incoming, Opcode};
use m2kt_broker::{load_trusted_keys, serve, Client, Registry};

fn packet(stamp: &str, key_seed: u64) -> Vec<u8> {
    let mut rng = SeededRng::new(5);
    let teacher = SubstrateModel::init(Role::Teacher, &[INPUT_DIM, 8, 6], &mut rng).unwrap();
    let config = ExtractionConfig {
        embedding_probes: 8,
        trace_probes: 4,
        seed: 9,
        ..ExtractionConfig::default()
    };
    let records: Vec<_> = ["add-sub", "sub-mul", "mul-add"]
        .iter()
        .map(|n| extract_concept(&teacher, n.parse().unwrap(), &config).unwrap().0)
        .collect();
    let meta = build_metadata("teacher-t", "arith", &Clock::fixed(stamp).unwrap(), &records, vec![]);
    PacketBody::new(&teacher, records, &meta)
        .unwrap()
        .sign(&signing_key_from_seed(key_seed))
        .unwrap()
        .encode()
        .unwrap()
}

const TRUSTED_SEED: u64 = 11;

fn trusted() -> Vec<[u8; 32]> {
    vec![signing_key_from_seed(TRUSTED_SEED).verifying_key().to_bytes()]
}

fn start(dir: &std::path::Path) -> (m2kt_broker::ServerHandle, Arc<Registry>) {
    let registry = Arc::new(Registry::open(dir, trusted()).unwrap());
    (serve("127.0.0.1:0", registry.clone()).unwrap(), registry)
}

#[test]
fn publish_fetch_is_byte_identical_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let (server, _) = start(dir.path());
    let bytes = packet("2025-01-01T00:00:00Z", TRUSTED_SEED);
    let mut client = Client::connect(server.local_addr()).unwrap();
    let digest = client.publish(&bytes).unwrap();
    assert_eq!(digest, hex::encode(digest_bytes(&bytes)));
    let back = client.fetch(&digest).unwrap();
    assert_eq!(back, bytes);
    assert!(verify_bytes(&back).is_ok());
    assert!(dir.path().join(format!("{digest}.m2kt")).exists());
    server.shutdown();
}

#[test]
fn unknown_key_and_tampered_body_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (server, registry) = start(dir.path());
    let mut client = Client::connect(server.local_addr()).unwrap();

    let foreign = packet("2025-01-01T00:00:00Z", 99);
    let err = client.publish(&foreign).unwrap_err();
    assert_eq!(err.refusal_code(), Some("untrusted"));

    let mut tampered = packet("2025-01-01T00:00:00Z", TRUSTED_SEED);
    tampered[40] ^= 0x01;
    let err = client.publish(&tampered).unwrap_err();
    assert_eq!(err.refusal_code(), Some("untrusted"));

    let err = client.publish(b"not a packet").unwrap_err();
    assert_eq!(err.refusal_code(), Some("invalid"));

    assert!(registry.list().is_empty());
    let stored = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "m2kt"))
        .count();
    assert_eq!(stored, 0);
}

#[test]
fn fetch_unknown_digest_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let (server, _) = start(dir.path());
    let mut client = Client::connect(server.local_addr()).unwrap();
    let err = client.fetch(&"ab".repeat(32)).unwrap_err();
    assert_eq!(err.refusal_code(), Some("not-found"));
    let err = client.fetch("zz").unwrap_err();
    assert_eq!(err.refusal_code(), Some("malformed"));
}

#[test]
fn malformed_frame_keeps_connection_usable() {
    let dir = tempfile::tempdir().unwrap();
    let (server, _) = start(dir.path());
    let mut client = Client::connect(server.local_addr()).unwrap();
    let err = client.request(0x7e, b"junk").unwrap_err();
    assert_eq!(err.refusal_code(), Some("malformed"));
    let err = client.request(Opcode::Ok as u8, b"").unwrap_err();
    assert_eq!(err.refusal_code(), Some("malformed"));
    assert!(client.list().unwrap().is_empty());

    // An oversized length prefix is drained and answered, not fatal.
    let mut raw = std::net::TcpStream::connect(server.local_addr()).unwrap();
    let len = (64u32 << 20) + 1;
    let mut frame = len.to_le_bytes().to_vec();
    frame.push(Opcode::Publish as u8);
    use std::io::Write;
    raw.write_all(&frame).unwrap();
    raw.write_all(&vec![0u8; len as usize]).unwrap();
    match read_frame(&mut raw).unwrap() {
        Some(Incoming::Frame(Opcode::Err, p)) => assert!(p.starts_with(b"malformed")),
        other => panic!("unexpected {other:?}"),
    }
    write_frame(&mut raw, Opcode::List, b"").unwrap();
    assert_eq!(read_frame(&mut raw).unwrap(), Some(Incoming::Frame(Opcode::Ok, b"[]".to_vec())));
}

#[test]
fn concurrent_duplicate_publish_stores_one_copy() {
    let dir = tempfile::tempdir().unwrap();
    let (server, registry) = start(dir.path());
    let bytes = Arc::new(packet("2025-01-01T00:00:00Z", TRUSTED_SEED));
    let addr = server.local_addr();
    let workers: Vec<_> = (0..2)
        .map(|_| {
            let bytes = bytes.clone();
            thread::spawn(move || Client::connect(addr).unwrap().publish(&bytes).unwrap())
        })
        .collect();
    let digests: Vec<String> = workers.into_iter().map(|w| w.join().unwrap()).collect();
    assert_eq!(digests[0], digests[1]);
    assert_eq!(registry.list().len(), 1);
    let files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".m2kt"))
        .collect();
    assert_eq!(files, vec![format!("{}.m2kt", digests[0])]);
}

#[test]
fn list_is_sorted_and_matches_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let (server, _) = start(dir.path());
    let mut client = Client::connect(server.local_addr()).unwrap();
    assert!(client.list().unwrap().is_empty());
    let stamps = ["2025-01-01T00:00:00Z", "2025-01-02T00:00:00Z", "2025-01-03T00:00:00Z"];
    for s in stamps {
        client.publish(&packet(s, TRUSTED_SEED)).unwrap();
    }
    let list = client.list().unwrap();
    assert_eq!(list.len(), 3);
    assert!(list.windows(2).all(|w| w[0].digest < w[1].digest));
    for entry in &list {
        let p = verify_bytes(&client.fetch(&entry.digest).unwrap()).unwrap();
        let meta = p.metadata();
        assert_eq!(entry.teacher_id, meta.teacher_id);
        assert_eq!(entry.timestamp, meta.timestamp);
        assert_eq!(entry.concept_count, meta.concept_names.len());
    }
}

#[test]
fn restart_rebuilds_a_consistent_registry() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = packet("2025-01-01T00:00:00Z", TRUSTED_SEED);
    let digest = {
        let (server, _) = start(dir.path());
        let d = Client::connect(server.local_addr()).unwrap().publish(&bytes).unwrap();
        server.shutdown();
        d
    };
    // Leftovers of an interrupted write and a file whose bytes do not match its name.
    std::fs::write(dir.path().join(".deadbeef.m2kt.tmp"), b"partial").unwrap();
    std::fs::write(dir.path().join(format!("{}.m2kt", "00".repeat(32))), &bytes).unwrap();

    let (server, registry) = start(dir.path());
    let list = registry.list();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0].digest, digest);
    assert!(!dir.path().join(".deadbeef.m2kt.tmp").exists());
    let index: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("index.json")).unwrap()).unwrap();
    assert_eq!(index.as_array().unwrap().len(), 1);
    let err = Client::connect(server.local_addr())
        .unwrap()
        .fetch(&"00".repeat(32))
        .unwrap_err();
    assert_eq!(err.refusal_code(), Some("not-found"));
}

#[test]
fn trusted_keys_file_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("keys.txt");
    let key = hex::encode(trusted()[0]);
    std::fs::write(&path, format!("# teachers\n\n{key}\n")).unwrap();
    assert_eq!(load_trusted_keys(&path).unwrap(), trusted());
    std::fs::write(&path, "abcd\n").unwrap();
    assert!(load_trusted_keys(&path).is_err());
}
