mod common;

use common::tiny;
use shapegene::checkpoint::CheckpointBundle;
use shapegene::labelspace::Part;
use shapegene::netzoo::{param_digest, Decoder, PartEncoder, Transformer};
use shapegene::Error;
use shapegene_tensor::{Adam, AdamSettings, Module, Tensor};

fn trained_bundle() -> (CheckpointBundle, Decoder<f32>) {
    let cfg = tiny(32);
    let mut dec = Decoder::<f32>::overall(&cfg, 3).unwrap();
    let mut adam = Adam::new(AdamSettings::default());
    let z = Tensor::full(&[1, 28], 0.3f32);
    for _ in 0..2 {
        let loss = dec.forward(&z, true).unwrap().mean_all();
        let grads = loss.backward().unwrap();
        adam.step(&mut dec, &grads);
    }
    let mut b = CheckpointBundle::new(&cfg, "parsers");
    b.put_network("dec.overall", &dec);
    b.put_network("enc.hair", &PartEncoder::<f32>::new(&cfg, Part::Hair, 1).unwrap());
    b.put_optimizer("adam.dec", &adam);
    b.train_state = serde_json::json!({"epoch": 3, "best": 0.25});
    (b, dec)
}

#[test]
fn bundle_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (b, dec) = trained_bundle();
    let path = dir.path().join("m.ckpt");
    b.save(&path).unwrap();
    let back = CheckpointBundle::load(&path).unwrap();
    assert_eq!(back, b);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    assert_eq!(back.digest().unwrap(), b.digest().unwrap());

    let mut fresh = Decoder::<f32>::overall(&tiny(32), 99).unwrap();
    back.load_network("dec.overall", &mut fresh).unwrap();
    assert_eq!(param_digest(&fresh), param_digest(&dec));
    for (p, q) in fresh.params().iter().zip(dec.params()) {
        let pb: Vec<u32> = p.data().iter().map(|v| v.to_bits()).collect();
        let qb: Vec<u32> = q.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(pb, qb);
    }
    let adam = back.optimizer("adam.dec").unwrap();
    assert_eq!(adam.steps, 2);
    assert_eq!(adam.moments, b.optimizer("adam.dec").unwrap().moments);
    assert!(back.has_network("enc.hair") && !back.has_network("transformer"));
}

#[test]
fn truncated_or_corrupted_archives_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (b, _) = trained_bundle();
    let bytes = b.to_bytes().unwrap();
    let path = dir.path().join("bad.ckpt");
    for cut in [0, 7, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(CheckpointBundle::load(&path), Err(Error::CorruptArchive { .. })), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() - 100;
    flipped[mid] ^= 0x01;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(CheckpointBundle::load(&path), Err(Error::CorruptArchive { .. })));
    assert!(matches!(
        CheckpointBundle::load(&dir.path().join("absent.ckpt")),
        Err(Error::MissingCheckpoint(_))
    ));
}

#[test]
fn mismatched_architecture_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (b, _) = trained_bundle();
    let path = dir.path().join("m.ckpt");
    b.save(&path).unwrap();
    CheckpointBundle::load_for(&path, &tiny(32)).unwrap();
    let other = shapegene::netzoo::NetConfig { gene_slot_dim: 8, ..tiny(32) };
    assert!(matches!(CheckpointBundle::load_for(&path, &other), Err(Error::Fingerprint { .. })));

    let mut wrong = Transformer::<f32>::new(&tiny(32), 0).unwrap();
    assert!(b.load_network("dec.overall", &mut wrong).is_err());
    let mut dec = Decoder::<f32>::overall(&tiny(32), 0).unwrap();
    assert!(b.load_network("dec.hair", &mut dec).is_err());
}
