mod common;

use common::randn;
use proptest::prelude::*;
use tba_core::container::MAGIC;
use tba_core::eval::dataset::Dataset;
use tba_core::eval::idx::{encode_images, encode_labels, parse_images, parse_labels, IdxImages};
use tba_core::rng::Rng;
use tba_core::{Container, Error, FormatError, Tensor};

fn sample_container(seed: u64) -> Container {
    let mut rng = Rng::new(seed);
    let mut c = Container::new();
    c.insert("a", randn(&[3, 4], &mut rng));
    c.insert("b.c", randn(&[2, 2, 2], &mut rng));
    c.insert("scalar", Tensor::new(vec![1], vec![f32::MIN_POSITIVE]).unwrap());
    c.insert_json("__meta__", &serde_json::json!({"k": 1})).unwrap();
    c
}

#[test]
fn container_bytes_round_trip() {
    let c = sample_container(1);
    let bytes = c.to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Container::from_bytes(&bytes).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.fingerprint(), c.fingerprint());
}

#[test]
fn container_file_round_trip() {
    let c = sample_container(2);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ntc");
    c.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), c.to_bytes());
    assert_eq!(Container::load(&p).unwrap(), c);
    match Container::load(dir.path().join("missing.ntc")) {
        Err(Error::Io { path, .. }) => assert!(path.ends_with("missing.ntc")),
        other => panic!("expected io error, got {other:?}"),
    }
}

#[test]
fn malformed_containers() {
    let bytes = sample_container(3).to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Container::from_bytes(&bad), Err(FormatError::BadMagic { .. })));
    assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 4]), Err(FormatError::Truncated { .. })));
    assert!(matches!(Container::from_bytes(&bytes[..12]), Err(FormatError::Truncated { .. })));
    let mut garbled = bytes.clone();
    garbled[16] = b'!';
    assert!(matches!(Container::from_bytes(&garbled), Err(FormatError::Header(_))));
    let c = Container::new();
    assert!(c.tensor("nope").is_err());
}

#[test]
fn idx_round_trip_is_bitwise() {
    let mut rng = Rng::new(4);
    let images = IdxImages { count: 5, rows: 4, cols: 3, pixels: (0..60).map(|_| rng.below(256) as u8).collect() };
    let labels: Vec<u8> = (0..5).map(|i| i as u8).collect();
    let ib = encode_images(&images);
    let lb = encode_labels(&labels);
    assert_eq!(&ib[..4], &[0, 0, 8, 3]);
    assert_eq!(&lb[..4], &[0, 0, 8, 1]);
    assert_eq!(&ib[4..8], &[0, 0, 0, 5]);
    let back = parse_images(&ib).unwrap();
    assert_eq!(back, images);
    assert_eq!(parse_labels(&lb).unwrap(), labels);

    let ds = Dataset::from_idx_parts(&back, &labels, "digits", "train", 0.0, 1.0).unwrap();
    assert_eq!(ds.image_dims(), (4, 3, 1));
    let (i2, l2) = ds.to_idx_parts().unwrap();
    assert_eq!(encode_images(&i2), ib);
    assert_eq!(encode_labels(&l2), lb);
}

#[test]
fn malformed_idx() {
    let ib = encode_images(&IdxImages { count: 2, rows: 2, cols: 2, pixels: vec![7; 8] });
    assert!(matches!(parse_images(&ib[..ib.len() - 1]), Err(FormatError::Truncated { .. })));
    assert!(matches!(parse_labels(&ib), Err(FormatError::BadMagic { .. })));
    let mut extra = ib.clone();
    extra.push(0);
    assert!(parse_images(&extra).is_err());
    assert!(parse_images(&ib[..3]).is_err());
}

#[test]
fn dataset_container_round_trip() {
    let ds = common::tiny_data(3, 4, 1);
    let back = Dataset::from_container(&Container::from_bytes(&ds.to_container().unwrap().to_bytes()).unwrap()).unwrap();
    assert_eq!(back, ds);
}

proptest! {
    #[test]
    fn random_containers_round_trip(
        tensors in prop::collection::btree_map("[a-z][a-z0-9._]{0,8}", prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..20), 0..6),
        blob in prop::collection::vec(any::<u8>(), 0..40),
    ) {
        let mut c = Container::new();
        for (name, data) in &tensors {
            c.insert(name.clone(), Tensor::new(vec![data.len()], data.clone()).unwrap());
        }
        c.insert_blob("__blob__", blob);
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        for (name, t) in c.tensors() {
            prop_assert!(back.tensor(name).unwrap().bitwise_eq(t));
        }
    }

    #[test]
    fn random_idx_round_trip(count in 0usize..6, rows in 1usize..5, cols in 1usize..5, seed: u64) {
        let mut rng = Rng::new(seed);
        let images = IdxImages { count, rows, cols, pixels: (0..count * rows * cols).map(|_| rng.below(256) as u8).collect() };
        prop_assert_eq!(parse_images(&encode_images(&images)).unwrap(), images);
    }
}
