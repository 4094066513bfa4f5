mod common;

use progtta::checkpoint;
use progtta::data::{
    decode_container, decode_vector, encode_container, load_container, load_vector, save_container, save_vector,
    Manifest, Shift, TrajectoryRecord,
};
use progtta::Error;
use proptest::prelude::*;

use common::{random_meta, random_record};

fn record_strategy() -> impl Strategy<Value = TrajectoryRecord> {
    (
        1usize..6,
        1usize..8,
        any::<bool>(),
        "[a-z0-9 ]{0,12}",
        prop::collection::vec(any::<f32>(), 64),
    )
        .prop_map(|(dim, len, labeled, text, pool)| {
            let finite = |i: usize| {
                let v = pool[i % pool.len()];
                if v.is_finite() {
                    v
                } else {
                    i as f32
                }
            };
            let goal = (0..dim).map(finite).collect();
            let visual = (0..dim * len).map(|i| finite(i + 7)).collect();
            let labels = labeled.then(|| TrajectoryRecord::progress_labels(len));
            TrajectoryRecord::new(text.clone(), text, "tag", goal, visual, labels).unwrap()
        })
}

proptest! {
    #[test]
    fn container_round_trip_is_bit_exact(rec in record_strategy()) {
        let bytes = encode_container(std::slice::from_ref(&rec)).unwrap();
        let back = decode_container(&bytes).unwrap();
        prop_assert_eq!(back.len(), 1);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(back[0].visual()), bits(rec.visual()));
        prop_assert_eq!(bits(back[0].goal()), bits(rec.goal()));
        prop_assert_eq!(back[0].labels().map(bits), rec.labels().map(bits));
        prop_assert_eq!(&back[0], &rec);
        prop_assert_eq!(encode_container(&back).unwrap(), bytes);
    }

    #[test]
    fn vector_round_trip_is_bit_exact(v in prop::collection::vec(-1e30f32..1e30, 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ttpv");
        save_vector(&path, &v).unwrap();
        prop_assert_eq!(load_vector(&path).unwrap(), v);
    }

    #[test]
    fn corrupted_checkpoints_are_typed_errors(pos in any::<prop::sample::Index>(), byte in any::<u8>(), cut in any::<prop::sample::Index>()) {
        let bytes = checkpoint::encode(&random_meta(5, 3, 2, 4));
        let mut flipped = bytes.clone();
        flipped[pos.index(bytes.len())] = byte;
        let _ = checkpoint::decode(&flipped);
        prop_assert!(checkpoint::decode(&bytes[..cut.index(bytes.len())]).is_err());
    }

    #[test]
    fn arbitrary_vector_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode_vector(&bytes);
    }
}

fn container() -> Vec<u8> {
    encode_container(&[random_record(1, "a", 4, 3), random_record(2, "b", 2, 3)]).unwrap()
}

#[test]
fn bad_magic_is_reported() {
    let mut bytes = container();
    bytes[..4].copy_from_slice(b"NOPE");
    assert!(matches!(decode_container(&bytes), Err(Error::BadMagic { .. })));
    assert!(matches!(
        decode_vector(b"TTPE\x01\0\0\0\0\0\0\0"),
        Err(Error::BadMagic { .. })
    ));
}

#[test]
fn unknown_version_is_reported() {
    let mut bytes = container();
    bytes[4] = 9;
    assert!(matches!(decode_container(&bytes), Err(Error::UnsupportedVersion(9))));
}

#[test]
fn wrong_dimension_is_a_typed_error() {
    for dim in [0u32, 2, 4, 1 << 30] {
        let mut bytes = container();
        bytes[8..12].copy_from_slice(&dim.to_le_bytes());
        let err = decode_container(&bytes).unwrap_err();
        assert!(
            matches!(
                err,
                Error::DimensionMismatch(_)
                    | Error::Truncated { .. }
                    | Error::TrailingData(_)
                    | Error::InvalidRecord { .. }
                    | Error::Encoding(_)
            ),
            "d = {dim}: {err:?}"
        );
    }
}

#[test]
fn huge_counts_do_not_allocate_or_panic() {
    let mut bytes = container();
    bytes[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(decode_container(&bytes), Err(Error::Truncated { .. })));
}

#[test]
fn every_truncation_is_an_error() {
    let bytes = container();
    for cut in 0..bytes.len() {
        assert!(decode_container(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_container(&extra), Err(Error::TrailingData(1))));
}

#[test]
fn mixed_dimensions_cannot_be_written() {
    let err = encode_container(&[random_record(1, "a", 2, 3), random_record(2, "b", 2, 4)]).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch(_)));
}

#[test]
fn files_round_trip_through_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let records = vec![random_record(3, "x", 5, 4)];
    save_container(dir.path().join("train.ttpe"), &records).unwrap();
    save_vector(dir.path().join("base.ttpv"), &[1.0, 0.0, 0.0, 0.0]).unwrap();
    let text = "train = train.ttpe ID\nbaseline = base.ttpv\n";
    let manifest = Manifest::parse(text, dir.path()).unwrap();
    assert_eq!(manifest.split("train").unwrap().shift, Shift::InDistribution);
    assert_eq!(manifest.load_training().unwrap(), records);
    assert_eq!(load_container(&manifest.split("train").unwrap().path).unwrap(), records);
    assert_eq!(
        Manifest::parse(&manifest.render(dir.path()), dir.path()).unwrap(),
        manifest
    );
}

#[test]
fn unlabeled_training_split_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_container(
        dir.path().join("train.ttpe"),
        &[random_record(3, "x", 5, 4).without_labels()],
    )
    .unwrap();
    let manifest = Manifest::parse("train = train.ttpe ID\n", dir.path()).unwrap();
    assert!(matches!(manifest.load_training(), Err(Error::MissingLabels(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let meta = random_meta(9, 4, 3, 5);
    let bytes = checkpoint::encode(&meta);
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, meta);
    assert_eq!(checkpoint::encode(&back), bytes);
}
