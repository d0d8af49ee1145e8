use ria_core::container::{self, TensorMap};
use ria_core::synthdata::{
    build_dataset, generate_clip, generate_dataset, load_dataset, ClipDims, InteractionClass, Split,
};
use ria_core::{Error, Tensor};

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn save_load_save_is_byte_identical() {
    let mut map = TensorMap::new();
    map.insert("a".into(), Tensor::new(vec![2, 3], vec![0.1, -0.0, 1e-300, 3.5, f64::MIN_POSITIVE, -7.0]).unwrap());
    map.insert("scalar".into(), Tensor::scalar(42.0).unwrap());
    let tmp = tempfile::tempdir().unwrap();
    let (p, q) = (tmp.path().join("p.ialt"), tmp.path().join("q.ialt"));
    container::save(&p, &map).unwrap();
    let back = container::load(&p).unwrap();
    container::save(&q, &back).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    for (k, v) in &map {
        assert_eq!(bits(v), bits(&back[k]));
    }
}

#[test]
fn every_truncation_is_an_io_error() {
    let mut map = TensorMap::new();
    map.insert("w".into(), Tensor::ones(vec![4, 4]).unwrap());
    let bytes = container::encode(&map).unwrap();
    for cut in 0..bytes.len() {
        assert!(matches!(container::decode(&bytes[..cut]), Err(Error::Io(_))), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(container::decode(&bad), Err(Error::FormatVersionMismatch(_))));
}

#[test]
fn dataset_round_trips_and_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let dims = ClipDims::default();
    let manifest = build_dataset(180, 1, &dims, tmp.path()).unwrap();
    assert_eq!((manifest.count(Split::Train), manifest.count(Split::Test)), (162, 18));
    assert_eq!(manifest.histogram.values().sum::<usize>(), 180);
    let back = load_dataset(tmp.path()).unwrap();
    let fresh = generate_dataset(180, 1, &dims).unwrap();
    assert_eq!(back.manifest, fresh.manifest);
    for (a, b) in back.clips.iter().zip(&fresh.clips) {
        assert_eq!(bits(&a.frames), bits(&b.frames));
        assert_eq!(bits(&a.hand_mask), bits(&b.hand_mask));
        assert_eq!(bits(&a.face_mask), bits(&b.face_mask));
        assert_eq!(bits(&a.identity), bits(&b.identity));
    }
}

#[test]
fn eighteen_clips_cover_each_class_once() {
    let d = generate_dataset(18, 9, &ClipDims::default()).unwrap();
    assert_eq!(d.manifest.histogram.len(), 18);
    assert!(d.manifest.histogram.values().all(|&n| n == 1));
}

#[test]
fn missing_manifest_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(tmp.path()), Err(Error::Io(_))));
}

#[test]
fn distinct_seeds_give_distinct_clips() {
    let dims = ClipDims::default();
    for class in InteractionClass::ALL {
        let a = generate_clip(class, 100, &dims).unwrap();
        let b = generate_clip(class, 101, &dims).unwrap();
        assert_ne!(bits(&a.frames), bits(&b.frames), "{}", class.label());
        assert_eq!(bits(&a.frames), bits(&generate_clip(class, 100, &dims).unwrap().frames));
    }
}

#[test]
fn nose_pinch_touches_the_face() {
    let dims = ClipDims::default();
    for class in [InteractionClass::LhNosePinch, InteractionClass::RhNosePinch] {
        let clip = generate_clip(class, 3, &dims).unwrap();
        let overlap = clip.hand_mask.mul(&clip.face_mask).unwrap().sum_all();
        assert!(overlap > 0.0);
        let plane = dims.height * dims.width;
        let first = clip.hand_mask.data()[..plane].iter().zip(&clip.face_mask.data()[..plane]);
        assert!(first.map(|(h, f)| h * f).sum::<f64>() == 0.0);
    }
}
