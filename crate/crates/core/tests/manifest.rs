use std::fs;

use mlfuse::data::{read_manifest, Dataset, Split, SynthConfig, IMAGE_DIR, MANIFEST_FILE};
use mlfuse::model::Task;
use mlfuse::tensor::{read_blob, write_blob, Tensor};
use mlfuse::Error;

fn dataset(task: Task) -> Dataset {
    Dataset::generate(task, &SynthConfig::default(), 12, 21).unwrap()
}

#[test]
fn save_then_load_is_lossless() {
    for task in [Task::PerceptualQuality, Task::Correspondence] {
        let data = dataset(task);
        let dir = tempfile::tempdir().unwrap();
        data.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path(), SynthConfig::default()).unwrap();
        assert_eq!(back.records, data.records);
        assert_eq!(back.images, data.images);
        assert!(back.factors.is_empty());
        assert!(dir.path().join(IMAGE_DIR).join("000011.mlt").is_file());
    }
}

#[test]
fn manifest_lines_carry_the_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    dataset(Task::Correspondence).save(dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(text.lines().count(), 12);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["image_ref", "mos_correspondence", "mos_quality", "prompt_tokens", "split"]);
        assert!(["train", "test"].contains(&obj["split"].as_str().unwrap()));
    }
}

#[test]
fn truncated_last_line_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    dataset(Task::PerceptualQuality).save(dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, &text[..text.len() - 10]).unwrap();
    match read_manifest(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 12),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let err = Dataset::load(dir.path(), SynthConfig::default()).unwrap_err();
    assert!(err.to_string().contains(":12:"), "{err}");
}

#[test]
fn out_of_range_label_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    fs::write(
        &path,
        "{\"image_ref\":\"a.mlt\",\"prompt_tokens\":[1],\"mos_quality\":1.5,\"mos_correspondence\":0.2,\"split\":\"train\"}\n",
    )
    .unwrap();
    assert!(matches!(read_manifest(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn missing_blob_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(Task::PerceptualQuality);
    data.save(dir.path()).unwrap();
    fs::remove_file(dir.path().join(&data.records[7].image_ref)).unwrap();
    let err = Dataset::load(dir.path(), SynthConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err:?}");
}

#[test]
fn split_survives_the_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::generate(Task::PerceptualQuality, &SynthConfig::default(), 50, 3).unwrap();
    data.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path(), SynthConfig::default()).unwrap();
    assert_eq!(back.indices(Split::Train), data.indices(Split::Train));
    assert_eq!(back.indices(Split::Test).len(), 10);
}

#[test]
fn blobs_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.mlt");
    let t = Tensor::<f64>::new(vec![2, 3], vec![0.1, -0.0, 1e-300, 3.5, -7.25, f64::MIN_POSITIVE]).unwrap();
    write_blob(&path, &t).unwrap();
    let back = read_blob(&path).unwrap().into_real::<f64>();
    assert_eq!(back.shape(), t.shape());
    assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}
