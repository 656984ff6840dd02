use twophase::dataset::{
    generate_dataset, load_dataset, save_dataset, BodyLayout, Manifest, SynthSpec, MANIFEST_FILE,
};
use twophase::io::{read_json, write_json, GrayImage};

fn spec(samples: usize, seed: u64) -> SynthSpec {
    SynthSpec { samples, rng_seed: seed, ..SynthSpec::default() }
}

#[test]
fn save_load_round_trip_is_exact() {
    for layout in [BodyLayout::Shared, BodyLayout::PerClass, BodyLayout::Axis] {
        let data = generate_dataset(&SynthSpec { body_layout: layout, ..spec(12, 3) }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        assert_eq!(back.checksum(), data.checksum());
    }
}

#[test]
fn dangling_file_names_the_entry() {
    let data = generate_dataset(&spec(5, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("img_00003.pgm")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("entry 3") && err.contains("img_00003.pgm"), "{err}");
}

#[test]
fn malformed_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(MANIFEST_FILE), b"{\"schema\": 1, \"samples\": 7}").unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn unknown_schema_is_rejected() {
    let data = generate_dataset(&spec(2, 5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let mut manifest: Manifest = read_json(&path).unwrap();
    manifest.schema = 2;
    write_json(&path, &manifest).unwrap();
    assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("schema"));
}

#[test]
fn manifest_pixel_counts_match_mask_files() {
    let data = generate_dataset(&spec(20, 6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path()).unwrap();
    let manifest: Manifest = read_json(&dir.path().join(MANIFEST_FILE)).unwrap();
    for entry in &manifest.samples {
        for o in &entry.objects {
            let pgm = GrayImage::load(&dir.path().join(&o.mask)).unwrap();
            assert!(pgm.pixels.iter().all(|&p| p == 0 || p == 255));
            let count = pgm.pixels.iter().filter(|&&p| p == 255).count();
            assert_eq!(count, o.mask_pixels, "{}", o.mask);
        }
    }
}

#[test]
fn class_shares_match_spec_probabilities() {
    let s = spec(2400, 7);
    let data = generate_dataset(&s).unwrap();
    let expected = s.expected_class_share();
    for c in 0..s.class_count {
        let share = data.samples.iter().filter(|x| x.labels[c] == 1.0).count() as f64 / data.samples.len() as f64;
        assert!((share - expected).abs() <= 0.05, "class {c}: {share} vs {expected}");
    }
}

#[test]
fn positive_labels_have_objects_inside_the_image() {
    let data = generate_dataset(&spec(200, 8)).unwrap();
    for s in &data.samples {
        for c in 0..4 {
            let has = s.objects.iter().any(|o| o.class_id == c);
            assert_eq!(has, s.labels[c] == 1.0);
        }
        for o in &s.objects {
            assert!(o.bbox.bottom < 64 && o.bbox.right < 64);
            assert!(o.core_box.iou(&o.body_box) < 0.2);
        }
    }
}
