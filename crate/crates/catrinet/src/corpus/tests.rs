use std::collections::HashSet;

use super::*;
use crate::vocab::Vocabulary;

fn spec(num: usize, seed: u64) -> CorpusSpec {
    CorpusSpec {
        num_samples: num,
        abnormal_fraction: 0.2,
        tag_classes: 6,
        image_size: 32,
        noise: 0.02,
        seed,
        split: [0.7, 0.1, 0.2],
        templates: None,
    }
}

#[test]
fn generation_is_byte_deterministic() {
    let a = generate(&spec(40, 7)).unwrap();
    let b = generate(&spec(40, 7)).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let pa = dir.path().join("a.jsonl");
    let pb = dir.path().join("b.jsonl");
    save_jsonl(&pa, &a).unwrap();
    save_jsonl(&pb, &b).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
}

#[test]
fn different_seeds_differ() {
    let a = generate(&spec(20, 1)).unwrap();
    let b = generate(&spec(20, 2)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn zero_abnormal_fraction_is_all_normal() {
    let mut s = spec(30, 3);
    s.abnormal_fraction = 0.0;
    let samples = generate(&s).unwrap();
    let all_normal = {
        let mut t = vec![0u8; 6];
        t[0] = 1;
        t
    };
    for sample in &samples {
        assert_eq!(sample.tags.0, all_normal);
        assert_eq!(sample.report, TemplateBank::default().normal);
    }
}

#[test]
fn abnormal_reports_contain_their_class_keyword() {
    let mut s = spec(200, 4);
    s.abnormal_fraction = 0.5;
    let bank = TemplateBank::default();
    let samples = generate(&s).unwrap();
    let mut seen_classes = HashSet::new();
    for sample in &samples {
        if sample.tags.0[0] == 1 {
            for c in &bank.classes {
                assert!(
                    !sample.report.contains(&c.keyword),
                    "normal report mentions {}",
                    c.keyword
                );
            }
        } else {
            let class = (1..=bank.classes.len()).find(|&i| sample.tags.0[i] == 1).unwrap() - 1;
            seen_classes.insert(class);
            assert!(
                sample.report.contains(&bank.classes[class].keyword),
                "class {class} report missing keyword: {}",
                sample.report
            );
            // redundant marker bit mirrors the class flag
            assert_eq!(sample.tags.0[5] == 1, bank.classes[class].marker);
        }
    }
    assert_eq!(seen_classes.len(), bank.classes.len(), "all classes should appear");
}

#[test]
fn normal_images_cluster_tighter_than_abnormal() {
    let mut s = spec(400, 5);
    s.abnormal_fraction = 0.3;
    let samples = generate(&s).unwrap();
    let normals: Vec<&Sample> = samples.iter().filter(|s| s.tags.0[0] == 1).take(11).collect();
    let abnormals: Vec<&Sample> = samples.iter().filter(|s| s.tags.0[0] == 0).take(100).collect();
    let l2 = |a: &Sample, b: &Sample| {
        a.image
            .pixels
            .iter()
            .zip(&b.image.pixels)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let probe = normals[0];
    let mut normal_dists = Vec::new();
    for n in &normals[1..] {
        normal_dists.push(l2(probe, n));
    }
    let mean_normal = normal_dists.iter().sum::<f64>() / normal_dists.len() as f64;
    let mut checked = 0;
    for a in &abnormals {
        let d = l2(probe, a);
        assert!(
            mean_normal < d,
            "normal-normal mean {mean_normal} not below normal-abnormal {d}"
        );
        checked += 1;
    }
    assert!(checked >= 100, "need at least 100 abnormal draws, got {checked}");
}

#[test]
fn reports_roundtrip_through_the_vocabulary() {
    let samples = generate(&spec(50, 6)).unwrap();
    let vocab = Vocabulary::build(samples.iter().map(|s| s.report.as_str()), 1);
    for s in &samples {
        let ids = vocab.encode(&s.report);
        assert_eq!(vocab.decode(&ids), s.report);
    }
}

#[test]
fn jsonl_roundtrip_preserves_fields() {
    let samples = generate(&spec(12, 8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("data.jsonl");
    save_jsonl(&p, &samples).unwrap();
    let loaded = load_jsonl(&p).unwrap();
    assert_eq!(samples, loaded);
}

#[test]
fn empty_file_loads_as_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    std::fs::write(&p, "").unwrap();
    assert!(load_jsonl(&p).unwrap().is_empty());
}

#[test]
fn missing_report_errors_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    let good = r#"{"id":"a","image":{"h":2,"w":2,"px":[0.0,0.1,0.2,0.3]},"report":"x y","tags":[1,0]}"#;
    let bad = r#"{"id":"b","image":{"h":2,"w":2,"px":[0.0,0.1,0.2,0.3]},"tags":[1,0]}"#;
    std::fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
    match load_jsonl(&p) {
        Err(crate::Error::Parse(msg)) => assert!(msg.contains("line 2"), "msg: {msg}"),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn inconsistent_tag_length_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("tags.jsonl");
    let a = r#"{"id":"a","image":{"h":1,"w":2,"px":[0.0,0.1]},"report":"x","tags":[1,0,0]}"#;
    let b = r#"{"id":"b","image":{"h":1,"w":2,"px":[0.0,0.1]},"report":"y","tags":[1,0]}"#;
    std::fs::write(&p, format!("{a}\n{b}\n")).unwrap();
    match load_jsonl(&p) {
        Err(crate::Error::Parse(msg)) => assert!(msg.contains("line 2"), "msg: {msg}"),
        other => panic!("expected error, got {other:?}"),
    }
}

#[test]
fn image_path_rows_load_pgm_files() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("img.pgm");
    let mut bytes = b"P5\n2 2\n255\n".to_vec();
    bytes.extend_from_slice(&[0, 255, 128, 64]);
    std::fs::write(&pgm, bytes).unwrap();
    let p = dir.path().join("data.jsonl");
    let row = r#"{"id":"a","image_path":"img.pgm","report":"x y","tags":[1,0]}"#;
    std::fs::write(&p, format!("{row}\n")).unwrap();
    let samples = load_jsonl(&p).unwrap();
    assert_eq!(samples.len(), 1);
    assert_eq!((samples[0].image.height, samples[0].image.width), (2, 2));
    assert_eq!(samples[0].image.pixels[1], 1.0);
}

#[test]
fn split_sizes_follow_the_ratios() {
    let samples = generate(&spec(10, 9)).unwrap();
    let (train, val, test) = split(&samples, [0.7, 0.1, 0.2], 1).unwrap();
    assert_eq!((train.len(), val.len(), test.len()), (7, 1, 2));
}

#[test]
fn split_is_seed_deterministic_and_partitions() {
    let samples = generate(&spec(37, 10)).unwrap();
    let (t1, v1, e1) = split(&samples, [0.7, 0.1, 0.2], 5).unwrap();
    let (t2, v2, e2) = split(&samples, [0.7, 0.1, 0.2], 5).unwrap();
    assert_eq!(t1, t2);
    assert_eq!(v1, v2);
    assert_eq!(e1, e2);
    let mut ids: Vec<&str> = t1.iter().chain(&v1).chain(&e1).map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    let unique: HashSet<&&str> = ids.iter().collect();
    assert_eq!(unique.len(), samples.len(), "splits must be disjoint");
    assert_eq!(ids.len(), samples.len(), "splits must cover the corpus");
}

#[test]
fn bad_ratio_sum_is_a_configuration_error() {
    let samples = generate(&spec(5, 11)).unwrap();
    assert!(matches!(
        split(&samples, [0.7, 0.1, 0.1], 0),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn spec_validation_rejects_bad_fields() {
    let mut s = spec(10, 0);
    s.abnormal_fraction = 1.5;
    assert!(s.validate().is_err());
    let mut s = spec(10, 0);
    s.tag_classes = 4;
    assert!(s.validate().is_err());
    let mut s = spec(10, 0);
    s.split = [0.5, 0.5, 0.5];
    assert!(s.validate().is_err());
}
