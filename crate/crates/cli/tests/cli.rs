use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn caos(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caos"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Offline configuration: ingested captions scored with the file store.
fn setup(embeddings: &Path) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let captions = [
        (1, "A man throws a frisbee to a dog near a bench."),
        (2, "A cat on a couch next to a laptop."),
        (3, "A pizza on a table."),
        (6, "A giraffe next to an elephant and a car."),
    ];
    let lines: String = captions
        .iter()
        .map(|(id, c)| format!("{{\"model\": \"vlm\", \"image_id\": \"{id}\", \"instruction_id\": \"1\", \"caption\": \"{c}\"}}\n"))
        .collect();
    std::fs::write(dir.path().join("captions.jsonl"), lines).unwrap();
    let f = fixtures();
    let config = format!(
        r#"dataset = "{f}/dataset.jsonl"
vocabulary = "{f}/vocab.txt"
frequency = "{f}/frequency.tsv"
cooccurrence = "{f}/cooccurrence.tsv"
captions = "captions.jsonl"

[[embeddings]]
kind = "file"
name = "toy"
path = "{e}"
"#,
        f = f.display(),
        e = embeddings.display()
    );
    std::fs::write(dir.path().join("caos.toml"), config).unwrap();
    dir
}

#[test]
fn score_then_rebuild_exports() {
    let dir = setup(&fixtures().join("embeddings.txt"));
    let out = caos(dir.path(), &["score", "--config", "caos.toml", "--out", "results"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout(&out);
    assert!(summary.starts_with("model,instruction_id,store,metric,value\n"), "{summary}");
    assert!(summary.contains("vlm,1,,chair_s,0.75\n"), "{summary}");
    assert!(dir.path().join("results/report.json").exists());

    let out = caos(dir.path(), &["report", "--config", "caos.toml", "--out", "results", "--format", "per-caption"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).lines().count(), 1 + 4);

    let out = caos(dir.path(), &["sweep-k", "--config", "caos.toml", "--out", "results", "--k-max", "5"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).lines().count(), 1 + 5);

    let out = caos(dir.path(), &["subsets", "--config", "caos.toml", "--out", "results", "--exclude-top", "1"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("excluding_top_1_frequent"));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = setup(&fixtures().join("no-such-embeddings.txt"));
    let out = caos(dir.path(), &["score", "--config", "caos.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());

    let out = caos(dir.path(), &["score", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(2));

    let out = caos(dir.path(), &["report", "--config", "caos.toml", "--format", "pie-chart"]);
    assert_eq!(out.status.code(), Some(2));

    let good = setup(&fixtures().join("embeddings.txt"));
    let out = caos(good.path(), &["score", "--config", "caos.toml", "--mode", "replay"]);
    assert_eq!(out.status.code(), Some(2), "replay needs a transcript");
}

#[test]
fn failed_run_exits_1() {
    // none of the most frequent labels can be embedded, so every caption fails
    let scratch = tempfile::tempdir().unwrap();
    let embeddings = scratch.path().join("tiny.txt");
    std::fs::write(&embeddings, "dog 1 0 0\nbench 0 1 0\n").unwrap();
    let dir = setup(&embeddings);
    let out = caos(dir.path(), &["score", "--config", "caos.toml"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn convert_coco_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let coco = r#"{"images": [{"id": 1, "file_name": "a.jpg"}],
        "annotations": [{"image_id": 1, "category_id": 1}, {"image_id": 1, "category_id": 2}],
        "categories": [{"id": 1, "name": "person"}, {"id": 2, "name": "sofa"}]}"#;
    std::fs::write(dir.path().join("instances.json"), coco).unwrap();
    let vocab = fixtures().join("vocab.txt");
    let out = caos(
        dir.path(),
        &["convert-coco", "instances.json", "--to", "data", "--vocabulary", vocab.to_str().unwrap(), "--image-root", "/images"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dataset = std::fs::read_to_string(dir.path().join("data/dataset.jsonl")).unwrap();
    assert!(dataset.contains("\"/images/a.jpg\""), "{dataset}");
    assert!(dataset.contains("couch"), "{dataset}");
    let cooc = std::fs::read_to_string(dir.path().join("data/cooccurrence.tsv")).unwrap();
    assert!(cooc.contains("couch\tperson\t1"), "{cooc}");
}
