mod common;

use std::path::Path;
use std::sync::Arc;

use caos::gateway::mock::MockTransport;
use caos::gateway::GatewayMode;
use caos::pipeline::{convert_coco, CocoOptions, PipelineError, ReportFormat, RunConfig, Session};
use caos::Vocabulary;
use common::*;

fn open(text: &str) -> Result<Session, PipelineError> {
    Session::open(parse_config(text), world_transport())
}

#[test]
fn missing_embedding_file_is_a_config_error_before_any_side_effect() {
    let dir = tempfile::tempdir().unwrap();
    let text = world_config(dir.path(), GatewayMode::Record).replace("embeddings.txt", "missing.txt");
    let err = open(&text).err().expect("must fail");
    assert!(matches!(err, PipelineError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(!dir.path().join("cache").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn replay_without_transcript_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = open(&world_config(dir.path(), GatewayMode::Replay)).err().expect("must fail");
    assert!(matches!(err, PipelineError::Config(_)), "{err}");
}

#[test]
fn unknown_endpoint_reference_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = world_config(dir.path(), GatewayMode::Live).replace("extractor = \"extractor\"", "extractor = \"nobody\"");
    assert_eq!(open(&text).err().unwrap().exit_code(), 2);
}

#[test]
fn exports_have_expected_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_world(dir.path(), GatewayMode::Live, world_transport());
    let out = dir.path().join("out");
    let per_caption = read(&out.join("per_caption.csv"));
    // one row per caption and store, plus the header
    assert_eq!(per_caption.lines().count(), 1 + 10 * 2);
    let sweep = read(&out.join("sweep.csv"));
    assert_eq!(sweep.lines().count(), 1 + 2 * 10);
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["oracle_template_version"], "oracle-v1");
    assert_eq!(manifest["mode"], "live");
    assert_eq!(manifest["records"], 10);
    assert!(outcome.manifest.gateway.network_calls > 0);
    for f in ReportFormat::ALL {
        assert!(out.join(f.file_name()).exists(), "{}", f.file_name());
    }
}

#[test]
fn report_rebuilt_from_records_matches_the_run() {
    let dir = tempfile::tempdir().unwrap();
    run_world(dir.path(), GatewayMode::Record, world_transport());
    let first = read(&dir.path().join("out/report.json"));
    let session = Session::open(parse_config(&world_config(dir.path(), GatewayMode::Replay)), Arc::new(MockTransport::forbidden())).unwrap();
    session.report_from_records().unwrap();
    assert_eq!(read(&dir.path().join("out/report.json")), first);
}

#[test]
fn generated_then_ingested_captions_score_like_a_full_run() {
    let full = tempfile::tempdir().unwrap();
    run_world(full.path(), GatewayMode::Live, world_transport());

    let staged = tempfile::tempdir().unwrap();
    let text = world_config(staged.path(), GatewayMode::Live);
    let session = open(&text).unwrap();
    assert_eq!(session.generate_captions().unwrap(), (10, 0));
    let captions = staged.path().join("out/captions.jsonl");
    assert_eq!(read(&captions).lines().count(), 10);

    let scoring = tempfile::tempdir().unwrap();
    let text = format!(
        "captions = \"{}\"\n{}",
        captions.display(),
        world_config(scoring.path(), GatewayMode::Live)
    );
    open(&text).unwrap().run().unwrap();
    assert_eq!(
        read(&scoring.path().join("out/report.json")),
        read(&full.path().join("out/report.json"))
    );
}

#[test]
fn several_instructions_give_one_group_each_and_a_mean_row() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("instruction_ids = [1, 2]\n{}", world_config(dir.path(), GatewayMode::Live));
    let outcome = open(&text).unwrap().run().unwrap();
    assert_eq!(outcome.report.groups.len(), 2);
    assert_eq!(outcome.report.work_items, 20);
    let variability = read(&dir.path().join("out/variability.csv"));
    let mean_rows: Vec<&str> = variability.lines().filter(|l| l.contains(",mean,")).collect();
    assert_eq!(mean_rows.len(), 2, "{variability}");
    // identical captions for both instructions, so the mean equals each row
    let remote: Vec<&str> = variability.lines().filter(|l| l.starts_with("vlm,remote,")).collect();
    let tail = |l: &str| l.splitn(4, ',').nth(3).unwrap().to_string();
    assert_eq!(tail(remote[0]), tail(remote[2]));
}

#[test]
fn resumed_run_only_processes_missing_items() {
    let dir = tempfile::tempdir().unwrap();
    run_world(dir.path(), GatewayMode::Live, world_transport());
    let again = world_transport();
    let outcome = run_world(dir.path(), GatewayMode::Live, again.clone());
    assert_eq!(again.calls(), 0);
    assert_eq!(outcome.report.groups[0].aggregate.captions, 10);
}

#[test]
fn coco_conversion_counts_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let coco = serde_json::json!({
        "images": [
            {"id": 2, "file_name": "b.jpg"},
            {"id": 1, "file_name": "a.jpg", "coco_url": "http://coco/a.jpg"}
        ],
        "annotations": [
            {"image_id": 1, "category_id": 1},
            {"image_id": 1, "category_id": 1},
            {"image_id": 1, "category_id": 18},
            {"image_id": 2, "category_id": 1}
        ],
        "categories": [{"id": 1, "name": "person"}, {"id": 18, "name": "dog"}]
    });
    let path = dir.path().join("instances.json");
    std::fs::write(&path, coco.to_string()).unwrap();
    let vocab = Vocabulary::load(&fixture("vocab.txt")).unwrap();
    let conv = convert_coco(&path, Some(&vocab), &CocoOptions::default()).unwrap();
    let ids: Vec<&str> = conv.instances.iter().map(|i| i.image_id.as_str()).collect();
    assert_eq!(ids, ["1", "2"]);
    assert_eq!(conv.instances[0].image, "http://coco/a.jpg");
    assert_eq!(conv.instances[1].image, "b.jpg");
    let person = caos::ObjectLabel::new("person").unwrap();
    assert_eq!(conv.frequency[&person], 2);
    assert_eq!(conv.cooccurrence.values().copied().collect::<Vec<_>>(), [1]);

    let written = conv.write(&dir.path().join("data")).unwrap();
    let config = format!(
        r#"
dataset = "{}"
vocabulary = "{}"
frequency = "{}"
cooccurrence = "{}"
k = 2
captioners = ["vlm"]

[[embeddings]]
kind = "file"
name = "toy"
path = "{}"

[[endpoints]]
name = "vlm"
base_url = "http://mock/v1"
role = "captioner"
"#,
        written[0].display(),
        fixture("vocab.txt").display(),
        written[1].display(),
        written[2].display(),
        fixture("embeddings.txt").display(),
    );
    let cfg = RunConfig::parse(&config, Path::new("/")).unwrap();
    caos::pipeline::Resources::load(&cfg).expect("converted files load back");
}
