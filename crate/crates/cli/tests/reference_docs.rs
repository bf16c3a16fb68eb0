//! Keeps the checked-in reference material honest: every fenced example in
//! `formats.md` must parse through the real readers, and the shipped
//! benchmark config must stay in sync with the built-in default.

use std::fs;
use std::path::{Path, PathBuf};

use ctxcrf_cli::formats::{
    read_annotations, read_detections, read_features, read_manifest, read_pairwise_model,
    read_report, read_scene_model, read_synth_config,
};
use ctxcrf_core::categories::CategorySpace;
use ctxcrf_core::synth::default_fixture;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

/// Fenced code blocks with an explicit language tag, in document order.
fn tagged_blocks(text: &str) -> Vec<(String, String)> {
    let mut blocks = Vec::new();
    let mut tag: Option<String> = None;
    let mut body = String::new();
    for line in text.lines() {
        if let Some(rest) = line.trim_start().strip_prefix("```") {
            match tag.take() {
                Some(t) => {
                    if !t.is_empty() {
                        blocks.push((t, body.clone()));
                    }
                    body.clear();
                }
                None => tag = Some(rest.trim().to_string()),
            }
        } else if tag.is_some() {
            body.push_str(line);
            body.push('\n');
        }
    }
    assert!(tag.is_none(), "unterminated code fence in formats.md");
    blocks
}

fn kind_of(block: &str) -> String {
    // JSONL examples carry the kind on their header line; whole-file JSON
    // examples may be pretty-printed, so fall back to parsing the full block.
    let first = block.lines().next().expect("example block is non-empty");
    let value: serde_json::Value = serde_json::from_str(first)
        .or_else(|_| serde_json::from_str(block))
        .expect("example parses as JSON");
    value["kind"]
        .as_str()
        .expect("example header carries a kind")
        .to_string()
}

#[test]
fn every_format_example_in_the_reference_parses() {
    let text = fs::read_to_string(repo_root().join("formats.md")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut seen = Vec::new();

    for (index, (tag, body)) in tagged_blocks(&text).into_iter().enumerate() {
        if tag == "csv" {
            let mut lines = body.lines();
            let header = lines.next().unwrap();
            assert!(header.starts_with("omega_p,omega_g,map,ap_"), "{header}");
            let columns = header.split(',').count();
            for row in lines {
                assert_eq!(row.split(',').count(), columns, "ragged row: {row}");
                for cell in row.split(',').filter(|c| !c.is_empty()) {
                    cell.parse::<f64>().unwrap();
                }
            }
            seen.push("sweep-csv".to_string());
            continue;
        }
        assert_eq!(tag, "json", "unexpected example language {tag}");
        let kind = kind_of(&body);
        let path = dir.path().join(format!("example-{index}"));
        fs::write(&path, &body).unwrap();
        match kind.as_str() {
            "detections" => {
                let read = read_detections(&path).unwrap();
                assert!(!read.sets.is_empty());
                assert_eq!(read.dropped_rows, 0);
            }
            "annotations" => {
                let (truth, _) = read_annotations(&path, None).unwrap();
                assert!(truth.object_count() > 0);
            }
            "features" => {
                assert!(!read_features(&path).unwrap().is_empty());
            }
            "pairwise-model" => {
                read_pairwise_model(&path).unwrap();
            }
            "scene-model" => {
                read_scene_model(&path).unwrap();
            }
            "eval-report" => {
                let value: serde_json::Value = serde_json::from_str(&body).unwrap();
                let names: Vec<String> = value["classes"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|c| c["label"].as_str().unwrap().to_string())
                    .collect();
                let space = CategorySpace::new(names).unwrap();
                read_report(&path, &space).unwrap();
            }
            "synth-config" => {
                read_synth_config(&path).unwrap();
            }
            "dataset-manifest" => {
                let (_, images) = read_manifest(&path).unwrap();
                assert!(!images.is_empty());
            }
            other => panic!("example with undocumented kind '{other}'"),
        }
        seen.push(kind);
    }

    seen.sort();
    let mut expected = vec![
        "annotations",
        "dataset-manifest",
        "detections",
        "eval-report",
        "features",
        "pairwise-model",
        "scene-model",
        "sweep-csv",
        "synth-config",
    ];
    expected.sort_unstable();
    assert_eq!(seen, expected, "one example per format, each exactly once");
}

#[test]
fn shipped_benchmark_config_matches_the_built_in_default() {
    let parsed = read_synth_config(&repo_root().join("fixtures/synth-default.json")).unwrap();
    assert_eq!(parsed, default_fixture());
}
