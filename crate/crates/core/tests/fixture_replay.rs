mod common;

use toolstream::corpus::StreamSpec;
use toolstream::report::{run_report, CompletionSourceSpec, RunManifest};
use toolstream::transform::{Condition, PromptTemplate};

#[test]
fn final_stage_table_matches_per_block_accuracies() {
    let fx = common::fixture_dir();
    let out = tempfile::tempdir().unwrap();
    let manifest = RunManifest {
        corpus: fx.join("corpus.jsonl"),
        blocks_file: Some(fx.join("blocks.json")),
        stream: StreamSpec::new(4, 42).unwrap(),
        conditions: Condition::ALL.to_vec(),
        stages: vec![4],
        source: CompletionSourceSpec::Import {
            files: [
                (Condition::Stripped, fx.join("completions_A.jsonl")),
                (Condition::Trajectory, fx.join("completions_B.jsonl")),
            ]
            .into(),
            strict_hashes: true,
        },
        template: PromptTemplate::default(),
        output_dir: out.path().to_path_buf(),
        tool_version: "test".into(),
    };
    run_report(&manifest).unwrap();
    let table = std::fs::read_to_string(out.path().join("final_stage.csv")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.contains("malformed")).collect();
    // The trailing micro column is checked only for presence.
    let strip_micro = |l: &str| l.rsplit_once(',').unwrap().0.to_string();
    let got: Vec<String> = rows.iter().map(|l| strip_micro(l)).collect();
    assert_eq!(
        got,
        [
            "condition,stage,metric,D1,D2,D3,D4,mean",
            "A,4,exact,35.7,43.3,32.0,45.8,39.2",
            "A,4,name,64.3,62.5,60.2,79.4,66.6",
            "A,4,name_any,51.6,56.7,50.5,65.4,56.1",
            "B,4,exact,57.9,61.5,44.7,63.6,56.9",
            "B,4,name,73.8,82.7,67.0,73.8,74.3",
            "B,4,name_any,67.5,76.9,61.2,72.0,69.4",
        ]
    );
}

#[test]
fn fixture_blocks_are_disjoint_and_sized() {
    let fx = common::fixture_dir();
    let episodes = toolstream::corpus::load_corpus(
        &fx.join("corpus.jsonl"),
        toolstream::corpus::CorpusFormat::Jsonl,
    )
    .unwrap();
    assert_eq!(toolstream::corpus::extract_all(&episodes).len(), 440);
    let blocks = toolstream::corpus::BlocksFile::read(&fx.join("blocks.json"))
        .unwrap()
        .resolve(&episodes)
        .unwrap();
    let sizes: Vec<usize> = blocks.iter().map(|b| b.examples.len()).collect();
    assert_eq!(sizes, [126, 104, 103, 107]);
}
