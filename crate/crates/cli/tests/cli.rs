use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jointie::checkpoint;
use jointie::config::Config;
use jointie::evaluation::{evaluate, load_dataset, MetricsReport};
use jointie::model::ExtractOptions;
use jointie::text::ExtractionResult;
use tempfile::TempDir;

fn jointie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointie")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let mut c = Config::desk();
    c.encoder.dim = 16;
    c.encoder.bilstm_hidden = 16;
    c.encoder.heads = 2;
    c.encoder.layers = 1;
    c.stage1.epochs = 1;
    c.stage2.epochs = 2;
    c.stage2.batch_size = 4;
    let p = dir.join("small.toml");
    c.save(&p).unwrap();
    p
}

fn generate(dir: &Path, name: &str, size: usize, seed: u64) -> PathBuf {
    let p = dir.join(name);
    let o = jointie(&["generate", "--size", &size.to_string(), "--seed", &seed.to_string(), "--out", path_str(&p)]);
    assert!(o.status.success(), "{}", stderr(&o));
    p
}

/// Trains a small checkpoint and returns (dir, data path, checkpoint path, train stdout).
fn trained() -> (TempDir, PathBuf, PathBuf, String) {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "train.jsonl", 12, 3);
    let config = small_config(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let o = jointie(&["train", "--config", path_str(&config), "--data", path_str(&data), "--out", path_str(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    (dir, data, ckpt, out)
}

#[test]
fn generate_writes_requested_size_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    let o = jointie(&["generate", "--size", "100", "--seed", "4", "--out", path_str(&p)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 100);
    // recount from the file itself
    let data = load_dataset(&p).unwrap();
    let ents: usize = data.iter().map(|e| e.gold_entities.len()).sum();
    let rels: usize = data.iter().map(|e| e.gold_relations.len()).sum();
    assert_eq!(stdout(&o).trim(), format!("examples=100 entities={ents} relations={rels}"));
    assert!(stderr(&o).contains("# resolved configuration"));
}

#[test]
fn generate_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.jsonl", 30, 11);
    let b = generate(dir.path(), "b.jsonl", 30, 11);
    let c = generate(dir.path(), "c.jsonl", 30, 12);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn generate_rejects_bad_grammar() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.toml");
    std::fs::write(&g, "seed = 1\nentity_types = []\nrelations = []\ntemplates = []\n").unwrap();
    let o = jointie(&["generate", "--grammar", path_str(&g), "--out", path_str(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn large_preset_header_echoes_default_values() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "d.jsonl", 5, 1);
    let o = jointie(&["train", "--preset", "large", "--data", path_str(&data), "--out", path_str(&dir.path().join("m"))]);
    let header = stderr(&o);
    let resolved: Config = Config::from_toml(
        &header
            .lines()
            .skip_while(|l| !l.starts_with("# resolved"))
            .skip(1)
            .take_while(|l| !l.starts_with("error") && !l.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n"),
    )
    .unwrap();
    assert_eq!(resolved.encoder.backbone, "deberta-v3-large");
    assert_eq!(resolved.encoder.max_words, 2048);
    assert!(resolved.encoder.bilstm);
    assert_eq!(resolved.encoder.bilstm_hidden, 1024);
    assert_eq!(resolved.span.max_width, 12);
    assert_eq!((resolved.loss.alpha, resolved.loss.gamma), (0.75, 0.0));
    assert_eq!((resolved.stage1.encoder_lr, resolved.stage1.head_lr, resolved.stage1.epochs), (1e-5, 5e-5, 1));
    assert_eq!((resolved.stage2.encoder_lr, resolved.stage2.head_lr, resolved.stage2.epochs), (3e-6, 5e-6, 5));
    assert_eq!((resolved.stage1.batch_size, resolved.stage1.warmup_ratio), (8, 0.05));
    assert_eq!((resolved.inference.entity_threshold, resolved.inference.relation_threshold), (0.3, 0.5));
    // the pretrained backbone is not bundled, so the run stops with a user error
    assert_eq!(o.status.code(), Some(1));
    assert!(header.contains("backbone"));
}

#[test]
fn dry_run_validates_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "d.jsonl", 5, 1);
    let ckpt = dir.path().join("m.ckpt");
    let o = jointie(&["train", "--dry-run", "--data", path_str(&data), "--out", path_str(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!ckpt.exists());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[encoder]\ndim = 7\n").unwrap();
    let o = jointie(&["train", "--dry-run", "--config", path_str(&bad), "--data", path_str(&data), "--out", path_str(&ckpt)]);
    assert_eq!(o.status.code(), Some(1));

    // no data files: synthetic corpora from the built-in grammar
    let o = jointie(&["train", "--dry-run", "--stage2-size", "20", "--out", path_str(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("# data: 20 examples, 5 entity labels, 4 relation labels"), "{}", stderr(&o));

    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"tokens\": [\"a\"]}\nnot json\n").unwrap();
    let o = jointie(&["train", "--dry-run", "--data", path_str(&broken), "--out", path_str(&ckpt)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(":1:") || stderr(&o).contains(":2:"), "{}", stderr(&o));
}

#[test]
fn checkpoint_reproduces_final_training_loss() {
    let (_dir, data, ckpt, out) = trained();
    let summary: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    let recorded = summary["final_train_loss"].as_f64().unwrap();
    let (model, manifest) = checkpoint::load(&ckpt).unwrap();
    assert_eq!(manifest.final_train_loss, Some(recorded));
    let again = model.mean_loss(&load_dataset(&data).unwrap()).unwrap();
    assert!((again - recorded).abs() <= 1e-6, "{again} vs {recorded}");
    let trace = std::fs::read_to_string(PathBuf::from(format!("{}.trace.csv", ckpt.display()))).unwrap();
    // stage 1: 12 examples / batch 8 = 2 steps; stage 2: 2 epochs × 3 steps
    assert_eq!(trace.lines().count(), 1 + 2 + 6);
}

#[test]
fn extract_structure_thresholds_and_order() {
    let (dir, _, ckpt, _) = trained();
    let ck = path_str(&ckpt);
    let text = "The Eiffel Tower, located in Paris, France, was designed by engineer Gustave Eiffel and completed in 1889.";
    let mut args = vec!["extract", "--checkpoint", ck, "--text", text, "--threshold", "0.0"];
    for l in ["location", "person", "date", "structure"] {
        args.extend(["--entity-label", l]);
    }
    for l in ["located in", "designed by", "completed in"] {
        args.extend(["--relation-label", l]);
    }
    let o = jointie(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let results: Vec<ExtractionResult> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(results.len(), 1);
    let r = &results[0];
    assert_eq!(r.text, text);
    assert!(!r.entities.is_empty());
    for e in &r.entities {
        let surface: String = text.chars().skip(e.char_start).take(e.char_end - e.char_start).collect();
        assert_eq!(surface, e.text);
        assert!(["location", "person", "date", "structure"].contains(&e.label.as_str()));
    }
    for x in &r.relations {
        assert_eq!(r.entities[x.head_entity].text, x.head);
        assert_eq!(r.entities[x.tail_entity].text, x.tail);
    }

    // relation threshold 1.0 admits nothing
    let mut strict = args.clone();
    strict.extend(["--relation-threshold", "1.0"]);
    let o = jointie(&strict);
    let r: ExtractionResult = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(r.relations.is_empty());

    // three texts, one result each, in input order; labels from files
    let input = dir.path().join("texts.txt");
    std::fs::write(&input, "Alice Smith works for Globex .\n\nParis is located in France .\nHooli was founded in 1999 .\n").unwrap();
    let ents = dir.path().join("ents.txt");
    std::fs::write(&ents, "person\norganization\ncity\ncountry\ndate\n").unwrap();
    let o = jointie(&["extract", "--checkpoint", ck, "--input", path_str(&input), "--entity-labels-file", path_str(&ents)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let texts: Vec<String> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str::<ExtractionResult>(l).unwrap())
        .map(|r| {
            assert!(r.relations.is_empty());
            r.text
        })
        .collect();
    assert_eq!(texts, ["Alice Smith works for Globex .", "Paris is located in France .", "Hooli was founded in 1999 ."]);
    assert!(stderr(&o).contains("entity_threshold = 0.3"));

    let o = jointie(&["extract", "--checkpoint", ck, "--input", path_str(&input), "--entity-labels-file", path_str(&ents), "--pretty"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("entity"));
}

#[test]
fn extract_user_errors() {
    let (_dir, _, ckpt, _) = trained();
    let ck = path_str(&ckpt);
    assert_eq!(jointie(&["extract", "--checkpoint", ck, "--text", "x"]).status.code(), Some(1));
    assert_eq!(
        jointie(&["extract", "--checkpoint", "/nonexistent", "--text", "x", "--entity-label", "a"]).status.code(),
        Some(1)
    );
    assert_eq!(
        jointie(&["extract", "--checkpoint", ck, "--text", "x", "--entity-label", "a", "--threshold", "2"]).status.code(),
        Some(1)
    );
    assert_eq!(jointie(&["extract", "--bogus"]).status.code(), Some(1));
    assert_eq!(jointie(&["--help"]).status.code(), Some(0));
}

#[test]
fn eval_matches_direct_metric_calls() {
    let (_dir, data, ckpt, _) = trained();
    let o = jointie(&["eval", "--checkpoint", path_str(&ckpt), "--data", path_str(&data), "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: MetricsReport = serde_json::from_str(stdout(&o).trim()).unwrap();

    let (model, _) = checkpoint::load(&ckpt).unwrap();
    let gold = load_dataset(&data).unwrap();
    let opts = ExtractOptions::from_config(&model.config);
    let mut ents = Vec::new();
    let mut rels = Vec::new();
    for ex in &gold {
        let x = model.extract(&ex.tokens, &model.schema.entity_labels, &model.schema.relation_labels, &opts).unwrap();
        let (e, r) = x.mentions(&model.schema);
        ents.push(e);
        rels.push(r);
    }
    assert_eq!(report, evaluate(&ents, &rels, &gold, false).unwrap());

    let o = jointie(&["eval", "--checkpoint", path_str(&ckpt), "--data", path_str(&data)]);
    assert!(stdout(&o).contains("micro-f1"));
}

#[test]
fn eval_rejects_empty_dataset() {
    let (dir, _, ckpt, _) = trained();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = jointie(&["eval", "--checkpoint", path_str(&ckpt), "--data", path_str(&empty)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no examples"));
}
