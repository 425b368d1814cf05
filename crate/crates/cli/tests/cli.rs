use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn medtok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medtok"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = medtok(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Corpus {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&[
            "gen-synthetic",
            "--out",
            root.join("c").to_str().unwrap(),
            "--families",
            "2",
            "--codes-per-family",
            "16",
            "--seed",
            "5",
        ]);
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).to_str().unwrap().to_string()
    }

    fn corpus_args(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (flag, file) in [
            ("--codes", "c/codes.jsonl"),
            ("--kg-nodes", "c/kg_nodes.tsv"),
            ("--kg-edges", "c/kg_edges.tsv"),
            ("--map", "c/mapping.tsv"),
        ] {
            v.push(flag.to_string());
            v.push(self.path(file));
        }
        v
    }

    fn train(&self, out: &str, steps: &str, extra: &[&str]) -> String {
        let mut args: Vec<String> = vec!["train".into()];
        args.extend(self.corpus_args());
        for a in [
            "--text-emb",
            &self.path("c/text_pooled.bin"),
            "--text-states",
            &self.path("c/text_states.bin"),
            "--codebook-size",
            "32",
            "--dim",
            "8",
            "--steps",
            steps,
            "--batch",
            "8",
            "--checkpoint-every",
            "3",
            "--out",
            &self.path(out),
        ] {
            args.push(a.to_string());
        }
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs)
    }

    fn code_ids(&self) -> Vec<String> {
        fs::read_to_string(self.root.join("c/codes.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["code_id"].as_str().unwrap().to_string())
            .collect()
    }
}

fn files_equal(a: &Path, b: &Path, names: &[&str]) {
    for n in names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn validate_reports_counts() {
    let c = Corpus::new();
    let mut args = vec!["validate".to_string()];
    args.extend(c.corpus_args());
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = ok(&refs);
    assert!(out.starts_with("codes\t32\n"), "{out}");
    assert!(out.contains("unmapped codes\t"), "{out}");
}

#[test]
fn subgraph_lists_center() {
    let c = Corpus::new();
    let id = &c.code_ids()[0];
    let mut args = vec!["subgraph".to_string()];
    args.extend(c.corpus_args());
    args.extend(["--code".into(), id.clone(), "--hops".into(), "0".into()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = ok(&refs);
    let first = out.lines().next().unwrap();
    assert_eq!(first, "nodes\t1");
    assert!(out.contains("\tcenter") || out.contains("<null>"), "{out}");
    assert!(out.contains("edges\t0"));
}

#[test]
fn train_tokenize_export_inspect() {
    let c = Corpus::new();
    let pooled = fs::read(c.path("c/text_pooled.bin")).unwrap();
    let states = fs::read(c.path("c/text_states.bin")).unwrap();
    c.train("a", "6", &[]);
    // frozen text encoder: inputs untouched
    assert_eq!(fs::read(c.path("c/text_pooled.bin")).unwrap(), pooled);
    assert_eq!(fs::read(c.path("c/text_states.bin")).unwrap(), states);

    let art = c.path("a");
    let csv = fs::read_to_string(c.root.join("a/loss_trace.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,L_vq,L_KL,L_token_c,L_token_s,total");
    assert_eq!(csv.lines().count(), 7);
    assert!(c.root.join("a/checkpoints/step-000003/state.bin").exists());

    let ids = c.code_ids();
    let js: Value = serde_json::from_str(&ok(&["tokenize", "--artifact", &art, "--code", &ids[2], "--json"])).unwrap();
    assert_eq!(js["code_id"], ids[2].as_str());
    let keys: Vec<&str> = js["tokens"].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["text_specific", "graph_specific", "text_cross", "graph_cross"]);
    let plain = ok(&["tokenize", "--artifact", &art, "--code", &ids[2]]);
    let flat: Vec<u64> = plain.trim().split('\t').nth(1).unwrap().split(' ').map(|t| t.parse().unwrap()).collect();
    let from_json: Vec<u64> = keys
        .iter()
        .flat_map(|k| js["tokens"][k].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .collect();
    assert_eq!(flat, from_json);
    assert_eq!(flat.len(), 16);

    let list = c.root.join("list.txt");
    fs::write(&list, ids.join("\n")).unwrap();
    let jsonl = c.path("out.jsonl");
    ok(&["tokenize-batch", "--artifact", &art, "--codes-file", list.to_str().unwrap(), "--out", &jsonl]);
    let lines: Vec<Value> = fs::read_to_string(&jsonl)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), ids.len());
    assert_eq!(lines[2], js);

    let emb = c.path("tokens.bin");
    ok(&["export-embeddings", "--artifact", &art, "--out", &emb]);
    let set = medtok::textenc::load_text_embeddings(Path::new(&emb), None).unwrap();
    assert_eq!((set.len(), set.dim()), (32, 8));

    let info = ok(&["inspect", "--artifact", &art]);
    assert!(info.contains("codebook size N\t32"), "{info}");
    assert!(info.contains("region graph_shared\t24..32"), "{info}");
    assert!(info.contains("corpus codes\t32"), "{info}");

    let bad = medtok(&["tokenize", "--artifact", &art, "--code", "ICD9:missing"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown code"));
}

#[test]
fn resumed_training_matches_a_single_run() {
    let c = Corpus::new();
    c.train("full", "6", &[]);
    c.train("part", "3", &[]);
    let ck = c.path("part/checkpoints/step-000003");
    c.train("resumed", "6", &["--resume", &ck]);
    let names = ["codebook.bin", "params.bin", "fused.bin", "loss_trace.csv"];
    files_equal(&c.root.join("full"), &c.root.join("resumed"), &names);
}

#[test]
fn corrupted_artifact_names_the_file() {
    let c = Corpus::new();
    c.train("a", "6", &[]);
    let p = c.root.join("a/params.bin");
    let mut bytes = fs::read(&p).unwrap();
    bytes[20] ^= 0xff;
    fs::write(&p, bytes).unwrap();
    let out = medtok(&["inspect", "--artifact", &c.path("a")]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("params.bin") && err.contains("corrupt"), "{err}");
}

#[test]
fn rejects_bad_arguments() {
    let c = Corpus::new();
    let mut args = vec!["train".to_string()];
    args.extend(c.corpus_args());
    args.extend(
        ["--text-emb", &c.path("c/text_pooled.bin"), "--preset", "huge", "--out", &c.path("x")].map(String::from),
    );
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = medtok(&refs);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));

    let out = medtok(&["inspect", "--artifact", &c.path("nowhere")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));
}
