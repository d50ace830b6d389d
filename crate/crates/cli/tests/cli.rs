//! End-to-end runs of the `fedinstruct` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use base64::Engine as _;
use serde_json::{json, Value};
use tiny_http::{Response, Server};

use fedinstruct_cli::toy::{write_toy, ToyLayout, ToySpec};
use fedinstruct_core::checkpoint::{decode, encode, CheckpointMeta};
use fedinstruct_core::corpus_io::{save_dataset, save_references, save_responses, GeneratedDataset, Reference, Response as EvalResponse};
use fedinstruct_core::tensor::Tensor;
use fedinstruct_core::{InstructionPair, ParameterSet};

const B64: base64::engine::GeneralPurpose = base64::engine::general_purpose::STANDARD;

fn fedinstruct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedinstruct"))
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("TRAINER_URL")
        .env_remove("EMBED_URL")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy(dir: &Path) -> ToyLayout {
    write_toy(&dir.join("toy"), &ToySpec::default()).unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn generate(layout: &ToyLayout, out: &Path) -> Output {
    let mut args = vec!["generate", "--mock", "--seed", "7", "--policy", "retrieval", "--k", "3"];
    for c in &layout.corpora {
        args.extend(["--corpus", s(c)]);
    }
    args.extend(["--pool", s(&layout.pool), "--out", s(out)]);
    fedinstruct(&args)
}

#[test]
fn mock_generate_accounts_for_every_document() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = toy(tmp.path());
    let out = tmp.path().join("gen");
    let o = generate(&layout, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..5 {
        assert!(out.join(format!("client_{i}.jsonl")).is_file());
    }
    let m = manifest(&out);
    let clients = m["clients"].as_object().unwrap();
    assert_eq!(clients.len(), 5);
    for stats in clients.values() {
        assert_eq!(stats["generated"], 20);
    }
    assert_eq!(m["config"]["federation"]["policy"], "retrieval");
    assert_eq!(m["config"]["federation"]["k"], 3);
    assert_eq!(m["inputs"].as_object().unwrap().len(), 6);
}

#[test]
fn rerun_writes_identical_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = toy(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(generate(&layout, &a).status.success());
    assert!(generate(&layout, &b).status.success());
    for i in 0..5 {
        let name = format!("client_{i}.jsonl");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn filter_carries_generation_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = toy(tmp.path());
    let gen = tmp.path().join("gen");
    assert!(generate(&layout, &gen).status.success());
    let filtered = tmp.path().join("filtered");
    let mut args = vec!["filter", "--mock", "--out", s(&filtered)];
    let datasets: Vec<PathBuf> = (0..5).map(|i| gen.join(format!("client_{i}.jsonl"))).collect();
    for d in &datasets {
        args.extend(["--dataset", s(d)]);
    }
    for c in &layout.corpora {
        args.extend(["--corpus", s(c)]);
    }
    let o = fedinstruct(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&filtered);
    let t = &m["totals"];
    assert_eq!(t["generated"], 100);
    let sum = t["rule_rejected"].as_u64().unwrap() + t["reward_dropped"].as_u64().unwrap() + t["kept"].as_u64().unwrap();
    assert_eq!(sum, 100);
    assert!(t["reward_dropped"].as_u64().unwrap() > 0);
}

#[test]
fn mock_filter_without_corpus_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("c.jsonl");
    save_dataset(
        &GeneratedDataset {
            client_id: "c".into(),
            pairs: vec![InstructionPair::new("q?", "a.", "d1")],
        },
        &d,
    )
    .unwrap();
    let o = fedinstruct(&["filter", "--mock", "--dataset", s(&d), "--out", s(tmp.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error[Config]"), "{}", stderr(&o));
}

fn two_datasets(dir: &Path) -> Vec<PathBuf> {
    ["a", "b"]
        .iter()
        .map(|id| {
            let path = dir.join(format!("{id}.jsonl"));
            save_dataset(
                &GeneratedDataset {
                    client_id: id.to_string(),
                    pairs: vec![InstructionPair::new("What is it?", "It is.", "d1")],
                },
                &path,
            )
            .unwrap();
            path
        })
        .collect()
}

/// A trainer that echoes parameters back, except that client `b` renames
/// every tensor.
fn renaming_trainer() -> String {
    let server = Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    std::thread::spawn(move || {
        for mut req in server.incoming_requests() {
            if req.url().ends_with("/health") {
                let _ = req.respond(Response::from_string("{}"));
                continue;
            }
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            let body: Value = serde_json::from_str(&body).unwrap();
            let (ps, _) = decode(&B64.decode(body["params_ftp1_b64"].as_str().unwrap()).unwrap()).unwrap();
            let out = if body["client_id"] == "b" {
                let mut renamed = ParameterSet::new();
                for (name, t) in ps.iter() {
                    renamed
                        .insert(format!("{name}_renamed"), Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap())
                        .unwrap();
                }
                renamed
            } else {
                ps
            };
            let reply = json!({
                "params_ftp1_b64": B64.encode(encode(&out, &CheckpointMeta::default())),
                "num_examples": body["dataset"].as_array().unwrap().len(),
                "train_loss": 0.5,
            });
            let _ = req.respond(Response::from_string(reply.to_string()));
        }
    });
    url
}

#[test]
fn federate_rejects_renamed_tensors() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = two_datasets(tmp.path());
    let url = renaming_trainer();
    let out = tmp.path().join("fed");
    let o = fedinstruct(&[
        "federate",
        "--dataset",
        s(&ds[0]),
        "--dataset",
        s(&ds[1]),
        "--init-zeros",
        "lora_a=2x3",
        "--trainer-url",
        &url,
        "--rounds",
        "2",
        "--clients-per-round",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("NameSetMismatch"), "{}", stderr(&o));
    // the failed round is still on record
    let records = std::fs::read_to_string(out.join("rounds.jsonl")).unwrap();
    assert!(records.contains("\"error\""));
}

#[test]
fn federate_with_simulated_trainer_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = two_datasets(tmp.path());
    let out = tmp.path().join("fed");
    let o = fedinstruct(&[
        "federate",
        "--dataset",
        s(&ds[0]),
        "--dataset",
        s(&ds[1]),
        "--init-zeros",
        "w=3x2",
        "--sim-trainer",
        "quadratic:rows=4",
        "--rounds",
        "4",
        "--checkpoint-interval",
        "2",
        "--learning-rate",
        "0.1",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["round_00002.ftp1", "round_00004.ftp1", "final.ftp1", "rounds.jsonl"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let m = manifest(&out);
    assert_eq!(m["federation"]["rounds_completed"], 4);
    assert_eq!(m["config"]["backends"]["trainer"], "simulated:quadratic:rows=4");
}

#[test]
fn evaluate_disjoint_ids_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let refs = tmp.path().join("refs.jsonl");
    let resp = tmp.path().join("resp.jsonl");
    save_references(
        &[Reference {
            id: "x".into(),
            instruction: "Say hi.".into(),
            reference: "hi there".into(),
        }],
        &refs,
    )
    .unwrap();
    save_responses(
        &[EvalResponse {
            id: "y".into(),
            response: "hi there".into(),
        }],
        &resp,
    )
    .unwrap();
    let o = fedinstruct(&[
        "evaluate",
        "--mock",
        "--responses",
        s(&resp),
        "--references",
        s(&refs),
        "--out",
        s(tmp.path()),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("IdMismatch"), "{}", stderr(&o));
}

#[test]
fn evaluate_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = toy(tmp.path());
    let out = tmp.path().join("eval");
    let o = fedinstruct(&[
        "evaluate",
        "--mock",
        "--responses",
        s(&layout.responses),
        "--references",
        s(&layout.references),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    assert!(csv.starts_with("id,rouge_l,bert_f1\n"));
    let m = manifest(&out);
    assert_eq!(m["evaluation"]["count"], 50);
}

#[test]
fn export_embeddings_tags_sources() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = two_datasets(tmp.path());
    let out = tmp.path().join("emb");
    let o = fedinstruct(&[
        "export-embeddings",
        "--mock",
        "--generated",
        s(&ds[0]),
        "--human",
        s(&ds[1]),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("embeddings.jsonl")).unwrap();
    let rows: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["source"], "generated");
    assert_eq!(rows[1]["source"], "human");
    assert_eq!(rows[0]["embedding"].as_array().unwrap().len(), 64);
}

#[test]
fn missing_backend_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = toy(tmp.path());
    let o = fedinstruct(&[
        "generate",
        "--corpus",
        s(&layout.corpora[0]),
        "--pool",
        s(&layout.pool),
        "--out",
        s(tmp.path()),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[Config]"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_are_rejected() {
    let o = fedinstruct(&["generate", "--mock", "--no-such-flag"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--no-such-flag"));
    let o = fedinstruct(&["pipeline", "--rounds", "ten"]);
    assert!(!o.status.success());
}

#[test]
fn help_lists_every_flag() {
    let common = [
        "--config",
        "--seed",
        "--mock",
        "--policy",
        "--k",
        "--rounds",
        "--num-clients",
        "--clients-per-round",
        "--learning-rate",
        "--batch-size",
        "--local-steps",
        "--parallelism",
        "--checkpoint-interval",
        "--out",
        "--model",
        "--temperature",
        "--max-tokens",
        "--generation-url",
        "--reward-url",
        "--trainer-url",
        "--embed-url",
    ];
    let specific: [(&str, &[&str]); 6] = [
        ("generate", &["--corpus", "--pool"]),
        ("filter", &["--dataset", "--corpus"]),
        ("federate", &["--dataset", "--init", "--init-zeros", "--sim-trainer"]),
        ("evaluate", &["--responses", "--references", "--bert-baseline"]),
        ("pipeline", &["--sim-trainer"]),
        ("export-embeddings", &["--generated", "--human"]),
    ];
    for (cmd, extra) in specific {
        let o = fedinstruct(&[cmd, "--help"]);
        assert!(o.status.success());
        let help = String::from_utf8(o.stdout).unwrap();
        for flag in common.iter().chain(extra.iter()) {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
    let o = fedinstruct(&["make-toy", "--help"]);
    let help = String::from_utf8(o.stdout).unwrap();
    for flag in ["--out", "--clients", "--docs", "--pool-size", "--eval-size", "--seed"] {
        assert!(help.contains(flag), "make-toy --help lacks {flag}");
    }
}
