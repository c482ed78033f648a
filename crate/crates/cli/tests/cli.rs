use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use latentbrdf::checkpoint::Checkpoint;
use latentbrdf::merl_io::{read_merl, write_merl};
use latentbrdf::synthetic::merl_family;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentbrdf"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "latentbrdf {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn path(&self, name: &str) -> String {
        self.root.join(name).to_string_lossy().into_owned()
    }
}

/// Trains a one-epoch model on ten analytic materials once for all tests.
fn trained() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let ws = Workspace { _dir: dir, root };
        let config = format!(
            "synthetic = 10\ncheckpoint = {:?}\nrecord = {:?}\n\n[train]\nepochs = 1\nbatch_size = 4\nseed = 3\n",
            ws.path("model.bvae"),
            ws.path("train.csv")
        );
        std::fs::write(ws.root.join("train.toml"), config).unwrap();
        run(&["train", "--config", &ws.path("train.toml")]);
        std::fs::create_dir(ws.root.join("merl")).unwrap();
        for b in merl_family(2, 7) {
            write_merl(&b, ws.root.join("merl").join(format!("{}.binary", b.name))).unwrap();
        }
        ws
    })
}

fn png_header(path: &Path) -> bool {
    std::fs::read(path).unwrap()[1..4] == *b"PNG"
}

#[test]
fn train_writes_checkpoint_and_record() {
    let ws = trained();
    let ck = Checkpoint::load(ws.root.join("model.bvae")).unwrap();
    assert_eq!(ck.latent_table.len(), 10);
    assert!(ck.latent_table.contains_key("synthetic-000"));
    let csv = std::fs::read_to_string(ws.root.join("train.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,recon,kl,total");
    assert_eq!(lines.len(), 2);
}

#[test]
fn encode_decode_and_render() {
    let ws = trained();
    let out = run(&[
        "encode",
        "--checkpoint",
        &ws.path("model.bvae"),
        &ws.path("merl/synthetic-000.binary"),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["mu"].as_array().unwrap().len(), 8);
    assert_eq!(v["material"], "synthetic-000");

    run(&[
        "decode",
        "--checkpoint",
        &ws.path("model.bvae"),
        "--material",
        "synthetic-001",
        "--out",
        &ws.path("decoded.binary"),
    ]);
    let decoded = read_merl(ws.root.join("decoded.binary")).unwrap();
    assert!(decoded.samples.iter().all(|v| v.is_finite() && *v >= 0.0));

    run(&[
        "render",
        "--input",
        &ws.path("decoded.binary"),
        "--size",
        "32",
        "--light",
        "0,1,1",
        "--out",
        &ws.path("decoded.png"),
        "--raw",
        &ws.path("decoded.f32"),
    ]);
    assert!(png_header(&ws.root.join("decoded.png")));
    let raw = std::fs::read(ws.root.join("decoded.f32")).unwrap();
    assert_eq!(raw.len(), 8 + 32 * 32 * 3 * 4);
}

#[test]
fn wrong_code_length_fails() {
    let ws = trained();
    let out = bin()
        .args(["decode", "--checkpoint", &ws.path("model.bvae"), "--code", "1,2,3,4,5,6,7", "--out", &ws.path("x.binary")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('8') && err.contains("10"), "{err}");
}

#[test]
fn traverse_and_augment() {
    let ws = trained();
    run(&[
        "traverse",
        "--checkpoint",
        &ws.path("model.bvae"),
        "--material",
        "synthetic-002",
        "--dims",
        "1,8",
        "--steps",
        "3",
        "--range=-2,2",
        "--size",
        "16",
        "--out",
        &ws.path("sheet.png"),
    ]);
    assert!(png_header(&ws.root.join("sheet.png")));

    let out = run(&[
        "augment",
        "--checkpoint",
        &ws.path("model.bvae"),
        "--code=0.5,0,0,0,0,0,0,-0.5",
        "--v9=-1.5",
        "--out",
        &ws.path("aug.json"),
        "--render",
        &ws.path("aug.png"),
        "--size",
        "16",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.root.join("aug.json")).unwrap()).unwrap();
    assert_eq!(v["version"], 1);
    let code: Vec<f64> = serde_json::from_value(v["code"].clone()).unwrap();
    assert_eq!(code, vec![0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.5, -1.5, -0.5]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"version\":1"));
    assert!(png_header(&ws.root.join("aug.png")));
}

#[test]
fn embed_and_metrics() {
    let ws = trained();
    run(&[
        "embed",
        "--checkpoint",
        &ws.path("model.bvae"),
        "--out",
        &ws.path("manifold.json"),
        "--grid",
        &ws.path("grid.png"),
        "--size",
        "16",
    ]);
    let m = latentbrdf::latent_tools::ManifoldModel::load(ws.root.join("manifold.json")).unwrap();
    assert_eq!(m.names.len(), 10);
    assert!(png_header(&ws.root.join("grid.png")));

    let out = run(&["metrics", "--checkpoint", &ws.path("model.bvae"), &ws.path("merl")]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "material,RelAE_ratio,RelAE_pointwise,entries");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("synthetic-000,"));
}

#[test]
fn ingest_writes_sidecars() {
    let ws = trained();
    let out_dir = ws.root.join("ingested");
    run(&["ingest", &ws.path("merl"), "--out", &out_dir.to_string_lossy()]);
    let (input, _) = latentbrdf::preprocess::load_network_input(out_dir.join("synthetic-001.json")).unwrap();
    assert_eq!(input.name, "synthetic-001");
    assert!(out_dir.join("synthetic-001.f32").exists());
}

#[test]
fn help_lists_subcommands() {
    let out = run(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["ingest", "train", "encode", "decode", "traverse", "augment", "embed", "metrics", "render", "serve"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}
