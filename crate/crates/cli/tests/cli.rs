use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_vmfnet");

const SMALL_CONFIG: &str = r#"
learning_rate = 0.001
iterations = 4
batch_size = 2
labeled_fraction = 0.5
report_every = 2
checkpoint_every = 2

[model]
head_hidden = 4
classes = 3
kernels = 4
sigma = 30.0

[model.encoder]
depth = 2
base_channels = 4
feature_dim = 8
input_size = [32, 32]
in_channels = 1
"#;

fn vmfnet(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .args(["--log-level", "error"])
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// A small dataset plus a briefly trained checkpoint.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let out = vmfnet(&[
        "gen-data", "--out", p(&data), "--domains", "3", "--subjects", "3", "--slices", "2",
        "--height", "32", "--width", "32",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = root.join("small.toml");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let run = root.join("run");
    let out = vmfnet(&["train", "--data", p(&data), "--holdout", "C", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    Fixture {
        ckpt: run.join("final.ckpt"),
        _dir: dir,
        data,
        root,
    }
}

#[test]
fn help_and_usage_errors() {
    let out = vmfnet(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen-data", "train", "eval", "ttt", "ablate", "probe", "viz"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    assert_eq!(code(&vmfnet(&[])), 2);
    assert_eq!(code(&vmfnet(&["train", "--bogus"])), 2);
    assert_eq!(code(&vmfnet(&["eval", "--data", "x"])), 2);
}

#[test]
fn gen_data_is_deterministic_and_writes_a_run_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, seed: &str| {
        let out_dir = dir.path().join(name);
        let out = vmfnet(&[
            "gen-data", "--out", p(&out_dir), "--domains", "2", "--subjects", "2", "--slices", "1",
            "--height", "32", "--width", "32", "--seed", seed,
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let a = gen("a", "5");
    let b = gen("b", "5");
    let c = gen("c", "6");
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a.run.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "gen-data");
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["outputs"].as_array().unwrap().iter().any(|o| o == "manifest.json"));
    assert!(manifest["finished_unix_ms"].as_u64() >= manifest["started_unix_ms"].as_u64());
}

#[test]
fn pipeline_and_error_exit_codes() {
    let f = fixture();
    assert!(f.ckpt.is_file());
    assert!(f.root.join("run/metrics.jsonl").is_file());
    assert!(f.root.join("run.run.json").is_file());

    let eval_dir = f.root.join("eval");
    let out = vmfnet(&["eval", "--data", p(&f.data), "--holdout", "C", "--checkpoint", p(&f.ckpt), "--out", p(&eval_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean"));
    assert_eq!(fs::read_to_string(eval_dir.join("subjects.jsonl")).unwrap().lines().count(), 3);

    let ttt_dir = f.root.join("ttt");
    let out = vmfnet(&[
        "ttt", "--data", p(&f.data), "--holdout", "C", "--checkpoint", p(&f.ckpt), "--out", p(&ttt_dir),
        "--iterations", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(ttt_dir.join("paired.jsonl")).unwrap().lines().count(), 3);

    let viz_dir = f.root.join("viz");
    let out = vmfnet(&[
        "viz", "--checkpoint", p(&f.ckpt), "--data", p(&f.data), "--subject", "C00", "--out", p(&viz_dir),
        "--top-k", "3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(&viz_dir).unwrap().count(), 6);
    let out = vmfnet(&["viz", "--checkpoint", p(&f.ckpt), "--image", p(&viz_dir.join("input.png")), "--out", p(&f.root.join("viz2")), "--top-k", "9"]);
    assert_eq!(code(&out), 3);

    // Unknown holdout names the valid domains.
    let out = vmfnet(&["eval", "--data", p(&f.data), "--holdout", "Z", "--checkpoint", p(&f.ckpt), "--out", p(&eval_dir)]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("A, B, C"), "{err}");

    // Missing checkpoint is an I/O failure.
    let missing = f.root.join("nope.ckpt");
    let out = vmfnet(&["eval", "--data", p(&f.data), "--holdout", "C", "--checkpoint", p(&missing), "--out", p(&eval_dir)]);
    assert_eq!(code(&out), 4);

    // A damaged checkpoint is a data failure.
    let broken = f.root.join("broken.ckpt");
    let mut bytes = fs::read(&f.ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&broken, bytes).unwrap();
    let out = vmfnet(&["eval", "--data", p(&f.data), "--holdout", "C", "--checkpoint", p(&broken), "--out", p(&eval_dir)]);
    assert_eq!(code(&out), 5);

    // A corrupted dataset file is a data failure naming the file.
    let victim = f.data.join("domain_A/subject_A00/slice_0.png");
    fs::write(&victim, b"not a png").unwrap();
    let out = vmfnet(&["eval", "--data", p(&f.data), "--holdout", "C", "--checkpoint", p(&f.ckpt), "--out", p(&eval_dir)]);
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("slice_0.png"));

    // Invalid configuration values.
    let bad = f.root.join("bad.toml");
    fs::write(&bad, "learning_rate = -1.0\n").unwrap();
    let out = vmfnet(&["train", "--data", p(&f.data), "--holdout", "C", "--config", p(&bad), "--out", p(&f.root.join("r2"))]);
    assert_eq!(code(&out), 3);
    let out = vmfnet(&["ttt", "--data", p(&f.data), "--holdout", "C", "--checkpoint", p(&f.ckpt), "--out", p(&ttt_dir), "--lr", "0"]);
    assert_eq!(code(&out), 3);
}
