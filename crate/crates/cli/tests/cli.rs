use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seeds = [0, 1]
methods = ["compiler", "baseline"]

[data.synthetic]
n_states = 3
n_objects = 3
n_compositions = 6
samples_per_composition = 8
image_side = 16

[split]
top_k = 6
n_tasks = 2

[backbone]
image_side = 16
patch_side = 8
embed_dim = 16
n_layers = 1
n_heads = 2
prompt_capacity = 6

[model]
pool_size = 4
prompt_len = 2
top_k = 2

[train]
epochs = 1
batch_size = 8
"#;

fn compil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compil"))
        .args(args)
        .current_dir(dir)
        .env("COMPIL_OUTPUT_ROOT", dir.join("root"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();

    let out = ok(&compil(dir, &["generate-data", "-c", "tiny.toml", "--out", "data"]));
    assert!(out.contains("48 samples"), "{out}");
    assert!(dir.join("data/metadata.csv").exists());
    assert!(dir.join("data/pixels/manifest.csv").exists());

    let out = ok(&compil(dir, &["split", "-c", "tiny.toml", "--seed", "3", "--out", "tasks.json"]));
    assert!(out.contains("6 compositions, 3 states, 3 objects, 2 tasks"), "{out}");
    assert!(dir.join("tasks.json").exists());

    // train from the pixel store written above; output under COMPIL_OUTPUT_ROOT
    let out = ok(&compil(
        dir,
        &["train", "-c", "tiny.toml", "--set", "data.metadata=\"data/metadata.csv\""],
    ));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "variant,seeds,avg_acc,ftt,state,object,hm");
    assert!(lines[1].starts_with("compiler,0 1,") && lines[2].starts_with("baseline,0 1,"), "{out}");
    let run = dir.join("root/tiny");
    for f in ["aggregate.csv", "aggregate.json", "config.toml", "compiler/matrices_seed1.csv", "baseline/log_seed0.jsonl"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let saved = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(saved.contains("data/metadata.csv"), "override not echoed into saved config");

    let out = ok(&compil(dir, &["report", run.to_str().unwrap()]));
    assert_eq!(out, std::fs::read_to_string(run.join("aggregate.csv")).unwrap());

    let ckpt = run.join("compiler/checkpoint_seed1.ckpt");
    let common = ["-c", "tiny.toml", "--set", "data.metadata=\"data/metadata.csv\""];
    let mut args = vec!["evaluate"];
    args.extend(common);
    args.extend(["--checkpoint", ckpt.to_str().unwrap(), "--seed", "1"]);
    let out = ok(&compil(dir, &args));
    assert_eq!(out.lines().count(), 3, "{out}");

    let mut args = vec!["export-features"];
    args.extend(common);
    args.extend(["--checkpoint", ckpt.to_str().unwrap(), "--seed", "1", "--out", "f.csv"]);
    ok(&compil(dir, &args));
    let csv = std::fs::read_to_string(dir.join("f.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 5 + 2 * 16);
}

#[test]
fn ablation_rows_per_valid_combination() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = TINY.replace("methods = [\"compiler\", \"baseline\"]", "methods = []")
        + "\n[ablation]\npools = [\"c\", \"cso\"]\ninjection = [\"none\", \"object-to-state\"]\n";
    std::fs::write(dir.join("a.toml"), cfg).unwrap();
    let out = ok(&compil(dir, &["ablate", "-c", "a.toml", "--seeds", "0", "-o", "abl"]));
    // C with injection is not a valid learner and is skipped
    assert_eq!(out.lines().count(), 4, "{out}");
}

#[test]
fn bad_input_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.toml"), "[model]\ntop_k = 99\n").unwrap();
    let out = compil(dir, &["train", "-c", "bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model"));
    let out = compil(dir, &["report", "missing-dir"]);
    assert!(!out.status.success());
    let out = compil(dir, &["train", "--set", "train.lr=-1"]);
    assert!(!out.status.success());
}
