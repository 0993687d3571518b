//! End-to-end binary checks: determinism of artifacts, exit codes and the
//! machine-parsable error line.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn deskvla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deskvla"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn repo_config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .display()
        .to_string()
}

#[test]
fn gen_data_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = deskvla(&[
            "gen-data",
            "--config",
            &repo_config("recipes/tiny.toml"),
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            "7",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn train_stage2_without_init_names_the_missing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = deskvla(&[
        "gen-data",
        "--config",
        &repo_config("recipes/tiny.toml"),
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(out.status.success());
    let run = deskvla(&[
        "train",
        "--stage",
        "2",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_eq!(run.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(
        stderr.contains("stage-1 checkpoint"),
        "stderr was: {stderr}"
    );
    assert!(stderr.lines().count() == 1, "single line expected: {stderr}");
    assert!(stderr.contains("error[E_DOMAIN]"), "{stderr}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let recipe = tmp.path().join("bad.toml");
    fs::write(&recipe, "name = \"x\"\nbogus_key = 3\ngroups = []\n").unwrap();
    let out = deskvla(&[
        "gen-data",
        "--config",
        recipe.to_str().unwrap(),
        "--out",
        tmp.path().join("d").to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn train_eval_inspect_plot_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(deskvla(&[
        "gen-data",
        "--config",
        &repo_config("recipes/tiny.toml"),
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "5",
    ])
    .status
    .success());

    let run_dir = tmp.path().join("s1");
    let train = deskvla(&[
        "train",
        "--stage",
        "1",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--seed",
        "2",
        "--set",
        "max_steps=3",
        "--set",
        "batch=2",
    ]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(run_dir.join("final/manifest.json").exists());
    assert!(run_dir.join("metrics.jsonl").exists());
    assert!(run_dir.join("resolved.toml").exists());
    assert!(run_dir.join("run.json").exists());
    let meta: serde_json::Value =
        serde_json::from_slice(&fs::read(run_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 2);
    assert!(meta["git_describe"].is_string());
    assert_eq!(meta["format_versions"]["checkpoint"], 1);

    let inspect = deskvla(&["inspect", run_dir.join("final").to_str().unwrap()]);
    assert!(inspect.status.success());
    let text = String::from_utf8_lossy(&inspect.stdout);
    assert!(text.contains("expert") && text.contains("total"), "{text}");

    let eval_dir = tmp.path().join("eval");
    let eval = deskvla(&[
        "eval",
        "--checkpoint",
        run_dir.join("final").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--tasks",
        "pick-place:arm3",
        "--trials",
        "2",
        "--seed",
        "4",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let csv = eval_dir.join("scores.csv");
    assert!(csv.exists());

    let png = tmp.path().join("scores.png");
    let plot = deskvla(&[
        "plot",
        "--csv",
        csv.to_str().unwrap(),
        "--out",
        png.to_str().unwrap(),
    ]);
    assert!(plot.status.success(), "{}", String::from_utf8_lossy(&plot.stderr));
    let bytes = fs::read(&png).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
}

#[test]
fn ablate_micro_emits_comparison_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("ablate");
    let out = deskvla(&[
        "ablate",
        "throughput",
        "--budget",
        "micro",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("throughput.csv")).unwrap();
    assert!(csv.contains("stage1-expert-only"));
    assert!(csv.contains("stage2-full-model"));
}

#[test]
fn inspect_total_matches_analytic_count() {
    use deskvla_autodiff::save_checkpoint;
    use deskvla_model::expert::ExpertConfig;
    use deskvla_train::model::ModelSpec;

    let tmp = tempfile::tempdir().unwrap();
    let spec = ModelSpec::new(ExpertConfig::small());
    let params = spec.init_stage1(1).unwrap();
    let expected: usize = {
        let refs: Vec<&deskvla_model::embodiment::EmbodimentSpec> =
            spec.embodiments.iter().collect();
        spec.expert.param_count(&refs) + spec.stage1.param_count(spec.vocab.len())
    };
    assert_eq!(params.entry_count(), expected);
    let ckpt = tmp.path().join("ckpt");
    save_checkpoint(&params, &ckpt).unwrap();
    let out = deskvla(&["inspect", ckpt.to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    let total_line = text.lines().find(|l| l.starts_with("total")).unwrap();
    let total: usize = total_line
        .split_whitespace()
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(total, expected);
}
