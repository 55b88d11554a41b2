use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn farskip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_farskip")).args(args).output().expect("binary runs")
}

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

const TINY: &str = r#"
seed = 5

[io]
out_dir = "OUT"
synthetic_bytes = 16384
checkpoint = "CKPT"

[model]
n_layers = 2
d_model = 16
n_heads = 2
head_dim = 8
n_experts = 4
top_k = 2
expert_hidden = 16
shared_expert_hidden = 16
vocab = 256
max_seq_len = 16
seed = 1

[pretrain]
modes = ["regular", "hybrid"]

[convert]
mask = { last_n = 1 }
target = "hybrid"

[train]
total_tokens = 1280
batch_tokens = 64
seq_len = 16
peak_lr = 3e-3
min_lr = 3e-4
warmup_steps = 2
loss = { kind = "sft" }
eval_every = 5
patience = 4
seed = 9
eval = { metric = "inverse_perplexity", max_windows = 4, n_prompts = 2, continuation = 4 }

[eval]
seq_len = 16
sensitivity = true
proxy = { metric = "inverse_perplexity", max_windows = 4, n_prompts = 2, continuation = 4 }

[generate]
prompt = "ab"
n_new = 5

[sweep]
axis = "lr"
candidates = [1e-3, 3e-3]
short_steps = 4
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn help_exits_zero() {
    let out = farskip(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["pretrain", "distill", "convert", "eval", "generate", "simulate", "sweep"] {
        assert!(text.contains(cmd), "help lists {cmd}");
    }
}

#[test]
fn missing_config_exits_two() {
    let out = farskip(&["pretrain", "--config", "/nonexistent/farskip.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "bad.toml", "seed = 1\n[io]\nout_dir = \"x\"\nbogus = 3\n");
    let out = farskip(&["pretrain", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let no_model = write_config(tmp.path(), "nomodel.toml", "seed = 1\n[io]\nout_dir = \"x\"\n");
    let out = farskip(&["pretrain", "--config", no_model.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_golden_matches_frozen_report() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = manifest().join("../sim/scenarios/golden_l2.json");
    let out = farskip(&["simulate", "--scenario", scenario.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let frozen = read_json(&manifest().join("../sim/tests/golden/golden_l2_report.json"));
    assert_eq!(read_json(&tmp.path().join("report.json")), frozen);
    for f in ["report.txt", "trace.json", "baseline_trace.json", "run.json", "config.resolved.json", "scenario.json"] {
        assert!(tmp.path().join(f).exists(), "{f} written");
    }
    let trace = std::fs::read_to_string(tmp.path().join("trace.json")).unwrap();
    farskip_sim::trace::parse_trace(&trace).unwrap();
}

#[test]
fn simulate_via_config_and_out_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = manifest().join("configs/simulate_golden.toml");
    let out = farskip(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("35"));
    assert!(tmp.path().join("config.toml").exists());
    assert_eq!(read_json(&tmp.path().join("report.json"))["report"]["end_to_end"], 35.0);
}

#[test]
fn example_configs_parse() {
    for entry in std::fs::read_dir(manifest().join("configs")).unwrap() {
        let p = entry.unwrap().path();
        farskip::config::ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn tiny_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let body = TINY.replace("OUT", "runs/pre").replace("CKPT", "runs/pre/regular/best.fskp");
    let cfg = write_config(root, "tiny.toml", &body);
    let cfg = cfg.to_str().unwrap();
    let ok = |args: &[&str]| {
        let out = farskip(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };

    ok(&["pretrain", "--config", cfg]);
    let summary = read_json(&root.join("runs/pre/summary.json"));
    assert!(summary["runs"]["hybrid"]["final_window_loss"].as_f64().unwrap().is_finite());
    assert!(summary["relative_final_loss_gap"].as_f64().is_some());
    for f in ["regular/best.fskp", "regular/last.fskp", "hybrid/metrics.jsonl", "config.toml", "run.json"] {
        assert!(root.join("runs/pre").join(f).exists(), "{f}");
    }

    let conv = root.join("conv");
    ok(&["convert", "--config", cfg, "--out", conv.to_str().unwrap()]);
    assert_eq!(read_json(&conv.join("summary.json"))["modes"], serde_json::json!(["regular", "hybrid"]));

    let dist_body = body.replace("kind = \"sft\"", "kind = \"kl\"");
    let dist_cfg = write_config(root, "dist.toml", &dist_body);
    let dist = root.join("dist");
    ok(&["distill", "--config", dist_cfg.to_str().unwrap(), "--out", dist.to_str().unwrap()]);
    assert!(read_json(&dist.join("summary.json"))["loss_ratio"].as_f64().unwrap() > 0.0);

    let student = dist.join("best.fskp");
    let ev = root.join("eval");
    ok(&["eval", "--config", cfg, "--checkpoint", student.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    let report = read_json(&ev.join("eval.json"));
    assert_eq!(report["sensitivity"].as_array().unwrap().len(), 3);

    let gen = root.join("gen");
    let out = ok(&["generate", "--config", cfg, "--checkpoint", student.to_str().unwrap(), "--out", gen.to_str().unwrap()]);
    let g = read_json(&gen.join("generation.json"));
    assert_eq!(g["tokens"].as_array().unwrap().len(), 7);
    let again = ok(&["generate", "--config", cfg, "--checkpoint", student.to_str().unwrap(), "--out", gen.to_str().unwrap()]);
    assert_eq!(out.stdout, again.stdout);

    let sw = root.join("sweep");
    ok(&["sweep", "--config", cfg, "--out", sw.to_str().unwrap()]);
    assert!(read_json(&sw.join("sweep.json")).is_object());
}

#[test]
fn scenario_without_out_is_a_usage_error() {
    let scenario = manifest().join("../sim/scenarios/golden_l2.json");
    let out = farskip(&["simulate", "--scenario", scenario.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
