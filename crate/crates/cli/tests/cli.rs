use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use modelab_core::tensor::checkpoint;

const TINY: [&str; 9] = [
    "pretrain_steps=5",
    "train.steps=5",
    "n_train=30",
    "n_test=4",
    "model.d_model=16",
    "model.n_heads=2",
    "model.n_backbone_layers=2",
    "model.n_blocks=2",
    "model.max_seq_len=10",
];

fn modelab(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modelab")).env("MODELAB_WORKDIR", work).args(args).output().unwrap()
}

fn tiny_args<'a>(cmd: &[&'a str]) -> Vec<&'a str> {
    let mut v = cmd.to_vec();
    for s in TINY {
        v.extend(["--set", s]);
    }
    v
}

fn ok(out: &Output) -> PathBuf {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8_lossy(&out.stdout).trim())
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn backbone(work: &Path) -> String {
    ok(&modelab(work, &tiny_args(&["pretrain-backbone"]))).join("model.ckpt").display().to_string()
}

#[test]
fn help_documents_report_headers_and_exit_codes() {
    let out = Command::new(env!("CARGO_BIN_EXE_modelab")).arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("plan,meshes,expert_layers,merges,latency_s,compute_s,allreduce_s,reshard_s,idle_s"));
    assert!(text.contains("method,setting,math,code,english,average,total_params,trainable_params"));
    assert!(text.contains("4 training divergence"));
}

#[test]
fn configuration_errors_exit_with_2() {
    let work = tempfile::tempdir().unwrap();
    assert_eq!(code(&modelab(work.path(), &["pretrain-backbone", "--config", "/no/such/file.toml"])), 2);
    assert_eq!(code(&modelab(work.path(), &["pretrain-backbone", "--set", "model.bogus=1"])), 2);
    assert_eq!(code(&modelab(work.path(), &["pretrain-backbone", "--set", "model.n_heads=5"])), 2);
    assert_eq!(code(&modelab(work.path(), &["simulate", "--plan", "/no/such/plan.toml"])), 2);

    let bad = work.path().join("bad.toml");
    std::fs::write(
        &bad,
        "kind = \"mpmd\"\nassignment = [[\"backbone\", 0], [{ expert = 0 }, 7], [{ expert = 1 }, 0], [{ expert = 2 }, 0], [{ expert = 3 }, 0]]\n[[meshes]]\nname = \"a\"\ndevices = [0, 1]\n",
    )
    .unwrap();
    let out = modelab(work.path(), &["simulate", "--plan", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown mesh"));
    // Failed runs leave no directories behind.
    assert!(!work.path().join("simulate").exists() || std::fs::read_dir(work.path().join("simulate")).unwrap().next().is_none());
}

#[test]
fn environment_layer_overrides_the_file() {
    let work = tempfile::tempdir().unwrap();
    let file = work.path().join("c.toml");
    std::fs::write(&file, "[cost]\nmerge_overhead = 0.5\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_modelab"))
        .env("MODELAB_WORKDIR", work.path())
        .env("MODELAB__COST__MERGE_OVERHEAD", "0.25")
        .args(["simulate", "--config", file.to_str().unwrap(), "--set", "cost.hop_latency=0.001"])
        .output()
        .unwrap();
    let m = manifest(&ok(&out));
    assert_eq!(m["config"]["cost"]["merge_overhead"], 0.25);
    assert_eq!(m["config"]["cost"]["hop_latency"], 0.001);
    assert_eq!(m["config"]["devices"], 8);
}

#[test]
fn pipeline_artifacts_and_contracts() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let bb_dir = ok(&modelab(w, &tiny_args(&["pretrain-backbone"])));
    let bb = bb_dir.join("model.ckpt").display().to_string();

    // Resolved defaults land in the manifest; reruns hash identically.
    let m = manifest(&bb_dir);
    assert_eq!(m["config"]["lora"]["rank"], 8);
    assert_eq!(m["config"]["model"]["d_model"], 16);
    assert_eq!(m["command"], "pretrain-backbone");
    let again = ok(&modelab(w, &tiny_args(&["pretrain-backbone"])));
    assert_ne!(again, bb_dir);
    assert_eq!(manifest(&again)["artifacts"], m["artifacts"]);

    let math = ok(&modelab(w, &tiny_args(&["train-expert", "--backbone", &bb, "--domain", "math"])));
    let code_dir = ok(&modelab(w, &tiny_args(&["train-expert", "--backbone", &bb, "--domain", "code"])));
    let (em, ec) = (math.join("model.ckpt"), code_dir.join("model.ckpt"));
    let (em, ec) = (em.to_str().unwrap(), ec.to_str().unwrap());

    // No experts: rejected as an artifact problem.
    let out = modelab(w, &tiny_args(&["compose", "--backbone", &bb]));
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));

    // Frozen composition keeps expert bytes.
    let frozen = ok(&modelab(w, &tiny_args(&["compose", "--backbone", &bb, "--expert", em, "--expert", ec, "--variant", "frozen"])));
    let (_, composed) = checkpoint::load::<f32>(&frozen.join("model.ckpt")).unwrap();
    for (k, src) in [em, ec].iter().enumerate() {
        let (_, expert) = checkpoint::load::<f32>(Path::new(src)).unwrap();
        for (name, t) in expert.iter().filter(|(n, _)| n.starts_with("expert0.")) {
            let target = name.replacen("expert0.", &format!("expert{k}."), 1);
            assert_eq!(composed.by_name(&target).unwrap().data(), t.data(), "{target}");
        }
    }
    let report = std::fs::read_to_string(frozen.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next().unwrap(), "method,setting,math,code,english,average,total_params,trainable_params");
    assert!(lines.next().unwrap().starts_with("MoDE 2xFrozen,"));

    // The table needs every method.
    let out = modelab(w, &["table1"]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Full-FT") && err.contains("MoDE 2xExperts") && !err.contains("2xFrozen"), "{err}");

    ok(&modelab(w, &tiny_args(&["compose", "--backbone", &bb, "--expert", em, "--expert", ec])));
    ok(&modelab(w, &tiny_args(&["compose", "--backbone", &bb, "--variant", "uninitialized"])));
    ok(&modelab(w, &tiny_args(&["compose", "--backbone", &bb, "--variant", "uninitialized", "--n-experts", "2"])));
    ok(&modelab(w, &tiny_args(&["finetune", "--backbone", &bb])));
    let lora = ok(&modelab(w, &tiny_args(&["lora", "--backbone", &bb])));
    let table = ok(&modelab(w, &["table1"]));
    let csv = std::fs::read_to_string(table.join("table1.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    // Reference backbone, six methods and two delta rows.
    assert_eq!(rows.len(), 9, "{csv}");
    for m in ["Full-FT", "LoRA", "MoDE 1xUninitialized", "MoDE 2xUninitialized", "MoDE 2xFrozen", "MoDE 2xExperts"] {
        assert!(rows.iter().any(|r| r.starts_with(&format!("{m},"))), "{m}");
    }
    let lora_report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(lora.join("report.json")).unwrap()).unwrap();
    let (_, lora_params) = checkpoint::load::<f32>(&lora.join("model.ckpt")).unwrap();
    assert_eq!(lora_report["total_params"], lora_params.numel());
}

#[test]
fn incompatible_or_corrupt_checkpoints_exit_with_3() {
    let work = tempfile::tempdir().unwrap();
    let bb = backbone(work.path());
    let mut args = tiny_args(&["train-expert", "--backbone", &bb, "--domain", "math"]);
    args.extend(["--set", "model.d_model=8"]);
    assert_eq!(code(&modelab(work.path(), &args)), 3);

    let broken = work.path().join("broken.ckpt");
    let mut bytes = std::fs::read(&bb).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&broken, bytes).unwrap();
    let out = modelab(work.path(), &tiny_args(&["finetune", "--backbone", broken.to_str().unwrap()]));
    assert_eq!(code(&out), 3);
}

#[test]
fn divergence_exits_with_4() {
    let work = tempfile::tempdir().unwrap();
    let bb = backbone(work.path());
    let mut args = tiny_args(&["finetune", "--backbone", &bb]);
    args.extend(["--set", "train.lr=1e30", "--set", "train.steps=20"]);
    let out = modelab(work.path(), &args);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!work.path().join("finetune").exists() || std::fs::read_dir(work.path().join("finetune")).unwrap().next().is_none());
}

#[test]
fn simulate_reports() {
    let work = tempfile::tempdir().unwrap();
    let dir = ok(&modelab(work.path(), &["simulate", "--sweep", "merges"]));
    let csv = std::fs::read_to_string(dir.join("simulate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);

    let dir = ok(&modelab(work.path(), &["simulate", "--plan", "spmd", "--plan", "mpmd"]));
    let cmp = std::fs::read_to_string(dir.join("comparison.csv")).unwrap();
    let mut lines = cmp.lines();
    assert_eq!(lines.next().unwrap(), "plan,latency_s,spmd_latency_s,speedup");
    let f: Vec<&str> = lines.next().unwrap().split(',').collect();
    let (lat, spmd, speedup): (f64, f64, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap());
    assert_eq!(f[0], "mpmd3");
    assert_eq!(speedup, spmd / lat);
    assert!(speedup > 1.2);
}

#[test]
fn data_dump_writes_tokens() {
    let work = tempfile::tempdir().unwrap();
    let out = modelab(work.path(), &["data", "dump", "--domain", "math", "--n", "3", "--stdout"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("# domain=math"));
    assert_eq!(text.lines().count(), 4);
    assert_eq!(code(&modelab(work.path(), &["data", "dump", "--domain", "nonsense"])), 2);
}
