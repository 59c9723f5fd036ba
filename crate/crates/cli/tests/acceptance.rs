//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use modelab_core::data::Domain;
use modelab_core::model::{attach_lora, FreezePolicy, LoraConfig, ModeConfig, ModeModel, ParamGroup};
use modelab_core::sim::{self, presets, Branch, CostModel, PlanKind, ShardingPlan};
use modelab_core::tensor::checkpoint::{encode, Header, RngState};
use modelab_core::tensor::gradcheck::check_gradients;
use modelab_core::train::{compose, Lab, LabConfig, StageOne, Table1, Variant};
use modelab_core::{DType, ParamStore, Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// Noise band for accuracy directions, in accuracy units.
const BAND: f64 = 0.005;
const SEEDS: [u64; 3] = [1, 2, 3];

fn jitter(model: &mut ModeModel<f64>, seed: u64, scale: f64, pred: impl Fn(&str) -> bool) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.params.iter_mut() {
        if pred(name) {
            for v in t.data_mut() {
                *v += scale * rng.random_range(-1.0..1.0);
            }
        }
    }
}

fn tiny(n_experts: usize) -> ModeConfig {
    ModeConfig {
        d_model: 8,
        n_heads: 2,
        n_backbone_layers: 2,
        n_blocks: 2,
        expert_layers_per_block: 1,
        n_experts,
        max_seq_len: 4,
        seed: 11,
        precision: DType::F64,
        ..Default::default()
    }
}

fn gradient_correctness() -> Outcome {
    let mut m = ModeModel::<f64>::new(tiny(1)).unwrap();
    jitter(&mut m, 1, 0.1, |_| true);
    m.apply_policy(&FreezePolicy::all());
    let shell = ModeModel::<f64> { config: m.config.clone(), lora: None, params: ParamStore::new() };
    let tokens = [3, 17, 42, 5, 9, 101, 64, 2];
    let targets = [17, 42, 5, 77, 101, 64, 2, 8];
    let report = check_gradients(&mut m.params, 1e-5, usize::MAX, |t| {
        let logits = shell.forward(t, &tokens, 4)?;
        t.cross_entropy(logits, &targets)
    })
    .unwrap();
    outcome(
        report.max_rel_error < 1e-4 && report.checked == m.numel(),
        format!("{} entries, max relative error {:.2e}", report.checked, report.max_rel_error),
    )
}

fn structural_suite() -> Outcome {
    let tokens: Vec<usize> = (0..12).map(|i| (i * 37 + 5) % 128).collect();
    // (a) no experts: bit-equal to the bare backbone.
    let bare = ModeModel::<f64>::new(tiny(0)).unwrap();
    let a = {
        let mut tape = Tape::new(&bare.params);
        let l = bare.backbone_forward(&mut tape, &tokens, 4).unwrap();
        tape.value(l)
    };
    let equal = bare.logits(&tokens, 4).unwrap().bitwise_eq(&a);

    // (b) gate rows are distributions.
    let mut m = ModeModel::<f64>::new(tiny(3)).unwrap();
    jitter(&mut m, 2, 2.0, |n| n.starts_with("gate."));
    let mut worst_row = 0.0f64;
    {
        let mut tape = Tape::new(&m.params);
        let x = tape.constant(Tensor::new(vec![12, 8], (0..96).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect()).unwrap());
        for block in 0..2 {
            let g = m.gate_forward(&mut tape, block, x).unwrap();
            for row in tape.data(g).chunks(4) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    // (c) permuting experts changes nothing.
    let mut p = ModeModel::<f32>::new(ModeConfig { precision: DType::F32, ..tiny(3) }).unwrap();
    for (name, t) in p.params.iter_mut() {
        if name.starts_with("gate.") {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = ((i * 13) % 7) as f32 * 0.1 - 0.3;
            }
        }
    }
    let before = p.logits(&tokens, 4).unwrap();
    p.permute_experts(&[2, 0, 1]).unwrap();
    let invariant = before.bitwise_eq(&p.logits(&tokens, 4).unwrap());

    // (d) a saturated gate reproduces the selected branch.
    let mut forced_err = 0.0f64;
    for target in 0..4 {
        let mut f = ModeModel::<f64>::new(tiny(3)).unwrap();
        f.params.by_name_mut("gate.block0.bias").unwrap().data_mut()[target] = 40.0;
        let mut tape = Tape::new(&f.params);
        let x = tape.constant(Tensor::new(vec![4, 8], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let y = f.block_forward(&mut tape, 0, x, 4).unwrap();
        let branch = if target == 0 {
            f.backbone_branch(&mut tape, 0, x, 4).unwrap()
        } else {
            f.expert_branch(&mut tape, target - 1, 0, x, 4).unwrap()
        };
        forced_err = forced_err.max(tape.value(y).max_abs_diff(&tape.value(branch)));
    }
    outcome(
        equal && worst_row <= 1e-6 && invariant && forced_err < 1e-4,
        format!("backbone bit-equal {equal}, gate row error {worst_row:.1e}, permutation exact {invariant}, forced gate error {forced_err:.1e}"),
    )
}

fn backbone_bytes(model: &ModeModel<f32>) -> Vec<u8> {
    let mut store = ParamStore::new();
    for (name, t) in model.params.iter().filter(|(n, _)| ParamGroup::of(n) == ParamGroup::Backbone) {
        store.insert(name, t.clone());
    }
    encode(&Header::new("{}", RngState::default()), &store)
}

fn expert_bytes(model: &ModeModel<f32>, from: usize, to: usize) -> Vec<u8> {
    let mut store = ParamStore::new();
    for (name, t) in model.params.iter().filter(|(n, _)| n.starts_with(&format!("expert{from}."))) {
        store.insert(name.replacen(&format!("expert{from}."), &format!("expert{to}."), 1), t.clone().with_trainable(false));
    }
    encode(&Header::new("{}", RngState::default()), &store)
}

fn freeze_soundness(lab: &Lab<f32>, stage: &StageOne<f32>) -> Outcome {
    let steps = lab.cfg.stage1_steps();
    let reference = backbone_bytes(&lab.backbone);
    let backbone_ok = [&stage.math, &stage.code].iter().all(|e| backbone_bytes(e) == reference);
    let spec = lab.cfg.train.with_steps(lab.cfg.stage2_steps());
    let (frozen, _) = compose(&lab.backbone, &[&stage.math, &stage.code], &lab.corpora.mixture, &spec, Variant::Frozen).unwrap();
    let experts_ok = expert_bytes(&frozen, 0, 0) == expert_bytes(&stage.math, 0, 0)
        && expert_bytes(&frozen, 1, 0) == expert_bytes(&stage.code, 0, 0);
    outcome(
        steps >= 500 && backbone_ok && experts_ok && backbone_bytes(&frozen) == reference,
        format!("{steps} stage-1 steps, backbone bytes identical {backbone_ok}, frozen expert bytes identical {experts_ok}"),
    )
}

fn retention(mean: &Table1) -> Outcome {
    let mode = mean.get("MoDE 2xExperts").unwrap().accuracy(Domain::English).unwrap();
    let ft = mean.get("Full-FT").unwrap().accuracy(Domain::English).unwrap();
    outcome(mode - ft >= -BAND, format!("english: MoDE 2xExperts {mode:.4}, Full-FT {ft:.4}"))
}

fn composition_benefit(mean: &Table1) -> Outcome {
    let avg = |m: &str| mean.get(m).unwrap().average;
    let (mode, frozen, uninit) = (avg("MoDE 2xExperts"), avg("MoDE 2xFrozen"), avg("MoDE 1xUninitialized"));
    outcome(
        mode - frozen >= -BAND && mode - uninit >= -BAND,
        format!("average: 2xExperts {mode:.4}, 2xFrozen {frozen:.4}, 1xUninitialized {uninit:.4}"),
    )
}

fn depth_trend(labs: &[Lab<f32>]) -> Outcome {
    let (mut l1, mut l2) = (0.0, 0.0);
    for lab in labs {
        let rows = lab.ablate_mode_configs(&[3], &[1, 2]).unwrap();
        l1 += rows[0].code / labs.len() as f64;
        l2 += rows[1].code / labs.len() as f64;
    }
    outcome(l2 - l1 >= -BAND, format!("code at blocks=3: 1 layer {l1:.4}, 2 layers {l2:.4}"))
}

fn lora_plateau(lab: &Lab<f32>) -> Outcome {
    let mut m = lab.backbone.clone();
    let tokens: Vec<usize> = lab.corpora.test_for(Domain::Code).sequences[0][..32].to_vec();
    let before = m.logits(&tokens, 32).unwrap();
    attach_lora(&mut m, &LoraConfig { rank: 8, apply_to_ffn: true, apply_to_embeddings: true, ..Default::default() }).unwrap();
    let no_op = before.bitwise_eq(&m.logits(&tokens, 32).unwrap());
    let rows = lab.lora_ablation(&[8, 64, 512], &[(false, false)]).unwrap();
    let best = rows.iter().map(|r| r.code).fold(f64::MIN, f64::max);
    let r512 = rows.iter().find(|r| r.rank == 512).unwrap().code;
    let accs: Vec<String> = rows.iter().map(|r| format!("r{} {:.4}", r.rank, r.code)).collect();
    outcome(no_op && best - r512 >= -BAND, format!("fresh adapters bit-exact {no_op}; code {}", accs.join(", ")))
}

// Simulator oracle: costs from the closed form, schedule from every
// topological order of the task graph.

#[derive(Clone)]
struct Task {
    meshes: Vec<usize>,
    duration: f64,
    deps: Vec<usize>,
}

fn oracle_branch(c: &CostModel, layers: usize, d: usize, p: usize) -> f64 {
    let (l, d, pf) = (layers as f64, d as f64, p as f64);
    let compute = c.flops_per_token * c.tokens * d * d / (pf * c.device_flops);
    let comm = if p == 1 {
        0.0
    } else {
        2.0 * (pf - 1.0) / pf * c.tokens * d * c.bytes_per_element / c.bandwidth + 2.0 * (pf - 1.0) * c.latency
    };
    c.backward_factor * l * (compute + comm)
}

fn tasks(plan: &ShardingPlan, m: &ModeConfig, c: &CostModel) -> Vec<Task> {
    let branches: Vec<Branch> = std::iter::once(Branch::Backbone).chain((0..m.n_experts).map(Branch::Expert)).collect();
    let all: Vec<usize> = (0..plan.meshes.len()).collect();
    let mut out: Vec<Task> = Vec::new();
    let mut frontier: Vec<usize> = Vec::new();
    for _ in 0..m.n_blocks {
        let mut block = Vec::new();
        for &b in &branches {
            let mesh = plan.mesh_of(b).unwrap();
            let layers = if b == Branch::Backbone { m.n_backbone_layers / m.n_blocks } else { m.expert_layers_per_block };
            let p = plan.meshes[mesh].devices.len();
            out.push(Task { meshes: vec![mesh], duration: oracle_branch(c, layers, m.d_model, p), deps: frontier.clone() });
            block.push(out.len() - 1);
        }
        let used: std::collections::BTreeSet<usize> = branches.iter().map(|&b| plan.mesh_of(b).unwrap()).collect();
        if plan.kind == PlanKind::Mpmd && used.len() > 1 {
            let inbound = used.iter().map(|&mesh| branches.iter().filter(|&&b| plan.mesh_of(b) != Some(mesh)).count()).max().unwrap();
            let bytes = inbound as f64 * c.tokens * m.d_model as f64 * c.bytes_per_element;
            out.push(Task { meshes: all.clone(), duration: bytes / c.cross_bandwidth + c.hop_latency + c.merge_overhead, deps: block });
            frontier = vec![out.len() - 1];
        } else {
            frontier = block;
        }
    }
    out
}

fn best_makespan(tasks: &[Task], n_meshes: usize) -> f64 {
    fn go(tasks: &[Task], done: &mut Vec<Option<f64>>, free: &mut Vec<f64>, best: &mut f64) {
        if done.iter().all(Option::is_some) {
            *best = best.min(done.iter().map(|d| d.unwrap()).fold(0.0, f64::max));
            return;
        }
        for i in 0..tasks.len() {
            if done[i].is_some() || tasks[i].deps.iter().any(|&d| done[d].is_none()) {
                continue;
            }
            let ready = tasks[i].deps.iter().map(|&d| done[d].unwrap()).fold(0.0, f64::max);
            let start = tasks[i].meshes.iter().map(|&m| free[m]).fold(ready, f64::max);
            let end = start + tasks[i].duration;
            let saved: Vec<f64> = tasks[i].meshes.iter().map(|&m| free[m]).collect();
            for &m in &tasks[i].meshes {
                free[m] = end;
            }
            done[i] = Some(end);
            go(tasks, done, free, best);
            done[i] = None;
            for (k, &m) in tasks[i].meshes.iter().enumerate() {
                free[m] = saved[k];
            }
        }
    }
    let mut best = f64::INFINITY;
    go(tasks, &mut vec![None; tasks.len()], &mut vec![0.0; n_meshes], &mut best);
    best
}

fn simulator_oracle() -> Outcome {
    // Powers of two keep every sum exact, so any summation order agrees.
    let c = CostModel {
        device_flops: 2f64.powi(40),
        bandwidth: 2f64.powi(30),
        latency: 2f64.powi(-14),
        cross_bandwidth: 2f64.powi(31),
        hop_latency: 2f64.powi(-12),
        merge_overhead: 2f64.powi(-8),
        flops_per_token: 24.0,
        bytes_per_element: 2.0,
        tokens: 1024.0,
        backward_factor: 3.0,
    };
    let mut plans: Vec<(usize, ShardingPlan)> = Vec::new();
    for p in [1, 2, 4] {
        plans.push((0, ShardingPlan::spmd(p, 0)));
        plans.push((1, ShardingPlan::spmd(p, 1)));
        let mut single = ShardingPlan::spmd(p, 1);
        single.kind = PlanKind::Mpmd;
        plans.push((1, single));
    }
    // Mesh sizes must divide the 4 heads, so 3-device meshes are out.
    for (a, b) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
        plans.push((1, ShardingPlan::mpmd(&[a, b], &[vec![Branch::Backbone], vec![Branch::Expert(0)]])));
        plans.push((1, ShardingPlan::mpmd(&[a, b], &[vec![Branch::Expert(0)], vec![Branch::Backbone]])));
    }
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for blocks in 1..=3 {
        for expert_layers in [1, 2] {
            for (n_experts, plan) in &plans {
                let m = ModeConfig {
                    d_model: 64,
                    n_heads: 4,
                    n_backbone_layers: 6,
                    n_blocks: blocks,
                    expert_layers_per_block: expert_layers,
                    n_experts: *n_experts,
                    ..Default::default()
                };
                let got = sim::simulate_step(plan, &m, &c, blocks).unwrap().latency;
                let want = best_makespan(&tasks(plan, &m, &c), plan.meshes.len());
                checked += 1;
                if got != want {
                    mismatches.push(format!("{blocks} blocks, {} meshes: {got} vs {want}", plan.meshes.len()));
                }
            }
        }
    }
    outcome(mismatches.is_empty(), format!("{checked} configurations, {} mismatches {:?}", mismatches.len(), mismatches))
}

fn figure_trends() -> Outcome {
    let c = CostModel::default();
    let m = presets::figure_model();
    let lat = |p: &ShardingPlan| sim::simulate_step(p, &m, &c, m.n_blocks).unwrap().latency;
    let (s, m3, m5) = (lat(&presets::spmd_plan(4)), lat(&presets::three_mesh_plan()), lat(&presets::five_mesh_plan()));
    let a = s / m3 >= 1.2 && (m3 - m5).abs() / m3 < 0.05;

    let pts = sim::sweep_expert_size(&presets::spmd_plan(2), &presets::size_sweep_plan(), &presets::size_sweep_model(), &c, &presets::SIZE_SWEEP).unwrap();
    let (first, last) = (&pts[0], &pts[pts.len() - 1]);
    // The balanced point: expert block time closest to the backbone block.
    let balanced = pts
        .iter()
        .min_by(|x, y| {
            let gap = |p: &sim::SizePoint| (p.mpmd.meshes[0].compute + p.mpmd.meshes[0].allreduce - p.mpmd.meshes[1].compute).abs();
            gap(x).total_cmp(&gap(y))
        })
        .unwrap();
    let b = first.spmd.latency < first.mpmd.latency
        && last.spmd.latency < last.mpmd.latency
        && balanced.mpmd.latency < balanced.spmd.latency;

    let merges = sim::sweep_merges(&presets::three_mesh_plan(), &presets::merges_model(), &c, &presets::MERGE_SWEEP).unwrap();
    let cc = merges.windows(2).all(|w| w[1].1.latency > w[0].1.latency);
    let pattern: String = pts.iter().map(|p| if p.spmd.latency < p.mpmd.latency { 'S' } else { 'M' }).collect();
    outcome(
        a && b && cc,
        format!(
            "speedup {:.2}x, 3 vs 5 meshes {:.1}%, size sweep {pattern} (balanced at {} layers), merges {:?}",
            s / m3,
            100.0 * (m3 - m5).abs() / m3,
            balanced.added_layers(),
            merges.iter().map(|(_, r)| format!("{:.3}", r.latency)).collect::<Vec<_>>()
        ),
    )
}

// Determinism through the binary.

const TINY: [&str; 9] = [
    "pretrain_steps=10",
    "train.steps=10",
    "n_train=40",
    "n_test=8",
    "model.d_model=16",
    "model.n_heads=2",
    "model.n_backbone_layers=2",
    "model.n_blocks=2",
    "model.max_seq_len=12",
];

fn modelab(work: &Path, args: &[&str]) -> Result<PathBuf, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_modelab"));
    cmd.env("MODELAB_WORKDIR", work).args(args);
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(PathBuf::from(String::from_utf8_lossy(&out.stdout).trim()))
}

fn pipeline(work: &Path) -> Result<BTreeMap<String, String>, String> {
    let mut base: Vec<String> = vec!["--seed".into(), "4".into()];
    for s in TINY {
        base.push("--set".into());
        base.push(s.into());
    }
    let with = |extra: &[&str]| -> Vec<String> { extra.iter().map(|s| s.to_string()).chain(base.iter().cloned()).collect() };
    let call = |args: Vec<String>| -> Result<PathBuf, String> {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        modelab(work, &refs)
    };
    let mut runs = vec![call(with(&["pretrain-backbone"]))?];
    let bb = runs[0].join("model.ckpt").display().to_string();
    let math = call(with(&["train-expert", "--backbone", &bb, "--domain", "math"]))?;
    let code = call(with(&["train-expert", "--backbone", &bb, "--domain", "code"]))?;
    let (m, c) = (math.join("model.ckpt").display().to_string(), code.join("model.ckpt").display().to_string());
    runs.extend([math.clone(), code.clone()]);
    for variant in ["standard", "frozen"] {
        runs.push(call(with(&["compose", "--backbone", &bb, "--expert", &m, "--expert", &c, "--variant", variant]))?);
    }
    for n in ["1", "2"] {
        runs.push(call(with(&["compose", "--backbone", &bb, "--variant", "uninitialized", "--n-experts", n]))?);
    }
    runs.push(call(with(&["finetune", "--backbone", &bb]))?);
    runs.push(call(with(&["lora", "--backbone", &bb]))?);
    runs.push(modelab(work, &["table1"])?);
    runs.push(modelab(work, &["simulate", "--figures"])?);
    runs.push(modelab(work, &["simulate", "--sweep", "merges", "--plan", "spmd", "--plan", "mpmd"])?);
    runs.push(modelab(work, &["data", "dump", "--domain", "code", "--n", "5", "--seed", "9"])?);

    let mut hashes = BTreeMap::new();
    for (i, dir) in runs.iter().enumerate() {
        let text = std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?;
        let manifest: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let command = manifest["command"].as_str().unwrap_or_default();
        for a in manifest["artifacts"].as_array().into_iter().flatten() {
            hashes.insert(format!("{i:02}-{command}/{}", a["path"].as_str().unwrap()), a["sha256"].as_str().unwrap().to_string());
        }
    }
    Ok(hashes)
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (pipeline(a.path()), pipeline(b.path())) {
        (Ok(x), Ok(y)) => {
            let differing: Vec<&String> = x.keys().filter(|k| x.get(*k) != y.get(*k)).collect();
            outcome(differing.is_empty() && x.len() == y.len() && x.len() > 20, format!("{} artifacts over 14 commands, {} differ {:?}", x.len(), differing.len(), differing))
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn main() {
    let started = Instant::now();
    let mut results: BTreeMap<usize, Outcome> = BTreeMap::new();
    let mut record = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n:>2} {} {name}: {} [{:.0}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail, started.elapsed().as_secs_f64());
        results.insert(n, o);
    };

    record(1, "gradient correctness", gradient_correctness());
    record(2, "structural suite", structural_suite());
    record(8, "simulator oracle", simulator_oracle());
    record(9, "sharding trends", figure_trends());
    record(10, "determinism", determinism());

    let cfg = LabConfig::default();
    let labs: Vec<Lab<f32>> = SEEDS.iter().map(|&s| Lab::new(cfg.with_seed(s)).unwrap()).collect();
    let stages: Vec<StageOne<f32>> = labs.iter().map(|l| l.stage_one().unwrap()).collect();
    record(3, "freeze soundness", freeze_soundness(&labs[0], &stages[0]));
    let tables: Vec<Table1> = labs.iter().zip(&stages).map(|(l, s)| l.table1(s).unwrap()).collect();
    let mean = Table1::mean(&tables).unwrap();
    for r in std::iter::once(&mean.backbone).chain(&mean.rows) {
        println!("    {:<22} math {:.4} code {:.4} english {:.4} average {:.4}", r.label, r.accuracy(Domain::Math).unwrap(), r.accuracy(Domain::Code).unwrap(), r.accuracy(Domain::English).unwrap(), r.average);
    }
    record(4, "english retention", retention(&mean));
    record(5, "composition benefit", composition_benefit(&mean));
    record(6, "expert depth trend", depth_trend(&labs));
    record(7, "lora no-op and plateau", lora_plateau(&labs[0]));

    println!("summary:");
    for (n, o) in &results {
        println!("  criterion {n:>2}: {}", if o.pass { "PASS" } else { "FAIL" });
    }
    if results.values().any(|o| !o.pass) {
        std::process::exit(1);
    }
}
