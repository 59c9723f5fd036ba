use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::check_gradients;

fn tiny(n_experts: usize) -> ModeConfig {
    ModeConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        n_backbone_layers: 2,
        n_blocks: 2,
        expert_layers_per_block: 1,
        n_experts,
        max_seq_len: 6,
        seed: 3,
        ..Default::default()
    }
}

fn randomize<T: Float>(model: &mut ModeModel<T>, seed: u64, scale: f64, pred: impl Fn(&str) -> bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.params.iter_mut() {
        if pred(name) {
            for v in t.data_mut() {
                *v += T::from_f64(scale * rng.random_range(-1.0..1.0));
            }
        }
    }
}

fn input(tape: &mut Tape<'_, f64>, rows: usize, d: usize, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.constant(Tensor::new(vec![rows, d], data).unwrap())
}

#[test]
fn zero_gate_is_uniform() {
    let m = ModeModel::<f64>::new(tiny(1)).unwrap();
    let mut tape = Tape::new(&m.params);
    let x = input(&mut tape, 4, 8, 1);
    let a = tape.gate_forward_for_test(&m, 0, x);
    assert!(tape.data(a).iter().all(|&v| v == 0.5));

    let m0 = ModeModel::<f64>::new(tiny(0)).unwrap();
    let mut tape = Tape::new(&m0.params);
    let x = input(&mut tape, 4, 8, 1);
    let a = tape.gate_forward_for_test(&m0, 0, x);
    assert_eq!(tape.shape(a), &[4, 1]);
    assert!(tape.data(a).iter().all(|&v| v == 1.0));
}

trait GateProbe<'p> {
    fn gate_forward_for_test(&mut self, m: &ModeModel<f64>, block: usize, x: Var) -> Var;
}

impl<'p> GateProbe<'p> for Tape<'p, f64> {
    fn gate_forward_for_test(&mut self, m: &ModeModel<f64>, block: usize, x: Var) -> Var {
        m.gate_forward(self, block, x).unwrap()
    }
}

#[test]
fn random_gate_matches_direct_softmax() {
    let mut m = ModeModel::<f64>::new(tiny(2)).unwrap();
    randomize(&mut m, 5, 1.0, |n| n.starts_with("gate."));
    let w = m.params.by_name("gate.block1.weight").unwrap().clone();
    let b = m.params.by_name("gate.block1.bias").unwrap().clone();
    let mut tape = Tape::new(&m.params);
    let x = input(&mut tape, 5, 8, 2);
    let xs = tape.value(x);
    let a = tape.gate_forward_for_test(&m, 1, x);
    let a = tape.value(a);
    for r in 0..5 {
        let logits: Vec<f64> = (0..3)
            .map(|j| b.data()[j] + (0..8).map(|c| xs.at(&[r, c]) * w.at(&[c, j])).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let mut row_sum = 0.0;
        for j in 0..3 {
            assert!((a.at(&[r, j]) - logits[j].exp() / z).abs() < 1e-9);
            row_sum += a.at(&[r, j]);
        }
        assert!((row_sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn gate_rejects_wrong_width() {
    let m = ModeModel::<f64>::new(tiny(1)).unwrap();
    let mut tape = Tape::new(&m.params);
    let x = input(&mut tape, 2, 7, 1);
    assert!(matches!(m.gate_forward(&mut tape, 0, x), Err(Error::Dimension(_))));
}

#[test]
fn block_equals_hand_weighted_sum() {
    let mut m = ModeModel::<f64>::new(tiny(2)).unwrap();
    randomize(&mut m, 9, 0.5, |n| n.starts_with("gate."));
    let mut tape = Tape::new(&m.params);
    let x = input(&mut tape, 3, 8, 4);
    let y = m.block_forward(&mut tape, 0, x, 3).unwrap();
    let bb = m.backbone_branch(&mut tape, 0, x, 3).unwrap();
    let e0 = m.expert_branch(&mut tape, 0, 0, x, 3).unwrap();
    let e1 = m.expert_branch(&mut tape, 1, 0, x, 3).unwrap();
    let a = tape.gate_forward_for_test(&m, 0, x);
    let (a, y) = (tape.value(a), tape.value(y));
    let branches = [tape.value(bb), tape.value(e0), tape.value(e1)];
    for r in 0..3 {
        for c in 0..8 {
            let expect: f64 = (0..3).map(|j| a.at(&[r, j]) * branches[j].at(&[r, c])).sum();
            assert!((y.at(&[r, c]) - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn forced_gate_selects_one_branch() {
    for target in 0..3 {
        let mut m = ModeModel::<f64>::new(tiny(2)).unwrap();
        m.params.by_name_mut("gate.block0.bias").unwrap().data_mut()[target] = 40.0;
        let mut tape = Tape::new(&m.params);
        let x = input(&mut tape, 4, 8, 6);
        let y = m.block_forward(&mut tape, 0, x, 4).unwrap();
        let branch = if target == 0 {
            m.backbone_branch(&mut tape, 0, x, 4).unwrap()
        } else {
            m.expert_branch(&mut tape, target - 1, 0, x, 4).unwrap()
        };
        assert!(tape.value(y).max_abs_diff(&tape.value(branch)) < 1e-4);
    }
}

#[test]
fn no_experts_matches_bare_backbone_bitwise() {
    let m = ModeModel::<f32>::new(tiny(0)).unwrap();
    let tokens = [1, 4, 9, 2, 0, 3, 3, 7, 10, 5];
    let a = m.logits(&tokens, 5).unwrap();
    let mut tape = Tape::new(&m.params);
    let b = m.backbone_forward(&mut tape, &tokens, 5).unwrap();
    assert!(a.bitwise_eq(&tape.value(b)));

    let with_experts = ModeModel::<f32>::new(tiny(2)).unwrap();
    assert_eq!(m.group_digest(ParamGroup::Backbone), with_experts.group_digest(ParamGroup::Backbone));
}

#[test]
fn expert_permutation_leaves_logits_unchanged() {
    let mut cfg = tiny(3);
    cfg.n_backbone_layers = 4;
    let mut m = ModeModel::<f32>::new(cfg).unwrap();
    randomize(&mut m, 2, 0.3, |n| n.starts_with("gate."));
    let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
    let before = m.logits(&tokens, 4).unwrap();
    m.permute_experts(&[2, 0, 1]).unwrap();
    let after = m.logits(&tokens, 4).unwrap();
    assert!(before.bitwise_eq(&after));
    assert!(m.permute_experts(&[0, 0, 1]).is_err());
}

#[test]
fn logits_shape_and_input_checks() {
    let m = ModeModel::<f32>::new(tiny(1)).unwrap();
    for t in 1..=6 {
        let tokens: Vec<usize> = (0..t).collect();
        assert_eq!(m.logits(&tokens, t).unwrap().shape(), &[t, 11]);
    }
    assert!(matches!(m.logits(&[11], 1), Err(Error::Input(_))));
    assert!(matches!(m.logits(&[0; 7], 7), Err(Error::Input(_))));
}

#[test]
fn fresh_lora_is_a_no_op() {
    let mut m = ModeModel::<f32>::new(tiny(0)).unwrap();
    randomize(&mut m, 1, 0.1, |_| true);
    let tokens = [2, 7, 1, 8, 2, 8];
    let before = m.logits(&tokens, 6).unwrap();
    let cfg = LoraConfig { rank: 4, apply_to_ffn: true, apply_to_embeddings: true, alpha: 16.0 };
    attach_lora(&mut m, &cfg).unwrap();
    assert!(before.bitwise_eq(&m.logits(&tokens, 6).unwrap()));
    assert!(m.params.iter().all(|(n, t)| t.trainable() == (ParamGroup::of(n) == ParamGroup::Adapters)));
}

#[test]
fn lora_parameter_count_and_rank_limit() {
    let mut m = ModeModel::<f32>::new(tiny(0)).unwrap();
    let cfg = LoraConfig { rank: 3, ..Default::default() };
    attach_lora(&mut m, &cfg).unwrap();
    let a = m.params.by_name("backbone.layer0.attn.wq.weight.lora_a").unwrap().len();
    let b = m.params.by_name("backbone.layer0.attn.wq.weight.lora_b").unwrap().len();
    assert_eq!(a + b, 3 * (8 + 8));
    // 4 attention matrices per layer, 2 layers.
    assert_eq!(m.trainable_numel(), 8 * 3 * 16);

    let mut m = ModeModel::<f32>::new(tiny(0)).unwrap();
    let too_big = LoraConfig { rank: 65, ..Default::default() };
    assert!(matches!(attach_lora(&mut m, &too_big), Err(Error::Config(_))));
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut cfg = tiny(1);
    cfg.precision = crate::tensor::DType::F64;
    let mut m = ModeModel::<f64>::new(cfg).unwrap();
    randomize(&mut m, 4, 0.1, |_| true);
    m.apply_policy(&FreezePolicy::all());
    let model_cfg = m.config.clone();
    let tokens = [1, 5, 2, 9, 4, 4, 0, 10];
    let targets = [5, 2, 9, 3, 4, 0, 10, 1];
    let shell = ModeModel::<f64> { config: model_cfg, lora: None, params: ParamStore::new() };
    let report = check_gradients(&mut m.params, 1e-5, 6, |t| {
        let logits = shell.forward(t, &tokens, 4)?;
        t.cross_entropy(logits, &targets)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn frozen_backbone_gets_no_gradient() {
    let m = ModeModel::<f64>::new(tiny(1)).unwrap();
    let tokens = [1, 2, 3, 4];
    let grads = {
        let mut tape = Tape::new(&m.params);
        let l = m.forward(&mut tape, &tokens, 4).unwrap();
        let loss = tape.cross_entropy(l, &[2, 3, 4, 5]).unwrap();
        tape.backward(loss).unwrap()
    };
    for (name, t) in m.params.iter() {
        let id = m.params.id(name).unwrap();
        match ParamGroup::of(name) {
            ParamGroup::Backbone => assert!(!t.trainable() && grads.get(id).is_none(), "{name}"),
            _ => assert!(grads.get(id).is_some(), "{name}"),
        }
    }
}
