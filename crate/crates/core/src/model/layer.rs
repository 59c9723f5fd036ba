//! Pre-norm decoder layer: `h = x + Attn(LN1(x))`, `y = h + FFN(LN2(h))`.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::{Float, ParamStore, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Normal sample truncated to two standard deviations.
pub fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub(crate) fn normal_tensor<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(truncated_normal(rng, std))).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Parameter names and shapes of one layer under `prefix`.
pub fn layer_shapes(prefix: &str, d: usize) -> Vec<(String, Vec<usize>)> {
    let h = 4 * d;
    let mut out = Vec::new();
    for ln in ["ln1", "ln2"] {
        out.push((format!("{prefix}.{ln}.gamma"), vec![d]));
        out.push((format!("{prefix}.{ln}.beta"), vec![d]));
    }
    for w in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.attn.{w}.weight"), vec![d, d]));
        out.push((format!("{prefix}.attn.{w}.bias"), vec![d]));
    }
    out.push((format!("{prefix}.ffn.w1.weight"), vec![d, h]));
    out.push((format!("{prefix}.ffn.w1.bias"), vec![h]));
    out.push((format!("{prefix}.ffn.w2.weight"), vec![h, d]));
    out.push((format!("{prefix}.ffn.w2.bias"), vec![d]));
    out
}

/// Initial value for a parameter by naming convention: layer-norm gains
/// are one, biases and shifts zero, weights truncated normal.
pub(crate) fn init_by_name<T: Float>(
    name: &str,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    if name.ends_with(".gamma") {
        Tensor::filled(shape, T::one())
    } else if name.ends_with(".beta") || name.ends_with(".bias") {
        Tensor::zeros(shape)
    } else {
        normal_tensor(rng, shape, INIT_STD)
    }
}

pub(crate) fn insert_layer<T: Float>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    mut rng_for: impl FnMut(&str) -> ChaCha8Rng,
) {
    for (name, shape) in layer_shapes(prefix, d) {
        let mut rng = rng_for(&name);
        let t = init_by_name(&name, &shape, &mut rng);
        store.insert(name, t);
    }
}

/// `x · W (+ s · x · A · B) + b` for the linear map stored under `name`.
/// The low-rank term is present when the store holds adapters for `W`.
pub fn linear<T: Float>(tape: &mut Tape<'_, T>, name: &str, x: Var, lora_scale: f64) -> Result<Var> {
    let weight = format!("{name}.weight");
    let w = tape.param_by_name(&weight)?;
    let mut y = tape.matmul(x, w)?;
    let a_name = format!("{weight}.lora_a");
    if tape.has_param(&a_name) {
        let a = tape.param_by_name(&a_name)?;
        let b = tape.param_by_name(&format!("{weight}.lora_b"))?;
        let xa = tape.matmul(x, a)?;
        let xab = tape.matmul(xa, b)?;
        let delta = tape.scale(xab, T::from_f64(lora_scale));
        y = tape.add(y, delta)?;
    }
    let b = tape.param_by_name(&format!("{name}.bias"))?;
    tape.add_bias(y, b)
}

pub fn layer_norm<T: Float>(tape: &mut Tape<'_, T>, name: &str, x: Var) -> Result<Var> {
    let g = tape.param_by_name(&format!("{name}.gamma"))?;
    let b = tape.param_by_name(&format!("{name}.beta"))?;
    tape.layer_norm(x, g, b)
}

/// One decoder layer over `x[sequences * seq_len, d]`.
pub fn layer_forward<T: Float>(
    tape: &mut Tape<'_, T>,
    prefix: &str,
    x: Var,
    seq_len: usize,
    heads: usize,
    lora_scale: f64,
) -> Result<Var> {
    let n1 = layer_norm(tape, &format!("{prefix}.ln1"), x)?;
    let q = linear(tape, &format!("{prefix}.attn.wq"), n1, lora_scale)?;
    let k = linear(tape, &format!("{prefix}.attn.wk"), n1, lora_scale)?;
    let v = linear(tape, &format!("{prefix}.attn.wv"), n1, lora_scale)?;
    let att = tape.causal_attention(q, k, v, seq_len, heads)?;
    let o = linear(tape, &format!("{prefix}.attn.wo"), att, lora_scale)?;
    let h = tape.add(x, o)?;

    let n2 = layer_norm(tape, &format!("{prefix}.ln2"), h)?;
    let f = linear(tape, &format!("{prefix}.ffn.w1"), n2, lora_scale)?;
    let f = tape.gelu(f);
    let f = linear(tape, &format!("{prefix}.ffn.w2"), f, lora_scale)?;
    tape.add(h, f)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::error::Error;
    use crate::tensor::gradcheck::check_gradients;

    fn jitter(rng: &mut ChaCha8Rng) -> f64 {
        rng.random_range(-1.0..1.0)
    }

    fn layer_store(d: usize, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        insert_layer(&mut s, "l", d, |_| ChaCha8Rng::seed_from_u64(seed));
        // Non-trivial affine params so their gradients are exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for (_, t) in s.iter_mut() {
            for v in t.data_mut() {
                *v += 0.1 * jitter(&mut rng);
            }
        }
        s.set_trainable_where(|_| true);
        s
    }

    fn input(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, d], (0..rows * d).map(|_| jitter(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn causal_probe_leaves_earlier_positions_untouched() {
        let (d, t) = (8, 5);
        let store = layer_store(d, 3);
        let x = input(t, d, 4);
        let mut x2 = x.clone();
        for c in 0..d {
            x2.data_mut()[3 * d + c] += 0.5;
        }
        let run = |x: Tensor<f64>| {
            let mut tape = Tape::new(&store);
            let v = tape.constant(x);
            let y = layer_forward(&mut tape, "l", v, t, 2, 0.0).unwrap();
            tape.value(y)
        };
        let (y1, y2) = (run(x), run(x2));
        assert_eq!(&y1.data()[..3 * d], &y2.data()[..3 * d]);
        assert_ne!(&y1.data()[3 * d..], &y2.data()[3 * d..]);
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let d = 8;
        let mut store = layer_store(d, 5);
        for name in ["l.attn.wo.weight", "l.attn.wo.bias", "l.ffn.w2.weight", "l.ffn.w2.bias"] {
            store.by_name_mut(name).unwrap().data_mut().fill(0.0);
        }
        let x = input(4, d, 6);
        let mut tape = Tape::new(&store);
        let v = tape.constant(x.clone());
        let y = layer_forward(&mut tape, "l", v, 4, 2, 0.0).unwrap();
        assert!(tape.value(y).bitwise_eq(&x));
    }

    #[test]
    fn head_divisibility_is_a_config_error() {
        let store = layer_store(8, 1);
        let mut tape = Tape::new(&store);
        let v = tape.constant(input(2, 8, 1));
        assert!(matches!(layer_forward(&mut tape, "l", v, 2, 3, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let d = 8;
        let mut store = layer_store(d, 7);
        store.insert("x", input(6, d, 8).with_trainable(true));
        store.insert("probe", input(6, d, 9));
        let report = check_gradients(&mut store, 1e-5, 24, |t| {
            let x = t.param_by_name("x")?;
            let y = layer_forward(t, "l", x, 3, 2, 0.0)?;
            let p = t.param_by_name("probe")?;
            let m = t.mul(y, p)?;
            Ok(t.sum(m))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.checked > 100);
    }
}
