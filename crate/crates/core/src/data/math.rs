//! Chained modular arithmetic: `a op b = c ;` with `c = (a op b) mod 10`.

use rand::Rng;

use super::{check_bounds, corpus_rng, Domain, DomainCorpus, Split};
use crate::error::Result;

pub const DIGIT0: usize = 4;
pub const PLUS: usize = 14;
pub const MINUS: usize = 15;
pub const TIMES: usize = 16;
pub const EQUALS: usize = 17;
pub const END: usize = 18;

const OPS: [usize; 3] = [PLUS, MINUS, TIMES];

fn apply(op: usize, a: i64, b: i64) -> i64 {
    match op {
        PLUS => a + b,
        MINUS => a - b,
        _ => a * b,
    }
    .rem_euclid(10)
}

pub fn gen_math(seed: u64, n: usize, seq_len: usize, split: Split) -> Result<DomainCorpus> {
    check_bounds(n, seq_len)?;
    let mut rng = corpus_rng(seed, Domain::Math, split);
    let sequences = (0..n)
        .map(|_| {
            let mut s = Vec::with_capacity(seq_len + 6);
            while s.len() < seq_len {
                let a = rng.random_range(0..10);
                let b = rng.random_range(0..10);
                let op = OPS[rng.random_range(0..OPS.len())];
                let c = apply(op, a, b);
                let digit = |v: i64| DIGIT0 + v as usize;
                s.extend([digit(a), op, digit(b), EQUALS, digit(c), END]);
            }
            s.truncate(seq_len);
            s
        })
        .collect();
    Ok(DomainCorpus { domain: Domain::Math, split, seed, seq_len, sequences })
}
