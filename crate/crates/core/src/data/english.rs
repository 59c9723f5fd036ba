//! Order-2 Markov chain over 64 word pieces. The successor set depends on
//! the previous word; the weights over that set depend on the previous two.

use rand::Rng;

use super::{check_bounds, corpus_rng, Domain, DomainCorpus, Split, ENGLISH_RANGE};
use crate::error::Result;

pub const N_WORDS: usize = 64;

pub(crate) const SUCC: [[u8; 3]; 64] = [
    [24, 25, 2], [60, 61, 34], [19, 40, 55], [24, 9, 14],
    [47, 52, 41], [33, 46, 30], [46, 54, 28], [34, 35, 44],
    [58, 6, 47], [45, 14, 13], [15, 31, 38], [19, 30, 13],
    [17, 52, 62], [28, 33, 35], [38, 59, 47], [58, 36, 24],
    [9, 58, 47], [46, 33, 18], [44, 61, 41], [55, 48, 47],
    [54, 41, 15], [18, 11, 60], [53, 15, 7], [29, 35, 27],
    [57, 43, 49], [54, 49, 5], [19, 17, 23], [60, 54, 3],
    [3, 25, 12], [47, 31, 28], [23, 8, 38], [43, 4, 20],
    [44, 10, 33], [36, 25, 3], [36, 24, 38], [18, 23, 46],
    [33, 59, 51], [27, 30, 7], [19, 6, 10], [5, 10, 3],
    [24, 11, 57], [26, 16, 59], [39, 59, 24], [18, 2, 56],
    [5, 14, 47], [48, 56, 40], [21, 59, 22], [17, 4, 43],
    [25, 3, 61], [58, 17, 48], [32, 34, 26], [62, 58, 39],
    [18, 6, 10], [7, 21, 2], [25, 37, 30], [41, 35, 13],
    [57, 7, 17], [27, 37, 10], [7, 2, 29], [62, 50, 63],
    [61, 2, 3], [53, 29, 40], [30, 60, 56], [16, 21, 53],
];

pub(crate) const WEIGHTS: [[f64; 3]; 4] = [
    [0.7, 0.2, 0.1],
    [0.1, 0.7, 0.2],
    [0.2, 0.1, 0.7],
    [0.4, 0.4, 0.2],
];

/// Next-word distribution after words `a, b` (indices in `0..64`).
pub fn transition_probs(a: usize, b: usize) -> [(usize, f64); 3] {
    let w = WEIGHTS[(a + b) % 4];
    let s = SUCC[b];
    [(s[0] as usize, w[0]), (s[1] as usize, w[1]), (s[2] as usize, w[2])]
}

fn sample(rng: &mut impl Rng, dist: [(usize, f64); 3]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (w, p) in dist {
        acc += p;
        if u < acc {
            return w;
        }
    }
    dist[2].0
}

pub fn gen_english(seed: u64, n: usize, seq_len: usize, split: Split) -> Result<DomainCorpus> {
    check_bounds(n, seq_len)?;
    let mut rng = corpus_rng(seed, Domain::English, split);
    let base = ENGLISH_RANGE.start;
    let sequences = (0..n)
        .map(|_| {
            let mut a = rng.random_range(0..N_WORDS);
            let mut b = SUCC[a][rng.random_range(0..3)] as usize;
            let mut s = vec![base + a, base + b];
            while s.len() < seq_len {
                let c = sample(&mut rng, transition_probs(a, b));
                s.push(base + c);
                (a, b) = (b, c);
            }
            s.truncate(seq_len);
            s
        })
        .collect();
    Ok(DomainCorpus { domain: Domain::English, split, seed, seq_len, sequences })
}
