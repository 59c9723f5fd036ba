//! A small probabilistic grammar over statement-structured programs.
//! Every emitted sequence is exactly `T` tokens of complete statements,
//! so brackets always balance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_bounds, corpus_rng, Domain, DomainCorpus, Split};
use crate::error::Result;

pub const LET: usize = 32;
pub const IF: usize = 33;
pub const ELSE: usize = 34;
pub const WHILE: usize = 35;
pub const RETURN: usize = 36;
pub const FN: usize = 37;
pub const PRINT: usize = 38;
pub const IDENT0: usize = 39;
pub const N_IDENTS: usize = 8;
pub const LIT0: usize = 47;
pub const N_LITS: usize = 6;
pub const LPAREN: usize = 53;
pub const RPAREN: usize = 54;
pub const LBRACE: usize = 55;
pub const RBRACE: usize = 56;
pub const LBRACKET: usize = 57;
pub const RBRACKET: usize = 58;
pub const ASSIGN: usize = 59;
pub const ADD: usize = 60;
pub const LESS: usize = 61;
pub const COMMA: usize = 62;
pub const SEMI: usize = 63;

const MAX_DEPTH: usize = 2;
const ATTEMPTS: usize = 8;

fn ident(rng: &mut ChaCha8Rng) -> usize {
    IDENT0 + rng.random_range(0..N_IDENTS)
}

fn lit(rng: &mut ChaCha8Rng) -> usize {
    LIT0 + rng.random_range(0..N_LITS)
}

fn expr(rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
    match rng.random_range(0..5) {
        0 => out.push(lit(rng)),
        1 => out.push(ident(rng)),
        2 => out.extend([ident(rng), ADD, lit(rng)]),
        3 => out.extend([LBRACKET, lit(rng), COMMA, lit(rng), RBRACKET]),
        _ => out.extend([ident(rng), LPAREN, ident(rng), RPAREN]),
    }
}

fn body(rng: &mut ChaCha8Rng, depth: usize, out: &mut Vec<usize>) {
    out.push(LBRACE);
    for _ in 0..rng.random_range(1..=2) {
        statement(rng, depth + 1, out);
    }
    out.push(RBRACE);
}

fn statement(rng: &mut ChaCha8Rng, depth: usize, out: &mut Vec<usize>) {
    let nested = depth < MAX_DEPTH;
    let choice = if nested { rng.random_range(0..6) } else { rng.random_range(0..2) };
    match choice {
        0 => {
            out.extend([LET, ident(rng), ASSIGN]);
            expr(rng, out);
            out.push(SEMI);
        }
        1 => {
            out.extend([PRINT, LPAREN]);
            expr(rng, out);
            out.extend([RPAREN, SEMI]);
        }
        2 | 3 => {
            out.extend([IF, LPAREN, ident(rng), LESS]);
            expr(rng, out);
            out.push(RPAREN);
            body(rng, depth, out);
            if choice == 3 {
                out.push(ELSE);
                body(rng, depth, out);
            }
        }
        4 => {
            out.extend([WHILE, LPAREN, ident(rng), LESS, lit(rng), RPAREN]);
            body(rng, depth, out);
        }
        _ => {
            out.extend([FN, ident(rng), LPAREN, ident(rng), COMMA, ident(rng), RPAREN, LBRACE, RETURN]);
            expr(rng, out);
            out.extend([SEMI, RBRACE]);
        }
    }
}

pub fn gen_code(seed: u64, n: usize, seq_len: usize, split: Split) -> Result<DomainCorpus> {
    check_bounds(n, seq_len)?;
    let mut rng = corpus_rng(seed, Domain::Code, split);
    let mut stmt = Vec::new();
    let sequences = (0..n)
        .map(|_| {
            let mut s = Vec::with_capacity(seq_len);
            'fill: while s.len() < seq_len {
                for _ in 0..ATTEMPTS {
                    stmt.clear();
                    statement(&mut rng, 0, &mut stmt);
                    if s.len() + stmt.len() <= seq_len {
                        s.extend_from_slice(&stmt);
                        continue 'fill;
                    }
                }
                break;
            }
            s.resize(seq_len, SEMI);
            s
        })
        .collect();
    Ok(DomainCorpus { domain: Domain::Code, split, seed, seq_len, sequences })
}
