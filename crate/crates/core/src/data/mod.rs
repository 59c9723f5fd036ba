//! Deterministic synthetic corpora standing in for the math, code and
//! english domains, over one shared vocabulary.
//!
//! | ids      | use                                  |
//! |----------|--------------------------------------|
//! | 0..4     | specials (pad, bos, eos, sep)        |
//! | 4..32    | math: digits, `+ - *`, `=`, `;`      |
//! | 32..64   | code: keywords, names, literals, ... |
//! | 64..128  | english word pieces                  |

mod code;
mod english;
mod math;
mod mix;

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use code::gen_code;
pub use english::{gen_english, transition_probs};
pub use math::gen_math;
pub use mix::{mix, MixtureSpec};

pub const VOCAB_SIZE: usize = 128;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

pub const MATH_RANGE: std::ops::Range<usize> = 4..32;
pub const CODE_RANGE: std::ops::Range<usize> = 32..64;
pub const ENGLISH_RANGE: std::ops::Range<usize> = 64..128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Math,
    Code,
    English,
    Mixed,
}

impl Domain {
    pub const EVAL: [Domain; 3] = [Domain::Math, Domain::Code, Domain::English];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Math => "math",
            Domain::Code => "code",
            Domain::English => "english",
            Domain::Mixed => "mixed",
        }
    }

    fn stream_base(self) -> u64 {
        match self {
            Domain::Math => 0,
            Domain::Code => 2,
            Domain::English => 4,
            Domain::Mixed => 6,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "math" => Ok(Domain::Math),
            "code" => Ok(Domain::Code),
            "english" => Ok(Domain::English),
            "mixed" => Ok(Domain::Mixed),
            _ => Err(Error::config(format!("unknown domain `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split `{s}`"))),
        }
    }
}

/// Generator stream for a domain and split. Train and test draw from
/// different ChaCha streams of the same seed, so they never share
/// randomness.
pub(crate) fn corpus_rng(seed: u64, domain: Domain, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    rng.set_stream(domain.stream_base() + offset);
    rng
}

/// Fixed-length token sequences from one domain (or a mixture).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainCorpus {
    pub domain: Domain,
    pub split: Split,
    pub seed: u64,
    pub seq_len: usize,
    pub sequences: Vec<Vec<usize>>,
}

impl DomainCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// The first `n` sequences.
    pub fn take(&self, n: usize) -> DomainCorpus {
        DomainCorpus { sequences: self.sequences[..n.min(self.len())].to_vec(), ..self.clone() }
    }

    /// Writes one sequence per line as space-separated token ids, after a
    /// `#` header line describing the corpus.
    pub fn write_tokens(&self, mut out: impl Write) -> Result<()> {
        writeln!(
            out,
            "# domain={} split={} seed={} seq_len={} count={}",
            self.domain,
            self.split.name(),
            self.seed,
            self.seq_len,
            self.len()
        )?;
        for s in &self.sequences {
            let line: Vec<String> = s.iter().map(usize::to_string).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_tokens(input: impl BufRead) -> Result<DomainCorpus> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Input("empty token file".into()))??;
        let field = |key: &str| -> Result<String> {
            header
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .map(str::to_string)
                .ok_or_else(|| Error::Input(format!("header lacks `{key}`")))
        };
        let parse_num = |key: &str| -> Result<u64> {
            field(key)?.parse().map_err(|_| Error::Input(format!("bad `{key}` in header")))
        };
        let domain: Domain = field("domain")?.parse()?;
        let split: Split = field("split")?.parse()?;
        let seed = parse_num("seed")?;
        let seq_len = parse_num("seq_len")? as usize;
        let mut sequences = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let seq = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Input(format!("line {}: {e}", i + 2)))?;
            if seq.len() != seq_len {
                return Err(Error::Input(format!(
                    "line {}: {} tokens, expected {seq_len}",
                    i + 2,
                    seq.len()
                )));
            }
            sequences.push(seq);
        }
        Ok(DomainCorpus { domain, split, seed, seq_len, sequences })
    }
}

/// Dispatches to the generator for `domain`.
pub fn generate(domain: Domain, seed: u64, n: usize, seq_len: usize, split: Split) -> Result<DomainCorpus> {
    match domain {
        Domain::Math => gen_math(seed, n, seq_len, split),
        Domain::Code => gen_code(seed, n, seq_len, split),
        Domain::English => gen_english(seed, n, seq_len, split),
        Domain::Mixed => Err(Error::config("mixed corpora are built with `mix`")),
    }
}

pub(crate) fn check_bounds(n: usize, seq_len: usize) -> Result<()> {
    if n == 0 || seq_len == 0 {
        return Err(Error::config(format!("corpus needs n >= 1 and T >= 1, got n={n}, T={seq_len}")));
    }
    Ok(())
}
