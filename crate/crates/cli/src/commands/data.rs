use std::path::Path;

use modelab_core::data::generate;
use modelab_core::{Domain, Split};
use serde::Serialize;

use super::Outcome;
use crate::run::Run;

#[derive(Serialize)]
struct DumpConfig {
    domain: String,
    split: String,
    n: usize,
    seq_len: usize,
    seed: u64,
}

pub fn dump(work: &Path, domain: Domain, split: Split, n: usize, seq_len: usize, seed: u64, stdout: bool) -> Outcome {
    let corpus = generate(domain, seed, n, seq_len, split)?;
    let mut buf = Vec::new();
    corpus.write_tokens(&mut buf)?;
    if stdout {
        print!("{}", String::from_utf8_lossy(&buf));
        return Ok(None);
    }
    let cfg = DumpConfig { domain: domain.to_string(), split: split.name().into(), n, seq_len, seed };
    let mut run = Run::create(work, "data-dump", seed, &cfg)?;
    run.write("tokens.txt", &buf)?;
    Ok(Some(run.finish()?))
}
