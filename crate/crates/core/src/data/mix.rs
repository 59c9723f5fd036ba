use rand::seq::SliceRandom;

use super::{corpus_rng, Domain, DomainCorpus};
use crate::error::{Error, Result};

/// Proportions over component corpora and a total sequence budget.
#[derive(Debug, Clone)]
pub struct MixtureSpec<'a> {
    pub components: Vec<(&'a DomainCorpus, f64)>,
    pub total: usize,
    pub seed: u64,
}

impl MixtureSpec<'_> {
    /// Per-component counts summing to `total`, by largest remainder with
    /// ties going to the earlier component.
    pub fn counts(&self) -> Result<Vec<usize>> {
        let sum: f64 = self.components.iter().map(|(_, p)| p).sum();
        if self.components.is_empty() || self.components.iter().any(|(_, p)| !(*p >= 0.0)) {
            return Err(Error::config("mixture needs components with non-negative proportions"));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("mixture proportions sum to {sum}, not 1")));
        }
        let exact: Vec<f64> = self.components.iter().map(|(_, p)| p * self.total as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let short = self.total - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        Ok(counts)
    }
}

/// Takes the leading sequences of each component in the computed counts
/// and shuffles them together. Smaller budgets over the same components
/// therefore select subsets of larger ones.
pub fn mix(spec: &MixtureSpec<'_>) -> Result<DomainCorpus> {
    let counts = spec.counts()?;
    let first = spec.components[0].0;
    let mut sequences = Vec::with_capacity(spec.total);
    for ((c, _), &k) in spec.components.iter().zip(&counts) {
        if c.seq_len != first.seq_len {
            return Err(Error::config(format!(
                "mixture components disagree on sequence length: {} vs {}",
                first.seq_len, c.seq_len
            )));
        }
        if c.split != first.split {
            return Err(Error::config("mixture components come from different splits"));
        }
        if k > c.len() {
            return Err(Error::config(format!("{} corpus has {} sequences, {k} requested", c.domain, c.len())));
        }
        sequences.extend(c.sequences[..k].iter().cloned());
    }
    let mut rng = corpus_rng(spec.seed, Domain::Mixed, first.split);
    sequences.shuffle(&mut rng);
    Ok(DomainCorpus { domain: Domain::Mixed, split: first.split, seed: spec.seed, seq_len: first.seq_len, sequences })
}
