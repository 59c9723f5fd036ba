//! Experiment drivers: the multi-domain comparison table, scaling sweeps,
//! architecture and LoRA ablations, and mixture data efficiency.

use serde::{Deserialize, Serialize};

use super::procedures::{compose, full_finetune, pretrain_backbone, train_expert, train_lora, Variant};
use super::{evaluate, EvalReport, TableRow, TrainSpec};
use crate::data::{generate, mix, Domain, DomainCorpus, MixtureSpec, Split};
use crate::error::{Error, Result};
use crate::model::{LoraConfig, ModeConfig, ModeModel};
use crate::tensor::Float;

/// Everything needed to reproduce a set of runs from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub model: ModeConfig,
    pub lora: LoraConfig,
    /// Optimiser settings; `steps` is the adaptation budget of every method.
    pub train: TrainSpec,
    pub pretrain_steps: usize,
    /// Share of the MoDE budget spent in stage 1; the rest is composition.
    pub stage1_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            // A fresh gate leans towards the backbone so composition starts
            // close to the pretrained model.
            model: ModeConfig { expert_layers_per_block: 1, gate_backbone_bias: 1.5, ..ModeConfig::default() },
            lora: LoraConfig::default(),
            train: TrainSpec { batch_size: 8, steps: 625, ..TrainSpec::default() },
            pretrain_steps: 1000,
            stage1_fraction: 0.8,
            n_train: 2000,
            n_test: 100,
        }
    }
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lora.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            return Err(Error::config("stage1_fraction must lie in [0, 1]"));
        }
        if self.n_train < 2 || self.n_test == 0 {
            return Err(Error::config("need at least two training and one test sequence per domain"));
        }
        if self.model.max_seq_len < 3 {
            return Err(Error::config("max_seq_len must be at least 3"));
        }
        Ok(())
    }

    /// The same configuration with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.model.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn stage1_steps(&self) -> usize {
        (self.train.steps as f64 * self.stage1_fraction).round() as usize
    }

    pub fn stage2_steps(&self) -> usize {
        self.train.steps - self.stage1_steps()
    }

    /// Corpora are one token longer than the model context: the model
    /// reads the first `max_seq_len` tokens and predicts the next ones.
    pub fn seq_len(&self) -> usize {
        self.model.max_seq_len + 1
    }
}

/// Train corpora per domain, the math+code mixture and the test sets.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub math: DomainCorpus,
    pub code: DomainCorpus,
    pub english: DomainCorpus,
    pub mixture: DomainCorpus,
    pub pretrain: DomainCorpus,
    pub tests: Vec<DomainCorpus>,
}

impl Corpora {
    pub fn new(cfg: &LabConfig) -> Result<Self> {
        let (seed, n, t) = (cfg.model.seed, cfg.n_train, cfg.seq_len());
        let train = |d| generate(d, seed, n, t, Split::Train);
        let (math, code, english) = (train(Domain::Math)?, train(Domain::Code)?, train(Domain::English)?);
        let mixture = mix(&MixtureSpec { components: vec![(&math, 0.5), (&code, 0.5)], total: n, seed })?;
        // The backbone sees its own draw of all three domains.
        let pre_seed = seed.wrapping_add(0x5eed);
        let pre: Vec<_> = Domain::EVAL
            .iter()
            .map(|&d| generate(d, pre_seed, n, t, Split::Train))
            .collect::<Result<_>>()?;
        let third = 1.0 / 3.0;
        let pretrain = mix(&MixtureSpec {
            components: pre.iter().map(|c| (c, third)).collect(),
            total: n,
            seed: pre_seed,
        })?;
        let tests = Domain::EVAL
            .iter()
            .map(|&d| generate(d, seed, cfg.n_test, t, Split::Test))
            .collect::<Result<_>>()?;
        Ok(Self { math, code, english, mixture, pretrain, tests })
    }

    pub fn train_for(&self, domain: Domain) -> &DomainCorpus {
        match domain {
            Domain::Math => &self.math,
            Domain::Code => &self.code,
            Domain::English => &self.english,
            Domain::Mixed => &self.mixture,
        }
    }

    pub fn test_for(&self, domain: Domain) -> &DomainCorpus {
        self.tests.iter().find(|c| c.domain == domain).expect("all domains have tests")
    }
}

/// A pretrained backbone and its data, shared by every run of one seed.
#[derive(Debug, Clone)]
pub struct Lab<T: Float> {
    pub cfg: LabConfig,
    pub corpora: Corpora,
    pub backbone: ModeModel<T>,
}

impl<T: Float> Lab<T> {
    pub fn new(cfg: LabConfig) -> Result<Self> {
        cfg.validate()?;
        let corpora = Corpora::new(&cfg)?;
        let spec = cfg.train.with_steps(cfg.pretrain_steps);
        let (backbone, _) = pretrain_backbone(&cfg.model, &corpora.pretrain, &spec)?;
        Ok(Self { cfg, corpora, backbone })
    }

    pub fn evaluate(&self, label: &str, model: &ModeModel<T>) -> Result<EvalReport> {
        evaluate(label, model, &self.corpora.tests)
    }

    pub fn evaluate_on(&self, label: &str, model: &ModeModel<T>, domains: &[Domain]) -> Result<EvalReport> {
        let tests: Vec<DomainCorpus> = domains.iter().map(|&d| self.corpora.test_for(d).clone()).collect();
        evaluate(label, model, &tests)
    }

    fn expert_config(&self, layers: usize, blocks: usize) -> ModeConfig {
        ModeConfig { n_experts: 1, expert_layers_per_block: layers, n_blocks: blocks, ..self.cfg.model.clone() }
    }

    /// Stage-1 expert on `domain` with the configured depth.
    pub fn expert(&self, domain: Domain) -> Result<ModeModel<T>> {
        let cfg = self.expert_config(self.cfg.model.expert_layers_per_block, self.cfg.model.n_blocks);
        self.expert_with(domain, &cfg, self.corpora.train_for(domain), self.cfg.stage1_steps())
    }

    pub fn expert_with(&self, _domain: Domain, cfg: &ModeConfig, data: &DomainCorpus, steps: usize) -> Result<ModeModel<T>> {
        let (m, _) = train_expert(&self.backbone, data, cfg, &self.cfg.train.with_steps(steps))?;
        Ok(m)
    }
}

pub const TABLE1_METHODS: [&str; 6] =
    ["Full-FT", "LoRA", "MoDE 1xUninitialized", "MoDE 2xUninitialized", "MoDE 2xFrozen", "MoDE 2xExperts"];

/// The multi-domain comparison: one report per method plus the frozen
/// backbone for reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub backbone: EvalReport,
    pub rows: Vec<EvalReport>,
}

impl Table1 {
    pub fn get(&self, method: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.label == method)
    }

    /// `a - b` per domain, average and parameter count.
    pub fn delta(&self, a: &str, b: &str) -> Option<TableRow> {
        let (ra, rb) = (self.get(a)?.row(""), self.get(b)?.row(""));
        let sub = |x: Option<f64>, y: Option<f64>| Some(x? - y?);
        Some(TableRow {
            method: format!("{a} - {b}"),
            setting: "delta".into(),
            math: sub(ra.math, rb.math),
            code: sub(ra.code, rb.code),
            english: sub(ra.english, rb.english),
            average: ra.average - rb.average,
            total_params: ra.total_params.saturating_sub(rb.total_params),
            trainable_params: ra.trainable_params.saturating_sub(rb.trainable_params),
        })
    }

    pub fn rows_for_csv(&self) -> Vec<TableRow> {
        let mut out = vec![self.backbone.row("reference")];
        out.extend(self.rows.iter().map(|r| r.row("")));
        out.extend(["Full-FT", "LoRA"].iter().filter_map(|b| self.delta("MoDE 2xExperts", b)));
        out
    }

    /// Per-method mean over several tables (e.g. seeds).
    pub fn mean(tables: &[Table1]) -> Result<Table1> {
        let first = tables.first().ok_or_else(|| Error::Input("no tables to average".into()))?;
        let avg = |reports: Vec<&EvalReport>| -> EvalReport {
            let n = reports.len() as f64;
            let acc = reports[0]
                .accuracies
                .iter()
                .map(|(d, _)| (*d, reports.iter().map(|r| r.accuracy(*d).unwrap_or(0.0)).sum::<f64>() / n))
                .collect();
            EvalReport::new(&reports[0].label, acc, reports[0].total_params, reports[0].trainable_params)
        };
        let backbone = avg(tables.iter().map(|t| &t.backbone).collect());
        let rows = first
            .rows
            .iter()
            .map(|r| {
                let matching: Vec<&EvalReport> = tables.iter().filter_map(|t| t.get(&r.label)).collect();
                avg(matching)
            })
            .collect();
        Ok(Table1 { backbone, rows })
    }
}

/// Trained experts reused across composition variants.
#[derive(Debug, Clone)]
pub struct StageOne<T: Float> {
    pub math: ModeModel<T>,
    pub code: ModeModel<T>,
}

impl<T: Float> Lab<T> {
    pub fn stage_one(&self) -> Result<StageOne<T>> {
        Ok(StageOne { math: self.expert(Domain::Math)?, code: self.expert(Domain::Code)? })
    }

    /// Stage-2 composition of the math and code experts.
    pub fn compose_pair(&self, stage: &StageOne<T>, variant: Variant, mixture: &DomainCorpus, steps: usize) -> Result<ModeModel<T>> {
        let spec = self.cfg.train.with_steps(steps);
        let (m, _) = compose(&self.backbone, &[&stage.math, &stage.code], mixture, &spec, variant)?;
        Ok(m)
    }

    pub fn uninitialized(&self, n: usize, mixture: &DomainCorpus, steps: usize) -> Result<ModeModel<T>> {
        let spec = self.cfg.train.with_steps(steps);
        let (m, _) = compose(&self.backbone, &[], mixture, &spec, Variant::Uninitialized(n))?;
        Ok(m)
    }

    pub fn full_ft(&self, data: &DomainCorpus) -> Result<ModeModel<T>> {
        Ok(full_finetune(&self.backbone, data, &self.cfg.train)?.0)
    }

    pub fn lora(&self, lora: &LoraConfig, data: &DomainCorpus) -> Result<ModeModel<T>> {
        Ok(train_lora(&self.backbone, lora, data, &self.cfg.train)?.0)
    }

    /// Runs every method of the comparison table on the math+code mixture.
    pub fn table1(&self, stage: &StageOne<T>) -> Result<Table1> {
        let mix = &self.corpora.mixture;
        let total = self.cfg.train.steps;
        let s2 = self.cfg.stage2_steps();
        let models: Vec<(&str, ModeModel<T>)> = vec![
            ("Full-FT", self.full_ft(mix)?),
            ("LoRA", self.lora(&self.cfg.lora, mix)?),
            ("MoDE 1xUninitialized", self.uninitialized(1, mix, total)?),
            ("MoDE 2xUninitialized", self.uninitialized(2, mix, total)?),
            ("MoDE 2xFrozen", self.compose_pair(stage, Variant::Frozen, mix, s2)?),
            ("MoDE 2xExperts", self.compose_pair(stage, Variant::Standard, mix, s2)?),
        ];
        let rows = models.iter().map(|(label, m)| self.evaluate(label, m)).collect::<Result<_>>()?;
        Ok(Table1 { backbone: self.evaluate("Backbone", &self.backbone)?, rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Points are expert layers per block; LoRA gets the closest rank with
    /// at most the same trainable parameter count.
    Parameters,
    /// Points are training-set sizes at a fixed step count.
    Examples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub point: usize,
    pub mode_params: usize,
    pub mode_accuracy: f64,
    pub lora_rank: usize,
    pub lora_params: usize,
    pub lora_accuracy: f64,
}

/// Trainable parameters of LoRA at `rank` on the configured targets.
fn lora_params_at<T: Float>(lab: &Lab<T>, rank: usize) -> Result<usize> {
    let mut probe = ModeModel::<T>::new(lab.cfg.model.with_experts(0))?;
    crate::model::attach_lora(&mut probe, &LoraConfig { rank, ..lab.cfg.lora.clone() })?;
    Ok(probe.trainable_numel())
}

impl<T: Float> Lab<T> {
    /// MoDE (one expert) against LoRA on the code domain along `axis`.
    pub fn sweep_scaling(&self, axis: SweepAxis, points: &[usize]) -> Result<Vec<SweepRow>> {
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("sweep points must be strictly ascending"));
        }
        let code_test = [Domain::Code];
        let steps = self.cfg.train.steps;
        let mut rows = Vec::new();
        for &p in points {
            let (layers, data) = match axis {
                SweepAxis::Parameters => (p, self.corpora.code.clone()),
                SweepAxis::Examples => (self.cfg.model.expert_layers_per_block, self.corpora.code.take(p)),
            };
            if data.is_empty() || layers == 0 {
                return Err(Error::config(format!("sweep point {p} is empty")));
            }
            let cfg = self.expert_config(layers, self.cfg.model.n_blocks);
            let mode = self.expert_with(Domain::Code, &cfg, &data, steps)?;
            let mode_params = mode.trainable_numel();
            let rank = match axis {
                SweepAxis::Examples => self.cfg.lora.rank,
                SweepAxis::Parameters => {
                    let per_rank = lora_params_at(self, 1)?;
                    (mode_params / per_rank).max(1)
                }
            };
            let lora = self.lora(&LoraConfig { rank, ..self.cfg.lora.clone() }, &data)?;
            rows.push(SweepRow {
                axis,
                point: p,
                mode_params,
                mode_accuracy: self.evaluate_on("mode", &mode, &code_test)?.average,
                lora_rank: rank,
                lora_params: lora.trainable_numel(),
                lora_accuracy: self.evaluate_on("lora", &lora, &code_test)?.average,
            });
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub blocks: usize,
    pub layers: usize,
    pub code: f64,
    pub english: f64,
    pub average: f64,
    pub trainable_params: usize,
}

impl<T: Float> Lab<T> {
    /// One code expert per (blocks, layers-per-block) point.
    pub fn ablate_mode_configs(&self, blocks: &[usize], layers: &[usize]) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        for &b in blocks {
            for &l in layers {
                let cfg = self.expert_config(l, b);
                cfg.validate()?;
                let m = self.expert_with(Domain::Code, &cfg, &self.corpora.code, self.cfg.stage1_steps())?;
                let r = self.evaluate_on("ablation", &m, &[Domain::Code, Domain::English])?;
                rows.push(AblationRow {
                    blocks: b,
                    layers: l,
                    code: r.accuracy(Domain::Code).unwrap_or(0.0),
                    english: r.accuracy(Domain::English).unwrap_or(0.0),
                    average: r.average,
                    trainable_params: m.trainable_numel(),
                });
            }
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAblationRow {
    pub rank: usize,
    pub ffn: bool,
    pub embeddings: bool,
    pub code: f64,
    pub english: f64,
    pub average: f64,
    pub trainable_params: usize,
    pub best: bool,
}

impl<T: Float> Lab<T> {
    /// LoRA trained on code for each rank and placement; the row with the
    /// highest average is flagged.
    pub fn lora_ablation(&self, ranks: &[usize], placements: &[(bool, bool)]) -> Result<Vec<LoraAblationRow>> {
        let mut rows = Vec::new();
        for &(ffn, emb) in placements {
            for &rank in ranks {
                let cfg = LoraConfig { rank, apply_to_ffn: ffn, apply_to_embeddings: emb, ..self.cfg.lora.clone() };
                let m = self.lora(&cfg, &self.corpora.code)?;
                let r = self.evaluate_on("lora", &m, &[Domain::Code, Domain::English])?;
                rows.push(LoraAblationRow {
                    rank,
                    ffn,
                    embeddings: emb,
                    code: r.accuracy(Domain::Code).unwrap_or(0.0),
                    english: r.accuracy(Domain::English).unwrap_or(0.0),
                    average: r.average,
                    trainable_params: m.trainable_numel(),
                    best: false,
                });
            }
        }
        if let Some(best) = (0..rows.len()).max_by(|&a, &b| rows[a].average.total_cmp(&rows[b].average).then(b.cmp(&a))) {
            rows[best].best = true;
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRow {
    pub variant: String,
    pub budget: usize,
    pub math: f64,
    pub code: f64,
    pub english: f64,
    pub average: f64,
}

impl<T: Float> Lab<T> {
    /// Stage 2 under each variant with only `budget` mixture sequences.
    /// A zero budget evaluates the composed model without training.
    pub fn mixture_data_efficiency(&self, stage: &StageOne<T>, budgets: &[usize]) -> Result<Vec<MixtureRow>> {
        let mut rows = Vec::new();
        for &budget in budgets {
            if budget > self.corpora.mixture.len() {
                return Err(Error::config(format!("budget {budget} exceeds the mixture of {}", self.corpora.mixture.len())));
            }
            let data = self.corpora.mixture.take(budget.max(1));
            let steps = if budget == 0 { 0 } else { self.cfg.stage2_steps() };
            for variant in [Variant::Standard, Variant::Frozen, Variant::Uninitialized(1)] {
                let m = match variant {
                    Variant::Uninitialized(n) => self.uninitialized(n, &data, steps)?,
                    v => self.compose_pair(stage, v, &data, steps)?,
                };
                let r = self.evaluate(&variant.label(), &m)?;
                rows.push(MixtureRow {
                    variant: variant.label(),
                    budget,
                    math: r.accuracy(Domain::Math).unwrap_or(0.0),
                    code: r.accuracy(Domain::Code).unwrap_or(0.0),
                    english: r.accuracy(Domain::English).unwrap_or(0.0),
                    average: r.average,
                });
            }
        }
        Ok(rows)
    }
}
