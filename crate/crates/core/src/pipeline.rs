//! Config-driven orchestration: mine → pretrain → regenerate → train →
//! evaluate → compare.
//!
//! Every command reads its upstream artifacts from `<out>/<stage>/`, writes
//! its own outputs next to them and leaves a `config.toml` echo of all
//! effective values (stage seeds included as trailing comments). Feeding the
//! echo back in reproduces the outputs.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::bilevel::{mean_sample_weight, train_dr4sr_plus, BilevelConfig};
use crate::checkpoint;
use crate::corpus::{generate_synthetic, leave_one_out_split, load_dataset, Dataset, ItemId, LoadOptions, SplitDataset, SyntheticSpec};
use crate::error::{io_err, Error, Result};
use crate::evalkit::{evaluate, rank_dump, EvalOptions, MetricReport};
use crate::miner::{build_pretrain_pairs, mine_patterns, read_patterns, write_patterns, MinerConfig};
use crate::personalizer::Personalizer;
use crate::regenerator::{pretrain, regenerate_dataset, PretrainReport, RegeneratorConfig, RegeneratorModel};
use crate::seeds::{stage_seed, Stage};
use crate::target::{train_target, TargetModel, TargetModelConfig, TrainHistory, UnitWeights};

/// Planted-pattern corpus used when no dataset path is given. The generator
/// seed is derived from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub num_users: usize,
    pub num_items: usize,
    pub planted_patterns: Vec<Vec<ItemId>>,
    pub noise_rate: f64,
    pub patterns_per_user: (usize, usize),
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 30,
            planted_patterns: (0..8).map(|p| (1..=3).map(|j| p * 3 + j).collect()).collect(),
            noise_rate: 0.3,
            patterns_per_user: (4, 7),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset file; the synthetic corpus is used when unset.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticData,
    /// Sequences are cut to their most recent `max_len` items before the split.
    pub max_len: usize,
    pub remap: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, synthetic: SyntheticData::default(), max_len: crate::corpus::DEFAULT_MAX_LEN, remap: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegenerateConfig {
    /// Probability of a generative (unrestricted) decoding step.
    pub gamma: f64,
    pub global_dedup: bool,
}

impl Default for RegenerateConfig {
    fn default() -> Self {
        Self { gamma: 0.1, global_dedup: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Train the regenerated variants on `X ∪ X′` instead of `X′` alone.
    pub union: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub miner: MinerConfig,
    pub regenerator: RegeneratorConfig,
    pub regenerate: RegenerateConfig,
    pub target: TargetModelConfig,
    pub bilevel: BilevelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub compare: CompareConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("runs"),
            data: DataConfig::default(),
            miner: MinerConfig::new(10, 2),
            regenerator: RegeneratorConfig::default(),
            regenerate: RegenerateConfig::default(),
            target: TargetModelConfig::default(),
            bilevel: BilevelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            compare: CompareConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// Applies `a.b.c=value` overrides. Values parse as TOML literals and
    /// fall back to plain strings; unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut root = toml::Value::try_from(&self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut node = &mut root;
            for (i, part) in parts.iter().enumerate() {
                let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not a table")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), parse_value(raw.trim()));
                    break;
                }
                node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            }
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.data.path {
            if !p.is_file() {
                return Err(Error::Config(format!("dataset {} does not exist", p.display())));
            }
        }
        self.miner.validate()?;
        self.regenerator.validate()?;
        self.target.validate()?;
        self.bilevel.validate()?;
        if !(0.0..=1.0).contains(&self.regenerate.gamma) {
            return Err(Error::Config(format!("regenerate.gamma = {} outside [0, 1]", self.regenerate.gamma)));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        stage_seed(self.seed, stage)
    }

    fn stage_dir(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.out.join(stage);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    fn echo(&self, dir: &Path) -> Result<()> {
        let mut text = self.to_toml();
        text.push_str("\n# derived stage seeds\n");
        for stage in [Stage::Synthetic, Stage::Pretrain, Stage::Regenerate, Stage::Target, Stage::Personalizer] {
            writeln!(text, "# {stage:?} = {}", self.stage_seed(stage)).unwrap();
        }
        write_file(&dir.join("config.toml"), &text)
    }

    /// The original corpus after truncation.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data.path {
            Some(p) => load_dataset(p, &LoadOptions { max_len: self.data.max_len, remap: self.data.remap }),
            None => {
                let s = &self.data.synthetic;
                let spec = SyntheticSpec {
                    num_users: s.num_users,
                    num_items: s.num_items,
                    planted_patterns: s.planted_patterns.clone(),
                    noise_rate: s.noise_rate,
                    patterns_per_user: s.patterns_per_user,
                    seed: self.stage_seed(Stage::Synthetic),
                };
                Ok(generate_synthetic(&spec)?.truncated(self.data.max_len))
            }
        }
    }

    pub fn split(&self) -> Result<SplitDataset> {
        leave_one_out_split(&self.dataset()?)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn require(path: PathBuf, command: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, command: command.to_string() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Original sequences.
    Baseline,
    /// Regenerated patterns, unweighted.
    Dr4sr,
    /// Regenerated patterns, personalised through the bi-level loop.
    Dr4srPlus,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Dr4sr, Variant::Dr4srPlus];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Dr4sr => "dr4sr",
            Variant::Dr4srPlus => "dr4sr_plus",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected baseline, dr4sr or dr4sr_plus)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MineSummary {
    pub num_patterns: usize,
    pub num_pairs: usize,
}

/// Mines patterns from the training split; writes `patterns.txt` and
/// `summary.txt`.
pub fn cmd_mine(cfg: &PipelineConfig) -> Result<MineSummary> {
    cfg.validate()?;
    let dir = cfg.stage_dir("mine")?;
    cfg.echo(&dir)?;
    let split = cfg.split()?;
    let patterns = mine_patterns(&split.train, &cfg.miner)?;
    let pairs = build_pretrain_pairs(&split.train, &patterns, &cfg.miner)?;
    write_patterns(&patterns, dir.join("patterns.txt"))?;
    let summary = MineSummary { num_patterns: patterns.len(), num_pairs: pairs.len() };
    write_file(&dir.join("summary.txt"), &format!("patterns = {}\npairs = {}\n", summary.num_patterns, summary.num_pairs))?;
    info!("mine: {} patterns, {} pairs", summary.num_patterns, summary.num_pairs);
    Ok(summary)
}

/// Pre-trains the regenerator on pairs rebuilt from the mined patterns;
/// writes `regenerator.json` and `loss_curve.txt`.
pub fn cmd_pretrain(cfg: &PipelineConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    let patterns_path = require(cfg.out.join("mine/patterns.txt"), "mine")?;
    let dir = cfg.stage_dir("pretrain")?;
    cfg.echo(&dir)?;
    let split = cfg.split()?;
    let patterns = read_patterns(patterns_path)?;
    let pairs = build_pretrain_pairs(&split.train, &patterns, &cfg.miner)?;
    let (model, report) = pretrain(&split.train, &pairs, &cfg.regenerator, cfg.stage_seed(Stage::Pretrain))?;
    checkpoint::save(dir.join("regenerator.json"), "regenerator", &model)?;
    let mut curve = String::from("# epoch train_loss holdout_loss\n");
    for (i, t) in report.train_loss.iter().enumerate() {
        let h = report.holdout_loss.get(i).map_or("nan".to_string(), |h| format!("{h:.6}"));
        writeln!(curve, "{} {t:.6} {h}", i + 1).unwrap();
    }
    write_file(&dir.join("loss_curve.txt"), &curve)?;
    write_file(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegenerateStats {
    pub source_sequences: usize,
    pub source_mean_length: f64,
    pub patterns: usize,
    pub mean_length: f64,
}

/// Regenerates the training split; writes `dataset.txt`, `provenance.txt`
/// and `stats.txt`.
pub fn cmd_regenerate(cfg: &PipelineConfig) -> Result<RegenerateStats> {
    cfg.validate()?;
    let ckpt = require(cfg.out.join("pretrain/regenerator.json"), "pretrain")?;
    let dir = cfg.stage_dir("regenerate")?;
    cfg.echo(&dir)?;
    let split = cfg.split()?;
    let model: RegeneratorModel = checkpoint::load(ckpt, "regenerator")?;
    let regen = regenerate_dataset(
        &model,
        &split.train,
        cfg.regenerate.gamma,
        cfg.stage_seed(Stage::Regenerate),
        cfg.regenerate.global_dedup,
    )?;
    regen.write(dir.join("dataset.txt"), dir.join("provenance.txt"))?;
    let stats = RegenerateStats {
        source_sequences: split.train.len(),
        source_mean_length: split.train.num_interactions() as f64 / split.train.len().max(1) as f64,
        patterns: regen.dataset.len(),
        mean_length: regen.mean_length(),
    };
    write_file(
        &dir.join("stats.txt"),
        &format!(
            "source_sequences = {}\nsource_mean_length = {:.4}\npatterns = {}\nmean_length = {:.4}\n",
            stats.source_sequences, stats.source_mean_length, stats.patterns, stats.mean_length
        ),
    )?;
    Ok(stats)
}

/// Training sequences for a variant: `X`, `X′` or `X ∪ X′`.
pub fn training_sequences(cfg: &PipelineConfig, split: &SplitDataset, variant: Variant) -> Result<Vec<Vec<ItemId>>> {
    let original = || split.train.sequences.iter().map(|s| s.items.clone());
    if variant == Variant::Baseline {
        return Ok(original().collect());
    }
    let path = require(cfg.out.join("regenerate/dataset.txt"), "regenerate")?;
    let regen = load_dataset(path, &LoadOptions { max_len: usize::MAX, remap: false })?;
    let mut out: Vec<Vec<ItemId>> = regen.sequences.into_iter().map(|s| s.items).collect();
    if cfg.train.union {
        out.extend(original());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub report: MetricReport,
    pub history: TrainHistory,
    /// Deterministic mean personaliser weight over the training patterns.
    pub mean_weight: Option<f64>,
    pub outer_steps: Option<usize>,
}

/// Trains one variant; writes `model.json`, `history.json` and `report.txt`
/// under `train/<variant>/`, plus `personalizer.json`, `outer_log.jsonl`
/// and `weights.txt` for the personalised variant.
pub fn cmd_train(cfg: &PipelineConfig, variant: Variant) -> Result<TrainSummary> {
    cfg.validate()?;
    let split = cfg.split()?;
    let seqs = training_sequences(cfg, &split, variant)?;
    let dir = cfg.stage_dir(&format!("train/{variant}"))?;
    cfg.echo(&dir)?;
    let n = split.num_items();
    let seed = cfg.stage_seed(Stage::Target);
    let (model, history, mean_weight, outer_steps) = match variant {
        Variant::Baseline | Variant::Dr4sr => {
            let (m, h) = train_target(&seqs, &split.val, n, &cfg.target, &mut UnitWeights, seed)?;
            (m, h, None, None)
        }
        Variant::Dr4srPlus => {
            let pers = Personalizer::new(cfg.target.embed_dim, cfg.bilevel.tau, cfg.stage_seed(Stage::Personalizer))?;
            let out = train_dr4sr_plus(&seqs, &split.val, n, &cfg.target, pers, &cfg.bilevel, seed)?;
            checkpoint::save(dir.join("personalizer.json"), "personalizer", &out.personalizer)?;
            write_file(&dir.join("outer_log.jsonl"), &out.log_text())?;
            write_file(&dir.join("weights.txt"), &out.personalizer.weight_dump(&out.model, &seqs)?)?;
            let mw = mean_sample_weight(&out.personalizer, &out.model, &seqs)?;
            (out.model, out.history, Some(mw), Some(out.log.len()))
        }
    };
    checkpoint::save(dir.join("model.json"), "target", &model)?;
    write_file(&dir.join("history.json"), &serde_json::to_string_pretty(&history)?)?;
    let report = evaluate(&model, &split, &cfg.eval)?;
    report.write(dir.join("report.txt"))?;
    info!("train {variant}: {} epochs, test {:?}", history.epochs_run, report.get("test/ndcg@10"));
    Ok(TrainSummary { variant, report, history, mean_weight, outer_steps })
}

/// Evaluates a target checkpoint (by default the one trained for `variant`);
/// writes `report.txt` and `ranks.txt` under `evaluate/<variant>/`.
pub fn cmd_evaluate(cfg: &PipelineConfig, variant: Variant, checkpoint_path: Option<&Path>) -> Result<MetricReport> {
    cfg.validate()?;
    let path = match checkpoint_path {
        Some(p) => require(p.to_path_buf(), &format!("train --variant {variant}"))?,
        None => require(cfg.out.join(format!("train/{variant}/model.json")), &format!("train --variant {variant}"))?,
    };
    let dir = cfg.stage_dir(&format!("evaluate/{variant}"))?;
    cfg.echo(&dir)?;
    let split = cfg.split()?;
    let model: TargetModel = checkpoint::load(path, "target")?;
    let report = evaluate(&model, &split, &cfg.eval)?;
    report.write(dir.join("report.txt"))?;
    write_file(&dir.join("ranks.txt"), &rank_dump(&model, &split, &cfg.eval)?)?;
    Ok(report)
}

/// Test metrics of every variant over several master seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub runs: BTreeMap<Variant, Vec<TrainSummary>>,
}

impl Comparison {
    pub fn values(&self, variant: Variant, key: &str) -> Vec<f64> {
        self.runs.get(&variant).map_or_else(Vec::new, |rs| rs.iter().filter_map(|r| r.report.get(key)).collect())
    }

    /// Mean and sample standard deviation.
    pub fn mean_std(&self, variant: Variant, key: &str) -> (f64, f64) {
        let v = self.values(variant, key);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        (mean, var.sqrt())
    }

    pub fn table(&self) -> String {
        let keys: Vec<String> = self
            .runs
            .values()
            .flat_map(|rs| rs.iter().flat_map(|r| r.report.metrics.keys().cloned()))
            .filter(|k| k.starts_with("test/"))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut out = format!("# {} seeds: {:?}\n{:<16}", self.seeds.len(), self.seeds, "metric");
        for v in self.runs.keys() {
            write!(out, "{:>20}", v.name()).unwrap();
        }
        out.push('\n');
        for k in &keys {
            write!(out, "{k:<16}").unwrap();
            for &v in self.runs.keys() {
                let (m, s) = self.mean_std(v, k);
                write!(out, "{:>20}", format!("{m:.4} ± {s:.4}")).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Full pipeline for one master seed, in `out` as configured.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<TrainSummary>> {
    cmd_mine(cfg)?;
    cmd_pretrain(cfg)?;
    cmd_regenerate(cfg)?;
    Variant::ALL.into_iter().map(|v| cmd_train(cfg, v)).collect()
}

/// Runs the full pipeline for each seed of `compare.seeds` under
/// `compare/seed-<s>/` and writes `compare/table.txt`.
pub fn cmd_compare(cfg: &PipelineConfig) -> Result<Comparison> {
    cfg.validate()?;
    if cfg.compare.seeds.is_empty() {
        return Err(Error::Config("compare.seeds is empty".into()));
    }
    let dir = cfg.stage_dir("compare")?;
    cfg.echo(&dir)?;
    let mut runs: BTreeMap<Variant, Vec<TrainSummary>> = BTreeMap::new();
    for &seed in &cfg.compare.seeds {
        let sub = PipelineConfig { seed, out: dir.join(format!("seed-{seed}")), ..cfg.clone() };
        for s in run_all(&sub)? {
            runs.entry(s.variant).or_default().push(s);
        }
    }
    let cmp = Comparison { seeds: cfg.compare.seeds.clone(), runs };
    write_file(&dir.join("table.txt"), &cmp.table())?;
    write_file(&dir.join("results.json"), &serde_json::to_string_pretty(&cmp)?)?;
    Ok(cmp)
}
