//! Configuration-driven benchmark harness: builds the task matrix (every
//! ordered domain pair times every method), trains each task over its seeds,
//! evaluates target accuracy per epoch, and emits reports, run logs,
//! checkpoints, and embedding dumps.
//!
//! Everything an output file contains is a pure function of the resolved
//! configuration; wall-clock time is tracked but never written, so repeated
//! runs produce byte-identical artifacts.

use crate::algorithms::{
    r_schedule, safe_training_tick, train_step, AlgorithmConfig, OptimSpec, SafeTrainingState,
    StepRecord, TrainerState,
};
use crate::datagen::{
    load_csv, make_shift_pair, sample_balanced_batch, sample_balanced_batch_revealed, Dataset,
    ShiftSpec,
};
use crate::error::{Error, Result};
use crate::models::{default_specs, init_bundle, Checkpoint, ModelBundle, RngCapture, CHECKPOINT_VERSION};
use crate::ndgraph::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

/// Where a named domain's data comes from: a synthetic generator spec or a
/// CSV file on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<ShiftSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: String,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    pub class_count: usize,
}

fn default_label_column() -> String {
    "label".to_string()
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("domain name must be nonempty".into()));
        }
        match (&self.synth, &self.csv) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::Config(format!(
                "domain '{}' needs exactly one of `synth` or `csv`",
                self.name
            ))),
        }
    }

    /// Materializes the domain's dataset. A synthetic domain is the
    /// transformed fresh draw of its generator spec (the pair's target side),
    /// re-tagged with the domain name.
    pub fn materialize(&self) -> Result<Dataset> {
        self.validate()?;
        let mut data = if let Some(spec) = &self.synth {
            make_shift_pair(spec)?.1
        } else {
            let csv = self.csv.as_ref().expect("validated");
            load_csv(&csv.path, Some(&csv.label_column), csv.class_count)?
        };
        data.domain_tag = self.name.clone();
        Ok(data)
    }
}

/// One benchmark method: which algorithm, and optionally a trainer override
/// (otherwise the method's documented default optimizer applies).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmEntry {
    pub algorithm: AlgorithmConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optim: Option<OptimSpec>,
}

/// Method-specific optimizer defaults.
pub fn default_optim_for(cfg: &AlgorithmConfig) -> OptimSpec {
    let mut optim = OptimSpec::default();
    match cfg {
        AlgorithmConfig::SourceOnly | AlgorithmConfig::Dan { .. } | AlgorithmConfig::Dsan { .. } => {
            optim.lr0 = 1e-2;
        }
        AlgorithmConfig::Coral { .. } => optim.lr0 = 3e-3,
        AlgorithmConfig::Dann { .. } => {
            optim.lr0 = 1e-2;
            optim.weight_decay = 1e-3;
        }
        AlgorithmConfig::Bnm { .. } | AlgorithmConfig::Ssrt { .. } => optim.lr0 = 1e-3,
    }
    optim
}

/// Shared training protocol: seeds, schedule lengths, batch size, and the
/// fraction of target labels revealed for the supervised-fraction protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSpec {
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch: usize,
    pub target_labeled_fraction: f64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec {
            seeds: vec![0, 1, 2],
            epochs: 12,
            iterations_per_epoch: 50,
            batch: 32,
            target_labeled_fraction: 0.0,
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.iterations_per_epoch == 0 {
            return Err(Error::Config("iterations_per_epoch must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.target_labeled_fraction) {
            return Err(Error::Config(format!(
                "target_labeled_fraction must lie in [0, 1], got {}",
                self.target_labeled_fraction
            )));
        }
        Ok(())
    }
}

/// A full benchmark configuration, deserialized from one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub domains: Vec<DomainSpec>,
    pub algorithms: Vec<AlgorithmEntry>,
    #[serde(default)]
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub dump_embeddings: bool,
    #[serde(default)]
    pub save_checkpoints: bool,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Config(format!(
                "a benchmark needs at least 2 domains, got {}",
                self.domains.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for d in &self.domains {
            d.validate()?;
            if !seen.insert(&d.name) {
                return Err(Error::Config(format!("duplicate domain name '{}'", d.name)));
            }
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("algorithms must be nonempty".into()));
        }
        for a in &self.algorithms {
            a.algorithm.validate()?;
            if let Some(o) = &a.optim {
                o.validate()?;
            }
        }
        self.protocol.validate()
    }

    /// The normalized configuration that is echoed into the run directory:
    /// the baseline method is injected when missing (the report's delta
    /// column is relative to it) and every optimizer is made explicit.
    pub fn resolved(&self) -> Result<BenchConfig> {
        self.validate()?;
        let mut out = self.clone();
        if !out
            .algorithms
            .iter()
            .any(|a| matches!(a.algorithm, AlgorithmConfig::SourceOnly))
        {
            out.algorithms.insert(
                0,
                AlgorithmEntry {
                    algorithm: AlgorithmConfig::SourceOnly,
                    optim: None,
                },
            );
        }
        for a in &mut out.algorithms {
            if a.optim.is_none() {
                a.optim = Some(default_optim_for(&a.algorithm));
            }
        }
        Ok(out)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<BenchConfig> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let cfg: BenchConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One fully-resolved unit of work: train `algorithm` on `source -> target`
/// over every seed.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub source_name: String,
    pub target_name: String,
    pub source: Arc<Dataset>,
    pub target: Arc<Dataset>,
    pub algorithm: AlgorithmConfig,
    pub optim: OptimSpec,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch: usize,
    pub target_labeled_fraction: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.source_name == self.target_name {
            return Err(Error::Config(format!(
                "task source and target must differ, both are '{}'",
                self.source_name
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("task seeds must be nonempty".into()));
        }
        if self.source.dim() != self.target.dim() {
            return Err(Error::Config(format!(
                "domain dims differ: {} is {}-d, {} is {}-d",
                self.source_name,
                self.source.dim(),
                self.target_name,
                self.target.dim()
            )));
        }
        if self.source.class_count != self.target.class_count {
            return Err(Error::Config(format!(
                "domain class counts differ: {} has {}, {} has {}",
                self.source_name, self.source.class_count, self.target_name, self.target.class_count
            )));
        }
        self.algorithm.validate()?;
        self.optim.validate()
    }

    /// Unique label used in file names: `<algorithm>_<source>_to_<target>`.
    pub fn label(&self) -> String {
        format!(
            "{}_{}_to_{}",
            self.algorithm.name(),
            self.source_name,
            self.target_name
        )
    }
}

/// One seed's training outcome. `accuracies[0]` is the untrained evaluation;
/// one more entry follows per completed epoch.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub accuracies: Vec<f64>,
    pub best: f64,
    pub final_acc: f64,
    /// Set when a training error aborted this seed (other seeds continue).
    pub error: Option<String>,
    pub failed_step: Option<u64>,
    pub records: Vec<StepRecord>,
    pub bundle: ModelBundle,
    pub data_rng: RngCapture,
    pub trainer_rng: RngCapture,
    pub step: u64,
}

/// All seeds of one task, plus wall time (reported, never written to files).
#[derive(Clone, Debug)]
pub struct TaskResult {
    pub algorithm: String,
    pub task: String,
    pub source_name: String,
    pub target_name: String,
    pub seeds: Vec<SeedOutcome>,
    pub wall_seconds: f64,
}

impl TaskResult {
    fn mean_over_ok(&self, f: impl Fn(&SeedOutcome) -> f64) -> f64 {
        let ok: Vec<f64> = self
            .seeds
            .iter()
            .filter(|s| s.error.is_none())
            .map(&f)
            .collect();
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        }
    }

    pub fn mean_best(&self) -> f64 {
        self.mean_over_ok(|s| s.best)
    }

    pub fn mean_final(&self) -> f64 {
        self.mean_over_ok(|s| s.final_acc)
    }
}

/// Fraction of target samples whose predicted class matches the true label.
pub fn evaluate(bundle: &ModelBundle, d: &Dataset) -> Result<f64> {
    let labels = d.labels_required()?;
    let logits = bundle.logits_value(&d.features)?;
    let preds = logits.argmax_rows();
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / d.len() as f64)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn run_seed(t: &TaskSpec, seed: u64) -> Result<SeedOutcome> {
    // Independent deterministic streams per (task, seed): model init, batch
    // sampling, and the trainer's own draws never alias.
    let base = seed ^ fnv1a64(t.label().as_bytes());
    let model_seed = splitmix64(base ^ 0x01);
    let mut data_rng = ChaCha8Rng::seed_from_u64(splitmix64(base ^ 0x02));
    let trainer_rng = ChaCha8Rng::seed_from_u64(splitmix64(base ^ 0x03));

    let (ef, h, d) = default_specs(t.source.dim(), t.source.class_count);
    let bundle = init_bundle(&ef, &h, &d, model_seed)?;
    let total_steps = (t.epochs * t.iterations_per_epoch).max(1) as u64;
    let mut trainer = TrainerState::new(bundle, t.optim, total_steps, trainer_rng)?;

    let revealed: Option<Vec<bool>> = if t.target_labeled_fraction > 0.0 {
        t.target.labels_required()?;
        let n = t.target.len();
        let k = ((t.target_labeled_fraction * n as f64).floor() as usize).min(n);
        let mut mask = vec![false; n];
        for i in rand::seq::index::sample(&mut data_rng, n, k) {
            mask[i] = true;
        }
        Some(mask)
    } else {
        None
    };

    let mut safe = match &t.algorithm {
        AlgorithmConfig::Ssrt { t: interval, delta, .. } => {
            Some(SafeTrainingState::new(&trainer, *interval, *interval, *delta)?)
        }
        _ => None,
    };

    let mut accuracies = vec![evaluate(&trainer.bundle, &t.target)?];
    let mut records = Vec::new();
    let mut error = None;
    let mut failed_step = None;

    'training: for epoch in 0..t.epochs {
        trainer.epoch = epoch as u64;
        for _ in 0..t.iterations_per_epoch {
            let batch = match &revealed {
                Some(mask) => {
                    sample_balanced_batch_revealed(&t.source, &t.target, mask, t.batch, &mut data_rng)?
                }
                None => sample_balanced_batch(&t.source, &t.target, t.batch, &mut data_rng)?,
            };
            let r = safe
                .as_ref()
                .map(|s| r_schedule(s, trainer.step))
                .unwrap_or(1.0);
            match train_step(&t.algorithm, &mut trainer, &batch, r) {
                Ok(rec) => {
                    if let Some(s) = safe.as_mut() {
                        safe_training_tick(s, &mut trainer, rec.diversity);
                    }
                    records.push(rec);
                }
                Err(e) => {
                    failed_step = Some(trainer.step);
                    error = Some(e.to_string());
                    break 'training;
                }
            }
        }
        accuracies.push(evaluate(&trainer.bundle, &t.target)?);
    }

    let best = accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let final_acc = *accuracies.last().expect("at least the untrained eval");
    Ok(SeedOutcome {
        seed,
        accuracies,
        best,
        final_acc,
        error,
        failed_step,
        records,
        data_rng: RngCapture::of(&data_rng),
        trainer_rng: RngCapture::of(&trainer.rng),
        step: trainer.step,
        bundle: trainer.bundle,
    })
}

/// Trains one task across all its seeds. A numeric failure marks that seed
/// (with the offending step) and the remaining seeds still run.
pub fn run_task(t: &TaskSpec) -> Result<TaskResult> {
    t.validate()?;
    let started = Instant::now();
    let mut seeds = Vec::with_capacity(t.seeds.len());
    for &seed in &t.seeds {
        seeds.push(run_seed(t, seed)?);
    }
    Ok(TaskResult {
        algorithm: t.algorithm.name().to_string(),
        task: format!("{}_to_{}", t.source_name, t.target_name),
        source_name: t.source_name.clone(),
        target_name: t.target_name.clone(),
        seeds,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Materializes every domain once, keyed by name.
pub fn materialize_domains(domains: &[DomainSpec]) -> Result<BTreeMap<String, Arc<Dataset>>> {
    let mut out = BTreeMap::new();
    for d in domains {
        out.insert(d.name.clone(), Arc::new(d.materialize()?));
    }
    Ok(out)
}

/// Expands a resolved config into the task matrix: for each method (baseline
/// first), one task per ordered domain pair.
pub fn plan_tasks(
    cfg: &BenchConfig,
    datasets: &BTreeMap<String, Arc<Dataset>>,
) -> Result<Vec<TaskSpec>> {
    let cfg = cfg.resolved()?;
    let mut tasks = Vec::new();
    for entry in &cfg.algorithms {
        let optim = entry
            .optim
            .unwrap_or_else(|| default_optim_for(&entry.algorithm));
        for src in &cfg.domains {
            for tgt in &cfg.domains {
                if src.name == tgt.name {
                    continue;
                }
                let task = TaskSpec {
                    source_name: src.name.clone(),
                    target_name: tgt.name.clone(),
                    source: Arc::clone(&datasets[&src.name]),
                    target: Arc::clone(&datasets[&tgt.name]),
                    algorithm: entry.algorithm.clone(),
                    optim,
                    seeds: cfg.protocol.seeds.clone(),
                    epochs: cfg.protocol.epochs,
                    iterations_per_epoch: cfg.protocol.iterations_per_epoch,
                    batch: cfg.protocol.batch,
                    target_labeled_fraction: cfg.protocol.target_labeled_fraction,
                };
                task.validate()?;
                tasks.push(task);
            }
        }
    }
    Ok(tasks)
}

/// Runs tasks on a fixed-size worker pool. Results come back in task order,
/// so worker count never changes any output.
pub fn run_all(tasks: &[TaskSpec], workers: usize) -> Result<Vec<TaskResult>> {
    if tasks.is_empty() {
        return Ok(Vec::new());
    }
    let workers = workers.clamp(1, tasks.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<TaskResult>>>> =
        (0..tasks.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tasks.len() {
                    break;
                }
                let result = run_task(&tasks[i]);
                *slots[i].lock().expect("result slot") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot").expect("worker filled every slot"))
        .collect()
}

/// One report row; accuracies are fractions in [0, 1], `delta` is this row's
/// mean best minus the baseline's mean best on the same task.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub algorithm: String,
    pub task: String,
    pub mean_best: f64,
    pub delta: f64,
    pub per_seed_best: Vec<Option<f64>>,
    pub mean_final: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
}

const BASELINE: &str = "source_only";

/// Aggregates task results into the report table.
pub fn build_table(results: &[TaskResult], seeds: &[u64]) -> Result<ReportTable> {
    let mut baseline: BTreeMap<&str, f64> = BTreeMap::new();
    for r in results {
        if r.algorithm == BASELINE {
            baseline.insert(&r.task, r.mean_best());
        }
    }
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        let base = *baseline.get(r.task.as_str()).ok_or_else(|| {
            Error::Contract(format!("no {BASELINE} baseline was run for task {}", r.task))
        })?;
        let mean_best = r.mean_best();
        rows.push(ReportRow {
            algorithm: r.algorithm.clone(),
            task: r.task.clone(),
            mean_best,
            delta: mean_best - base,
            per_seed_best: r
                .seeds
                .iter()
                .map(|s| if s.error.is_none() { Some(s.best) } else { None })
                .collect(),
            mean_final: r.mean_final(),
        });
    }
    Ok(ReportTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// Renders the table. CSV keeps full precision (shortest round-trip floats);
/// markdown shows percentages with one decimal and the baseline delta in the
/// paper-table `(+x.x)` / `(-x.x)` style.
pub fn render_report(table: &ReportTable, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("algorithm,task,mean_best,delta");
            for s in &table.seeds {
                out.push_str(&format!(",best_seed_{s}"));
            }
            out.push_str(",mean_final\n");
            for row in &table.rows {
                out.push_str(&format!(
                    "{},{},{},{}",
                    row.algorithm, row.task, row.mean_best, row.delta
                ));
                for v in &row.per_seed_best {
                    match v {
                        Some(v) => out.push_str(&format!(",{v}")),
                        None => out.push(','),
                    }
                }
                out.push_str(&format!(",{}\n", row.mean_final));
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| algorithm | task | best acc % | delta |");
            for s in &table.seeds {
                out.push_str(&format!(" seed {s} |"));
            }
            out.push_str(" final % |\n");
            out.push_str("|---|---|---|---|");
            for _ in &table.seeds {
                out.push_str("---|");
            }
            out.push_str("---|\n");
            for row in &table.rows {
                out.push_str(&format!(
                    "| {} | {} | {:.1} | ({:+.1}) |",
                    row.algorithm,
                    row.task,
                    100.0 * row.mean_best,
                    100.0 * row.delta
                ));
                for v in &row.per_seed_best {
                    match v {
                        Some(v) => out.push_str(&format!(" {:.1} |", 100.0 * v)),
                        None => out.push_str(" failed |"),
                    }
                }
                out.push_str(&format!(" {:.1} |\n", 100.0 * row.mean_final));
            }
        }
    }
    out
}

/// Writes the rendered report to `path`.
pub fn emit_report(table: &ReportTable, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), render_report(table, format))?;
    Ok(())
}

/// Parses a `report.csv` back into a table (round-trip oracle).
pub fn parse_report_csv(text: &str) -> Result<ReportTable> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty report".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5 || cols[0] != "algorithm" || *cols.last().unwrap() != "mean_final" {
        return Err(Error::Parse(format!("unexpected report header: {header}")));
    }
    let seeds: Vec<u64> = cols[4..cols.len() - 1]
        .iter()
        .map(|c| {
            c.strip_prefix("best_seed_")
                .ok_or_else(|| Error::Parse(format!("unexpected column: {c}")))?
                .parse::<u64>()
                .map_err(|e| Error::Parse(format!("bad seed column {c}: {e}")))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse(format!("ragged report row: {line}")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad float '{s}': {e}")))
        };
        rows.push(ReportRow {
            algorithm: fields[0].to_string(),
            task: fields[1].to_string(),
            mean_best: parse(fields[2])?,
            delta: parse(fields[3])?,
            per_seed_best: fields[4..fields.len() - 1]
                .iter()
                .map(|s| {
                    if s.is_empty() {
                        Ok(None)
                    } else {
                        parse(s).map(Some)
                    }
                })
                .collect::<Result<_>>()?,
            mean_final: parse(fields[fields.len() - 1])?,
        });
    }
    Ok(ReportTable { seeds, rows })
}

/// Writes one task-seed run log: one row per training step.
pub fn write_runlog(records: &[StepRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("step,epoch,lr,total,ce,adapt,sr,r,diversity\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step, r.epoch, r.lr, r.total, r.ce, r.adapt, r.sr, r.r, r.diversity
        ));
    }
    std::fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Projects pooled extractor features to two principal components and writes
/// `domain_tag,true_label,pc1,pc2` rows for every source and target sample.
pub fn dump_embeddings(
    bundle: &ModelBundle,
    source: &Dataset,
    target: &Dataset,
    path: impl AsRef<Path>,
) -> Result<()> {
    let fs = bundle.features_value(&source.features)?;
    let ft = bundle.features_value(&target.features)?;
    let pooled = Tensor::vstack(&[&fs, &ft])?;
    let proj = crate::datagen::pca2(&pooled)?;
    let mut out = String::from("domain_tag,true_label,pc1,pc2\n");
    let label_of = |d: &Dataset, i: usize| -> String {
        d.labels
            .as_ref()
            .map(|l| l[i].to_string())
            .unwrap_or_default()
    };
    for i in 0..source.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            source.domain_tag,
            label_of(source, i),
            proj[(i, 0)],
            proj[(i, 1)]
        ));
    }
    for i in 0..target.len() {
        let r = source.len() + i;
        out.push_str(&format!(
            "{},{},{},{}\n",
            target.domain_tag,
            label_of(target, i),
            proj[(r, 0)],
            proj[(r, 1)]
        ));
    }
    std::fs::write(path.as_ref(), out)?;
    Ok(())
}

fn layer_spec_of(mlp: &crate::models::Mlp) -> Result<crate::models::LayerSpec> {
    let mut widths = vec![mlp.layers[0].w.rows()];
    widths.extend(mlp.layers.iter().map(|l| l.w.cols()));
    crate::models::LayerSpec::new(widths)
}

fn checkpoint_of(outcome: &SeedOutcome) -> Result<Checkpoint> {
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        ef_spec: layer_spec_of(&outcome.bundle.ef_params)?,
        h_spec: layer_spec_of(&outcome.bundle.h_params)?,
        d_spec: layer_spec_of(&outcome.bundle.d_params)?,
        bundle: outcome.bundle.clone(),
        data_rng: outcome.data_rng.clone(),
        trainer_rng: outcome.trainer_rng.clone(),
        step: outcome.step,
    })
}

/// Runs a whole benchmark config and writes every artifact into `out_dir`:
/// `resolved_config.json`, per-task-seed run logs, `report.csv`, `report.md`,
/// plus optional checkpoints and embedding dumps.
pub fn execute_run(cfg: &BenchConfig, out_dir: impl AsRef<Path>, workers: usize) -> Result<ReportTable> {
    let out_dir = out_dir.as_ref();
    let resolved = cfg.resolved()?;
    std::fs::create_dir_all(out_dir)?;
    let mut config_json = serde_json::to_string_pretty(&resolved)?;
    config_json.push('\n');
    std::fs::write(out_dir.join("resolved_config.json"), config_json)?;

    let datasets = materialize_domains(&resolved.domains)?;
    let tasks = plan_tasks(&resolved, &datasets)?;
    let results = run_all(&tasks, workers)?;

    for (task, result) in tasks.iter().zip(&results) {
        let label = task.label();
        for outcome in &result.seeds {
            write_runlog(
                &outcome.records,
                out_dir.join(format!("runlog_{label}_{}.csv", outcome.seed)),
            )?;
            if resolved.save_checkpoints {
                checkpoint_of(outcome)?
                    .save(out_dir.join(format!("checkpoint_{label}_{}.json", outcome.seed)))?;
            }
        }
        if resolved.dump_embeddings {
            if let Some(first_ok) = result.seeds.iter().find(|s| s.error.is_none()) {
                dump_embeddings(
                    &first_ok.bundle,
                    &task.source,
                    &task.target,
                    out_dir.join(format!("embeddings_{label}.csv")),
                )?;
            }
        }
    }

    let table = build_table(&results, &resolved.protocol.seeds)?;
    emit_report(&table, ReportFormat::Csv, out_dir.join("report.csv"))?;
    emit_report(&table, ReportFormat::Markdown, out_dir.join("report.md"))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::BaseShape;
    use crate::models::{Layer, Mlp};

    fn moons_domain(name: &str, rotation: f64, seed: u64, n: usize) -> DomainSpec {
        DomainSpec {
            name: name.to_string(),
            synth: Some(ShiftSpec {
                base: BaseShape::TwoMoons,
                n_per_domain: n,
                rotation_deg: rotation,
                translation: vec![],
                noise_sigma: 0.0,
                class_count: 2,
                seed,
            }),
            csv: None,
        }
    }

    fn tiny_config(epochs: usize) -> BenchConfig {
        BenchConfig {
            domains: vec![moons_domain("a", 0.0, 1, 60), moons_domain("b", 30.0, 2, 60)],
            algorithms: vec![AlgorithmEntry {
                algorithm: AlgorithmConfig::SourceOnly,
                optim: None,
            }],
            protocol: ProtocolSpec {
                seeds: vec![0, 1],
                epochs,
                iterations_per_epoch: 5,
                batch: 8,
                target_labeled_fraction: 0.0,
            },
            dump_embeddings: false,
            save_checkpoints: false,
        }
    }

    /// A bundle whose classifier copies its 2-d input straight to the logits,
    /// so argmax(logits) = argmax(features).
    fn passthrough_bundle() -> ModelBundle {
        let identity = |n: usize| Mlp {
            layers: vec![Layer {
                w: Tensor::identity(n),
                b: Tensor::zeros(1, n),
            }],
        };
        ModelBundle {
            ef_params: identity(2),
            h_params: identity(2),
            d_params: Mlp {
                layers: vec![Layer {
                    w: Tensor::zeros(2, 1),
                    b: Tensor::zeros(1, 1),
                }],
            },
            feature_dim: 2,
        }
    }

    #[test]
    fn evaluate_perfect_and_adversarial() {
        let bundle = passthrough_bundle();
        let features =
            Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![5.0, 1.0], vec![0.1, 0.4]])
                .unwrap();
        let labels = vec![0, 1, 0, 1];
        let d = Dataset::new(features.clone(), Some(labels.clone()), "t", 2).unwrap();
        assert_eq!(evaluate(&bundle, &d).unwrap(), 1.0);

        let flipped: Vec<usize> = labels.iter().map(|&y| 1 - y).collect();
        let d = Dataset::new(features, Some(flipped), "t", 2).unwrap();
        assert_eq!(evaluate(&bundle, &d).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_rejects_unlabeled_data() {
        let bundle = passthrough_bundle();
        let d = Dataset::new(Tensor::zeros(3, 2), None, "t", 2).unwrap();
        assert!(evaluate(&bundle, &d).is_err());
    }

    #[test]
    fn evaluate_untrained_model_near_chance() {
        // Labels carry no information about the features (alternating labels
        // on iid gaussian rows), so any fixed classifier hits each sample
        // with probability 1/2 and N = 10^4 pins the accuracy near chance.
        use rand::Rng;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            rows.push(vec![
                rng.sample::<f64, _>(rand_distr::StandardNormal),
                rng.sample::<f64, _>(rand_distr::StandardNormal),
            ]);
        }
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data = Dataset::new(Tensor::from_rows(&rows).unwrap(), Some(labels), "t", 2).unwrap();
        let (ef, h, d) = default_specs(2, 2);
        for seed in 0..5 {
            let bundle = init_bundle(&ef, &h, &d, seed).unwrap();
            let acc = evaluate(&bundle, &data).unwrap();
            assert!((0.45..=0.55).contains(&acc), "seed {seed}: {acc}");
        }
    }

    #[test]
    fn run_task_is_deterministic_and_tracks_best() {
        let cfg = tiny_config(2);
        let datasets = materialize_domains(&cfg.domains).unwrap();
        let tasks = plan_tasks(&cfg, &datasets).unwrap();
        let a = run_task(&tasks[0]).unwrap();
        let b = run_task(&tasks[0]).unwrap();
        for (sa, sb) in a.seeds.iter().zip(&b.seeds) {
            assert_eq!(sa.accuracies, sb.accuracies);
            assert_eq!(sa.bundle, sb.bundle);
            assert_eq!(sa.accuracies.len(), 3); // untrained + 2 epochs
            let max = sa.accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(sa.best, max);
            assert_eq!(sa.final_acc, *sa.accuracies.last().unwrap());
        }
    }

    #[test]
    fn zero_epochs_evaluates_untrained_only() {
        let cfg = tiny_config(0);
        let datasets = materialize_domains(&cfg.domains).unwrap();
        let tasks = plan_tasks(&cfg, &datasets).unwrap();
        let result = run_task(&tasks[0]).unwrap();
        for s in &result.seeds {
            assert_eq!(s.accuracies.len(), 1);
            assert_eq!(s.best, s.accuracies[0]);
            assert!(s.records.is_empty());
        }
    }

    #[test]
    fn source_only_learns_separable_moons() {
        let cfg = BenchConfig {
            domains: vec![moons_domain("a", 0.0, 11, 200), moons_domain("b", 0.0, 12, 200)],
            algorithms: vec![AlgorithmEntry {
                algorithm: AlgorithmConfig::SourceOnly,
                optim: Some(OptimSpec {
                    lr0: 0.1,
                    ..OptimSpec::default()
                }),
            }],
            protocol: ProtocolSpec {
                seeds: vec![0],
                epochs: 8,
                iterations_per_epoch: 50,
                batch: 32,
                target_labeled_fraction: 0.0,
            },
            ..tiny_config(0)
        };
        let datasets = materialize_domains(&cfg.domains).unwrap();
        let tasks = plan_tasks(&cfg, &datasets).unwrap();
        let result = run_task(&tasks[0]).unwrap();
        assert!(
            result.seeds[0].best >= 0.95,
            "best accuracy {}",
            result.seeds[0].best
        );
    }

    #[test]
    fn matrix_size_matches_ordered_pairs() {
        for (n_domains, want_pairs) in [(2usize, 2usize), (3, 6), (4, 12)] {
            let domains: Vec<DomainSpec> = (0..n_domains)
                .map(|i| moons_domain(&format!("d{i}"), 10.0 * i as f64, i as u64, 40))
                .collect();
            let cfg = BenchConfig {
                domains,
                ..tiny_config(1)
            };
            let datasets = materialize_domains(&cfg.domains).unwrap();
            let tasks = plan_tasks(&cfg, &datasets).unwrap();
            assert_eq!(tasks.len(), want_pairs); // one algorithm
        }
    }

    #[test]
    fn duplicate_domains_rejected() {
        let cfg = BenchConfig {
            domains: vec![moons_domain("a", 0.0, 1, 40), moons_domain("a", 5.0, 2, 40)],
            ..tiny_config(1)
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn baseline_is_injected_and_optims_resolved() {
        let cfg = BenchConfig {
            algorithms: vec![AlgorithmEntry {
                algorithm: AlgorithmConfig::Bnm {
                    lam: crate::algorithms::TradeOff::Constant(1.0),
                },
                optim: None,
            }],
            ..tiny_config(1)
        };
        let resolved = cfg.resolved().unwrap();
        assert_eq!(resolved.algorithms.len(), 2);
        assert!(matches!(
            resolved.algorithms[0].algorithm,
            AlgorithmConfig::SourceOnly
        ));
        let bnm_optim = resolved.algorithms[1].optim.unwrap();
        assert_eq!(bnm_optim.lr0, 1e-3);
        assert_eq!(resolved.algorithms[0].optim.unwrap().lr0, 1e-2);
    }

    #[test]
    fn report_csv_round_trips_and_delta_is_consistent() {
        let cfg = BenchConfig {
            algorithms: vec![
                AlgorithmEntry {
                    algorithm: AlgorithmConfig::SourceOnly,
                    optim: None,
                },
                AlgorithmEntry {
                    algorithm: AlgorithmConfig::Coral {
                        lam: crate::algorithms::TradeOff::Constant(1.0),
                    },
                    optim: None,
                },
            ],
            ..tiny_config(1)
        };
        let datasets = materialize_domains(&cfg.domains).unwrap();
        let tasks = plan_tasks(&cfg, &datasets).unwrap();
        let results = run_all(&tasks, 2).unwrap();
        let table = build_table(&results, &cfg.protocol.seeds).unwrap();

        let mut baseline = BTreeMap::new();
        for row in &table.rows {
            if row.algorithm == "source_only" {
                baseline.insert(row.task.clone(), row.mean_best);
            }
        }
        for row in &table.rows {
            let want = row.mean_best - baseline[&row.task];
            assert!((row.delta - want).abs() < 1e-12);
        }

        let csv = render_report(&table, ReportFormat::Csv);
        let parsed = parse_report_csv(&csv).unwrap();
        assert_eq!(parsed, table);
    }

    #[test]
    fn empty_table_renders_header_only() {
        let table = ReportTable {
            seeds: vec![0, 1],
            rows: vec![],
        };
        let csv = render_report(&table, ReportFormat::Csv);
        assert_eq!(csv, "algorithm,task,mean_best,delta,best_seed_0,best_seed_1,mean_final\n");
        let md = render_report(&table, ReportFormat::Markdown);
        assert_eq!(md.lines().count(), 2);
    }

    #[test]
    fn markdown_delta_uses_signed_parentheses() {
        let table = ReportTable {
            seeds: vec![0],
            rows: vec![
                ReportRow {
                    algorithm: "coral".into(),
                    task: "a_to_b".into(),
                    mean_best: 0.873,
                    delta: 0.052,
                    per_seed_best: vec![Some(0.873)],
                    mean_final: 0.85,
                },
                ReportRow {
                    algorithm: "bnm".into(),
                    task: "a_to_b".into(),
                    mean_best: 0.79,
                    delta: -0.031,
                    per_seed_best: vec![None],
                    mean_final: 0.77,
                },
            ],
        };
        let md = render_report(&table, ReportFormat::Markdown);
        assert!(md.contains("87.3 | (+5.2)"), "{md}");
        assert!(md.contains("79.0 | (-3.1)"), "{md}");
        assert!(md.contains("failed"), "{md}");
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let cfg = tiny_config(1);
        let datasets = materialize_domains(&cfg.domains).unwrap();
        let tasks = plan_tasks(&cfg, &datasets).unwrap();
        let serial = build_table(&run_all(&tasks, 1).unwrap(), &cfg.protocol.seeds).unwrap();
        let parallel = build_table(&run_all(&tasks, 4).unwrap(), &cfg.protocol.seeds).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn embeddings_cover_every_sample_and_separate_blobs() {
        let dir = std::env::temp_dir().join("shiftlab_embed_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("emb.csv");

        // Two far-apart blobs through the passthrough extractor: the PC-1
        // separation between domain centroids dwarfs the within-domain spread.
        let n = 40;
        let mut rows_s = Vec::new();
        let mut rows_t = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..n {
            use rand::Rng;
            let jx: f64 = rng.random_range(-0.5..0.5);
            let jy: f64 = rng.random_range(-0.5..0.5);
            rows_s.push(vec![jx - 10.0, jy]);
            rows_t.push(vec![jx + 10.0, jy]);
            let _ = i;
        }
        let source = Dataset::new(
            Tensor::from_rows(&rows_s).unwrap(),
            Some(vec![0; n]),
            "src",
            1,
        )
        .unwrap();
        let target = Dataset::new(
            Tensor::from_rows(&rows_t).unwrap(),
            Some(vec![0; n]),
            "tgt",
            1,
        )
        .unwrap();
        let bundle = passthrough_bundle();
        dump_embeddings(&bundle, &source, &target, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * n);
        assert_eq!(lines[0], "domain_tag,true_label,pc1,pc2");

        let pc1: Vec<f64> = lines[1..]
            .iter()
            .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
            .collect();
        let (src_pc, tgt_pc) = pc1.split_at(n);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let spread = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let centroid_gap = (mean(src_pc) - mean(tgt_pc)).abs();
        assert!(centroid_gap > 4.0 * spread(src_pc).max(spread(tgt_pc)));

        // Same inputs produce identical bytes.
        let path2 = dir.join("emb2.csv");
        dump_embeddings(&bundle, &source, &target, &path2).unwrap();
        assert_eq!(text, std::fs::read_to_string(&path2).unwrap());
    }

    #[test]
    fn execute_run_writes_all_artifacts() {
        let dir = std::env::temp_dir().join("shiftlab_run_test");
        let _ = std::fs::remove_dir_all(&dir);
        let mut cfg = tiny_config(1);
        cfg.dump_embeddings = true;
        cfg.save_checkpoints = true;
        let table = execute_run(&cfg, &dir, 2).unwrap();
        assert_eq!(table.rows.len(), 2);

        for name in ["resolved_config.json", "report.csv", "report.md"] {
            assert!(dir.join(name).is_file(), "{name} missing");
        }
        for task in ["source_only_a_to_b", "source_only_b_to_a"] {
            for seed in [0u64, 1] {
                assert!(dir.join(format!("runlog_{task}_{seed}.csv")).is_file());
                assert!(dir.join(format!("checkpoint_{task}_{seed}.json")).is_file());
            }
            assert!(dir.join(format!("embeddings_{task}.csv")).is_file());
        }

        let runlog = std::fs::read_to_string(dir.join("runlog_source_only_a_to_b_0.csv")).unwrap();
        let mut lines = runlog.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,epoch,lr,total,ce,adapt,sr,r,diversity"
        );
        assert_eq!(lines.count(), 5); // iterations_per_epoch * epochs

        // The resolved config re-parses and is already normalized.
        let echoed: BenchConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join("resolved_config.json")).unwrap())
                .unwrap();
        assert_eq!(echoed, cfg.resolved().unwrap());

        // Checkpoints reload and reproduce the stored parameters.
        let ck = Checkpoint::load(dir.join("checkpoint_source_only_a_to_b_0.json")).unwrap();
        assert_eq!(ck.step, 5);
        assert_eq!(ck.bundle.feature_dim, 32);
    }

    #[test]
    fn task_validation_catches_mismatches() {
        let cfg = tiny_config(1);
        let datasets = materialize_domains(&cfg.domains).unwrap();
        let mut task = plan_tasks(&cfg, &datasets).unwrap().remove(0);
        task.target_name = task.source_name.clone();
        assert!(task.validate().is_err());

        let mut task2 = plan_tasks(&cfg, &datasets).unwrap().remove(0);
        task2.seeds.clear();
        assert!(task2.validate().is_err());
    }

    #[test]
    fn domain_spec_requires_exactly_one_source() {
        let both = DomainSpec {
            name: "x".into(),
            synth: moons_domain("x", 0.0, 1, 10).synth,
            csv: Some(CsvSource {
                path: "nope.csv".into(),
                label_column: "label".into(),
                class_count: 2,
            }),
        };
        assert!(both.validate().is_err());
        let neither = DomainSpec {
            name: "x".into(),
            synth: None,
            csv: None,
        };
        assert!(neither.validate().is_err());
    }

    #[test]
    fn csv_domain_round_trips_through_materialize() {
        let dir = std::env::temp_dir().join("shiftlab_csv_domain");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dom.csv");
        let spec = moons_domain("disk", 15.0, 9, 30);
        let synth = spec.materialize().unwrap();
        crate::datagen::save_csv(&synth, &path).unwrap();

        let from_csv = DomainSpec {
            name: "disk".into(),
            synth: None,
            csv: Some(CsvSource {
                path: path.to_string_lossy().into_owned(),
                label_column: "label".into(),
                class_count: 2,
            }),
        }
        .materialize()
        .unwrap();
        assert_eq!(from_csv.labels, synth.labels);
        assert_eq!(from_csv.features, synth.features);
    }

    #[test]
    fn layer_spec_reconstruction_matches_init() {
        let (ef, h, d) = default_specs(3, 4);
        let bundle = init_bundle(&ef, &h, &d, 7).unwrap();
        assert_eq!(layer_spec_of(&bundle.ef_params).unwrap(), ef);
        assert_eq!(layer_spec_of(&bundle.h_params).unwrap(), h);
        assert_eq!(layer_spec_of(&bundle.d_params).unwrap(), d);
    }
}
