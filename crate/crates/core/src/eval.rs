//! Evaluation engine behind the CLI: ablation runs, few-shot seeds,
//! hyperparameter sweeps, coverage and verbalizer expansion.
//!
//! Base LM outputs and neighbor sets are computed once per instance at the
//! largest `k` in play and reused across modes and grid points. Instances are
//! processed on a dedicated thread pool and collected by index, so reports do
//! not depend on the worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::index::Retriever;
use crate::knn::RetrievalConfig;
use crate::lm::LmBackend;
use crate::pipeline::{score_chain, score_mode, ContextView, LabelScores, PmiPrior, Resources, ScoringMode};
use crate::tasks::{render_domain_prompt, render_prompt, sample_demos, DemoSet, Instance, Task};
use crate::verbalizer::{build_neighborhood, coverage, SynonymLexicon, WordVectors};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub modes: Vec<ScoringMode>,
    pub retrieval: RetrievalConfig,
    pub pmi_prior: PmiPrior,
    pub shots: usize,
    /// Demonstration seeds; one run per seed when `shots > 0`.
    pub seeds: Vec<u64>,
    #[serde(skip)]
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: vec![ScoringMode::Lm, ScoringMode::LmPmi, ScoringMode::KnnLm, ScoringMode::KnnPrompt],
            retrieval: RetrievalConfig::default(),
            pmi_prior: PmiPrior::default(),
            shots: 0,
            seeds: vec![0],
            workers: 1,
        }
    }
}

/// Borrowed resources for one evaluation.
#[derive(Clone, Copy)]
pub struct EvalInputs<'a> {
    pub task: &'a Task,
    pub vocab: &'a Vocab,
    pub dataset: &'a [Instance],
    pub train: Option<&'a [Instance]>,
    pub backend: &'a dyn LmBackend,
    pub retriever: Option<Retriever<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeAccuracy {
    pub mode: ScoringMode,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModePrediction {
    pub mode: ScoringMode,
    pub label: String,
    pub correct: bool,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstancePrediction {
    pub index: usize,
    pub gold: String,
    pub predictions: Vec<ModePrediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageReport {
    pub instances: usize,
    pub bare_rate: f64,
    pub fuzzy_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: Option<u64>,
    pub accuracy: Vec<ModeAccuracy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageReport>,
    pub predictions: Vec<InstancePrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: ScoringMode,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timings {
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub instances: usize,
    pub datastore_entries: Option<usize>,
    pub config: EvalConfig,
    pub summary: Vec<ModeSummary>,
    pub runs: Vec<RunReport>,
    /// Wall-clock measurements; the only nondeterministic field.
    pub timings: Timings,
}

impl EvalReport {
    pub fn summary_for(&self, mode: ScoringMode) -> Option<&ModeSummary> {
        self.summary.iter().find(|s| s.mode == mode)
    }

    pub fn accuracy(&self, mode: ScoringMode) -> Option<f64> {
        self.summary_for(mode).map(|s| s.mean)
    }
}

/// Per-instance quantities shared by every mode and grid point.
struct Prepared {
    prompt: ContextView,
    chain: Option<LabelScores>,
}

struct PreparedRun {
    seed: Option<u64>,
    domain: Option<ContextView>,
    instances: Vec<Prepared>,
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invariant(format!("thread pool: {e}")))
}

fn resources<'a>(inputs: &EvalInputs<'a>, cfg: &EvalConfig) -> Resources<'a> {
    Resources {
        backend: inputs.backend,
        retriever: inputs.retriever,
        retrieval: cfg.retrieval,
        pmi_prior: cfg.pmi_prior,
    }
}

fn validate(inputs: &EvalInputs<'_>, cfg: &EvalConfig) -> Result<()> {
    if cfg.modes.is_empty() {
        return Err(Error::Config("no scoring modes requested".into()));
    }
    if inputs.dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if inputs.backend.vocab_size() != inputs.vocab.len() {
        return Err(Error::Config(format!(
            "backend vocabulary has {} tokens, task vocabulary has {}",
            inputs.backend.vocab_size(),
            inputs.vocab.len()
        )));
    }
    if let Some(r) = &inputs.retriever {
        if r.store().dim() != inputs.backend.dim() {
            return Err(Error::DimMismatch {
                expected: inputs.backend.dim(),
                actual: r.store().dim(),
            });
        }
        r.store().check_vocab(inputs.vocab.len())?;
    }
    let res = resources(inputs, cfg);
    for &mode in &cfg.modes {
        res.check_mode(inputs.task, mode)?;
    }
    if cfg.shots > 0 {
        let train = inputs
            .train
            .ok_or_else(|| Error::Config("few-shot evaluation needs a training set".into()))?;
        if cfg.seeds.is_empty() {
            return Err(Error::Config("few-shot evaluation needs at least one seed".into()));
        }
        if train.len() < cfg.shots {
            return Err(Error::Config(format!(
                "{} shots requested from {} training instances",
                cfg.shots,
                train.len()
            )));
        }
    }
    Ok(())
}

fn prepare_runs(
    inputs: &EvalInputs<'_>,
    cfg: &EvalConfig,
    k_max: usize,
    pool: &rayon::ThreadPool,
) -> Result<Vec<PreparedRun>> {
    let use_retrieval = cfg.modes.iter().any(|m| m.retrieval());
    let retriever = if use_retrieval { inputs.retriever.as_ref() } else { None };
    let need_domain = cfg.modes.iter().any(|m| m.pmi());
    let need_chain = cfg.modes.contains(&ScoringMode::Lm) && !inputs.task.single_token();

    let domain = if need_domain {
        let tokens = render_domain_prompt(inputs.task, inputs.vocab)?;
        Some(ContextView::compute(inputs.backend, retriever, &tokens, k_max)?)
    } else {
        None
    };

    let demo_sets: Vec<Option<DemoSet>> = if cfg.shots > 0 {
        let train = inputs.train.unwrap_or_default();
        cfg.seeds
            .iter()
            .map(|&s| sample_demos(train, cfg.shots, s).map(Some))
            .collect::<Result<_>>()?
    } else {
        vec![None]
    };

    demo_sets
        .into_iter()
        .map(|demos| {
            let instances = pool.install(|| {
                inputs
                    .dataset
                    .par_iter()
                    .map(|inst| {
                        let tokens = render_prompt(inputs.task, inputs.vocab, &inst.text, demos.as_ref());
                        let prompt = ContextView::compute(inputs.backend, retriever, &tokens, k_max)?;
                        let chain = if need_chain {
                            Some(score_chain(inputs.backend, &tokens, &inputs.task.verbalizer)?)
                        } else {
                            None
                        };
                        Ok(Prepared { prompt, chain })
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            Ok(PreparedRun {
                seed: demos.map(|d| d.seed),
                domain: domain.clone(),
                instances,
            })
        })
        .collect()
}

fn score_run(
    inputs: &EvalInputs<'_>,
    run: &PreparedRun,
    modes: &[ScoringMode],
    retrieval: &RetrievalConfig,
    prior: PmiPrior,
    pool: &rayon::ThreadPool,
) -> Result<Vec<Vec<(usize, LabelScores)>>> {
    pool.install(|| {
        run.instances
            .par_iter()
            .map(|p| {
                modes
                    .iter()
                    .map(|&mode| {
                        let scores = score_mode(
                            inputs.task,
                            mode,
                            &p.prompt,
                            run.domain.as_ref(),
                            retrieval,
                            prior,
                            p.chain.as_ref(),
                        )?;
                        Ok((scores.argmax(), scores))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    })
}

fn run_coverage(inputs: &EvalInputs<'_>, run: &PreparedRun, retrieval: &RetrievalConfig) -> Result<Option<CoverageReport>> {
    if run.instances.iter().any(|p| p.prompt.neighbors.is_none()) || !inputs.task.single_token() {
        return Ok(None);
    }
    let bare_sets = inputs.task.singleton_neighborhoods()?;
    let (mut bare, mut fuzzy) = (0usize, 0usize);
    for p in &run.instances {
        let knn = p.prompt.knn(retrieval)?;
        let b = coverage(&knn, &bare_sets);
        let f = coverage(&knn, &inputs.task.neighborhoods);
        if b && !f {
            return Err(Error::Invariant("bare coverage without fuzzy coverage".into()));
        }
        bare += usize::from(b);
        fuzzy += usize::from(f);
    }
    let n = run.instances.len();
    Ok(Some(CoverageReport {
        instances: n,
        bare_rate: bare as f64 / n as f64,
        fuzzy_rate: fuzzy as f64 / n as f64,
    }))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every requested mode over the dataset, once per demonstration seed
/// in few-shot mode.
pub fn evaluate(inputs: &EvalInputs<'_>, cfg: &EvalConfig) -> Result<EvalReport> {
    let start = Instant::now();
    validate(inputs, cfg)?;
    let pool = thread_pool(cfg.workers)?;
    let runs = prepare_runs(inputs, cfg, cfg.retrieval.k, &pool)?;
    let labels = inputs.task.labels();

    let mut reports = Vec::with_capacity(runs.len());
    for run in &runs {
        let scored = score_run(inputs, run, &cfg.modes, &cfg.retrieval, cfg.pmi_prior, &pool)?;
        let mut correct = vec![0usize; cfg.modes.len()];
        let predictions = scored
            .into_iter()
            .enumerate()
            .map(|(i, per_mode)| {
                let gold = inputs.dataset[i].label;
                let predictions = per_mode
                    .into_iter()
                    .zip(&cfg.modes)
                    .enumerate()
                    .map(|(m, ((label, scores), &mode))| {
                        let ok = label == gold;
                        correct[m] += usize::from(ok);
                        ModePrediction {
                            mode,
                            label: labels[label].clone(),
                            correct: ok,
                            scores: scores.scores,
                        }
                    })
                    .collect();
                InstancePrediction {
                    index: i,
                    gold: labels[gold].clone(),
                    predictions,
                }
            })
            .collect();
        let total = inputs.dataset.len();
        let accuracy = cfg
            .modes
            .iter()
            .zip(&correct)
            .map(|(&mode, &c)| ModeAccuracy {
                mode,
                correct: c,
                total,
                accuracy: c as f64 / total as f64,
            })
            .collect();
        reports.push(RunReport {
            seed: run.seed,
            accuracy,
            coverage: run_coverage(inputs, run, &cfg.retrieval)?,
            predictions,
        });
    }

    let summary = cfg
        .modes
        .iter()
        .enumerate()
        .map(|(m, &mode)| {
            let accs: Vec<f64> = reports.iter().map(|r| r.accuracy[m].accuracy).collect();
            let (mean, std) = mean_std(&accs);
            ModeSummary { mode, mean, std }
        })
        .collect();

    Ok(EvalReport {
        task: inputs.task.spec.name.clone(),
        instances: inputs.dataset.len(),
        datastore_entries: inputs.retriever.map(|r| r.store().len()),
        config: cfg.clone(),
        summary,
        runs: reports,
        timings: Timings {
            total_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    })
}

/// Hyperparameter axes for a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepGrid {
    pub ks: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            ks: vec![16, 64, 256, 1024],
            temperatures: vec![1.0, 3.0, 10.0],
            lambdas: vec![0.1, 0.3, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub mode: ScoringMode,
    /// Mean over demonstration seeds in few-shot mode.
    pub accuracy: f64,
}

/// Evaluates every grid point, ordered by k, then temperature, then lambda,
/// then mode. Neighbors are retrieved once at the largest k.
pub fn sweep(inputs: &EvalInputs<'_>, base: &EvalConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    if grid.ks.is_empty() || grid.temperatures.is_empty() || grid.lambdas.is_empty() {
        return Err(Error::Config("sweep grid has an empty axis".into()));
    }
    let points: Vec<RetrievalConfig> = grid
        .ks
        .iter()
        .flat_map(|&k| {
            grid.temperatures.iter().flat_map(move |&temperature| {
                grid.lambdas.iter().map(move |&lambda| RetrievalConfig {
                    k,
                    temperature,
                    lambda,
                    nprobe: base.retrieval.nprobe,
                })
            })
        })
        .collect();
    for p in &points {
        validate(inputs, &EvalConfig { retrieval: *p, ..base.clone() })?;
    }
    let k_max = grid.ks.iter().copied().max().unwrap_or(1);
    let pool = thread_pool(base.workers)?;
    let runs = prepare_runs(inputs, base, k_max, &pool)?;

    let mut rows = Vec::with_capacity(points.len() * base.modes.len());
    for point in &points {
        let mut correct = vec![0usize; base.modes.len()];
        for run in &runs {
            let scored = score_run(inputs, run, &base.modes, point, base.pmi_prior, &pool)?;
            for (i, per_mode) in scored.iter().enumerate() {
                for (m, (label, _)) in per_mode.iter().enumerate() {
                    correct[m] += usize::from(*label == inputs.dataset[i].label);
                }
            }
        }
        let denom = (inputs.dataset.len() * runs.len()) as f64;
        for (m, &mode) in base.modes.iter().enumerate() {
            rows.push(SweepRow {
                k: point.k,
                temperature: point.temperature,
                lambda: point.lambda,
                mode,
                accuracy: correct[m] as f64 / denom,
            });
        }
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "k,t,lambda,mode,accuracy";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.6}", r.k, r.temperature, r.lambda, r.mode, r.accuracy);
    }
    out
}

/// Zero-shot coverage of the bare and fuzzy verbalizers by the kNN
/// distribution of each prompt.
pub fn coverage_report(inputs: &EvalInputs<'_>, retrieval: &RetrievalConfig, workers: usize) -> Result<CoverageReport> {
    let cfg = EvalConfig {
        modes: vec![ScoringMode::KnnFuzzy],
        retrieval: *retrieval,
        shots: 0,
        workers,
        ..EvalConfig::default()
    };
    validate(inputs, &cfg)?;
    let pool = thread_pool(workers)?;
    let runs = prepare_runs(inputs, &cfg, retrieval.k, &pool)?;
    run_coverage(inputs, &runs[0], retrieval)?
        .ok_or_else(|| Error::Config("coverage needs a datastore and single-token verbalizers".into()))
}

/// Neighborhood per verbalizer token, as sorted token strings. The output
/// is valid content for a task spec's `fuzzy` field.
pub fn expand_verbalizer(
    task: &Task,
    vocab: &Vocab,
    vectors: &WordVectors,
    lexicon: &SynonymLexicon,
) -> Result<BTreeMap<String, Vec<String>>> {
    task.verbalizer_tokens()?;
    let mut out = BTreeMap::new();
    for label in task.labels() {
        let surface = &task.spec.verbalizer[label];
        let set = build_neighborhood(vectors, lexicon, surface, vocab)?;
        let mut words: Vec<String> = set
            .iter()
            .map(|&t| vocab.token(t).unwrap_or_default().to_owned())
            .collect();
        words.sort();
        out.insert(surface.clone(), words);
    }
    Ok(out)
}
