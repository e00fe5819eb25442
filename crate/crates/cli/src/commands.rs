use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use nnprompt_core::datastore::{build, merge, BuildOptions, BuildReport};
use nnprompt_core::eval::{coverage_report, evaluate, expand_verbalizer, sweep, sweep_csv, EvalConfig, EvalInputs, SweepGrid};
use nnprompt_core::tasks::{load_dataset, render_domain_prompt, render_prompt, sample_demos, Instance};
use nnprompt_core::vocab::build_vocab;
use nnprompt_core::datastore::split_documents;
use nnprompt_core::{
    Corpus, Datastore, Error, IvfIndex, IvfParams, LmBackend, RecordLm, RetrievalConfig, Retriever,
    SynonymLexicon, Task, TokenId, ToyConfig, ToyLbLm, Vocab, WordVectors,
};

use crate::settings::{pick, pick_list, FileConfig};
use crate::{
    BackendKind, BuildArgs, Cli, Command, CoverageArgs, ExpandArgs, ExportArgs, LmArgs, RetrievalArgs, RunArgs,
    SweepArgs,
};

/// Lists probed when an index is given without `--nprobe`.
const DEFAULT_NPROBE: usize = 8;
/// Demonstration runs when few-shot seeds are not listed.
const DEFAULT_SEED_RUNS: u64 = 4;

struct Ctx {
    file: FileConfig,
    workers: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let workers = pick(cli.workers, &file.workers, 1);
    let ctx = Ctx { file, workers };
    match cli.command {
        Command::BuildDatastore(a) => build_datastore(&ctx, a),
        Command::Eval(a) => eval(&ctx, a.run),
        Command::Sweep(a) => run_sweep(&ctx, a),
        Command::Coverage(a) => coverage(&ctx, a),
        Command::ExpandVerbalizer(a) => expand(a),
        Command::ExportRecords(a) => export_records(&ctx, a),
    }
}

fn write_output(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, contents).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(contents.as_bytes())
                .and_then(|()| stdout.flush())
                .context("writing to stdout")?;
        }
    }
    Ok(())
}

fn toy_config(ctx: &Ctx, seed: Option<u64>, dim: Option<usize>, window: Option<usize>) -> ToyConfig {
    let base = ctx.file.lm.unwrap_or_default();
    ToyConfig {
        seed: seed.unwrap_or(base.seed),
        dim: dim.unwrap_or(base.dim),
        window: window.unwrap_or(base.window),
        logit_scale: base.logit_scale,
    }
}

fn backend(ctx: &Ctx, args: &LmArgs, vocab: &Vocab) -> Result<Box<dyn LmBackend>> {
    let lm: Box<dyn LmBackend> = match args.backend {
        BackendKind::Toy => {
            if args.records.is_some() {
                return Err(Error::Config("--records needs --backend records".into()).into());
            }
            Box::new(ToyLbLm::new(vocab.len(), toy_config(ctx, args.lm_seed, args.lm_dim, args.lm_window))?)
        }
        BackendKind::Records => {
            let path = args
                .records
                .as_ref()
                .ok_or_else(|| Error::Config("--backend records needs --records".into()))?;
            Box::new(RecordLm::load(path)?)
        }
    };
    if lm.vocab_size() != vocab.len() {
        return Err(Error::Config(format!(
            "LM vocabulary has {} tokens but the vocabulary file has {}",
            lm.vocab_size(),
            vocab.len()
        ))
        .into());
    }
    Ok(lm)
}

fn build_datastore(ctx: &Ctx, args: BuildArgs) -> Result<()> {
    if args.corpus.len() > usize::from(u16::MAX) + 1 {
        return Err(Error::Config("too many corpus files for 16-bit corpus ids".into()).into());
    }
    let vocab = match args.max_vocab {
        Some(max) => {
            let texts = args
                .corpus
                .iter()
                .map(|p| std::fs::read_to_string(p).map_err(|source| Error::Io { path: p.clone(), source }))
                .collect::<Result<Vec<_>, _>>()?;
            let vocab = build_vocab(texts.iter().flat_map(|t| split_documents(t)), max)?;
            vocab.save(&args.vocab)?;
            vocab
        }
        None => Vocab::load(&args.vocab)?,
    };
    let lm = backend(ctx, &args.lm, &vocab)?;

    let mut stores = Vec::with_capacity(args.corpus.len());
    let mut reports: Vec<(&PathBuf, BuildReport)> = Vec::with_capacity(args.corpus.len());
    for (i, path) in args.corpus.iter().enumerate() {
        let corpus = Corpus::load(path, &vocab)?;
        let opts = BuildOptions {
            provenance: args.provenance,
            corpus_id: i as u16,
        };
        let (store, report) = build(&corpus, lm.as_ref(), opts)?;
        info!("{}: {} entries in {:?}", path.display(), report.entries_written, report.elapsed);
        stores.push(store);
        reports.push((path, report));
    }
    let store = merge(&stores)?;
    store.save(&args.out)?;

    let mut table = String::from("source\ttokens\tentries\n");
    for (path, r) in &reports {
        table.push_str(&format!("{}\t{}\t{}\n", path.display(), r.tokens_ingested, r.entries_written));
    }
    let tokens: u64 = reports.iter().map(|(_, r)| r.tokens_ingested).sum();
    table.push_str(&format!("total\t{tokens}\t{}\n", store.len()));

    if let (Some(nlist), Some(out)) = (args.nlist, &args.index_out) {
        let seed = ctx.file.seed(args.seed)?;
        let index = IvfIndex::build(&store, IvfParams::new(nlist, seed))?;
        index.save(out)?;
        info!("index with {nlist} lists written to {}", out.display());
    }
    write_output(None, &table)
}

struct Loaded {
    vocab: Vocab,
    task: Task,
    dataset: Vec<Instance>,
    train: Option<Vec<Instance>>,
    lm: Box<dyn LmBackend>,
    store: Option<Datastore>,
    index: Option<IvfIndex>,
}

impl Loaded {
    fn retriever(&self, nprobe: Option<usize>) -> Result<Option<Retriever<'_>>> {
        Ok(match (&self.store, &self.index) {
            (None, _) => None,
            (Some(store), None) => Some(Retriever::Flat(store)),
            (Some(store), Some(index)) => {
                let nprobe = nprobe.unwrap_or(DEFAULT_NPROBE).min(index.nlist());
                Some(Retriever::ivf(store, index, nprobe)?)
            }
        })
    }

    fn inputs<'a>(&'a self, retriever: Option<Retriever<'a>>) -> EvalInputs<'a> {
        EvalInputs {
            task: &self.task,
            vocab: &self.vocab,
            dataset: &self.dataset,
            train: self.train.as_deref(),
            backend: self.lm.as_ref(),
            retriever,
        }
    }
}

fn load(
    ctx: &Ctx,
    task: &crate::TaskArgs,
    retrieval: &RetrievalArgs,
    lm: &LmArgs,
    train: Option<&Path>,
) -> Result<Loaded> {
    let vocab = Vocab::load(&task.vocab)?;
    let task_def = Task::load(&task.task, &vocab)?;
    let dataset = load_dataset(&task.dataset, &task_def.spec)?;
    let train = train.map(|p| load_dataset(p, &task_def.spec)).transpose()?;
    let lm = backend(ctx, lm, &vocab)?;
    let stores = retrieval
        .datastore
        .iter()
        .map(Datastore::load)
        .collect::<Result<Vec<_>, _>>()?;
    let store = match stores.len() {
        0 => None,
        1 => stores.into_iter().next(),
        _ => Some(merge(&stores)?),
    };
    let index = match &retrieval.index {
        None => None,
        Some(_) if retrieval.datastore.len() != 1 => {
            return Err(Error::Config("--index needs exactly one --datastore".into()).into());
        }
        Some(path) => Some(IvfIndex::load(path)?),
    };
    Ok(Loaded {
        vocab,
        task: task_def,
        dataset,
        train,
        lm,
        store,
        index,
    })
}

fn retrieval_config(ctx: &Ctx, args: &RetrievalArgs) -> RetrievalConfig {
    let d = RetrievalConfig::default();
    let f = &ctx.file;
    RetrievalConfig {
        k: pick(args.k, &f.k, d.k),
        temperature: pick(args.temperature, &f.temperature, d.temperature),
        lambda: pick(args.lambda, &f.lambda, d.lambda),
        nprobe: args.nprobe.or(f.nprobe),
    }
}

fn eval_config(ctx: &Ctx, args: &RunArgs, default_modes: Vec<nnprompt_core::ScoringMode>) -> Result<EvalConfig> {
    let f = &ctx.file;
    let shots = pick(args.shots, &f.shots, 0);
    let base = f.seed(args.seed)?;
    let seeds = if shots == 0 {
        vec![base]
    } else {
        pick_list(&args.seeds, &f.seeds, (0..DEFAULT_SEED_RUNS).map(|i| base.wrapping_add(i)).collect())
    };
    Ok(EvalConfig {
        modes: pick_list(&args.modes, &f.modes, default_modes),
        retrieval: retrieval_config(ctx, &args.retrieval),
        pmi_prior: pick(args.retrieval.pmi_prior, &f.pmi_prior, Default::default()),
        shots,
        seeds,
        workers: ctx.workers,
    })
}

fn eval(ctx: &Ctx, args: RunArgs) -> Result<()> {
    let cfg = eval_config(ctx, &args, EvalConfig::default().modes)?;
    let loaded = load(ctx, &args.task, &args.retrieval, &args.lm, args.train.as_deref())?;
    let report = evaluate(&loaded.inputs(loaded.retriever(cfg.retrieval.nprobe)?), &cfg)?;
    let mut json = serde_json::to_string_pretty(&report).context("serializing report")?;
    json.push('\n');
    write_output(args.out.as_deref(), &json)
}

fn run_sweep(ctx: &Ctx, args: SweepArgs) -> Result<()> {
    let cfg = eval_config(ctx, &args.run, vec![nnprompt_core::ScoringMode::KnnPrompt])?;
    let d = SweepGrid::default();
    let f = &ctx.file;
    let grid = SweepGrid {
        ks: pick_list(&args.ks, &f.ks, d.ks),
        temperatures: pick_list(&args.temperatures, &f.temperatures, d.temperatures),
        lambdas: pick_list(&args.lambdas, &f.lambdas, d.lambdas),
    };
    let loaded = load(ctx, &args.run.task, &args.run.retrieval, &args.run.lm, args.run.train.as_deref())?;
    let rows = sweep(&loaded.inputs(loaded.retriever(cfg.retrieval.nprobe)?), &cfg, &grid)?;
    write_output(args.run.out.as_deref(), &sweep_csv(&rows))
}

fn coverage(ctx: &Ctx, args: CoverageArgs) -> Result<()> {
    if args.retrieval.datastore.is_empty() {
        return Err(Error::Config("coverage needs --datastore".into()).into());
    }
    let cfg = retrieval_config(ctx, &args.retrieval);
    let loaded = load(ctx, &args.task, &args.retrieval, &args.lm, None)?;
    let report = coverage_report(&loaded.inputs(loaded.retriever(cfg.nprobe)?), &cfg, ctx.workers)?;
    let mut json = serde_json::to_string_pretty(&report).context("serializing coverage")?;
    json.push('\n');
    write_output(args.out.as_deref(), &json)
}

fn expand(args: ExpandArgs) -> Result<()> {
    let vocab = Vocab::load(&args.vocab)?;
    let task = Task::load(&args.task, &vocab)?;
    let vectors = args.vectors.as_ref().map(WordVectors::load).transpose()?.unwrap_or_default();
    let lexicon = args.lexicon.as_ref().map(SynonymLexicon::load).transpose()?.unwrap_or_default();
    let sets = expand_verbalizer(&task, &vocab, &vectors, &lexicon)?;
    let mut json = serde_json::to_string_pretty(&sets).context("serializing neighborhoods")?;
    json.push('\n');
    write_output(args.out.as_deref(), &json)
}

/// Every context an eval over the task, or a datastore build over the
/// corpora, will ask the LM about.
fn export_contexts(ctx: &Ctx, args: &ExportArgs, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
    let mut out = Vec::new();
    for path in &args.corpus {
        let corpus = Corpus::load(path, vocab)?;
        for doc in corpus.documents() {
            out.extend((1..doc.len()).map(|i| doc[..i].to_vec()));
        }
    }
    if let (Some(task_path), Some(data_path)) = (&args.task, &args.dataset) {
        let task = Task::load(task_path, vocab)?;
        let dataset = load_dataset(data_path, &task.spec)?;
        let shots = pick(args.shots, &ctx.file.shots, 0);
        let demo_sets = if shots == 0 {
            vec![None]
        } else {
            let train_path = args
                .train
                .as_ref()
                .ok_or_else(|| Error::Config("few-shot export needs --train".into()))?;
            let train = load_dataset(train_path, &task.spec)?;
            let base = ctx.file.seed(args.seed)?;
            let seeds = pick_list(
                &args.seeds,
                &ctx.file.seeds,
                (0..DEFAULT_SEED_RUNS).map(|i| base.wrapping_add(i)).collect(),
            );
            seeds
                .into_iter()
                .map(|s| sample_demos(&train, shots, s).map(Some))
                .collect::<Result<Vec<_>, _>>()?
        };
        if !task.spec.domain_string.trim().is_empty() {
            out.push(render_domain_prompt(&task, vocab)?);
        }
        for demos in &demo_sets {
            for inst in &dataset {
                let prompt = render_prompt(&task, vocab, &inst.text, demos.as_ref());
                for seq in &task.verbalizer {
                    for j in 1..seq.len() {
                        let mut c = prompt.clone();
                        c.extend_from_slice(&seq[..j]);
                        out.push(c);
                    }
                }
                out.push(prompt);
            }
        }
    }
    let mut seen = BTreeSet::new();
    out.retain(|c| seen.insert(c.clone()));
    Ok(out)
}

fn export_records(ctx: &Ctx, args: ExportArgs) -> Result<()> {
    let vocab = Vocab::load(&args.vocab)?;
    let lm = ToyLbLm::new(vocab.len(), toy_config(ctx, args.lm_seed, args.lm_dim, args.lm_window))?;
    let contexts = export_contexts(ctx, &args, &vocab)?;
    if contexts.is_empty() {
        return Err(Error::Config("nothing to export: give --corpus or --task with --dataset".into()).into());
    }
    let records = RecordLm::capture(&lm, contexts.iter().map(Vec::as_slice))?;
    records.save(&args.out)?;
    write_output(None, &format!("{} records written to {}\n", records.len(), args.out.display()))
}
