//! Deterministic synthetic sentiment task for tests, benches and demos.
//!
//! Corpus documents read `<filler> <cue> <cue> <cue> it was <adjective>`,
//! where the cues and the adjective share a class. The verbalizer tokens
//! (`great`, `terrible`) rarely appear as the adjective; their synonyms are
//! frequent. Bare-verbalizer retrieval therefore seldom covers the labels,
//! while fuzzy neighborhoods usually do.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datastore::{build, BuildOptions, Corpus, Datastore};
use crate::error::{Error, Result};
use crate::knn::RetrievalConfig;
use crate::lm::{ToyConfig, ToyLbLm};
use crate::tasks::{Instance, Task, TaskSpec};
use crate::verbalizer::{build_neighborhood, SynonymLexicon, WordVectors};
use crate::vocab::{Vocab, UNK_TOKEN};

pub const LABELS: [&str; 2] = ["positive", "negative"];
pub const VERBALIZERS: [&str; 2] = ["great", "terrible"];

const CUES: [[&str; 12]; 2] = [
    [
        "sunny", "bright", "joyful", "warm", "lovely", "charming", "vivid", "gentle", "radiant", "cheerful",
        "graceful", "delightful",
    ],
    [
        "gloomy", "dark", "grim", "cold", "bleak", "dull", "clumsy", "tedious", "murky", "bitter", "stale",
        "hollow",
    ],
];
const SYNONYMS: [[&str; 5]; 2] = [
    ["excellent", "superb", "wonderful", "fantastic", "marvelous"],
    ["awful", "dreadful", "horrible", "lousy", "dismal"],
];
/// Corpus adjectives that only the lexicon links to the verbalizers.
const LEXICON_EXTRA: [&str; 2] = ["splendid", "atrocious"];
const FILLERS: [&str; 8] = ["the", "film", "story", "plot", "scene", "acting", "music", "script"];
const VECTOR_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Exact number of datastore entries the corpus yields.
    pub entries: usize,
    pub instances: usize,
    pub train: usize,
    /// Chance that a corpus document ends in the bare verbalizer.
    pub verbalizer_rate: f64,
    /// Chance that each instance cue is drawn from the other class.
    pub cue_noise: f64,
    /// Share of corpus documents in the first class. Instances stay
    /// balanced, so a skew gives the label priors something to correct.
    pub class_skew: f64,
    pub lm: ToyConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            entries: 200,
            instances: 100,
            train: 16,
            verbalizer_rate: 0.05,
            cue_noise: 0.2,
            class_skew: 0.7,
            lm: ToyConfig::default(),
        }
    }
}

/// Retrieval settings suited to a datastore of a few hundred entries.
pub fn fixture_retrieval() -> RetrievalConfig {
    RetrievalConfig {
        k: 16,
        temperature: 0.5,
        lambda: 0.5,
        nprobe: None,
    }
}

/// Larger variant where retrieval is dense enough for per-token PMI ratios
/// to be stable: 5000 entries, the same 100 balanced instances.
pub fn benchmark_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        seed,
        entries: 5000,
        ..SyntheticConfig::default()
    }
}

pub fn benchmark_retrieval() -> RetrievalConfig {
    RetrievalConfig {
        k: 256,
        temperature: 1.0,
        lambda: 0.5,
        nprobe: None,
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFixture {
    pub config: SyntheticConfig,
    pub vocab: Vocab,
    pub corpus_text: String,
    /// Spec pointing at `vectors.txt` and `lexicon.tsv`, as written by
    /// [`SyntheticFixture::write_to`].
    pub spec: TaskSpec,
    /// Same task with neighborhoods inlined, for in-memory use.
    pub task: Task,
    pub dataset: Vec<Instance>,
    pub train: Vec<Instance>,
    pub vectors_text: String,
    pub lexicon_text: String,
}

fn vocab_words() -> Vec<String> {
    let mut words = vec![UNK_TOKEN.to_owned(), "it".into(), "was".into()];
    words.extend(VERBALIZERS.iter().map(|w| w.to_string()));
    for class in 0..2 {
        words.extend(CUES[class].iter().map(|w| w.to_string()));
        words.extend(SYNONYMS[class].iter().map(|w| w.to_string()));
    }
    words.extend(LEXICON_EXTRA.iter().map(|w| w.to_string()));
    words.extend(FILLERS.iter().map(|w| w.to_string()));
    words
}

fn vectors_text(rng: &mut ChaCha8Rng, vocab: &Vocab) -> String {
    let mut out = String::new();
    for word in vocab.tokens().iter().skip(1) {
        let class = (0..2).find(|&c| VERBALIZERS[c] == word || SYNONYMS[c].contains(&word.as_str()));
        let mut v: Vec<f64> = (0..VECTOR_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if let Some(c) = class {
            v.iter_mut().for_each(|x| *x *= 0.2);
            v[c] += 1.0;
        }
        out.push_str(word);
        for x in v {
            let _ = write!(out, " {x:.6}");
        }
        out.push('\n');
    }
    out
}

fn lexicon_text() -> String {
    let mut out = String::new();
    for c in 0..2 {
        let _ = writeln!(out, "{}\t{}", VERBALIZERS[c], LEXICON_EXTRA[c]);
    }
    // multi-word expansion, dropped by the single-token rule
    out.push_str("great\ttop notch\n");
    out
}

fn document(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Vec<&'static str> {
    let class = usize::from(!rng.gen_bool(cfg.class_skew));
    let mut doc = vec![*FILLERS.choose(rng).unwrap()];
    doc.extend(CUES[class].choose_multiple(rng, 3).copied());
    doc.extend(["it", "was"]);
    doc.push(if rng.gen_bool(cfg.verbalizer_rate) {
        VERBALIZERS[class]
    } else {
        let i = rng.gen_range(0..=SYNONYMS[class].len());
        SYNONYMS[class].get(i).copied().unwrap_or(LEXICON_EXTRA[class])
    });
    doc
}

fn instance(rng: &mut ChaCha8Rng, label: usize, cfg: &SyntheticConfig) -> Instance {
    let mut words = vec![*FILLERS.choose(rng).unwrap()];
    for _ in 0..3 {
        let class = if rng.gen_bool(cfg.cue_noise) { 1 - label } else { label };
        words.push(CUES[class].choose(rng).unwrap());
    }
    Instance {
        text: words.join(" "),
        label,
    }
}

impl SyntheticFixture {
    pub fn generate(config: SyntheticConfig) -> Result<Self> {
        if config.entries == 0 || config.instances == 0 {
            return Err(Error::Config("synthetic fixture needs entries and instances".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vocab = Vocab::from_tokens(vocab_words())?;

        // A document of n tokens yields n - 1 entries; the last one is cut
        // short so the total is exact.
        let mut docs = Vec::new();
        let mut remaining = config.entries;
        while remaining > 0 {
            let mut doc = document(&mut rng, &config);
            doc.truncate(remaining + 1);
            remaining -= doc.len() - 1;
            docs.push(doc.join(" "));
        }
        let corpus_text = docs.join("\n\n") + "\n";

        let dataset = (0..config.instances)
            .map(|i| instance(&mut rng, i % 2, &config))
            .collect();
        let train = (0..config.train)
            .map(|i| instance(&mut rng, i % 2, &config))
            .collect();

        let vectors_text = vectors_text(&mut rng, &vocab);
        let lexicon_text = lexicon_text();
        let vectors = WordVectors::parse(&vectors_text)?;
        let lexicon = SynonymLexicon::parse(&lexicon_text)?;

        let spec = TaskSpec {
            name: "synthetic-sentiment".into(),
            labels: LABELS.iter().map(|l| l.to_string()).collect(),
            verbalizer: LABELS
                .iter()
                .zip(VERBALIZERS)
                .map(|(l, v)| (l.to_string(), v.to_string()))
                .collect(),
            template: "{text} it was".into(),
            domain_string: "it was".into(),
            word_vectors_path: Some("vectors.txt".into()),
            synonym_lexicon_path: Some("lexicon.tsv".into()),
            fuzzy: None,
        };
        let mut inline: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (label, verb) in LABELS.iter().zip(VERBALIZERS) {
            let set = build_neighborhood(&vectors, &lexicon, verb, &vocab)?;
            inline.insert(
                label.to_string(),
                set.iter().map(|&t| vocab.token(t).unwrap_or_default().to_owned()).collect(),
            );
        }
        let task = Task::resolve(
            TaskSpec {
                word_vectors_path: None,
                synonym_lexicon_path: None,
                fuzzy: Some(inline),
                ..spec.clone()
            },
            &vocab,
            None,
        )?;

        Ok(Self {
            config,
            vocab,
            corpus_text,
            spec,
            task,
            dataset,
            train,
            vectors_text,
            lexicon_text,
        })
    }

    pub fn corpus(&self) -> Corpus {
        Corpus::from_text(&self.corpus_text, &self.vocab)
    }

    pub fn lm(&self) -> Result<ToyLbLm> {
        ToyLbLm::new(self.vocab.len(), self.config.lm.clone())
    }

    pub fn datastore(&self) -> Result<Datastore> {
        let (store, _) = build(&self.corpus(), &self.lm()?, BuildOptions::default())?;
        Ok(store)
    }

    fn jsonl(&self, instances: &[Instance]) -> Result<String> {
        let mut out = String::new();
        for inst in instances {
            let line = serde_json::json!({ "text": inst.text, "label": self.spec.labels[inst.label] });
            out.push_str(&serde_json::to_string(&line).map_err(|e| Error::Invariant(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `vocab.txt`, `corpus.txt`, `task.json`, `vectors.txt`,
    /// `lexicon.tsv`, `dataset.jsonl` and `train.jsonl` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let write = |name: &str, contents: &str| {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
        };
        self.vocab.save(dir.join("vocab.txt"))?;
        write("corpus.txt", &self.corpus_text)?;
        let spec = serde_json::to_string_pretty(&self.spec).map_err(|e| Error::Invariant(e.to_string()))?;
        write("task.json", &spec)?;
        write("vectors.txt", &self.vectors_text)?;
        write("lexicon.tsv", &self.lexicon_text)?;
        write("dataset.jsonl", &self.jsonl(&self.dataset)?)?;
        write("train.jsonl", &self.jsonl(&self.train)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_count_is_exact() {
        for entries in [1, 7, 200] {
            let fx = SyntheticFixture::generate(SyntheticConfig { entries, ..Default::default() }).unwrap();
            assert_eq!(fx.datastore().unwrap().len(), entries);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = SyntheticFixture::generate(SyntheticConfig::default()).unwrap();
        let b = SyntheticFixture::generate(SyntheticConfig::default()).unwrap();
        assert_eq!(a.corpus_text, b.corpus_text);
        assert_eq!(a.dataset, b.dataset);
        let c = SyntheticFixture::generate(SyntheticConfig { seed: 2, ..Default::default() }).unwrap();
        assert_ne!(a.corpus_text, c.corpus_text);
    }

    #[test]
    fn neighborhoods_are_synonyms() {
        let fx = SyntheticFixture::generate(SyntheticConfig::default()).unwrap();
        for c in 0..2 {
            let mut expect: Vec<&str> = SYNONYMS[c].to_vec();
            expect.push(VERBALIZERS[c]);
            expect.push(LEXICON_EXTRA[c]);
            expect.sort();
            let got: Vec<&str> = fx.task.neighborhoods[c]
                .iter()
                .map(|&t| fx.vocab.token(t).unwrap())
                .collect();
            let mut got_sorted = got.clone();
            got_sorted.sort();
            assert_eq!(got_sorted, expect);
        }
    }

    #[test]
    fn files_reload_to_same_task() {
        let fx = SyntheticFixture::generate(SyntheticConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        fx.write_to(dir.path()).unwrap();
        let vocab = Vocab::load(dir.path().join("vocab.txt")).unwrap();
        assert_eq!(vocab, fx.vocab);
        let task = Task::load(dir.path().join("task.json"), &vocab).unwrap();
        assert_eq!(task.neighborhoods, fx.task.neighborhoods);
        let data = crate::tasks::load_dataset(dir.path().join("dataset.jsonl"), &task.spec).unwrap();
        assert_eq!(data, fx.dataset);
    }
}
