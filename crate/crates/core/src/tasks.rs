//! Task specifications, prompt rendering, datasets and few-shot demonstrations.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::verbalizer::{build_neighborhood, resolve_single, Neighborhood, SynonymLexicon, WordVectors};
use crate::vocab::{TokenId, Vocab};

pub const TEXT_PLACEHOLDER: &str = "{text}";
pub const DEFAULT_SHOTS: usize = 4;

/// The on-disk JSON task description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub labels: Vec<String>,
    /// Label to verbalizer surface string.
    pub verbalizer: BTreeMap<String, String>,
    pub template: String,
    #[serde(default)]
    pub domain_string: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_vectors_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synonym_lexicon_path: Option<PathBuf>,
    /// Inline neighborhoods, keyed by label or by verbalizer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fuzzy: Option<BTreeMap<String, Vec<String>>>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.template.matches(TEXT_PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::Config(format!(
                "template must contain {TEXT_PLACEHOLDER} exactly once, found {n}"
            )));
        }
        if self.labels.is_empty() {
            return Err(Error::Config("task has no labels".into()));
        }
        let mut seen = HashSet::new();
        for l in &self.labels {
            if !seen.insert(l) {
                return Err(Error::Config(format!("duplicate label {l:?}")));
            }
            if !self.verbalizer.contains_key(l) {
                return Err(Error::Config(format!("label {l:?} has no verbalizer")));
            }
        }
        if let Some(extra) = self.verbalizer.keys().find(|k| !seen.contains(k)) {
            return Err(Error::Config(format!("verbalizer for unknown label {extra:?}")));
        }
        Ok(())
    }

    pub fn apply_template(&self, text: &str) -> String {
        self.template.replacen(TEXT_PLACEHOLDER, text, 1)
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// A task resolved against a vocabulary.
#[derive(Debug, Clone)]
pub struct Task {
    pub spec: TaskSpec,
    /// Verbalizer token sequence per label, in label order.
    pub verbalizer: Vec<Vec<TokenId>>,
    /// Fuzzy neighborhood per label; always contains the verbalizer token.
    /// Empty when some verbalizer spans several tokens.
    pub neighborhoods: Vec<Neighborhood>,
}

impl Task {
    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: TaskSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(spec, vocab, path.parent())
    }

    /// Resolves verbalizers and neighborhoods. Resource paths in the spec are
    /// relative to `base_dir` when given.
    pub fn resolve(spec: TaskSpec, vocab: &Vocab, base_dir: Option<&Path>) -> Result<Self> {
        spec.validate()?;
        let verbalizer = spec
            .labels
            .iter()
            .map(|l| {
                let surface = &spec.verbalizer[l];
                let ids = vocab.tokenize(surface);
                if ids.is_empty() || ids.contains(&TokenId::UNK) {
                    Err(Error::Config(format!(
                        "verbalizer {surface:?} for label {l:?} is not in the vocabulary"
                    )))
                } else {
                    Ok(ids)
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let locate = |p: &Path| match base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_owned(),
        };
        let vectors = match &spec.word_vectors_path {
            Some(p) => WordVectors::load(locate(p))?,
            None => WordVectors::new(),
        };
        let lexicon = match &spec.synonym_lexicon_path {
            Some(p) => SynonymLexicon::load(locate(p))?,
            None => SynonymLexicon::new(),
        };

        if let Some(fuzzy) = &spec.fuzzy {
            for key in fuzzy.keys() {
                if spec.label_index(key).is_none() && !spec.verbalizer.values().any(|v| v == key) {
                    return Err(Error::Config(format!(
                        "fuzzy entry {key:?} names neither a label nor a verbalizer token"
                    )));
                }
            }
        }

        let single = verbalizer.iter().all(|v| v.len() == 1);
        let neighborhoods = if single {
            spec.labels
                .iter()
                .zip(&verbalizer)
                .map(|(label, ids)| {
                    let surface = spec.verbalizer[label].as_str();
                    let inline = spec
                        .fuzzy
                        .as_ref()
                        .and_then(|f| f.get(label).or_else(|| f.get(surface)));
                    match inline {
                        Some(words) => {
                            let mut set = BTreeSet::from([ids[0]]);
                            set.extend(words.iter().filter_map(|w| resolve_single(w, vocab)));
                            Ok(set)
                        }
                        None => build_neighborhood(&vectors, &lexicon, surface, vocab),
                    }
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        Ok(Self {
            spec,
            verbalizer,
            neighborhoods,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.spec.labels
    }

    pub fn single_token(&self) -> bool {
        !self.neighborhoods.is_empty()
    }

    /// Bare verbalizer token per label, for single-token tasks.
    pub fn verbalizer_tokens(&self) -> Result<Vec<TokenId>> {
        if !self.single_token() {
            return Err(Error::Config(format!(
                "task {:?} has multi-token verbalizers; only LM scoring supports them",
                self.spec.name
            )));
        }
        Ok(self.verbalizer.iter().map(|v| v[0]).collect())
    }

    pub fn singleton_neighborhoods(&self) -> Result<Vec<Neighborhood>> {
        Ok(self
            .verbalizer_tokens()?
            .into_iter()
            .map(|t| BTreeSet::from([t]))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub text: String,
    /// Index into the task's labels.
    pub label: usize,
}

#[derive(Deserialize)]
struct DatasetLine {
    text: String,
    label: String,
}

pub fn parse_dataset(text: &str, spec: &TaskSpec) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = format!("line {}", lineno + 1);
        let row: DatasetLine = serde_json::from_str(line).map_err(|e| Error::parse(&at, e.to_string()))?;
        let label = spec
            .label_index(&row.label)
            .ok_or_else(|| Error::parse(&at, format!("unknown label {:?}", row.label)))?;
        out.push(Instance { text: row.text, label });
    }
    Ok(out)
}

/// Reads a JSONL dataset of `{"text": ..., "label": ...}` objects.
pub fn load_dataset(path: impl AsRef<Path>, spec: &TaskSpec) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, spec).map_err(|e| match e {
        Error::Parse { location, message } => Error::parse(format!("{}: {location}", path.display()), message),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoSet {
    pub instances: Vec<Instance>,
    pub seed: u64,
}

/// Draws `n` distinct training instances uniformly, in sampled order.
pub fn sample_demos(train: &[Instance], n: usize, seed: u64) -> Result<DemoSet> {
    if train.len() < n {
        return Err(Error::Config(format!(
            "need {n} demonstrations but the training set has {}",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, train.len(), n);
    Ok(DemoSet {
        instances: picked.iter().map(|i| train[i].clone()).collect(),
        seed,
    })
}

/// Prompt text: each demonstration as `template(text) + " " + verbalizer + "\n"`,
/// followed by the instance's template application.
pub fn render_prompt_text(spec: &TaskSpec, text: &str, demos: Option<&DemoSet>) -> String {
    let mut out = String::new();
    for demo in demos.map(|d| d.instances.as_slice()).unwrap_or_default() {
        out.push_str(&spec.apply_template(&demo.text));
        out.push(' ');
        out.push_str(&spec.verbalizer[&spec.labels[demo.label]]);
        out.push('\n');
    }
    out.push_str(&spec.apply_template(text));
    out
}

pub fn render_prompt(task: &Task, vocab: &Vocab, text: &str, demos: Option<&DemoSet>) -> Vec<TokenId> {
    vocab.tokenize(&render_prompt_text(&task.spec, text, demos))
}

pub fn render_domain_prompt(task: &Task, vocab: &Vocab) -> Result<Vec<TokenId>> {
    if task.spec.domain_string.trim().is_empty() {
        return Err(Error::Config(format!(
            "task {:?} has no domain string",
            task.spec.name
        )));
    }
    Ok(vocab.tokenize(&task.spec.domain_string))
}
