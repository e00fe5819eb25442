//! Label scoring for the eight ablation modes.
//!
//! Every mode is a combination of three switches on top of the base LM:
//! retrieval (interpolate with the kNN distribution), fuzzy verbalizers
//! (sum over each label's neighborhood) and domain-conditional PMI
//! (divide by the probability under the domain string alone).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dist::{DenseDist, SparseDist};
use crate::error::{Error, Result};
use crate::index::{NeighborSet, Retriever};
use crate::knn::{interpolate, knn_distribution, RetrievalConfig};
use crate::lm::LmBackend;
use crate::tasks::{render_domain_prompt, render_prompt, DemoSet, Task};
use crate::verbalizer::Neighborhood;
use crate::vocab::{TokenId, Vocab};

/// Domain priors at or below this are treated as zero.
pub const ZERO_PRIOR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScoringMode {
    Lm,
    LmPmi,
    KnnLm,
    LmFuzzy,
    LmFuzzyPmi,
    KnnFuzzy,
    KnnPmi,
    KnnPrompt,
}

impl ScoringMode {
    pub const ALL: [ScoringMode; 8] = [
        ScoringMode::Lm,
        ScoringMode::LmPmi,
        ScoringMode::KnnLm,
        ScoringMode::LmFuzzy,
        ScoringMode::LmFuzzyPmi,
        ScoringMode::KnnFuzzy,
        ScoringMode::KnnPmi,
        ScoringMode::KnnPrompt,
    ];

    pub fn retrieval(self) -> bool {
        matches!(
            self,
            ScoringMode::KnnLm | ScoringMode::KnnFuzzy | ScoringMode::KnnPmi | ScoringMode::KnnPrompt
        )
    }

    pub fn fuzzy(self) -> bool {
        matches!(
            self,
            ScoringMode::LmFuzzy | ScoringMode::LmFuzzyPmi | ScoringMode::KnnFuzzy | ScoringMode::KnnPrompt
        )
    }

    pub fn pmi(self) -> bool {
        matches!(
            self,
            ScoringMode::LmPmi | ScoringMode::LmFuzzyPmi | ScoringMode::KnnPmi | ScoringMode::KnnPrompt
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoringMode::Lm => "LM",
            ScoringMode::LmPmi => "LM_PMI",
            ScoringMode::KnnLm => "KNN_LM",
            ScoringMode::LmFuzzy => "LM_FUZZY",
            ScoringMode::LmFuzzyPmi => "LM_FUZZY_PMI",
            ScoringMode::KnnFuzzy => "KNN_FUZZY",
            ScoringMode::KnnPmi => "KNN_PMI",
            ScoringMode::KnnPrompt => "KNN_PROMPT",
        }
    }
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase().replace('-', "_");
        ScoringMode::ALL
            .into_iter()
            .find(|m| m.name() == upper)
            .ok_or_else(|| Error::Config(format!("unknown scoring mode {s:?}")))
    }
}

/// Which distribution supplies the PMI denominator under retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PmiPrior {
    /// Base LM on the domain string.
    Lm,
    /// Interpolated kNN-LM on the domain string.
    #[default]
    Knnlm,
    /// Uniform over the vocabulary; reduces PMI to plain scoring.
    Uniform,
}

impl FromStr for PmiPrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lm" => Ok(PmiPrior::Lm),
            "knnlm" | "knn-lm" | "knn_lm" => Ok(PmiPrior::Knnlm),
            "uniform" => Ok(PmiPrior::Uniform),
            _ => Err(Error::Config(format!("unknown PMI prior {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelScores {
    pub scores: Vec<f64>,
    pub normalized: bool,
}

impl LabelScores {
    pub fn raw(scores: Vec<f64>) -> Self {
        Self {
            scores,
            normalized: false,
        }
    }

    pub fn normalize(self) -> Result<Self> {
        let total: f64 = self.scores.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateLabelScores);
        }
        Ok(Self {
            scores: self.scores.iter().map(|s| s / total).collect(),
            normalized: true,
        })
    }

    /// Highest score; ties go to the earliest label.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Label probability from the bare verbalizer tokens, normalized over labels.
pub fn score_plain(dist: &DenseDist, verbalizer: &[TokenId]) -> Result<LabelScores> {
    LabelScores::raw(verbalizer.iter().map(|&t| f64::from(dist.prob(t))).collect()).normalize()
}

/// Chain-rule probability of (possibly multi-token) verbalizers under the
/// base LM alone.
pub fn score_chain<B: LmBackend + ?Sized>(
    backend: &B,
    prompt: &[TokenId],
    verbalizer: &[Vec<TokenId>],
) -> Result<LabelScores> {
    let mut scores = Vec::with_capacity(verbalizer.len());
    let mut ctx = prompt.to_vec();
    for seq in verbalizer {
        ctx.truncate(prompt.len());
        let mut p = 1.0f64;
        for &t in seq {
            p *= f64::from(backend.next_dist(&ctx)?.prob(t));
            ctx.push(t);
        }
        scores.push(p);
    }
    LabelScores::raw(scores).normalize()
}

/// Sums each label's neighborhood mass. A token shared by several
/// neighborhoods counts toward each of them.
pub fn score_fuzzy(dist: &DenseDist, neighborhoods: &[Neighborhood]) -> Result<LabelScores> {
    if neighborhoods.iter().any(|n| n.is_empty()) {
        return Err(Error::Config("empty label neighborhood".into()));
    }
    LabelScores::raw(
        neighborhoods
            .iter()
            .map(|n| n.iter().map(|&t| f64::from(dist.prob(t))).sum())
            .collect(),
    )
    .normalize()
}

/// Domain-conditional PMI ratio `P(v | prompt) / P(v | domain)`.
pub fn pmi_dc(dist_prompt: &DenseDist, dist_domain: &DenseDist, token: TokenId) -> Result<f64> {
    let prior = f64::from(dist_domain.prob(token));
    if prior <= ZERO_PRIOR_EPS {
        return Err(Error::ZeroDomainPrior(token.0));
    }
    Ok(f64::from(dist_prompt.prob(token)) / prior)
}

/// Sum of PMI ratios over each label's neighborhood. Tokens with a zero
/// domain prior are skipped; if every token is skipped the scores are
/// degenerate.
pub fn score_full(
    prompt_dist: &DenseDist,
    domain_dist: &DenseDist,
    neighborhoods: &[Neighborhood],
) -> Result<LabelScores> {
    let mut used = 0usize;
    let mut scores = Vec::with_capacity(neighborhoods.len());
    for n in neighborhoods {
        let mut s = 0.0;
        for &t in n {
            match pmi_dc(prompt_dist, domain_dist, t) {
                Ok(r) => {
                    s += r;
                    used += 1;
                }
                Err(Error::ZeroDomainPrior(_)) => {
                    log::warn!("skipping token {t}: zero domain prior");
                }
                Err(e) => return Err(e),
            }
        }
        scores.push(s);
    }
    if used == 0 {
        return Err(Error::DegenerateLabelScores);
    }
    LabelScores::raw(scores).normalize()
}

/// Base LM output plus retrieved neighbors for one context.
///
/// Neighbors are fetched once at the largest `k` needed; the first `k` of
/// them are exactly the result of a search with a smaller `k`.
#[derive(Debug, Clone)]
pub struct ContextView {
    pub lm: DenseDist,
    pub neighbors: Option<NeighborSet>,
    k_max: usize,
}

impl ContextView {
    pub fn compute<B: LmBackend + ?Sized>(
        backend: &B,
        retriever: Option<&Retriever<'_>>,
        context: &[TokenId],
        k_max: usize,
    ) -> Result<Self> {
        let lm = backend.next_dist(context)?;
        let neighbors = match retriever {
            Some(r) => {
                let query = backend.encode(context)?;
                Some(r.search(query.as_slice(), k_max)?)
            }
            None => None,
        };
        Ok(Self { lm, neighbors, k_max })
    }

    pub fn knn(&self, cfg: &RetrievalConfig) -> Result<SparseDist> {
        let neighbors = self
            .neighbors
            .as_ref()
            .ok_or_else(|| Error::Config("retrieval requested without a datastore".into()))?;
        if cfg.k > self.k_max {
            return Err(Error::Invariant(format!(
                "k {} exceeds the {} neighbors fetched",
                cfg.k, self.k_max
            )));
        }
        knn_distribution(neighbors.top(cfg.k), cfg.temperature)
    }

    /// The LM distribution, interpolated with kNN when `use_knn` is set.
    pub fn dist(&self, use_knn: bool, cfg: &RetrievalConfig) -> Result<DenseDist> {
        if !use_knn {
            return Ok(self.lm.clone());
        }
        interpolate(&self.lm, &self.knn(cfg)?, cfg.lambda)
    }
}

/// Everything a prediction needs besides the task and the text.
#[derive(Clone, Copy)]
pub struct Resources<'a> {
    pub backend: &'a dyn LmBackend,
    pub retriever: Option<Retriever<'a>>,
    pub retrieval: RetrievalConfig,
    pub pmi_prior: PmiPrior,
}

impl<'a> Resources<'a> {
    pub fn check_mode(&self, task: &Task, mode: ScoringMode) -> Result<()> {
        if mode.retrieval() && self.retriever.is_none() {
            return Err(Error::Config(format!("mode {mode} needs a datastore")));
        }
        if mode != ScoringMode::Lm {
            task.verbalizer_tokens()?;
        }
        if mode.pmi() && task.spec.domain_string.trim().is_empty() {
            return Err(Error::Config(format!("mode {mode} needs a domain string")));
        }
        self.retrieval.validate()
    }
}

/// The PMI denominator for `mode`.
pub fn domain_dist(
    domain: &ContextView,
    mode: ScoringMode,
    prior: PmiPrior,
    cfg: &RetrievalConfig,
) -> Result<DenseDist> {
    match prior {
        PmiPrior::Uniform => Ok(DenseDist::uniform(domain.lm.len())),
        PmiPrior::Lm => Ok(domain.lm.clone()),
        PmiPrior::Knnlm => domain.dist(mode.retrieval(), cfg),
    }
}

/// Scores one instance under `mode` from precomputed context views.
/// `chain` supplies LM scores for multi-token verbalizers.
pub fn score_mode(
    task: &Task,
    mode: ScoringMode,
    prompt: &ContextView,
    domain: Option<&ContextView>,
    cfg: &RetrievalConfig,
    prior: PmiPrior,
    chain: Option<&LabelScores>,
) -> Result<LabelScores> {
    if mode == ScoringMode::Lm && !task.single_token() {
        return chain
            .cloned()
            .ok_or_else(|| Error::Invariant("multi-token LM scoring without chain scores".into()));
    }
    let dist = prompt.dist(mode.retrieval(), cfg)?;
    let neighborhoods = if mode.fuzzy() {
        task.neighborhoods.clone()
    } else {
        task.singleton_neighborhoods()?
    };
    if mode.pmi() {
        let domain = domain.ok_or_else(|| Error::Config(format!("mode {mode} needs a domain prompt")))?;
        let prior = domain_dist(domain, mode, prior, cfg)?;
        score_full(&dist, &prior, &neighborhoods)
    } else if mode.fuzzy() {
        score_fuzzy(&dist, &neighborhoods)
    } else {
        score_plain(&dist, &task.verbalizer_tokens()?)
    }
}

/// The next-token distribution for `context`, optionally kNN-interpolated.
pub fn next_token_dist(context: &[TokenId], res: &Resources<'_>, use_knn: bool) -> Result<DenseDist> {
    let retriever = if use_knn {
        Some(
            res.retriever
                .as_ref()
                .ok_or_else(|| Error::Config("retrieval requested without a datastore".into()))?,
        )
    } else {
        None
    };
    ContextView::compute(res.backend, retriever, context, res.retrieval.k)?.dist(use_knn, &res.retrieval)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub scores: LabelScores,
}

/// Predicts a label for `text` under `mode`.
pub fn predict(
    task: &Task,
    vocab: &Vocab,
    text: &str,
    demos: Option<&DemoSet>,
    mode: ScoringMode,
    res: &Resources<'_>,
) -> Result<Prediction> {
    res.check_mode(task, mode)?;
    let retriever = if mode.retrieval() { res.retriever.as_ref() } else { None };
    let prompt_tokens = render_prompt(task, vocab, text, demos);
    let prompt = ContextView::compute(res.backend, retriever, &prompt_tokens, res.retrieval.k)?;
    let domain = if mode.pmi() {
        let tokens = render_domain_prompt(task, vocab)?;
        Some(ContextView::compute(res.backend, retriever, &tokens, res.retrieval.k)?)
    } else {
        None
    };
    let chain = if mode == ScoringMode::Lm && !task.single_token() {
        Some(score_chain(res.backend, &prompt_tokens, &task.verbalizer)?)
    } else {
        None
    };
    let scores = score_mode(
        task,
        mode,
        &prompt,
        domain.as_ref(),
        &res.retrieval,
        res.pmi_prior,
        chain.as_ref(),
    )?;
    Ok(Prediction {
        label: scores.argmax(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::PROB_TOLERANCE;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn dense(p: &[f32]) -> DenseDist {
        DenseDist::new(p.to_vec(), PROB_TOLERANCE).unwrap()
    }

    fn set(ids: &[u32]) -> Neighborhood {
        ids.iter().copied().map(TokenId).collect()
    }

    #[test]
    fn mode_flags_and_names() {
        let flags: Vec<(bool, bool, bool)> = ScoringMode::ALL
            .iter()
            .map(|m| (m.retrieval(), m.fuzzy(), m.pmi()))
            .collect();
        let distinct: BTreeSet<_> = flags.iter().collect();
        assert_eq!(distinct.len(), 8);
        for m in ScoringMode::ALL {
            assert_eq!(m.name().parse::<ScoringMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert_eq!("knn-prompt".parse::<ScoringMode>().unwrap(), ScoringMode::KnnPrompt);
        assert!("bogus".parse::<ScoringMode>().is_err());
        assert_eq!("knnlm".parse::<PmiPrior>().unwrap(), PmiPrior::Knnlm);
    }

    // Vocabulary for the hand examples: 0 unk, 1 great, 2 terrible, 3 excellent, 4 other.
    #[test]
    fn plain_examples() {
        let d = dense(&[0.1, 0.3, 0.1, 0.1, 0.4]);
        let s = score_plain(&d, &[TokenId(1), TokenId(2)]).unwrap();
        assert!((s.scores[0] - 0.75).abs() < 1e-7 && (s.scores[1] - 0.25).abs() < 1e-7);
        assert!(s.normalized);

        let d = dense(&[0.2, 0.3, 0.3, 0.2, 0.0]);
        let s = score_plain(&d, &[TokenId(1), TokenId(2)]).unwrap();
        assert_eq!(s.scores, vec![0.5, 0.5]);
        assert_eq!(s.argmax(), 0);

        let d = dense(&[0.5, 0.5, 0.0, 0.0, 0.0]);
        let s = score_plain(&d, &[TokenId(1), TokenId(2)]).unwrap();
        assert_eq!(s.scores, vec![1.0, 0.0]);

        let d = dense(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            score_plain(&d, &[TokenId(1), TokenId(2)]),
            Err(Error::DegenerateLabelScores)
        ));
    }

    #[test]
    fn fuzzy_examples() {
        let d = dense(&[0.2, 0.2, 0.1, 0.1, 0.4]);
        let singletons = [set(&[1]), set(&[2])];
        assert_eq!(
            score_fuzzy(&d, &singletons).unwrap(),
            score_plain(&d, &[TokenId(1), TokenId(2)]).unwrap()
        );
        let s = score_fuzzy(&d, &[set(&[1, 3]), set(&[2])]).unwrap();
        assert!((s.scores[0] - 0.75).abs() < 1e-7 && (s.scores[1] - 0.25).abs() < 1e-7);

        // Token 3 is in both neighborhoods and counts for both.
        let s = score_fuzzy(&d, &[set(&[1, 3]), set(&[2, 3])]).unwrap();
        assert!((s.scores[0] - 0.3 / 0.5).abs() < 1e-7);
        assert!(score_fuzzy(&d, &[set(&[]), set(&[2])]).is_err());
    }

    #[test]
    fn pmi_examples() {
        let d = dense(&[0.2, 0.3, 0.5]);
        for t in 0..3 {
            assert_eq!(pmi_dc(&d, &d, TokenId(t)).unwrap(), 1.0);
        }
        let prompt = dense(&[0.2, 0.8]);
        let domain = dense(&[0.1, 0.9]);
        assert!((pmi_dc(&prompt, &domain, TokenId(0)).unwrap() - 2.0).abs() < 1e-6);
        let zero = dense(&[0.0, 1.0]);
        assert!(matches!(pmi_dc(&prompt, &zero, TokenId(0)), Err(Error::ZeroDomainPrior(0))));
    }

    #[test]
    fn full_hand_oracle() {
        // Tokens: 0 great, 1 excellent, 2 terrible, 3 awful.
        let prompt = dense(&[0.4, 0.2, 0.3, 0.1]);
        let domain = dense(&[0.5, 0.1, 0.2, 0.2]);
        let s = score_full(&prompt, &domain, &[set(&[0, 1]), set(&[2, 3])]).unwrap();
        // pos: 0.4/0.5 + 0.2/0.1 = 2.8; neg: 0.3/0.2 + 0.1/0.2 = 2.0
        assert!((s.scores[0] - 2.8 / 4.8).abs() < 1e-6);
        assert!((s.scores[1] - 2.0 / 4.8).abs() < 1e-6);
    }

    #[test]
    fn full_skips_zero_priors() {
        let prompt = dense(&[0.4, 0.2, 0.3, 0.1]);
        let domain = dense(&[0.0, 0.5, 0.5, 0.0]);
        let s = score_full(&prompt, &domain, &[set(&[0, 1]), set(&[2, 3])]).unwrap();
        assert!((s.scores[0] - 0.4 / 1.0).abs() < 1e-6);
        let domain = dense(&[0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            score_full(&prompt, &domain, &[set(&[0, 1]), set(&[2])]),
            Err(Error::DegenerateLabelScores)
        ));
    }

    fn random_dist(raw: &[f64]) -> DenseDist {
        DenseDist::from_weights(raw).unwrap()
    }

    proptest! {
        #[test]
        fn uniform_prior_preserves_argmax(raw in proptest::collection::vec(0.001f64..1.0, 6)) {
            let d = random_dist(&raw);
            let u = DenseDist::uniform(6);
            let pmi: Vec<f64> = (0..6).map(|t| pmi_dc(&d, &u, TokenId(t)).unwrap()).collect();
            let arg_pmi = LabelScores::raw(pmi).argmax();
            let arg_p = LabelScores::raw(d.as_slice().iter().map(|&p| f64::from(p)).collect()).argmax();
            prop_assert_eq!(arg_pmi, arg_p);
        }

        #[test]
        fn full_with_singletons_and_uniform_prior_reduces(raw in proptest::collection::vec(0.001f64..1.0, 6)) {
            let d = random_dist(&raw);
            let u = DenseDist::uniform(6);
            let verbalizer = [TokenId(1), TokenId(4), TokenId(2)];
            let singles: Vec<Neighborhood> = verbalizer.iter().map(|&t| BTreeSet::from([t])).collect();
            let full = score_full(&d, &u, &singles).unwrap();
            let plain = score_plain(&d, &verbalizer).unwrap();
            prop_assert_eq!(full.argmax(), plain.argmax());
            for (a, b) in full.scores.iter().zip(&plain.scores) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn argmax_is_scale_invariant(scores in proptest::collection::vec(0.0f64..10.0, 1..6), c in 0.01f64..100.0) {
            let a = LabelScores::raw(scores.clone()).argmax();
            let b = LabelScores::raw(scores.iter().map(|s| s * c).collect()).argmax();
            prop_assert_eq!(a, b);
        }
    }
}
