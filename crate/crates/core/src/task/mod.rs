//! Synthetic labeled-sequence tasks with a known grammar and an exact Bayes labeler.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::lm::{sequence_token_logprobs, Backbone, LabeledSequence, PrefixBank, RESERVED};

/// Probability used in place of an impossible emission when every label rules a sequence out.
pub const LIKELIHOOD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    Single,
    /// A label-independent first sequence followed by a label-dependent second one.
    Pair,
}

/// Shape of a synthetic grammar; the tables themselves are drawn from `seed`.
///
/// Every sequence is a walk over a shared template Markov chain. At each position a
/// label-`l` sequence instead emits, with probability `insertion[l]`, a token drawn
/// uniformly from that label's discriminative set; the chain only advances on template
/// emissions. Lengths are uniform on `min_len..=max_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub num_labels: usize,
    pub template_size: usize,
    /// Number of successors each template state can move to.
    pub successors: usize,
    pub disc_size: usize,
    pub insertion: Vec<f64>,
    pub min_len: usize,
    pub max_len: usize,
    pub mode: TaskMode,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            num_labels: 2,
            template_size: 24,
            successors: 3,
            disc_size: 3,
            insertion: alloc::vec![0.2, 0.2],
            min_len: 8,
            max_len: 14,
            mode: TaskMode::Single,
            seed: 7,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if self.num_labels < 2 {
            return bad("a task needs at least two labels".into());
        }
        if self.insertion.len() != self.num_labels {
            return bad(format!("{} insertion probabilities for {} labels", self.insertion.len(), self.num_labels));
        }
        if self.insertion.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("insertion probabilities must lie in [0, 1]".into());
        }
        if self.template_size == 0 || self.successors == 0 || self.successors > self.template_size {
            return bad("template chain needs 1 ≤ successors ≤ template_size".into());
        }
        if self.disc_size == 0 {
            return bad("discriminative sets must be non-empty".into());
        }
        let used = RESERVED + self.template_size + self.num_labels * self.disc_size;
        if used > self.vocab_size {
            return bad(format!("grammar uses {used} token ids but the vocabulary has {}", self.vocab_size));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("length range must satisfy 1 ≤ min_len ≤ max_len".into());
        }
        Ok(())
    }
}

/// Explicit tables of a synthetic grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    pub num_labels: usize,
    /// Token id of template state `s`.
    pub template_tokens: Vec<usize>,
    pub start: Vec<f64>,
    /// Row-stochastic transitions between template states.
    pub transition: Vec<Vec<f64>>,
    pub disc_tokens: Vec<Vec<usize>>,
    pub insertion: Vec<f64>,
    pub min_len: usize,
    pub max_len: usize,
    pub mode: TaskMode,
    /// `Some(state)` for template tokens, indexed by token id.
    state_of: Vec<Option<usize>>,
    /// `Some(label)` for discriminative tokens, indexed by token id.
    owner_of: Vec<Option<usize>>,
}

fn sparse_distribution(size: usize, support: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut p = alloc::vec![0.0; size];
    let idx = sample(rng, size, support);
    let mut total = 0.0;
    for i in idx.iter() {
        let w: f64 = Exp1.sample(rng);
        p[i] = w + 0.05;
        total += p[i];
    }
    for v in &mut p {
        *v /= total;
    }
    p
}

impl Grammar {
    pub fn from_spec(spec: &SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let m = spec.template_size;
        let template_tokens: Vec<usize> = (RESERVED..RESERVED + m).collect();
        let start = sparse_distribution(m, spec.successors.max(2).min(m), &mut rng);
        let transition = (0..m).map(|_| sparse_distribution(m, spec.successors, &mut rng)).collect();
        let base = RESERVED + m;
        let disc_tokens = (0..spec.num_labels)
            .map(|l| (base + l * spec.disc_size..base + (l + 1) * spec.disc_size).collect())
            .collect();
        Ok(Self::from_tables(
            template_tokens,
            start,
            transition,
            disc_tokens,
            spec.insertion.clone(),
            spec.min_len,
            spec.max_len,
            spec.mode,
            spec.vocab_size,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn from_tables(
        template_tokens: Vec<usize>,
        start: Vec<f64>,
        transition: Vec<Vec<f64>>,
        disc_tokens: Vec<Vec<usize>>,
        insertion: Vec<f64>,
        min_len: usize,
        max_len: usize,
        mode: TaskMode,
        vocab_size: usize,
    ) -> Self {
        let mut state_of = alloc::vec![None; vocab_size];
        for (s, &t) in template_tokens.iter().enumerate() {
            state_of[t] = Some(s);
        }
        let mut owner_of = alloc::vec![None; vocab_size];
        for (l, set) in disc_tokens.iter().enumerate() {
            for &t in set {
                owner_of[t] = Some(l);
            }
        }
        Self {
            num_labels: disc_tokens.len(),
            template_tokens,
            start,
            transition,
            disc_tokens,
            insertion,
            min_len,
            max_len,
            mode,
            state_of,
            owner_of,
        }
    }

    fn draw_index(p: &[f64], rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &pi) in p.iter().enumerate() {
            if pi > 0.0 {
                acc += pi;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }

    /// Draws a token sequence; `label = None` emits template tokens only.
    pub fn sample_tokens(&self, label: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
        let n = rng.random_range(self.min_len..=self.max_len);
        let mut out = Vec::with_capacity(n);
        let mut state: Option<usize> = None;
        for _ in 0..n {
            if let Some(l) = label {
                if rng.random::<f64>() < self.insertion[l] {
                    let set = &self.disc_tokens[l];
                    out.push(set[rng.random_range(0..set.len())]);
                    continue;
                }
            }
            let row = match state {
                None => &self.start,
                Some(s) => &self.transition[s],
            };
            let s = Self::draw_index(row, rng);
            out.push(self.template_tokens[s]);
            state = Some(s);
        }
        out
    }

    /// Draws a labeled example (pair mode: template-only first sequence, label grammar second).
    pub fn sample(&self, id: u64, label: usize, rng: &mut impl Rng) -> LabeledSequence {
        match self.mode {
            TaskMode::Single => LabeledSequence::single(id, self.sample_tokens(Some(label), rng), label),
            TaskMode::Pair => {
                let first = self.sample_tokens(None, rng);
                let second = self.sample_tokens(Some(label), rng);
                LabeledSequence::pair(id, &first, &second, label)
            }
        }
    }

    /// Draws an unlabeled sequence from the label mixture.
    pub fn sample_marginal(&self, rng: &mut impl Rng) -> Vec<usize> {
        let label = rng.random_range(0..self.num_labels);
        match self.mode {
            TaskMode::Single => self.sample_tokens(Some(label), rng),
            TaskMode::Pair => {
                let seq = self.sample(0, label, rng);
                seq.tokens
            }
        }
    }

    /// Per label, the number of impossible emissions and the log-likelihood of the
    /// possible ones (impossible ones counted at [`LIKELIHOOD_FLOOR`]).
    pub fn label_scores(&self, tokens: &[usize]) -> Vec<(usize, f64)> {
        let mut template = 0usize;
        let mut counts = alloc::vec![0usize; self.num_labels];
        let mut outside = 0usize;
        for &t in tokens {
            if self.state_of.get(t).copied().flatten().is_some() {
                template += 1;
            } else if let Some(l) = self.owner_of.get(t).copied().flatten() {
                counts[l] += 1;
            } else {
                outside += 1;
            }
        }
        let disc_total: usize = counts.iter().sum();
        (0..self.num_labels)
            .map(|l| {
                let rho = self.insertion[l];
                let own = counts[l];
                let mut impossible = outside + (disc_total - own);
                let mut ll = 0.0;
                if own > 0 {
                    if rho > 0.0 {
                        ll += own as f64 * libm::log(rho / self.disc_tokens[l].len() as f64);
                    } else {
                        impossible += own;
                    }
                }
                if template > 0 {
                    if rho < 1.0 {
                        ll += template as f64 * libm::log(1.0 - rho);
                    } else {
                        impossible += template;
                    }
                }
                ll += impossible as f64 * libm::log(LIKELIHOOD_FLOOR);
                (impossible, ll)
            })
            .collect()
    }
}

/// Posterior-argmax labeler of a known grammar (lowest label on ties).
///
/// The template factor of the likelihood is shared by every label, so the posterior
/// only depends on the discriminative tokens and the number of template emissions.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesOracle {
    grammar: Grammar,
}

impl BayesOracle {
    pub fn new(grammar: Grammar) -> Self {
        Self { grammar }
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    /// Label of a raw (label-dependent) token sequence.
    pub fn predict_tokens(&self, tokens: &[usize]) -> usize {
        let scores = self.grammar.label_scores(tokens);
        let mut best = 0;
        for l in 1..scores.len() {
            let (bi, bl) = scores[best];
            let (i, ll) = scores[l];
            if i < bi || (i == bi && ll > bl) {
                best = l;
            }
        }
        best
    }

    /// Label of a dataset example; pair examples are judged on their second sequence.
    pub fn predict(&self, seq: &LabeledSequence) -> usize {
        if seq.is_pair() {
            self.predict_tokens(seq.second())
        } else {
            self.predict_tokens(&seq.tokens)
        }
    }
}

/// Exact expected accuracy of the Bayes labeler on balanced data:
/// `Σ_n P(n) (1/L) [Σ_l (1 − (1−ρ_l)^n) + max_l (1−ρ_l)^n]`.
pub fn bayes_accuracy(grammar: &Grammar) -> f64 {
    let lens = grammar.max_len - grammar.min_len + 1;
    let l = grammar.num_labels as f64;
    let mut acc = 0.0;
    for n in grammar.min_len..=grammar.max_len {
        let mut hit = 0.0;
        let mut best: f64 = 0.0;
        for &rho in &grammar.insertion {
            let q = libm::pow(1.0 - rho, n as f64);
            hit += 1.0 - q;
            best = best.max(q);
        }
        acc += (hit + best) / l / lens as f64;
    }
    acc
}

/// Fraction of examples whose oracle label equals their recorded label.
pub fn oracle_label_accuracy(data: &[LabeledSequence], oracle: &BayesOracle) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let hits = data.iter().filter(|s| oracle.predict(s) == s.label).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Labeled splits and an unlabeled corpus drawn from one grammar.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub corpus: Vec<Vec<usize>>,
    pub train: Vec<LabeledSequence>,
    pub dev: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
    pub oracle: BayesOracle,
}

/// Draws `shots` training and dev examples per label, `test_per_label` test examples
/// per label and `corpus_size` unlabeled sequences. Split ids are distinct.
pub fn make_synthetic_task(
    spec: &SyntheticTaskSpec,
    shots: usize,
    dev_per_label: usize,
    test_per_label: usize,
    corpus_size: usize,
    split_seed: u64,
) -> Result<SyntheticTask> {
    if shots == 0 {
        return Err(Error::InvalidConfig("at least one shot per label is required".into()));
    }
    let grammar = Grammar::from_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let mut id = 0u64;
    let mut split = |per_label: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(per_label * grammar.num_labels);
        for l in 0..grammar.num_labels {
            for _ in 0..per_label {
                out.push(grammar.sample(id, l, rng));
                id += 1;
            }
        }
        out
    };
    let train = split(shots, &mut rng);
    let dev = split(dev_per_label, &mut rng);
    let test = split(test_per_label, &mut rng);
    let corpus = (0..corpus_size).map(|_| grammar.sample_marginal(&mut rng)).collect();
    Ok(SyntheticTask { corpus, train, dev, test, oracle: BayesOracle::new(grammar) })
}

/// Unlabeled sequences from the label mixture of `grammar`.
pub fn sample_corpus(grammar: &Grammar, size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size).map(|_| grammar.sample_marginal(&mut rng)).collect()
}

/// `exp` of the mean negative log-likelihood over all included positions of `data`,
/// each sequence scored under `label`'s prefix.
pub fn perplexity(backbone: &Backbone, prefixes: &PrefixBank, label: usize, data: &[LabeledSequence]) -> Result<f64> {
    pooled_perplexity(backbone, prefixes, data, |_| label)
}

/// Like [`perplexity`] with every sequence scored under its own label.
pub fn dataset_perplexity(backbone: &Backbone, prefixes: &PrefixBank, data: &[LabeledSequence]) -> Result<f64> {
    pooled_perplexity(backbone, prefixes, data, |s| s.label)
}

fn pooled_perplexity(
    backbone: &Backbone,
    prefixes: &PrefixBank,
    data: &[LabeledSequence],
    label: impl Fn(&LabeledSequence) -> usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for seq in data {
        let lp = sequence_token_logprobs(backbone, prefixes, label(seq), seq)?;
        for (j, v) in lp.iter().enumerate() {
            if !seq.is_excluded(j) {
                nll -= v;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoIncludedPositions);
    }
    Ok(libm::exp(nll / count as f64))
}

#[cfg(test)]
mod tests;
