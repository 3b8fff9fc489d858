//! Synthetic classification data with a planted shortcut.
//!
//! Every sequence carries a *signal*: a few class-indexed words outside the
//! bias segment whose class matches the label except with probability
//! `signal_noise`. Inside the bias segment sits one *bias token*. In training
//! and ID splits it is the label's bias token with probability
//! `bias_cooccurrence` and a uniformly drawn class otherwise; OOD splits
//! break that link. The rest of the sequence is filler.
//!
//! Vocabulary layout: `[0, Y)` bias tokens, then `Y * signal_words_per_class`
//! signal words grouped by class, then filler.

use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::InputView;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodRule {
    /// Bias token drawn uniformly over classes (co-occurrence 1/Y).
    #[default]
    Decorrelated,
    /// Bias token never matches the label.
    AntiCorrelated,
}

fn d_vocab() -> usize {
    64
}
fn d_len() -> usize {
    12
}
fn d_classes() -> usize {
    3
}
fn d_cooc() -> f64 {
    0.95
}
fn d_noise() -> f64 {
    0.05
}
fn d_train() -> usize {
    8000
}
fn d_test() -> usize {
    2000
}
fn d_segment() -> [usize; 2] {
    [0, 4]
}
fn d_words() -> usize {
    8
}
fn d_signal_tokens() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "d_vocab")]
    pub vocab_size: usize,
    #[serde(default = "d_len")]
    pub sequence_length: usize,
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    /// Probability that the bias token is copied from the label in train/ID;
    /// otherwise it is drawn uniformly over all classes.
    #[serde(default = "d_cooc")]
    pub bias_cooccurrence: f64,
    /// Probability that the signal words come from a wrong class.
    #[serde(default = "d_noise")]
    pub signal_noise: f64,
    #[serde(default = "d_train")]
    pub train_size: usize,
    #[serde(default = "d_test")]
    pub id_test_size: usize,
    #[serde(default = "d_test")]
    pub ood_test_size: usize,
    /// Half-open position range holding the bias token.
    #[serde(default = "d_segment")]
    pub bias_segment: [usize; 2],
    #[serde(default)]
    pub ood_rule: OodRule,
    #[serde(default = "d_words")]
    pub signal_words_per_class: usize,
    /// Signal words per sequence.
    #[serde(default = "d_signal_tokens")]
    pub signal_tokens: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: d_vocab(),
            sequence_length: d_len(),
            num_classes: d_classes(),
            bias_cooccurrence: d_cooc(),
            signal_noise: d_noise(),
            train_size: d_train(),
            id_test_size: d_test(),
            ood_test_size: d_test(),
            bias_segment: d_segment(),
            ood_rule: OodRule::default(),
            signal_words_per_class: d_words(),
            signal_tokens: d_signal_tokens(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("data.{f}");
        if self.num_classes < 2 {
            return Err(Error::config(
                field("num_classes"),
                "need at least two classes",
            ));
        }
        if !(0.0..=1.0).contains(&self.bias_cooccurrence) {
            return Err(Error::config(
                field("bias_cooccurrence"),
                format!("must lie in [0, 1], got {}", self.bias_cooccurrence),
            ));
        }
        if !(0.0..1.0).contains(&self.signal_noise) {
            return Err(Error::config(
                field("signal_noise"),
                format!("must lie in [0, 1), got {}", self.signal_noise),
            ));
        }
        let [start, end] = self.bias_segment;
        if start >= end || end > self.sequence_length {
            return Err(Error::config(
                field("bias_segment"),
                format!(
                    "[{start}, {end}) is not a non-empty range inside [0, {})",
                    self.sequence_length
                ),
            ));
        }
        if self.signal_words_per_class == 0 || self.signal_tokens == 0 {
            return Err(Error::config(
                field("signal_tokens"),
                "signal must be non-empty",
            ));
        }
        if self.signal_tokens > self.sequence_length - (end - start) {
            return Err(Error::config(
                field("signal_tokens"),
                "not enough positions outside the bias segment",
            ));
        }
        if self.vocab_size <= self.filler_start() {
            return Err(Error::config(
                field("vocab_size"),
                format!(
                    "need more than {} tokens for bias and signal words",
                    self.filler_start()
                ),
            ));
        }
        if self.train_size == 0 {
            return Err(Error::config(field("train_size"), "must be positive"));
        }
        Ok(())
    }

    fn filler_start(&self) -> usize {
        self.num_classes * (1 + self.signal_words_per_class)
    }

    pub fn segment(&self) -> Range<usize> {
        self.bias_segment[0]..self.bias_segment[1]
    }

    pub fn bias_token(&self, class: usize) -> usize {
        class
    }

    pub fn signal_words(&self, class: usize) -> Range<usize> {
        let start = self.num_classes + class * self.signal_words_per_class;
        start..start + self.signal_words_per_class
    }

    pub fn filler_words(&self) -> Range<usize> {
        self.filler_start()..self.vocab_size
    }

    /// Class of a bias token, if `token` is one.
    pub fn bias_class(&self, token: usize) -> Option<usize> {
        (token < self.num_classes).then_some(token)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledExample {
    pub token_ids: Vec<usize>,
    pub label: usize,
    /// Half-open position range.
    pub bias_segment: [usize; 2],
}

impl LabeledExample {
    pub fn segment(&self) -> Range<usize> {
        self.bias_segment[0]..self.bias_segment[1]
    }

    pub fn bias_segment_mask(&self) -> Vec<bool> {
        let seg = self.segment();
        (0..self.token_ids.len())
            .map(|i| seg.contains(&i))
            .collect()
    }

    pub fn bias_positions(&self) -> Vec<usize> {
        self.segment().collect()
    }

    pub fn full_view(&self) -> Result<InputView> {
        InputView::full(self.token_ids.clone())
    }

    /// Only the bias segment visible.
    pub fn bias_view(&self) -> Result<InputView> {
        InputView::masked(self.token_ids.clone(), self.bias_segment_mask())
    }

    fn check(&self) -> std::result::Result<(), String> {
        let [s, e] = self.bias_segment;
        if s >= e || e > self.token_ids.len() {
            return Err(format!(
                "bias_segment [{s}, {e}) invalid for {} tokens",
                self.token_ids.len()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IdTest,
    OodTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::IdTest, Split::OodTest];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::IdTest => "id_test",
            Split::OodTest => "ood_test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::IdTest => 2,
            Split::OodTest => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticDataset {
    pub train: Vec<LabeledExample>,
    pub id_test: Vec<LabeledExample>,
    pub ood_test: Vec<LabeledExample>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> &[LabeledExample] {
        match split {
            Split::Train => &self.train,
            Split::IdTest => &self.id_test,
            Split::OodTest => &self.ood_test,
        }
    }
}

/// Uniform draw from `0..n` excluding `skip`.
fn other_class(rng: &mut impl Rng, n: usize, skip: usize) -> usize {
    let c = rng.random_range(0..n - 1);
    if c >= skip {
        c + 1
    } else {
        c
    }
}

#[derive(Clone, Copy)]
enum BiasRule {
    Cooccur(f64),
    Anti,
}

fn sample_example(spec: &SyntheticSpec, rule: BiasRule, rng: &mut impl Rng) -> LabeledExample {
    let y = spec.num_classes;
    let label = rng.random_range(0..y);
    let signal_class = if rng.random::<f64>() < spec.signal_noise {
        other_class(rng, y, label)
    } else {
        label
    };
    let bias_class = match rule {
        BiasRule::Cooccur(p) if rng.random::<f64>() < p => label,
        BiasRule::Cooccur(_) => rng.random_range(0..y),
        BiasRule::Anti => other_class(rng, y, label),
    };

    let fillers = spec.filler_words();
    let mut tokens: Vec<usize> = (0..spec.sequence_length)
        .map(|_| rng.random_range(fillers.clone()))
        .collect();

    let seg = spec.segment();
    tokens[seg.start + rng.random_range(0..seg.len())] = spec.bias_token(bias_class);

    let outside: Vec<usize> = (0..spec.sequence_length)
        .filter(|i| !seg.contains(i))
        .collect();
    let words = spec.signal_words(signal_class);
    for k in sample(rng, outside.len(), spec.signal_tokens) {
        tokens[outside[k]] = rng.random_range(words.clone());
    }

    LabeledExample {
        token_ids: tokens,
        label,
        bias_segment: spec.bias_segment,
    }
}

fn generate_split(spec: &SyntheticSpec, split: Split) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream());
    let (n, rule) = match split {
        Split::Train => (spec.train_size, BiasRule::Cooccur(spec.bias_cooccurrence)),
        Split::IdTest => (spec.id_test_size, BiasRule::Cooccur(spec.bias_cooccurrence)),
        Split::OodTest => match spec.ood_rule {
            OodRule::Decorrelated => (spec.ood_test_size, BiasRule::Cooccur(0.0)),
            OodRule::AntiCorrelated => (spec.ood_test_size, BiasRule::Anti),
        },
    };
    (0..n)
        .map(|_| sample_example(spec, rule, &mut rng))
        .collect()
}

/// Pure function of `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    Ok(SyntheticDataset {
        train: generate_split(spec, Split::Train),
        id_test: generate_split(spec, Split::IdTest),
        ood_test: generate_split(spec, Split::OodTest),
    })
}

/// Probability that the bias token equals the label under the train/ID
/// rule: copied with probability `p`, else uniform over `Y` classes.
pub fn expected_bias_agreement(spec: &SyntheticSpec) -> f64 {
    let p = spec.bias_cooccurrence;
    p + (1.0 - p) / spec.num_classes as f64
}

/// Fraction of examples whose bias token equals the label.
pub fn bias_agreement(spec: &SyntheticSpec, examples: &[LabeledExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = examples
        .iter()
        .filter(|ex| {
            ex.segment()
                .filter_map(|i| spec.bias_class(ex.token_ids[i]))
                .any(|c| c == ex.label)
        })
        .count();
    hits as f64 / examples.len() as f64
}

pub fn to_bytes(examples: &[LabeledExample]) -> Result<Vec<u8>> {
    io::to_jsonl_bytes(examples)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<LabeledExample>> {
    let examples: Vec<LabeledExample> = io::from_jsonl_bytes(bytes, path)?;
    for (i, ex) in examples.iter().enumerate() {
        ex.check().map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
    }
    Ok(examples)
}

pub fn write_dataset(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    io::write_bytes(path, &to_bytes(examples)?)
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledExample>> {
    from_bytes(&io::read_bytes(path)?, path)
}
