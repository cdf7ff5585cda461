//! Seeded synthetic classification tasks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Split, Vocab, PAD_ID};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ParityOfMarkedPositions,
    KeywordSentiment,
    RedundantHeadProbe,
    Csv,
}

/// Description of a dataset to generate or load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Total examples before the train/eval split.
    pub size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Fraction of positions filled with label-independent distractors
    /// (`redundant_head_probe` only).
    pub redundancy: f64,
    pub eval_fraction: f64,
    /// CSV ingestion.
    pub path: Option<String>,
    pub text_column: String,
    pub label_column: String,
    pub scheme: super::Scheme,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::RedundantHeadProbe,
            size: 2000,
            seq_len: 12,
            num_classes: 2,
            seed: 0,
            redundancy: 0.5,
            eval_fraction: 0.2,
            path: None,
            text_column: "text".into(),
            label_column: "label".into(),
            scheme: super::Scheme::Whitespace,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.redundancy) {
            return Err(Error::config("task.redundancy", "must lie in [0, 1)"));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::config("task.eval_fraction", "must lie in (0, 1)"));
        }
        if self.seq_len < 2 {
            return Err(Error::config("task.seq_len", "must be >= 2"));
        }
        if self.kind == TaskKind::Csv {
            if self.path.is_none() {
                return Err(Error::config("task.path", "required for csv tasks"));
            }
            return Ok(());
        }
        let classes = self.classes();
        if classes < 2 {
            return Err(Error::config("task.num_classes", "must be >= 2"));
        }
        if self.size < 10 * classes {
            return Err(Error::config("task.size", format!("must be >= 10 * num_classes = {}", 10 * classes)));
        }
        Ok(())
    }

    fn classes(&self) -> usize {
        match self.kind {
            TaskKind::ParityOfMarkedPositions => 2,
            _ => self.num_classes,
        }
    }
}

pub const MARKER: &str = "m";
const PARITY_FILLERS: usize = 6;
const DISTRACTORS: usize = 12;
const SIGNALS_PER_CLASS: usize = 2;
const POSITIVE: [&str; 4] = ["good", "great", "fine", "nice"];
const NEGATIVE: [&str; 4] = ["bad", "awful", "poor", "dull"];
const NEUTRAL: [&str; 8] = ["the", "a", "film", "was", "plot", "and", "it", "very"];

pub fn signal_token(class: usize, j: usize) -> String {
    format!("s{class}_{j}")
}

pub fn distractor_token(j: usize) -> String {
    format!("d{j}")
}

/// Generates the train/eval pair described by `spec`.
pub fn make_synthetic_task(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (vocab, raw): (Vocab, Vec<(Vec<String>, usize)>) = match spec.kind {
        TaskKind::ParityOfMarkedPositions => parity(spec, &mut rng),
        TaskKind::KeywordSentiment => sentiment(spec, &mut rng),
        TaskKind::RedundantHeadProbe => redundant(spec, &mut rng),
        TaskKind::Csv => {
            return Err(Error::config("task.kind", "csv tasks are loaded, not generated"));
        }
    };
    let encode = |toks: &[String]| -> Vec<u32> {
        let mut ids: Vec<u32> = toks.iter().map(|t| vocab.id(t)).collect();
        ids.resize(spec.seq_len, PAD_ID);
        ids
    };
    let examples: Vec<Example> = raw
        .iter()
        .map(|(t, label)| Example {
            tokens: encode(t),
            label: *label,
        })
        .collect();
    let n_eval = ((spec.size as f64) * spec.eval_fraction).round().max(1.0) as usize;
    let n_train = spec.size - n_eval;
    let classes = spec.classes();
    let train = Dataset {
        examples: examples[..n_train].to_vec(),
        vocab: vocab.clone(),
        num_classes: classes,
        split: Split::Train,
    };
    let eval = Dataset {
        examples: examples[n_train..].to_vec(),
        vocab,
        num_classes: classes,
        split: Split::Eval,
    };
    Ok((train, eval))
}

fn random_len(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(spec.seq_len / 2..=spec.seq_len).max(1)
}

/// Label = number of marker tokens mod 2.
fn parity(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> (Vocab, Vec<(Vec<String>, usize)>) {
    let fillers: Vec<String> = (0..PARITY_FILLERS).map(|j| format!("t{j}")).collect();
    let mut vocab_tokens = fillers.clone();
    vocab_tokens.push(MARKER.into());
    let vocab = Vocab::from_tokens(&vocab_tokens);
    let raw = (0..spec.size)
        .map(|_| {
            let len = random_len(spec, rng);
            let toks: Vec<String> = (0..len)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        MARKER.to_string()
                    } else {
                        fillers.choose(rng).expect("nonempty").clone()
                    }
                })
                .collect();
            let label = toks.iter().filter(|t| *t == MARKER).count() % 2;
            (toks, label)
        })
        .collect();
    (vocab, raw)
}

/// Binary keyword majority with neutral filler; ties are redrawn.
fn sentiment(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> (Vocab, Vec<(Vec<String>, usize)>) {
    let vocab = Vocab::from_tokens(POSITIVE.iter().chain(&NEGATIVE).chain(&NEUTRAL));
    let mut raw = Vec::with_capacity(spec.size);
    while raw.len() < spec.size {
        let len = random_len(spec, rng);
        let mut pos = 0i32;
        let toks: Vec<String> = (0..len)
            .map(|_| {
                let r: f64 = rng.random();
                if r < 0.2 {
                    pos += 1;
                    POSITIVE.choose(rng).expect("nonempty").to_string()
                } else if r < 0.4 {
                    pos -= 1;
                    NEGATIVE.choose(rng).expect("nonempty").to_string()
                } else {
                    NEUTRAL.choose(rng).expect("nonempty").to_string()
                }
            })
            .collect();
        if pos != 0 {
            raw.push((toks, usize::from(pos > 0)));
        }
    }
    (vocab, raw)
}

/// Signal tokens from a per-class sub-alphabet decide the label by strict
/// plurality; distractor positions and tokens are drawn independently of the
/// label.
fn redundant(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> (Vocab, Vec<(Vec<String>, usize)>) {
    let c = spec.num_classes;
    let mut all: Vec<String> = (0..DISTRACTORS).map(distractor_token).collect();
    for class in 0..c {
        all.extend((0..SIGNALS_PER_CLASS).map(|j| signal_token(class, j)));
    }
    let vocab = Vocab::from_tokens(&all);
    let raw = (0..spec.size)
        .map(|_| {
            let label = rng.random_range(0..c);
            let len = random_len(spec, rng);
            let mut is_distractor: Vec<bool> = (0..len).map(|_| rng.random_bool(spec.redundancy)).collect();
            if is_distractor.iter().all(|d| *d) {
                let k = rng.random_range(0..len);
                is_distractor[k] = false;
            }
            let n_signal = is_distractor.iter().filter(|d| !**d).count();
            let signal_classes = loop {
                let draw: Vec<usize> = (0..n_signal)
                    .map(|_| {
                        if c == 1 || rng.random_bool(0.7) {
                            label
                        } else {
                            let other = rng.random_range(0..c - 1);
                            if other >= label {
                                other + 1
                            } else {
                                other
                            }
                        }
                    })
                    .collect();
                if plurality(&draw, c) == Some(label) {
                    break draw;
                }
            };
            let mut sig = signal_classes.into_iter();
            let toks = is_distractor
                .iter()
                .map(|d| {
                    if *d {
                        distractor_token(rng.random_range(0..DISTRACTORS))
                    } else {
                        let class = sig.next().expect("one per signal slot");
                        signal_token(class, rng.random_range(0..SIGNALS_PER_CLASS))
                    }
                })
                .collect();
            (toks, label)
        })
        .collect();
    (vocab, raw)
}

/// Class with strictly the most votes, if unique.
pub fn plurality(classes: &[usize], num_classes: usize) -> Option<usize> {
    let mut counts = vec![0usize; num_classes];
    for c in classes {
        counts[*c] += 1;
    }
    let max = *counts.iter().max()?;
    let winners: Vec<usize> = (0..num_classes).filter(|c| counts[*c] == max).collect();
    (winners.len() == 1).then(|| winners[0])
}
