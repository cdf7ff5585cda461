//! Tokenizers, datasets, synthetic tasks and batching.

mod csv_source;
mod dataset;
mod synthetic;
mod vocab;

pub use csv_source::{load_csv_dataset, CSV_EVAL_FRACTION};
pub use dataset::{batch_iter, Dataset, Example, Split};
pub use synthetic::{
    distractor_token, make_synthetic_task, plurality, signal_token, TaskKind, TaskSpec, MARKER,
};
pub use vocab::{detokenize, tokenize, Scheme, Vocab, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};
