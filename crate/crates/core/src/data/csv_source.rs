use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{tokenize, Dataset, Example, Scheme, Split, Vocab};
use crate::error::{Error, Result};

pub const CSV_EVAL_FRACTION: f64 = 0.1;

/// Loads a headed UTF-8 CSV file into a seeded 90/10 train/eval split.
///
/// The vocabulary and the label mapping (sorted label strings → `0..C`) are
/// built from the training rows only; duplicate rows are kept.
pub fn load_csv_dataset(
    path: &Path,
    text_column: &str,
    label_column: &str,
    scheme: Scheme,
    seq_len: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let bytes = std::fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| {
        Error::Ingest(format!(
            "{}: invalid UTF-8 at byte offset {}",
            path.display(),
            e.valid_up_to()
        ))
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Ingest(format!("{}: missing column `{name}`", path.display())))
    };
    let (ti, li) = (col(text_column)?, col(label_column)?);
    let mut rows: Vec<(String, String)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
        let get = |i: usize| rec.get(i).unwrap_or("").to_string();
        rows.push((get(ti), get(li)));
    }
    if rows.len() < 2 {
        return Err(Error::Ingest(format!("{}: need at least 2 data rows", path.display())));
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = ((rows.len() as f64 * CSV_EVAL_FRACTION).round() as usize).clamp(1, rows.len() - 1);
    let (eval_idx, train_idx) = order.split_at(n_eval);
    let mut train_idx = train_idx.to_vec();
    let mut eval_idx = eval_idx.to_vec();
    train_idx.sort_unstable();
    eval_idx.sort_unstable();

    let labels: BTreeMap<&str, usize> = {
        let mut names: Vec<&str> = train_idx.iter().map(|i| rows[*i].1.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names.into_iter().enumerate().map(|(i, n)| (n, i)).collect()
    };
    let vocab = Vocab::from_tokens(train_idx.iter().flat_map(|i| scheme.split(&rows[*i].0)));
    let build = |idx: &[usize], split: Split| -> Result<Dataset> {
        let examples = idx
            .iter()
            .map(|i| {
                let (text, label) = &rows[*i];
                let label = *labels.get(label.as_str()).ok_or_else(|| {
                    Error::Ingest(format!("label `{label}` does not occur in the training split"))
                })?;
                Ok(Example {
                    tokens: tokenize(text, scheme, &vocab, seq_len)?,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            examples,
            vocab: vocab.clone(),
            num_classes: labels.len(),
            split,
        })
    };
    Ok((build(&train_idx, Split::Train)?, build(&eval_idx, Split::Eval)?))
}
