//! Dataset loaders, vocabularies and the dataset cache.
//!
//! Index 0 is always the padding token and index 1 the unknown token.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use xmar_tensor::{Checkpoint, Tensor};

use crate::error::{Result, XmarError};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Nucleobases plus the ambiguity codes that occur in the Splice data.
pub const DNA_ALPHABET: [char; 8] = ['A', 'C', 'G', 'T', 'D', 'N', 'S', 'R'];
pub const SPLICE_CLASSES: [&str; 3] = ["EI", "IE", "N"];
pub const SPLICE_TRAIN: usize = 2700;
pub const SPLICE_TEST: usize = 490;
pub const DEFAULT_MAX_VOCAB: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved entries followed by `tokens` in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut vocab = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for t in [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()].into_iter().chain(tokens) {
            if vocab.index.insert(t.clone(), vocab.tokens.len()).is_some() {
                return Err(XmarError::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
            vocab.tokens.push(t);
        }
        Ok(vocab)
    }

    pub fn dna() -> Self {
        Self::from_tokens(DNA_ALPHABET.iter().map(|c| c.to_string())).expect("alphabet is distinct")
    }

    /// Keeps the `max_size` most frequent tokens, ties broken
    /// lexicographically.
    pub fn from_corpus<'a, I>(docs: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in docs {
            for t in doc {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| *t != PAD_TOKEN && *t != UNK_TOKEN)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string())).expect("counted tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_chars(&self, text: &str) -> Vec<usize> {
        text.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| self.id(&c.to_ascii_uppercase().to_string()))
            .collect()
    }

    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        tokenize_words(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn to_json(&self) -> Value {
        json!(self.tokens[2..])
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let list = value
            .as_array()
            .ok_or_else(|| XmarError::invalid("vocabulary must be a JSON list"))?;
        let tokens = list
            .iter()
            .map(|t| t.as_str().map(str::to_string))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| XmarError::invalid("vocabulary entries must be strings"))?;
        Self::from_tokens(tokens)
    }
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub examples: Vec<Example>,
    pub label_names: Vec<String>,
    pub split: Split,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(examples: Vec<Example>, label_names: Vec<String>, split: Split, provenance: String) -> Result<Self> {
        if examples.is_empty() {
            return Err(XmarError::invalid(format!("{provenance}: dataset is empty")));
        }
        if let Some(e) = examples.iter().find(|e| e.label >= label_names.len()) {
            return Err(XmarError::invalid(format!(
                "{provenance}: label {} out of range for {} classes",
                e.label,
                label_names.len()
            )));
        }
        Ok(Self { examples, label_names, split, provenance })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_labels()];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    /// Accuracy of always predicting the most common label.
    pub fn majority_rate(&self) -> f64 {
        *self.class_counts().iter().max().unwrap() as f64 / self.len() as f64
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let examples = indices
            .iter()
            .map(|&i| {
                self.examples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| XmarError::invalid(format!("example index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(examples, self.label_names.clone(), self.split, self.provenance.clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "dataset");
        ck.set_meta("label_names", json!(self.label_names));
        ck.set_meta("split", self.split.as_str());
        ck.set_meta("provenance", self.provenance.clone());
        let lengths: Vec<f32> = self.examples.iter().map(|e| e.tokens.len() as f32).collect();
        let labels: Vec<f32> = self.examples.iter().map(|e| e.label as f32).collect();
        let flat: Vec<f32> = self.examples.iter().flat_map(|e| e.tokens.iter().map(|&t| t as f32)).collect();
        if flat.iter().chain(&lengths).any(|&v| v >= (1 << 24) as f32) {
            return Err(XmarError::invalid("token ids and lengths must stay below 2^24 to be cached"));
        }
        ck.push_array("lengths", Tensor::new(vec![lengths.len()], lengths)?);
        ck.push_array("labels", Tensor::new(vec![labels.len()], labels)?);
        if !flat.is_empty() {
            ck.push_array("tokens", Tensor::new(vec![flat.len()], flat)?);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("kind")? != "dataset" {
            return Err(XmarError::invalid("checkpoint does not hold a dataset"));
        }
        let label_names = ck
            .meta_value("label_names")?
            .as_array()
            .and_then(|a| a.iter().map(|v| v.as_str().map(str::to_string)).collect::<Option<Vec<_>>>())
            .ok_or_else(|| XmarError::invalid("malformed label_names"))?;
        let split = match ck.meta_str("split")? {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(XmarError::invalid(format!("unknown split {other:?}"))),
        };
        let lengths = ck.array("lengths")?.data();
        let labels = ck.array("labels")?.data();
        let empty = Tensor::scalar(0.0);
        let flat = if ck.has_array("tokens") { ck.array("tokens")?.data() } else { &empty.data()[..0] };
        let total: usize = lengths.iter().map(|&l| l as usize).sum();
        if lengths.len() != labels.len() || total != flat.len() {
            return Err(XmarError::invalid("dataset arrays disagree in length"));
        }
        let mut offset = 0;
        let examples = lengths
            .iter()
            .zip(labels)
            .map(|(&len, &label)| {
                let tokens = flat[offset..offset + len as usize].iter().map(|&t| t as usize).collect();
                offset += len as usize;
                Example { tokens, label: label as usize }
            })
            .collect();
        Self::new(examples, label_names, split, ck.meta_str("provenance")?.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub vocab: Vocab,
}

pub fn longest_sequence(dataset: &LabeledDataset) -> Result<usize> {
    dataset
        .examples
        .iter()
        .map(|e| e.tokens.len())
        .max()
        .ok_or_else(|| XmarError::invalid("longest_sequence of an empty dataset"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| XmarError::io(path, e))
}

fn parse_error(path: &Path, line: usize, reason: impl Into<String>) -> XmarError {
    XmarError::Parse { path: path.display().to_string(), line, reason: reason.into() }
}

fn encode_dna(vocab: &Vocab, seq: &str, path: &Path, line: usize) -> Result<Vec<usize>> {
    if seq.is_empty() {
        return Err(parse_error(path, line, "empty sequence"));
    }
    seq.chars()
        .map(|c| {
            vocab
                .get(&c.to_ascii_uppercase().to_string())
                .filter(|&id| id > UNK)
                .ok_or_else(|| parse_error(path, line, format!("unexpected character {c:?} in sequence")))
        })
        .collect()
}

fn seeded_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpliceOptions {
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SpliceOptions {
    fn default() -> Self {
        Self { train_size: SPLICE_TRAIN, test_size: SPLICE_TEST, seed: 0 }
    }
}

/// Parses the `class,name,sequence` records and splits them by seeded
/// shuffle.
pub fn load_splice(path: &Path, options: &SpliceOptions) -> Result<DatasetSplit> {
    let text = read_text(path)?;
    let vocab = Vocab::dna();
    let mut examples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = raw
            .split(',')
            .map(|f| f.chars().filter(|c| !c.is_whitespace()).collect())
            .collect();
        if fields.len() != 3 {
            return Err(parse_error(path, line, format!("expected 3 comma-separated fields, found {}", fields.len())));
        }
        let label = SPLICE_CLASSES
            .iter()
            .position(|c| c.eq_ignore_ascii_case(&fields[0]))
            .ok_or_else(|| parse_error(path, line, format!("unknown class {:?}", fields[0])))?;
        let tokens = encode_dna(&vocab, &fields[2], path, line)?;
        examples.push(Example { tokens, label });
    }
    let needed = options.train_size + options.test_size;
    if options.train_size == 0 || options.test_size == 0 || needed > examples.len() {
        return Err(XmarError::invalid(format!(
            "{}: split {}/{} needs {needed} records, file has {}",
            path.display(),
            options.train_size,
            options.test_size,
            examples.len()
        )));
    }
    let order = seeded_order(examples.len(), options.seed);
    let pick = |range: std::ops::Range<usize>| order[range].iter().map(|&i| examples[i].clone()).collect();
    let names: Vec<String> = SPLICE_CLASSES.iter().map(|s| s.to_string()).collect();
    let provenance = format!("{} (splice, seed {})", path.display(), options.seed);
    Ok(DatasetSplit {
        train: LabeledDataset::new(pick(0..options.train_size), names.clone(), Split::Train, provenance.clone())?,
        test: LabeledDataset::new(pick(options.train_size..needed), names, Split::Test, provenance)?,
        vocab,
    })
}

/// Reads a `sequence<TAB>label` file with binary labels.
pub fn load_dna_tsv(path: &Path, split: Split) -> Result<LabeledDataset> {
    let text = read_text(path)?;
    let vocab = Vocab::dna();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "sequence\tlabel" => {}
        _ => return Err(parse_error(path, 1, "expected header \"sequence<TAB>label\"")),
    }
    let mut examples = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_error(path, line, format!("expected 2 tab-separated fields, found {}", fields.len())));
        }
        let label = match fields[1].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_error(path, line, format!("label must be 0 or 1, got {other:?}"))),
        };
        let tokens = encode_dna(&vocab, fields[0].trim(), path, line)?;
        examples.push(Example { tokens, label });
    }
    LabeledDataset::new(
        examples,
        vec!["0".into(), "1".into()],
        split,
        format!("{} (dna-tsv)", path.display()),
    )
}

pub fn load_dna_tsv_pair(train: &Path, test: &Path) -> Result<DatasetSplit> {
    Ok(DatasetSplit {
        train: load_dna_tsv(train, Split::Train)?,
        test: load_dna_tsv(test, Split::Test)?,
        vocab: Vocab::dna(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextOptions {
    pub max_size: usize,
    /// Used only when no separate test file is given.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for TextOptions {
    fn default() -> Self {
        Self { max_size: DEFAULT_MAX_VOCAB, test_fraction: 0.1, seed: 0 }
    }
}

fn read_label_text_csv(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| XmarError::invalid(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_error(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 2 {
            return Err(parse_error(path, line, format!("expected label,text but found {} fields", record.len())));
        }
        let label = record[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_error(path, line, format!("label {:?} is not a non-negative integer", &record[0])))?;
        rows.push((label, tokenize_words(&record[1])));
    }
    if rows.is_empty() {
        return Err(parse_error(path, 1, "no rows"));
    }
    Ok(rows)
}

/// Loads `label,text` rows. The vocabulary is built from the train rows
/// only; without a test file a seeded fraction of the rows is held out.
pub fn load_text_csv(train_path: &Path, test_path: Option<&Path>, options: &TextOptions) -> Result<DatasetSplit> {
    let all = read_label_text_csv(train_path)?;
    let (train_rows, test_rows, test_origin) = match test_path {
        Some(p) => (all, read_label_text_csv(p)?, p),
        None => {
            if !(options.test_fraction > 0.0 && options.test_fraction < 1.0) {
                return Err(XmarError::invalid(format!("test_fraction must be in (0, 1), got {}", options.test_fraction)));
            }
            let n_test = ((all.len() as f64 * options.test_fraction).round() as usize).clamp(1, all.len().max(2) - 1);
            let order = seeded_order(all.len(), options.seed);
            let test = order[..n_test].iter().map(|&i| all[i].clone()).collect();
            let train = order[n_test..].iter().map(|&i| all[i].clone()).collect();
            (train, test, train_path)
        }
    };
    let num_labels = train_rows.iter().map(|r| r.0).max().unwrap() + 1;
    let mut seen = vec![false; num_labels];
    for (label, _) in &train_rows {
        seen[*label] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(XmarError::invalid(format!(
            "{}: labels must be contiguous from 0, label {missing} never occurs in the train split",
            train_path.display()
        )));
    }
    let vocab = Vocab::from_corpus(train_rows.iter().map(|r| r.1.as_slice()), options.max_size);
    let names: Vec<String> = (0..num_labels).map(|l| l.to_string()).collect();
    let encode = |rows: Vec<(usize, Vec<String>)>| -> Vec<Example> {
        rows.into_iter()
            .map(|(label, words)| Example { tokens: words.iter().map(|w| vocab.id(w)).collect(), label })
            .collect()
    };
    let train = LabeledDataset::new(
        encode(train_rows),
        names.clone(),
        Split::Train,
        format!("{} (text-csv)", train_path.display()),
    )?;
    let test = LabeledDataset::new(
        encode(test_rows),
        names,
        Split::Test,
        format!("{} (text-csv)", test_origin.display()),
    )?;
    Ok(DatasetSplit { train, test, vocab })
}
