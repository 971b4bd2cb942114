//! SST-2 style TSV ingestion, vocabulary, batching, and the teacher-logit
//! cache.
//!
//! Split files are UTF-8 TSV with a `sentence<TAB>label` header. An
//! example's identity is its split plus its 0-based row index after the
//! header; the logit cache is keyed the same way so the exporter and the
//! trainer agree without hashing text.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{SeqMask, PAD_ID};
use crate::tensor::{Rng, Tensor};

pub const MAX_TOKENS: usize = 128;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const PAD_TOKEN: &str = "<PAD>";
pub const UNK_TOKEN: &str = "<UNK>";
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    /// `<dir>/<split>.tsv`
    pub fn path_in(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.tsv", self.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExample {
    pub sentence: String,
    pub label: usize,
}

pub fn parse_split(text: &str, path: &Path) -> Result<Vec<RawExample>> {
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or("").trim_end_matches('\r');
    if header != "sentence\tlabel" {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            detail: format!("expected header \"sentence<TAB>label\", found {header:?}"),
        });
    }
    let mut out = Vec::new();
    let body: Vec<&str> = lines.collect();
    let last = body.len();
    for (i, raw) in body.into_iter().enumerate() {
        let line = i + 2;
        let row = raw.trim_end_matches('\r');
        if row.is_empty() && i + 1 == last {
            break;
        }
        let Some((sentence, label)) = row.rsplit_once('\t') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                detail: "missing tab separator".into(),
            });
        };
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Label {
                    path: path.to_path_buf(),
                    line,
                    label: other.to_string(),
                })
            }
        };
        out.push(RawExample {
            sentence: sentence.to_string(),
            label,
        });
    }
    Ok(out)
}

/// Reads one split. Rows with a label other than 0/1 (e.g. neutral 2) are
/// rejected, not dropped.
pub fn load_split(path: &Path) -> Result<Vec<RawExample>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_split(&text, path)
}

/// Lowercase, split on Unicode whitespace, keep the first `max_len` tokens.
/// An empty sentence becomes a single `<UNK>`.
pub fn tokenize_with_limit(sentence: &str, max_len: usize) -> Vec<String> {
    let tokens: Vec<String> = sentence
        .split_whitespace()
        .take(max_len)
        .map(str::to_lowercase)
        .collect();
    if tokens.is_empty() {
        vec![UNK_TOKEN.to_string()]
    } else {
        tokens
    }
}

pub fn tokenize(sentence: &str) -> Vec<String> {
    tokenize_with_limit(sentence, MAX_TOKENS)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(1).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(Error::Config("vocabulary must start with <PAD>, <UNK>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }
}

/// Ids follow descending frequency, ties broken lexicographically, after
/// PAD (0) and UNK (1).
pub fn build_vocab(train: &[RawExample], min_freq: usize) -> Result<Vocabulary> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus("cannot build a vocabulary from no sentences".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for ex in train {
        for tok in tokenize(&ex.sentence) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Vocabulary::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedExample {
    pub id: usize,
    pub ids: Vec<usize>,
    pub label: usize,
    pub teacher: Option<[f64; 2]>,
}

pub fn encode_split(raw: &[RawExample], vocab: &Vocabulary, max_len: usize) -> Vec<TokenizedExample> {
    raw.iter()
        .enumerate()
        .map(|(id, ex)| TokenizedExample {
            id,
            ids: vocab.encode(&tokenize_with_limit(&ex.sentence, max_len)),
            label: ex.label,
            teacher: None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub example_ids: Vec<usize>,
    /// Flattened `[B × T]`, right-padded with [`PAD_ID`].
    pub ids: Vec<usize>,
    pub mask: SeqMask,
    pub labels: Vec<usize>,
    /// `[B × 2]`, present only when every example carries teacher logits.
    pub teacher: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn collate(examples: &[&TokenizedExample], min_len: usize) -> Result<Batch> {
    let longest = examples.iter().map(|e| e.ids.len()).max().unwrap_or(0);
    let t_len = longest.max(min_len).max(1);
    let mut ids = Vec::with_capacity(examples.len() * t_len);
    for e in examples {
        ids.extend_from_slice(&e.ids);
        ids.extend(std::iter::repeat(PAD_ID).take(t_len - e.ids.len()));
    }
    let teacher = if examples.iter().all(|e| e.teacher.is_some()) {
        let data = examples
            .iter()
            .flat_map(|e| e.teacher.expect("checked"))
            .collect();
        Some(Tensor::new(vec![examples.len(), 2], data)?)
    } else {
        None
    };
    Ok(Batch {
        example_ids: examples.iter().map(|e| e.id).collect(),
        ids,
        mask: SeqMask::from_lengths(examples.iter().map(|e| e.ids.len()).collect(), t_len)?,
        labels: examples.iter().map(|e| e.label).collect(),
        teacher,
    })
}

/// Splits `examples` into batches of `batch_size` (last may be short),
/// padding each to its longest sentence but never below `min_len`.
pub fn make_batches(
    examples: &[TokenizedExample],
    batch_size: usize,
    shuffle: bool,
    rng: &mut Rng,
    min_len: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&TokenizedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            collate(&refs, min_len)
        })
        .collect()
}

/// One cached teacher output: raw pre-softmax logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    pub split: String,
    pub id: usize,
    pub logits: [f64; 2],
}

/// Loaded cache keyed by `(split, id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogitCache {
    entries: BTreeMap<(String, usize), [f64; 2]>,
}

impl LogitCache {
    pub fn from_records(records: impl IntoIterator<Item = LogitRecord>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for r in records {
            if !r.logits.iter().all(|v| v.is_finite()) {
                return Err(Error::Cache(format!(
                    "non-finite logits for {} example {}",
                    r.split, r.id
                )));
            }
            let key = (r.split, r.id);
            if entries.contains_key(&key) {
                return Err(Error::Cache(format!(
                    "duplicate record for {} example {}",
                    key.0, key.1
                )));
            }
            entries.insert(key, r.logits);
        }
        Ok(LogitCache { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, split: &str, id: usize) -> Option<[f64; 2]> {
        self.entries.get(&(split.to_string(), id)).copied()
    }

    pub fn records(&self) -> impl Iterator<Item = LogitRecord> + '_ {
        self.entries.iter().map(|((s, id), l)| LogitRecord {
            split: s.clone(),
            id: *id,
            logits: *l,
        })
    }

    /// Record count and id range per split tag.
    pub fn summary(&self) -> BTreeMap<String, SplitCoverage> {
        let mut out: BTreeMap<String, SplitCoverage> = BTreeMap::new();
        for (split, id) in self.entries.keys() {
            let c = out.entry(split.clone()).or_insert(SplitCoverage {
                count: 0,
                min_id: *id,
                max_id: *id,
            });
            c.count += 1;
            c.min_id = c.min_id.min(*id);
            c.max_id = c.max_id.max(*id);
        }
        out
    }

    /// Sets `teacher` on every example, failing on the first uncovered id.
    pub fn attach(&self, split: &str, examples: &mut [TokenizedExample]) -> Result<()> {
        for ex in examples.iter() {
            if self.get(split, ex.id).is_none() {
                return Err(Error::MissingLogits {
                    split: split.to_string(),
                    id: ex.id,
                });
            }
        }
        for ex in examples.iter_mut() {
            ex.teacher = self.get(split, ex.id);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCoverage {
    pub count: usize,
    pub min_id: usize,
    pub max_id: usize,
}

impl SplitCoverage {
    /// Ids are exactly `0..count`.
    pub fn is_dense(&self) -> bool {
        self.min_id == 0 && self.max_id + 1 == self.count
    }
}

pub fn write_logits<W: Write>(records: &[LogitRecord], mut out: W) -> Result<()> {
    for r in records {
        if !r.logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Cache(format!(
                "refusing to write non-finite logits for {} example {}",
                r.split, r.id
            )));
        }
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("writing logit cache", e))?;
    }
    Ok(())
}

/// Writes one JSON object per line: `{"split":..,"id":..,"logits":[a,b]}`.
pub fn logits_save(path: &Path, records: &[LogitRecord]) -> Result<()> {
    let file = fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    write_logits(records, &mut w)?;
    w.flush().map_err(|e| Error::io("flushing logit cache", e))
}

pub fn read_logits<R: BufRead>(input: R) -> Result<LogitCache> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading logit cache", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogitRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Cache(format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    LogitCache::from_records(records)
}

pub fn logits_load(path: &Path) -> Result<LogitCache> {
    let file = fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_logits(BufReader::new(file))
}

/// Margin distribution for synthetic teacher logits: the winning class gets
/// `+m/2` and the other `−m/2` with `m ~ Uniform[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for MarginRange {
    fn default() -> Self {
        MarginRange { lo: 1.0, hi: 4.0 }
    }
}

/// Fake teacher whose argmax matches the gold label with probability
/// `quality`. `labels[i]` is the label of example `i` in `split`.
pub fn synthetic_teacher(
    split: &str,
    labels: &[usize],
    quality: f64,
    margin: MarginRange,
    rng: &mut Rng,
) -> Result<Vec<LogitRecord>> {
    if !(0.5..=1.0).contains(&quality) {
        return Err(Error::Config(format!("teacher quality {quality} outside [0.5, 1]")));
    }
    if !(margin.lo >= 0.0 && margin.hi >= margin.lo && margin.hi.is_finite()) {
        return Err(Error::Config("invalid margin range".into()));
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(id, &label)| {
            let agree = rng.bernoulli(quality);
            let m = rng.uniform(margin.lo, margin.hi);
            let winner = if agree { label } else { 1 - label.min(1) };
            let mut logits = [-m / 2.0; 2];
            logits[winner] = m / 2.0;
            LogitRecord {
                split: split.to_string(),
                id,
                logits,
            }
        })
        .collect())
}
