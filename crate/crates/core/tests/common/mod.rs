//! Synthetic sentiment corpora shared by the integration suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use studentkd::data::RawExample;
use studentkd::Rng;

/// Every sentence has one polar word among neutral fillers; the label is the
/// polar word's class. Balanced.
pub fn separable_corpus(n: usize, seed: u64) -> Vec<RawExample> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let len = 3 + rng.below(6);
            let mut words: Vec<String> = (0..len).map(|_| format!("f{}", rng.below(40))).collect();
            let polar = if label == 1 { "pos" } else { "neg" };
            let at = rng.below(len + 1);
            words.insert(at, format!("{polar}{}", rng.below(10)));
            RawExample {
                sentence: words.join(" "),
                label,
            }
        })
        .collect()
}

/// Word-weight sentiment task: the label is the sign of the summed weights
/// of 2–4 polar words hidden among fillers.
pub struct WeightedTask {
    weights: Vec<f64>,
}

impl WeightedTask {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let weights = (0..30)
            .map(|i| {
                let mag = rng.uniform(0.5, 2.0);
                if i % 2 == 0 {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        WeightedTask { weights }
    }

    /// Returns `n` clean examples.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<RawExample> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let len = 6 + rng.below(9);
            let mut words: Vec<String> = (0..len).map(|_| format!("w{}", rng.below(60))).collect();
            let k = 2 + rng.below(3);
            let mut score = 0.0;
            for _ in 0..k {
                let j = rng.below(self.weights.len());
                score += self.weights[j];
                let at = rng.below(words.len() + 1);
                words.insert(at, format!("s{j}"));
            }
            if score.abs() < 0.25 {
                continue;
            }
            out.push(RawExample {
                sentence: words.join(" "),
                label: usize::from(score > 0.0),
            });
        }
        out
    }
}

/// Flips each label with probability `rate`.
pub fn with_label_noise(clean: &[RawExample], rate: f64, rng: &mut Rng) -> Vec<RawExample> {
    clean
        .iter()
        .map(|ex| RawExample {
            sentence: ex.sentence.clone(),
            label: if rng.bernoulli(rate) { 1 - ex.label } else { ex.label },
        })
        .collect()
}

pub fn write_tsv(path: &Path, rows: &[RawExample]) {
    let mut s = String::from("sentence\tlabel\n");
    for r in rows {
        s.push_str(&format!("{}\t{}\n", r.sentence, r.label));
    }
    std::fs::write(path, s).unwrap();
}

/// Writes `train.tsv`, `dev.tsv`, `test.tsv` into `dir`.
pub fn write_splits(dir: &Path, train: &[RawExample], dev: &[RawExample], test: &[RawExample]) {
    write_tsv(&dir.join("train.tsv"), train);
    write_tsv(&dir.join("dev.tsv"), dev);
    write_tsv(&dir.join("test.tsv"), test);
}

/// Where the SST-2 TSVs are expected: `$SST2_DIR`, else `data/SST-2` under
/// the workspace root.
pub fn sst2_path() -> PathBuf {
    std::env::var_os("SST2_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/SST-2"))
}

pub fn sst2_dir() -> Option<PathBuf> {
    let dir = sst2_path();
    ["train.tsv", "dev.tsv", "test.tsv"]
        .iter()
        .all(|f| dir.join(f).is_file())
        .then_some(dir)
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}
