//! Baseline and distillation training loops, evaluation, and metrics.

use std::path::Path;

use crate::data::{
    build_vocab, encode_split, load_split, make_batches, LogitCache, RawExample, Split,
    TokenizedExample, Vocabulary,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{RunMode, TrainConfig};
use crate::harness::report::RunReport;
use crate::layers::{build_model, count_params, Mode, Model};
use crate::objectives::{adam_step, cross_entropy, distill_loss, steplr_update, AdamState, DistillWeights, StepLrState};
use crate::tensor::{Rng, Tensor};

/// Tokenized train/dev/test splits sharing one vocabulary built from train.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<TokenizedExample>,
    pub dev: Vec<TokenizedExample>,
    pub test: Vec<TokenizedExample>,
    /// Rows in the train file before any `train_limit` truncation.
    pub train_rows: usize,
}

impl Dataset {
    pub fn from_raw(
        train: &[RawExample],
        dev: &[RawExample],
        test: &[RawExample],
        max_len: usize,
        min_freq: usize,
    ) -> Result<Self> {
        let vocab = build_vocab(train, min_freq)?;
        Ok(Dataset {
            train_rows: train.len(),
            train: encode_split(train, &vocab, max_len),
            dev: encode_split(dev, &vocab, max_len),
            test: encode_split(test, &vocab, max_len),
            vocab,
        })
    }

    /// Loads `train.tsv`, `dev.tsv`, `test.tsv` from `dir`. `train_limit`
    /// keeps only the first rows of train (vocabulary included).
    pub fn load(dir: &Path, max_len: usize, min_freq: usize, train_limit: Option<usize>) -> Result<Self> {
        let mut train = load_split(&Split::Train.path_in(dir))?;
        let rows = train.len();
        if let Some(n) = train_limit {
            train.truncate(n);
        }
        let dev = load_split(&Split::Dev.path_in(dir))?;
        let test = load_split(&Split::Test.path_in(dir))?;
        let mut data = Dataset::from_raw(&train, &dev, &test, max_len, min_freq)?;
        data.train_rows = rows;
        Ok(data)
    }

    pub fn split(&self, split: Split) -> &[TokenizedExample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dim(
            "accuracy",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Config("accuracy of an empty set".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Class 1 only when its logit is strictly larger; ties go to class 0.
pub fn argmax2(logits: &Tensor) -> Vec<usize> {
    (0..logits.as_matrix_dims().0)
        .map(|r| usize::from(logits.get2(r, 1) > logits.get2(r, 0)))
        .collect()
}

const EVAL_BATCH: usize = 64;

pub fn predict(model: &Model, examples: &[TokenizedExample]) -> Result<Vec<usize>> {
    let min_len = model.config().widest_filter();
    let batches = make_batches(examples, EVAL_BATCH, false, &mut Rng::new(0), min_len)?;
    let mut out = Vec::with_capacity(examples.len());
    for b in &batches {
        out.extend(argmax2(&model.logits(&b.ids, &b.mask)?));
    }
    Ok(out)
}

/// Eval-mode accuracy of `model` on gold labels.
pub fn evaluate_model(model: &Model, examples: &[TokenizedExample]) -> Result<f64> {
    let preds = predict(model, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    accuracy(&preds, &labels)
}

/// Accuracy of a checkpoint on already tokenized examples.
pub fn evaluate(checkpoint: &Checkpoint, examples: &[TokenizedExample]) -> Result<f64> {
    evaluate_model(&checkpoint.model, examples)
}

/// Tokenizes a raw split with the checkpoint's own vocabulary and scores it.
pub fn evaluate_raw(checkpoint: &Checkpoint, raw: &[RawExample]) -> Result<f64> {
    let examples = encode_split(raw, &checkpoint.vocab, checkpoint.model.config().max_len);
    evaluate(checkpoint, &examples)
}

pub fn train_baseline(cfg: &TrainConfig, data: &Dataset) -> Result<(Checkpoint, RunReport)> {
    if cfg.mode != RunMode::Baseline {
        return Err(Error::Config("train_baseline needs mode = baseline".into()));
    }
    run(cfg, data, None)
}

/// Distillation run. Every training example must have a cached teacher
/// output; this is checked before the first epoch. Dev and test are scored
/// on gold labels only.
pub fn train_distill(
    cfg: &TrainConfig,
    data: &Dataset,
    cache: &LogitCache,
) -> Result<(Checkpoint, RunReport)> {
    if cfg.mode != RunMode::Distill {
        return Err(Error::Config("train_distill needs mode = distill".into()));
    }
    run(cfg, data, Some(cache))
}

fn run(cfg: &TrainConfig, data: &Dataset, cache: Option<&LogitCache>) -> Result<(Checkpoint, RunReport)> {
    cfg.validate()?;
    if data.train.is_empty() || data.dev.is_empty() || data.test.is_empty() {
        return Err(Error::EmptyCorpus("train, dev and test must all be nonempty".into()));
    }

    let mut train = data.train.clone();
    let weights = match cache {
        Some(cache) => {
            let split = Split::Train.as_str();
            cache.attach(split, &mut train)?;
            if let Some(cov) = cache.summary().get(split) {
                if cov.max_id >= data.train_rows {
                    return Err(Error::Cache(format!(
                        "cache holds train id {} but the split has only {} rows",
                        cov.max_id, data.train_rows
                    )));
                }
            }
            Some(DistillWeights::new(cfg.alpha)?)
        }
        None => None,
    };

    let root = Rng::new(cfg.seed);
    let mut init_rng = root.fork(0);
    let mut shuffle_rng = root.fork(1);
    let mut dropout_rng = root.fork(2);

    let mut model = build_model(cfg.model_config(data.vocab.len()), &mut init_rng)?;
    let min_len = model.config().widest_filter();
    let schedule = StepLrState::new(cfg.lr, cfg.gamma, cfg.step_size)?;
    let mut adam = AdamState::new(cfg.lr);

    let mut train_losses = Vec::with_capacity(cfg.epochs);
    let mut dev_accs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;

    for epoch in 0..cfg.epochs {
        adam.lr = steplr_update(&schedule, epoch);
        let batches = make_batches(&train, cfg.batch_size, true, &mut shuffle_rng, min_len)?;
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let diverged = |e: Error| match e {
                Error::NonFinite { op } => Error::Diverged {
                    epoch: epoch + 1,
                    batch: bi,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            };
            let (loss, grads) = {
                let mut g = Graph::new();
                let vars = model.register(&mut g)?;
                let logits = model
                    .forward(&mut g, &vars, &batch.ids, &batch.mask, Mode::Train, &mut dropout_rng)
                    .map_err(diverged)?;
                let loss = match weights {
                    None => cross_entropy(&mut g, logits, &batch.labels),
                    Some(w) => {
                        let teacher = batch.teacher.as_ref().ok_or_else(|| Error::MissingLogits {
                            split: Split::Train.as_str().into(),
                            id: batch.example_ids[0],
                        })?;
                        distill_loss(&mut g, logits, &batch.labels, teacher, w)
                    }
                }
                .map_err(diverged)?;
                let value = g.value(loss).data()[0];
                let mut grads = g.backward(loss).map_err(diverged)?;
                let grads: Vec<Tensor> = vars
                    .iter()
                    .zip(model.params())
                    .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                    .collect();
                (value, grads)
            };
            adam_step(model.params_mut(), &grads, &mut adam).map_err(diverged)?;
            loss_sum += loss * batch.len() as f64;
        }
        train_losses.push(loss_sum / train.len() as f64);
        let dev_acc = evaluate_model(&model, &data.dev)?;
        dev_accs.push(dev_acc);
        if best.as_ref().map_or(true, |(_, acc, _)| dev_acc > *acc) {
            best = Some((epoch + 1, dev_acc, model.clone()));
        }
    }

    let (selected_epoch, selected_dev_acc, selected) = match best {
        Some(b) => b,
        None => {
            let acc = evaluate_model(&model, &data.dev)?;
            (0, acc, model)
        }
    };
    let test_acc = evaluate_model(&selected, &data.test)?;
    let count = count_params(&selected);
    let report = RunReport {
        arch: cfg.arch,
        mode: cfg.mode,
        alpha: cfg.effective_alpha(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        train_loss_per_epoch: train_losses,
        dev_acc_per_epoch: dev_accs,
        selected_epoch,
        selected_dev_acc,
        test_acc,
        param_count: count.total,
        param_ratio: count.ratio_vs_teacher,
    };
    let checkpoint = Checkpoint {
        train_config: cfg.clone(),
        vocab: data.vocab.clone(),
        model: selected,
        epoch: selected_epoch,
        dev_acc: selected_dev_acc,
    };
    Ok((checkpoint, report))
}
