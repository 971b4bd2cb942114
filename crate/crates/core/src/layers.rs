//! Student architectures: BiLSTM, BiLSTM with attention pooling, and a
//! shallow text CNN.
//!
//! Sequence tensors are stored flattened as `[B·T × D]` with row `b·T + t`
//! holding position `t` of sentence `b`. Batches are right-padded; the
//! [`SeqMask`] carries each sentence's real length.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Rng, Tensor};

pub const PAD_ID: usize = 0;
/// Parameter count of the BERT-base teacher.
pub const TEACHER_PARAMS: f64 = 110e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Bilstm,
    BilstmAttn,
    Cnn,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Bilstm, Arch::BilstmAttn, Arch::Cnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Bilstm => "bilstm",
            Arch::BilstmAttn => "bilstm_attn",
            Arch::Cnn => "cnn",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" => Ok(Arch::Bilstm),
            "bilstm_attn" => Ok(Arch::BilstmAttn),
            "cnn" => Ok(Arch::Cnn),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected bilstm, bilstm_attn or cnn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// LSTM hidden size per direction.
    pub hidden_dim: usize,
    pub cnn_widths: Vec<usize>,
    /// Width of the dense layer between pooled CNN features and the logits.
    pub cnn_hidden: usize,
    pub cnn_dropout: f64,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn new(arch: Arch, vocab_size: usize) -> Self {
        ModelConfig {
            arch,
            vocab_size,
            embed_dim: 64,
            hidden_dim: 64,
            cnn_widths: vec![3, 4, 5],
            cnn_hidden: 64,
            cnn_dropout: 0.5,
            max_len: 128,
        }
    }

    pub fn widest_filter(&self) -> usize {
        self.cnn_widths.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must cover at least PAD and UNK");
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_len == 0 {
            return bad("dimensions must be positive");
        }
        if self.arch == Arch::Cnn {
            if self.cnn_widths.is_empty() || self.cnn_widths.contains(&0) {
                return bad("cnn_widths must be nonempty and positive");
            }
            if self.cnn_hidden == 0 {
                return bad("cnn_hidden must be positive");
            }
            if !(0.0..1.0).contains(&self.cnn_dropout) {
                return bad("cnn_dropout must lie in [0, 1)");
            }
            if self.widest_filter() > self.max_len {
                return bad("widest CNN filter exceeds max_len");
            }
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        let mut out = vec![("embedding".to_string(), vec![v, d])];
        match self.arch {
            Arch::Bilstm | Arch::BilstmAttn => {
                for dir in ["fwd", "bwd"] {
                    out.push((format!("lstm.{dir}.w_x"), vec![4 * h, d]));
                    out.push((format!("lstm.{dir}.w_h"), vec![4 * h, h]));
                    out.push((format!("lstm.{dir}.b"), vec![4 * h]));
                }
                if self.arch == Arch::BilstmAttn {
                    out.push(("attn.w".into(), vec![2 * h, 2 * h]));
                    out.push(("attn.b".into(), vec![2 * h]));
                    out.push(("attn.u_w".into(), vec![2 * h]));
                }
                out.push(("out.w".into(), vec![2, 2 * h]));
                out.push(("out.b".into(), vec![2]));
            }
            Arch::Cnn => {
                for (k, &w) in self.cnn_widths.iter().enumerate() {
                    out.push((format!("conv{k}.w"), vec![w, d]));
                    out.push((format!("conv{k}.b"), vec![1]));
                }
                let k = self.cnn_widths.len();
                out.push(("hidden.w".into(), vec![self.cnn_hidden, k]));
                out.push(("hidden.b".into(), vec![self.cnn_hidden]));
                out.push(("out.w".into(), vec![2, self.cnn_hidden]));
                out.push(("out.b".into(), vec![2]));
            }
        }
        out
    }
}

/// Right-padding mask for a `[B×T]` id matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqMask {
    batch: usize,
    seq_len: usize,
    lengths: Vec<usize>,
}

impl SeqMask {
    pub fn from_lengths(lengths: Vec<usize>, seq_len: usize) -> Result<Self> {
        if let Some(&l) = lengths.iter().find(|&&l| l > seq_len) {
            return Err(Error::Mask(format!("length {l} exceeds padded length {seq_len}")));
        }
        Ok(SeqMask {
            batch: lengths.len(),
            seq_len,
            lengths,
        })
    }

    /// Rejects any row that is not a run of `true` followed by `false`.
    pub fn from_bools(mask: &[bool], batch: usize, seq_len: usize) -> Result<Self> {
        if mask.len() != batch * seq_len {
            return Err(Error::Mask(format!(
                "{} flags for a {batch}x{seq_len} batch",
                mask.len()
            )));
        }
        let mut lengths = Vec::with_capacity(batch);
        for b in 0..batch {
            let row = &mask[b * seq_len..(b + 1) * seq_len];
            let len = row.iter().take_while(|&&m| m).count();
            if row[len..].iter().any(|&m| m) {
                return Err(Error::Mask(format!("row {b} is not right-padded")));
            }
            lengths.push(len);
        }
        Ok(SeqMask {
            batch,
            seq_len,
            lengths,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn is_real(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.batch)
            .flat_map(|b| (0..self.seq_len).map(move |t| (b, t)))
            .map(|(b, t)| self.is_real(b, t))
            .collect()
    }
}

/// Graph handles for one LSTM direction. Gates are packed in the order
/// input, forget, cell, output along the `4h` axis.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w: Var,
    pub b: Var,
    pub u_w: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DenseParams {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct CnnParams {
    /// `(filter [width × d], bias [1])` per kernel.
    pub kernels: Vec<(Var, Var)>,
}

/// Looks up `ids` (flattened `[B×T]`) in `table`. The PAD row gets no
/// gradient.
pub fn embed(g: &mut Graph<'_>, table: Var, ids: &[usize]) -> Result<Var> {
    g.gather_rows(table, ids, Some(PAD_ID))
}

fn lstm_direction(
    g: &mut Graph<'_>,
    x_proj: Var,
    mask: &SeqMask,
    p: &LstmParams,
    hidden: usize,
    reverse: bool,
) -> Result<(Vec<Var>, Var)> {
    let (batch, t_len) = (mask.batch(), mask.seq_len());
    let zeros = g.constant(Tensor::zeros(&[batch, hidden]))?;
    let mut h = zeros;
    let mut c = zeros;
    let mut outs = vec![zeros; t_len];
    let steps: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for t in steps {
        let keep: Vec<bool> = (0..batch).map(|b| mask.is_real(b, t)).collect();
        if !keep.iter().any(|&k| k) {
            continue;
        }
        let rows: Vec<usize> = (0..batch).map(|b| b * t_len + t).collect();
        let xt = g.gather_rows(x_proj, &rows, None)?;
        let ht = g.linear(h, p.w_h, None)?;
        let z = g.add(xt, ht)?;
        let i_pre = g.slice_cols(z, 0, hidden)?;
        let f_pre = g.slice_cols(z, hidden, hidden)?;
        let g_pre = g.slice_cols(z, 2 * hidden, hidden)?;
        let o_pre = g.slice_cols(z, 3 * hidden, hidden)?;
        let i_gate = g.sigmoid(i_pre)?;
        let f_gate = g.sigmoid(f_pre)?;
        let cell = g.tanh(g_pre)?;
        let o_gate = g.sigmoid(o_pre)?;
        let kept = g.mul(f_gate, c)?;
        let fresh = g.mul(i_gate, cell)?;
        let c_new = g.add(kept, fresh)?;
        let c_act = g.tanh(c_new)?;
        let h_new = g.mul(o_gate, c_act)?;
        if keep.iter().all(|&k| k) {
            c = c_new;
            h = h_new;
            outs[t] = h_new;
        } else {
            c = g.where_rows(&keep, c_new, c)?;
            h = g.where_rows(&keep, h_new, h)?;
            outs[t] = g.where_rows(&keep, h_new, zeros)?;
        }
    }
    Ok((outs, h))
}

/// Runs both LSTM directions over `x` (`[B·T × d]`).
///
/// Returns the per-position outputs `[B·T × 2h]` (zero at padding) and the
/// final vector `[B × 2h]`: forward state at the last real token next to
/// backward state at the first token. Padding never advances the state.
pub fn bilstm_forward(
    g: &mut Graph<'_>,
    x: Var,
    mask: &SeqMask,
    p: &BiLstmParams,
) -> Result<(Var, Var)> {
    let rows = g.value(x).shape()[0];
    if rows != mask.batch() * mask.seq_len() {
        return Err(Error::dim(
            "bilstm",
            format!("{rows} input rows for a {}x{} mask", mask.batch(), mask.seq_len()),
        ));
    }
    let fwd_proj = g.linear(x, p.fwd.w_x, Some(p.fwd.b))?;
    let bwd_proj = g.linear(x, p.bwd.w_x, Some(p.bwd.b))?;
    let (fwd_out, fwd_last) = lstm_direction(g, fwd_proj, mask, &p.fwd, p.hidden, false)?;
    let (bwd_out, bwd_last) = lstm_direction(g, bwd_proj, mask, &p.bwd, p.hidden, true)?;
    let fwd_seq = g.stack_time(&fwd_out)?;
    let bwd_seq = g.stack_time(&bwd_out)?;
    let seq = g.concat(&[fwd_seq, bwd_seq], 1)?;
    let last = g.concat(&[fwd_last, bwd_last], 1)?;
    Ok((seq, last))
}

/// Context-vector attention pooling over `seq` (`[B·T × D]`).
///
/// `u = tanh(seq·Wᵀ + b)`, score `= u·u_w`, softmax over the real tokens of
/// each sentence, and the pooled vector is the weighted sum of `seq` rows.
/// Returns `(pooled [B × D], weights [B × T])`.
pub fn attention_forward(
    g: &mut Graph<'_>,
    seq: Var,
    mask: &SeqMask,
    p: &AttentionParams,
) -> Result<(Var, Var)> {
    if mask.lengths().contains(&0) {
        return Err(Error::Mask("attention over a sentence with no tokens".into()));
    }
    let dim = g.value(p.u_w).numel();
    let u = g.linear(seq, p.w, Some(p.b))?;
    let u = g.tanh(u)?;
    let context = g.reshape(p.u_w, &[1, dim])?;
    let scores = g.linear(u, context, None)?;
    let scores = g.reshape(scores, &[mask.batch(), mask.seq_len()])?;
    let weights = g.masked_softmax_rows(scores, &mask.to_bools())?;
    let pooled = g.attention_pool(weights, seq)?;
    Ok((pooled, weights))
}

/// One conv filter per kernel along time, ReLU, then max over positions
/// whose window starts on a real token. Returns `[B × K]`.
pub fn cnn_forward(g: &mut Graph<'_>, x: Var, mask: &SeqMask, p: &CnnParams) -> Result<Var> {
    let widest = p
        .kernels
        .iter()
        .map(|(f, _)| g.value(*f).shape()[0])
        .max()
        .ok_or_else(|| Error::Config("CNN without kernels".into()))?;
    if mask.seq_len() < widest {
        return Err(Error::dim(
            "cnn",
            format!(
                "padded length {} shorter than widest filter {widest}",
                mask.seq_len()
            ),
        ));
    }
    if mask.lengths().contains(&0) {
        return Err(Error::Mask("CNN over a sentence with no tokens".into()));
    }
    let mut feats = Vec::with_capacity(p.kernels.len());
    for &(filter, bias) in &p.kernels {
        let conv = g.conv1d(x, filter, bias, mask.batch(), mask.seq_len())?;
        let act = g.relu(conv)?;
        feats.push(g.masked_max(act, mask.lengths())?);
    }
    g.concat(&feats, 1)
}

pub fn dense(g: &mut Graph<'_>, x: Var, p: &DenseParams) -> Result<Var> {
    g.linear(x, p.w, Some(p.b))
}

/// Inverted dropout. Identity in eval mode or at rate 0.
pub fn dropout(g: &mut Graph<'_>, x: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let scale: Vec<f64> = (0..n)
        .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(shape, scale)?)?;
    g.mul(x, m)
}

/// A built student: its configuration and parameter tensors in
/// [`ModelConfig::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    pub ratio_vs_teacher: f64,
}

fn init_bound(name: &str, shape: &[usize]) -> Option<f64> {
    let fan_in = match shape {
        [_] if name.ends_with("u_w") => shape[0],
        [_] => return None,
        [w, d] if name.starts_with("conv") => w * d,
        [_, cols] => *cols,
        _ => return None,
    };
    Some(1.0 / (fan_in as f64).sqrt())
}

/// Initializes a model: weights uniform in ±1/√fan_in, biases zero except
/// the LSTM forget-gate bias which starts at 1, PAD embedding row zero.
pub fn build_model(config: ModelConfig, rng: &mut Rng) -> Result<Model> {
    config.validate()?;
    let h = config.hidden_dim;
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape) in config.layout() {
        let mut t = match init_bound(&name, &shape) {
            Some(bound) => Tensor::uniform(&shape, bound, rng),
            None => Tensor::zeros(&shape),
        };
        if name == "embedding" {
            let d = shape[1];
            t.data_mut()[PAD_ID * d..(PAD_ID + 1) * d].fill(0.0);
        }
        if name.starts_with("lstm.") && name.ends_with(".b") {
            t.data_mut()[h..2 * h].fill(1.0);
        }
        names.push(name);
        params.push(t);
    }
    Ok(Model {
        config,
        names,
        params,
    })
}

impl Model {
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len()
            || layout
                .iter()
                .zip(&params)
                .any(|((_, shape), t)| shape.as_slice() != t.shape())
        {
            return Err(Error::Config("parameter shapes do not match the model layout".into()));
        }
        let names = layout.into_iter().map(|(n, _)| n).collect();
        Ok(Model {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn register<'p>(&'p self, g: &mut Graph<'p>) -> Result<Vec<Var>> {
        self.params.iter().map(|p| g.param(p)).collect()
    }

    /// Logits `[B × 2]` for a batch. `vars` are this model's parameters on
    /// `g`, in layout order (see [`Model::register`]).
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        vars: &[Var],
        ids: &[usize],
        mask: &SeqMask,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        forward_with(&self.config, g, vars, ids, mask, mode, rng)
    }

    /// Eval-mode logits as a plain tensor.
    pub fn logits(&self, ids: &[usize], mask: &SeqMask) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g)?;
        let mut rng = Rng::new(0);
        let out = self.forward(&mut g, &vars, ids, mask, Mode::Eval, &mut rng)?;
        Ok(g.value(out).clone())
    }
}

/// The forward computation for `config`, usable with parameters that are
/// borrowed (training) or owned (gradient checking).
pub fn forward_with(
    config: &ModelConfig,
    g: &mut Graph<'_>,
    vars: &[Var],
    ids: &[usize],
    mask: &SeqMask,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    if vars.len() != config.layout().len() {
        return Err(Error::Config(format!(
            "{} parameter handles for a layout of {}",
            vars.len(),
            config.layout().len()
        )));
    }
    if ids.len() != mask.batch() * mask.seq_len() {
        return Err(Error::dim(
            "forward",
            format!("{} ids for a {}x{} mask", ids.len(), mask.batch(), mask.seq_len()),
        ));
    }
    let x = embed(g, vars[0], ids)?;
    match config.arch {
        Arch::Bilstm | Arch::BilstmAttn => {
            let lstm = BiLstmParams {
                fwd: LstmParams {
                    w_x: vars[1],
                    w_h: vars[2],
                    b: vars[3],
                },
                bwd: LstmParams {
                    w_x: vars[4],
                    w_h: vars[5],
                    b: vars[6],
                },
                hidden: config.hidden_dim,
            };
            let (seq, last) = bilstm_forward(g, x, mask, &lstm)?;
            let (features, head) = if config.arch == Arch::BilstmAttn {
                let attn = AttentionParams {
                    w: vars[7],
                    b: vars[8],
                    u_w: vars[9],
                };
                (attention_forward(g, seq, mask, &attn)?.0, 10)
            } else {
                (last, 7)
            };
            dense(
                g,
                features,
                &DenseParams {
                    w: vars[head],
                    b: vars[head + 1],
                },
            )
        }
        Arch::Cnn => {
            let k = config.cnn_widths.len();
            let cnn = CnnParams {
                kernels: (0..k).map(|i| (vars[1 + 2 * i], vars[2 + 2 * i])).collect(),
            };
            let feats = cnn_forward(g, x, mask, &cnn)?;
            let feats = dropout(g, feats, config.cnn_dropout, mode, rng)?;
            let hidden = dense(
                g,
                feats,
                &DenseParams {
                    w: vars[1 + 2 * k],
                    b: vars[2 + 2 * k],
                },
            )?;
            let hidden = g.relu(hidden)?;
            dense(
                g,
                hidden,
                &DenseParams {
                    w: vars[3 + 2 * k],
                    b: vars[4 + 2 * k],
                },
            )
        }
    }
}

/// Trainable element count (PAD row excluded) and the teacher/student ratio.
pub fn count_params(model: &Model) -> ParamCount {
    count_params_for(model.config())
}

pub fn count_params_for(config: &ModelConfig) -> ParamCount {
    let all: usize = config
        .layout()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    let total = all - config.embed_dim;
    ParamCount {
        total,
        ratio_vs_teacher: TEACHER_PARAMS / total as f64,
    }
}
