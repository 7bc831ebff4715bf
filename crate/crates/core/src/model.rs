//! A small token-sequence transformer split at a configurable block.
//!
//! Upstream parameters (`theta1`) are the token and positional embeddings plus
//! blocks `1..=split_layer`; downstream parameters (`theta2`) are the remaining
//! blocks and the readout head. Each block is single-head causal softmax
//! attention with a residual connection followed by a two-layer MLP with a
//! residual connection. There are no normalization layers.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamVec, Tensor};

const CAUSAL_MASK: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Answer-class readout from the final position.
    Classification,
    /// Next-token readout at every position.
    Autoregressive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    /// `x * sigmoid(x)`; used where the downstream map must be smooth.
    Silu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub split_layer: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub mlp_hidden: usize,
    pub activation: Activation,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 128,
            embed_dim: 32,
            num_blocks: 4,
            split_layer: 2,
            max_seq_len: 32,
            num_classes: 5,
            mlp_hidden: 64,
            activation: Activation::Relu,
            mode: Mode::Classification,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("vocab-size", self.vocab_size),
            ("embed-dim", self.embed_dim),
            ("num-blocks", self.num_blocks),
            ("max-seq-len", self.max_seq_len),
            ("num-classes", self.num_classes),
            ("mlp-hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.split_layer < 1 || self.split_layer + 1 > self.num_blocks {
            bad.push(format!(
                "split-layer {} must lie in [1, {}]",
                self.split_layer,
                self.num_blocks.saturating_sub(1)
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Width of the readout head.
    pub fn head_width(&self) -> usize {
        match self.mode {
            Mode::Classification => self.num_classes,
            Mode::Autoregressive => self.vocab_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    /// One target token per input position.
    NextTokens(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedSequence {
    pub ids: Vec<usize>,
    pub label: Label,
}

impl TokenizedSequence {
    pub fn classification(ids: Vec<usize>, class: usize) -> Self {
        TokenizedSequence {
            ids,
            label: Label::Class(class),
        }
    }

    /// Shifted next-token sequence: inputs `ids[..n-1]`, targets `ids[1..]`.
    pub fn autoregressive(ids: &[usize]) -> Self {
        TokenizedSequence {
            ids: ids[..ids.len() - 1].to_vec(),
            label: Label::NextTokens(ids[1..].to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::NextTokens(_) => None,
        }
    }
}

// ── parameter containers ─────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

const BLOCK_NAMES: [&str; 8] = ["wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"];

impl<T> BlockParams<T> {
    fn refs(&self) -> [&T; 8] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Self {
        let mut next = || it.next().expect("block parameter count");
        BlockParams {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        }
    }

    fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> BlockParams<U> {
        let mut it = self.refs().into_iter().map(&mut f).collect::<Vec<_>>().into_iter();
        BlockParams::from_iter(&mut it)
    }
}

/// Upstream parameters: embeddings and blocks `1..=split_layer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Upstream<T> {
    pub embed: T,
    pub pos: T,
    pub blocks: Vec<BlockParams<T>>,
}

/// Downstream parameters: blocks after the split and the readout head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Downstream<T> {
    pub blocks: Vec<BlockParams<T>>,
    pub head_w: T,
    pub head_b: T,
}

impl<T: Clone> Upstream<T> {
    pub fn to_vec(&self) -> Vec<T> {
        let mut out = vec![self.embed.clone(), self.pos.clone()];
        for b in &self.blocks {
            out.extend(b.refs().into_iter().cloned());
        }
        out
    }

    pub fn from_vec(v: Vec<T>, blocks: usize) -> Self {
        let mut it = v.into_iter();
        let embed = it.next().expect("embed");
        let pos = it.next().expect("pos");
        let blocks = (0..blocks).map(|_| BlockParams::from_iter(&mut it)).collect();
        Upstream { embed, pos, blocks }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Upstream<U> {
        Upstream {
            embed: f(&self.embed),
            pos: f(&self.pos),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["embed".to_string(), "pos".to_string()];
        for i in 0..self.blocks.len() {
            out.extend(BLOCK_NAMES.iter().map(|n| format!("block{}.{n}", i + 1)));
        }
        out
    }
}

impl<T: Clone> Downstream<T> {
    pub fn to_vec(&self) -> Vec<T> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.refs().into_iter().cloned());
        }
        out.push(self.head_w.clone());
        out.push(self.head_b.clone());
        out
    }

    pub fn from_vec(v: Vec<T>, blocks: usize) -> Self {
        let mut it = v.into_iter();
        let blocks = (0..blocks).map(|_| BlockParams::from_iter(&mut it)).collect();
        let head_w = it.next().expect("head_w");
        let head_b = it.next().expect("head_b");
        Downstream {
            blocks,
            head_w,
            head_b,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Downstream<U> {
        Downstream {
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    /// Names use global block numbering starting after the split layer.
    pub fn names(&self, split_layer: usize) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.blocks.len() {
            out.extend(BLOCK_NAMES.iter().map(|n| format!("block{}.{n}", split_layer + i + 1)));
        }
        out.push("head.w".into());
        out.push("head.b".into());
        out
    }
}

impl Upstream<Tensor> {
    pub fn leaves(&self, g: &mut Graph) -> Upstream<Var> {
        self.map(|t| g.leaf(t.clone()))
    }
}

impl Downstream<Tensor> {
    pub fn leaves(&self, g: &mut Graph) -> Downstream<Var> {
        self.map(|t| g.leaf(t.clone()))
    }

    pub fn as_param_vec(&self) -> ParamVec {
        ParamVec(self.to_vec())
    }
}

// ── graph builders ───────────────────────────────────────────────────────

fn block_graph(g: &mut Graph, cfg: &ModelConfig, b: &BlockParams<Var>, x: Var) -> Var {
    let t = g.value(x).rows();
    let q = g.matmul(x, b.wq);
    let k = g.matmul(x, b.wk);
    let v = g.matmul(x, b.wv);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (cfg.embed_dim as f64).sqrt());
    let mut mask = Tensor::zeros(t, t);
    for i in 0..t {
        for j in i + 1..t {
            mask.set(i, j, CAUSAL_MASK);
        }
    }
    let mask = g.leaf(mask);
    let scores = g.add(scores, mask);
    let attn = g.softmax_rows(scores);
    let mixed = g.matmul(attn, v);
    let out = g.matmul(mixed, b.wo);
    let x = g.add(x, out);

    let h = g.matmul(x, b.w1);
    let h = g.add_row(h, b.b1);
    let h = match cfg.activation {
        Activation::Relu => g.relu(h),
        Activation::Silu => g.silu(h),
    };
    let h = g.matmul(h, b.w2);
    let h = g.add_row(h, b.b2);
    g.add(x, h)
}

/// Hidden states after the split layer, shape `T x d`.
pub fn upstream_graph(g: &mut Graph, cfg: &ModelConfig, p: &Upstream<Var>, ids: &[usize]) -> Var {
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = g.gather_rows(p.embed, ids);
    let pos = g.gather_rows(p.pos, &positions);
    let mut x = g.add(tok, pos);
    for b in &p.blocks {
        x = block_graph(g, cfg, b, x);
    }
    x
}

/// Logits from split-layer hidden states: `1 x C` (classification) or
/// `T x V` (autoregressive).
pub fn downstream_logits(g: &mut Graph, cfg: &ModelConfig, p: &Downstream<Var>, hidden: Var) -> Var {
    let mut x = hidden;
    for b in &p.blocks {
        x = block_graph(g, cfg, b, x);
    }
    let readout = match cfg.mode {
        Mode::Classification => {
            let last = g.value(x).rows() - 1;
            g.gather_rows(x, &[last])
        }
        Mode::Autoregressive => x,
    };
    let logits = g.matmul(readout, p.head_w);
    g.add_row(logits, p.head_b)
}

/// Summed cross-entropy of the logits against the label.
pub fn loss_graph(g: &mut Graph, cfg: &ModelConfig, logits: Var, label: &Label) -> Result<Var> {
    let width = cfg.head_width();
    match (cfg.mode, label) {
        (Mode::Classification, Label::Class(c)) => {
            if *c >= width {
                return Err(Error::LabelOutOfRange {
                    label: *c,
                    classes: width,
                });
            }
            Ok(g.cross_entropy(logits, &[*c]))
        }
        (Mode::Autoregressive, Label::NextTokens(targets)) => {
            if targets.len() != g.value(logits).rows() {
                return Err(Error::shape(
                    "loss",
                    format!("{} targets for {} positions", targets.len(), g.value(logits).rows()),
                ));
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= width) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: width,
                });
            }
            Ok(g.cross_entropy(logits, targets))
        }
        (Mode::Classification, _) => Err(Error::WrongMode {
            expected: "autoregressive",
        }),
        (Mode::Autoregressive, _) => Err(Error::WrongMode {
            expected: "classification",
        }),
    }
}

// ── the model ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    pub config: ModelConfig,
    pub theta1: Upstream<Tensor>,
    pub theta2: Downstream<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Set from the run seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub final_accuracy: f64,
}

fn init_block<R: rand::Rng>(cfg: &ModelConfig, rng: &mut R) -> BlockParams<Tensor> {
    let d = cfg.embed_dim;
    let m = cfg.mlp_hidden;
    let sd = 1.0 / (d as f64).sqrt();
    let out_scale = 1.0 / (2.0 * cfg.num_blocks as f64).sqrt();
    BlockParams {
        wq: Tensor::randn(d, d, sd, rng),
        wk: Tensor::randn(d, d, sd, rng),
        wv: Tensor::randn(d, d, sd, rng),
        wo: Tensor::randn(d, d, sd * out_scale, rng),
        w1: Tensor::randn(d, m, sd, rng),
        b1: Tensor::zeros(1, m),
        w2: Tensor::randn(m, d, out_scale / (m as f64).sqrt(), rng),
        b2: Tensor::zeros(1, d),
    }
}

impl SplitModel {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let embed = Tensor::randn(config.vocab_size, d, 1.0, &mut rng);
        let pos = Tensor::randn(config.max_seq_len, d, 0.5, &mut rng);
        let up_blocks = (0..config.split_layer).map(|_| init_block(&config, &mut rng)).collect();
        let down_blocks = (config.split_layer..config.num_blocks)
            .map(|_| init_block(&config, &mut rng))
            .collect();
        let width = config.head_width();
        let head_w = Tensor::randn(d, width, 1.0 / (d as f64).sqrt(), &mut rng);
        let head_b = Tensor::zeros(1, width);
        Ok(SplitModel {
            theta1: Upstream {
                embed,
                pos,
                blocks: up_blocks,
            },
            theta2: Downstream {
                blocks: down_blocks,
                head_w,
                head_b,
            },
            config,
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros_like(&self) -> Self {
        SplitModel {
            config: self.config.clone(),
            theta1: self.theta1.map(Tensor::zeros_like),
            theta2: self.theta2.map(Tensor::zeros_like),
        }
    }

    pub fn validate_sequence(&self, seq: &TokenizedSequence) -> Result<()> {
        if seq.ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if seq.ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq.ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn theta1_count(&self) -> usize {
        self.theta1.to_vec().iter().map(Tensor::len).sum()
    }

    pub fn theta2_count(&self) -> usize {
        self.theta2.to_vec().iter().map(Tensor::len).sum()
    }

    /// Split-layer hidden states `h^(l)`, shape `T x d`.
    pub fn forward_upstream(&self, seq: &TokenizedSequence) -> Result<Tensor> {
        self.validate_sequence(seq)?;
        let mut g = Graph::new();
        let p = self.theta1.leaves(&mut g);
        let h = upstream_graph(&mut g, &self.config, &p, &seq.ids);
        Ok(g.value(h).clone())
    }

    /// Loss and logits from split-layer hidden states.
    pub fn forward_downstream(&self, hidden: &Tensor, label: &Label) -> Result<(f64, Tensor)> {
        self.check_hidden(hidden)?;
        let mut g = Graph::new();
        let p = self.theta2.leaves(&mut g);
        let h = g.leaf(hidden.clone());
        let logits = downstream_logits(&mut g, &self.config, &p, h);
        let loss = loss_graph(&mut g, &self.config, logits, label)?;
        Ok((g.value(loss).item(), g.value(logits).clone()))
    }

    pub(crate) fn check_hidden(&self, hidden: &Tensor) -> Result<()> {
        let (t, d) = hidden.dims2();
        if d != self.config.embed_dim || t > self.config.max_seq_len {
            return Err(Error::shape(
                "forward_downstream",
                format!("hidden {t}x{d}, model width {}", self.config.embed_dim),
            ));
        }
        Ok(())
    }

    pub fn logits(&self, seq: &TokenizedSequence) -> Result<Tensor> {
        let h = self.forward_upstream(seq)?;
        let mut g = Graph::new();
        let p = self.theta2.leaves(&mut g);
        let hv = g.leaf(h);
        let logits = downstream_logits(&mut g, &self.config, &p, hv);
        Ok(g.value(logits).clone())
    }

    pub fn loss(&self, seq: &TokenizedSequence) -> Result<f64> {
        let h = self.forward_upstream(seq)?;
        Ok(self.forward_downstream(&h, &seq.label)?.0)
    }

    /// Argmax class of a classification model.
    pub fn predict(&self, seq: &TokenizedSequence) -> Result<usize> {
        Ok(argmax(self.logits(seq)?.data()))
    }

    /// Next-token cross-entropy at each position; sums to the sequence loss.
    pub fn per_token_ar_losses(&self, seq: &TokenizedSequence) -> Result<Vec<f64>> {
        if self.config.mode != Mode::Autoregressive {
            return Err(Error::WrongMode {
                expected: "autoregressive",
            });
        }
        let Label::NextTokens(targets) = &seq.label else {
            return Err(Error::WrongMode {
                expected: "classification",
            });
        };
        if seq.ids.len() < 2 {
            return Err(Error::Invalid("per-token losses need at least two tokens".into()));
        }
        let h = self.forward_upstream(seq)?;
        let mut g = Graph::new();
        let p = self.theta2.leaves(&mut g);
        let hv = g.leaf(h);
        let logits = downstream_logits(&mut g, &self.config, &p, hv);
        loss_graph(&mut g, &self.config, logits, &seq.label)?;
        let rows = g.cross_entropy_rows(logits, targets);
        Ok(g.value(rows).data().to_vec())
    }

    /// Gradient of one example's loss with respect to all parameters,
    /// `theta1` tensors first.
    pub fn full_gradient(&self, seq: &TokenizedSequence) -> Result<(f64, ParamVec)> {
        self.validate_sequence(seq)?;
        let mut g = Graph::new();
        let p1 = self.theta1.leaves(&mut g);
        let p2 = self.theta2.leaves(&mut g);
        let h = upstream_graph(&mut g, &self.config, &p1, &seq.ids);
        let logits = downstream_logits(&mut g, &self.config, &p2, h);
        let loss = loss_graph(&mut g, &self.config, logits, &seq.label)?;
        let mut vars = p1.to_vec();
        vars.extend(p2.to_vec());
        let grads = g.grad_values(loss, &vars)?;
        Ok((g.value(loss).item(), ParamVec(grads)))
    }

    fn apply_update(&mut self, grad: &ParamVec, lr: f64) {
        let n1 = 2 + 8 * self.theta1.blocks.len();
        let mut t1 = self.theta1.to_vec();
        let mut t2 = self.theta2.to_vec();
        for (p, g) in t1.iter_mut().chain(t2.iter_mut()).zip(&grad.0) {
            p.axpy(-lr, g);
        }
        debug_assert_eq!(t1.len(), n1);
        self.theta1 = Upstream::from_vec(t1, self.config.split_layer);
        self.theta2 = Downstream::from_vec(t2, self.config.num_blocks - self.config.split_layer);
    }

    /// Classification accuracy over a dataset.
    pub fn accuracy(&self, data: &[TokenizedSequence]) -> Result<f64> {
        let correct: Result<Vec<bool>> = data
            .par_iter()
            .map(|s| Ok(Some(self.predict(s)?) == s.class()))
            .collect();
        let correct = correct?;
        Ok(correct.iter().filter(|&&c| c).count() as f64 / data.len().max(1) as f64)
    }
}

/// Minibatch SGD with a fixed step on the mean loss. Single-threaded and
/// deterministic in `hp.seed`.
pub fn train(
    model: &SplitModel,
    dataset: &[TokenizedSequence],
    hp: &TrainConfig,
) -> Result<(SplitModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if hp.batch_size == 0 {
        return Err(Error::Config("batch-size must be positive".into()));
    }
    let mut model = model.clone();
    let mut report = TrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let per_example: Result<Vec<(f64, ParamVec)>> =
                batch.iter().map(|&i| model.full_gradient(&dataset[i])).collect();
            let per_example = per_example?;
            let mut grad = ParamVec::zeros_like(&per_example[0].1);
            for (loss, g) in &per_example {
                total += loss;
                grad.axpy(1.0 / batch.len() as f64, g);
            }
            if !grad.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: f64::NAN,
                });
            }
            model.apply_update(&grad, hp.learning_rate);
        }
        let mean = total / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        report.epoch_loss.push(mean);
    }
    if model.config.mode == Mode::Classification {
        report.final_accuracy = model.accuracy(dataset)?;
    }
    Ok((model, report))
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
