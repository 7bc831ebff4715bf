//! TopK sparse autoencoder over split-layer activations.
//!
//! `encode` computes `TopK(W_enc (x - b_pre) + b_enc)` per position: the `k`
//! largest preactivations survive (ties to the lower index) and negative
//! survivors are clamped to zero. `decode` is `W_dec r + b_pre`.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{SplitModel, TokenizedSequence, downstream_logits, loss_graph};
use crate::optim::Adam;
use crate::tensor::{ParamVec, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeParams {
    /// `h x d`
    pub w_enc: Tensor,
    /// `1 x h`
    pub b_enc: Tensor,
    /// `d x h`
    pub w_dec: Tensor,
    /// `1 x d`
    pub b_pre: Tensor,
    pub k: usize,
}

/// Per-position sparse codes.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCode {
    /// `T x h`
    pub dense: Tensor,
    /// Surviving nonzero indices per position, ascending.
    pub active: Vec<Vec<usize>>,
}

impl SparseCode {
    pub fn positions(&self) -> usize {
        self.dense.rows()
    }

    pub fn width(&self) -> usize {
        self.dense.cols()
    }

    /// Features that are nonzero at some position.
    pub fn active_union(&self) -> Vec<usize> {
        let mut seen = vec![false; self.width()];
        for row in &self.active {
            for &j in row {
                seen[j] = true;
            }
        }
        (0..self.width()).filter(|&j| seen[j]).collect()
    }

    /// Number of nonzero (position, feature) entries.
    pub fn nnz(&self) -> usize {
        self.active.iter().map(Vec::len).sum()
    }
}

/// Mask of the surviving positive entries of each row of `pre`.
pub fn topk_mask(pre: &Tensor, k: usize) -> Tensor {
    let (t, h) = pre.dims2();
    let mut mask = Tensor::zeros(t, h);
    let mut order: Vec<usize> = (0..h).collect();
    for i in 0..t {
        let row = pre.row_slice(i);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in order.iter().take(k) {
            if row[j] > 0.0 {
                mask.set(i, j, 1.0);
            }
        }
        order.sort_unstable();
    }
    mask
}

impl SaeParams {
    pub fn latents(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d) = self.w_enc.dims2();
        if self.w_dec.dims2() != (d, h) || self.b_enc.dims2() != (1, h) || self.b_pre.dims2() != (1, d) {
            return Err(Error::shape(
                "sae",
                format!(
                    "w_enc {:?}, w_dec {:?}, b_enc {:?}, b_pre {:?}",
                    self.w_enc.shape(),
                    self.w_dec.shape(),
                    self.b_enc.shape(),
                    self.b_pre.shape()
                ),
            ));
        }
        if self.k == 0 || self.k > h {
            return Err(Error::Config(format!("k = {} must lie in [1, {h}]", self.k)));
        }
        if !self.w_dec.is_finite() {
            return Err(Error::Invalid("decoder has non-finite entries".into()));
        }
        Ok(())
    }

    /// Decoder columns initialized as random unit vectors, encoder tied to
    /// the decoder transpose, `b_pre` set to the activation mean.
    pub fn init(d: usize, h: usize, k: usize, mean: &Tensor, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w_dec = Tensor::randn(d, h, 1.0, &mut rng);
        for j in 0..h {
            let norm = (0..d).map(|i| w_dec.get(i, j).powi(2)).sum::<f64>().sqrt();
            for i in 0..d {
                w_dec.set(i, j, w_dec.get(i, j) / norm);
            }
        }
        let sae = SaeParams {
            w_enc: w_dec.transpose(),
            b_enc: Tensor::zeros(1, h),
            w_dec,
            b_pre: mean.clone().reshape(1, d),
            k,
        };
        sae.validate()?;
        Ok(sae)
    }

    /// Lossless bottleneck of width `2d`: codes are `[relu(x), relu(-x)]` and
    /// decoding subtracts the halves.
    pub fn identity(d: usize) -> Self {
        let h = 2 * d;
        let mut w_enc = Tensor::zeros(h, d);
        let mut w_dec = Tensor::zeros(d, h);
        for i in 0..d {
            w_enc.set(i, i, 1.0);
            w_enc.set(d + i, i, -1.0);
            w_dec.set(i, i, 1.0);
            w_dec.set(i, d + i, -1.0);
        }
        SaeParams {
            w_enc,
            b_enc: Tensor::zeros(1, h),
            w_dec,
            b_pre: Tensor::zeros(1, d),
            k: h,
        }
    }

    fn check_input(&self, hidden: &Tensor) -> Result<()> {
        if hidden.cols() != self.input_dim() {
            return Err(Error::shape(
                "sae",
                format!("input width {} for an SAE over width {}", hidden.cols(), self.input_dim()),
            ));
        }
        Ok(())
    }

    pub fn preactivations(&self, hidden: &Tensor) -> Result<Tensor> {
        self.check_input(hidden)?;
        let (t, d) = hidden.dims2();
        let mut centered = hidden.clone().reshape(t, d);
        for i in 0..t {
            for c in 0..d {
                centered.set(i, c, centered.get(i, c) - self.b_pre.data()[c]);
            }
        }
        let mut pre = centered.matmul(&self.w_enc.transpose());
        for i in 0..t {
            for j in 0..self.latents() {
                pre.set(i, j, pre.get(i, j) + self.b_enc.data()[j]);
            }
        }
        Ok(pre)
    }

    pub fn encode(&self, hidden: &Tensor) -> Result<SparseCode> {
        if self.k > self.latents() {
            return Err(Error::Config(format!("k = {} exceeds {} latents", self.k, self.latents())));
        }
        let pre = self.preactivations(hidden)?;
        let mask = topk_mask(&pre, self.k);
        let dense = pre.mul(&mask);
        let active = (0..dense.rows())
            .map(|i| {
                mask.row_slice(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| **m != 0.0)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        Ok(SparseCode { dense, active })
    }

    pub fn decode(&self, code: &Tensor) -> Result<Tensor> {
        if code.cols() != self.latents() {
            return Err(Error::shape(
                "decode",
                format!("code width {} for {} latents", code.cols(), self.latents()),
            ));
        }
        let mut out = code.matmul(&self.w_dec.transpose());
        let (t, d) = out.dims2();
        for i in 0..t {
            for c in 0..d {
                out.set(i, c, out.get(i, c) + self.b_pre.data()[c]);
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, hidden: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(hidden)?.dense)
    }

    pub(crate) fn to_vec(&self) -> Vec<Tensor> {
        vec![self.w_enc.clone(), self.b_enc.clone(), self.w_dec.clone(), self.b_pre.clone()]
    }

    pub(crate) fn from_vec(mut v: Vec<Tensor>, k: usize) -> Self {
        let b_pre = v.pop().expect("b_pre");
        let w_dec = v.pop().expect("w_dec");
        let b_enc = v.pop().expect("b_enc");
        let w_enc = v.pop().expect("w_enc");
        SaeParams {
            w_enc,
            b_enc,
            w_dec,
            b_pre,
            k,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        ["w_enc", "b_enc", "w_dec", "b_pre"]
            .into_iter()
            .map(String::from)
            .zip(self.to_vec())
            .collect()
    }
}

/// SAE parameters as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct SaeVars {
    pub w_enc: Var,
    pub b_enc: Var,
    pub w_dec: Var,
    pub b_pre: Var,
}

impl SaeVars {
    pub fn leaves(g: &mut Graph, sae: &SaeParams) -> Self {
        SaeVars {
            w_enc: g.leaf(sae.w_enc.clone()),
            b_enc: g.leaf(sae.b_enc.clone()),
            w_dec: g.leaf(sae.w_dec.clone()),
            b_pre: g.leaf(sae.b_pre.clone()),
        }
    }

    fn list(&self) -> [Var; 4] {
        [self.w_enc, self.b_enc, self.w_dec, self.b_pre]
    }
}

/// Graph form of `encode`; the TopK selection is a constant mask.
pub fn encode_graph(g: &mut Graph, p: &SaeVars, k: usize, x: Var) -> Var {
    let neg_pre = g.neg(p.b_pre);
    let centered = g.add_row(x, neg_pre);
    let enc_t = g.transpose(p.w_enc);
    let pre = g.matmul(centered, enc_t);
    let pre = g.add_row(pre, p.b_enc);
    let mask = topk_mask(g.value(pre), k);
    g.topk_mask(pre, mask)
}

pub fn decode_graph(g: &mut Graph, p: &SaeVars, code: Var) -> Var {
    let dec_t = g.transpose(p.w_dec);
    let out = g.matmul(code, dec_t);
    g.add_row(out, p.b_pre)
}

// ── orthogonality ───────────────────────────────────────────────────────

/// Centers each column and scales it to unit norm. Columns with zero
/// variance are left at zero and flagged `false`.
pub fn normalize_columns(a: &Tensor) -> (Tensor, Vec<bool>) {
    let (n, m) = a.dims2();
    let mut out = Tensor::zeros(n, m);
    let mut live = vec![false; m];
    for j in 0..m {
        let mean = (0..n).map(|i| a.get(i, j)).sum::<f64>() / n as f64;
        let raw: f64 = (0..n).map(|i| a.get(i, j).powi(2)).sum();
        let ss: f64 = (0..n).map(|i| (a.get(i, j) - mean).powi(2)).sum();
        if raw == 0.0 || ss <= 1e-24 * raw {
            continue;
        }
        live[j] = true;
        let inv = 1.0 / ss.sqrt();
        for i in 0..n {
            out.set(i, j, (a.get(i, j) - mean) * inv);
        }
    }
    (out, live)
}

/// Mean squared off-diagonal entry of the Gram matrix of centered,
/// unit-normalized feature columns, `sum_{i != j} G_ij^2 / (h (h - 1))`.
pub fn ortho_penalty(latents: &Tensor) -> Result<f64> {
    let (n, h) = latents.dims2();
    if n < 2 {
        return Err(Error::Invalid(format!("orthogonality penalty needs at least 2 rows, got {n}")));
    }
    if h < 2 {
        return Ok(0.0);
    }
    let (z, _) = normalize_columns(latents);
    let gram = z.transpose().matmul(&z);
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..h {
            if i != j {
                total += gram.get(i, j).powi(2);
            }
        }
    }
    Ok(total / (h * (h - 1)) as f64)
}

/// Differentiable form of [`ortho_penalty`] over a batch of codes.
pub fn ortho_penalty_graph(g: &mut Graph, z: Var) -> Var {
    let (n, h) = g.value(z).dims2();
    let (_, live) = normalize_columns(g.value(z));
    let live_row = Tensor::row(live.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect());
    let dead_row = live_row.map(|l| 1.0 - l);

    let col_sum = g.sum_rows(z);
    let mean = g.scale(col_sum, 1.0 / n as f64);
    let mean = g.broadcast_rows(mean, n);
    let centered = g.sub(z, mean);
    let sq = g.mul(centered, centered);
    let ss = g.sum_rows(sq);
    let pad = g.leaf(dead_row);
    let ss = g.add(ss, pad);
    let norm = g.sqrt(ss);
    let inv = g.recip(norm);
    let inv = g.mul_const(inv, live_row);
    let inv = g.broadcast_rows(inv, n);
    let zn = g.mul(centered, inv);
    let znt = g.transpose(zn);
    let gram = g.matmul(znt, zn);
    let off = g.mul_const(gram, Tensor::full(h, h, 1.0).sub(&Tensor::eye(h)));
    let off_sq = g.mul(off, off);
    let total = g.sum(off_sq);
    g.scale(total, 1.0 / (h * (h - 1)).max(1) as f64)
}

// ── inline insertion ────────────────────────────────────────────────────

/// A model with an SAE spliced in at the split layer.
#[derive(Clone, Copy, Debug)]
pub struct Inserted<'a> {
    pub model: &'a SplitModel,
    pub sae: &'a SaeParams,
}

/// Splices `sae` into `model`; the downstream half then reads
/// `decode(encode(h))` in place of `h`.
pub fn insert_inline<'a>(model: &'a SplitModel, sae: &'a SaeParams) -> Result<Inserted<'a>> {
    sae.validate()?;
    if sae.input_dim() != model.config.embed_dim {
        return Err(Error::shape(
            "insert_inline",
            format!("SAE width {} vs model width {}", sae.input_dim(), model.config.embed_dim),
        ));
    }
    Ok(Inserted { model, sae })
}

impl Inserted<'_> {
    pub fn codes(&self, seq: &TokenizedSequence) -> Result<SparseCode> {
        self.sae.encode(&self.model.forward_upstream(seq)?)
    }

    /// Loss and logits with the given code fed to the decoder.
    pub fn forward_code(&self, code: &Tensor, seq: &TokenizedSequence) -> Result<(f64, Tensor)> {
        let recon = self.sae.decode(code)?;
        self.model.forward_downstream(&recon, &seq.label)
    }

    pub fn forward(&self, seq: &TokenizedSequence) -> Result<(f64, Tensor)> {
        self.forward_code(&self.codes(seq)?.dense, seq)
    }

    /// Forward pass with latents outside `keep` zeroed before decoding.
    pub fn forward_masked(&self, seq: &TokenizedSequence, keep: &[bool]) -> Result<(f64, Tensor)> {
        if keep.len() != self.sae.latents() {
            return Err(Error::shape(
                "forward_masked",
                format!("mask of {} for {} latents", keep.len(), self.sae.latents()),
            ));
        }
        let mut code = self.codes(seq)?.dense;
        let h = code.cols();
        for (i, x) in code.data_mut().iter_mut().enumerate() {
            if !keep[i % h] {
                *x = 0.0;
            }
        }
        self.forward_code(&code, seq)
    }

    pub fn logits(&self, seq: &TokenizedSequence) -> Result<Tensor> {
        Ok(self.forward(seq)?.1)
    }

    pub fn predict(&self, seq: &TokenizedSequence) -> Result<usize> {
        Ok(crate::model::argmax(self.logits(seq)?.data()))
    }

    pub fn accuracy(&self, data: &[TokenizedSequence]) -> Result<f64> {
        let mut correct = 0;
        for s in data {
            if Some(self.predict(s)?) == s.class() {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len().max(1) as f64)
    }
}

// ── training ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct SaeConfig {
    /// Number of latents `h`.
    pub latents: usize,
    pub k: usize,
    pub ortho_weight: f64,
    /// Weight of the downstream task loss with the SAE inserted.
    pub task_weight: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of pooled positions held out for the MSE curve.
    pub holdout: f64,
    /// Set from the run seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        SaeConfig {
            latents: 256,
            k: 16,
            ortho_weight: 0.0,
            task_weight: 0.0,
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 128,
            holdout: 0.1,
            seed: 0,
        }
    }
}

impl SaeConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        let mut bad = Vec::new();
        if self.latents < d {
            bad.push(format!("latents {} must be at least the model width {d}", self.latents));
        }
        if self.k == 0 || self.k > self.latents {
            bad.push(format!("k {} must lie in [1, latents]", self.k));
        }
        if self.ortho_weight < 0.0 || self.task_weight < 0.0 {
            bad.push("ortho-weight and task-weight must be non-negative".into());
        }
        if self.batch_size < 2 {
            bad.push("batch-size must be at least 2".into());
        }
        if !(self.learning_rate > 0.0) {
            bad.push("learning-rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.holdout) {
            bad.push("holdout must lie in [0, 1)".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SaeReport {
    /// Held-out reconstruction MSE before training and after each epoch.
    pub heldout_mse: Vec<f64>,
    /// Mean training objective per epoch.
    pub train_loss: Vec<f64>,
}

/// Stacks the split-layer activations of every position in `data`.
pub fn pooled_activations(model: &SplitModel, data: &[TokenizedSequence]) -> Result<Tensor> {
    let d = model.config.embed_dim;
    let mut rows = Vec::new();
    for s in data {
        rows.extend_from_slice(model.forward_upstream(s)?.data());
    }
    if rows.is_empty() {
        return Err(Error::Invalid("no activations to pool".into()));
    }
    Ok(Tensor::matrix(rows.len() / d, d, rows))
}

/// Mean squared reconstruction error per element.
pub fn reconstruction_mse(sae: &SaeParams, acts: &Tensor) -> Result<f64> {
    let recon = sae.reconstruct(acts)?;
    Ok(recon.sub(acts).data().iter().map(|e| e * e).sum::<f64>() / acts.len() as f64)
}

fn rows_of(acts: &Tensor, idx: &[usize]) -> Tensor {
    let d = acts.cols();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(acts.row_slice(i));
    }
    Tensor::matrix(idx.len(), d, out)
}

/// Trains an SAE on the frozen model's split-layer activations with Adam.
pub fn train_sae(
    model: &SplitModel,
    data: &[TokenizedSequence],
    cfg: &SaeConfig,
) -> Result<(SaeParams, SaeReport)> {
    cfg.validate(model.config.embed_dim)?;
    let acts = pooled_activations(model, data)?;
    train_sae_on(&acts, cfg, Some((model, data)))
}

/// Trains an SAE on a fixed activation matrix. `task` supplies the model and
/// sequences for the joint task term when `task_weight > 0`.
pub fn train_sae_on(
    acts: &Tensor,
    cfg: &SaeConfig,
    task: Option<(&SplitModel, &[TokenizedSequence])>,
) -> Result<(SaeParams, SaeReport)> {
    let (n, d) = acts.dims2();
    cfg.validate(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let held = ((n as f64) * cfg.holdout).round() as usize;
    let (held_idx, train_idx) = order.split_at(held.min(n.saturating_sub(2)));
    let mut train_idx = train_idx.to_vec();
    let heldout = if held_idx.is_empty() {
        rows_of(acts, &train_idx)
    } else {
        rows_of(acts, held_idx)
    };

    let train_acts = rows_of(acts, &train_idx);
    let mean = {
        let mut m = vec![0.0; d];
        for i in 0..train_acts.rows() {
            for (c, x) in train_acts.row_slice(i).iter().enumerate() {
                m[c] += x / train_acts.rows() as f64;
            }
        }
        Tensor::row(m)
    };
    let mut sae = SaeParams::init(d, cfg.latents, cfg.k, &mean, cfg.seed.wrapping_add(1))?;
    let mut adam = Adam::new(&ParamVec(sae.to_vec()), cfg.learning_rate);
    let mut report = SaeReport {
        heldout_mse: vec![reconstruction_mse(&sae, &heldout)?],
        train_loss: Vec::new(),
    };

    let mut seq_order: Vec<usize> = task.map(|(_, s)| (0..s.len()).collect()).unwrap_or_default();
    let mut seq_cursor = 0;
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        seq_order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for batch in train_idx.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let x = rows_of(acts, batch);
            let mut g = Graph::new();
            let p = SaeVars::leaves(&mut g, &sae);
            let xv = g.leaf(x);
            let code = encode_graph(&mut g, &p, sae.k, xv);
            let recon = decode_graph(&mut g, &p, code);
            let err = g.sub(recon, xv);
            let sq = g.mul(err, err);
            let mut objective = g.mean(sq);
            if cfg.ortho_weight > 0.0 {
                let pen = ortho_penalty_graph(&mut g, code);
                let pen = g.scale(pen, cfg.ortho_weight);
                objective = g.add(objective, pen);
            }
            if cfg.task_weight > 0.0 {
                if let Some((model, seqs)) = task {
                    if !seqs.is_empty() {
                        let s = &seqs[seq_order[seq_cursor % seqs.len()]];
                        seq_cursor += 1;
                        let h = g.leaf(model.forward_upstream(s)?);
                        let c = encode_graph(&mut g, &p, sae.k, h);
                        let r = decode_graph(&mut g, &p, c);
                        let theta2 = model.theta2.leaves(&mut g);
                        let logits = downstream_logits(&mut g, &model.config, &theta2, r);
                        let task_loss = loss_graph(&mut g, &model.config, logits, &s.label)?;
                        let task_loss = g.scale(task_loss, cfg.task_weight);
                        objective = g.add(objective, task_loss);
                    }
                }
            }
            let loss = g.value(objective).item();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss;
            steps += 1;
            let grads = ParamVec(g.grad_values(objective, &p.list())?);
            let mut params = ParamVec(sae.to_vec());
            adam.step(&mut params, &grads);
            sae = SaeParams::from_vec(params.0, sae.k);
        }
        report.train_loss.push(total / steps.max(1) as f64);
        let mse = reconstruction_mse(&sae, &heldout)?;
        if !mse.is_finite() {
            return Err(Error::Divergence { epoch, loss: mse });
        }
        report.heldout_mse.push(mse);
    }
    Ok((sae, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Mode, ModelConfig};
    use proptest::prelude::*;

    fn toy_sae(pre_bias: [f64; 4]) -> SaeParams {
        SaeParams {
            w_enc: Tensor::matrix(4, 2, vec![0.0; 8]),
            b_enc: Tensor::row(pre_bias.to_vec()),
            w_dec: Tensor::matrix(2, 4, vec![1.0, 0.0, 2.0, -1.0, 0.0, 1.0, 0.5, 3.0]),
            b_pre: Tensor::row(vec![0.25, -0.5]),
            k: 2,
        }
    }

    #[test]
    fn topk_keeps_largest_values() {
        let sae = toy_sae([3.0, 1.0, -2.0, 5.0]);
        let code = sae.encode(&Tensor::zeros(1, 2)).unwrap();
        assert_eq!(code.dense.data(), &[3.0, 0.0, 0.0, 5.0]);
        assert_eq!(code.active, vec![vec![0, 3]]);
    }

    #[test]
    fn full_k_is_identity_on_positives() {
        let mut sae = toy_sae([3.0, 1.0, 2.0, 5.0]);
        sae.k = 4;
        let code = sae.encode(&Tensor::zeros(1, 2)).unwrap();
        assert_eq!(code.dense.data(), &[3.0, 1.0, 2.0, 5.0]);
    }

    #[test]
    fn negative_survivors_are_clamped() {
        let sae = toy_sae([-1.0, -3.0, 2.0, -0.5]);
        let code = sae.encode(&Tensor::zeros(1, 2)).unwrap();
        assert_eq!(code.dense.data(), &[0.0, 0.0, 2.0, 0.0]);
        assert_eq!(code.nnz(), 1);
    }

    #[test]
    fn k_above_latents_is_rejected() {
        let mut sae = toy_sae([0.0; 4]);
        sae.k = 5;
        assert!(sae.encode(&Tensor::zeros(1, 2)).is_err());
        assert!(sae.validate().is_err());
    }

    #[test]
    fn zero_code_decodes_to_bias() {
        let sae = toy_sae([0.0; 4]);
        assert_eq!(sae.decode(&Tensor::zeros(3, 4)).unwrap(), Tensor::matrix(3, 2, vec![0.25, -0.5, 0.25, -0.5, 0.25, -0.5]));
    }

    #[test]
    fn basis_code_decodes_to_column() {
        let sae = toy_sae([0.0; 4]);
        let mut e = Tensor::zeros(1, 4);
        e.set(0, 3, 1.0);
        assert_eq!(sae.decode(&e).unwrap().data(), &[-1.0 + 0.25, 3.0 - 0.5]);
    }

    #[test]
    fn identity_bottleneck_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(5, 6, 2.0, &mut rng);
        let sae = SaeParams::identity(6);
        assert!(sae.reconstruct(&x).unwrap().max_rel_err(&x, 1.0) < 1e-15);
    }

    #[test]
    fn dead_feature_column_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(4, 3, 1.0, &mut rng);
        let mean = Tensor::zeros(1, 3);
        let sae = SaeParams::init(3, 12, 2, &mean, 9).unwrap();
        let code = sae.encode(&x).unwrap();
        let active = code.active_union();
        let dead = (0..12).find(|j| !active.contains(j)).unwrap();
        let mut other = sae.clone();
        for i in 0..3 {
            other.w_dec.set(i, dead, 7.5);
        }
        assert_eq!(sae.decode(&code.dense).unwrap(), other.decode(&code.dense).unwrap());
    }

    #[test]
    fn graph_encoder_matches_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(6, 4, 1.0, &mut rng);
        let mut sae = SaeParams::init(4, 10, 3, &Tensor::row(vec![0.1, 0.0, -0.2, 0.3]), 2).unwrap();
        sae.b_enc = Tensor::randn(1, 10, 0.1, &mut rng);
        let mut g = Graph::new();
        let p = SaeVars::leaves(&mut g, &sae);
        let xv = g.leaf(x.clone());
        let c = encode_graph(&mut g, &p, 3, xv);
        let r = decode_graph(&mut g, &p, c);
        let code = sae.encode(&x).unwrap();
        assert!(g.value(c).max_rel_err(&code.dense, 1.0) < 1e-14);
        assert!(g.value(r).max_rel_err(&sae.decode(&code.dense).unwrap(), 1.0) < 1e-14);
    }

    #[test]
    fn ortho_penalty_cases() {
        // zero-mean orthogonal columns
        let orth = Tensor::matrix(4, 2, vec![1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0]);
        assert!(ortho_penalty(&orth).unwrap().abs() < 1e-15);
        assert!(ortho_penalty(&Tensor::zeros(1, 3)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ortho_penalty(&Tensor::randn(4, 6, 1.0, &mut rng)).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn two_identical_columns_give_two_over_pairs() {
        // column 0 and 1 identical; column 2 constant (excluded)
        let a = Tensor::matrix(4, 3, vec![1.0, 1.0, 3.0, 2.0, 2.0, 3.0, -1.0, -1.0, 3.0, 0.5, 0.5, 3.0]);
        let p = ortho_penalty(&a).unwrap();
        assert!((p - 2.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn penalty_graph_matches_numeric_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut z = Tensor::randn(6, 4, 1.0, &mut rng);
        for i in 0..6 {
            z.set(i, 3, 2.0);
        }
        let mut g = Graph::new();
        let zv = g.leaf(z.clone());
        let pen = ortho_penalty_graph(&mut g, zv);
        assert!((g.value(pen).item() - ortho_penalty(&z).unwrap()).abs() < 1e-14);
        let grad = g.grad_values(pen, &[zv]).unwrap().remove(0);
        let eps = 1e-6;
        for idx in [0, 5, 10, 17, 22] {
            let mut zp = z.clone();
            zp.data_mut()[idx] += eps;
            let mut zm = z.clone();
            zm.data_mut()[idx] -= eps;
            let fd = (ortho_penalty(&zp).unwrap() - ortho_penalty(&zm).unwrap()) / (2.0 * eps);
            assert!((fd - grad.data()[idx]).abs() < 1e-7, "{idx}: {fd} vs {}", grad.data()[idx]);
        }
    }

    fn tiny_model() -> SplitModel {
        SplitModel::init(
            ModelConfig {
                vocab_size: 12,
                embed_dim: 6,
                num_blocks: 2,
                split_layer: 1,
                max_seq_len: 8,
                num_classes: 3,
                mlp_hidden: 8,
                activation: Activation::Relu,
                mode: Mode::Classification,
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn identity_insertion_preserves_logits() {
        let model = tiny_model();
        let sae = SaeParams::identity(6);
        let ins = insert_inline(&model, &sae).unwrap();
        let s = TokenizedSequence::classification(vec![1, 5, 7, 2], 1);
        let a = model.logits(&s).unwrap();
        let b = ins.logits(&s).unwrap();
        assert!(a.sub(&b).max_abs() <= 1e-8);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let model = tiny_model();
        let sae = SaeParams::identity(5);
        assert!(insert_inline(&model, &sae).is_err());
    }

    #[test]
    fn planted_subspace_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let basis = Tensor::randn(3, 8, 1.0, &mut rng);
        let coeff = Tensor::randn(1200, 3, 1.0, &mut rng);
        let acts = coeff.matmul(&basis);
        let var = {
            let (z, _) = (acts.clone(), ());
            let n = z.rows() as f64;
            let mut total = 0.0;
            for j in 0..8 {
                let m = (0..z.rows()).map(|i| z.get(i, j)).sum::<f64>() / n;
                total += (0..z.rows()).map(|i| (z.get(i, j) - m).powi(2)).sum::<f64>() / n;
            }
            total / 8.0
        };
        let cfg = SaeConfig {
            latents: 16,
            k: 6,
            epochs: 60,
            learning_rate: 5e-3,
            batch_size: 64,
            ..SaeConfig::default()
        };
        let (_, report) = train_sae_on(&acts, &cfg, None).unwrap();
        let last = *report.heldout_mse.last().unwrap();
        assert!(last < report.heldout_mse[0]);
        assert!(last <= 1e-3 * var, "mse {last} vs variance {var}");
    }

    proptest! {
        #[test]
        fn encode_matches_sorting_oracle(seed in 0u64..500, k in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(3, 4, 1.0, &mut rng);
            let mut sae = SaeParams::init(4, 8, k, &Tensor::zeros(1, 4), seed).unwrap();
            sae.b_enc = Tensor::randn(1, 8, 0.5, &mut rng);
            let code = sae.encode(&x).unwrap();
            let pre = sae.preactivations(&x).unwrap();
            for i in 0..3 {
                let mut idx: Vec<usize> = (0..8).collect();
                idx.sort_by(|&a, &b| pre.get(i, b).partial_cmp(&pre.get(i, a)).unwrap());
                let mut expect: Vec<usize> = idx[..k].iter().copied().filter(|&j| pre.get(i, j) > 0.0).collect();
                expect.sort_unstable();
                let positives = (0..8).filter(|&j| pre.get(i, j) > 0.0).count();
                prop_assert_eq!(&code.active[i], &expect);
                prop_assert_eq!(code.active[i].len(), k.min(positives));
                for j in 0..8 {
                    let want = if expect.contains(&j) { pre.get(i, j) } else { 0.0 };
                    prop_assert_eq!(code.dense.get(i, j), want);
                }
            }
        }

        #[test]
        fn decode_matches_matvec(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sae = SaeParams::init(3, 7, 2, &Tensor::randn(1, 3, 1.0, &mut rng), seed).unwrap();
            let code = Tensor::randn(2, 7, 1.0, &mut rng);
            let out = sae.decode(&code).unwrap();
            for t in 0..2 {
                for i in 0..3 {
                    let want: f64 = (0..7).map(|j| sae.w_dec.get(i, j) * code.get(t, j)).sum::<f64>() + sae.b_pre.data()[i];
                    prop_assert!((out.get(t, i) - want).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn penalty_matches_pair_loop(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::randn(5, 4, 1.0, &mut rng);
            let mut total = 0.0;
            for a in 0..4 {
                for b in 0..4 {
                    if a == b { continue; }
                    let ma = (0..5).map(|i| z.get(i, a)).sum::<f64>() / 5.0;
                    let mb = (0..5).map(|i| z.get(i, b)).sum::<f64>() / 5.0;
                    let cov: f64 = (0..5).map(|i| (z.get(i, a) - ma) * (z.get(i, b) - mb)).sum();
                    let va: f64 = (0..5).map(|i| (z.get(i, a) - ma).powi(2)).sum();
                    let vb: f64 = (0..5).map(|i| (z.get(i, b) - mb).powi(2)).sum();
                    total += cov * cov / (va * vb);
                }
            }
            prop_assert!((ortho_penalty(&z).unwrap() - total / 12.0).abs() < 1e-12);
        }
    }
}
