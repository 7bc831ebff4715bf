//! Masking experiments at the SAE layer and orthogonality diagnostics.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::write_file;
use crate::error::{Error, Result};
use crate::model::{Label, SplitModel, TokenizedSequence, argmax};
use crate::sae::{Inserted, SparseCode, normalize_columns};
use crate::tensor::Tensor;

/// Default mask sizes.
pub const DEFAULT_K_GRID: [usize; 7] = [25, 50, 100, 125, 150, 175, 200];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    RemoveTopK,
    KeepTopK,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::RemoveTopK => "remove-top-k",
            MaskMode::KeepTopK => "keep-top-k",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMethod {
    Influence,
    Activation,
    Frequency,
    Random,
}

impl RankMethod {
    pub const ALL: [RankMethod; 4] = [RankMethod::Influence, RankMethod::Activation, RankMethod::Frequency, RankMethod::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            RankMethod::Influence => "influence",
            RankMethod::Activation => "activation",
            RankMethod::Frequency => "frequency",
            RankMethod::Random => "random",
        }
    }
}

/// An ordering of all latent ids, most important first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub method: RankMethod,
    pub order: Vec<usize>,
}

impl Ranking {
    pub fn new(method: RankMethod, order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Invalid(format!("{} ranking is not a permutation", method.as_str())));
            }
        }
        Ok(Ranking { method, order })
    }

    pub fn width(&self) -> usize {
        self.order.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub k: usize,
    pub ranking: Ranking,
}

impl MaskSpec {
    pub fn new(mode: MaskMode, k: usize, ranking: Ranking) -> Result<Self> {
        if k > ranking.width() {
            return Err(Error::Invalid(format!("mask size {k} exceeds {} latents", ranking.width())));
        }
        Ok(MaskSpec { mode, k, ranking })
    }

    /// `true` for latents that survive the mask.
    pub fn keep(&self) -> Vec<bool> {
        let top = matches!(self.mode, MaskMode::KeepTopK);
        let mut keep = vec![!top; self.ranking.width()];
        for &j in &self.ranking.order[..self.k] {
            keep[j] = top;
        }
        keep
    }
}

/// Inputs a ranking method may draw on. Only the fields the method needs
/// must be present.
#[derive(Clone, Copy, Debug, Default)]
pub struct RankContext<'a> {
    /// Test-conditioned importance (IFR column means).
    pub importance: Option<&'a [f64]>,
    /// SAE codes of the test sequence.
    pub test_codes: Option<&'a SparseCode>,
    /// SAE codes of the retained training candidates.
    pub candidate_codes: Option<&'a [SparseCode]>,
    pub seed: Option<u64>,
}

fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Orders the `width` latents by `method`. Ties fall back to ascending id.
pub fn rank_features(method: RankMethod, width: usize, ctx: &RankContext<'_>) -> Result<Ranking> {
    let check = |n: usize, what: &str| {
        if n == width {
            Ok(())
        } else {
            Err(Error::shape("rank_features", format!("{what} has width {n}, expected {width}")))
        }
    };
    let order = match method {
        RankMethod::Influence => {
            let s = ctx.importance.ok_or(Error::MissingContext("influence ranking needs the aggregated IFR"))?;
            check(s.len(), "importance vector")?;
            descending(s)
        }
        RankMethod::Activation => {
            let codes = ctx.test_codes.ok_or(Error::MissingContext("activation ranking needs test-sequence codes"))?;
            check(codes.width(), "test codes")?;
            let t = codes.positions().max(1) as f64;
            let mut mean = vec![0.0; width];
            for p in 0..codes.positions() {
                for (m, x) in mean.iter_mut().zip(codes.dense.row_slice(p)) {
                    *m += x.abs() / t;
                }
            }
            descending(&mean)
        }
        RankMethod::Frequency => {
            let all = ctx
                .candidate_codes
                .ok_or(Error::MissingContext("frequency ranking needs candidate codes"))?;
            let mut counts = vec![0.0; width];
            for codes in all {
                check(codes.width(), "candidate codes")?;
                for p in 0..codes.positions() {
                    for (c, x) in counts.iter_mut().zip(codes.dense.row_slice(p)) {
                        if *x != 0.0 {
                            *c += 1.0;
                        }
                    }
                }
            }
            descending(&counts)
        }
        RankMethod::Random => {
            let seed = ctx.seed.ok_or(Error::MissingContext("random ranking needs a seed"))?;
            let mut order: Vec<usize> = (0..width).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            order
        }
    };
    Ranking::new(method, order)
}

/// Outcome of one masked forward pass against the unmasked baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub delta_logit: f64,
    pub delta_nll: f64,
    pub flipped: bool,
    pub same_answer: bool,
    pub retained_correct_logit: f64,
}

fn gold_class(seq: &TokenizedSequence) -> Result<usize> {
    match &seq.label {
        Label::Class(c) => Ok(*c),
        Label::NextTokens(_) => Err(Error::WrongMode { expected: "classification" }),
    }
}

/// Unmasked reference for [`apply_mask_against`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Baseline {
    pub nll: f64,
    pub correct_logit: f64,
    pub prediction: usize,
}

pub fn baseline(inserted: &Inserted<'_>, seq: &TokenizedSequence) -> Result<Baseline> {
    let gold = gold_class(seq)?;
    let (nll, logits) = inserted.forward(seq)?;
    Ok(Baseline { nll, correct_logit: logits.data()[gold], prediction: argmax(logits.data()) })
}

pub fn apply_mask(inserted: &Inserted<'_>, seq: &TokenizedSequence, mask: &MaskSpec) -> Result<MaskRow> {
    apply_mask_against(inserted, seq, mask, &baseline(inserted, seq)?)
}

/// Masks latents before decoding and compares with a precomputed baseline.
pub fn apply_mask_against(
    inserted: &Inserted<'_>,
    seq: &TokenizedSequence,
    mask: &MaskSpec,
    base: &Baseline,
) -> Result<MaskRow> {
    let gold = gold_class(seq)?;
    let (nll, logits) = inserted.forward_masked(seq, &mask.keep())?;
    let correct = logits.data()[gold];
    let same = argmax(logits.data()) == base.prediction;
    Ok(MaskRow {
        delta_logit: correct - base.correct_logit,
        delta_nll: nll - base.nll,
        flipped: !same,
        same_answer: same,
        retained_correct_logit: correct,
    })
}

/// One evaluation example with a ranking per method.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub seq: TokenizedSequence,
    pub rankings: BTreeMap<RankMethod, Ranking>,
}

/// Aggregate over the eval set for one (method, k, mode). Field order is
/// the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskAggregate {
    pub method: RankMethod,
    pub mode: MaskMode,
    pub k: usize,
    pub examples: usize,
    pub mean_delta_logit: f64,
    pub mean_delta_nll: f64,
    pub flip_rate: f64,
    pub same_answer_rate: f64,
    pub mean_retained_correct_logit: f64,
}

/// Whether a curve moves in its expected direction as `k` grows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monotonicity {
    pub method: RankMethod,
    pub mode: MaskMode,
    pub metric: String,
    /// Number of adjacent `k` pairs that move against the expected direction.
    pub violations: usize,
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTables {
    pub k_grid: Vec<usize>,
    pub rows: Vec<MaskAggregate>,
    /// Per-example rows, aligned with `rows`.
    #[serde(skip)]
    pub per_example: Vec<Vec<MaskRow>>,
    pub monotonicity: Vec<Monotonicity>,
}

/// Drops entries above `width` and duplicates; keeps order.
pub fn clip_grid(grid: &[usize], width: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &k in grid {
        if k <= width && !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n.max(1) as f64
}

/// Runs every (method, mode, k) over the eval items. Examples are evaluated
/// concurrently; aggregation is ordered.
pub fn run_necessity_sufficiency(
    inserted: &Inserted<'_>,
    items: &[EvalItem],
    k_grid: &[usize],
    methods: &[RankMethod],
) -> Result<MaskTables> {
    let width = inserted.sae.latents();
    let grid = clip_grid(k_grid, width);
    let bases = items.par_iter().map(|it| baseline(inserted, &it.seq)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut per_example = Vec::new();
    for &method in methods {
        for mode in [MaskMode::RemoveTopK, MaskMode::KeepTopK] {
            for &k in &grid {
                let results = items
                    .par_iter()
                    .zip(&bases)
                    .map(|(it, base)| {
                        let ranking = it
                            .rankings
                            .get(&method)
                            .ok_or(Error::MissingContext("eval item lacks a ranking for a requested method"))?;
                        let spec = MaskSpec::new(mode, k, ranking.clone())?;
                        apply_mask_against(inserted, &it.seq, &spec, base)
                    })
                    .collect::<Result<Vec<MaskRow>>>()?;
                let n = results.len();
                let flips = results.iter().filter(|r| r.flipped).count() as f64 / n.max(1) as f64;
                rows.push(MaskAggregate {
                    method,
                    mode,
                    k,
                    examples: n,
                    mean_delta_logit: mean(results.iter().map(|r| r.delta_logit), n),
                    mean_delta_nll: mean(results.iter().map(|r| r.delta_nll), n),
                    flip_rate: flips,
                    same_answer_rate: 1.0 - flips,
                    mean_retained_correct_logit: mean(results.iter().map(|r| r.retained_correct_logit), n),
                });
                per_example.push(results);
            }
        }
    }
    let monotonicity = monotonicity(&rows, methods);
    Ok(MaskTables { k_grid: grid, rows, per_example, monotonicity })
}

fn monotonicity(rows: &[MaskAggregate], methods: &[RankMethod]) -> Vec<Monotonicity> {
    // removal should hurt more with k; keeping more should recover more
    let metrics: [(MaskMode, &str, fn(&MaskAggregate) -> f64); 4] = [
        (MaskMode::RemoveTopK, "mean-delta-nll", |r| r.mean_delta_nll),
        (MaskMode::RemoveTopK, "flip-rate", |r| r.flip_rate),
        (MaskMode::KeepTopK, "same-answer-rate", |r| r.same_answer_rate),
        (MaskMode::KeepTopK, "mean-retained-correct-logit", |r| r.mean_retained_correct_logit),
    ];
    let mut out = Vec::new();
    for &method in methods {
        for (mode, name, get) in metrics {
            let curve: Vec<f64> = rows.iter().filter(|r| r.method == method && r.mode == mode).map(get).collect();
            let violations = curve.windows(2).filter(|w| w[1] < w[0]).count();
            out.push(Monotonicity { method, mode, metric: name.to_string(), violations, monotone: violations == 0 });
        }
    }
    out
}

impl MaskTables {
    pub fn get(&self, method: RankMethod, mode: MaskMode, k: usize) -> Option<&MaskAggregate> {
        self.rows.iter().find(|r| r.method == method && r.mode == mode && r.k == k)
    }

    pub fn examples_for(&self, method: RankMethod, mode: MaskMode, k: usize) -> Option<&[MaskRow]> {
        let i = self.rows.iter().position(|r| r.method == method && r.mode == mode && r.k == k)?;
        Some(&self.per_example[i])
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        write_file(csv_path, &self.to_csv()?)?;
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_file(json_path, &json)
    }
}

// ── orthogonality ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Space {
    Text,
    PreLatent,
    SaeLatent,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Text => "text",
            Space::PreLatent => "pre-latent",
            Space::SaeLatent => "sae-latent",
        }
    }
}

/// Pairwise statistics over the columns of an `N x dim` sample matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoReport {
    pub space: Space,
    pub samples: usize,
    pub dim: usize,
    /// Columns with non-zero variance; the Gram statistics use only these.
    pub live_features: usize,
    pub gram_abs_mean: f64,
    pub gram_sq_mean: f64,
    pub offdiag_frobenius: f64,
    pub stable_rank: f64,
    pub pct_near_orthogonal: f64,
}

/// Correlations below this magnitude count as near-orthogonal.
pub const NEAR_ORTHOGONAL: f64 = 0.1;

/// Cross-check size limit for the pairwise loop inside [`ortho_stats`].
const BRUTE_FORCE_LIMIT: usize = 64;

fn offdiag_summary(corr: impl Iterator<Item = f64>) -> (f64, f64, f64, f64) {
    // (abs mean, sq mean, frobenius over both triangles, pct near-orthogonal)
    let (mut n, mut abs, mut sq, mut near) = (0usize, 0.0, 0.0, 0usize);
    for c in corr {
        n += 1;
        abs += c.abs();
        sq += c * c;
        if c.abs() < NEAR_ORTHOGONAL {
            near += 1;
        }
    }
    if n == 0 {
        return (0.0, 0.0, 0.0, 100.0);
    }
    (abs / n as f64, sq / n as f64, (2.0 * sq).sqrt(), 100.0 * near as f64 / n as f64)
}

/// Stable rank `||A||_F^2 / ||A||_2^2` of the raw matrix.
pub fn stable_rank(a: &Tensor) -> f64 {
    let (n, d) = a.dims2();
    let m = DMatrix::from_row_slice(n, d, a.data());
    let top = m.singular_values().max();
    if top == 0.0 { 0.0 } else { m.norm_squared() / (top * top) }
}

/// Pearson correlations of every live column pair, by direct summation.
pub fn pairwise_correlations(a: &Tensor) -> Vec<f64> {
    let (n, d) = a.dims2();
    let cols: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| a.get(i, j)).collect()).collect();
    let (_, live) = normalize_columns(a);
    let mut out = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            if !(live[i] && live[j]) {
                continue;
            }
            let mi = cols[i].iter().sum::<f64>() / n as f64;
            let mj = cols[j].iter().sum::<f64>() / n as f64;
            let (mut cov, mut vi, mut vj) = (0.0, 0.0, 0.0);
            for t in 0..n {
                let (x, y) = (cols[i][t] - mi, cols[j][t] - mj);
                cov += x * y;
                vi += x * x;
                vj += y * y;
            }
            out.push(cov / (vi * vj).sqrt());
        }
    }
    out
}

pub fn ortho_stats(vectors: &Tensor, space: Space) -> Result<OrthoReport> {
    let (n, dim) = vectors.dims2();
    if n < 2 {
        return Err(Error::Invalid(format!("orthogonality statistics need at least 2 samples, got {n}")));
    }
    let (z, live) = normalize_columns(vectors);
    let live_ids: Vec<usize> = (0..dim).filter(|&j| live[j]).collect();
    if live_ids.is_empty() {
        return Err(Error::Invalid(format!("all {dim} {} features have zero variance", space.as_str())));
    }
    let gram = z.transpose().matmul(&z);
    let upper = live_ids
        .iter()
        .enumerate()
        .flat_map(|(a, &i)| live_ids[a + 1..].iter().map(move |&j| (i, j)))
        .map(|(i, j)| gram.get(i, j));
    let (gram_abs_mean, gram_sq_mean, offdiag_frobenius, pct) = offdiag_summary(upper.clone());

    if dim <= BRUTE_FORCE_LIMIT && n <= 4 * BRUTE_FORCE_LIMIT {
        let loop_corr = pairwise_correlations(vectors);
        let drift = loop_corr.iter().zip(upper).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if drift > 1e-8 {
            return Err(Error::Invalid(format!("Gram statistics disagree with pairwise loop by {drift:e}")));
        }
    }

    Ok(OrthoReport {
        space,
        samples: n,
        dim,
        live_features: live_ids.len(),
        gram_abs_mean,
        gram_sq_mean,
        offdiag_frobenius,
        stable_rank: stable_rank(vectors),
        pct_near_orthogonal: pct,
    })
}

/// Token-embedding rows for every token of `data`.
pub fn text_vectors(model: &SplitModel, data: &[TokenizedSequence]) -> Tensor {
    let d = model.config.embed_dim;
    let mut rows = Vec::new();
    let mut n = 0;
    for seq in data {
        for &id in &seq.ids {
            rows.extend_from_slice(model.theta1.embed.row_slice(id));
            n += 1;
        }
    }
    Tensor::matrix(n, d, rows)
}
