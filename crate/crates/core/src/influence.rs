//! Influence of training examples on a test prediction, resolved onto
//! sparse latent features.
//!
//! The downstream half of the model is viewed as a function of the
//! representation `r` (the `T x h` code stack when an SAE is inserted, the raw
//! `T x d` split-layer state otherwise). Writing `G(r)` for the gradient of the
//! training loss with respect to the downstream parameters and `s` for the
//! damped inverse-Hessian applied to the test gradient, the influence on
//! coordinate `(t, j)` is `-r[t,j] * d/dr[t,j] <s, G(r)>`. Three evaluators are
//! provided: a derivative swap (one extra reverse pass), a per-coordinate
//! forward-mode sweep, and a path integral from `0` to `r`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, hvp_on};
use crate::error::{Error, Result};
use crate::model::{Label, Mode, SplitModel, TokenizedSequence, downstream_logits, loss_graph};
use crate::sae::{SaeParams, SaeVars, decode_graph};
use crate::tensor::{ParamVec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Swap,
    Sweep,
    PathIntegral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// Test-example loss.
    Loss,
    /// Gold-class logit of the test example.
    Logit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    /// Conjugate gradient.
    Cg,
    /// Conjugate residual; the residual norm never increases.
    Cr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    Midpoint,
    /// Nodes at `i / m` for `i = 1..=m`; with `m = 1` this evaluates at `r`.
    RightEndpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct InfluenceConfig {
    pub damping: f64,
    pub cg_iters: usize,
    pub curvature_batch: usize,
    pub retain_fraction: f64,
    pub method: Method,
    pub target: Target,
    pub solver: Solver,
    pub max_escalations: usize,
    /// Relative residual at which the solver stops early.
    pub tolerance: f64,
    /// Quadrature nodes for the path-integral method.
    pub path_steps: usize,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig {
            damping: 1e-3,
            cg_iters: 20,
            curvature_batch: 8,
            retain_fraction: 0.1,
            method: Method::Swap,
            target: Target::Loss,
            solver: Solver::Cg,
            max_escalations: 3,
            tolerance: 1e-12,
            path_steps: 64,
        }
    }
}

impl InfluenceConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            bad.push("damping must be finite and non-negative".to_string());
        }
        if self.cg_iters == 0 {
            bad.push("cg-iters must be positive".into());
        }
        if self.curvature_batch == 0 {
            bad.push("curvature-batch must be positive".into());
        }
        if !(self.retain_fraction > 0.0 && self.retain_fraction <= 1.0) {
            bad.push(format!("retain-fraction {} must lie in (0, 1]", self.retain_fraction));
        }
        if self.path_steps == 0 {
            bad.push("path-steps must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

// ── the downstream function of r ────────────────────────────────────────

/// The model seen from the split layer, optionally through an SAE.
#[derive(Clone, Copy, Debug)]
pub struct Mediated<'a> {
    pub model: &'a SplitModel,
    pub sae: Option<&'a SaeParams>,
}

/// A scalar objective of a representation `r` and parameters `theta`, built
/// fresh as a graph whose first leaf is `r`.
pub trait DownstreamFn: Sync {
    fn graph(&self, r: &Tensor, label: &Label, target: Target) -> Result<DownstreamGraph>;

    /// `G(r)`: gradient of the objective with respect to `theta` at `r`.
    fn gradient_at(&self, r: &Tensor, label: &Label, target: Target) -> Result<ParamVec> {
        let mut dg = self.graph(r, label, target)?;
        Ok(ParamVec(dg.graph.grad_values(dg.objective, &dg.theta2)?))
    }
}

/// A downstream graph with `r` as its first leaf.
pub struct DownstreamGraph {
    pub graph: Graph,
    pub r: Var,
    pub theta2: Vec<Var>,
    pub logits: Var,
    pub objective: Var,
}

impl<'a> Mediated<'a> {
    pub fn new(model: &'a SplitModel, sae: Option<&'a SaeParams>) -> Result<Self> {
        if let Some(sae) = sae {
            crate::sae::insert_inline(model, sae)?;
        }
        Ok(Mediated { model, sae })
    }

    /// Width of the representation `r`.
    pub fn width(&self) -> usize {
        self.sae.map_or(self.model.config.embed_dim, SaeParams::latents)
    }

    /// The representation `r` of a sequence.
    pub fn representation(&self, seq: &TokenizedSequence) -> Result<Tensor> {
        let hidden = self.model.forward_upstream(seq)?;
        match self.sae {
            Some(sae) => Ok(sae.encode(&hidden)?.dense),
            None => Ok(hidden),
        }
    }

    fn check_r(&self, r: &Tensor) -> Result<()> {
        let (t, w) = r.dims2();
        if w != self.width() || t > self.model.config.max_seq_len {
            return Err(Error::shape(
                "representation",
                format!("{t}x{w}, expected width {} and at most {} rows", self.width(), self.model.config.max_seq_len),
            ));
        }
        Ok(())
    }

    /// Gradient of the example's objective with respect to `theta2` only.
    pub fn grad_theta2(&self, seq: &TokenizedSequence, target: Target) -> Result<ParamVec> {
        let r = self.representation(seq)?;
        self.gradient_at(&r, &seq.label, target)
    }

    pub fn objective(&self, seq: &TokenizedSequence, target: Target) -> Result<f64> {
        let r = self.representation(seq)?;
        let dg = self.graph(&r, &seq.label, target)?;
        Ok(dg.graph.value(dg.objective).item())
    }
}

impl DownstreamFn for Mediated<'_> {
    fn graph(&self, r: &Tensor, label: &Label, target: Target) -> Result<DownstreamGraph> {
        self.check_r(r)?;
        let cfg = &self.model.config;
        let mut g = Graph::new();
        let rv = g.leaf(r.clone());
        let hidden = match self.sae {
            Some(sae) => {
                let p = SaeVars::leaves(&mut g, sae);
                decode_graph(&mut g, &p, rv)
            }
            None => rv,
        };
        let theta2 = self.model.theta2.leaves(&mut g);
        let logits = downstream_logits(&mut g, cfg, &theta2, hidden);
        let objective = match target {
            Target::Loss => loss_graph(&mut g, cfg, logits, label)?,
            Target::Logit => {
                let Label::Class(c) = label else {
                    return Err(Error::WrongMode {
                        expected: "classification",
                    });
                };
                if *c >= cfg.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: *c,
                        classes: cfg.num_classes,
                    });
                }
                let mut onehot = Tensor::zeros(1, cfg.num_classes);
                onehot.set(0, *c, 1.0);
                g.dot_const(logits, &onehot)
            }
        };
        Ok(DownstreamGraph {
            graph: g,
            r: rv,
            theta2: theta2.to_vec(),
            logits,
            objective,
        })
    }

}

// ── curvature and the iHVP ──────────────────────────────────────────────

/// Symmetric linear operator on downstream-parameter space.
pub trait LinearOperator: Sync {
    fn apply(&self, v: &ParamVec) -> Result<ParamVec>;
}

impl<F> LinearOperator for F
where
    F: Fn(&ParamVec) -> Result<ParamVec> + Sync,
{
    fn apply(&self, v: &ParamVec) -> Result<ParamVec> {
        self(v)
    }
}

struct PreparedGraph {
    graph: Graph,
    theta2: Vec<Var>,
    grads: Vec<Var>,
}

/// Mean training-loss Hessian with respect to `theta2`, applied through
/// Hessian-vector products. Examples are streamed in batches; each batch's
/// products are evaluated concurrently and reduced in example order.
pub struct CurvatureOperator<'a> {
    f: Mediated<'a>,
    examples: Vec<(Tensor, Label)>,
    batch: usize,
    cached: Option<Vec<PreparedGraph>>,
}

/// Curvature sets at most this large keep their graphs between products.
const CACHE_LIMIT: usize = 32;

impl<'a> CurvatureOperator<'a> {
    pub fn new(mediated: Mediated<'a>, data: &[TokenizedSequence], batch: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Invalid("curvature set is empty".into()));
        }
        if batch == 0 {
            return Err(Error::Config("curvature-batch must be positive".into()));
        }
        let examples = data
            .iter()
            .map(|s| Ok((mediated.representation(s)?, s.label.clone())))
            .collect::<Result<Vec<_>>>()?;
        let mut op = CurvatureOperator {
            f: mediated,
            examples,
            batch,
            cached: None,
        };
        if op.examples.len() <= CACHE_LIMIT {
            let prepared = op
                .examples
                .iter()
                .map(|(r, y)| op.prepare(r, y))
                .collect::<Result<Vec<_>>>()?;
            op.cached = Some(prepared);
        }
        Ok(op)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn prepare(&self, r: &Tensor, y: &Label) -> Result<PreparedGraph> {
        let mut dg = self.f.graph(r, y, Target::Loss)?;
        let grads = dg.graph.grad(dg.objective, &dg.theta2)?;
        Ok(PreparedGraph {
            graph: dg.graph,
            theta2: dg.theta2,
            grads,
        })
    }

    fn example_hvp(&self, i: usize, v: &ParamVec) -> Result<ParamVec> {
        let owned;
        let p = match &self.cached {
            Some(c) => &c[i],
            None => {
                owned = self.prepare(&self.examples[i].0, &self.examples[i].1)?;
                &owned
            }
        };
        Ok(ParamVec(hvp_on(&p.graph, &p.theta2, &p.grads, &v.0)?))
    }
}

impl LinearOperator for CurvatureOperator<'_> {
    fn apply(&self, v: &ParamVec) -> Result<ParamVec> {
        let n = self.examples.len();
        let mut total = ParamVec::zeros_like(v);
        let idx: Vec<usize> = (0..n).collect();
        for batch in idx.chunks(self.batch) {
            let parts = batch
                .par_iter()
                .map(|&i| self.example_hvp(i, v))
                .collect::<Result<Vec<_>>>()?;
            for p in &parts {
                total.axpy(1.0 / n as f64, p);
            }
        }
        Ok(total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IhvpResult {
    pub s_test: ParamVec,
    /// `|(H + damping I) s - g| / |g|`, recomputed from the final iterate.
    pub residual_norm: f64,
    pub iterations: usize,
    pub damping: f64,
    pub escalations: usize,
    /// Recurrence residual after each iteration, relative to `|g|`.
    pub residual_history: Vec<f64>,
}

enum Attempt {
    Done(ParamVec, usize, Vec<f64>),
    NegativeCurvature(f64),
}

fn damped(op: &dyn LinearOperator, v: &ParamVec, damping: f64) -> Result<ParamVec> {
    let mut out = op.apply(v)?;
    out.axpy(damping, v);
    Ok(out)
}

fn cg(op: &dyn LinearOperator, g: &ParamVec, damping: f64, iters: usize, tol: f64) -> Result<Attempt> {
    let gnorm = g.norm();
    let mut x = ParamVec::zeros_like(g);
    let mut r = g.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let mut history = Vec::new();
    for it in 0..iters {
        let ap = damped(op, &p, damping)?;
        let curvature = p.dot(&ap);
        if curvature <= 0.0 {
            return Ok(Attempt::NegativeCurvature(curvature / p.dot(&p)));
        }
        let alpha = rs / curvature;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rs_new = r.dot(&r);
        history.push(rs_new.sqrt() / gnorm);
        if rs_new.sqrt() <= tol * gnorm {
            return Ok(Attempt::Done(x, it + 1, history));
        }
        let beta = rs_new / rs;
        rs = rs_new;
        let mut next = r.clone();
        next.axpy(beta, &p);
        p = next;
    }
    Ok(Attempt::Done(x, iters, history))
}

fn cr(op: &dyn LinearOperator, g: &ParamVec, damping: f64, iters: usize, tol: f64) -> Result<Attempt> {
    let gnorm = g.norm();
    let mut x = ParamVec::zeros_like(g);
    let mut r = g.clone();
    let mut ar = damped(op, &r, damping)?;
    let mut rar = r.dot(&ar);
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut history = Vec::new();
    for it in 0..iters {
        let curvature = p.dot(&ap);
        if curvature <= 0.0 || rar <= 0.0 {
            return Ok(Attempt::NegativeCurvature(curvature.min(rar) / p.dot(&p)));
        }
        let alpha = rar / ap.dot(&ap);
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rnorm = r.norm();
        history.push(rnorm / gnorm);
        if rnorm <= tol * gnorm || it + 1 == iters {
            return Ok(Attempt::Done(x, it + 1, history));
        }
        ar = damped(op, &r, damping)?;
        let rar_new = r.dot(&ar);
        let beta = rar_new / rar;
        rar = rar_new;
        let mut next_p = r.clone();
        next_p.axpy(beta, &p);
        p = next_p;
        let mut next_ap = ar.clone();
        next_ap.axpy(beta, &ap);
        ap = next_ap;
    }
    Ok(Attempt::Done(x, iters, history))
}

/// Approximately solves `(H + damping I) s = g` using products with `H`.
///
/// Non-positive curvature along a search direction multiplies the damping by
/// ten and restarts from zero, at most `max_escalations` times.
pub fn solve_damped(
    op: &dyn LinearOperator,
    g: &ParamVec,
    damping: f64,
    iters: usize,
    solver: Solver,
    max_escalations: usize,
    tol: f64,
) -> Result<IhvpResult> {
    if !g.is_finite() {
        return Err(Error::Invalid("test gradient is not finite".into()));
    }
    let gnorm = g.norm();
    if gnorm == 0.0 {
        return Ok(IhvpResult {
            s_test: ParamVec::zeros_like(g),
            residual_norm: 0.0,
            iterations: 0,
            damping,
            escalations: 0,
            residual_history: Vec::new(),
        });
    }
    let mut lambda = damping;
    let mut escalations = 0;
    loop {
        let attempt = match solver {
            Solver::Cg => cg(op, g, lambda, iters, tol)?,
            Solver::Cr => cr(op, g, lambda, iters, tol)?,
        };
        match attempt {
            Attempt::Done(s, iterations, history) => {
                let resid = damped(op, &s, lambda)?.sub(g).norm() / gnorm;
                return Ok(IhvpResult {
                    s_test: s,
                    residual_norm: resid,
                    iterations,
                    damping: lambda,
                    escalations,
                    residual_history: history,
                });
            }
            Attempt::NegativeCurvature(curvature) => {
                if escalations == max_escalations {
                    return Err(Error::NegativeCurvature {
                        escalations,
                        damping: lambda,
                        curvature,
                    });
                }
                escalations += 1;
                lambda = if lambda > 0.0 { lambda * 10.0 } else { 1e-3 };
            }
        }
    }
}

/// `s_test` for one test example: the damped iHVP of its gradient against the
/// mean training-loss Hessian over `curvature_set`.
pub fn ihvp_cg(
    mediated: Mediated<'_>,
    curvature_set: &[TokenizedSequence],
    g_test: &ParamVec,
    cfg: &InfluenceConfig,
) -> Result<IhvpResult> {
    let op = CurvatureOperator::new(mediated, curvature_set, cfg.curvature_batch)?;
    solve_damped(&op, g_test, cfg.damping, cfg.cg_iters, cfg.solver, cfg.max_escalations, cfg.tolerance)
}

/// Materializes an operator column by column (symmetrized).
pub fn materialize(op: &dyn LinearOperator, like: &ParamVec) -> Result<DMatrix<f64>> {
    let n = like.numel();
    let cols = (0..n)
        .into_par_iter()
        .map(|i| Ok(op.apply(&ParamVec::basis(like, i))?.flatten()))
        .collect::<Result<Vec<_>>>()?;
    let mut m = DMatrix::from_fn(n, n, |i, j| cols[j][i]);
    let mt = m.transpose();
    m += mt;
    m *= 0.5;
    Ok(m)
}

/// Direct solve of `(A + damping I) s = g` for a materialized `A`.
pub fn dense_damped_solve(a: &DMatrix<f64>, g: &ParamVec, damping: f64) -> Result<ParamVec> {
    let n = a.nrows();
    let mut m = a.clone();
    for i in 0..n {
        m[(i, i)] += damping;
    }
    let rhs = DVector::from_vec(g.flatten());
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Invalid("damped system is singular".into()))?;
    Ok(ParamVec::unflatten(sol.as_slice(), g))
}

// ── sample-level influence ──────────────────────────────────────────────

/// `-<s_test, g_train>`.
pub fn sample_influence(s_test: &ParamVec, g_train: &ParamVec) -> Result<f64> {
    if !s_test.conformal(g_train) {
        return Err(Error::shape("sample_influence", "s_test and g_train are not conformal"));
    }
    Ok(-s_test.dot(g_train))
}

/// Per-token influence `I_t = -<s_test, grad ell_t>` for an autoregressive
/// training sequence, from one forward-mode pass along `s_test`.
pub fn per_token_influence_ar(mediated: Mediated<'_>, s_test: &ParamVec, seq: &TokenizedSequence) -> Result<Vec<f64>> {
    let cfg = &mediated.model.config;
    if cfg.mode != Mode::Autoregressive {
        return Err(Error::WrongMode {
            expected: "autoregressive",
        });
    }
    let Label::NextTokens(targets) = &seq.label else {
        return Err(Error::WrongMode {
            expected: "classification",
        });
    };
    let r = mediated.representation(seq)?;
    let mut dg = mediated.graph(&r, &seq.label, Target::Loss)?;
    if s_test.0.len() != dg.theta2.len() {
        return Err(Error::shape("per_token_influence_ar", "s_test is not conformal with theta2"));
    }
    let rows = dg.graph.cross_entropy_rows(dg.logits, targets);
    let seeds: Vec<(Var, &Tensor)> = dg.theta2.iter().copied().zip(&s_test.0).collect();
    let dual = dg.graph.tangents(&seeds, &[rows])?.remove(0);
    Ok(dual.tangent.data().iter().map(|x| -x).collect())
}

// ── latent-level influence ──────────────────────────────────────────────

fn check_conformal(dg: &DownstreamGraph, s: &ParamVec) -> Result<()> {
    let ok = s.0.len() == dg.theta2.len()
        && dg.theta2.iter().zip(&s.0).all(|(&v, t)| dg.graph.value(v).dims2() == t.dims2());
    if ok {
        Ok(())
    } else {
        Err(Error::shape("influence", "s_test is not conformal with theta2"))
    }
}

/// `d/dr <s, G(r)>` by differentiating through the gradient.
pub fn swap_gradient(f: &dyn DownstreamFn, s_test: &ParamVec, r: &Tensor, label: &Label) -> Result<Tensor> {
    let mut dg = f.graph(r, label, Target::Loss)?;
    check_conformal(&dg, s_test)?;
    let grads = dg.graph.grad(dg.objective, &dg.theta2)?;
    let dr = dg.graph.grad_through_gradient(&grads, &s_test.0, dg.r)?;
    Ok(dg.graph.value(dr).clone())
}

/// Position-resolved influence `-(d/dr <s, G(r)>) * r` from two reverse passes.
pub fn neuron_influence_swap(f: &dyn DownstreamFn, s_test: &ParamVec, r: &Tensor, label: &Label) -> Result<Tensor> {
    let dr = swap_gradient(f, s_test, r, label)?;
    // exact zeros where r is zero
    Ok(r.zip_map(&dr, |x, d| if x == 0.0 { 0.0 } else { -x * d }))
}

/// Position-resolved influence from one forward-mode pass per nonzero
/// coordinate of `r`. Each directional derivative of `G` is contracted with
/// `s_test` and discarded.
pub fn neuron_influence_jvp_sweep(
    f: &dyn DownstreamFn,
    s_test: &ParamVec,
    r: &Tensor,
    label: &Label,
) -> Result<Tensor> {
    let mut dg = f.graph(r, label, Target::Loss)?;
    check_conformal(&dg, s_test)?;
    let grads = dg.graph.grad(dg.objective, &dg.theta2)?;
    let (t, h) = r.dims2();
    let mut out = Tensor::zeros(t, h);
    let mut seed = Tensor::zeros(t, h);
    for i in 0..t {
        for j in 0..h {
            let rij = r.get(i, j);
            if rij == 0.0 {
                continue;
            }
            seed.set(i, j, 1.0);
            let duals = dg.graph.tangents(&[(dg.r, &seed)], &grads)?;
            seed.set(i, j, 0.0);
            let contraction: f64 = duals.iter().zip(&s_test.0).map(|(d, s)| d.tangent.dot(s)).sum();
            out.set(i, j, -rij * contraction);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathIntegral {
    /// `r[t,j] * mean_alpha d/dr[t,j] <s, G(alpha r)>`, position-resolved.
    pub contributions: Tensor,
    /// `<s, G(r) - G(0)>`, the value the contributions sum to in the limit.
    pub gap: f64,
}

impl PathIntegral {
    pub fn completeness_error(&self) -> f64 {
        let total = self.contributions.sum();
        (total - self.gap).abs() / self.gap.abs().max(f64::MIN_POSITIVE)
    }
}

/// Per-coordinate decomposition of `<s, G(r) - G(0)>` along the straight
/// path from `0` to `r`. Each quadrature node costs one derivative swap.
pub fn neuron_influence_pathintegral(
    f: &dyn DownstreamFn,
    s_test: &ParamVec,
    r: &Tensor,
    label: &Label,
    steps: usize,
    rule: Quadrature,
) -> Result<PathIntegral> {
    if steps == 0 {
        return Err(Error::Invalid("path integral needs at least one step".into()));
    }
    let (t, h) = r.dims2();
    let alphas: Vec<f64> = (0..steps)
        .map(|i| match rule {
            Quadrature::Midpoint => (i as f64 + 0.5) / steps as f64,
            Quadrature::RightEndpoint => (i + 1) as f64 / steps as f64,
        })
        .collect();
    let mut mean = Tensor::zeros(t, h);
    for &a in &alphas {
        let d = swap_gradient(f, s_test, &r.scale(a), label)?;
        mean.axpy(1.0 / steps as f64, &d);
    }
    let contributions = r.zip_map(&mean, |x, d| if x == 0.0 { 0.0 } else { x * d });
    let at_r = f.gradient_at(r, label, Target::Loss)?;
    let at_0 = f.gradient_at(&Tensor::zeros(t, h), label, Target::Loss)?;
    Ok(PathIntegral {
        contributions,
        gap: s_test.dot(&at_r.sub(&at_0)),
    })
}

/// Position-resolved influence by the chosen method. The path integral is
/// negated so all three methods share a sign convention.
pub fn position_influence(
    f: &dyn DownstreamFn,
    s_test: &ParamVec,
    r: &Tensor,
    label: &Label,
    method: Method,
    path_steps: usize,
) -> Result<Tensor> {
    match method {
        Method::Swap => neuron_influence_swap(f, s_test, r, label),
        Method::Sweep => neuron_influence_jvp_sweep(f, s_test, r, label),
        Method::PathIntegral => Ok(neuron_influence_pathintegral(
            f,
            s_test,
            r,
            label,
            path_steps,
            Quadrature::Midpoint,
        )?
        .contributions
        .scale(-1.0)),
    }
}

/// Column sums of a position-resolved influence tensor.
pub fn feature_totals(positions: &Tensor) -> Vec<f64> {
    let (t, h) = positions.dims2();
    let mut out = vec![0.0; h];
    for i in 0..t {
        for (o, x) in out.iter_mut().zip(positions.row_slice(i)) {
            *o += x;
        }
    }
    out
}

// ── prefilter ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefilterResult {
    /// Retained example ids, best first.
    pub ids: Vec<usize>,
    /// Cosine scores of the retained ids.
    pub scores: Vec<f64>,
    pub retain_fraction: f64,
    pub candidates: usize,
}

/// Number of candidates kept out of `n` at `fraction`.
pub fn retained_count(n: usize, fraction: f64) -> usize {
    (((fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Keeps the `fraction` of `scores` with the highest values, ties by id.
pub fn top_fraction(scores: &[f64], fraction: f64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(retained_count(scores.len(), fraction));
    ids
}

/// Screens training candidates by cosine similarity between their
/// full-parameter loss gradients and the test gradient (no SAE inserted).
pub fn prefilter(
    model: &SplitModel,
    train: &[TokenizedSequence],
    test: &TokenizedSequence,
    fraction: f64,
) -> Result<PrefilterResult> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("retain-fraction {fraction} must lie in (0, 1]")));
    }
    if train.is_empty() {
        return Err(Error::Invalid("no training candidates".into()));
    }
    let g_test = model.full_gradient(test)?.1.flatten();
    let scores = train
        .par_iter()
        .map(|s| Ok(cosine(&model.full_gradient(s)?.1.flatten(), &g_test)))
        .collect::<Result<Vec<f64>>>()?;
    let ids = top_fraction(&scores, fraction);
    Ok(PrefilterResult {
        scores: ids.iter().map(|&i| scores[i]).collect(),
        ids,
        retain_fraction: fraction,
        candidates: train.len(),
    })
}

// ── the IFR matrix ──────────────────────────────────────────────────────

/// Influence of retained training examples on each latent feature for one
/// test example.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceMatrix {
    pub row_ids: Vec<usize>,
    /// `N x H`; row `i` is the column sum of `positions[i]`.
    pub values: Tensor,
    /// Position-resolved `T_i x H` entries per row.
    pub positions: Vec<Tensor>,
    pub method: Method,
}

impl InfluenceMatrix {
    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn features(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row_slice(i)
    }
}

/// Test-side state shared by every IFR row.
#[derive(Clone, Debug)]
pub struct TestContext {
    pub ihvp: IhvpResult,
    pub g_test: ParamVec,
}

/// Gradient of the test objective and its damped iHVP, computed once per
/// test example.
pub fn test_context(
    mediated: Mediated<'_>,
    curvature_set: &[TokenizedSequence],
    test: &TokenizedSequence,
    cfg: &InfluenceConfig,
) -> Result<TestContext> {
    let g_test = mediated.grad_theta2(test, cfg.target)?;
    let ihvp = ihvp_cg(mediated, curvature_set, &g_test, cfg)?;
    Ok(TestContext { ihvp, g_test })
}

/// Builds the IFR over `retained` (ids into `train`). Rows are independent
/// and evaluated concurrently, then placed by row.
pub fn build_ifr(
    mediated: Mediated<'_>,
    train: &[TokenizedSequence],
    retained: &[usize],
    ctx: &TestContext,
    method: Method,
    path_steps: usize,
) -> Result<InfluenceMatrix> {
    if retained.is_empty() {
        return Err(Error::Invalid("no retained training examples".into()));
    }
    if let Some(&bad) = retained.iter().find(|&&i| i >= train.len()) {
        return Err(Error::Invalid(format!("retained id {bad} out of range")));
    }
    let s = &ctx.ihvp.s_test;
    let positions = retained
        .par_iter()
        .map(|&i| {
            let seq = &train[i];
            let r = mediated.representation(seq)?;
            position_influence(&mediated, s, &r, &seq.label, method, path_steps)
        })
        .collect::<Result<Vec<Tensor>>>()?;
    let h = mediated.width();
    let mut values = Vec::with_capacity(retained.len() * h);
    for p in &positions {
        values.extend(feature_totals(p));
    }
    Ok(InfluenceMatrix {
        row_ids: retained.to_vec(),
        values: Tensor::matrix(retained.len(), h, values),
        positions,
        method,
    })
}

/// Column means of the IFR.
pub fn aggregate_ifr(ifr: &InfluenceMatrix) -> Result<Vec<f64>> {
    let n = ifr.rows();
    if n == 0 {
        return Err(Error::Invalid("empty influence matrix".into()));
    }
    let mut out = vec![0.0; ifr.features()];
    for i in 0..n {
        for (o, x) in out.iter_mut().zip(ifr.row(i)) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    Ok(out)
}

/// Wall-clock seconds of a closure with its result.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}
