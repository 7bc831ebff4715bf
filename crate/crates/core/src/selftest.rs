//! Fast oracle checks of the numerical core on small random instances.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{self, HeatmapDoc};
use crate::error::Result;
use crate::eval::{self, MaskMode, MaskSpec, RankMethod, Ranking, Space};
use crate::fixtures::{InstanceShape, random_instance};
use crate::influence::{
    self, CurvatureOperator, LinearOperator, Mediated, Method, Quadrature, Solver, Target, dense_damped_solve,
    solve_damped,
};
use crate::model::{Activation, Downstream, Mode};
use crate::sae::{SaeParams, insert_inline};
use crate::tensor::{ParamVec, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn check(name: &str, outcome: Result<(bool, String)>) -> Check {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    Check { name: name.to_string(), passed, detail }
}

fn silu_shape() -> InstanceShape {
    InstanceShape { activation: Activation::Silu, ..InstanceShape::default() }
}

fn with_theta2(model: &crate::model::SplitModel, flat: &[f64]) -> crate::model::SplitModel {
    let like = model.theta2.as_param_vec();
    let mut out = model.clone();
    out.theta2 = Downstream::from_vec(ParamVec::unflatten(flat, &like).0, model.config.num_blocks - model.config.split_layer);
    out
}

fn grad_fd() -> Result<(bool, String)> {
    let inst = random_instance(&silu_shape(), 1, 5);
    let seq = &inst.sequences[0];
    let m = Mediated::new(&inst.model, Some(&inst.sae))?;
    let g = m.grad_theta2(seq, Target::Loss)?.flatten();
    let base = inst.model.theta2.as_param_vec().flatten();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..16 {
        let i = rng.random_range(0..base.len());
        let mut flat = base.clone();
        flat[i] += eps;
        let plus = with_theta2(&inst.model, &flat);
        flat[i] -= 2.0 * eps;
        let minus = with_theta2(&inst.model, &flat);
        let fp = Mediated::new(&plus, Some(&inst.sae))?.objective(seq, Target::Loss)?;
        let fm = Mediated::new(&minus, Some(&inst.sae))?.objective(seq, Target::Loss)?;
        let fd = (fp - fm) / (2.0 * eps);
        worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1e-2));
    }
    Ok((worst <= 1e-6, format!("max relative error {worst:.2e}")))
}

fn hvp_fd() -> Result<(bool, String)> {
    let inst = random_instance(&silu_shape(), 2, 7);
    let m = Mediated::new(&inst.model, Some(&inst.sae))?;
    let op = CurvatureOperator::new(m, &inst.sequences, 2)?;
    let base = inst.model.theta2.as_param_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = ParamVec(base.0.iter().map(|t| Tensor::randn(t.rows(), t.cols(), 1.0, &mut rng)).collect());
    let hv = op.apply(&v)?.flatten();
    let eps = 1e-5;
    let grad_at = |sign: f64| -> Result<Vec<f64>> {
        let mut flat = base.flatten();
        for (x, d) in flat.iter_mut().zip(v.flatten()) {
            *x += sign * eps * d;
        }
        let model = with_theta2(&inst.model, &flat);
        let mm = Mediated::new(&model, Some(&inst.sae))?;
        let mut total = vec![0.0; flat.len()];
        for s in &inst.sequences {
            for (t, x) in total.iter_mut().zip(mm.grad_theta2(s, Target::Loss)?.flatten()) {
                *t += x / inst.sequences.len() as f64;
            }
        }
        Ok(total)
    };
    let (gp, gm) = (grad_at(1.0)?, grad_at(-1.0)?);
    let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    let err = crate::tensor::rel_err(&hv, &fd, 1e-3);
    Ok((err <= 1e-4, format!("relative error {err:.2e}")))
}

fn swap_sweep() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..4 {
        let inst = random_instance(&InstanceShape::default(), 3, 100 + seed);
        let m = Mediated::new(&inst.model, Some(&inst.sae))?;
        let s = m.grad_theta2(&inst.sequences[0], Target::Loss)?;
        for seq in &inst.sequences[1..] {
            let r = m.representation(seq)?;
            let a = influence::neuron_influence_swap(&m, &s, &r, &seq.label)?;
            let b = influence::neuron_influence_jvp_sweep(&m, &s, &r, &seq.label)?;
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs() / y.abs().max(1e-12).max(1e-9));
            }
        }
    }
    Ok((worst <= 1e-6, format!("max relative gap {worst:.2e}")))
}

fn gating() -> Result<(bool, String)> {
    let inst = random_instance(&silu_shape(), 2, 8);
    let m = Mediated::new(&inst.model, Some(&inst.sae))?;
    let s = m.grad_theta2(&inst.sequences[0], Target::Loss)?;
    let seq = &inst.sequences[1];
    let r = m.representation(seq)?;
    let mut leaks = 0;
    for method in [Method::Swap, Method::Sweep, Method::PathIntegral] {
        let out = influence::position_influence(&m, &s, &r, &seq.label, method, 8)?;
        leaks += r.data().iter().zip(out.data()).filter(|(x, y)| **x == 0.0 && **y != 0.0).count();
    }
    Ok((leaks == 0, format!("{leaks} nonzero entries at inactive coordinates")))
}

fn path_completeness() -> Result<(bool, String)> {
    let inst = random_instance(&silu_shape(), 2, 10);
    let m = Mediated::new(&inst.model, Some(&inst.sae))?;
    let s = m.grad_theta2(&inst.sequences[0], Target::Loss)?;
    let seq = &inst.sequences[1];
    let r = m.representation(seq)?;
    let p = influence::neuron_influence_pathintegral(&m, &s, &r, &seq.label, 256, Quadrature::Midpoint)?;
    let err = p.completeness_error();
    Ok((err <= 1e-3, format!("completeness error {err:.2e} at 256 midpoint steps")))
}

fn dense_operator(a: DMatrix<f64>) -> impl Fn(&ParamVec) -> Result<ParamVec> + Sync {
    move |v: &ParamVec| Ok(ParamVec::unflatten((&a * DVector::from_vec(v.flatten())).as_slice(), v))
}

fn cg_dense() -> Result<(bool, String)> {
    let n = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = Tensor::randn(n, n, 1.0, &mut rng);
    let b = DMatrix::from_row_slice(n, n, b.data());
    let a = &b * b.transpose() / n as f64;
    let g = ParamVec(vec![Tensor::randn(1, n, 1.0, &mut rng)]);
    let solved = solve_damped(&dense_operator(a.clone()), &g, 0.1, 4 * n, Solver::Cg, 0, 1e-12)?;
    let direct = dense_damped_solve(&a, &g, 0.1)?;
    let err = crate::tensor::rel_err(&solved.s_test.flatten(), &direct.flatten(), 1e-12);
    Ok((err <= 1e-6, format!("relative error {err:.2e} after {} iterations", solved.iterations)))
}

fn escalation() -> Result<(bool, String)> {
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, -0.5]));
    let g = ParamVec(vec![Tensor::row(vec![1.0, 1.0, 1.0])]);
    let solved = solve_damped(&dense_operator(a), &g, 0.01, 10, Solver::Cg, 3, 1e-10)?;
    let ok = solved.escalations == 2 && (solved.damping - 1.0).abs() < 1e-12 && solved.residual_norm <= 1e-8;
    Ok((ok, format!("{} escalations, final damping {}", solved.escalations, solved.damping)))
}

fn ar_additivity() -> Result<(bool, String)> {
    let shape = InstanceShape { mode: Mode::Autoregressive, ..InstanceShape::default() };
    let inst = random_instance(&shape, 4, 6);
    let m = Mediated::new(&inst.model, Some(&inst.sae))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = ParamVec(inst.model.theta2.to_vec().iter().map(|t| Tensor::randn(t.rows(), t.cols(), 1.0, &mut rng)).collect());
    let mut worst: f64 = 0.0;
    for seq in &inst.sequences {
        let terms = influence::per_token_influence_ar(m, &s, seq)?;
        let whole = influence::sample_influence(&s, &m.grad_theta2(seq, Target::Loss)?)?;
        worst = worst.max((terms.iter().sum::<f64>() - whole).abs() / whole.abs().max(1.0));
    }
    Ok((worst <= 1e-10, format!("max gap {worst:.2e}")))
}

fn identity_sae() -> Result<(bool, String)> {
    let inst = random_instance(&silu_shape(), 4, 11);
    let sae = SaeParams::identity(inst.model.config.embed_dim);
    let ins = insert_inline(&inst.model, &sae)?;
    let mut worst: f64 = 0.0;
    for seq in &inst.sequences {
        let a = inst.model.logits(seq)?;
        let b = ins.logits(seq)?;
        worst = worst.max(a.sub(&b).max_abs());
    }
    Ok((worst <= 1e-8, format!("max logit gap {worst:.2e}")))
}

fn ortho_oracles() -> Result<(bool, String)> {
    // orthonormal columns after centering: +-1 patterns of a Hadamard matrix
    let h = Tensor::matrix(4, 3, vec![1.0, 1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, -1.0, -1.0, -1.0, 1.0]);
    let ortho = eval::ortho_stats(&h, Space::PreLatent)?;
    let same = Tensor::matrix(3, 2, vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
    let collinear = eval::ortho_stats(&same, Space::PreLatent)?;
    let ok = ortho.gram_abs_mean < 1e-12
        && (ortho.pct_near_orthogonal - 100.0).abs() < 1e-12
        && (collinear.gram_abs_mean - 1.0).abs() < 1e-12
        && collinear.pct_near_orthogonal == 0.0;
    Ok((ok, format!("orthogonal {:.1e}, collinear {:.6}", ortho.gram_abs_mean, collinear.gram_abs_mean)))
}

fn prefilter_sort() -> Result<(bool, String)> {
    let inst = random_instance(&InstanceShape::default(), 12, 12);
    let test = inst.sequences[3].clone();
    let pf = influence::prefilter(&inst.model, &inst.sequences, &test, 0.25)?;
    let sorted = pf.scores.windows(2).all(|w| w[0] >= w[1]);
    let ok = sorted && pf.ids.len() == 3 && pf.ids[0] == 3 && (pf.scores[0] - 1.0).abs() < 1e-12;
    Ok((ok, format!("retained {:?}", pf.ids)))
}

fn heatmap_roundtrip() -> Result<(bool, String)> {
    let acts = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 2.0, 0.5, 0.5]);
    let doc = attribution::test_doc(vec!["a".into(), "<b>".into(), "c".into()], &[0.4, -0.2], &acts)?;
    let bytes = serde_json::to_vec(&vec![doc.clone()])?;
    let back: Vec<HeatmapDoc> = serde_json::from_slice(&bytes)?;
    let html = attribution::render_html(&back)?;
    let ok = back == vec![doc] && html.matches("class=\"tok\"").count() == 3 && html.contains("&lt;b&gt;");
    Ok((ok, format!("{} bytes of HTML", html.len())))
}

fn mask_identity() -> Result<(bool, String)> {
    let inst = random_instance(&InstanceShape::default(), 3, 13);
    let ins = insert_inline(&inst.model, &inst.sae)?;
    let h = inst.sae.latents();
    let ranking = Ranking::new(RankMethod::Random, (0..h).rev().collect())?;
    let mut worst: f64 = 0.0;
    for seq in &inst.sequences {
        for spec in [
            MaskSpec::new(MaskMode::KeepTopK, h, ranking.clone())?,
            MaskSpec::new(MaskMode::RemoveTopK, 0, ranking.clone())?,
        ] {
            let row = eval::apply_mask(&ins, seq, &spec)?;
            worst = worst.max(row.delta_logit.abs()).max(row.delta_nll.abs());
        }
    }
    Ok((worst == 0.0, format!("max change {worst:.2e}")))
}

/// Runs every oracle check.
pub fn run() -> SelftestReport {
    let checks = vec![
        check("gradient-vs-finite-difference", grad_fd()),
        check("hvp-vs-finite-difference", hvp_fd()),
        check("swap-equals-sweep", swap_sweep()),
        check("inactive-coordinates-are-zero", gating()),
        check("path-integral-completeness", path_completeness()),
        check("cg-matches-dense-solve", cg_dense()),
        check("damping-escalation", escalation()),
        check("token-influence-additivity", ar_additivity()),
        check("identity-sae-is-lossless", identity_sae()),
        check("orthogonality-oracles", ortho_oracles()),
        check("prefilter-keeps-duplicate-first", prefilter_sort()),
        check("heatmap-roundtrip", heatmap_roundtrip()),
        check("full-mask-is-identity", mask_identity()),
    ];
    SelftestReport { passed: checks.iter().all(|c| c.passed), checks }
}
