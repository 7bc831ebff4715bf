//! Token heatmaps from latent-level influence.
//!
//! Each token's intensity is the sum of positive `activation * influence`
//! products over latents at that position, normalized by the sequence
//! maximum. Latents whose total product is negative are listed apart and
//! never rendered as heat.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_file;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HEATMAP_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Test,
    Train,
}

/// A latent whose summed `activation * influence` over the sequence is
/// negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeLatent {
    pub latent: usize,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapDoc {
    pub version: u32,
    pub role: Role,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub dominant: Vec<Option<usize>>,
    pub summed_influence: f64,
    #[serde(default)]
    pub negative_latents: Vec<NegativeLatent>,
    /// Training-set id for `Role::Train` documents.
    #[serde(default)]
    pub example_id: Option<usize>,
}

/// Per-token scores and dominant latents.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenScores {
    pub scores: Vec<f64>,
    pub dominant: Vec<Option<usize>>,
    pub negative_latents: Vec<NegativeLatent>,
}

/// Scores from a `T x H` influence map and `T x H` activations.
pub fn token_scores(influence: &Tensor, activations: &Tensor) -> Result<TokenScores> {
    if influence.dims2() != activations.dims2() {
        return Err(Error::shape(
            "token_scores",
            format!("influence {:?} vs activations {:?}", influence.shape(), activations.shape()),
        ));
    }
    let (t, h) = influence.dims2();
    let mut scores = vec![0.0; t];
    let mut dominant = vec![None; t];
    let mut totals = vec![0.0; h];
    for p in 0..t {
        let mut best = 0.0;
        for (j, (a, i)) in activations.row_slice(p).iter().zip(influence.row_slice(p)).enumerate() {
            let prod = a * i;
            totals[j] += prod;
            if prod > 0.0 {
                scores[p] += prod;
                if prod > best {
                    best = prod;
                    dominant[p] = Some(j);
                }
            }
        }
    }
    let max = scores.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for s in &mut scores {
            *s /= max;
        }
    }
    let mut negative_latents: Vec<NegativeLatent> = totals
        .iter()
        .enumerate()
        .filter(|(_, t)| **t < 0.0)
        .map(|(latent, &total)| NegativeLatent { latent, total })
        .collect();
    negative_latents.sort_by(|a, b| a.total.total_cmp(&b.total).then(a.latent.cmp(&b.latent)));
    Ok(TokenScores { scores, dominant, negative_latents })
}

/// Repeats a feature-level vector across `t` positions.
pub fn broadcast_importance(importance: &[f64], t: usize) -> Tensor {
    let h = importance.len();
    let mut out = Vec::with_capacity(t * h);
    for _ in 0..t {
        out.extend_from_slice(importance);
    }
    Tensor::matrix(t, h, out)
}

/// Heatmap of a retained training example from its position-resolved IFR
/// entries.
pub fn train_doc(tokens: Vec<String>, positions: &Tensor, activations: &Tensor, example_id: usize) -> Result<HeatmapDoc> {
    let ts = token_scores(positions, activations)?;
    Ok(assemble(Role::Train, tokens, ts, positions.sum(), Some(example_id)))
}

/// Heatmap of the test sequence, using the aggregated IFR at every position.
pub fn test_doc(tokens: Vec<String>, importance: &[f64], activations: &Tensor) -> Result<HeatmapDoc> {
    let map = broadcast_importance(importance, activations.rows());
    let ts = token_scores(&map, activations)?;
    Ok(assemble(Role::Test, tokens, ts, importance.iter().sum(), None))
}

fn assemble(role: Role, tokens: Vec<String>, ts: TokenScores, summed_influence: f64, example_id: Option<usize>) -> HeatmapDoc {
    HeatmapDoc {
        version: HEATMAP_VERSION,
        role,
        tokens,
        scores: ts.scores,
        dominant: ts.dominant,
        summed_influence,
        negative_latents: ts.negative_latents,
        example_id,
    }
}

fn check(doc: &HeatmapDoc) -> Result<()> {
    let t = doc.tokens.len();
    if doc.scores.len() != t || doc.dominant.len() != t {
        return Err(Error::Invalid(format!(
            "heatmap has {t} tokens, {} scores and {} dominant entries",
            doc.scores.len(),
            doc.dominant.len()
        )));
    }
    if doc.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Invalid("heatmap scores must lie in [0, 1]".into()));
    }
    Ok(())
}

pub fn emit_json(docs: &[HeatmapDoc], path: &Path) -> Result<()> {
    docs.iter().try_for_each(check)?;
    let mut bytes = serde_json::to_vec_pretty(docs)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn load_json(path: &Path) -> Result<Vec<HeatmapDoc>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Hue for a latent id, stable across documents.
fn hue(latent: usize) -> u64 {
    (latent as u64).wrapping_mul(137) % 360
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;max-width:60em}\
.doc{margin-bottom:2em;line-height:2}\
.tok{padding:2px 3px;border-radius:3px;margin:0 1px}\
.tok.dim{opacity:.25}\
.legend span{display:inline-block;margin:2px 6px;padding:0 4px;border:1px solid #999;cursor:default}\
.meta{color:#555;font-size:.9em}";

const SCRIPT: &str = "document.querySelectorAll('.legend span').forEach(function(l){\
var id=l.dataset.latent,d=l.closest('.doc');\
l.addEventListener('mouseenter',function(){d.querySelectorAll('.tok').forEach(function(t){if(t.dataset.latent!==id)t.classList.add('dim');});});\
l.addEventListener('mouseleave',function(){d.querySelectorAll('.tok').forEach(function(t){t.classList.remove('dim');});});});";

/// Renders documents as one static HTML page.
pub fn render_html(docs: &[HeatmapDoc]) -> Result<String> {
    docs.iter().try_for_each(check)?;
    let mut html = String::new();
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Token influence</title><style>{STYLE}</style></head><body>\n"
    );
    for (i, doc) in docs.iter().enumerate() {
        let role = match doc.role {
            Role::Test => "test",
            Role::Train => "train",
        };
        let _ = write!(html, "<div class=\"doc\" data-role=\"{role}\"><div class=\"meta\">#{i} {role}");
        if let Some(id) = doc.example_id {
            let _ = write!(html, " example {id}");
        }
        let _ = writeln!(html, ", summed influence {:.6e}</div>", doc.summed_influence);
        for ((tok, &score), dom) in doc.tokens.iter().zip(&doc.scores).zip(&doc.dominant) {
            let (latent_attr, color) = match dom {
                Some(j) => (format!(" data-latent=\"{j}\" title=\"latent {j}\""), format!("hsla({},80%,50%,{score:.4})", hue(*j))),
                None => (String::new(), "transparent".to_string()),
            };
            let _ = write!(
                html,
                "<span class=\"tok\" data-score=\"{score:.6}\"{latent_attr} style=\"background:{color}\">{}</span>",
                escape(tok)
            );
        }
        let mut legend: Vec<(usize, Vec<&str>)> = Vec::new();
        for (tok, dom) in doc.tokens.iter().zip(&doc.dominant) {
            if let Some(j) = dom {
                match legend.iter_mut().find(|(l, _)| l == j) {
                    Some((_, toks)) => toks.push(tok),
                    None => legend.push((*j, vec![tok])),
                }
            }
        }
        legend.sort_by_key(|(l, _)| *l);
        html.push_str("\n<div class=\"legend\">");
        for (j, toks) in &legend {
            let _ = write!(
                html,
                "<span data-latent=\"{j}\" title=\"{}\" style=\"background:hsla({},80%,50%,.3)\">latent {j}</span>",
                escape(&toks.join(" ")),
                hue(*j)
            );
        }
        html.push_str("</div>");
        if !doc.negative_latents.is_empty() {
            let ids: Vec<String> = doc.negative_latents.iter().map(|n| n.latent.to_string()).collect();
            let _ = write!(html, "<div class=\"meta\">negative latents: {}</div>", ids.join(", "));
        }
        html.push_str("</div>\n");
    }
    let _ = write!(html, "<script>{SCRIPT}</script>\n</body></html>\n");
    Ok(html)
}

pub fn emit_html(docs: &[HeatmapDoc], path: &Path) -> Result<()> {
    write_file(path, render_html(docs)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sparse(t: usize, h: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..t * h).map(|_| if rng.random_bool(0.3) { rng.random_range(0.0..2.0) } else { 0.0 }).collect();
        Tensor::matrix(t, h, data)
    }

    #[test]
    fn single_active_feature() {
        let mut act = Tensor::zeros(4, 3);
        act.set(2, 1, 0.7);
        let infl = Tensor::full(4, 3, 0.4);
        let ts = token_scores(&infl, &act).unwrap();
        assert_eq!(ts.scores, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(ts.dominant, vec![None, None, Some(1), None]);
    }

    #[test]
    fn uniform_products_normalize_to_one() {
        let ts = token_scores(&Tensor::full(3, 2, 2.0), &Tensor::full(3, 2, 0.5)).unwrap();
        assert_eq!(ts.scores, vec![1.0; 3]);
        assert_eq!(ts.dominant, vec![Some(0); 3]);
    }

    #[test]
    fn all_zero_and_negative_rows() {
        let ts = token_scores(&Tensor::zeros(3, 2), &Tensor::full(3, 2, 1.0)).unwrap();
        assert_eq!(ts.scores, vec![0.0; 3]);
        assert_eq!(ts.dominant, vec![None; 3]);
        let ts = token_scores(&Tensor::full(2, 2, -1.0), &Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, 1.0])).unwrap();
        assert_eq!(ts.scores, vec![0.0; 2]);
        assert_eq!(
            ts.negative_latents,
            vec![NegativeLatent { latent: 1, total: -3.0 }, NegativeLatent { latent: 0, total: -1.0 }]
        );
        assert!(token_scores(&Tensor::zeros(3, 2), &Tensor::zeros(2, 3)).is_err());
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, h) = (7, 11);
        let act = sparse(t, h, &mut rng);
        let infl = Tensor::randn(t, h, 1.0, &mut rng);
        let ts = token_scores(&infl, &act).unwrap();
        let mut raw = vec![0.0; t];
        let mut dom = vec![None; t];
        for p in 0..t {
            let mut best = f64::NEG_INFINITY;
            for j in 0..h {
                let v = act.get(p, j) * infl.get(p, j);
                raw[p] += v.max(0.0);
                if v > 0.0 && v > best {
                    best = v;
                    dom[p] = Some(j);
                }
            }
        }
        let m = raw.iter().cloned().fold(0.0, f64::max);
        for p in 0..t {
            assert!((ts.scores[p] - raw[p] / m).abs() < 1e-15);
        }
        assert_eq!(ts.dominant, dom);
    }

    #[test]
    fn test_doc_broadcasts_importance() {
        let act = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
        let doc = test_doc(vec!["a".into(), "b".into()], &[0.5, 9.0, 1.0], &act).unwrap();
        assert_eq!(doc.scores, vec![0.25, 1.0]);
        assert_eq!(doc.dominant, vec![Some(0), Some(2)]);
        assert_eq!(doc.summed_influence, 10.5);
        assert_eq!(doc.role, Role::Test);
    }

    #[test]
    fn json_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.json");
        emit_json(&[], &path).unwrap();
        assert!(load_json(&path).unwrap().is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let act = sparse(5, 4, &mut rng);
        let doc = train_doc((0..5).map(|i| format!("w{i}")).collect(), &Tensor::randn(5, 4, 1.0, &mut rng), &act, 17).unwrap();
        emit_json(std::slice::from_ref(&doc), &path).unwrap();
        assert_eq!(load_json(&path).unwrap(), vec![doc]);
        let value: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        for key in ["version", "role", "tokens", "scores", "dominant", "summed_influence"] {
            assert!(value[0].get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn html_spans_follow_scores() {
        let doc = HeatmapDoc {
            version: HEATMAP_VERSION,
            role: Role::Test,
            tokens: vec!["alpha".into(), "<b>".into(), "gamma".into()],
            scores: vec![1.0, 0.5, 0.0],
            dominant: vec![Some(3), Some(3), None],
            summed_influence: 1.5,
            negative_latents: vec![],
            example_id: None,
        };
        let html = render_html(&[doc]).unwrap();
        let scores: Vec<f64> = html
            .split("class=\"tok\" data-score=\"")
            .skip(1)
            .map(|s| s[..s.find('"').unwrap()].parse().unwrap())
            .collect();
        assert_eq!(scores, vec![1.0, 0.5, 0.0]);
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        assert!(html.contains("&lt;b&gt;") && !html.contains("<b>"));
        assert!(html.contains("<span data-latent=\"3\" title=\"alpha &lt;b&gt;\""));
        assert!(!html.contains("http"));
        assert!(render_html(&[]).unwrap().contains("</html>"));
    }

    #[test]
    fn malformed_docs_are_rejected() {
        let doc = HeatmapDoc {
            version: HEATMAP_VERSION,
            role: Role::Train,
            tokens: vec!["a".into()],
            scores: vec![1.0, 0.0],
            dominant: vec![None],
            summed_influence: 0.0,
            negative_latents: vec![],
            example_id: Some(0),
        };
        assert!(render_html(std::slice::from_ref(&doc)).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_json(&[doc], &dir.path().join("x.json")).is_err());
    }

    proptest! {
        #[test]
        fn normalization_and_scale_invariance(seed in 0u64..500, t in 1usize..8, h in 1usize..10, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let act = sparse(t, h, &mut rng);
            let infl = Tensor::randn(t, h, 1.0, &mut rng);
            let a = token_scores(&infl, &act).unwrap();
            let max = a.scores.iter().cloned().fold(0.0, f64::max);
            prop_assert!(max == 0.0 || max == 1.0);
            for p in 0..t {
                if act.row_slice(p).iter().all(|x| *x == 0.0) {
                    prop_assert_eq!(a.scores[p], 0.0);
                    prop_assert_eq!(a.dominant[p], None);
                }
            }
            let b = token_scores(&infl.scale(c), &act).unwrap();
            prop_assert_eq!(a.dominant, b.dominant);
        }
    }
}
