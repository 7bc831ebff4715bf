//! The end-to-end stages behind the command-line tool. Each stage reads its
//! prerequisites from the checkpoint and output directories, writes its
//! artifacts, and records a manifest under `outputs/manifests/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution;
use crate::config::{DataSource, RunConfig, default_provenance};
use crate::data::{self, SyntheticData, Vocab, encode_record, gen_synthetic, load_jsonl};
use crate::error::{Error, Result};
use crate::eval::{self, EvalItem, MaskMode, RankContext, RankMethod, Space, rank_features};
use crate::influence::{
    self, InfluenceConfig, Mediated, Method, aggregate_ifr, build_ifr, feature_totals, position_influence, prefilter,
    test_context, timed,
};
use crate::io::{self, IfrPaths, IfrSidecar};
use crate::model::{Mode, SplitModel, TokenizedSequence, train};
use crate::sae::{SaeParams, insert_inline, pooled_activations, train_sae};
use crate::selftest;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    SaeTrain,
    Influence,
    EvalMask,
    Ortho,
    Heatmap,
    Bench,
    Selftest,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::SaeTrain => "sae-train",
            Command::Influence => "influence",
            Command::EvalMask => "eval-mask",
            Command::Ortho => "ortho",
            Command::Heatmap => "heatmap",
            Command::Bench => "bench",
            Command::Selftest => "selftest",
        }
    }
}

/// File locations derived from the checkpoint and output roots.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

pub fn test_stem(test_id: usize) -> String {
    format!("test-{test_id:04}")
}

impl Layout {
    pub fn new(checkpoints: &Path, outputs: &Path) -> Self {
        Layout { checkpoints: checkpoints.to_path_buf(), outputs: outputs.to_path_buf() }
    }

    pub fn model(&self) -> PathBuf {
        self.checkpoints.join("model.json")
    }
    pub fn sae(&self) -> PathBuf {
        self.checkpoints.join("sae.json")
    }
    pub fn vocab(&self) -> PathBuf {
        self.checkpoints.join("vocab.json")
    }
    pub fn data_dir(&self) -> PathBuf {
        self.outputs.join("data")
    }
    pub fn train_report(&self) -> PathBuf {
        self.outputs.join("train_report.json")
    }
    pub fn sae_report(&self) -> PathBuf {
        self.outputs.join("sae_report.json")
    }
    pub fn influence_dir(&self) -> PathBuf {
        self.outputs.join("influence")
    }
    pub fn ifr(&self, test_id: usize) -> IfrPaths {
        IfrPaths::new(&self.influence_dir(), &test_stem(test_id))
    }
    pub fn prefilter(&self, test_id: usize) -> PathBuf {
        self.influence_dir().join(format!("{}.prefilter.json", test_stem(test_id)))
    }
    pub fn mask_csv(&self) -> PathBuf {
        self.outputs.join("eval").join("mask.csv")
    }
    pub fn mask_json(&self) -> PathBuf {
        self.outputs.join("eval").join("mask.json")
    }
    pub fn ortho_csv(&self) -> PathBuf {
        self.outputs.join("ortho").join("ortho.csv")
    }
    pub fn ortho_json(&self) -> PathBuf {
        self.outputs.join("ortho").join("ortho.json")
    }
    pub fn heatmap_json(&self, test_id: usize) -> PathBuf {
        self.outputs.join("heatmap").join(format!("{}.json", test_stem(test_id)))
    }
    pub fn heatmap_html(&self, test_id: usize) -> PathBuf {
        self.outputs.join("heatmap").join(format!("{}.html", test_stem(test_id)))
    }
    pub fn bench_csv(&self) -> PathBuf {
        self.outputs.join("bench").join("bench.csv")
    }
    pub fn selftest_json(&self) -> PathBuf {
        self.outputs.join("selftest.json")
    }
    pub fn manifest(&self, cmd: Command) -> PathBuf {
        self.outputs.join("manifests").join(format!("{}.json", cmd.as_str()))
    }
}

/// What a stage did: settings hash, timings, files written and a short
/// human-readable summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub workers: usize,
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub artifacts: Vec<PathBuf>,
    pub provenance: BTreeMap<String, String>,
    pub summary: Vec<String>,
}

struct Recorder {
    timings: BTreeMap<String, f64>,
    artifacts: Vec<PathBuf>,
    summary: Vec<String>,
}

impl Recorder {
    fn new() -> Self {
        Recorder { timings: BTreeMap::new(), artifacts: Vec::new(), summary: Vec::new() }
    }

    fn time(&mut self, stage: &str, secs: f64) {
        *self.timings.entry(stage.to_string()).or_default() += secs;
    }

    fn wrote(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    fn say(&mut self, line: String) {
        self.summary.push(line);
    }
}

/// Train and test sequences with the vocabulary that produced them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<TokenizedSequence>,
    pub test: Vec<TokenizedSequence>,
    pub vocab: Vocab,
    pub synthetic: Option<SyntheticData>,
}

fn for_mode(seqs: Vec<TokenizedSequence>, mode: Mode) -> Vec<TokenizedSequence> {
    match mode {
        Mode::Classification => seqs,
        Mode::Autoregressive => seqs.iter().map(|s| TokenizedSequence::autoregressive(&s.ids)).collect(),
    }
}

fn encode_split(
    path: &Path,
    records: &[data::DatasetRecord],
    vocab: &Vocab,
    cfg: &RunConfig,
) -> Result<Vec<TokenizedSequence>> {
    let max = cfg.model.max_seq_len;
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            if rec.answer >= cfg.model.num_classes {
                return Err(Error::Record {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("answer {} out of range for {} classes", rec.answer, cfg.model.num_classes),
                });
            }
            let mut seq = encode_record(rec, vocab, cfg.data.include_choices);
            // the readout is the last position, so keep the tail
            if seq.ids.len() > max {
                seq.ids.drain(..seq.ids.len() - max);
            }
            Ok(seq)
        })
        .collect()
}

/// Generates or reads the run's data. JSONL runs reuse `vocab` when given.
pub fn load_dataset(cfg: &RunConfig, vocab: Option<Vocab>) -> Result<Dataset> {
    let mode = cfg.model.mode;
    match cfg.data.source {
        DataSource::Synthetic => {
            let synth = gen_synthetic(&cfg.data.synthetic, cfg.seed)?;
            Ok(Dataset {
                train: for_mode(synth.train_sequences(), mode),
                test: for_mode(synth.test_sequences(), mode),
                vocab: Vocab::synthetic(cfg.model.vocab_size),
                synthetic: Some(synth),
            })
        }
        DataSource::Jsonl => {
            let train_recs = load_jsonl(&cfg.paths.train_jsonl)?;
            let test_recs = load_jsonl(&cfg.paths.test_jsonl)?;
            let vocab = vocab.unwrap_or_else(|| Vocab::from_records(&train_recs, cfg.data.max_vocab));
            Ok(Dataset {
                train: for_mode(encode_split(&cfg.paths.train_jsonl, &train_recs, &vocab, cfg)?, mode),
                test: for_mode(encode_split(&cfg.paths.test_jsonl, &test_recs, &vocab, cfg)?, mode),
                vocab,
                synthetic: None,
            })
        }
    }
}

fn require(path: &Path, what: &'static str, hint: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite { what, path: path.to_path_buf(), hint })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub upstream_parameters: usize,
    pub downstream_parameters: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaeSummary {
    pub heldout_mse: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub test_accuracy_model: f64,
    pub test_accuracy_inserted: f64,
    /// Accuracy lost by inserting the SAE, in percentage points.
    pub accuracy_drop_points: f64,
}

/// One timed (train, test) pair of the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub pair: usize,
    pub train_id: usize,
    pub test_id: usize,
    pub active_coordinates: usize,
    pub train_forward_s: f64,
    pub ihvp_s: f64,
    pub latent_s: f64,
    pub aggregation_s: f64,
    pub total_s: f64,
    /// Set when the solve failed and the raw test gradient stood in for it.
    pub ihvp_fallback: bool,
}

/// Runs stages against one configuration.
pub struct Pipeline {
    cfg: RunConfig,
    layout: Layout,
}

fn accuracy_or_zero(mode: Mode, f: impl FnOnce() -> Result<f64>) -> Result<f64> {
    if mode == Mode::Classification { f() } else { Ok(0.0) }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    data::write_file(path, &bytes)
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg.paths.checkpoints, &cfg.paths.outputs);
        Ok(Pipeline { cfg, layout })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Runs one stage and writes its manifest.
    pub fn run(&self, cmd: Command) -> Result<Manifest> {
        let mut rec = Recorder::new();
        let (outcome, total) = timed(|| match cmd {
            Command::Train => self.train(&mut rec),
            Command::SaeTrain => self.sae_train(&mut rec),
            Command::Influence => self.influence(&mut rec),
            Command::EvalMask => self.eval_mask(&mut rec),
            Command::Ortho => self.ortho(&mut rec),
            Command::Heatmap => self.heatmap(&mut rec),
            Command::Bench => self.bench(&mut rec),
            Command::Selftest => self.selftest(&mut rec),
        });
        rec.time("total", total);
        let manifest = Manifest {
            command: cmd.as_str().to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            workers: rayon::current_num_threads(),
            timings: rec.timings,
            artifacts: rec.artifacts,
            provenance: default_provenance(),
            summary: rec.summary,
        };
        io::write_json_file(&self.layout.manifest(cmd), &manifest)?;
        outcome.map(|()| manifest)
    }

    fn dataset(&self) -> Result<Dataset> {
        let vocab = match self.cfg.data.source {
            DataSource::Synthetic => None,
            DataSource::Jsonl => {
                let path = self.layout.vocab();
                require(&path, "vocabulary", "train")?;
                let mut v: Vocab = io::read_json_file(&path)?;
                v.rebuild_index();
                Some(v)
            }
        };
        load_dataset(&self.cfg, vocab)
    }

    fn model(&self) -> Result<SplitModel> {
        let path = self.layout.model();
        require(&path, "model checkpoint", "train")?;
        let model = io::load_model(&path)?;
        if model.config != self.cfg.model {
            return Err(Error::Config(format!(
                "model checkpoint {} was trained with a different [model] section",
                path.display()
            )));
        }
        Ok(model)
    }

    fn sae(&self, model: &SplitModel) -> Result<SaeParams> {
        let path = self.layout.sae();
        require(&path, "SAE checkpoint", "sae-train")?;
        let (sae, layer) = io::load_sae(&path)?;
        if layer != model.config.split_layer {
            return Err(Error::Config(format!(
                "SAE was trained at layer {layer} but the model splits at layer {}",
                model.config.split_layer
            )));
        }
        if sae.latents() != self.cfg.sae.latents || sae.k != self.cfg.sae.k {
            return Err(Error::Config(format!(
                "SAE checkpoint has {} latents with k = {}, the [sae] section asks for {} with k = {}",
                sae.latents(),
                sae.k,
                self.cfg.sae.latents,
                self.cfg.sae.k
            )));
        }
        insert_inline(model, &sae)?;
        Ok(sae)
    }

    fn test_ids(&self, ds: &Dataset) -> Vec<usize> {
        (0..self.cfg.influence.num_test.min(ds.test.len())).collect()
    }

    fn curvature_set<'a>(&self, ds: &'a Dataset) -> &'a [TokenizedSequence] {
        match self.cfg.influence.curvature_examples {
            0 => &ds.train,
            n => &ds.train[..n.min(ds.train.len())],
        }
    }

    fn solve_config(&self) -> &InfluenceConfig {
        &self.cfg.influence.solve
    }

    fn train(&self, rec: &mut Recorder) -> Result<()> {
        let (ds, t) = timed(|| load_dataset(&self.cfg, None));
        let ds = ds?;
        rec.time("data", t);
        let init = SplitModel::init(self.cfg.model.clone(), self.cfg.seed)?;
        for s in ds.train.iter().chain(&ds.test) {
            init.validate_sequence(s)?;
        }
        let (out, t) = timed(|| train(&init, &ds.train, &self.cfg.train_config()));
        let (model, report) = out?;
        rec.time("train", t);
        let mode = model.config.mode;
        let summary = TrainSummary {
            train_accuracy: report.final_accuracy,
            test_accuracy: accuracy_or_zero(mode, || model.accuracy(&ds.test))?,
            epoch_loss: report.epoch_loss,
            upstream_parameters: model.theta1_count(),
            downstream_parameters: model.theta2_count(),
        };
        io::save_model(&self.layout.model(), &model)?;
        rec.wrote(self.layout.model());
        io::write_json_file(&self.layout.vocab(), &ds.vocab)?;
        rec.wrote(self.layout.vocab());
        if let Some(synth) = &ds.synthetic {
            synth.save(&self.layout.data_dir())?;
            rec.wrote(self.layout.data_dir());
        }
        io::write_json_file(&self.layout.train_report(), &summary)?;
        rec.wrote(self.layout.train_report());
        rec.say(format!(
            "trained {} epochs on {} examples: final loss {:.4}, train accuracy {:.3}, test accuracy {:.3}",
            summary.epoch_loss.len(),
            ds.train.len(),
            summary.epoch_loss.last().copied().unwrap_or(f64::NAN),
            summary.train_accuracy,
            summary.test_accuracy
        ));
        Ok(())
    }

    fn sae_train(&self, rec: &mut Recorder) -> Result<()> {
        let model = self.model()?;
        let ds = self.dataset()?;
        let (out, t) = timed(|| train_sae(&model, &ds.train, &self.cfg.sae_config()));
        let (sae, report) = out?;
        rec.time("sae-train", t);
        let ins = insert_inline(&model, &sae)?;
        let mode = model.config.mode;
        let base = accuracy_or_zero(mode, || model.accuracy(&ds.test))?;
        let inserted = accuracy_or_zero(mode, || ins.accuracy(&ds.test))?;
        let summary = SaeSummary {
            heldout_mse: report.heldout_mse,
            train_loss: report.train_loss,
            test_accuracy_model: base,
            test_accuracy_inserted: inserted,
            accuracy_drop_points: 100.0 * (base - inserted),
        };
        io::save_sae(&self.layout.sae(), &sae, model.config.split_layer)?;
        rec.wrote(self.layout.sae());
        io::write_json_file(&self.layout.sae_report(), &summary)?;
        rec.wrote(self.layout.sae_report());
        rec.say(format!(
            "SAE with {} latents (k = {}): held-out MSE {:.4e} -> {:.4e}, test accuracy {:.3} -> {:.3}",
            sae.latents(),
            sae.k,
            summary.heldout_mse.first().copied().unwrap_or(f64::NAN),
            summary.heldout_mse.last().copied().unwrap_or(f64::NAN),
            base,
            inserted
        ));
        Ok(())
    }

    fn influence(&self, rec: &mut Recorder) -> Result<()> {
        let model = self.model()?;
        let sae = self.sae(&model)?;
        let ds = self.dataset()?;
        let med = Mediated::new(&model, Some(&sae))?;
        let solve = self.solve_config();
        let curvature = self.curvature_set(&ds);
        for i in self.test_ids(&ds) {
            let test = &ds.test[i];
            let (pf, t) = timed(|| prefilter(&model, &ds.train, test, solve.retain_fraction));
            let pf = pf?;
            rec.time("prefilter", t);
            io::write_prefilter(&self.layout.prefilter(i), &pf)?;
            rec.wrote(self.layout.prefilter(i));

            let (ctx, t) = timed(|| test_context(med, curvature, test, solve));
            let ctx = ctx.map_err(|e| Error::Invalid(format!("test example {i}: {e}")))?;
            rec.time("ihvp", t);

            let (ifr, t) = timed(|| build_ifr(med, &ds.train, &pf.ids, &ctx, solve.method, solve.path_steps));
            let ifr = ifr?;
            rec.time("ifr", t);

            let paths = self.layout.ifr(i);
            let file_name = |p: &Path| p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            let sidecar = IfrSidecar {
                version: io::IFR_VERSION,
                test_id: i,
                row_ids: ifr.row_ids.clone(),
                features: ifr.features(),
                method: ifr.method,
                damping: ctx.ihvp.damping,
                cg_iters: solve.cg_iters,
                iterations_used: ctx.ihvp.iterations,
                escalations: ctx.ihvp.escalations,
                residual_norm: ctx.ihvp.residual_norm,
                tolerance: solve.tolerance,
                path_steps: solve.path_steps,
                values_file: file_name(&paths.values),
                positions_file: file_name(&paths.positions),
            };
            io::write_ifr(&paths, &ifr, &sidecar)?;
            rec.wrote(paths.values);
            rec.wrote(paths.positions);
            rec.wrote(paths.sidecar);
            rec.say(format!(
                "{}: {} rows x {} latents, damping {:e} ({} escalations), residual {:.2e}",
                test_stem(i),
                ifr.rows(),
                ifr.features(),
                ctx.ihvp.damping,
                ctx.ihvp.escalations,
                ctx.ihvp.residual_norm
            ));
        }
        Ok(())
    }

    fn read_ifr(&self, test_id: usize, latents: usize) -> Result<(influence::InfluenceMatrix, IfrSidecar)> {
        let paths = self.layout.ifr(test_id);
        require(&paths.sidecar, "influence matrix", "influence")?;
        let (ifr, side) = io::read_ifr(&paths)?;
        if ifr.features() != latents {
            return Err(Error::Format(format!(
                "{} has {} features but the SAE has {latents} latents",
                paths.values.display(),
                ifr.features()
            )));
        }
        Ok((ifr, side))
    }

    fn eval_mask(&self, rec: &mut Recorder) -> Result<()> {
        let model = self.model()?;
        let sae = self.sae(&model)?;
        let ds = self.dataset()?;
        let ins = insert_inline(&model, &sae)?;
        let h = sae.latents();
        let mut items = Vec::new();
        let (ranked, t) = timed(|| -> Result<()> {
            for i in self.test_ids(&ds) {
                let (ifr, side) = self.read_ifr(i, h)?;
                let importance = aggregate_ifr(&ifr)?;
                let test_codes = ins.codes(&ds.test[i])?;
                let candidates = side
                    .row_ids
                    .iter()
                    .map(|&id| {
                        let seq = ds.train.get(id).ok_or_else(|| Error::Format(format!("row id {id} out of range")))?;
                        ins.codes(seq)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let ctx = RankContext {
                    importance: Some(&importance),
                    test_codes: Some(&test_codes),
                    candidate_codes: Some(&candidates),
                    seed: Some(self.cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)),
                };
                let rankings = rank_all(&self.cfg.eval.methods, h, &ctx)?;
                items.push(EvalItem { seq: ds.test[i].clone(), rankings });
            }
            Ok(())
        });
        ranked?;
        rec.time("rank", t);
        let (tables, t) = timed(|| eval::run_necessity_sufficiency(&ins, &items, &self.cfg.eval.k_grid, &self.cfg.eval.methods));
        let tables = tables?;
        rec.time("mask", t);
        tables.write(&self.layout.mask_csv(), &self.layout.mask_json())?;
        rec.wrote(self.layout.mask_csv());
        rec.wrote(self.layout.mask_json());
        if let Some(&k) = tables.k_grid.first() {
            for &m in &self.cfg.eval.methods {
                if let (Some(rm), Some(kp)) = (tables.get(m, MaskMode::RemoveTopK, k), tables.get(m, MaskMode::KeepTopK, k)) {
                    rec.say(format!(
                        "{:<10} k = {k}: remove dNLL {:+.4}, keep same-answer {:.3}",
                        m.as_str(),
                        rm.mean_delta_nll,
                        kp.same_answer_rate
                    ));
                }
            }
        }
        Ok(())
    }

    fn ortho(&self, rec: &mut Recorder) -> Result<()> {
        let model = self.model()?;
        let sae = self.sae(&model)?;
        let ds = self.dataset()?;
        let (reports, t) = timed(|| -> Result<Vec<eval::OrthoReport>> {
            let text = eval::text_vectors(&model, &ds.test);
            let pre = pooled_activations(&model, &ds.test)?;
            let latent = sae.encode(&pre)?.dense;
            Ok(vec![
                eval::ortho_stats(&text, Space::Text)?,
                eval::ortho_stats(&pre, Space::PreLatent)?,
                eval::ortho_stats(&latent, Space::SaeLatent)?,
            ])
        });
        let reports = reports?;
        rec.time("ortho", t);
        write_csv(&self.layout.ortho_csv(), &reports)?;
        rec.wrote(self.layout.ortho_csv());
        io::write_json_file(&self.layout.ortho_json(), &reports)?;
        rec.wrote(self.layout.ortho_json());
        for r in &reports {
            rec.say(format!(
                "{:<10} mean |corr| {:.4}, near-orthogonal {:.1}%, stable rank {:.2}",
                r.space.as_str(),
                r.gram_abs_mean,
                r.pct_near_orthogonal,
                r.stable_rank
            ));
        }
        Ok(())
    }

    fn heatmap(&self, rec: &mut Recorder) -> Result<()> {
        let model = self.model()?;
        let sae = self.sae(&model)?;
        let ds = self.dataset()?;
        let ins = insert_inline(&model, &sae)?;
        let words = |seq: &TokenizedSequence| seq.ids.iter().map(|&t| ds.vocab.word(t).to_string()).collect::<Vec<_>>();
        for i in self.test_ids(&ds) {
            let (ifr, _) = self.read_ifr(i, sae.latents())?;
            let importance = aggregate_ifr(&ifr)?;
            let test = &ds.test[i];
            let test_doc = attribution::test_doc(words(test), &importance, &ins.codes(test)?.dense)?;
            let top = (0..ifr.rows())
                .max_by(|&a, &b| {
                    let (sa, sb): (f64, f64) = (ifr.row(a).iter().sum(), ifr.row(b).iter().sum());
                    sa.total_cmp(&sb).then(b.cmp(&a))
                })
                .ok_or_else(|| Error::Invalid("empty influence matrix".into()))?;
            let id = ifr.row_ids[top];
            let seq = &ds.train[id];
            let train_doc = attribution::train_doc(words(seq), &ifr.positions[top], &ins.codes(seq)?.dense, id)?;
            let docs = [test_doc, train_doc];
            attribution::emit_json(&docs, &self.layout.heatmap_json(i))?;
            attribution::emit_html(&docs, &self.layout.heatmap_html(i))?;
            rec.wrote(self.layout.heatmap_json(i));
            rec.wrote(self.layout.heatmap_html(i));
            rec.say(format!("{}: top training example {id}", test_stem(i)));
        }
        Ok(())
    }

    fn bench(&self, rec: &mut Recorder) -> Result<()> {
        let model = if self.layout.model().exists() {
            self.model()?
        } else {
            SplitModel::init(self.cfg.model.clone(), self.cfg.seed)?
        };
        let ds = load_dataset(&self.cfg, None)?;
        let sae = if self.layout.sae().exists() {
            self.sae(&model)?
        } else {
            let acts = pooled_activations(&model, &ds.train)?;
            let d = acts.cols();
            let mut mean = vec![0.0; d];
            for r in 0..acts.rows() {
                for (m, x) in mean.iter_mut().zip(acts.row_slice(r)) {
                    *m += x / acts.rows() as f64;
                }
            }
            SaeParams::init(d, self.cfg.sae.latents, self.cfg.sae.k, &crate::tensor::Tensor::row(mean), self.cfg.seed)?
        };
        let med = Mediated::new(&model, Some(&sae))?;
        let curvature = self.curvature_set(&ds);
        let mut rows = Vec::new();
        for pair in 0..self.cfg.bench.pairs {
            let (train_id, test_id) = (pair % ds.train.len(), pair % ds.test.len());
            let (train_seq, test_seq) = (&ds.train[train_id], &ds.test[test_id]);
            // the iHVP is shared by both methods, so it is solved once
            let (ctx, ihvp_s) = timed(|| test_context(med, curvature, test_seq, self.solve_config()));
            // untrained weights can keep negative curvature past every
            // escalation; the timings stay meaningful with the raw gradient
            let (s_test, ihvp_fallback) = match ctx {
                Ok(c) => (c.ihvp.s_test, false),
                Err(Error::NegativeCurvature { .. }) => (med.grad_theta2(test_seq, self.solve_config().target)?, true),
                Err(e) => return Err(e),
            };
            for method in [Method::Swap, Method::Sweep] {
                let (r, fwd) = timed(|| med.representation(train_seq));
                let r = r?;
                let (pos, latent) =
                    timed(|| position_influence(&med, &s_test, &r, &train_seq.label, method, 1));
                let pos = pos?;
                let (_, agg) = timed(|| feature_totals(&pos));
                rows.push(BenchRow {
                    method,
                    pair,
                    train_id,
                    test_id,
                    active_coordinates: r.data().iter().filter(|&&x| x != 0.0).count(),
                    train_forward_s: fwd,
                    ihvp_s,
                    latent_s: latent,
                    aggregation_s: agg,
                    total_s: fwd + ihvp_s + latent + agg,
                    ihvp_fallback,
                });
            }
        }
        write_csv(&self.layout.bench_csv(), &rows)?;
        rec.wrote(self.layout.bench_csv());
        let sum = |m: Method, f: fn(&BenchRow) -> f64| rows.iter().filter(|r| r.method == m).map(f).sum::<f64>();
        let (swap_latent, sweep_latent) = (sum(Method::Swap, |r| r.latent_s), sum(Method::Sweep, |r| r.latent_s));
        let (swap_total, sweep_total) = (sum(Method::Swap, |r| r.total_s), sum(Method::Sweep, |r| r.total_s));
        rec.time("swap-latent", swap_latent);
        rec.time("sweep-latent", sweep_latent);
        let active = rows.iter().map(|r| r.active_coordinates).sum::<usize>() / rows.len().max(1);
        let fallbacks = rows.iter().filter(|r| r.ihvp_fallback).count() / 2;
        if fallbacks > 0 {
            rec.say(format!("{fallbacks} pairs used the raw test gradient after persistent negative curvature"));
        }
        rec.say(format!("mean active coordinates per training example: {active}"));
        rec.say(format!(
            "latent stage: swap {swap_latent:.4}s, sweep {sweep_latent:.4}s, sweep/swap {:.2}x",
            sweep_latent / swap_latent.max(f64::MIN_POSITIVE)
        ));
        rec.say(format!(
            "per-pair total: swap {swap_total:.4}s, sweep {sweep_total:.4}s, sweep/swap {:.2}x",
            sweep_total / swap_total.max(f64::MIN_POSITIVE)
        ));
        Ok(())
    }

    fn selftest(&self, rec: &mut Recorder) -> Result<()> {
        let (report, t) = timed(selftest::run);
        rec.time("selftest", t);
        io::write_json_file(&self.layout.selftest_json(), &report)?;
        rec.wrote(self.layout.selftest_json());
        for c in &report.checks {
            rec.say(format!("{} {:<34} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        if report.passed {
            Ok(())
        } else {
            let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            Err(Error::Invalid(format!("selftest failed: {}", failed.join(", "))))
        }
    }
}

/// Runs `f` on a pool of `workers` threads (all cores when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// One ranking per method from a shared context.
pub fn rank_all(methods: &[RankMethod], width: usize, ctx: &RankContext<'_>) -> Result<BTreeMap<RankMethod, eval::Ranking>> {
    methods.iter().map(|&m| Ok((m, rank_features(m, width, ctx)?))).collect()
}

#[cfg(test)]
mod tests;
