//! Multiple-choice records, a whitespace vocabulary, and a planted-trigger
//! synthetic task with ground-truth token positions.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenizedSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl DatasetRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.choices.is_empty() {
            return Err("no choices".into());
        }
        if self.answer >= self.choices.len() {
            return Err(format!("answer {} out of range for {} choices", self.answer, self.choices.len()));
        }
        Ok(())
    }
}

/// Reads one JSON record per non-blank line. Errors name the 1-based line.
pub fn load_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |msg: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| record_err(e.to_string()))?;
        rec.validate().map_err(record_err)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

// ── vocabulary ──────────────────────────────────────────────────────────

pub const UNK: &str = "<unk>";

/// Lowercased whitespace vocabulary. Id 0 is the unknown word, followed by
/// the answer-letter specials `<A>`, `<B>`, ...
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

pub fn letter(i: usize) -> String {
    let c = (b'A' + (i % 26) as u8) as char;
    if i < 26 { format!("<{c}>") } else { format!("<{c}{}>", i / 26) }
}

fn words_of(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    /// Most frequent corpus words (ties alphabetical) up to `max_size` total
    /// entries including specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, letters: usize, max_size: usize) -> Self {
        let mut words = vec![UNK.to_string()];
        words.extend((0..letters).map(letter));
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in words_of(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(w, _)| !words.contains(w)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(words.len());
        words.extend(ranked.into_iter().take(room).map(|(w, _)| w));
        Self::from_words(words)
    }

    /// Vocabulary over records: question, choice and rationale words.
    pub fn from_records(records: &[DatasetRecord], max_size: usize) -> Self {
        let letters = records.iter().map(|r| r.choices.len()).max().unwrap_or(0);
        let texts = records.iter().flat_map(|r| {
            std::iter::once(r.question.as_str())
                .chain(r.choices.iter().map(String::as_str))
                .chain(r.rationale.as_deref())
        });
        Self::build(texts, letters, max_size)
    }

    /// `<unk>` followed by `w1 .. w{size-1}`; word `wi` has id `i`.
    pub fn synthetic(size: usize) -> Self {
        let mut words = vec![UNK.to_string()];
        words.extend((1..size).map(|i| format!("w{i}")));
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(UNK, String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    words_of(text).map(|w| vocab.id(&w)).collect()
}

/// Question tokens, then (optionally) each choice as its letter special
/// followed by the choice words. The label is the answer index.
pub fn encode_record(rec: &DatasetRecord, vocab: &Vocab, include_choices: bool) -> TokenizedSequence {
    let mut ids = tokenize(&rec.question, vocab);
    if include_choices {
        for (i, c) in rec.choices.iter().enumerate() {
            ids.push(vocab.id(&letter(i)));
            ids.extend(tokenize(c, vocab));
        }
    }
    TokenizedSequence::classification(ids, rec.answer)
}

// ── synthetic planted-trigger task ──────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Trigger token of each class; empty means ids `1..=num_classes`.
    pub trigger_tokens: Vec<usize>,
    /// Probability that the distractor token belongs to the label's class.
    pub distractor_correlation: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 128,
            num_classes: 5,
            trigger_tokens: Vec::new(),
            distractor_correlation: 0.0,
            min_len: 8,
            max_len: 16,
            train_size: 400,
            test_size: 100,
        }
    }
}

impl SyntheticSpec {
    pub fn triggers(&self) -> Vec<usize> {
        if self.trigger_tokens.is_empty() {
            (1..=self.num_classes).collect()
        } else {
            self.trigger_tokens.clone()
        }
    }

    /// One distractor token per class, placed right after the triggers.
    pub fn distractors(&self) -> Vec<usize> {
        let reserved: Vec<usize> = self.triggers();
        let mut out = Vec::new();
        let mut id = 1;
        while out.len() < self.num_classes {
            if !reserved.contains(&id) {
                out.push(id);
            }
            id += 1;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let triggers = self.triggers();
        if self.num_classes == 0 {
            bad.push("num-classes must be positive".to_string());
        }
        if triggers.len() != self.num_classes {
            bad.push(format!("{} trigger tokens for {} classes", triggers.len(), self.num_classes));
        }
        let mut sorted = triggers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != triggers.len() {
            bad.push("trigger tokens must be distinct".into());
        }
        if triggers.iter().any(|&t| t == 0 || t >= self.vocab_size) {
            bad.push("trigger tokens must lie in [1, vocab-size)".into());
        }
        if !(0.0..1.0).contains(&self.distractor_correlation) {
            bad.push("distractor-correlation must lie in [0, 1)".into());
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            bad.push("need 2 <= min-len <= max-len".into());
        }
        if bad.is_empty() && (self.distractors().iter().any(|&t| t >= self.vocab_size) || self.filler().is_empty()) {
            bad.push("vocab-size too small for triggers, distractors and filler".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    fn filler(&self) -> Vec<usize> {
        let mut reserved = self.triggers();
        reserved.extend(self.distractors());
        (1..self.vocab_size).filter(|t| !reserved.contains(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub label: usize,
    pub trigger_positions: Vec<usize>,
    pub distractor_positions: Vec<usize>,
}

impl SyntheticExample {
    pub fn sequence(&self) -> TokenizedSequence {
        TokenizedSequence::classification(self.tokens.clone(), self.label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub train: Vec<SyntheticExample>,
    pub test: Vec<SyntheticExample>,
}

fn gen_example(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, id: usize, filler: &[usize]) -> SyntheticExample {
    let triggers = spec.triggers();
    let distractors = spec.distractors();
    let label = rng.random_range(0..spec.num_classes);
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let mut tokens: Vec<usize> = (0..len).map(|_| *filler.choose(rng).expect("filler tokens")).collect();
    let mut slots: Vec<usize> = (0..len).collect();
    slots.shuffle(rng);
    let (tp, dp) = (slots[0], slots[1]);
    tokens[tp] = triggers[label];
    let dclass = if rng.random::<f64>() < spec.distractor_correlation {
        label
    } else {
        rng.random_range(0..spec.num_classes)
    };
    tokens[dp] = distractors[dclass];
    SyntheticExample {
        id,
        tokens,
        label,
        trigger_positions: vec![tp],
        distractor_positions: vec![dp],
    }
}

/// Each sequence holds filler tokens, exactly one trigger of its class and
/// one distractor token whose class matches the label with probability
/// `distractor_correlation` and is uniform otherwise.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler = spec.filler();
    let train = (0..spec.train_size).map(|i| gen_example(spec, &mut rng, i, &filler)).collect();
    let test = (0..spec.test_size).map(|i| gen_example(spec, &mut rng, i, &filler)).collect();
    Ok(SyntheticData {
        spec: spec.clone(),
        seed,
        train,
        test,
    })
}

impl SyntheticData {
    pub fn train_sequences(&self) -> Vec<TokenizedSequence> {
        self.train.iter().map(SyntheticExample::sequence).collect()
    }

    pub fn test_sequences(&self) -> Vec<TokenizedSequence> {
        self.test.iter().map(SyntheticExample::sequence).collect()
    }

    fn records(&self, examples: &[SyntheticExample], split: &str) -> Vec<DatasetRecord> {
        let vocab = Vocab::synthetic(self.spec.vocab_size);
        examples
            .iter()
            .map(|e| DatasetRecord {
                id: format!("{split}-{}", e.id),
                question: e.tokens.iter().map(|&t| vocab.word(t)).collect::<Vec<_>>().join(" "),
                choices: (0..self.spec.num_classes).map(|c| format!("class{c}")).collect(),
                answer: e.label,
                rationale: None,
            })
            .collect()
    }

    /// Writes `train.jsonl`, `test.jsonl` and `ground_truth.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_jsonl(&dir.join("train.jsonl"), &self.records(&self.train, "train"))?;
        write_jsonl(&dir.join("test.jsonl"), &self.records(&self.test, "test"))?;
        let sidecar = serde_json::to_vec_pretty(self)?;
        write_file(&dir.join("ground_truth.json"), &sidecar)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("ground_truth.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;

    fn rec(answer: usize) -> DatasetRecord {
        DatasetRecord {
            id: "q1".into(),
            question: "Which gas do plants absorb".into(),
            choices: vec!["oxygen".into(), "carbon dioxide".into()],
            answer,
            rationale: Some("photosynthesis".into()),
        }
    }

    #[test]
    fn empty_file_gives_no_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_jsonl(&p).unwrap().is_empty());
    }

    #[test]
    fn record_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.jsonl");
        write_jsonl(&p, &[rec(1)]).unwrap();
        assert_eq!(load_jsonl(&p).unwrap(), vec![rec(1)]);
    }

    #[test]
    fn out_of_range_answer_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&rec(0)).unwrap();
        let bad = serde_json::to_string(&rec(2)).unwrap();
        fs::write(&p, format!("{good}\n\n{bad}\n")).unwrap();
        match load_jsonl(&p) {
            Err(Error::Record { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("out of range"));
            }
            other => panic!("{other:?}"),
        }
        fs::write(&p, "{\"id\": \"x\", \"question\": \"q\"}\n").unwrap();
        assert!(matches!(load_jsonl(&p), Err(Error::Record { line: 1, .. })));
    }

    #[test]
    fn tokenizer_cases() {
        let vocab = Vocab::from_records(&[rec(0)], 64);
        assert!(tokenize("", &vocab).is_empty());
        assert_eq!(tokenize("Plants absorb", &vocab), tokenize("plants  absorb", &vocab));
        assert_eq!(tokenize("zebra", &vocab), vec![0]);
        assert_eq!(vocab.word(0), UNK);
        assert_eq!(vocab.id("<A>"), 1);
        assert_eq!(vocab.id("<B>"), 2);
    }

    #[test]
    fn vocab_is_frequency_capped() {
        let vocab = Vocab::build(["b a a c c c"], 0, 3);
        assert_eq!(vocab.words(), &["<unk>", "c", "a"]);
    }

    #[test]
    fn record_encoding_lays_out_choices() {
        let vocab = Vocab::from_records(&[rec(0)], 64);
        let seq = encode_record(&rec(1), &vocab, true);
        let words: Vec<&str> = seq.ids.iter().map(|&i| vocab.word(i)).collect();
        assert_eq!(words, ["which", "gas", "do", "plants", "absorb", "<A>", "oxygen", "<B>", "carbon", "dioxide"]);
        assert_eq!(seq.class(), Some(1));
    }

    #[test]
    fn synthetic_is_reproducible_and_planted() {
        let spec = SyntheticSpec {
            train_size: 50,
            test_size: 10,
            ..SyntheticSpec::default()
        };
        let a = gen_synthetic(&spec, 7).unwrap();
        let b = gen_synthetic(&spec, 7).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let triggers = spec.triggers();
        for e in a.train.iter().chain(&a.test) {
            assert_eq!(e.tokens[e.trigger_positions[0]], triggers[e.label]);
            let count = e.tokens.iter().filter(|t| triggers.contains(t)).count();
            assert_eq!(count, 1);
            assert!((spec.min_len..=spec.max_len).contains(&e.tokens.len()));
        }
    }

    #[test]
    fn one_class_spec_gives_one_label() {
        let spec = SyntheticSpec {
            num_classes: 1,
            train_size: 20,
            ..SyntheticSpec::default()
        };
        assert!(gen_synthetic(&spec, 1).unwrap().train.iter().all(|e| e.label == 0));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let dup = SyntheticSpec {
            trigger_tokens: vec![3, 3, 4, 5, 6],
            ..SyntheticSpec::default()
        };
        assert!(gen_synthetic(&dup, 0).is_err());
        let corr = SyntheticSpec {
            distractor_correlation: 1.0,
            ..SyntheticSpec::default()
        };
        assert!(gen_synthetic(&corr, 0).is_err());
    }

    #[test]
    fn save_and_reload_matches_tokens() {
        let spec = SyntheticSpec {
            train_size: 5,
            test_size: 3,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.save(dir.path()).unwrap();
        assert_eq!(SyntheticData::load(dir.path()).unwrap(), data);
        let vocab = Vocab::synthetic(spec.vocab_size);
        let recs = load_jsonl(&dir.path().join("train.jsonl")).unwrap();
        for (r, e) in recs.iter().zip(&data.train) {
            assert_eq!(encode_record(r, &vocab, false), e.sequence());
        }
    }

    /// Softmax regression on bag-of-token counts, full-batch gradient descent.
    fn probe_accuracy(data: &SyntheticData, features: &[usize]) -> f64 {
        let c = data.spec.num_classes;
        let f = features.len();
        let rows: Vec<f64> = data
            .train
            .iter()
            .flat_map(|e| features.iter().map(|t| e.tokens.iter().filter(|x| *x == t).count() as f64).collect::<Vec<_>>())
            .collect();
        let n = data.train.len();
        let x = Tensor::matrix(n, f, rows);
        let labels: Vec<usize> = data.train.iter().map(|e| e.label).collect();
        let mut w = Tensor::zeros(f, c);
        for _ in 0..300 {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let logits = g.matmul(xv, wv);
            let loss = g.cross_entropy(logits, &labels);
            let grad = g.grad_values(loss, &[wv]).unwrap().remove(0);
            w.axpy(-1.0 / n as f64 * 5.0, &grad);
        }
        let logits = x.matmul(&w);
        let correct = (0..n)
            .filter(|&i| crate::model::argmax(logits.row_slice(i)) == labels[i])
            .count();
        correct as f64 / n as f64
    }

    #[test]
    fn uncorrelated_distractors_leave_triggers_decisive() {
        let spec = SyntheticSpec {
            train_size: 200,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec, 11).unwrap();
        assert_eq!(probe_accuracy(&data, &spec.triggers()), 1.0);
        let all: Vec<usize> = (0..spec.vocab_size).collect();
        assert_eq!(probe_accuracy(&data, &all), 1.0);
        assert!(probe_accuracy(&data, &spec.distractors()) < 0.5);
    }
}
