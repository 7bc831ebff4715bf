use super::*;
use crate::fixtures::tiny_run_config;

const STAGES: [Command; 6] =
    [Command::Train, Command::SaeTrain, Command::Influence, Command::EvalMask, Command::Ortho, Command::Heatmap];

fn run_all(root: &Path) -> Pipeline {
    let p = Pipeline::new(tiny_run_config(root)).unwrap();
    for cmd in STAGES {
        let m = p.run(cmd).unwrap_or_else(|e| panic!("{}: {e}", cmd.as_str()));
        assert_eq!(m.command, cmd.as_str());
        assert!(p.layout().manifest(cmd).exists());
    }
    p
}

#[test]
fn stages_need_their_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny_run_config(dir.path())).unwrap();
    match p.run(Command::SaeTrain) {
        Err(Error::MissingPrerequisite { hint, .. }) => assert_eq!(hint, "train"),
        other => panic!("expected a missing model, got {other:?}"),
    }
    p.run(Command::Train).unwrap();
    for cmd in [Command::Influence, Command::Ortho] {
        assert!(matches!(p.run(cmd), Err(Error::MissingPrerequisite { hint: "sae-train", .. })));
    }
    p.run(Command::SaeTrain).unwrap();
    assert!(matches!(p.run(Command::EvalMask), Err(Error::MissingPrerequisite { hint: "influence", .. })));
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = run_all(dir.path());
    let l = p.layout();
    for path in [l.model(), l.sae(), l.vocab(), l.train_report(), l.sae_report(), l.mask_csv(), l.ortho_csv()] {
        assert!(path.exists(), "{}", path.display());
    }
    for i in 0..2 {
        let (ifr, side) = io::read_ifr(&l.ifr(i)).unwrap();
        assert_eq!(ifr.rows(), 12);
        assert_eq!(ifr.features(), 16);
        assert_eq!(side.test_id, i);
        let pf = io::read_prefilter(&l.prefilter(i)).unwrap();
        assert_eq!(pf.ids, side.row_ids);
        let docs = attribution::load_json(&l.heatmap_json(i)).unwrap();
        assert_eq!(docs.len(), 2);
        assert!(l.heatmap_html(i).exists());
    }
    let csv = std::fs::read_to_string(l.mask_csv()).unwrap();
    // 4 methods x 2 modes x 3 k values plus the header
    assert_eq!(csv.lines().count(), 25);
    assert!(csv.starts_with("method,mode,k,examples,"));
    let ortho = std::fs::read_to_string(l.ortho_csv()).unwrap();
    assert_eq!(ortho.lines().count(), 4);
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (pa, pb) = (run_all(a.path()), run_all(b.path()));
    let read = |p: &Path| std::fs::read(p).unwrap();
    for i in 0..2 {
        let (la, lb) = (pa.layout().ifr(i), pb.layout().ifr(i));
        assert_eq!(read(&la.values), read(&lb.values));
        assert_eq!(read(&la.positions), read(&lb.positions));
    }
    assert_eq!(read(&pa.layout().mask_csv()), read(&pb.layout().mask_csv()));
    assert_eq!(read(&pa.layout().model()), read(&pb.layout().model()));
}

#[test]
fn bench_runs_without_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny_run_config(dir.path())).unwrap();
    let m = p.run(Command::Bench).unwrap();
    let csv = std::fs::read_to_string(p.layout().bench_csv()).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(m.timings.contains_key("swap-latent"));
}

#[test]
fn jsonl_records_are_truncated_from_the_front() {
    let dir = tempfile::tempdir().unwrap();
    let rec = |q: &str, answer| data::DatasetRecord {
        id: "r".into(),
        question: q.into(),
        choices: vec!["yes".into(), "no".into()],
        answer,
        rationale: None,
    };
    let long = (0..20).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
    let train_path = dir.path().join("train.jsonl");
    let test_path = dir.path().join("test.jsonl");
    data::write_jsonl(&train_path, &[rec(&long, 1), rec("short one", 0)]).unwrap();
    data::write_jsonl(&test_path, &[rec("short", 1)]).unwrap();
    let mut cfg = tiny_run_config(dir.path());
    cfg.data.source = DataSource::Jsonl;
    cfg.data.max_vocab = 24;
    cfg.paths.train_jsonl = train_path.clone();
    cfg.paths.test_jsonl = test_path;
    let ds = load_dataset(&cfg, None).unwrap();
    assert_eq!(ds.train[0].ids.len(), cfg.model.max_seq_len);
    assert_eq!(ds.train[0].ids.last(), Some(&ds.vocab.id("no")));

    data::write_jsonl(&train_path, &[rec("q", 5)]).unwrap();
    assert!(matches!(load_dataset(&cfg, None), Err(Error::Record { line: 1, .. })));
}

#[test]
fn changed_model_section_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::new(tiny_run_config(dir.path())).unwrap().run(Command::Train).unwrap();
    let mut cfg = tiny_run_config(dir.path());
    cfg.model.mlp_hidden += 1;
    let p = Pipeline::new(cfg).unwrap();
    assert!(matches!(p.run(Command::SaeTrain), Err(Error::Config(_))));
}

#[test]
fn worker_pool_bounds_threads() {
    assert_eq!(with_workers(Some(2), rayon::current_num_threads).unwrap(), 2);
    assert!(matches!(with_workers(Some(0), || ()), Err(Error::Config(_))));
}
