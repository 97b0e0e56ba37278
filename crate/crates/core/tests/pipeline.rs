use neutra::config::TrainConfig;
use neutra::evaluation::evaluate_checkpoint;
use neutra::models::{neutralize, Checkpoint};
use neutra::synthetic::{generate_corpus, SyntheticSpec};
use neutra::training::{loss_csv, train, Corpus};
use neutra::Error;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec::parse("n_vertices = 30\nsubjects = 6\nexpressions = 3\nidentity_rank = 3\nexpression_rank = 2\nseed = 11\n")
        .unwrap()
}

#[test]
fn train_save_load_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let summary = generate_corpus(&small_spec(), dir.path()).unwrap();
    assert_eq!(summary.files, 6 * 4);
    let corpus = Corpus::load(dir.path()).unwrap();
    let cfg = TrainConfig::parse("epochs = 3\nbatch_size = 4\nseed = 11\n").unwrap();
    let out = train(&corpus, &cfg).unwrap();
    assert_eq!(out.history.len(), 3);
    assert!(out.history.iter().all(|r| r.is_finite()));
    assert_eq!(out.checkpoint.subjects, out.train_subjects);

    let path = dir.path().join("model.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    assert_eq!(TrainConfig::parse(&loaded.config_echo).unwrap(), cfg);

    let test = Corpus::new(
        corpus
            .subjects
            .iter()
            .filter(|s| out.test_subjects.contains(&s.name))
            .cloned()
            .collect(),
    )
    .unwrap();
    let report = evaluate_checkpoint(&loaded, &test, false).unwrap();
    assert_eq!(report.rows.len(), test.subjects.len() * 3);
    assert!(report.model_error.is_finite() && report.baseline_error > 0.0);

    // the training subjects must be refused as a test set
    assert!(matches!(evaluate_checkpoint(&loaded, &corpus, false), Err(Error::Corpus(_))));

    let scan = &test.subjects[0].expressions[0].1;
    let a = neutralize(scan, &loaded).unwrap();
    assert_eq!(a.faces(), scan.faces());
    assert_eq!(neutralize(scan, &loaded).unwrap(), a);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(&small_spec(), dir.path()).unwrap();
    let corpus = Corpus::load(dir.path()).unwrap();
    let cfg = TrainConfig::parse("epochs = 2\nbatch_size = 5\nseed = 4\n").unwrap();
    let (a, b) = (train(&corpus, &cfg).unwrap(), train(&corpus, &cfg).unwrap());
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(loss_csv(&a.history), loss_csv(&b.history));
    let other = train(&corpus, &TrainConfig { seed: 5, ..cfg }).unwrap();
    assert_ne!(other.checkpoint.to_bytes(), a.checkpoint.to_bytes());
}

#[test]
fn corpus_generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_corpus(&small_spec(), a.path()).unwrap();
    generate_corpus(&small_spec(), b.path()).unwrap();
    let read = |root: &std::path::Path| {
        let mut files = Vec::new();
        for s in std::fs::read_dir(root).unwrap() {
            let s = s.unwrap().path();
            if s.is_dir() {
                for f in std::fs::read_dir(&s).unwrap() {
                    let f = f.unwrap().path();
                    files.push((f.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&f).unwrap()));
                }
            } else {
                files.push((s.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&s).unwrap()));
            }
        }
        files.sort();
        files
    };
    assert_eq!(read(a.path()), read(b.path()));
}
