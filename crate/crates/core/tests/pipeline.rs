use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use coopgen::desk::{generate_desk_corpus, DESK_DOCUMENTS, DESK_SEED};
use coopgen::discriminators::ScorerId;
use coopgen::pipeline::{files, ArtifactHeader, PipelineConfig, SystemMode, Workspace};
use coopgen::Error;
use tempfile::TempDir;

fn tiny_config(corpus: &Path, out: &Path) -> PipelineConfig {
    let mut c = PipelineConfig {
        output_dir: out.to_path_buf(),
        seed: 3,
        ..PipelineConfig::default()
    };
    c.data.corpus = corpus.to_path_buf();
    c.data.held_out_fraction = 0.4;
    c.data.test = 6;
    c.data.valid = 4;
    c.data.mixture = 3;
    c.data.nli_train = 30;
    c.data.nli_eval = 9;
    c.data.nli_domain = 20;
    c.lm.embedding_dim = 8;
    c.lm.hidden_size = 8;
    c.lm.num_layers = 1;
    c.lm_train.epochs = 1;
    c.lm_train.bptt = 10;
    c.lm_train.batch_size = 4;
    c.lm_train.validation_interval = 20;
    c.scorers.repetition.hidden_size = 4;
    c.scorers.relevance.filters = 4;
    c.scorers.entailment.hidden_size = 4;
    c.scorers.ranking.epochs = 1;
    c.scorers.nli.epochs = 1;
    c.beam.beam_size = 2;
    c.beam.max_steps = 25;
    c.baseline.beam_size = 2;
    c.baseline.max_steps = 25;
    c
}

struct Run {
    dir: TempDir,
    corpus: PathBuf,
}

impl Run {
    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn workspace(&self, out: &Path) -> Workspace {
        Workspace::new(tiny_config(&self.corpus, out)).unwrap()
    }
}

fn finished_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.txt");
        std::fs::write(&corpus, generate_desk_corpus(60, 5)).unwrap();
        let run = Run { dir, corpus };
        run.workspace(&run.out()).run_all().unwrap();
        run
    })
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let p = e.unwrap().path();
        std::fs::copy(&p, to.join(p.file_name().unwrap())).unwrap();
    }
}

#[test]
fn every_artifact_records_config_hash_and_seed() {
    let run = finished_run();
    let ws = run.workspace(&run.out());
    let hash = ws.config_hash();
    let mut seen = 0;
    for e in std::fs::read_dir(run.out()).unwrap() {
        let p = e.unwrap().path();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains(hash), "{} lacks the config hash", p.display());
        assert!(text.contains("seed"), "{} lacks a seed", p.display());
        if p.extension().is_some_and(|x| x == "jsonl") {
            let header: ArtifactHeader = serde_json::from_str(text.lines().next().unwrap()).unwrap();
            assert_eq!(header.config_hash, hash);
        }
        seen += 1;
    }
    assert!(seen >= 15, "only {seen} artifacts");
}

#[test]
fn tampered_vocabulary_hash_is_rejected() {
    let run = finished_run();
    let out = run.dir.path().join("tampered");
    copy_dir(&run.out(), &out);
    let name = files::generations("full");
    let text = std::fs::read_to_string(out.join(&name)).unwrap();
    let (head, rest) = text.split_once('\n').unwrap();
    let mut header: ArtifactHeader = serde_json::from_str(head).unwrap();
    header.vocab_hash = "0".repeat(header.vocab_hash.len());
    std::fs::write(out.join(&name), format!("{}\n{rest}", serde_json::to_string(&header).unwrap())).unwrap();
    let err = run.workspace(&out).evaluate(&[SystemMode::Full], "report").unwrap_err();
    assert!(matches!(err, Error::VocabularyMismatch(_)), "{err}");
}

#[test]
fn rerunning_a_stage_rewrites_identical_bytes() {
    let run = finished_run();
    let out = run.dir.path().join("rerun");
    copy_dir(&run.out(), &out);
    let ws = run.workspace(&out);
    ws.prepare().unwrap();
    ws.generate(SystemMode::LmBaseline).unwrap();
    for name in ["vocab.txt", "examples_test.jsonl", "nli_train.jsonl", "generations_lm-baseline.jsonl"] {
        assert_eq!(
            std::fs::read(out.join(name)).unwrap(),
            std::fs::read(run.out().join(name)).unwrap(),
            "{name} changed"
        );
    }
}

#[test]
fn weights_cover_exactly_the_active_scorers() {
    let run = finished_run();
    let out = run.dir.path().join("reevaluated");
    copy_dir(&run.out(), &out);
    let ws = run.workspace(&out);
    assert_eq!(ws.weights(SystemMode::Full).unwrap().ids(), ScorerId::ALL.to_vec());
    let rows = ws.evaluate(&[SystemMode::Full, SystemMode::LmBaseline], "report_check").unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.n_examples == 6));
}

#[test]
fn missing_prerequisites_name_the_stage_to_run() {
    let run = finished_run();
    let empty = run.dir.path().join("empty");
    let ws = run.workspace(&empty);
    match ws.train_lm().unwrap_err() {
        Error::MissingArtifact { stage, .. } => assert_eq!(stage, "prepare"),
        e => panic!("unexpected {e}"),
    }
    let partial = run.dir.path().join("partial");
    copy_dir(&run.out(), &partial);
    std::fs::remove_file(partial.join(files::lambda("full"))).unwrap();
    match run.workspace(&partial).generate(SystemMode::Full).unwrap_err() {
        Error::MissingArtifact { stage, .. } => assert_eq!(stage, "learn-weights"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn bundled_corpus_matches_its_generator() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/desk_corpus.txt");
    assert_eq!(std::fs::read_to_string(path).unwrap(), generate_desk_corpus(DESK_DOCUMENTS, DESK_SEED));
}

#[test]
fn bundled_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for e in std::fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        PipelineConfig::load(Some(&p), &[]).unwrap_or_else(|err| panic!("{}: {err}", p.display()));
    }
}
