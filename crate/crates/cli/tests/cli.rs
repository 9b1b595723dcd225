use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use dwd_cli::manifest::{sha256_file, Manifest, MANIFEST};
use dwd_cli::play::{play, PlayOutcome};
use dwd_core::agents::abot_answer;
use dwd_core::eval::rollout;
use dwd_core::service::live_pool;
use dwd_core::synthworld::{Question, WorldConfig};
use dwd_core::trainer::Checkpoint;

fn dwd(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dwd"))
        .args(args)
        .env("DWD_DATA_DIR", root)
        .output()
        .unwrap()
}

fn last_line(o: &Output) -> PathBuf {
    let s = String::from_utf8_lossy(&o.stdout);
    PathBuf::from(s.lines().last().unwrap().trim())
}

fn gen(root: &Path) -> PathBuf {
    let data = root.join("data");
    let o = dwd(root, &["gen-data", "--n", "64", "--seed", "7", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    data
}

fn train_tiny(root: &Path, data: &Path, variant: &str) -> PathBuf {
    let o = dwd(
        root,
        &[
            "train", "--stage", "stage1", "--seed", "7", "--variant", variant, "--data",
            data.to_str().unwrap(), "--set", "epochs=1",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    last_line(&o).join("checkpoint.dwd")
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(dwd(root.path(), &["--help"]).status.code(), Some(0));
    let o = dwd(root.path(), &["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    assert_eq!(dwd(root.path(), &["frobnicate"]).status.code(), Some(1));
    let missing = root.path().join("nope.dwd");
    let o = dwd(root.path(), &["eval", "--checkpoint", missing.to_str().unwrap(), "--seed", "1", "--data", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(dwd(root.path(), &["report", "--grid", "huge", "--seed", "1"]).status.code(), Some(1));
}

#[test]
fn gen_data_writes_dataset_corpus_and_manifest() {
    let root = tempfile::tempdir().unwrap();
    let data = gen(root.path());
    for f in ["train.bin", "train_corpus.txt", "val.bin", "val_corpus.txt", MANIFEST] {
        assert!(data.join(f).exists(), "{f}");
    }
    let m = Manifest::parse(&fs::read_to_string(data.join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(m.get("sha256.train.bin").unwrap(), sha256_file(&data.join("train.bin")).unwrap());
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let root = tempfile::tempdir().unwrap();
    let data = gen(root.path());
    let a = train_tiny(root.path(), &data, "ours_discrete_elbo");
    let b = train_tiny(root.path(), &data, "ours_discrete_elbo");
    assert_ne!(a, b);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let run = a.parent().unwrap();
    assert!(run.file_name().unwrap().to_str().unwrap().contains("seed7"));
    assert!(run.starts_with(root.path().join("runs")));
    let m = Manifest::parse(&fs::read_to_string(run.join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(m.get("config.epochs"), Some("1"));
    assert_eq!(m.get("sha256.checkpoint.dwd").unwrap(), sha256_file(&a).unwrap());
    assert!(m.get("input.train.sha256").is_some());
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("cfg.txt");
    fs::write(&cfg, "# tiny\nepochs = 1\nwidth = 3\n").unwrap();
    let o = dwd(root.path(), &["train", "--stage", "stage1", "--seed", "1", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
}

#[test]
fn report_prints_the_full_grid() {
    let root = tempfile::tempdir().unwrap();
    let data = gen(root.path());
    let a = train_tiny(root.path(), &data, "ours_discrete_elbo");
    let t = train_tiny(root.path(), &data, "typical_transfer");
    let o = dwd(
        root.path(),
        &[
            "report", "--grid", "default", "--seed", "3", "--n-pools", "2", "--data", data.to_str().unwrap(),
            "--model", &format!("zero_shot={}", a.display()),
            "--model", &format!("ours={}", a.display()),
            "--model", &format!("typical={}", t.display()),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = fs::read_to_string(last_line(&o).join("report.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 19);
    assert!(data.join("metric_lm.bin").exists());
}

fn oracle_script(ck: &Checkpoint, p: usize, r: usize, seed: u64) -> String {
    // answers are decided by replaying the rollout the game must match
    let pool = live_pool(p, &WorldConfig::default(), seed).unwrap();
    let t = rollout(ck, &pool, r, seed).unwrap();
    t.rounds.iter().map(|x| format!("{}\n", x.answer.name())).collect()
}

#[test]
fn scripted_play_matches_rollout() {
    let root = tempfile::tempdir().unwrap();
    let data = gen(root.path());
    let ck = Arc::new(Checkpoint::load(&train_tiny(root.path(), &data, "ours_discrete_elbo")).unwrap());
    for (p, r, seed) in [(4, 5, 11), (9, 9, 2), (2, 1, 5)] {
        let script = oracle_script(&ck, p, r, seed);
        let mut out = Vec::new();
        let outcome = play(Arc::clone(&ck), p, r, seed, Cursor::new(script), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.matches("answer> ").count(), r);
        let PlayOutcome::Finished(t) = outcome else { panic!("game did not finish") };
        let pool = live_pool(p, &WorldConfig::default(), seed).unwrap();
        assert_eq!(t, rollout(&ck, &pool, r, seed).unwrap());
        assert!(text.contains(&format!("guesses image {}", t.final_guess + 1)));
        // the oracle agrees with every scripted answer
        for round in &t.rounds {
            let q: &Question = &round.question;
            assert_eq!(abot_answer(&pool, pool.target, q).0, round.answer);
        }
    }
}

#[test]
fn invalid_answers_reprompt_and_quit_stops() {
    let root = tempfile::tempdir().unwrap();
    let data = gen(root.path());
    let ck = Arc::new(Checkpoint::load(&train_tiny(root.path(), &data, "ours_discrete_elbo")).unwrap());
    let mut out = Vec::new();
    let o = play(Arc::clone(&ck), 4, 5, 1, Cursor::new("maybe\nyes\nquit\n"), &mut out).unwrap();
    assert!(matches!(o, PlayOutcome::Quit));
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains("unknown answer \"maybe\""));
    assert_eq!(text.matches("answer> ").count(), 3);
    let mut out = Vec::new();
    assert!(matches!(play(ck, 2, 5, 1, Cursor::new(""), &mut out).unwrap(), PlayOutcome::Quit));
}

#[test]
fn terminal_quit_persists_nothing() {
    let root = tempfile::tempdir().unwrap();
    let data = gen(root.path());
    let ck = train_tiny(root.path(), &data, "ours_discrete_elbo");
    let store = root.path().join("store");
    let mut child = Command::new(env!("CARGO_BIN_EXE_dwd"))
        .args(["play", "--checkpoint", ck.to_str().unwrap(), "--seed", "3", "--store", store.to_str().unwrap()])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    use std::io::Write;
    child.stdin.take().unwrap().write_all(b"yes\nquit\n").unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    let saved = store.join("transcripts.jsonl");
    assert!(!saved.exists() || fs::read_to_string(saved).unwrap().trim().is_empty());
}
