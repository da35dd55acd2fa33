use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use allost::checkpoint;
use allost::manifest;
use allost_core::model::{AlloSt, ModelConfig, ParameterSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn allost(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_allost"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = allost(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn failure(args: &[&str]) -> (i32, String) {
    let out = allost(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    (out.status.code().unwrap(), err)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_synth(dir: &Path, seed: &str) {
    ok(&[
        "synth", "--out", s(dir), "--n-train", "12", "--n-valid", "4", "--n-test", "4", "--seed", seed,
    ]);
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    small_synth(&a, "7");
    small_synth(&b, "7");
    small_synth(&c, "8");
    let ta = tree(&a);
    assert_eq!(ta.len(), 3 + 20);
    assert_eq!(ta, tree(&b));
    assert_ne!(ta, tree(&c));
}

fn random_checkpoint(seed: u64) -> ParameterSet<f32> {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        ffn_dim: 16,
        acoustic_layers: 1,
        phone_layers: 1,
        decoder_layers: 1,
        conv_kernel: 3,
        phone_vocab: 10,
        target_vocab: 12,
        acoustic_feature_dim: 5,
        ..ModelConfig::default()
    };
    AlloSt::new(cfg).unwrap().init_params(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn average_of_one_checkpoint_twice_is_that_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.alst");
    let out = tmp.path().join("avg.alst");
    checkpoint::save(&a, &random_checkpoint(3)).unwrap();
    ok(&["average", "--out", s(&out), s(&a), s(&a)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn average_rejects_mismatched_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.alst");
    let b = tmp.path().join("b.alst");
    checkpoint::save(&a, &random_checkpoint(3)).unwrap();
    let full = random_checkpoint(4);
    let mut other = ParameterSet::new();
    for (name, t) in full.iter().take(full.len() - 1) {
        other.insert(name, t.clone()).unwrap();
    }
    checkpoint::save(&b, &other).unwrap();
    let (code, err) = failure(&["average", "--out", s(&tmp.path().join("o.alst")), s(&a), s(&b)]);
    assert_ne!(code, 0);
    assert!(err.starts_with("error["), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn score_emits_json() {
    let tmp = tempfile::tempdir().unwrap();
    let hyp = tmp.path().join("hyp.txt");
    let r1 = tmp.path().join("r1.txt");
    let r2 = tmp.path().join("r2.txt");
    fs::write(&hyp, "the cat sat on the mat\nHello, world!\n").unwrap();
    fs::write(&r1, "the cat sat on the mat\nhello world\n").unwrap();
    fs::write(&r2, "a cat was on the mat\nhello there world\n").unwrap();
    let out = ok(&["score", "--hyps", s(&hyp), "--refs", s(&r1), "--refs", s(&r2)]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!((v["bleu"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert_eq!(v["precisions"].as_array().unwrap().len(), 4);
    assert_eq!(v["bp"].as_f64().unwrap(), 1.0);
    assert_eq!(v["cand_len"].as_u64().unwrap(), 8);
    assert_eq!(v["ref_len"].as_u64().unwrap(), 8);

    fs::write(&r2, "only one line\n").unwrap();
    let (code, err) = failure(&["score", "--hyps", s(&hyp), "--refs", s(&r1), "--refs", s(&r2)]);
    assert_eq!(code, 3);
    assert!(err.starts_with("error[data]:"), "{err}");
}

#[test]
fn missing_input_is_a_data_error() {
    let (code, err) = failure(&["score", "--hyps", "/nonexistent/h.txt", "--refs", "/nonexistent/r.txt"]);
    assert_eq!(code, 3);
    assert!(err.starts_with("error[data]:"), "{err}");
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, "[train]\nwarmup = 10\n").unwrap();
    let (code, err) = failure(&["train", "--config", s(&cfg)]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error[config]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    let (code, _) = failure(&["train", "--set", "train.keep_best=0"]);
    assert_eq!(code, 2);
}

#[test]
fn bpe_train_and_encode_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synth(&data, "1");
    let tok = tmp.path().join("phones.bpe");
    let train = data.join("train.jsonl");
    ok(&["bpe-train", "--manifest", s(&train), "--field", "phones", "--vocab-size", "80", "--out", s(&tok)]);
    let records = manifest::read(&train).unwrap();
    let input = tmp.path().join("phones.txt");
    let lines: Vec<&str> = records.iter().map(|r| r.phones.as_str()).collect();
    fs::write(&input, lines.join("\n")).unwrap();
    for dropout in ["0", "0.3", "1"] {
        let out = ok(&["bpe-encode", "--tokenizer", s(&tok), "--input", s(&input), "--dropout", dropout, "--seed", "5"]);
        let decoded: Vec<String> = out.lines().map(|l| l.replace('+', " ")).collect();
        assert_eq!(decoded, lines, "dropout {dropout}");
    }
    let raw = ok(&["bpe-encode", "--tokenizer", s(&tok), "--input", s(&input), "--dropout", "1"]);
    let merged = ok(&["bpe-encode", "--tokenizer", s(&tok), "--input", s(&input)]);
    let count = |t: &str| t.split_whitespace().count();
    assert_eq!(count(&raw), lines.iter().map(|l| count(l)).sum::<usize>());
    assert!(count(&merged) < count(&raw));
}

#[test]
fn train_translate_score_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synth(&data, "2");
    let phones = tmp.path().join("phones.bpe");
    let target = tmp.path().join("target.bpe");
    let train = data.join("train.jsonl");
    ok(&["bpe-train", "--manifest", s(&train), "--field", "phones", "--vocab-size", "60", "--out", s(&phones)]);
    ok(&["bpe-train", "--manifest", s(&train), "--field", "target", "--vocab-size", "60", "--out", s(&target)]);
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("exp.toml");
    fs::write(
        &cfg,
        format!(
            "[model]\nd_model = 16\nheads = 2\nffn_dim = 32\nacoustic_layers = 1\nphone_layers = 1\n\
             decoder_layers = 1\nconv_kernel = 3\n\n[train]\nbatch_size = 4\nmax_steps = 6\n\
             valid_interval = 2\nkeep_best = 2\nwarmup_steps = 4\n\n[data]\ntrain_manifest = {:?}\n\
             valid_manifest = {:?}\nphone_tokenizer = {:?}\ntarget_tokenizer = {:?}\nrun_dir = \"unused\"\n",
            s(&train),
            s(&data.join("valid.jsonl")),
            s(&phones),
            s(&target)
        ),
    )
    .unwrap();
    ok(&["train", "--config", s(&cfg), "--fusion", "both", "--run-dir", s(&run)]);

    let echoed = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("fusion_mode = \"both\""));
    assert!(echoed.contains("seed = 1"));
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    for (r, step) in records.iter().zip([2, 4, 6]) {
        assert_eq!(r["step"], step);
        for key in ["epoch", "train_loss", "valid_loss", "lr"] {
            assert!(r[key].is_number(), "{key} missing from {r}");
        }
    }
    assert_eq!(fs::read_dir(run.join("checkpoints")).unwrap().count(), 2);
    let avg = run.join("averaged.alst");
    assert!(avg.exists());

    // The echoed config alone is enough to reproduce the run.
    let rerun = tmp.path().join("rerun");
    ok(&["train", "--config", s(&run.join("config.toml")), "--run-dir", s(&rerun)]);
    assert_eq!(fs::read(&avg).unwrap(), fs::read(rerun.join("averaged.alst")).unwrap());
    assert_eq!(metrics, fs::read_to_string(rerun.join("metrics.jsonl")).unwrap());

    let hyps = tmp.path().join("hyps.txt");
    let test = data.join("test.jsonl");
    ok(&[
        "translate", "--config", s(&run.join("config.toml")), "--checkpoint", s(&avg), "--manifest", s(&test),
        "--beam", "2", "--max-len", "8", "--out", s(&hyps),
    ]);
    assert_eq!(fs::read_to_string(&hyps).unwrap().lines().count(), 4);

    // A six-step model mostly emits nothing, so score the references instead.
    let targets: Vec<String> = manifest::read(&test).unwrap().into_iter().map(|r| r.target).collect();
    fs::write(&hyps, targets.join("\n")).unwrap();
    let out = ok(&["score", "--hyps", s(&hyps), "--manifest", s(&test)]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["bleu"].as_f64().unwrap(), 100.0);
}

#[test]
fn ablate_table_has_four_rows_and_two_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_synth(&data, "3");
    let work = tmp.path().join("ablate");
    let out = ok(&[
        "ablate", "--data", s(&data), "--work-dir", s(&work), "--seeds", "1", "--phone-vocab", "60",
        "--target-vocab", "60", "--max-len", "4",
        "--set", "model.d_model=8", "--set", "model.heads=2", "--set", "model.ffn_dim=8",
        "--set", "model.acoustic_layers=1", "--set", "model.phone_layers=1", "--set", "model.decoder_layers=1",
        "--set", "model.conv_kernel=3", "--set", "train.max_steps=2", "--set", "train.batch_size=6",
        "--set", "train.keep_best=1",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 6, "{out}");
    assert_eq!(lines[0], "| fusion | raw phones | BPE phones |");
    for (line, mode) in lines[2..].iter().zip(["none", "encoder", "decoder", "both"]) {
        assert!(line.starts_with(&format!("| {mode} |")), "{line}");
        assert_eq!(line.matches('|').count(), 4);
        assert!(!line.contains(" - "), "{line}");
    }
    assert_eq!(fs::read_to_string(work.join("results.md")).unwrap(), out);
    assert!(work.join("config.toml").exists());
}
