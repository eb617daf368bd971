use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const TINY: &str = "\
# small enough to train in a blink
model.bands = 8
model.reduction = 2
model.context = 8
model.embedding = 2
model.kernel_size = 3
model.dilations = 1,2
model.noise_dim = 2
corpus.pairs_per_class_pair = 3
corpus.min_len = 6
corpus.max_len = 10
corpus.held_out = 2
train.teacher_iterations = 3
train.student_iterations = 3
train.batch_size = 2
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_s2svc"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn summary(stdout: &str) -> serde_json::Value {
    let line = stdout.lines().last().expect("summary line");
    serde_json::from_str(line).expect("json summary")
}

/// Tiny config, corpus, teacher and student in a fresh directory.
fn trained() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_path_buf();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(&d, &["gen-corpus", "--config", "tiny.cfg", "--seed", "3", "--out", "c.corpus"]);
    ok(&d, &["train-teacher", "--config", "tiny.cfg", "--seed", "3", "--corpus", "c.corpus", "--out", "t.ckpt"]);
    ok(&d, &["train-student", "--config", "tiny.cfg", "--seed", "3", "--corpus", "c.corpus", "--teacher", "t.ckpt", "--out", "s.ckpt"]);
    (dir, d)
}

#[test]
fn gen_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = ok(d, &["gen-corpus", "--seed", "7", "--classes", "2", "--pairs", "50", "--out", "a.bin"]);
    ok(d, &["gen-corpus", "--seed", "7", "--classes", "2", "--pairs", "50", "--out", "b.bin"]);
    assert_eq!(fs::read(d.join("a.bin")).unwrap(), fs::read(d.join("b.bin")).unwrap());
    let s = summary(&a);
    assert_eq!(s["cmd"], "gen-corpus");
    assert_eq!(s["seed"], 7);
    assert_eq!(s["metrics"]["pairs"], 100);
    ok(d, &["gen-corpus", "--seed", "8", "--classes", "2", "--pairs", "50", "--out", "c.bin"]);
    assert_ne!(fs::read(d.join("a.bin")).unwrap(), fs::read(d.join("c.bin")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(d, &["gen-corpus", "--out", "x", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(run(d, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(d, &["gen-corpus", "--out", "x", "--set", "model.wings=2"]).status.code(), Some(2));
    assert_eq!(run(d, &["gen-corpus", "--out", "x", "--precision", "f16"]).status.code(), Some(2));
    assert_eq!(run(d, &["train-teacher", "--corpus", "missing.bin", "--out", "t"]).status.code(), Some(1));
    assert_eq!(run(d, &["gen-corpus", "--config", "missing.cfg", "--out", "x"]).status.code(), Some(1));
    assert_eq!(run(d, &["eval-mcd", "--reference", "a"]).status.code(), Some(2));
    assert_eq!(run(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn grad_check_passes_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let s = summary(&ok(d, &["grad-check", "--config", "tiny.cfg"]));
    assert!(s["metrics"]["max_relative_error"].as_f64().unwrap() <= 1e-3);
    assert!(s["metrics"]["entries_checked"].as_u64().unwrap() > 100);
}

#[test]
fn grad_check_fails_with_exit_3_when_step_is_absurd() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let out = run(d, &["grad-check", "--config", "tiny.cfg", "--step", "0.5"]);
    assert_eq!(out.status.code(), Some(3));
    let s = summary(&String::from_utf8(out.stdout).unwrap());
    assert!(s["metrics"]["max_relative_error"].as_f64().unwrap() > 1e-3);
}

fn write_wav(path: &Path, seconds: f64) {
    let spec = hound::WavSpec { channels: 1, sample_rate: 16_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    let n = (seconds * 16_000.0) as usize;
    for i in 0..n {
        let t = i as f64 / 16_000.0;
        let f = 200.0 + 1500.0 * t;
        let v = 0.3 * (std::f64::consts::TAU * f * t).sin() + 0.1 * (std::f64::consts::TAU * 3100.0 * t).sin();
        w.write_sample((v * 32767.0) as i16).unwrap();
    }
    w.finalize().unwrap();
}

fn raw_frames(bytes: &[u8]) -> Vec<(u32, Vec<f32>)> {
    let mut r = bytes;
    let mut out = Vec::new();
    while let Some(f) = s2svc_cli::raw::read_frame(&mut r).unwrap() {
        out.push(f);
    }
    out
}

#[test]
fn identity_stream_matches_identity_convert_and_raw_pipe() {
    let (_dir, d) = trained();
    write_wav(&d.join("in.wav"), 0.4);
    let s = summary(&ok(&d, &["extract-mel", "--config", "tiny.cfg", "--wav", "in.wav", "--out", "x.feat"]));
    assert_eq!(s["metrics"]["dim"], 16);
    let frames = s["metrics"]["stacked_frames"].as_u64().unwrap();
    assert!(frames > 10);

    ok(&d, &["convert", "--config", "tiny.cfg", "--model", "s.ckpt", "--input", "x.feat", "--out", "batch.feat", "--identity"]);
    let s = summary(&ok(
        &d,
        &["stream", "--config", "tiny.cfg", "--model", "s.ckpt", "--input", "x.feat", "--out", "stream.feat", "--identity", "--chunk", "4", "--timing", "t.csv"],
    ));
    assert_eq!(fs::read(d.join("batch.feat")).unwrap(), fs::read(d.join("stream.feat")).unwrap());
    assert_eq!(s["metrics"]["frames"].as_u64().unwrap(), frames);
    let csv = fs::read_to_string(d.join("t.csv")).unwrap();
    assert!(csv.starts_with("window_index,ms_feature,ms_mapping,ms_total"));
    assert_eq!(csv.lines().count() as u64, 1 + frames.div_ceil(4));

    // Raw pipe: same frames in, same values out (rounded to f32).
    let (x, _) = s2svc::data::container::load_features::<f64>(&d.join("x.feat")).unwrap();
    let (y, _) = s2svc::data::container::load_features::<f64>(&d.join("batch.feat")).unwrap();
    let mut input = Vec::new();
    for c in 0..x.cols() {
        let col: Vec<f32> = x.col(c).iter().map(|v| *v as f32).collect();
        s2svc_cli::raw::write_frame(&mut input, c as u32, &col).unwrap();
    }
    let mut child = bin()
        .current_dir(&d)
        .args(["stream", "--config", "tiny.cfg", "--model", "s.ckpt", "--raw", "--identity", "--window", "3", "--precision", "f32"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(&input).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let got = raw_frames(&out.stdout);
    assert_eq!(got.len(), y.cols());
    for (c, (idx, col)) in got.iter().enumerate() {
        assert_eq!(*idx as usize, c);
        for (a, b) in col.iter().zip(y.col(c)) {
            assert!((*a as f64 - b).abs() <= 1e-3 * (1.0 + b.abs()), "frame {c}: {a} vs {b}");
        }
    }
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.lines().any(|l| l.starts_with("{\"cmd\":\"stream\"")));
}

#[test]
fn rerun_from_echo_is_bit_exact() {
    let (_dir, d) = trained();
    ok(&d, &["train-teacher", "--config", "t.ckpt.cfg", "--corpus", "c.corpus", "--out", "t2.ckpt"]);
    assert_eq!(fs::read(d.join("t.ckpt")).unwrap(), fs::read(d.join("t2.ckpt")).unwrap());
    ok(&d, &["train-student", "--config", "s.ckpt.cfg", "--corpus", "c.corpus", "--teacher", "t.ckpt", "--out", "s2.ckpt"]);
    assert_eq!(fs::read(d.join("s.ckpt")).unwrap(), fs::read(d.join("s2.ckpt")).unwrap());
    ok(&d, &["gen-corpus", "--config", "c.corpus.cfg", "--out", "c2.corpus"]);
    assert_eq!(fs::read(d.join("c.corpus")).unwrap(), fs::read(d.join("c2.corpus")).unwrap());
    // A different seed changes the result.
    ok(&d, &["train-teacher", "--config", "t.ckpt.cfg", "--seed", "4", "--corpus", "c.corpus", "--out", "t3.ckpt"]);
    assert_ne!(fs::read(d.join("t.ckpt")).unwrap(), fs::read(d.join("t3.ckpt")).unwrap());
}

#[test]
fn eval_mcd_and_convert_modes() {
    let (_dir, d) = trained();
    let s = summary(&ok(&d, &["eval-mcd", "--config", "tiny.cfg", "--model", "s.ckpt", "--corpus", "c.corpus", "--csv", "m.csv"]));
    assert_eq!(s["metrics"]["pairs"], 2);
    assert!(s["metrics"]["mcd_db"].as_f64().unwrap().is_finite());
    let csv = fs::read_to_string(d.join("m.csv")).unwrap();
    assert!(csv.starts_with("pair_id,MCD\n"));
    assert_eq!(csv.lines().count(), 3);
    ok(&d, &["eval-mcd", "--config", "tiny.cfg", "--model", "t.ckpt", "--corpus", "c.corpus", "--teacher-mode", "forced"]);

    write_wav(&d.join("in.wav"), 0.3);
    ok(&d, &["extract-mel", "--config", "tiny.cfg", "--wav", "in.wav", "--out", "x.feat"]);
    let s = summary(&ok(&d, &["eval-mcd", "--reference", "x.feat", "--converted", "x.feat"]));
    assert_eq!(s["metrics"]["mcd_db"].as_f64().unwrap(), 0.0);

    let s = summary(&ok(&d, &["convert", "--config", "tiny.cfg", "--model", "t.ckpt", "--input", "x.feat", "--out", "ar.feat", "--length", "7"]));
    assert_eq!(s["metrics"]["frames_out"], 7);
    let s = summary(&ok(&d, &["convert", "--config", "tiny.cfg", "--model", "s.ckpt", "--input", "x.feat", "--out", "nar.feat", "--length", "9"]));
    assert_eq!(s["metrics"]["frames_out"], 9);
    assert_eq!(run(&d, &["convert", "--model", "s.ckpt", "--input", "x.feat", "--out", "o", "--length", "many"]).status.code(), Some(2));
    // A model expecting other dimensions rejects the file as an invariant violation.
    ok(&d, &["extract-mel", "--wav", "in.wav", "--out", "wide.feat"]);
    assert_eq!(run(&d, &["convert", "--model", "s.ckpt", "--input", "wide.feat", "--out", "o"]).status.code(), Some(3));

    let s = summary(&ok(&d, &["bench", "--config", "tiny.cfg", "--student", "s.ckpt", "--teacher", "t.ckpt", "--frames", "12", "--repeats", "1"]));
    assert!(s["metrics"]["speedup"].as_f64().unwrap() > 0.0);
}
