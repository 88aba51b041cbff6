use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
task = \"quality\"
seed = 5
n = 20
image_dim = 8
image_depth = 4
image_heads = 2
tap_layers = [1, 2, 3, 4]
cnn_base_channels = 1
text_dim = 8
text_depth = 1
text_heads = 2
max_tokens = 8
fusion_heads = 2
queries = 2
epochs = 2
batch_size = 8
";

fn mlfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlfuse")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn synth_writes_an_eight_two_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let r = mlfuse(&["synth", "--task", "quality", "--n", "800", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    let train = manifest.lines().filter(|l| l.contains("\"split\":\"train\"")).count();
    let test = manifest.lines().filter(|l| l.contains("\"split\":\"test\"")).count();
    assert_eq!((train, test), (640, 160));
    let echoed = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 7") && echoed.contains("n = 800"), "{echoed}");
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let r = mlfuse(&["synth", "--bogus"]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("Usage"));
    assert_eq!(code(&mlfuse(&["frobnicate"])), 1);
    assert_eq!(code(&mlfuse(&["--help"])), 0);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "variant = \"without_prompt_embedded\"\n");
    let data = dir.path().join("d");
    let r = mlfuse(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert_eq!(code(&r), 0);
    let r = mlfuse(&["train", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", "unused"]);
    assert_eq!(code(&r), 1, "{}", String::from_utf8_lossy(&r.stderr));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "epochz = 1\n").unwrap();
    assert_eq!(code(&mlfuse(&["synth", "--config", bad.to_str().unwrap(), "--out", "unused"])), 1);
    assert_eq!(code(&mlfuse(&["gradcheck", "--dtype", "f32"])), 1);
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let r = mlfuse(&["train", "--data", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&r), 3);
    let r = mlfuse(&["synth", "--config", missing.to_str().unwrap(), "--out", "unused"]);
    assert_eq!(code(&r), 3);
}

#[test]
fn train_is_reproducible_and_eval_reads_its_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = dir.path().join("data");
    assert_eq!(code(&mlfuse(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()])), 0);
    let mut histories = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let r = mlfuse(&["train", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
        for f in ["last.ckpt", "best.ckpt", "config.toml"] {
            assert!(out.join(f).is_file(), "{f}");
        }
        histories.push(fs::read(out.join("history.jsonl")).unwrap());
    }
    assert_eq!(histories[0], histories[1]);
    assert_eq!(String::from_utf8_lossy(&histories[0]).lines().count(), 4);
    assert_eq!(
        fs::read(dir.path().join("a/last.ckpt")).unwrap(),
        fs::read(dir.path().join("b/last.ckpt")).unwrap()
    );

    let ck = dir.path().join("a/last.ckpt");
    let r = mlfuse(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(stdout(&r).starts_with("srcc "), "{}", stdout(&r));
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learning_rate = 1e30\nweight_decay = 0.0\n");
    let data = dir.path().join("data");
    assert_eq!(code(&mlfuse(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()])), 0);
    let out = dir.path().join("run");
    let r = mlfuse(&["train", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 2, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("diverged"));
}

#[test]
fn gradcheck_mglf_passes() {
    let r = mlfuse(&["gradcheck", "--model", "mglf", "--dtype", "f64"]);
    assert_eq!(code(&r), 0, "{}", stdout(&r));
    let text = stdout(&r);
    assert!(text.contains("primitive matmul") && text.contains("glf.level0"));
    assert!(text.trim_end().ends_with("pass"));
}
