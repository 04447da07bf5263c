use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn meme(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meme"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let text = format!(
        r#"sequence_length = 4
frame_size = 32
train_per_modality = 2
test_per_modality = 1
patch = 8
embed_dim = 16
depth = 2
mlp_hidden = 24
template_size = 16
rank = 4
batch_size = 4
epochs = 2
lr_drop_epoch = 1
pretrain_sequences = 4
pretrain_sequence_length = 4
pretrain_heldout = 2
pretrain_steps = 3
pretrain_batch_size = 4
pretrain_min_iou = 0.0
data_dir = "{d}/data"
backbone_checkpoint = "{d}/pre/backbone.json"
checkpoint = "{d}/train/meme.json"
"#,
        d = dir.display()
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_has_no_modality_flag() {
    let dir = TempDir::new().unwrap();
    for sub in ["eval", "route-report", "train"] {
        let o = meme(&[sub, "--help"], dir.path());
        assert!(o.status.success());
        assert!(!stdout(&o).to_lowercase().contains("--modality"), "{sub}");
    }
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "top_k = 9\nexperts_per_modality = 2\n").unwrap();
    let o = meme(&["gen-data", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));

    fs::write(&bad, "no_such_key = 1\n").unwrap();
    let o = meme(&["gen-data", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let o = meme(&["gen-data", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_not_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let o = meme(&["eval", "--config", &cfg, "--checkpoint", "nope.json"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn gradcheck_passes() {
    let dir = TempDir::new().unwrap();
    let o = meme(&["gradcheck", "--out", "g"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let table = fs::read_to_string(dir.path().join("g/gradcheck.txt")).unwrap();
    assert!(table.contains("pass"));
    assert!(!table.contains("FAIL"));
}

#[test]
fn tiny_pipeline() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);

    let o = meme(&["gen-data", "--config", &cfg, "--out", "data"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = fs::read_to_string(d.join("data/resolved_config.toml")).unwrap();
    assert!(resolved.contains("lambda"));
    assert!(stdout(&o).contains("config hash: "));

    let o = meme(&["pretrain", "--config", &cfg, "--out", "pre"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("pre/backbone.json").exists());

    let o = meme(&["train", "--config", &cfg, "--out", "train"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("train/meme.json").exists());
    assert!(d.join("train/train_log.csv").exists());

    let o = meme(&["eval", "--config", &cfg, "--out", "ev"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.txt", "metrics.json", "success.svg", "precision.svg"] {
        assert!(d.join("ev").join(f).exists(), "{f}");
    }

    // Zeroed prompts reproduce the RGB-only tracker exactly.
    let z = meme(&["eval", "--config", &cfg, "--out", "zero", "--zero-prompts"], d);
    let r = meme(&["eval", "--config", &cfg, "--out", "rgb", "--rgb-only"], d);
    assert!(z.status.success() && r.status.success());
    assert_eq!(
        fs::read_to_string(d.join("zero/metrics.json")).unwrap(),
        fs::read_to_string(d.join("rgb/metrics.json")).unwrap()
    );

    let o = meme(&["route-report", "--config", &cfg, "--out", "routes"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("routes/route_confusion.svg").exists());
    assert!(stdout(&o).contains("minimum specialization"));
}
