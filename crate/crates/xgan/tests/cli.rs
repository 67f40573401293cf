//! End-to-end command-line behavior: exit codes, file outputs, manifests,
//! determinism of repeated invocations, and checkpoint resume equivalence.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn xgan() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xgan"))
}

fn run(args: &[&str]) -> Output {
    xgan().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A deliberately tiny run configuration: 16x16 sprites, a slim model, a
/// handful of steps.
fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let out_dir = dir.join("run");
    let text = format!(
        r#"
output_dir = "{out}"
test_fraction = 0.2

[model]
image_size = 16
channels = 3
embed_dim = 16
encoder_widths = [6, 12]
decoder_widths = [12, 6]
discriminator_widths = [6, 6]
dann_hidden = [8]
shared_encoder_blocks = 2
shared_decoder_blocks = 1
second_discriminator = false
instance_norm = false

[train]
learning_rate = 0.0001
adam_beta1 = 0.5
adam_beta2 = 0.999
adam_epsilon = 1e-8
batch_size = 4
total_steps = 6
seed = 11
checkpoint_every = 0
metrics_every = 2
mode = "full_xgan"

[train.weights]
w_dann = 0.3
w_sem = 1.0
w_gan = 0.25
w_teach = 0.5
gan_2to1_enabled = false
teach_enabled = false
tv_weight = 0.0

[train.loss_cfg]
sem_distance = "l2"
teach_distance = "l2"
dann_loss_fn = "binary_cross_entropy"
gan_generator_form = "non_saturating"

[data.synthetic.d1]
n_samples = 30
style = "a"
seed = 7
image_size = 16

[data.synthetic.d2]
n_samples = 30
style = "b"
seed = 8
image_size = 16

[supervised]
epochs = 2
learning_rate = 0.002
batch_size = 8
seed = 3
holdout_fraction = 0.2
{extra}
"#,
        out = out_dir.display(),
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_file_exits_2() {
    let out = run(&["train", "--config", "/nonexistent/config.toml"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn missing_schema_file_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(
        dir.path(),
        "[data.synthetic]\nschema_path = \"/no/such/schema.toml\"",
    );
    let out = run(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("/no/such/schema.toml"), "{}", stderr(&out));
}

#[test]
fn gen_data_writes_split_manifests_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = run(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let d1 = dir.path().join("run/data/d1");
    let train: Vec<String> = std::fs::read_to_string(d1.join("train.txt"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let test: Vec<String> = std::fs::read_to_string(d1.join("test.txt"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    // 30 samples split 80/20: 24 train, 6 test
    assert_eq!((train.len(), test.len()), (24, 6));
    assert!(d1.join("img_00000.png").is_file());
    assert!(d1.join("metadata.jsonl").is_file());

    // re-running with the same seed reproduces the files byte for byte
    let img_before = std::fs::read(d1.join("img_00003.png")).unwrap();
    let meta_before = std::fs::read(d1.join("metadata.jsonl")).unwrap();
    let out = run(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(d1.join("img_00003.png")).unwrap(), img_before);
    assert_eq!(std::fs::read(d1.join("metadata.jsonl")).unwrap(), meta_before);
}

#[test]
fn train_zero_steps_writes_initial_checkpoint_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--steps", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("run/checkpoint_final.bin").is_file());
    assert!(dir.path().join("run/config.toml").is_file());
    assert!(dir.path().join("run/metrics.jsonl").is_file());
}

#[test]
fn unknown_mode_exits_2_listing_valid_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--mode", "bogus"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("full_xgan"), "{}", stderr(&out));

    let out = run(&["ablate", "--config", cfg.to_str().unwrap(), "--modes", "nope"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("high_dann"), "{}", stderr(&out));
}

#[test]
fn unknown_override_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--train.bogus_field", "1"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn dotted_override_changes_behavior() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "0",
        "--output_dir",
        dir.path().join("other").to_str().unwrap(),
    ]);
    // --output_dir has no dot: clap rejects it as unknown
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "0",
        "--train.seed",
        "33",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echoed = std::fs::read_to_string(dir.path().join("run/config.toml")).unwrap();
    assert!(echoed.contains("seed = 33"), "{echoed}");
}

#[test]
fn translate_unknown_direction_exits_2_and_outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    // produce a checkpoint and input images
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--steps", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let ckpt = dir.path().join("run/checkpoint_final.bin");
    let input_dir = dir.path().join("run/data/d1");
    let bad = run(&[
        "translate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input-dir",
        input_dir.to_str().unwrap(),
        "--direction",
        "sideways",
        "--out",
        dir.path().join("t").to_str().unwrap(),
    ]);
    assert_eq!(code(&bad), 2, "{}", stderr(&bad));

    let out_a = dir.path().join("ta");
    let out_b = dir.path().join("tb");
    for out_dir in [&out_a, &out_b] {
        let ok = run(&[
            "translate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--input-dir",
            input_dir.to_str().unwrap(),
            "--direction",
            "1to2",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    }
    // n inputs -> n outputs plus one grid, byte-identical across runs
    let count = std::fs::read_dir(&out_a)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("translated_")
        })
        .count();
    assert_eq!(count, 30);
    assert_eq!(
        std::fs::read(out_a.join("grid.png")).unwrap(),
        std::fs::read(out_b.join("grid.png")).unwrap()
    );
    assert_eq!(
        std::fs::read(out_a.join("translated_00004.png")).unwrap(),
        std::fs::read(out_b.join("translated_00004.png")).unwrap()
    );
}

#[test]
fn eval_requires_probe_file_and_appends_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--steps", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = dir.path().join("run/checkpoint_final.bin");

    let missing = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--probes",
        dir.path().join("no_probe.bin").to_str().unwrap(),
    ]);
    assert_eq!(code(&missing), 2, "{}", stderr(&missing));

    // train real probes (2 epochs: far below the validity gate, so eval
    // must refuse with a configuration error rather than report numbers)
    let out = run(&["train-probes", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let probe = dir.path().join("run/probe_b.bin");
    let refused = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--probes",
        probe.to_str().unwrap(),
    ]);
    assert_eq!(code(&refused), 2, "{}", stderr(&refused));
    assert!(stderr(&refused).contains("validity gate"), "{}", stderr(&refused));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");

    // uninterrupted run to 6 steps
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let full = std::fs::read(dir.path().join("run/checkpoint_final.bin")).unwrap();
    let full_metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();

    // interrupted at 3, resumed to 6
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--steps", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let half_ckpt = dir.path().join("half.bin");
    std::fs::rename(dir.path().join("run/checkpoint_final.bin"), &half_ckpt).unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--resume",
        half_ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resumed = std::fs::read(dir.path().join("run/checkpoint_final.bin")).unwrap();
    assert_eq!(full, resumed, "resumed checkpoint differs from the uninterrupted one");

    // metric stream (loss fields) also matches: compare all-but-wall-time
    let strip = |text: &str| -> Vec<serde_json::Value> {
        text.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_s");
                v
            })
            .collect()
    };
    let resumed_metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let full_stripped = strip(&full_metrics);
    let resumed_stripped = strip(&resumed_metrics);
    // the resumed file holds records from step 4 onward; they must equal the
    // tail of the uninterrupted stream
    assert_eq!(resumed_stripped, full_stripped[full_stripped.len() - resumed_stripped.len()..]);
}

#[test]
fn checkpoint_config_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--steps", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = dir.path().join("run/checkpoint_final.bin");

    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
        "--model.embed_dim",
        "32",
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("disagrees"), "{}", stderr(&out));
}

#[test]
fn default_config_prints_parseable_toml() {
    let out = run(&["default-config", "--benchmark"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("[model]"));
    assert!(text.contains("image_size = 32"));
}
