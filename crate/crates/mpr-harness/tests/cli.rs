//! CLI contract: exit codes, artifact layout, manifests and byte-level
//! reproducibility of a small pipeline.

use std::path::Path;
use std::process::Command;

fn mprlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mprlab"))
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        format!(
            r#"
seed = 41
output_dir = "{}"

[corpus]
n_episodes = 6
hesitation_prob = 0.05
pause_min = 3
pause_max = 6
camera_jitter_std = 0.004
expert_noise_std = 0.1
embodiment = "human"

[predictor]
epochs = 2
max_items_per_epoch = 60

[rl]
demo_episodes = 10
demo_noise_std = 0.1
n_demos = 4
bc_epochs = 40
episodes = 3
learning_starts = 20
pretrain_steps = 5
value_epochs = 3

[eval]
interval = 2
episodes = 3
"#,
            dir.join("out").display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "nonsense_key = 1").unwrap();
    let out = mprlab()
        .args(["--config", cfg.to_str().unwrap(), "gen-demos"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_upstream_artifact_exits_2_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    // train-rl without demos/bc artifacts.
    let out = mprlab()
        .args(["--config", cfg.to_str().unwrap(), "train-rl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("demos_robot.jsonl"), "stderr: {stderr}");

    // train-predictor without a corpus.
    let out = mprlab()
        .args(["--config", cfg.to_str().unwrap(), "train-predictor"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("corpus_human.jsonl"), "stderr: {stderr}");
}

#[test]
fn gen_demos_writes_corpus_manifest_and_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = mprlab()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "corpus.n_episodes=4",
            "gen-demos",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let corpus = dir.path().join("out/corpus_human.jsonl");
    assert!(corpus.exists());
    let lines = std::fs::read_to_string(&corpus).unwrap();
    assert_eq!(lines.lines().count(), 4);
    let manifest = dir.path().join("out/corpus_human.manifest.json");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
    assert_eq!(manifest["n_success"], 4);
    assert!(manifest["n_generated"].as_u64().unwrap() >= 4);
}

#[test]
fn small_pipeline_is_byte_reproducible() {
    // gen-demos + train-bc + train-rl twice with the same seed: metric CSVs
    // byte-identical.
    let run = |root: &Path| -> (Vec<u8>, Vec<u8>) {
        let cfg = small_config(root);
        for args in [
            vec!["gen-demos"],
            vec!["train-bc"],
            vec!["--set", "provider=sparse", "train-rl"],
        ] {
            let mut full = vec!["--config", cfg.to_str().unwrap()];
            full.extend(args);
            let out = mprlab().args(&full).output().unwrap();
            assert!(
                out.status.success(),
                "{:?}: {}",
                full,
                String::from_utf8_lossy(&out.stderr)
            );
        }
        let metrics = std::fs::read(root.join("out/run_sparse_s0/metrics.csv")).unwrap();
        let corpus = std::fs::read(root.join("out/corpus_human.jsonl")).unwrap();
        (metrics, corpus)
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (m_a, c_a) = run(dir_a.path());
    let (m_b, c_b) = run(dir_b.path());
    assert_eq!(c_a, c_b, "corpus files differ between reruns");
    assert_eq!(m_a, m_b, "metrics files differ between reruns");
    // Header row is mandatory.
    let text = String::from_utf8(m_a).unwrap();
    assert!(text.starts_with("episode,env_steps,eval_success_rate"));
}

#[test]
fn mprlab_out_env_overrides_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("rel.toml");
    std::fs::write(
        &cfg,
        "seed = 9\noutput_dir = \"relout\"\n[corpus]\nn_episodes = 2\n",
    )
    .unwrap();
    let alt = dir.path().join("altroot");
    let out = mprlab()
        .args(["--config", cfg.to_str().unwrap(), "gen-demos"])
        .env("MPRLAB_OUT", alt.to_str().unwrap())
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(alt.join("relout/corpus_human.jsonl").exists());
    assert!(!dir.path().join("relout").exists());
}
