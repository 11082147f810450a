use std::fs;
use std::path::Path;
use std::process::Command;

use dyadmo::metrics::{evaluate, FgdSuite};
use dyadmo::tensorio::load_clip;
use dyadmo::{load_corpus, Stream};
use dyadmo_cli::*;
use serde_json::Value;

const TINY: &str = r#"{
  "seed": 11,
  "synth": {"num_clips": 8, "frames": 16, "coupling_lag": 2},
  "vqvae": {"num_codes": 16, "code_dim": 8, "width": 16},
  "vq_train": {"epochs": 3, "batch_size": 4},
  "face": {"hidden": 16, "layers": 2, "id_dim": 8},
  "face_train": {"epochs": 2, "batch_size": 4},
  "generator": {"layers": 1, "heads": 2, "width": 16, "mlp_ratio": 2},
  "gen_train": {"epochs": 2, "batch_size": 4},
  "metrics": {"tlcc_max_lag": 4},
  "fgd": {"latent_dim": 4, "hidden": 16, "epochs": 2, "batch_size": 8}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dyadmo"));
    c.env_remove("DYAD_DATA_DIR").env("RUST_LOG", "warn");
    c
}

fn tiny(dir: &Path) -> (RunConfig, std::path::PathBuf) {
    let p = dir.join("run.json");
    fs::write(&p, TINY).unwrap();
    (RunConfig::load(&p).unwrap(), p)
}

fn code(out: &std::process::Output) -> i32 {
    out.status.code().expect("exited")
}

#[test]
fn synth_writes_manifests_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = tiny(dir.path());
    let run = |out: &str| {
        bin()
            .args(["--config", cfg.to_str().unwrap(), "synth", "--seed", "3", "--out"])
            .arg(dir.path().join(out))
            .output()
            .unwrap()
    };
    let a = run("a");
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(run("b").status.code(), Some(0));
    assert_eq!(load_corpus(dir.path().join("a")).unwrap().len(), 8);
    assert_eq!(
        dir_digest(dir.path().join("a")).unwrap(),
        dir_digest(dir.path().join("b")).unwrap()
    );
    assert_eq!(run("c").status.code(), Some(0));
    let other = bin()
        .args(["--config", cfg.to_str().unwrap(), "synth", "--seed", "4", "--out"])
        .arg(dir.path().join("d"))
        .output()
        .unwrap();
    assert_eq!(code(&other), 0);
    assert_ne!(
        dir_digest(dir.path().join("a")).unwrap(),
        dir_digest(dir.path().join("d")).unwrap()
    );
}

#[test]
fn default_synth_uses_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().env("DYAD_DATA_DIR", dir.path()).arg("synth").output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        load_corpus(dir.path().join("corpus")).unwrap().len(),
        RunConfig::default().synth.num_clips
    );
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_lag = dir.path().join("lag.json");
    fs::write(&bad_lag, r#"{"synth": {"coupling_lag": 30}}"#).unwrap();
    let out = bin()
        .args(["--config", bad_lag.to_str().unwrap(), "synth"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lag"));

    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{"seeed": 1}"#).unwrap();
    assert_eq!(
        code(
            &bin()
                .args(["--config", unknown.to_str().unwrap(), "synth"])
                .output()
                .unwrap()
        ),
        2
    );

    // train without any seed
    let out = bin()
        .arg("--data-dir")
        .arg(dir.path())
        .args(["train", "face"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = bin()
        .args(["--data-dir", "/nonexistent", "train", "decoder", "--seed", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = bin()
        .args(["generate", "--seed", "1", "--mode", "sideways"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, path) = tiny(dir.path());
    cmd_synth(&cfg, None, &dir.path().join("corpus")).unwrap();
    let out = bin()
        .args(["--config", path.to_str().unwrap(), "--data-dir"])
        .arg(dir.path())
        .args(["train", "generator"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("vqvae:speaker.body"));

    let out = bin()
        .args(["--config", path.to_str().unwrap(), "--data-dir"])
        .arg(dir.path())
        .args(["train", "face", "--corpus"])
        .arg(dir.path().join("nowhere"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);

    let out = bin().arg("--data-dir").arg(dir.path()).args(["eval"]).output().unwrap();
    assert_eq!(code(&out), 3);
}

#[test]
fn exit_code_mapping() {
    let nf = dyadmo::Error::NumericFailure {
        stage: "vqvae".into(),
        epoch: 0,
        batch: 0,
        clips: String::new(),
    };
    assert_eq!(CliError::from(nf).exit_code(), 4);
    assert_eq!(CliError::from(dyadmo::Error::Config("x".into())).exit_code(), 2);
    assert_eq!(CliError::from(dyadmo::Error::InvalidInput("x".into())).exit_code(), 1);
}

fn train_all(cfg: &RunConfig, corpus: &Path, models: &Path) {
    let seed = 5;
    cmd_train(cfg, Stage::AllVqvae, seed, None, corpus, models).unwrap();
    cmd_train(cfg, Stage::Face, seed, None, corpus, models).unwrap();
    cmd_train(cfg, Stage::Generator, seed, None, corpus, models).unwrap();
    cmd_train(cfg, Stage::Fgd, seed, None, corpus, models).unwrap();
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (cfg, cfg_path) = tiny(root);
    let corpus = root.join("corpus");
    cmd_synth(&cfg, None, &corpus).unwrap();

    // training writes a log and is reproducible
    let vq = cmd_train(
        &cfg,
        Stage::Vqvae(Stream::SpeakerBody),
        9,
        None,
        &corpus,
        &root.join("m1"),
    )
    .unwrap();
    cmd_train(
        &cfg,
        Stage::Vqvae(Stream::SpeakerBody),
        9,
        None,
        &corpus,
        &root.join("m2"),
    )
    .unwrap();
    assert_eq!(
        dir_digest(root.join("m1")).unwrap(),
        dir_digest(root.join("m2")).unwrap()
    );
    let log: Value = serde_json::from_str(&fs::read_to_string(vq[0].join("train_log.json")).unwrap()).unwrap();
    let epochs = log["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 3);
    assert!(log["final_recon"].as_f64().unwrap() < log["initial_recon"].as_f64().unwrap());

    let models = root.join("models");
    train_all(&cfg, &corpus, &models);
    let gen = load_generator(&models).unwrap();
    assert_eq!(gen.model.gamma(), 4);

    // generation through the binary, twice with the same seed
    let generate = |out: &str, extra: &[&str]| {
        let o = bin()
            .args(["--config", cfg_path.to_str().unwrap(), "--data-dir"])
            .arg(root)
            .args(["generate", "--out"])
            .arg(root.join(out))
            .args(extra)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    generate("g1", &["--emit-plots"]);
    generate("g2", &["--emit-plots", "--seed", "11", "--mode", "full_chain"]);
    assert_eq!(
        dir_digest(root.join("g1")).unwrap(),
        dir_digest(root.join("g2")).unwrap()
    );
    let generated = load_corpus(root.join("g1")).unwrap();
    assert_eq!(generated.len(), 8);
    for c in &generated {
        assert_eq!(c.num_frames(), 16);
        let m = root
            .join("g1")
            .join(&c.clip_id)
            .join(dyadmo::tensorio::MANIFEST_FILE_NAME);
        assert_eq!(&load_clip(m).unwrap(), c);
        let plots = root.join("g1").join(&c.clip_id).join("plots");
        for stem in [
            "speaker_face",
            "speaker_body",
            "speaker_hand",
            "listener_face",
            "listener_body",
            "listener_hand",
        ] {
            assert!(plots.join(format!("{stem}.png")).is_file());
            assert!(plots.join(format!("{stem}.csv")).is_file());
        }
    }
    let o = bin()
        .args(["--config", cfg_path.to_str().unwrap(), "--data-dir"])
        .arg(root)
        .args(["generate", "--mode", "no_chain"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);

    // evaluation: CLI report equals the library call, self-comparison is exact
    let report = cmd_eval(&cfg, &root.join("g1"), &corpus, &models, &root.join("eval")).unwrap();
    let suite = FgdSuite::load(models.join("fgd")).unwrap();
    let reference = load_corpus(&corpus).unwrap();
    let (direct, rows) = evaluate(&generated, &reference, &suite, &cfg.metrics).unwrap();
    for ((n, a), (_, b)) in report.values().into_iter().zip(direct.values()) {
        assert!((a - b).abs() <= 1e-9, "{n}: {a} vs {b}");
    }
    let json: Value = serde_json::from_str(&fs::read_to_string(root.join("eval/report.json")).unwrap()).unwrap();
    for block in ["speaker", "listener", "dyad"] {
        assert!(json[block].is_object(), "{block}");
    }
    for key in ["fgd", "bc", "variation", "l2", "lvd"] {
        assert!(json["speaker"][key].is_number(), "speaker.{key}");
    }
    for key in ["fgd", "bc", "variation", "ccc"] {
        assert!(json["listener"][key].is_number(), "listener.{key}");
    }
    assert!(json["dyad"]["tlcc"].is_number());
    let csv = fs::read_to_string(root.join("eval/clips.csv")).unwrap();
    assert_eq!(csv.lines().count(), rows.len() + 1);

    let o = bin()
        .args(["--config", cfg_path.to_str().unwrap(), "--data-dir"])
        .arg(root)
        .args(["eval", "--pred"])
        .arg(&corpus)
        .args(["--out"])
        .arg(root.join("self"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json: Value = serde_json::from_str(&fs::read_to_string(root.join("self/report.json")).unwrap()).unwrap();
    assert!(json["speaker"]["fgd"].as_f64().unwrap().abs() < 1e-6);
    assert!((json["listener"]["ccc"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(json["dyad"]["tlcc"].as_f64().unwrap(), 0.0);

    // a missing face checkpoint stops generation with exit 3
    fs::remove_dir_all(models.join("face")).unwrap();
    let o = bin()
        .args(["--config", cfg_path.to_str().unwrap(), "--data-dir"])
        .arg(root)
        .args(["generate"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("face"));
}
