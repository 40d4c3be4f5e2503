use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
scenarios = ["fl"]

[[sites]]
site_id = "one"
n_train = 40
n_test = 20
prevalence_pneumonia = 0.3
prevalence_no_finding = 0.4
seed = 0
raw_size = 16

[sites.shift]
intensity_bias = 0.0
anatomy_scale = 1.0
noise_sigma = 0.05

[vit]
image_size = 8
patch_size = 4
embed_dim = 8
num_layers = 1
num_heads = 2
ffn_dim = 8

[federation]
max_rounds = 1

[eval]
redraws = 20
"#;

fn fedssl(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("experiment.toml");
    if !config.exists() {
        fs::write(&config, CONFIG).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_fedssl"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn ssl_fl_without_checkpoint_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    assert!(fedssl(dir.path(), &["generate"]).status.success());
    let out = fedssl(dir.path(), &["run", "--scenario", "ssl-fl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("ssl.ckpt"), "{}", stderr(&out));
}

#[test]
fn user_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("experiment.toml"), "unknown_key = 1\n").unwrap();
    assert_eq!(fedssl(dir.path(), &["generate"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let out = fedssl(dir.path(), &["run", "--scenario", "fl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("images.bin"));
    assert_eq!(fedssl(dir.path(), &["report"]).status.code(), Some(2));
}

#[test]
fn unknown_scenario_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedssl(dir.path(), &["run", "--scenario", "central"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_run_report_succeeds_and_seed_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["generate"][..], &["run"], &["report"]] {
        let out = fedssl(dir.path(), args);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
    }
    let out = fedssl(dir.path(), &["report"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FL"));
    assert!(dir.path().join("out/fl/global/model.ckpt").exists());

    let images = |d: &Path| fs::read(d.join("out/datasets/one/train/images.bin")).unwrap();
    let before = images(dir.path());
    assert!(fedssl(dir.path(), &["generate", "--seed", "9"]).status.success());
    assert_ne!(images(dir.path()), before);
    let echo = fs::read_to_string(dir.path().join("out/config.resolved")).unwrap();
    assert!(echo.starts_with("seed = 9\n"));
}
