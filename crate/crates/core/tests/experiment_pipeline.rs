use std::fs;
use std::path::Path;

use fedssl::error::Error;
use fedssl::experiment::{
    cmd_generate, cmd_pretrain, cmd_report, cmd_run, parse_csv, read_scores, write_scores, ExperimentConfig, Layout,
    REPORT_HEADER,
};
use fedssl::federation::Scenario;
use fedssl::vit::checkpoint;

fn tiny_config(out: &Path, seed: u64) -> ExperimentConfig {
    let text = format!(
        r#"
seed = {seed}
out = "{}"
scenarios = ["local", "fl"]

[[sites]]
site_id = "small"
n_train = 60
n_test = 30
prevalence_pneumonia = 0.3
prevalence_no_finding = 0.4
seed = 0
raw_size = 24
shift = {{ intensity_bias = 0.1, anatomy_scale = 0.9, noise_sigma = 0.05 }}

[[sites]]
site_id = "large"
n_train = 80
n_test = 30
prevalence_pneumonia = 0.3
prevalence_no_finding = 0.4
seed = 1
raw_size = 24
shift = {{ intensity_bias = 0.0, anatomy_scale = 1.0, noise_sigma = 0.05 }}

[vit]
image_size = 16
patch_size = 8
embed_dim = 8
num_layers = 1
num_heads = 2
ffn_dim = 16

[train]
batch_size = 16

[ssl]
iterations = 3
batch_size = 4
prototype_dim = 8
head_hidden = 8

[federation]
max_rounds = 2

[eval]
redraws = 50
"#,
        out.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn default_config_round_trips_through_toml() {
    let cfg = ExperimentConfig::default();
    assert_eq!(cfg.sites.resolve().unwrap().len(), 5);
    let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    let resolved = cfg.resolved().unwrap();
    assert_eq!(ExperimentConfig::from_toml(&resolved.to_toml().unwrap()).unwrap(), resolved);
}

#[test]
fn config_rejects_unknown_fields_and_bad_sites() {
    assert!(matches!(ExperimentConfig::from_toml("sead = 3"), Err(Error::Config(_))));
    assert!(matches!(ExperimentConfig::from_toml("sites = \"mine\""), Err(Error::Config(_))));
    assert!(matches!(
        ExperimentConfig::from_toml("[eval]\nredraws = 0"),
        Err(Error::Config(_))
    ));
}

#[test]
fn generate_is_seeded() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let ids = cmd_generate(&tiny_config(a.path(), 5)).unwrap();
    assert_eq!(ids, ["small", "large"]);
    cmd_generate(&tiny_config(b.path(), 5)).unwrap();
    cmd_generate(&tiny_config(c.path(), 6)).unwrap();
    for id in &ids {
        for split in ["train", "test"] {
            for file in ["images.bin", "labels.csv", "meta.json"] {
                let rel = format!("datasets/{id}/{split}/{file}");
                assert_eq!(bytes(a.path().join(&rel)), bytes(b.path().join(&rel)), "{rel}");
            }
            let img = format!("datasets/{id}/{split}/images.bin");
            assert_ne!(bytes(a.path().join(&img)), bytes(c.path().join(&img)));
        }
    }
    let echoed = ExperimentConfig::load(&a.path().join("config.resolved")).unwrap();
    assert_eq!(echoed, tiny_config(a.path(), 5).resolved().unwrap());
}

#[test]
fn default_benchmark_generates_five_sites() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        out: dir.path().into(),
        ..ExperimentConfig::default()
    };
    cfg.vit.image_size = 8;
    cfg.vit.patch_size = 4;
    let ids = cmd_generate(&cfg).unwrap();
    assert_eq!(ids.len(), 5);
    for id in ids {
        assert!(dir.path().join("datasets").join(id).join("train/images.bin").exists());
    }
}

#[test]
fn pretrain_logs_one_line_per_iteration_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = tiny_config(d.path(), 1);
        cmd_generate(&cfg).unwrap();
        let records = cmd_pretrain(&cfg).unwrap();
        assert_eq!(records.len(), 3);
    }
    let log = fs::read_to_string(a.path().join("pretrain.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().next().unwrap().contains("\"L_image\""));
    assert_eq!(bytes(a.path().join("ssl.ckpt")), bytes(b.path().join("ssl.ckpt")));

    let mut cfg = tiny_config(a.path(), 1);
    cfg.ssl.iterations = 0;
    assert!(cmd_pretrain(&cfg).unwrap().is_empty());
    assert_eq!(fs::read_to_string(a.path().join("pretrain.jsonl")).unwrap(), "");
    assert!(checkpoint::load(&a.path().join("ssl.ckpt")).is_ok());
}

#[test]
fn pretrain_without_datasets_names_the_missing_archive() {
    let dir = tempfile::tempdir().unwrap();
    match cmd_pretrain(&tiny_config(dir.path(), 0)) {
        Err(e @ Error::Missing { .. }) => {
            assert!(e.is_user_error());
            assert!(e.to_string().contains("images.bin"));
        }
        other => panic!("expected a missing-file error, got {other:?}"),
    }
}

#[test]
fn ssl_fl_without_checkpoint_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 0);
    cmd_generate(&cfg).unwrap();
    let err = cmd_run(&cfg, Scenario::SslFl, |_, _| {}).unwrap_err();
    assert!(err.is_user_error());
    assert!(err.to_string().contains("ssl.ckpt"), "{err}");
}

#[test]
fn scores_round_trip_exactly() {
    let set = fedssl::eval::ScoredSet::new("pneumonia", vec![0.1 + 0.2, 1.0 / 3.0, 0.25], vec![true, false, true]).unwrap();
    let other = fedssl::eval::ScoredSet::new("no_finding", vec![0.7, 1e-9, 0.5], vec![false, true, true]).unwrap();
    let text = write_scores(&[set.clone(), other.clone()]);
    assert_eq!(read_scores(text.as_bytes(), "x").unwrap(), vec![set, other]);
}

#[test]
fn full_pipeline_is_reproducible_and_reports_pair_with_local() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = tiny_config(d.path(), 3);
        cmd_generate(&cfg).unwrap();
        cmd_pretrain(&cfg).unwrap();
        let local = cmd_run(&cfg, Scenario::Local, |_, _| {}).unwrap();
        assert!(local.rows.iter().all(|r| r.p_vs_local.is_none()));
        let mut seen = 0;
        let fl = cmd_run(&cfg, Scenario::Fl, |model, _| {
            assert_eq!(model, "global");
            seen += 1;
        })
        .unwrap();
        assert!(seen >= 1);
        assert!(fl.rows.iter().all(|r| r.p_vs_local.is_some()));
        cmd_run(&cfg, Scenario::SslFl, |_, _| {}).unwrap();
        cmd_report(d.path()).unwrap();
    }

    let layout = Layout::new(a.path());
    let mut files = vec![
        layout.report_csv(),
        layout.report_txt(),
        layout.pretrain_log(),
        layout.ssl_checkpoint(),
    ];
    for sc in Scenario::ALL {
        files.push(layout.results(sc));
        files.push(layout.rounds(sc));
        for site in ["small", "large"] {
            files.push(layout.scores(sc, site));
            files.push(layout.roc(sc, site, "pneumonia"));
        }
    }
    files.push(layout.model(Scenario::Local, "small"));
    files.push(layout.model(Scenario::Fl, "global"));
    for f in &files {
        let rel = f.strip_prefix(a.path()).unwrap();
        assert!(bytes(f) == bytes(b.path().join(rel)), "{} differs", rel.display());
    }

    // the echo differs only in `out`
    let echo_b = ExperimentConfig::load(&b.path().join("config.resolved")).unwrap();
    let echo_a = ExperimentConfig::load(&layout.config_echo()).unwrap();
    assert_eq!(ExperimentConfig { out: a.path().into(), ..echo_b }, echo_a);

    let report = fs::read_to_string(layout.report_csv()).unwrap();
    assert_eq!(report.lines().next().unwrap(), REPORT_HEADER);
    let rows = parse_csv(&report).unwrap();
    // 3 scenarios x 2 sites x (2 labels + average)
    assert_eq!(rows.len(), 18);
    for r in &rows {
        assert_eq!(r.p_vs_local.is_some(), r.scenario != Scenario::Local, "{r:?}");
        assert!(r.ci_lo <= r.auroc && r.auroc <= r.ci_hi + 1e-12);
    }
    let text = fs::read_to_string(layout.report_txt()).unwrap();
    for title in ["Local", "FL", "SSL+FL", "Average AUROC (%)", "Pneumonia AUROC (%)"] {
        assert!(text.contains(title), "{text}");
    }

    let before = bytes(layout.report_csv());
    cmd_report(a.path()).unwrap();
    assert_eq!(bytes(layout.report_csv()), before);
}

#[test]
fn report_with_one_scenario_has_one_method_row_per_site() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    cmd_generate(&cfg).unwrap();
    assert!(matches!(cmd_report(dir.path()), Err(Error::Missing { .. })));
    cmd_run(&cfg, Scenario::Fl, |_, _| {}).unwrap();
    let text = cmd_report(dir.path()).unwrap();
    // header, rule, one row per site
    assert_eq!(text.lines().count(), 4, "{text}");
    let rows = parse_csv(&fs::read_to_string(dir.path().join("report.csv")).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.p_vs_local.is_none()));
}
