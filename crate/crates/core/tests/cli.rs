use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradient-remedy"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

#[test]
fn validate_rejects_bad_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["validate", "--k", "1"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("K must exceed 1"));

    for bad in [
        vec!["validate", "--lambda", "1.5"],
        vec!["validate", "--strategy", "fixed-theta:91"],
        vec!["validate", "--theta-deg", "0"],
        vec!["validate", "--ratio-rule", "const:1.5"],
        vec!["validate", "--seeds", ""],
    ] {
        assert!(!cli(&bad, dir.path()).status.success(), "{bad:?}");
    }
    assert!(cli(&["validate", "--strategy", "fixed-theta:90deg"], dir.path()).status.success());
    assert!(cli(&["validate", "--strategy", "bogus"], dir.path()).status.code() == Some(2));
}

#[test]
fn inv_sqrt_k_halves_the_aux_norm_at_k4() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(
        &["run", "--name", "k4", "--k", "4", "--ratio-rule", "inv-sqrt-k", "--epochs", "2"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let layers = rows(&dir.path().join("k4/seed-1/layers.csv"));
    let mut rescaled = 0;
    for r in &layers {
        if r[5].is_empty() {
            continue;
        }
        rescaled += 1;
        let f = |i: usize| r[i].parse::<f64>().unwrap();
        assert!((f(5) - 0.5).abs() < 1e-12);
        // Projection never touches g_dom, so its norms give r directly.
        assert!((f(7) / f(9) - 0.5).abs() < 1e-9, "{r:?}");
    }
    assert!(rescaled > 0, "rescale never triggered");
}

#[test]
fn run_writes_the_documented_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(
        &["run", "--name", "files", "--epochs", "2", "--batches-per-epoch", "5", "--seeds", "7,8"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for seed in ["seed-7", "seed-8"] {
        let base = dir.path().join("files").join(seed);
        for file in ["steps.csv", "epochs.csv", "layers.csv", "metrics.json", "final.net"] {
            assert!(base.join(file).is_file(), "{file}");
        }
        let steps = std::fs::read_to_string(base.join("steps.csv")).unwrap();
        assert_eq!(
            steps.lines().next().unwrap(),
            "epoch,batch,layers_total,conflicting_pre,conflicting_post,wrongly_dominant,mean_phi_rad,loss_aux,loss_dom"
        );
        assert_eq!(steps.lines().count(), 1 + 2 * 5);
        let epochs = std::fs::read_to_string(base.join("epochs.csv")).unwrap();
        assert_eq!(
            epochs.lines().next().unwrap(),
            "epoch,pct_conflicting,pct_wrongly_dominant,loss_aux,loss_dom,eval_accuracy"
        );
    }
    let summary = rows(&dir.path().join("files/summary.csv"));
    assert_eq!(summary.len(), 1);
    assert_eq!(&summary[0][0], "gradient-remedy");
    assert_eq!(&summary[0][1], "2");
}

#[test]
fn sweep_summarises_each_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(
        &[
            "sweep",
            "--name",
            "sw",
            "--strategies",
            "naive,pcgrad,fixed-theta:36deg,projection-only,gradient-remedy",
            "--epochs",
            "1",
            "--batches-per-epoch",
            "5",
            "--no-layers-csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let labels: Vec<String> = rows(&dir.path().join("sw/summary.csv"))
        .iter()
        .map(|r| r[0].to_string())
        .collect();
    assert_eq!(
        labels,
        ["naive", "pcgrad", "fixed-theta:36deg", "projection-only", "gradient-remedy"]
    );
    assert!(dir.path().join("sw/pcgrad/seed-1/steps.csv").is_file());
    assert!(!dir.path().join("sw/pcgrad/seed-1/layers.csv").exists());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("spec.toml");
    std::fs::write(
        &config,
        "name = \"fromfile\"\nseeds = [3]\n[train]\nepochs = 3\nbatches_per_epoch = 4\n",
    )
    .unwrap();
    let o = cli(
        &["run", "--config", config.to_str().unwrap(), "--epochs", "1"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let steps = rows(&dir.path().join("fromfile/seed-3/steps.csv"));
    assert_eq!(steps.len(), 4);
}

#[test]
fn diverging_run_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(
        &["run", "--name", "boom", "--optimizer", "sgd", "--lr", "1000"],
        dir.path(),
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("non-finite"));
    assert!(!dir.path().join("boom").exists());
}
