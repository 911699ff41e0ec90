use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hgcl::synthetic::{generate, SyntheticSpec};

fn hgcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgcl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn hgcl")
}

fn write_config(dir: &Path) -> String {
    let data = generate(&SyntheticSpec::toy(0)).unwrap();
    data.write(&dir.join("data")).unwrap();
    let conf = dir.join("toy.conf");
    fs::write(
        &conf,
        "train = data/train.txt\ntest = data/test.txt\nout = run\n\
         d = 8\nlayers = 2\nlambda = 0.02\nlr = 0.003\nbatch_size = 256\n\
         pretrain_epochs = 2\nfinetune_epochs = 2\ntsne_iters = 100\n\
         tsne_exaggeration_iters = 50\ntheta = 4\n",
    )
    .unwrap();
    conf.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn stages_run_in_order_and_skip_when_current() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path());

    let early = hgcl(&["evaluate", "--config", &conf]);
    assert!(!early.status.success());
    let err = String::from_utf8_lossy(&early.stderr);
    assert!(err.contains("pretrained.emb") && err.contains("pretrain"), "{err}");

    for stage in ["pretrain", "reduce", "cluster", "finetune", "evaluate"] {
        let o = hgcl(&[stage, "--config", &conf]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains(&format!("{stage}: done")));
    }
    let report = fs::read_to_string(dir.path().join("run/eval_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);

    let again = hgcl(&["all", "--config", &conf]);
    assert!(again.status.success());
    assert_eq!(stdout(&again).matches("up to date").count(), 5);

    let forced = hgcl(&["cluster", "--config", &conf, "--force"]);
    assert!(stdout(&forced).contains("cluster: done"));
}

#[test]
fn manifest_replays_into_new_directory() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path());
    assert!(hgcl(&["all", "--config", &conf, "--seed", "5"]).status.success());
    let manifest = dir.path().join("run/manifest.json");
    let replay = dir.path().join("replay");
    let o = hgcl(&["all", "--config", manifest.to_str().unwrap(), "--out", replay.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["pretrained.emb", "clusters.csv", "finetuned.emb", "eval_report.csv"] {
        assert_eq!(
            fs::read(dir.path().join("run").join(name)).unwrap(),
            fs::read(replay.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn bad_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "rho = 0\n").unwrap();
    let o = hgcl(&["pretrain", "--config", conf.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("rho"));
}
