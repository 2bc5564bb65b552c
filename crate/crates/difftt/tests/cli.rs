use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
n_users = 40
n_cascades = 60
dim = 4
joint_epochs = 2
meta_epochs = 1
batch_size = 16
";

fn difftt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difftt"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = difftt(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.cfg"), SMALL).unwrap();
    let common = ["--config", "small.cfg"];
    let run = |cmd: &[&str], name: &str| {
        let mut args: Vec<&str> = cmd.to_vec();
        args.extend(common);
        args.extend(["--run-dir", name]);
        ok(&args, d);
    };
    run(&["generate", "--out", "data"], "gen");
    run(&["train-joint", "--data", "data"], "joint");
    run(&["meta-train", "--data", "data", "--checkpoint", "joint/joint.ckpt"], "meta");
    run(&["evaluate", "--data", "data", "--checkpoint", "meta/meta.ckpt", "--export-embeddings"], "eval");
    run(
        &["ttt-eval", "--data", "data", "--checkpoint", "meta/meta.ckpt", "--delta", "0,1,2"],
        "ttt",
    );
    run(
        &["report", "--with", "ttt/ttt_d0_cascades.csv", "--without", "eval/eval_cascades.csv"],
        "report",
    );

    for f in ["gen/config.resolved", "joint/joint_epochs.csv", "meta/meta_epochs.csv", "ttt/run.log"] {
        assert!(d.join(f).exists(), "missing {f}");
    }
    let resolved = fs::read_to_string(d.join("joint/config.resolved")).unwrap();
    assert!(resolved.contains("dim = 4\n") && resolved.contains("joint_epochs = 2\n"));
    let embeddings = fs::read_to_string(d.join("eval/embeddings_social.csv")).unwrap();
    assert_eq!(embeddings.lines().count(), 41);

    let read = |f: &str| fs::read(d.join(f)).unwrap();
    // No adaptation steps reproduces plain evaluation exactly.
    assert_eq!(read("ttt/ttt_d0_cascades.csv"), read("eval/eval_cascades.csv"));
    assert_eq!(read("ttt/ttt_d0_positions.csv"), read("eval/eval_positions.csv"));
    assert!(d.join("ttt/sweep.svg").exists() && d.join("ttt/delta_histogram.svg").exists());
    let summary = fs::read_to_string(d.join("report/delta_summary.txt")).unwrap();
    assert!(summary.contains("mean_delta = 0.0\n") && summary.contains("degradation_ratio = 0.0\n"));
}

#[test]
fn failures_print_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.cfg"), "dim = 4\nwidth = 3\n").unwrap();
    let out = difftt(&["generate", "--config", "bad.cfg", "--run-dir", "r"], d);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let last = err.lines().last().unwrap();
    assert!(last.starts_with("error[config]: ") && last.contains("unknown key `width`"), "{err}");

    let out = difftt(&["evaluate", "--data", "nowhere", "--checkpoint", "x.ckpt", "--run-dir", "r"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).lines().last().unwrap().starts_with("error[io]: "));

    let out = difftt(&["meta-train", "--data", "d", "--checkpoint", "c", "--meta-order", "second", "--run-dir", "r"], d);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]: "));
}

#[test]
fn meta_training_requires_a_joint_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.cfg"), SMALL).unwrap();
    let c = ["--config", "small.cfg"];
    ok(&[&["generate", "--out", "data", "--run-dir", "g"][..], &c].concat(), d);
    ok(&[&["train-joint", "--data", "data", "--run-dir", "j"][..], &c].concat(), d);
    ok(&[&["meta-train", "--data", "data", "--checkpoint", "j/joint.ckpt", "--run-dir", "m"][..], &c].concat(), d);
    let out = difftt(
        &[&["meta-train", "--data", "data", "--checkpoint", "m/meta.ckpt", "--run-dir", "m2"][..], &c].concat(),
        d,
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error[checkpoint]: ") && err.contains("tagged `meta`"), "{err}");

    let out = difftt(
        &[&["evaluate", "--data", "data", "--checkpoint", "j/joint.ckpt", "--run-dir", "e", "--set", "dim=5"][..], &c].concat(),
        d,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match the run configuration"));
}
