use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use agm_core::io::Columnar;
use agm_core::model::read_checkpoint;

const SMALL: &[&str] = &[
    "--set",
    "train.hidden=8,8",
    "--set",
    "train.batch=16",
    "--set",
    "train.warmup=1",
    "--set",
    "train.n_freq=2",
    "--set",
    "sampler.samples=64",
];

fn agm(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("AGM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = agm(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn table(p: &Path) -> Columnar {
    Columnar::read_from(fs::read_to_string(p).unwrap().as_bytes()).unwrap()
}

fn trained(dir: &Path, iterations: &str) {
    let it = format!("train.iterations={iterations}");
    ok(dir, &with_small(&["train", "--set", &it]));
}

#[test]
fn inspect_dumps_a_monotone_kernel_and_terminal_spread() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["inspect", "--k=-0.5,0,0.5", "--plot"]);
    let k = table(&dir.path().join("kernel.tsv"));
    let t = k.column("t").unwrap();
    assert!(t.windows(2).all(|w| w[1] > w[0]));
    assert!(k.meta_value("config_hash").is_some() && k.meta_value("seed") == Some("0"));
    let sweep = table(&dir.path().join("terminal_std.tsv"));
    for row in &sweep.rows {
        assert!((row[1] - (2.0 + 2.0 * row[0]).sqrt()).abs() < 1e-12);
    }
    assert!(fs::read_to_string(dir.path().join("kernel.svg")).unwrap().contains("config_hash="));
    let data = table(&dir.path().join("data.tsv"));
    assert_eq!(data.rows.len(), 10_000);
    assert!(data.meta_value("sigma_data").is_some());
}

#[test]
fn invalid_k_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(agm(dir.path(), &["inspect", "--k", "1.0"]).status.code(), Some(2));
    assert_eq!(agm(dir.path(), &["inspect", "--set", "prior.k=1.5"]).status.code(), Some(2));
    assert_eq!(agm(dir.path(), &["inspect", "--set", "no.such=1"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(agm(dir.path(), &["sample"]).status.code(), Some(4));
}

#[test]
fn empty_training_then_resume_continues_the_step_count() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), "0");
    let ckpt = dir.path().join("checkpoint.txt");
    let st = read_checkpoint::<f32, _>(fs::read(&ckpt).unwrap().as_slice()).unwrap();
    assert_eq!(st.state.step, 0);
    assert!(st.meta.iter().any(|(k, _)| k == "config_hash"));

    ok(dir.path(), &with_small(&["train", "--set", "train.iterations=3", "--resume"]));
    let st = read_checkpoint::<f32, _>(fs::read(&ckpt).unwrap().as_slice()).unwrap();
    assert_eq!(st.state.step, 3);
    let loss = table(&dir.path().join("loss.tsv"));
    assert_eq!(loss.column("step").unwrap(), vec![1.0, 2.0, 3.0]);
    let snapshot = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert!(snapshot.contains("# config_hash=") && snapshot.contains("iterations = 3"));
}

#[test]
fn sampling_is_reproducible_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), "2");
    ok(dir.path(), &with_small(&["sample", "--nfe", "5", "--set", "sampler.record=3", "--plot"]));
    let first = fs::read(dir.path().join("samples.tsv")).unwrap();
    let c = table(&dir.path().join("samples.tsv"));
    assert_eq!(c.rows.len(), 64);
    assert_eq!(c.meta_value("nfe"), Some("5"));
    let traj = table(&dir.path().join("trajectories.tsv"));
    assert_eq!(traj.column("chain").unwrap().iter().filter(|&&c| c == 0.0).count(), 5, "one row per evaluation");
    let report = fs::read_to_string(dir.path().join("sample_report.txt")).unwrap();
    assert!(report.contains("nfe: 5") && report.contains("wall_time_s:"));

    ok(dir.path(), &with_small(&["sample", "--nfe", "5", "--set", "sampler.record=3"]));
    assert_eq!(fs::read(dir.path().join("samples.tsv")).unwrap(), first);

    ok(dir.path(), &with_small(&["sample", "--nfe", "1"]));
    let c = table(&dir.path().join("samples.tsv"));
    assert_eq!((c.rows.len(), c.meta_value("nfe")), (64, Some("1")));
}

#[test]
fn conditional_sampling_with_full_velocity_seeding() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), "1");
    let args = with_small(&["sample", "--set", "conditional.xi=1", "--set", "conditional.target=4,0", "--set", "conditional.c=0"]);
    ok(dir.path(), &args);
    assert_eq!(table(&dir.path().join("samples.tsv")).rows.len(), 64);
}

#[test]
fn mode_mismatch_between_checkpoint_and_sampler_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), "1");
    let o = agm(dir.path(), &with_small(&["sample", "--set", "sampler.mode=sde"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_self_comparison_dimensions_and_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p, "1");
    ok(p, &with_small(&["sample", "--nfe", "3"]));
    let samples = p.join("samples.tsv");
    let s = samples.to_str().unwrap();

    ok(p, &["eval", "--samples", s, "--reference", s, "--label", "self"]);
    let report = fs::read_to_string(p.join("eval_report.txt")).unwrap();
    assert!(report.contains("energy_distance: 0.000000e0"), "{report}");

    ok(p, &["eval", "--plot"]);
    let ledger = fs::read_to_string(p.join("ledger.tsv")).unwrap();
    ok(p, &["eval"]);
    assert_eq!(fs::read_to_string(p.join("ledger.tsv")).unwrap(), ledger);
    assert_eq!(ledger.lines().count(), 3);

    let one_d = p.join("line.tsv");
    fs::write(&one_d, "x_0\n0.5\n1.5\n").unwrap();
    assert_eq!(agm(p, &["eval", "--samples", one_d.to_str().unwrap()]).status.code(), Some(2));
}
