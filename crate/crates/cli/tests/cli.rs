use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lsfd");

fn lsfd(args: &[&str], out_dir: &Path, threads: usize) -> Output {
    Command::new(BIN)
        .args(args)
        .env("LSFD_OUTPUT_DIR", out_dir)
        .env("RAYON_NUM_THREADS", threads.to_string())
        .output()
        .unwrap()
}

const SPEC: &str = r#"{
  "name": "tiny",
  "network": {"antennas": 16, "users_per_cell": 2, "seed": 11},
  "estimator": "MMSE",
  "combiner": "MRC",
  "modes": ["i", "ii", "iii", "iv", "v", "vi"],
  "sweep": {"parameter": "corr_magnitude", "values": [0.0, 0.5]},
  "n_drops": 2,
  "convergence": {"max_iter": 40}
}"#;

fn write_spec(dir: &Path, text: &str) -> String {
    let path = dir.join("spec.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn rerun_gives_identical_bytes_for_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), SPEC);
    let mut outputs = Vec::new();
    for (i, threads) in [1, 1, 3].into_iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let res = lsfd(&["run", &spec], &out, threads);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        outputs.push((fs::read(out.join("tiny.csv")).unwrap(), fs::read(out.join("tiny.json")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    let csv = String::from_utf8(outputs[0].0.clone()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "sweep_value,mode,estimator,combiner,drop,cell,sum_se,iterations,wall_time_s"
    );
    assert_eq!(lines.count(), 2 * 2 * 6 * 4);
}

#[test]
fn single_drop_rerun_reproduces_rows() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), SPEC);
    let all = dir.path().join("all");
    assert!(lsfd(&["run", &spec], &all, 2).status.success());
    let one_spec = write_spec(dir.path(), &SPEC.replace("\"n_drops\": 2", "\"n_drops\": 2, \"drops\": [1]"));
    let one = dir.path().join("one");
    assert!(lsfd(&["run", &one_spec], &one, 2).status.success());
    let all_csv = fs::read_to_string(all.join("tiny.csv")).unwrap();
    let one_csv = fs::read_to_string(one.join("tiny.csv")).unwrap();
    let drop1: Vec<&str> = all_csv.lines().skip(1).filter(|l| l.split(',').nth(4) == Some("1")).collect();
    assert_eq!(one_csv.lines().skip(1).collect::<Vec<_>>(), drop1);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lsfd(&["verify", "medium"], dir.path(), 1).status.code(), Some(1));
    assert_eq!(lsfd(&["preset", "fig11"], dir.path(), 1).status.code(), Some(1));
    assert_eq!(lsfd(&["bogus"], dir.path(), 1).status.code(), Some(1));
    let spec = write_spec(dir.path(), &SPEC.replace("\"n_drops\"", "\"n_dropz\""));
    assert_eq!(lsfd(&["run", &spec], dir.path(), 1).status.code(), Some(1));
    let spec = write_spec(dir.path(), &SPEC.replace("\"MRC\"", "\"RZF\""));
    assert_eq!(lsfd(&["run", &spec], dir.path(), 1).status.code(), Some(1));
    assert_eq!(lsfd(&["run", "/nonexistent/spec.json"], dir.path(), 1).status.code(), Some(1));
    assert_eq!(lsfd(&["--help"], dir.path(), 1).status.code(), Some(0));
}

#[test]
fn unwritable_output_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let spec = write_spec(dir.path(), &SPEC.replace("\"n_drops\": 2", "\"n_drops\": 1"));
    assert_eq!(lsfd(&["run", &spec], &blocker.join("sub"), 1).status.code(), Some(2));
}

#[test]
fn flops_prints_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = lsfd(&["flops", "--L", "4", "--K", "5", "--N", "1"], dir.path(), 1);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "22882");
    let out = lsfd(&["flops", "--L", "4", "--K", "5", "--N", "100"], dir.path(), 1);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "2288200");
}

#[test]
fn verify_quick_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = lsfd(&["verify", "quick"], dir.path(), 2);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("criterion")).count(), 10, "{text}");
    assert!(out.status.success(), "{text}");
}
