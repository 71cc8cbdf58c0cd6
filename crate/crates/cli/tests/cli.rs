use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
layers = 2
channels = 8
heads = 2
lane_queries = 12
traffic_queries = 4
m = 2
groups = 2
ffn_hidden = 16
topo_hidden = 8
traffic_layers = 1
bev_h = 10
bev_w = 5
lanes_max = 4
k = 2
steps = 4
batch = 2
pool = 3
eval_scenes = 2
lr = 1e-3
";

fn lanetopo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanetopo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.conf");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.display().to_string()
}

#[test]
fn ols_reproduces_a_table_row() {
    let o = lanetopo(&[
        "ols", "--det-l", "31.8", "--det-t", "49.4", "--top-ll", "32.2", "--top-lt", "33.9",
    ]);
    assert!(o.status.success());
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!((v - 49.0).abs() < 0.05, "{v}");

    let o = lanetopo(&[
        "ols",
        "--fraction",
        "--det-l",
        "1",
        "--det-t",
        "1",
        "--top-ll",
        "1",
        "--top-lt",
        "1",
    ]);
    assert_eq!(stdout(&o).trim(), "1");
}

#[test]
fn out_of_range_and_bad_flags_are_usage_errors() {
    let o = lanetopo(&[
        "ols", "--det-l", "131", "--det-t", "1", "--top-ll", "1", "--top-lt", "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(lanetopo(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        lanetopo(&["ablate", "--axis", "depth", "--seeds", "0", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn unknown_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learning_rate = 3\n");
    let o = lanetopo(&[
        "train",
        "--config",
        &cfg,
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn scenegen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let scenes = dir.path().join("scenes");
    let o = lanetopo(&[
        "scenegen",
        "--config",
        &cfg,
        "--count",
        "3",
        "--seed",
        "5",
        "--out",
        scenes.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(std::fs::read_dir(&scenes).unwrap().count(), 3);

    let run = dir.path().join("run");
    let o = lanetopo(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    for f in ["checkpoint.bin", "losses.csv", "record.json", "config.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(run.join("losses.csv")).unwrap();
    assert!(csv.starts_with("step,total,det,topo,topo_o2m,valid_ll_o2m\n"));
    assert_eq!(csv.lines().count(), 5);

    let ckpt = run.join("checkpoint.bin");
    let report = dir.path().join("report.json");
    let args = [
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--scenes",
        scenes.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ];
    assert!(lanetopo(&args).status.success());
    let first = std::fs::read_to_string(&report).unwrap();
    assert!(first.contains("\"top_ll\""));
    assert!(lanetopo(&args).status.success());
    assert_eq!(first, std::fs::read_to_string(&report).unwrap());

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = lanetopo(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--scenes",
        empty.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mode = standard\n");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("lr = 1e-3", "lr = 1e30")
        .replace("steps = 4", "steps = 20");
    std::fs::write(&cfg, text).unwrap();
    let o = lanetopo(&[
        "train",
        "--config",
        &cfg,
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn gradcheck_passes() {
    let o = lanetopo(&["gradcheck", "--trials", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("all passed"));
}

#[test]
fn ablation_writes_tables_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("abl");
    let args = [
        "ablate",
        "--config",
        &cfg,
        "--axis",
        "m",
        "--seeds",
        "0,1",
        "--out",
        out.to_str().unwrap(),
        "--svg",
    ];
    let o = lanetopo(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("m.csv")).unwrap();
    assert!(csv.starts_with("m,seed,top_ll,top_lt,det_l,det_t,ols\n"));
    assert_eq!(csv.lines().count(), 1 + 4 * 2);
    assert!(out.join("m.svg").exists());
    assert_eq!(std::fs::read_dir(out.join("runs")).unwrap().count(), 8);

    let stamps = || -> Vec<_> {
        let mut v: Vec<_> = std::fs::read_dir(out.join("runs"))
            .unwrap()
            .map(|e| {
                std::fs::metadata(e.unwrap().path().join("record.json"))
                    .unwrap()
                    .modified()
                    .unwrap()
            })
            .collect();
        v.sort();
        v
    };
    let before = stamps();
    assert!(lanetopo(&args).status.success());
    assert_eq!(before, stamps(), "finished runs were retrained");
    assert_eq!(csv, std::fs::read_to_string(out.join("m.csv")).unwrap());

    // the same directory spelled relatively is still the same set of runs
    let mut rel = args;
    rel[8] = "abl";
    let o = Command::new(env!("CARGO_BIN_EXE_lanetopo"))
        .args(rel)
        .current_dir(dir.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(before, stamps(), "relative output path retrained runs");
}
