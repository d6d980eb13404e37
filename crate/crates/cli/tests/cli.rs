use std::path::Path;
use std::process::{Command, Output};

fn btm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btmtrack"))
        .current_dir(dir)
        .env("BTM_LOG", "off")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const TINY: &str = "patch_size = 4\ndim = 8\nheads = 2\ndepth = 2\nmlp_ratio = 2\nprune_layers = 1\ntdtb_layers = 1\n\
template_size = 8\nsearch_size = 16\ngen_train_sequences = 3\ngen_test_sequences = 2\ngen_frames = 5\n\
gen_frame_size = 48\nepochs = 1\nsamples_per_epoch = 4\nbatch_size = 2\nbench_frames = 1\n\
data_dir = data\nout_dir = out\n";

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

#[test]
fn full_cycle_through_the_binary() {
    let dir = tiny_dir();
    let d = dir.path();
    for cmd in ["gen", "train", "track", "eval", "bench-prune"] {
        let o = btm(d, &["--config", "tiny.cfg", cmd]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    for f in ["model.btmt", "loss.csv", "metrics.csv", "metrics.txt", "bench.csv", "bench.txt"] {
        assert!(d.join("out").join(f).is_file(), "{f}");
    }
    assert_eq!(std::fs::read_dir(d.join("out/results")).unwrap().count(), 2);
}

#[test]
fn echo_is_stable_and_reflects_overrides() {
    let dir = tiny_dir();
    let d = dir.path();
    // eval without results fails after the echo, which is what we want here
    let a = btm(d, &["--config", "tiny.cfg", "--seed", "9", "--out", "elsewhere", "eval"]);
    let b = btm(d, &["--config", "tiny.cfg", "--seed", "9", "--out", "elsewhere", "eval"]);
    assert_eq!(stdout(&a), stdout(&b));
    let echo = stdout(&a);
    assert!(echo.lines().any(|l| l == "seed = 9"), "{echo}");
    assert!(echo.lines().any(|l| l == "out_dir = elsewhere"), "{echo}");
    let c = btm(d, &["--config", "tiny.cfg", "--set", "keep_ratio=0.5", "eval"]);
    assert!(stdout(&c).lines().any(|l| l == "keep_ratio = 0.5"));
}

#[test]
fn errors_are_one_line_with_failure_status() {
    let dir = tiny_dir();
    let d = dir.path();
    let cases: [&[&str]; 4] = [
        &["--config", "tiny.cfg", "train"],
        &["--config", "tiny.cfg", "track"],
        &["--config", "missing.cfg", "gen"],
        &["--config", "tiny.cfg", "--set", "keep_ratio=2", "gen"],
    ];
    for args in cases {
        let o = btm(d, args);
        assert!(!o.status.success(), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error: "), "{err}");
    }
    std::fs::write(d.join("bad.cfg"), "gen_frames = 4\nsearh_size = 3\n").unwrap();
    let o = btm(d, &["--config", "bad.cfg", "gen"]);
    assert!(stderr(&o).contains("searh_size"));
}

#[test]
fn gen_twice_gives_identical_bytes() {
    let dir = tiny_dir();
    let d = dir.path();
    let read = |p: &Path| -> Vec<Vec<u8>> {
        let mut files: Vec<_> = std::fs::read_dir(p).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().map(|f| std::fs::read(f.join("groundtruth.txt")).unwrap()).collect()
    };
    assert!(btm(d, &["--config", "tiny.cfg", "gen"]).status.success());
    let first = read(&d.join("data/train"));
    assert!(btm(d, &["--config", "tiny.cfg", "gen"]).status.success());
    assert_eq!(read(&d.join("data/train")), first);
}
