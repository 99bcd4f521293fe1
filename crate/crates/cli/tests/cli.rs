use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn asset(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets").join(rel)
}

fn dvfault(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dvfault")).args(args).output().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "model = {}\ntest_images = {}\ntest_labels = {}\ntrain_images = {}\ntrain_labels = {}\nprofile = {}\n\
         inputs = 3\nn = 4\ntrials = 6\nseed = 5\n{extra}",
        asset("models/toy_lenet.lsnm").display(),
        asset("data/digits16-test-images.idx").display(),
        asset("data/digits16-test-labels.idx").display(),
        asset("data/digits16-train-images.idx").display(),
        asset("data/digits16-train-labels.idx").display(),
        asset("profiles/default.conf").display(),
    );
    let path = dir.join("small.conf");
    std::fs::write(&path, text).unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(dvfault(&["--help"]).status.code(), Some(0));
    assert_eq!(dvfault(&["--version"]).status.code(), Some(0));
    assert_eq!(dvfault(&["attack", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dvfault(&[]).status.code(), Some(1));
    assert_eq!(dvfault(&["frobnicate"]).status.code(), Some(1));
    let out = dvfault(&["sensitivity", "--images", "a", "--labels", "b", "--out", "c"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--model"));
    assert_eq!(dvfault(&["calibrate", "--profile", "p", "--out", "o", "--trials", "x"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dvfault(&["attack", "--config", "/nonexistent/x.conf", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x.conf"));
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "model = m\nbogus = 1\n").unwrap();
    let out = dvfault(&["baseline", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    let csv = dir.path().join("c.csv");
    let out = dvfault(&[
        "calibrate",
        "--profile",
        asset("profiles/default.conf").to_str().unwrap(),
        "--v-grid",
        "800..600:10",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn calibrate_is_deterministic_and_finds_the_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = dvfault(&[
            "calibrate",
            "--profile",
            asset("profiles/default.conf").to_str().unwrap(),
            "--trials",
            "300",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        (read(&out), String::from_utf8(o.stdout).unwrap())
    };
    let (a, msg) = run("a.csv");
    let (b, _) = run("b.csv");
    assert_eq!(a, b);
    assert!(String::from_utf8_lossy(&a).starts_with("# tool=dvfault version="));
    assert!(msg.contains("V_l 710 mV, offset +235 MHz"), "{msg}");
}

#[test]
fn attack_outputs_are_reproducible_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "delivery = device\n");
    let run = |sub: &str, out: &str, extra: &[&str]| {
        let out = dir.path().join(out);
        let mut args = vec![sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = dvfault(&args);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("attack", "a", &[]);
    let b = run("attack", "b", &["--jobs", "1"]);
    for f in ["trials.jsonl", "summary.csv", "confusion.csv"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let t = run("attack", "t", &["--target-class", "3"]);
    assert_ne!(read(&a.join("summary.csv")), read(&t.join("summary.csv")));
    let r = dir.path().join("r");
    let o = dvfault(&["report", "--trials", a.join("trials.jsonl").to_str().unwrap(), "--out", r.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&a.join("summary.csv")), read(&r.join("summary.csv")));
    assert_eq!(read(&a.join("confusion.csv")), read(&r.join("confusion.csv")));

    let x = run("baseline", "x", &[]);
    let y = run("baseline", "y", &[]);
    assert_eq!(read(&x.join("trials.jsonl")), read(&y.join("trials.jsonl")));
    let z = run("baseline", "z", &["--seed", "6"]);
    assert_ne!(read(&x.join("trials.jsonl")), read(&z.join("trials.jsonl")));
}

#[test]
fn sensitivity_and_evolve_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let sens = |out: &str| {
        let out = dir.path().join(out);
        let o = dvfault(&[
            "sensitivity",
            "--model",
            asset("models/toy_lenet.lsnm").to_str().unwrap(),
            "--images",
            asset("data/digits16-test-images.idx").to_str().unwrap(),
            "--labels",
            asset("data/digits16-test-labels.idx").to_str().unwrap(),
            "--index",
            "2",
            "--granularity",
            "bit",
            "--top",
            "10",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        read(&out)
    };
    let a = sens("a.csv");
    assert_eq!(a, sens("b.csv"));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 11);

    let cfg = small_config(
        dir.path(),
        "search = indep\nsample_size = 2\nga_population = 6\nga_generations = 3\nga_fitness_trials = 3\n",
    );
    let evolve = |out: &str| {
        let out = dir.path().join(out);
        let o = dvfault(&["evolve", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        (read(&out.join("ga_trace.csv")), read(&out.join("best.conf")))
    };
    assert_eq!(evolve("e1"), evolve("e2"));
}
