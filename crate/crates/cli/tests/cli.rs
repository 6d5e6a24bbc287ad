use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forced-osc")).args(args).output().expect("spawn forced-osc")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_scn(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("case.scn");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn list_gallery_names_every_system() {
    let o = cli(&["list-gallery"]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    for name in ["pendulum", "curve_pendulum", "rotating_curve", "morse_chain", "spherical_pendulum", "custom_flat", "geodesic"] {
        assert!(out.lines().any(|l| l.split_whitespace().next() == Some(name)), "{name} missing");
    }
}

#[test]
fn disordered_barriers_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = cli(&["--out", out.to_str().unwrap(), "run", scenario("bad_barriers.scn").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("barrier ordering condition x1(t) < x2(t) fails at t ="), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_gallery_and_typos_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_scn(tmp.path(), "schema_version = 1\nname = \"x\"\npipeline = [\"index\"]\n[system]\ngallery = \"duffing\"\n");
    let o = cli(&["run", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("duffing") && stderr(&o).contains("pendulum"), "{}", stderr(&o));

    let p = write_scn(
        tmp.path(),
        "schema_version = 1\nname = \"x\"\npipeline = [\"verify-segment\"]\n[system]\ngallery = \"pendulum\"\nforcing = 0\n[segment]\nkind = \"pendulum\"\np = 10\nepsilon = 1\n",
    );
    let o = cli(&["run", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epsilon") && stderr(&o).contains("line 10"), "{}", stderr(&o));
}

#[test]
fn lemma_demo_writes_the_flat_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("lemma");
    let o = cli(&["--out", out.to_str().unwrap(), "lemma-demo", scenario("lemma_flat.scn").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("lemma.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("lambda,t_end,deviation,closed_form,error"));
    for (line, lambda) in lines.zip([1.0_f64, 2.0, 4.0, 8.0, 16.0]) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[0], lambda);
        assert!((v[2] - 1.0 / (2.0 * lambda * lambda)).abs() < 1e-9);
    }
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let scn = scenario("pendulum_forced.scn");
    let dirs: Vec<PathBuf> = ["a", "b"].iter().map(|d| tmp.path().join(d)).collect();
    for (d, jobs) in dirs.iter().zip(["1", "3"]) {
        let o = cli(&["--out", d.to_str().unwrap(), "--jobs", jobs, "run", scn.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut names: Vec<_> = std::fs::read_dir(&dirs[0]).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 6);
    for n in names {
        let (a, b) = (std::fs::read(dirs[0].join(&n)).unwrap(), std::fs::read(dirs[1].join(&n)).unwrap());
        assert!(a == b, "{n:?} differs between runs");
    }
}

#[test]
fn manifest_records_seed_and_tolerances() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m");
    let o = cli(&["--out", out.to_str().unwrap(), "--seed", "42", "--tol", "1e-10", "find-orbits", scenario("hamel.scn").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(m.contains("seed = 42"), "{m}");
    assert!(m.contains("[tolerances]") && m.contains("tol_residual = 1e-10"), "{m}");
    assert!(m.contains("pipeline = find-orbits"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 42);
    assert!(report["stages"][0]["result"]["orbits"][0]["residual"].as_f64().unwrap() < 1e-10);
}

#[test]
fn strict_turns_warnings_into_failures() {
    // the push-forced pendulum has a fixed point whose orbit leaves the segment
    let tmp = tempfile::tempdir().unwrap();
    let scn = scenario("pendulum_push.scn");
    let o = cli(&["--out", tmp.path().join("lax").to_str().unwrap(), "find-orbits", scn.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let o = cli(&["--strict", "--out", tmp.path().join("strict").to_str().unwrap(), "find-orbits", scn.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synthetic_contradiction_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let o = cli(&["--out", out.to_str().unwrap(), "run", scenario("contradiction_synthetic.scn").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let dump = std::fs::read_to_string(out.join("contradiction_residuals.csv")).unwrap();
    assert!(dump.lines().count() > 1);
}
