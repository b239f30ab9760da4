use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use pctomo::grids::{read_array, write_array, Array};
use pctomo::simulate::magnitude_norm;
use pctomo::ObjectVolume64;
use tempfile::TempDir;

fn pctomo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pctomo")).current_dir(dir).args(args).output().expect("spawn pctomo")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pctomo(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    pctomo(dir, args).status.code().unwrap()
}

fn phantom16(dir: &Path) {
    ok(dir, &["phantom", "--kind", "ellipsoids", "--grid", "16,16,16", "--seed", "7", "--magnitude", "3.14159", "--out", "ph.pct"]);
}

fn rho_of(stdout: &str) -> f64 {
    stdout.lines().find_map(|l| l.strip_prefix("rho=")).unwrap().trim().parse().unwrap()
}

#[test]
fn phantom_hits_magnitude_and_is_deterministic() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(d, &["phantom", "--kind", "ellipsoids", "--grid", "32,32,32", "--seed", "7", "--magnitude", "3.14159", "--out", "a.pct"]);
    ok(d, &["phantom", "--kind", "ellipsoids", "--grid", "32,32,32", "--seed", "7", "--magnitude", "3.14159", "--out", "b.pct"]);
    let v = ObjectVolume64::from_array(read_array(d.join("a.pct")).unwrap(), 1.0, 1.0).unwrap();
    assert!((magnitude_norm(&v) - 3.14159).abs() < 1e-9);
    assert_eq!(std::fs::read(d.join("a.pct")).unwrap(), std::fs::read(d.join("b.pct")).unwrap());
}

#[test]
fn invalid_phantom_flags_exit_2() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(t.path(), &["phantom", "--kind", "ellipsoids", "--grid", "0,1,1", "--out", "x.pct"]), 2);
    assert_eq!(code(t.path(), &["phantom", "--kind", "cube", "--grid", "4,4,4", "--out", "x.pct"]), 2);
}

#[test]
fn simulate_nearfield_needs_nf() {
    let t = TempDir::new().unwrap();
    phantom16(t.path());
    assert_eq!(code(t.path(), &["simulate", "--object", "ph.pct", "--mode", "nearfield", "--out", "d.pct"]), 2);
}

#[test]
fn noiseless_sidecar_and_wedge_rows() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(d, &["phantom", "--kind", "sphere", "--grid", "8,4,8", "--out", "s.pct"]);
    ok(d, &["simulate", "--object", "s.pct", "--mode", "farfield", "--angles", "256", "--theta-max", "160", "--pad", "1", "--out", "d.pct"]);
    let meta = std::fs::read_to_string(d.join("d.pct.meta")).unwrap();
    assert!(meta.lines().any(|l| l == "err_norm=0"), "{meta}");
    assert!(meta.lines().any(|l| l == "unmasked_angles=228"), "{meta}");
    let (shape, w) = read_array(d.join("d.pct.weights")).unwrap().into_real().unwrap();
    let frame = shape[1] * shape[2];
    let kept = w.chunks(frame).filter(|f| f.iter().all(|&x| x == 1.0)).count();
    assert_eq!(kept, 228);
}

#[test]
fn empty_object_gives_unit_data() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    write_array(d.join("z.pct"), &Array::complex(vec![6, 6, 6], vec![Default::default(); 216]).unwrap()).unwrap();
    ok(d, &["simulate", "--object", "z.pct", "--mode", "nearfield", "--nf", "0.05", "--angles", "4", "--out", "d.pct"]);
    let (_, data) = read_array(d.join("d.pct")).unwrap().into_real().unwrap();
    assert!(data.iter().all(|&x| (x - 1.0).abs() < 1e-12));
}

#[test]
fn fixed_zero_returns_initial_guess() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    phantom16(d);
    ok(d, &["simulate", "--object", "ph.pct", "--mode", "nearfield", "--nf", "0.01", "--angles", "4", "--out", "d.pct"]);
    ok(d, &["reconstruct", "--data", "d.pct", "--stop", "fixed:0", "--init", "ph.pct", "--out", "r.pct"]);
    assert_eq!(read_array(d.join("r.pct")).unwrap(), read_array(d.join("ph.pct")).unwrap());
}

#[test]
fn discrepancy_without_error_estimate_exits_2() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    phantom16(d);
    ok(d, &["simulate", "--object", "ph.pct", "--mode", "nearfield", "--nf", "0.01", "--angles", "4", "--out", "d.pct"]);
    std::fs::remove_file(d.join("d.pct.meta")).unwrap();
    let args = ["reconstruct", "--data", "d.pct", "--mode", "nearfield", "--nf", "0.01", "--grid", "16,16,16"];
    let rest = ["--alpha0", "1", "--stop", "discrepancy:1", "--out", "r.pct"];
    assert_eq!(code(d, &[&args[..], &rest[..]].concat()), 2);
}

#[test]
fn end_to_end_smoke_under_a_minute() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    let start = Instant::now();
    phantom16(d);
    ok(d, &["simulate", "--object", "ph.pct", "--mode", "nearfield", "--nf", "0.01", "--angles", "16", "--noise", "gaussian:0.03", "--seed", "3", "--out", "d.pct"]);
    ok(d, &["reconstruct", "--data", "d.pct", "--stop", "fixed:3", "--alpha-ref", "ph.pct", "--out", "r.pct", "--log", "log.csv", "--slices", "sl"]);
    let rho = rho_of(&ok(d, &["metrics", "--recon", "r.pct", "--truth", "ph.pct"]));
    assert!(start.elapsed().as_secs() < 60);
    assert!(rho < 1.0, "rho {rho}");
    let log = std::fs::read_to_string(d.join("log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("k,alpha_k,data_residual,cg_iters,rho_k"));
    assert_eq!(log.lines().count(), 5);
    for s in ["sl_xz.pgm", "sl_yx.pgm", "sl_yz.pgm"] {
        assert!(std::fs::read(d.join(s)).unwrap().starts_with(b"P5\n16 16\n255\n"));
    }
}

#[test]
fn metrics_examples() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    phantom16(d);
    let truth = read_array(d.join("ph.pct")).unwrap();
    let (shape, v) = truth.into_complex();
    write_array(d.join("zero.pct"), &Array::complex(shape.clone(), vec![Default::default(); v.len()]).unwrap()).unwrap();
    write_array(d.join("two.pct"), &Array::complex(shape, v.iter().map(|x| x * 2.0).collect()).unwrap()).unwrap();
    assert_eq!(rho_of(&ok(d, &["metrics", "--recon", "ph.pct", "--truth", "ph.pct"])), 0.0);
    assert!((rho_of(&ok(d, &["metrics", "--recon", "zero.pct", "--truth", "ph.pct"])) - 1.0).abs() < 1e-12);
    assert!((rho_of(&ok(d, &["metrics", "--recon", "two.pct", "--truth", "ph.pct"])) - 1.0).abs() < 1e-12);
    let sub = ok(d, &["metrics", "--recon", "two.pct", "--truth", "ph.pct", "--subtract-reference", "zero.pct"]);
    assert!(sub.contains("rho_subtracted=1.0000000000"));
    ok(d, &["phantom", "--kind", "sphere", "--grid", "8,8,8", "--out", "small.pct"]);
    assert_eq!(code(d, &["metrics", "--recon", "small.pct", "--truth", "ph.pct"]), 2);
}

#[test]
fn config_file_and_dump_round_trip() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    std::fs::write(d.join("p.cfg"), "# phantom\nkind = bullet\ngrid=12,12,12\nmagnitude=2\nout=cfg.pct\n").unwrap();
    let dump = ok(d, &["--config", "p.cfg", "phantom", "--magnitude", "1.5", "--dump-config"]);
    assert!(dump.lines().any(|l| l == "magnitude=1.5"), "{dump}");
    assert!(dump.lines().any(|l| l == "kind=bullet"));
    std::fs::write(d.join("resolved.cfg"), &dump).unwrap();
    ok(d, &["--config", "resolved.cfg", "phantom"]);
    let v = ObjectVolume64::from_array(read_array(d.join("cfg.pct")).unwrap(), 1.0, 1.0).unwrap();
    assert!((magnitude_norm(&v) - 1.5).abs() < 1e-9);
    std::fs::write(d.join("bad.cfg"), "colour=red\n").unwrap();
    assert_eq!(code(d, &["--config", "bad.cfg", "phantom"]), 2);
}

#[test]
fn thread_count_does_not_change_results() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    phantom16(d);
    ok(d, &["simulate", "--object", "ph.pct", "--mode", "farfield", "--angles", "8", "--noise", "poisson:0.05", "--out", "d.pct"]);
    let base = ["reconstruct", "--data", "d.pct", "--stop", "fixed:2", "--alpha0", "10", "--constraint", "purephase"];
    ok(d, &[&base[..], &["--threads", "1", "--out", "a.pct"]].concat());
    ok(d, &[&base[..], &["--threads", "3", "--out", "b.pct"]].concat());
    assert_eq!(std::fs::read(d.join("a.pct")).unwrap(), std::fs::read(d.join("b.pct")).unwrap());
}
