use std::path::Path;
use std::process::{Command, Output};

fn segd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segd")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_phantom(dir: &Path, name: &str, seed: &str) {
    let out = dir.join(format!("{name}.mvol"));
    let gt = dir.join(format!("{name}_gt.mvol"));
    let o = segd(&["--seed", seed, "phantom", "--dims", "96,96,32", "--out", p(&out), "--gt", p(&gt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn phantom_is_deterministic_per_seed() {
    let d = tempfile::tempdir().unwrap();
    small_phantom(d.path(), "a", "1");
    small_phantom(d.path(), "b", "1");
    small_phantom(d.path(), "c", "2");
    let read = |n: &str| std::fs::read(d.path().join(n)).unwrap();
    assert_eq!(read("a.mvol"), read("b.mvol"));
    assert_eq!(read("a_gt.mvol"), read("b_gt.mvol"));
    assert_eq!(read("a_template.mvol"), read("b_template.mvol"));
    assert_ne!(read("a.mvol"), read("c.mvol"));
}

#[test]
fn usage_errors_exit_two() {
    let o = segd(&["phantom", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(segd(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(segd(&["--help"]).status.code(), Some(0));
}

#[test]
fn processing_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    small_phantom(d.path(), "a", "0");
    let other = d.path().join("other_gt.mvol");
    let o = segd(&["phantom", "--dims", "64,64,32", "--out", p(&d.path().join("other.mvol")), "--gt", p(&other)]);
    assert!(o.status.success());
    let o = segd(&["eval", "--pred", p(&d.path().join("a_gt.mvol")), "--gt", p(&other)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let missing = d.path().join("nope.mvol");
    let o = segd(&["preprocess", "--in", p(&missing), "--out", p(&d.path().join("x.mvol"))]);
    assert_eq!(o.status.code(), Some(1));

    let cfg = d.path().join("bad.cfg");
    std::fs::write(&cfg, "lamda=3\n").unwrap();
    let o = segd(&["--config", p(&cfg), "preprocess", "--in", p(&d.path().join("a.mvol")), "--out", p(&d.path().join("x.mvol"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    small_phantom(d.path(), "a", "0");
    let gt = d.path().join("a_gt.mvol");
    let csv = d.path().join("r.csv");
    let o = segd(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--csv", p(&csv), "--tag", "self"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("frame,iou\n"));
    assert!(text.contains("overall,1"), "{text}");
}

#[test]
fn stagewise_commands_match_pipeline() {
    let d = tempfile::tempdir().unwrap();
    small_phantom(d.path(), "a", "3");
    let vol = d.path().join("a.mvol");
    let run = |args: &[&str]| {
        let o = segd(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    let pre = d.path().join("pre.mvol");
    let geo = d.path().join("geo.mvol");
    let gc = d.path().join("gc.mvol");
    let tr = d.path().join("tr.mvol");
    run(&["preprocess", "--in", p(&vol), "--out", p(&pre)]);
    run(&["geodesic", "--in", p(&vol), "--labels", p(&pre), "--out", p(&geo)]);
    run(&["grabcut", "--in", p(&vol), "--labels", p(&geo), "--out", p(&gc)]);
    run(&["track", "--labels", p(&gc), "--out", p(&tr), "--auto-init"]);

    let outdir = d.path().join("run");
    let o = run(&["pipeline", "--in", p(&vol), "--out", p(&outdir), "--gt", p(&d.path().join("a_gt.mvol")), "--auto-init"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("overall body IoU"));
    let read = |f: &Path| std::fs::read(f).unwrap();
    assert_eq!(read(&pre), read(&outdir.join("preprocess.mvol")));
    assert_eq!(read(&geo), read(&outdir.join("geodesic.mvol")));
    assert_eq!(read(&gc), read(&outdir.join("grabcut.mvol")));
    assert_eq!(read(&tr), read(&outdir.join("labels.mvol")));
    for f in ["tracks.txt", "report.csv", "iou.png"] {
        assert!(outdir.join(f).exists(), "{f}");
    }

    let png = d.path().join("s.png");
    run(&["export", "--in", p(&vol), "--out", p(&png), "--index", "4", "--labels", p(&tr)]);
    assert!(read(&png).starts_with(b"\x89PNG"));
}

#[test]
fn warp_writes_matching_volume_and_truth() {
    let d = tempfile::tempdir().unwrap();
    small_phantom(d.path(), "a", "0");
    let out = d.path().join("w.mvol");
    let gt_out = d.path().join("w_gt.mvol");
    let pts = d.path().join("pts.txt");
    std::fs::write(&pts, "20,20,22,19\n70,20,68,23\n20,70,21,72\n70,70,70,70\n45,45,47,44\n").unwrap();
    for set in ["single", "1", "3"] {
        let o = segd(&[
            "warp", "--in", p(&d.path().join("a.mvol")), "--out", p(&out),
            "--gt", p(&d.path().join("a_gt.mvol")), "--gt-out", p(&gt_out), "--points", p(&pts), "--set", set,
        ]);
        assert!(o.status.success(), "{set}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(std::fs::metadata(&out).unwrap().len(), 31 + 96 * 96 * 32 * 2);
    }
}
