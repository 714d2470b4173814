use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_taskgrasp"))
}

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(rel)
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

#[test]
fn fit_recovers_a_sphere() {
    let dir = tempfile::tempdir().unwrap();
    let sq = dir.path().join("sphere.toml");
    fs::write(&sq, "a = 0.05\nb = 0.05\nc = 0.05\ne1 = 1.0\ne2 = 1.0\n[pose]\ntranslation = [0.4, 0.1, 0.05]\n").unwrap();
    let cloud = dir.path().join("sphere.xyz");
    let out = run(bin().arg("render-cloud").arg(&sq).args(["--full", "2000", "--seed", "3", "-o"]).arg(&cloud));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fitted = dir.path().join("fit.toml");
    let out = run(bin().arg("fit").arg(&cloud).arg("-o").arg(&fitted));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: toml::Value = toml::from_str(&fs::read_to_string(&fitted).unwrap()).unwrap();
    for k in ["a", "b", "c"] {
        let e = v[k].as_float().unwrap();
        assert!((e - 0.05).abs() / 0.05 < 0.05, "{k} = {e}");
    }
}

#[test]
fn plan_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("plan{i}.json"))).collect();
    for o in &outs {
        let out = run(bin()
            .arg("plan")
            .arg("--scene")
            .arg(data("scenes/tabletop.toml"))
            .args(["--policy", "at_goal", "--seed", "5", "-o"])
            .arg(o));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(&outs[0]).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, fs::read(&outs[1]).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(v["grasps_tried"].as_u64().unwrap() >= 1);
    assert!(v["transport_path"].as_array().unwrap().len() > 1);
}

#[test]
fn gen_grasps_writes_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("grasps.json");
    let out = run(bin().arg("gen-grasps").arg("--scene").arg(data("scenes/boxed_goal.toml")).arg("-o").arg(&o));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&o).unwrap()).unwrap();
    assert!(!v["grasps"].as_array().unwrap().is_empty());
    assert!(v["validated_at"].is_object());
}

#[test]
fn unknown_policy_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .arg("bench")
        .arg(data("suites/translated.toml"))
        .args(["--policies", "at_goal,best_first", "--csv"])
        .arg(dir.path().join("x.csv")));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for p in ["at_start", "at_goal", "average", "random_order"] {
        assert!(err.contains(p), "{err}");
    }
}

#[test]
fn infeasible_task_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(data("scenes/tabletop.toml")).unwrap();
    // goal far outside the arm's reach
    let scene = base.replace("translation = [0.45, 0.0, 0.06]", "translation = [0.88, -0.48, 0.06]");
    assert_ne!(scene, base);
    let path = dir.path().join("far.toml");
    fs::write(&path, scene).unwrap();
    let out = run(bin().arg("plan").arg("--scene").arg(&path).arg("-o").arg(dir.path().join("p.json")));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_input_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().arg("fit").arg(dir.path().join("missing.xyz")).arg("-o").arg(dir.path().join("f.toml")));
    assert_eq!(out.status.code(), Some(1));
}
