//! End-to-end tests of the `refpose` binary: file fixtures in, pose and
//! report files out, exit codes checked.

use std::path::{Path, PathBuf};
use std::process::Command;

use refpose_cli::io;
use refpose_core::geom::{rotation_angle, Pose, Vec3};
use refpose_core::synth::{self, SceneConfig};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_refpose")
}

/// Render one synthetic view and write its files.
fn write_view(
    dir: &Path,
    prefix: &str,
    object: &synth::SyntheticObject,
    pose: &Pose,
    scene: &SceneConfig,
) -> (PathBuf, PathBuf, PathBuf) {
    let (depth_m, mask) =
        synth::render_depth(object, pose, &scene.intrinsics, scene.splat_radius).unwrap();
    let image =
        synth::render_color(object, pose, &scene.intrinsics, scene.splat_radius).unwrap();
    let depth_mm = io::depth_meters_to_mm(&depth_m);

    let color_path = dir.join(format!("{prefix}_color.png"));
    let depth_path = dir.join(format!("{prefix}_depth.png"));
    let mask_path = dir.join(format!("{prefix}_mask.png"));
    io::write_color(&color_path, &image).unwrap();
    io::write_depth_mm(&depth_path, &depth_mm).unwrap();
    io::write_mask(&mask_path, &mask).unwrap();
    (color_path, depth_path, mask_path)
}

struct Fixture {
    dir: tempfile::TempDir,
    ref_color: PathBuf,
    ref_depth: PathBuf,
    ref_mask: PathBuf,
    ref_pose: PathBuf,
    query_color: PathBuf,
    query_depth: PathBuf,
    query_mask: PathBuf,
    intrinsics: PathBuf,
    gt_query_pose: Pose,
}

/// A gentle synthetic pair: mild reference pose, small reference-query gap,
/// written out through the real file formats.
fn make_fixture(identical: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let scene = SceneConfig::default();
    let object = synth::gen_object(41, 2048);

    // File-driven oracle mode matches on geometry alone, so the fixture
    // keeps the total pose rotation mild (the object frame of a synthetic
    // fixture is an arbitrary convention).
    let mut rng = refpose_core::rng::seeded_rng(6);
    let ref_pose = Pose {
        rotation: refpose_core::geom::random_rotation(&mut rng, 15f64.to_radians()),
        translation: Vec3::new(0.02, -0.03, 0.75),
    };
    let gt_query_pose = if identical {
        ref_pose
    } else {
        let delta = Pose {
            rotation: refpose_core::geom::random_rotation(&mut rng, 12f64.to_radians()),
            translation: Vec3::new(0.01, -0.015, 0.02),
        };
        refpose_core::geom::compose(&ref_pose, &delta)
    };

    let (ref_color, ref_depth, ref_mask) =
        write_view(dir.path(), "ref", &object, &ref_pose, &scene);
    let (query_color, query_depth, query_mask) = if identical {
        (ref_color.clone(), ref_depth.clone(), ref_mask.clone())
    } else {
        write_view(dir.path(), "query", &object, &gt_query_pose, &scene)
    };

    let ref_pose_path = dir.path().join("ref_pose.txt");
    io::write_pose(&ref_pose_path, &ref_pose).unwrap();
    let intrinsics = dir.path().join("intrinsics.txt");
    io::write_intrinsics(&intrinsics, &scene.intrinsics).unwrap();

    Fixture {
        dir,
        ref_color,
        ref_depth,
        ref_mask,
        ref_pose: ref_pose_path,
        query_color,
        query_depth,
        query_mask,
        intrinsics,
        gt_query_pose,
    }
}

fn estimate_cmd(f: &Fixture, out_dir: &Path) -> Command {
    let mut cmd = Command::new(binary());
    cmd.arg("estimate")
        .arg("--ref-color").arg(&f.ref_color)
        .arg("--ref-depth").arg(&f.ref_depth)
        .arg("--ref-mask").arg(&f.ref_mask)
        .arg("--ref-pose").arg(&f.ref_pose)
        .arg("--query-color").arg(&f.query_color)
        .arg("--query-depth").arg(&f.query_depth)
        .arg("--query-mask").arg(&f.query_mask)
        .arg("--intrinsics").arg(&f.intrinsics)
        .arg("--out-dir").arg(out_dir);
    cmd
}

#[test]
fn estimate_identical_views_recovers_reference_pose() {
    let f = make_fixture(true);
    let out_dir = f.dir.path().join("out");
    std::fs::create_dir_all(&out_dir).unwrap();
    let status = estimate_cmd(&f, &out_dir)
        .arg("--feature-mode").arg("oracle")
        .arg("--points").arg("1024")
        .arg("--iters").arg("15")
        .status()
        .unwrap();
    assert!(status.success());

    let est = io::read_pose(&out_dir.join("pose.txt")).unwrap();
    let ref_pose = io::read_pose(&f.ref_pose).unwrap();
    assert!(
        rotation_angle(&est.rotation, &ref_pose.rotation) < 1e-5,
        "rotation error {}",
        rotation_angle(&est.rotation, &ref_pose.rotation)
    );
    assert!((est.translation - ref_pose.translation).norm() < 1e-5);
}

#[test]
fn estimate_sample_pair_matches_ground_truth() {
    let f = make_fixture(false);
    let out_dir = f.dir.path().join("out");
    std::fs::create_dir_all(&out_dir).unwrap();
    let status = estimate_cmd(&f, &out_dir)
        .arg("--feature-mode").arg("oracle")
        .arg("--points").arg("1024")
        .arg("--iters").arg("15")
        .arg("--trace")
        .status()
        .unwrap();
    assert!(status.success());

    let est = io::read_pose(&out_dir.join("pose.txt")).unwrap();
    assert!(
        rotation_angle(&est.rotation, &f.gt_query_pose.rotation) < 0.05,
        "rotation error {}",
        rotation_angle(&est.rotation, &f.gt_query_pose.rotation)
    );
    assert!((est.translation - f.gt_query_pose.translation).norm() < 0.01);

    let trace = std::fs::read_to_string(out_dir.join("trace.txt")).unwrap();
    assert_eq!(trace.lines().filter(|l| l.starts_with("iteration")).count(), 15);
}

#[test]
fn estimate_with_untrained_extractors_runs_end_to_end() {
    let f = make_fixture(false);
    let out_dir = f.dir.path().join("out");
    std::fs::create_dir_all(&out_dir).unwrap();
    let status = estimate_cmd(&f, &out_dir)
        .arg("--feature-mode").arg("untrained")
        .arg("--points").arg("256")
        .arg("--iters").arg("1")
        .status()
        .unwrap();
    // Untrained runs make no accuracy promise; they must complete and
    // write a valid pose (exit 0) or flag a mid-loop failure (exit 3).
    let code = status.code().unwrap();
    assert!(code == 0 || code == 3, "unexpected exit code {code}");
    let pose = io::read_pose(&out_dir.join("pose.txt")).unwrap();
    pose.validate().unwrap();
}

#[test]
fn estimate_missing_mask_exits_2_and_names_the_path() {
    let f = make_fixture(true);
    let out_dir = f.dir.path().join("out");
    std::fs::create_dir_all(&out_dir).unwrap();
    let missing = f.dir.path().join("no_such_mask.png");
    let output = Command::new(binary())
        .arg("estimate")
        .arg("--ref-color").arg(&f.ref_color)
        .arg("--ref-depth").arg(&f.ref_depth)
        .arg("--ref-mask").arg(&f.ref_mask)
        .arg("--ref-pose").arg(&f.ref_pose)
        .arg("--query-color").arg(&f.query_color)
        .arg("--query-depth").arg(&f.query_depth)
        .arg("--query-mask").arg(&missing)
        .arg("--intrinsics").arg(&f.intrinsics)
        .arg("--out-dir").arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("no_such_mask.png"),
        "stderr should name the missing file: {stderr}"
    );
}

#[test]
fn synth_eval_writes_report_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(binary())
        .arg("synth-eval")
        .arg("--pairs").arg("3")
        .arg("--seed").arg("5")
        .arg("--points").arg("256")
        .arg("--out-dir").arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let report = io::report::read_report(&dir.path().join("report.txt")).unwrap();
    assert_eq!(report.instances.len(), 3);
    assert!(dir.path().join("report.txt.timing").exists());
}

#[test]
fn scan_check_and_gradcheck_exit_cleanly() {
    for args in [
        vec!["scan-check", "--instances", "5", "--max-len", "128"],
        vec!["scan-check", "--instances", "5", "--max-len", "128", "--precision", "double"],
        vec!["gradcheck", "--instances", "3"],
    ] {
        let status = Command::new(binary()).args(&args).status().unwrap();
        assert!(status.success(), "{args:?} failed");
    }
}

#[test]
fn version_prints_and_exits_zero() {
    let output = Command::new(binary()).arg("version").output().unwrap();
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).starts_with("refpose "));
}

#[test]
fn unknown_flags_exit_2() {
    let status = Command::new(binary())
        .arg("estimate")
        .arg("--nonsense")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
