use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_GEOMETRY: &str = r#"dso_mm = 1000.0
dsd_mm = 1500.0
det_rows = 16
det_cols = 16
det_spacing_u_mm = 12.8
det_spacing_v_mm = 12.8
n_views = 4
angle_range_deg = 180.0
volume_shape = [16, 16, 16]
voxel_spacing_mm = [12.8, 12.8, 12.8]
"#;

fn difct(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difct"))
        .current_dir(dir)
        .env_remove("DIFCT_THREADS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = difct(dir, args);
    assert!(
        out.status.success(),
        "difct {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    std::fs::write(root.join("geom.toml"), SMALL_GEOMETRY).unwrap();
    (dir, root)
}

fn bytes(p: PathBuf) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn classical_pipeline_end_to_end() {
    let (_tmp, d) = workspace();
    ok(&d, &["--seed", "4", "phantom", "--kind", "sphere", "--geometry", "geom.toml", "-o", "vol.difvol"]);
    ok(&d, &["project", "--vol", "vol.difvol", "--geometry", "geom.toml", "-o", "p.difproj"]);
    ok(&d, &["recon-fdk", "--proj", "p.difproj", "--geometry", "geom.toml", "-o", "fdk.difvol"]);
    ok(
        &d,
        &["recon-sart", "--proj", "p.difproj", "--geometry", "geom.toml", "--iterations", "5", "--res", "12", "-o", "sart.difvol"],
    );
    let report = ok(&d, &["eval", "--pred", "fdk.difvol", "--gt", "vol.difvol"]);
    assert!(report.starts_with("psnr_db="), "{report}");
    let same = ok(&d, &["eval", "--pred", "vol.difvol", "--gt", "vol.difvol"]);
    assert!(same.contains("psnr_db=99.0000") && same.contains("identical=true"), "{same}");
    ok(&d, &["slice", "--vol", "vol.difvol", "--axis", "z", "--index", "8", "-o", "s.pgm"]);
    let pgm = bytes(d.join("s.pgm"));
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), 13 + 256);
}

#[test]
fn commands_are_seed_deterministic() {
    let (_tmp, d) = workspace();
    for name in ["a", "b"] {
        ok(&d, &["--seed", "9", "phantom", "--geometry", "geom.toml", "-o", &format!("{name}.difvol")]);
        ok(&d, &["project", "--vol", &format!("{name}.difvol"), "--geometry", "geom.toml", "-o", &format!("{name}.difproj")]);
    }
    ok(&d, &["--seed", "10", "phantom", "--geometry", "geom.toml", "-o", "c.difvol"]);
    assert_eq!(bytes(d.join("a.difvol")), bytes(d.join("b.difvol")));
    assert_eq!(bytes(d.join("a.difproj")), bytes(d.join("b.difproj")));
    assert_ne!(bytes(d.join("a.difvol")), bytes(d.join("c.difvol")));

    for name in ["ds1", "ds2"] {
        ok(&d, &["--seed", "2", "dataset", "--out", name, "--counts", "2,1,1", "--geometry", "geom.toml"]);
    }
    let files: Vec<_> = std::fs::read_dir(d.join("ds1")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 2 * 4 + 2);
    for f in files {
        assert_eq!(bytes(d.join("ds1").join(&f)), bytes(d.join("ds2").join(&f)), "{f:?} differs");
    }

    let train = |out: &str| {
        ok(
            &d,
            &[
                "--seed", "1", "train", "--dataset", "ds1/manifest.toml", "-o", out, "--epochs", "2", "--points", "64",
                "--batch", "2", "--channels", "8", "--base-width", "2", "--depth", "2",
            ],
        )
    };
    let summary = train("m1.difw");
    assert!(summary.contains("final_loss="), "{summary}");
    train("m2.difw");
    assert_eq!(bytes(d.join("m1.difw")), bytes(d.join("m2.difw")));
    assert!(d.join("m1.difw.toml").is_file());

    for out in ["r1.difvol", "r2.difvol"] {
        ok(
            &d,
            &["recon-dif", "--model", "m1.difw", "--proj", "ds1/test_0003.difproj", "--geometry", "ds1/geometry.toml", "-o", out],
        );
    }
    ok(
        &d,
        &[
            "recon-dif", "--model", "m1.difw", "--proj", "ds1/test_0003.difproj", "--geometry", "ds1/geometry.toml", "--res",
            "8", "--chunk", "100", "-o", "r3.difvol",
        ],
    );
    assert_eq!(bytes(d.join("r1.difvol")), bytes(d.join("r2.difvol")));
    assert!(bytes(d.join("r3.difvol")).starts_with(b"DIFVOL v1 8 8 8 "));
}

#[test]
fn bench_writes_csv_and_warns_about_missing_models() {
    let (_tmp, d) = workspace();
    ok(&d, &["dataset", "--out", "ds", "--counts", "0,0,2", "--geometry", "geom.toml"]);
    std::fs::write(
        d.join("bench.toml"),
        "dataset = \"ds/manifest.toml\"\nmethods = [\"fdk\", \"dif\"]\nview_counts = [4]\nresolutions = [16]\n\n[models]\n4 = \"absent.difw\"\n",
    )
    .unwrap();
    let summary = ok(&d, &["bench", "--config", "bench.toml", "-o", "report.csv"]);
    assert!(summary.contains("K=4 16^3"), "{summary}");
    assert!(summary.contains("warning:"), "{summary}");
    let csv = std::fs::read_to_string(d.join("report.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "method,n_views,resolution,case,psnr_db,ssim,seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("fdk,4,16,test_0000,"));
}

#[test]
fn exit_codes() {
    let (_tmp, d) = workspace();
    assert_eq!(difct(&d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(difct(&d, &["phantom", "--kind", "cube", "-o", "x.difvol"]).status.code(), Some(2));
    assert_eq!(difct(&d, &["eval", "--pred", "missing.difvol", "--gt", "missing.difvol"]).status.code(), Some(3));

    ok(&d, &["phantom", "--geometry", "geom.toml", "-o", "v.difvol"]);
    let full = bytes(d.join("v.difvol"));
    std::fs::write(d.join("cut.difvol"), &full[..full.len() - 5]).unwrap();
    let out = difct(&d, &["slice", "--vol", "cut.difvol", "--index", "0", "-o", "s.pgm"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!d.join("s.pgm").exists());

    let mut v2 = full.clone();
    v2[8] = b'2';
    std::fs::write(d.join("v2.difvol"), v2).unwrap();
    let out = difct(&d, &["eval", "--pred", "v2.difvol", "--gt", "v.difvol"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported"));

    ok(&d, &["project", "--vol", "v.difvol", "--geometry", "geom.toml", "-o", "p.difproj"]);
    let bad_sart = ["recon-sart", "--proj", "p.difproj", "--geometry", "geom.toml", "--relaxation", "0", "-o", "o.difvol"];
    assert_eq!(difct(&d, &bad_sart).status.code(), Some(2));

    ok(&d, &["dataset", "--out", "ds", "--counts", "1,0,0", "--geometry", "geom.toml"]);
    let diverge = [
        "train", "--dataset", "ds/manifest.toml", "-o", "m.difw", "--epochs", "3", "--points", "32", "--channels", "8",
        "--base-width", "2", "--depth", "1", "--lr", "1e30", "--momentum", "0.9", "--steps-per-batch", "4",
    ];
    let out = difct(&d, &diverge);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn thread_cap_from_environment() {
    let (_tmp, d) = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_difct"))
        .current_dir(&d)
        .env("DIFCT_THREADS", "1")
        .args(["phantom", "--geometry", "geom.toml", "-o", "v.difvol"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_difct"))
        .current_dir(&d)
        .args(["--threads", "0", "phantom", "--geometry", "geom.toml", "-o", "v.difvol"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
