use cardiomech::cli_io::{write_image, write_labels, PipelineConfig};
use cardiomech::registration::{RegConfig, Stage};
use cardiomech::volgrid::{Grid, LabelMap, Volume};
use std::path::Path;
use std::process::{Command, Output};

fn cardiomech(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cardiomech")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn labels(dims: [usize; 3]) -> LabelMap {
    let g = Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap();
    LabelMap::new(g, (0..g.len()).map(|i| (i % 4) as u8).collect()).unwrap()
}

fn smooth_image(dims: [usize; 3], shift: f64) -> Volume<f64> {
    let g = Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap();
    let data = (0..g.len())
        .map(|i| {
            let c = g.coords(i);
            ((c[0] as f64 - shift) * 0.5).sin() * 10.0 + (c[1] as f64 * 0.4).cos() * 8.0 + (c[2] as f64 * 0.3).sin() * 6.0
        })
        .collect();
    Volume::new(g, data).unwrap()
}

fn fast_config(dir: &Path) -> std::path::PathBuf {
    let cfg = PipelineConfig {
        registration: RegConfig {
            stages: vec![Stage { scale_factor: 2, iterations: 20, step_size: 0.3 }, Stage { scale_factor: 1, iterations: 10, step_size: 0.1 }],
            ..RegConfig::default()
        },
        curve_repeats: 5,
        ..PipelineConfig::default()
    };
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

#[test]
fn dice_on_identical_maps_is_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.vol");
    write_labels(&a, &labels([6, 5, 4])).unwrap();
    let o = cardiomech(&["dice", s(&a), s(&a)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "label,dice\n1,1.0\n2,1.0\n3,1.0\n");
}

#[test]
fn register_with_mismatched_grids_fails_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f.vol");
    let m = dir.path().join("m.vol");
    write_image(&f, &smooth_image([16, 16, 16], 0.0)).unwrap();
    write_image(&m, &smooth_image([16, 16, 15], 0.0)).unwrap();
    let o = cardiomech(&["register", "--fixed", s(&f), "--moving", s(&m), "--out", s(&dir.path().join("u.vol"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grid mismatch"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_print_usage_and_exit_1() {
    let o = cardiomech(&["dice", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = cardiomech(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(cardiomech(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    std::fs::write(&c, r#"{"registration": {"lamda": 0.5}}"#).unwrap();
    let o = cardiomech(&["gradcheck", "--config", s(&c), "--grid", "8", "--probes", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lamda"), "{}", stderr(&o));
}

#[test]
fn truncated_volume_reports_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.vol");
    write_labels(&a, &labels([4, 4, 4])).unwrap();
    let mut bytes = std::fs::read(&a).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&a, bytes).unwrap();
    let o = cardiomech(&["dice", s(&a), s(&a)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("expected 64 bytes, found 61"), "{}", stderr(&o));
}

#[test]
fn gradcheck_prints_small_error() {
    let o = cardiomech(&["gradcheck", "--grid", "10", "--probes", "10", "--term", "energy", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let err: f64 = stdout(&o).trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn register_warp_strain_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = fast_config(d);
    write_image(&d.join("f.vol"), &smooth_image([20, 20, 20], 0.0)).unwrap();
    write_image(&d.join("m.vol"), &smooth_image([20, 20, 20], 1.0)).unwrap();
    let o = cardiomech(&[
        "register", "--fixed", s(&d.join("f.vol")), "--moving", s(&d.join("m.vol")), "--config", s(&cfg),
        "--out", s(&d.join("u.vol")), "--diagnostics", s(&d.join("diag.json")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let diag: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("diag.json")).unwrap()).unwrap();
    assert!(diag["final_loss"]["total"].as_f64().unwrap() < diag["initial_loss"]["total"].as_f64().unwrap());
    let o = cardiomech(&["warp", "--input", s(&d.join("m.vol")), "--field", s(&d.join("u.vol")), "--out", s(&d.join("w.vol"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = cardiomech(&["strain", "--field", s(&d.join("u.vol")), "--out-dir", s(&d.join("strain"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["phi.vol", "mu.vol", "kappa.vol", "validity.vol", "strain.json"] {
        assert!(d.join("strain").join(f).is_file(), "{f}");
    }
    // warping a field file is a schema error
    let o = cardiomech(&["warp", "--input", s(&d.join("u.vol")), "--field", s(&d.join("u.vol")), "--out", s(&d.join("x.vol"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pipeline_on_small_cohort_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = fast_config(d);
    let cohort = d.join("cohort");
    let o = cardiomech(&[
        "phantom", "--out", s(&cohort), "--cases-per-class", "5", "--dims", "48", "40", "40", "--spacing", "2.5", "2.5", "2.5",
        "--frames", "4", "--seed", "7",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(cohort.join("cohort.json").is_file());

    let case = cohort.join("NOR_000");
    let o = cardiomech(&["segment", "--case", s(&case), "--target", "es", "--config", s(&cfg), "--out", s(&d.join("seg.vol"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = cardiomech(&["dice", s(&d.join("seg.vol")), s(&case.join("labels_es.vol"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 7);

    let feats = d.join("features.csv");
    let o = cardiomech(&["features", "--cohort", s(&cohort), "--config", s(&cfg), "--out", s(&feats), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&feats).unwrap();
    assert_eq!(text.lines().count(), 26);
    assert!(text.starts_with("case_id,class,mu_1_mean_ED,"));
    assert!(!text.contains('\r'));
    // rerunning one case reproduces its row byte for byte
    let single = d.join("single.csv");
    let o = cardiomech(&["features", "--case", s(&cohort.join("HCM_002")), "--config", s(&cfg), "--out", s(&single), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let single = std::fs::read_to_string(&single).unwrap();
    let row = single.lines().nth(1).unwrap();
    assert!(text.lines().any(|l| l == row));

    let sel = d.join("sel.json");
    let sel2 = d.join("sel2.json");
    for f in [&sel, &sel2] {
        let o = cardiomech(&["select", "--features", s(&feats), "--config", s(&cfg), "--out", s(f), "--seed", "2"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&sel).unwrap(), std::fs::read(&sel2).unwrap());

    let model = d.join("model.json");
    let o = cardiomech(&["train", "--features", s(&feats), "--selection", s(&sel), "--out", s(&model), "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = cardiomech(&["predict", "--model", s(&model), "--features", s(&feats), "--out", s(&d.join("pred.csv"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pred = std::fs::read_to_string(d.join("pred.csv")).unwrap();
    assert!(pred.starts_with("case_id,class,predicted,p_NOR,p_MINF,p_DCM,p_HCM,p_RV\n"));
    assert_eq!(pred.lines().count(), 26);

    let conf = d.join("confusion.csv");
    let o = cardiomech(&["evaluate", "--features", s(&feats), "--selection", s(&sel), "--config", s(&cfg), "--out", s(&conf), "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows: Vec<usize> = std::fs::read_to_string(&conf)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse::<usize>().unwrap()).sum())
        .collect();
    assert_eq!(rows, vec![5; 5]);

    let curve = d.join("curve.csv");
    let o = cardiomech(&["curve", "--features", s(&feats), "--selection", s(&sel), "--config", s(&cfg), "--sizes", "10,20,25", "--out", s(&curve), "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 4);
}
