use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_haate");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("HAATE_THREADS")
        .output()
        .expect("spawn haate")
}

fn small_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let base = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(base).unwrap()).unwrap();
    v["grid"]["iterations"] = 8.into();
    edit(&mut v);
    let path = dir.join("config.json");
    fs::write(&path, v.to_string()).unwrap();
    path
}

fn simulate(dir: &Path, config: &Path, extra: &[&str]) -> Output {
    let out = dir.join("out");
    let mut args = vec![
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn reference_config_parses_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/reference.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(cfg).unwrap()).unwrap();
    assert_eq!(v["grid"]["rho_u_values"].as_array().unwrap().len(), 5);
    assert_eq!(
        v["grid"]["scaled_alpha_values"].as_array().unwrap().len(),
        17
    );
    v["grid"]["rho_u_values"] = serde_json::json!([0.5]);
    v["grid"]["c_values"] = serde_json::json!([1]);
    v["grid"]["scaled_alpha_values"] = serde_json::json!([1]);
    v["grid"]["iterations"] = 2.into();
    v["plot"] = false.into();
    let path = dir.path().join("ref.json");
    fs::write(&path, v.to_string()).unwrap();
    let o = simulate(dir.path(), &path, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = small_config(a.path(), |_| {});
    let cb = small_config(b.path(), |_| {});
    let oa = simulate(a.path(), &ca, &["--threads", "1"]);
    let ob = simulate(b.path(), &cb, &["--threads", "3"]);
    assert!(
        oa.status.success() && ob.status.success(),
        "{}",
        stderr(&oa)
    );
    let fa = fs::read(a.path().join("out/cells.csv")).unwrap();
    let fb = fs::read(b.path().join("out/cells.csv")).unwrap();
    assert_eq!(fa, fb);
    assert_eq!(oa.stdout, ob.stdout);
}

#[test]
fn seed_override_changes_results() {
    let a = tempfile::tempdir().unwrap();
    let cfg = small_config(a.path(), |_| {});
    let o1 = simulate(a.path(), &cfg, &["--seed", "1"]);
    let f1 = fs::read(a.path().join("out/cells.csv")).unwrap();
    let o2 = simulate(a.path(), &cfg, &["--seed", "2"]);
    let f2 = fs::read(a.path().join("out/cells.csv")).unwrap();
    assert!(o1.status.success() && o2.status.success());
    assert_ne!(f1, f2);
}

#[test]
fn summary_rows_are_rows_of_the_cell_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let o = simulate(dir.path(), &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/cells.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    let out = stdout(&o);
    let mut rows = 0;
    for line in out.lines().filter(|l| !l.starts_with('#')) {
        if line == header {
            continue;
        }
        assert!(
            csv.lines().any(|l| l == line),
            "row not in cells.csv: {line}"
        );
        rows += 1;
    }
    assert_eq!(rows, 2 * 4);
    assert_eq!(out.matches(header).count(), 2);
}

#[test]
fn json_format_and_plots_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |v| v["format"] = "json".into());
    let o = simulate(dir.path(), &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/cells.json")).unwrap();
    let cells: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    assert_eq!(cells.len(), 12);
    for name in [
        "rmse_dm_c0.svg",
        "rmse_lm_c0.svg",
        "rmse_dm_c1.svg",
        "rmse_lm_c1.svg",
    ] {
        assert!(dir.path().join("out").join(name).exists(), "{name}");
    }
    let cells_path = dir.path().join("out/cells.json");
    let s = run(&[
        "select-design",
        "--cells",
        cells_path.to_str().unwrap(),
        "--rho-u",
        "0",
        "--c",
        "0",
    ]);
    assert!(s.status.success(), "{}", stderr(&s));
    assert!(stdout(&s).contains("estimator=dm"));
}

#[test]
fn empty_axis_is_a_usage_error_naming_the_axis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |v| {
        v["grid"]["c_values"] = serde_json::json!([])
    });
    let o = simulate(dir.path(), &cfg, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c_values"), "{}", stderr(&o));
}

#[test]
fn bad_configs_exit_with_usage_or_io_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |v| {
        v["grid"]["rho_u_values"] = serde_json::json!([1.0])
    });
    assert_eq!(simulate(dir.path(), &cfg, &[]).status.code(), Some(2));
    let cfg = small_config(dir.path(), |v| v["unknown"] = 1.into());
    assert_eq!(simulate(dir.path(), &cfg, &[]).status.code(), Some(2));
    let cfg = small_config(dir.path(), |v| {
        v["dgp"]["beta"] = serde_json::json!([5, 7.5])
    });
    assert_eq!(simulate(dir.path(), &cfg, &[]).status.code(), Some(2));
    let missing = dir.path().join("absent.json");
    assert_eq!(simulate(dir.path(), &missing, &[]).status.code(), Some(3));
}

#[test]
fn failed_cells_exit_one_with_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |v| {
        v["design"]["J"] = 2.into();
        v["design"]["n"] = 2.into();
        v["grid"]["scaled_alpha_values"] = serde_json::json!([0.001]);
        v["grid"]["rho_u_values"] = serde_json::json!([0]);
        v["grid"]["c_values"] = serde_json::json!([0]);
    });
    let o = simulate(dir.path(), &cfg, &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(dir.path().join("out/cells.csv").exists());
    assert!(stderr(&o).contains("failed"));
}

#[test]
fn config_geometry_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |v| v["design"]["J"] = 1.into());
    let o = simulate(dir.path(), &cfg, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("J=1"));
}

#[test]
fn select_design_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    assert!(simulate(dir.path(), &cfg, &[]).status.success());
    let cells = dir.path().join("out/cells.csv");
    let cells = cells.to_str().unwrap();
    let ok = run(&[
        "select-design",
        "--cells",
        cells,
        "--rho-u",
        "0.5",
        "--c",
        "1",
        "--estimator",
        "lm",
    ]);
    assert!(ok.status.success());
    assert!(stdout(&ok).contains("estimator=lm rho_u=0.5 c=1"));
    let none = run(&[
        "select-design",
        "--cells",
        cells,
        "--rho-u",
        "0.3",
        "--c",
        "1",
    ]);
    assert_eq!(none.status.code(), Some(2));
    let bad_est = run(&[
        "select-design",
        "--cells",
        cells,
        "--rho-u",
        "0.5",
        "--c",
        "1",
        "--estimator",
        "xx",
    ]);
    assert_eq!(bad_est.status.code(), Some(2));
    let garbage = dir.path().join("garbage.csv");
    fs::write(&garbage, "a,b\n1,2\n").unwrap();
    let g = run(&[
        "select-design",
        "--cells",
        garbage.to_str().unwrap(),
        "--rho-u",
        "0",
        "--c",
        "0",
    ]);
    assert_eq!(g.status.code(), Some(2));
    let absent = dir.path().join("absent.csv");
    let a = run(&[
        "select-design",
        "--cells",
        absent.to_str().unwrap(),
        "--rho-u",
        "0",
        "--c",
        "0",
    ]);
    assert_eq!(a.status.code(), Some(3));
}

#[test]
fn assign_is_deterministic_and_target_icc_sets_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = run(&[
            "assign",
            "--J",
            "6",
            "--n",
            "5",
            "--M",
            "2",
            "--target-icc",
            "0.5",
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let csv = fs::read_to_string(&a).unwrap();
    assert_eq!(csv.lines().next(), Some("cluster,unit,arm"));
    assert_eq!(csv.lines().count(), 1 + 30);
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    assert!((side["alpha_bar"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((side["rho_m"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(side["clusters"].as_array().unwrap().len(), 6);
}

#[test]
fn assign_reads_named_clusters_and_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let ids = dir.path().join("ids.txt");
    fs::write(&ids, "north\nsouth\neast\n").unwrap();
    let out = dir.path().join("named.csv");
    let o = run(&[
        "assign",
        "--cluster-ids",
        ids.to_str().unwrap(),
        "--sizes",
        "2,3,4",
        "--alpha",
        "0.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("east,")).count(), 4);
    let short = run(&[
        "assign",
        "--cluster-ids",
        ids.to_str().unwrap(),
        "--sizes",
        "2,3",
        "--alpha",
        "0.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(short.status.code(), Some(2));
}

#[test]
fn sobol_single_row_gives_uniform_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let o = run(&[
        "assign",
        "--J",
        "5",
        "--n",
        "4",
        "--alpha",
        "2",
        "--mode",
        "sobol",
        "--K",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    for c in side["clusters"].as_array().unwrap() {
        for p in c["probs"].as_array().unwrap() {
            assert!((p.as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
        }
    }
    assert_eq!(side["table"].as_array().unwrap().len(), 1);
}

#[test]
fn assign_flag_conflicts_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let out = out.to_str().unwrap();
    let cases: [&[&str]; 6] = [
        &[
            "assign",
            "--J",
            "4",
            "--n",
            "3",
            "--alpha",
            "1",
            "--target-icc",
            "0.5",
            "--out",
            out,
        ],
        &["assign", "--J", "4", "--n", "3", "--out", out],
        &[
            "assign", "--J", "4", "--n", "3", "--sizes", "3,3,3,3", "--alpha", "1", "--out", out,
        ],
        &[
            "assign", "--J", "4", "--n", "3", "--alpha", "1", "--mode", "sobol", "--out", out,
        ],
        &[
            "assign", "--J", "4", "--n", "3", "--alpha", "1", "--K", "3", "--out", out,
        ],
        &[
            "assign", "--J", "4", "--n", "3", "--alpha", "-1", "--out", out,
        ],
    ];
    for args in cases {
        assert_eq!(run(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn plot_marks_the_selected_design() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    assert!(simulate(dir.path(), &cfg, &[]).status.success());
    let cells = dir.path().join("out/cells.csv");
    let cells = cells.to_str().unwrap();
    let sel = stdout(&run(&[
        "select-design",
        "--cells",
        cells,
        "--rho-u",
        "0.5",
        "--c",
        "1",
    ]));
    let rho_m = sel
        .split_whitespace()
        .find_map(|t| t.strip_prefix("rho_m="))
        .unwrap()
        .to_string();
    let plots = dir.path().join("plots");
    let o = run(&[
        "plot",
        "--cells",
        cells,
        "--c",
        "1",
        "--rho-u",
        "0.5",
        "--out-dir",
        plots.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(plots.join("rmse_dm.svg")).unwrap();
    assert_eq!(svg.matches("class=\"optimum\"").count(), 1);
    assert!(svg.contains(&format!("data-x=\"{rho_m}\"")), "{svg}");
    assert!(plots.join("rmse_lm.svg").exists());
}

#[test]
fn plot_single_cell_and_empty_selection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |v| {
        v["grid"]["rho_u_values"] = serde_json::json!([0]);
        v["grid"]["c_values"] = serde_json::json!([0]);
        v["grid"]["scaled_alpha_values"] = serde_json::json!([1]);
        v["plot"] = false.into();
    });
    assert!(simulate(dir.path(), &cfg, &[]).status.success());
    let cells = dir.path().join("out/cells.csv");
    let cells = cells.to_str().unwrap();
    let plots = dir.path().join("plots");
    let o = run(&[
        "plot",
        "--cells",
        cells,
        "--c",
        "0",
        "--out-dir",
        plots.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(plots.join("rmse_lm.svg")).unwrap();
    assert!(svg.contains("<circle"));
    let none = run(&[
        "plot",
        "--cells",
        cells,
        "--c",
        "0.5",
        "--out-dir",
        plots.to_str().unwrap(),
    ]);
    assert_eq!(none.status.code(), Some(2));
}
