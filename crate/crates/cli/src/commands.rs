use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use haate_core::montecarlo::{
    read_cells_csv, read_cells_json, select_min_rmse, sweep_each, write_cells_csv,
    write_cells_json, CellCsvWriter, Position, Selection,
};
use haate_core::randomize::{
    alpha_for_icc, assign_from_table, assign_two_stage_ids, index_ids, sobol_table, treatment_icc,
};
use haate_core::{Cell, Estimator, RngStream};
use serde_json::json;

use crate::config::{Format, RunConfig};
use crate::error::{CliError, CliResult};
use crate::svg::{Chart, Series};

const ESTIMATORS: [Estimator; 2] = [Estimator::DifferenceInMeans, Estimator::LinearInMeans];

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(CliError::io(path))?,
    ))
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

pub struct SimulateArgs {
    pub config: PathBuf,
    pub output_dir: Option<PathBuf>,
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
}

pub fn simulate(args: SimulateArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(d) = args.output_dir {
        cfg.output_dir = d;
    }
    if let Some(i) = args.iterations {
        cfg.grid.iterations = i;
    }
    if let Some(s) = args.seed {
        cfg.grid.base_seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(CliError::io(&cfg.output_dir))?;

    let total = cfg.grid.len();
    let treatments = cfg.design.treatments;
    let csv_path = cfg.output_dir.join("cells.csv");
    let mut csv = match cfg.format {
        Format::Csv => Some(CellCsvWriter::new(create(&csv_path)?, treatments)?),
        Format::Json => None,
    };
    let mut cells: Vec<Cell> = Vec::with_capacity(total);
    let mut failures = 0;
    let mut write_err: Option<CliError> = None;
    let mut done = 0;
    sweep_each(&cfg.grid, &cfg.design, &cfg.dgp, &cfg.inference, |r| {
        done += 1;
        match r {
            Ok(cell) => {
                eprintln!(
                    "[{done}/{total}] rho_u={} c={} scaled_alpha={} rho_m={:.4}",
                    cell.rho_u, cell.c, cell.scaled_alpha, cell.rho_m
                );
                if cell.iterations_failed > 0 {
                    failures += 1;
                    eprintln!(
                        "  {} iteration(s) failed after retries",
                        cell.iterations_failed
                    );
                }
                if let (Some(w), None) = (csv.as_mut(), write_err.as_ref()) {
                    if let Err(e) = w.write(cell) {
                        write_err = Some(e.into());
                    }
                }
                cells.push(cell.clone());
            }
            Err(f) => {
                failures += 1;
                eprintln!(
                    "[{done}/{total}] rho_u={} c={} alpha={} failed: {}",
                    f.rho_u, f.c, f.axis_value, f.error
                );
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    drop(csv);
    if cfg.format == Format::Json {
        let path = cfg.output_dir.join("cells.json");
        let mut w = create(&path)?;
        write_cells_json(&cells, &mut w)?;
        w.flush().map_err(CliError::io(&path))?;
    }

    if !cells.is_empty() {
        let stdout = io::stdout();
        let mut out = stdout.lock();
        for est in ESTIMATORS {
            let sel = match select_min_rmse(&cells, est) {
                Ok(sel) => sel,
                Err(e) => {
                    eprintln!("no {} summary: {e}", est.short());
                    continue;
                }
            };
            let _ = writeln!(
                out,
                "# minimum-RMSE design per (rho_u, c), estimator {}",
                est.short()
            );
            let picked: Vec<Cell> = sel.iter().map(|s| cells[s.cell].clone()).collect();
            write_cells_csv(&picked, &mut out)?;
            for s in sel.iter().filter(|s| s.flat) {
                let _ = writeln!(
                    out,
                    "# flat RMSE at rho_u={} c={}: the choice of alpha barely matters",
                    s.rho_u, s.c
                );
            }
        }
    }

    if cfg.plot && !cells.is_empty() {
        for &c in &cfg.grid.c_values {
            let subset: Vec<Cell> = cells.iter().filter(|x| same(x.c, c)).cloned().collect();
            if !subset.is_empty() {
                if let Err(e) = write_plots(&subset, c, &cfg.output_dir, &format!("_c{c}")) {
                    eprintln!("no plot for c={c}: {e}");
                }
            }
        }
    }
    if failures > 0 {
        return Err(CliError::FailedCells(failures));
    }
    Ok(())
}

fn read_cells(path: &Path) -> CliResult<Vec<Cell>> {
    let file = File::open(path).map_err(CliError::io(path))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let parsed = if is_json {
        read_cells_json(file)
    } else {
        read_cells_csv(file)
    };
    parsed.map_err(|e| match e {
        haate_core::Error::Io(m) => CliError::Io {
            path: path.to_path_buf(),
            source: io::Error::other(m),
        },
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })
}

fn position_name(p: Position) -> &'static str {
    match p {
        Position::UnitPole => "unit pole",
        Position::ClusterPole => "cluster pole",
        Position::Interior => "interior",
    }
}

pub fn select_design(cells_path: &Path, rho_u: f64, c: f64, estimator: Estimator) -> CliResult<()> {
    let cells = read_cells(cells_path)?;
    let stratum: Vec<Cell> = cells
        .into_iter()
        .filter(|x| same(x.rho_u, rho_u) && same(x.c, c))
        .collect();
    if stratum.is_empty() {
        return Err(CliError::Usage(format!(
            "no cells with rho_u={rho_u} and c={c}"
        )));
    }
    let sel = select_min_rmse(&stratum, estimator)?;
    let s: &Selection = &sel[0];
    println!(
        "estimator={} rho_u={} c={} alpha_bar={} scaled_alpha={} rho_m={} rmse={} position={}",
        estimator.short(),
        s.rho_u,
        s.c,
        s.alpha_bar,
        s.scaled_alpha,
        s.rho_m,
        s.rmse,
        position_name(s.position)
    );
    write_cells_csv(std::slice::from_ref(&stratum[s.cell]), io::stdout().lock())?;
    if s.flat {
        eprintln!("warning: RMSE is flat across the designs in this stratum; any alpha gives about the same error");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    TwoStage,
    Sobol,
}

pub struct AssignArgs {
    pub clusters: Option<usize>,
    pub cluster_ids: Option<PathBuf>,
    pub cluster_size: Option<usize>,
    pub sizes: Option<Vec<usize>>,
    pub treatments: usize,
    pub alpha: Option<f64>,
    pub target_icc: Option<f64>,
    pub mode: Mode,
    pub k: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

fn read_ids(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if ids.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no cluster ids",
            path.display()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(d) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(CliError::Usage(format!(
            "{}: duplicate cluster id {d:?}",
            path.display()
        )));
    }
    Ok(ids)
}

/// Sidecar path for an assignment file: same stem, `.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    if out.extension().is_some_and(|e| e == "json") {
        out.with_extension("probs.json")
    } else {
        out.with_extension("json")
    }
}

pub fn assign(a: AssignArgs) -> CliResult<()> {
    let ids = match (&a.cluster_ids, a.clusters) {
        (Some(p), None) => read_ids(p)?,
        (None, Some(j)) if j > 0 => index_ids(j),
        (None, Some(_)) => return Err(CliError::Usage("--clusters must be positive".into())),
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --clusters or --cluster-ids".into(),
            ))
        }
    };
    let sizes = match (a.cluster_size, &a.sizes) {
        (Some(n), None) => vec![n; ids.len()],
        (None, Some(s)) if s.len() == ids.len() => s.clone(),
        (None, Some(s)) => {
            return Err(CliError::Usage(format!(
                "--sizes has {} entries for {} clusters",
                s.len(),
                ids.len()
            )))
        }
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --cluster-size or --sizes".into(),
            ))
        }
    };
    if a.treatments == 0 {
        return Err(CliError::Usage("--treatments must be at least 1".into()));
    }
    let alpha_bar = match (a.alpha, a.target_icc) {
        (Some(x), None) => x,
        (None, Some(rho)) => alpha_for_icc(rho, a.treatments)?,
        _ => {
            return Err(CliError::Usage(
                "give exactly one of --alpha or --target-icc".into(),
            ))
        }
    };
    if !(alpha_bar > 0.0 && alpha_bar.is_finite()) {
        return Err(haate_core::Error::NonPositiveAlpha(alpha_bar).into());
    }
    let alpha = vec![alpha_bar; a.treatments + 1];
    let stream = RngStream::new(a.seed, 0);
    let (assignment, table) = match (a.mode, a.k) {
        (Mode::TwoStage, None) => (assign_two_stage_ids(&ids, &sizes, &alpha, stream)?, None),
        (Mode::TwoStage, Some(_)) => {
            return Err(CliError::Usage("--K only applies to --mode sobol".into()))
        }
        (Mode::Sobol, None) => return Err(CliError::Usage("--mode sobol needs --K".into())),
        (Mode::Sobol, Some(k)) => {
            let t = sobol_table(&alpha, k)?;
            (assign_from_table(&ids, &sizes, &t, stream)?, Some(t))
        }
    };

    let mut w = create(&a.out)?;
    assignment.write_csv(&mut w)?;
    w.flush().map_err(CliError::io(&a.out))?;

    let clusters: Vec<_> = assignment
        .cluster_ids()
        .iter()
        .zip(assignment.cluster_probs())
        .zip(assignment.counts())
        .map(|((id, p), n)| json!({ "id": id, "size": n.iter().sum::<usize>(), "probs": p, "counts": n }))
        .collect();
    let sidecar = json!({
        "alpha_bar": alpha_bar,
        "alpha": alpha,
        "M": a.treatments,
        "rho_m": treatment_icc(alpha_bar, a.treatments)?,
        "mode": match a.mode { Mode::TwoStage => "two_stage", Mode::Sobol => "sobol" },
        "K": a.k,
        "seed": a.seed,
        "table": table.as_ref().map(|t| t.rows().to_vec()),
        "clusters": clusters,
    });
    let side = sidecar_path(&a.out);
    let mut w = create(&side)?;
    serde_json::to_writer_pretty(&mut w, &sidecar).map_err(|e| CliError::Core(e.into()))?;
    w.write_all(b"\n").map_err(CliError::io(&side))?;
    w.flush().map_err(CliError::io(&side))?;
    eprintln!("wrote {} and {}", a.out.display(), side.display());
    Ok(())
}

/// Writes one RMSE-versus-`ρ_m` chart per estimator; returns the paths.
pub fn write_plots(cells: &[Cell], c: f64, dir: &Path, suffix: &str) -> CliResult<Vec<PathBuf>> {
    let mut rho_us: Vec<f64> = Vec::new();
    for x in cells {
        if !rho_us.iter().any(|&r| same(r, x.rho_u)) {
            rho_us.push(x.rho_u);
        }
    }
    let mut paths = Vec::new();
    for est in ESTIMATORS {
        let sel = select_min_rmse(cells, est)?;
        let series = rho_us
            .iter()
            .map(|&r| {
                let mut pts: Vec<(f64, f64)> = cells
                    .iter()
                    .filter(|x| same(x.rho_u, r))
                    .map(|x| (x.rho_m, x.summary(est).rmse))
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    label: format!("rho_u = {r}"),
                    points: pts,
                    marker: sel.iter().find(|s| same(s.rho_u, r)).map(|s| s.rho_m),
                }
            })
            .collect();
        let chart = Chart {
            title: format!("{} RMSE, c = {c}", est.short().to_uppercase()),
            x_label: "treatment ICC rho_m".into(),
            y_label: "RMSE".into(),
            x_range: (0.0, 1.0),
            series,
        };
        let path = dir.join(format!("rmse_{}{suffix}.svg", est.short()));
        fs::write(&path, chart.render()).map_err(CliError::io(&path))?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn plot(cells_path: &Path, c: f64, rho_u: Option<Vec<f64>>, out_dir: &Path) -> CliResult<()> {
    let cells = read_cells(cells_path)?;
    let subset: Vec<Cell> = cells
        .into_iter()
        .filter(|x| same(x.c, c))
        .filter(|x| {
            rho_u
                .as_ref()
                .is_none_or(|v| v.iter().any(|&r| same(r, x.rho_u)))
        })
        .collect();
    if subset.is_empty() {
        return Err(CliError::Usage(format!(
            "no cells match c={c} and the requested rho_u values"
        )));
    }
    fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    for p in write_plots(&subset, c, out_dir, "")? {
        println!("{}", p.display());
    }
    Ok(())
}
