//! `cdfilter` — scenario-driven CD-filter simulation and control CLI.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdfilter::analyze::{self, MetricsReport};
use cdfilter::csvio;
use cdfilter::equilibrium;
use cdfilter::linearize::{self, DiscretizeMethod};
use cdfilter::scenario::{self, ControllerKind, LoadedScenario};
use cdfilter::simulate::{run_closed_loop, Trajectory};
use cdfilter::Error;

#[derive(Parser)]
#[command(
    name = "cdfilter",
    about = "Continuous-disc vacuum filter: simulation, equilibrium, linearization, PI/MPC control, and performance analytics",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve and report the steady-state operating point.
    Steady {
        scenario: PathBuf,
        /// Also write the operating point as name,value CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Build the deviation state-space model, verify it against finite
    /// differences, and dump the matrices as row,col,value CSV.
    Linearize {
        scenario: PathBuf,
        /// Additionally discretize (zero-order hold) at this sample period.
        #[arg(long, value_name = "TS")]
        discretize: Option<f64>,
        /// Output directory for a.csv / b.csv (and a_d.csv / b_d.csv).
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the closed loop and write trajectory + metrics CSV.
    Simulate {
        scenario: PathBuf,
        /// Run both PI and MPC on this scenario (concurrently) and print a
        /// comparison; output files gain _pi/_mpc suffixes.
        #[arg(long)]
        compare: bool,
    },
    /// Evaluate the filtration-efficiency surface over inlet flow and
    /// concentration ranges.
    Surface {
        scenario: PathBuf,
        /// f_in range as start:end:count, e.g. 0.01:0.05:11.
        #[arg(long)]
        fin: String,
        /// c_in range as start:end:count.
        #[arg(long)]
        cin: String,
        /// Fixed filtrate flow [m³/s].
        #[arg(long, default_value_t = 0.04)]
        qf: f64,
        /// Fixed vat concentration [kg/m³].
        #[arg(long, default_value_t = 25.0)]
        cr: f64,
        /// Output CSV path (default: surface.csv next to the scenario).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the default scenario file (stdout when no path is given).
    DumpDefaults { path: Option<PathBuf> },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Steady { scenario, csv } => cmd_steady(&scenario, csv.as_deref()),
        Cmd::Linearize {
            scenario,
            discretize,
            out_dir,
        } => cmd_linearize(&scenario, discretize, &out_dir),
        Cmd::Simulate { scenario, compare } => cmd_simulate(&scenario, compare),
        Cmd::Surface {
            scenario,
            fin,
            cin,
            qf,
            cr,
            out,
        } => cmd_surface(&scenario, &fin, &cin, qf, cr, out.as_deref()),
        Cmd::DumpDefaults { path } => cmd_dump_defaults(path.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Exit-code contract: 2 parse/validation, 3 invalid vacuum, 4 unsupported
/// resistance mode, 5 numerical blow-up, 6 infeasible QP, 1 anything else.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } | Error::Invalid(_) => 2,
        Error::InvalidVacuum { .. } => 3,
        Error::UnsupportedResistanceMode => 4,
        Error::NumericalBlowup { .. } => 5,
        Error::QpInfeasible { .. } => 6,
        _ => 1,
    }
}

/// Resolve an output path from the scenario file: relative paths land next
/// to the scenario; the CDFILTER_OUT_DIR env var redirects the directory.
fn resolve_output(configured: &str, scenario_path: &Path) -> PathBuf {
    let configured = Path::new(configured);
    if let Ok(dir) = std::env::var("CDFILTER_OUT_DIR") {
        let name = configured.file_name().unwrap_or_default();
        return PathBuf::from(dir).join(name);
    }
    if configured.is_absolute() {
        return configured.to_path_buf();
    }
    match scenario_path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(configured),
        _ => configured.to_path_buf(),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let ext = path.extension().map(|e| e.to_string_lossy().to_string());
    let name = match ext {
        Some(ext) => format!("{stem}{suffix}.{ext}"),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

fn cmd_steady(path: &Path, csv: Option<&Path>) -> cdfilter::Result<ExitCode> {
    let file = scenario::load(path)?;
    file.params.validate()?;
    let op = equilibrium::solve_steady_state(&file.params, &file.operating_point)?;
    let residual = equilibrium::scaled_residual_norm(&file.params, &op)?;
    let derivative = equilibrium::scaled_derivative_norm(&file.params, &op)?;

    println!("steady-state operating point");
    println!("  omega_ss     = {} rad/s", op.x_ss.omega);
    println!("  p_v_ss       = {} Pa", op.x_ss.p_v);
    println!("  c_r_ss       = {} kg/m3", op.x_ss.c_r);
    println!("  h_cake_ss    = {} m", op.x_ss.h_cake);
    println!("  q_f_ss       = {} m3/s", op.x_ss.q_f);
    println!("  t_m_ss       = {} N*m", op.u_ss.t_m);
    println!("  q_air_in_ss  = {} m3/s", op.u_ss.q_air_in);
    println!("  q_air_out_ss = {} m3/s", op.u_ss.q_air_out);
    println!("  f_in_ss      = {} m3/s", op.u_ss.f_in);
    println!("  c_in_ss      = {} kg/m3", op.u_ss.c_in);
    println!("  f_out_ss     = {} m3/s", op.u_ss.f_out);
    println!("balance residual (scaled inf-norm)   = {residual:e}");
    println!("derivative at OP (scaled inf-norm)   = {derivative:e}");

    if let Some(csv_path) = csv {
        let out = resolve_output(&csv_path.display().to_string(), path);
        let mut content = String::from("name,value\n");
        for (name, value) in [
            ("omega_ss", op.x_ss.omega),
            ("p_v_ss", op.x_ss.p_v),
            ("c_r_ss", op.x_ss.c_r),
            ("h_cake_ss", op.x_ss.h_cake),
            ("q_f_ss", op.x_ss.q_f),
            ("t_m_ss", op.u_ss.t_m),
            ("q_air_in_ss", op.u_ss.q_air_in),
            ("q_air_out_ss", op.u_ss.q_air_out),
            ("f_in_ss", op.u_ss.f_in),
            ("c_in_ss", op.u_ss.c_in),
            ("f_out_ss", op.u_ss.f_out),
            ("residual_norm", residual),
        ] {
            content.push_str(&format!("{name},{}\n", csvio::format_float(value)));
        }
        csvio::atomic_write(&out, &content)?;
        println!("wrote {}", out.display());
    }

    Ok(if residual < 1e-9 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_linearize(path: &Path, ts: Option<f64>, out_dir: &Path) -> cdfilter::Result<ExitCode> {
    let file = scenario::load(path)?;
    file.params.validate()?;
    let op = equilibrium::solve_steady_state(&file.params, &file.operating_point)?;
    let model = linearize::build_continuous(&file.params, &op)?;
    let fd_err = linearize::fd_agreement(&file.params, &op)?;

    std::fs::create_dir_all(out_dir)?;
    let a_csv = csvio::matrix_csv(5, 5, |i, j| model.a[(i, j)]);
    let b_csv = csvio::matrix_csv(5, 6, |i, j| model.b[(i, j)]);
    csvio::atomic_write(&out_dir.join("a.csv"), &a_csv)?;
    csvio::atomic_write(&out_dir.join("b.csv"), &b_csv)?;
    println!("wrote {} and {}", out_dir.join("a.csv").display(), out_dir.join("b.csv").display());

    if let Some(ts) = ts {
        if !(ts > 0.0) {
            return Err(Error::invalid(format!("--discretize must be > 0, got {ts}")));
        }
        let dm = linearize::discretize(&model, ts, DiscretizeMethod::ZeroOrderHold);
        let ad_csv = csvio::matrix_csv(5, 5, |i, j| dm.a_d[(i, j)]);
        let bd_csv = csvio::matrix_csv(5, 6, |i, j| dm.b_d[(i, j)]);
        csvio::atomic_write(&out_dir.join("a_d.csv"), &ad_csv)?;
        csvio::atomic_write(&out_dir.join("b_d.csv"), &bd_csv)?;
        println!(
            "wrote {} and {} (zero-order hold, ts = {ts} s)",
            out_dir.join("a_d.csv").display(),
            out_dir.join("b_d.csv").display()
        );
    }

    println!("max analytic-vs-finite-difference relative error = {fd_err:e}");
    Ok(if fd_err < 1e-6 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn print_metrics_table(label: &str, report: &MetricsReport) {
    println!("performance metrics [{label}] (settling band = {}%)",
        report.entries.first().map(|e| e.band_pct).unwrap_or(2.0));
    println!(
        "  {:<8} {:>14} {:>14} {:>14} {:>14}",
        "variable", "ise", "overshoot[%]", "settling[s]", "error_sigma"
    );
    for e in &report.entries {
        let overshoot = e
            .overshoot_pct
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".to_string());
        let settling = e
            .settling_time
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "not settled".to_string());
        println!(
            "  {:<8} {:>14.6e} {:>14} {:>14} {:>14.6e}",
            e.variable, e.ise, overshoot, settling, e.error_stddev
        );
    }
}

fn run_and_write(
    loaded: &LoadedScenario,
    scenario_path: &Path,
    suffix: &str,
) -> cdfilter::Result<(Trajectory, MetricsReport)> {
    let traj = run_closed_loop(&loaded.params, &loaded.scenario)?;
    let report = analyze::compute_metrics(&traj, &loaded.scenario.references, loaded.run.band_pct)?;

    let traj_path = with_suffix(&resolve_output(&loaded.run.trajectory_csv, scenario_path), suffix);
    csvio::write_trajectory(&traj_path, &traj)?;
    println!("wrote {}", traj_path.display());

    if let Some(diag) = csvio::mpc_diag_csv(&traj) {
        let diag_path = with_suffix(&traj_path, ".diag");
        csvio::atomic_write(&diag_path, &diag)?;
        println!("wrote {}", diag_path.display());
    }

    let metrics_path = with_suffix(&resolve_output(&loaded.run.metrics_csv, scenario_path), suffix);
    csvio::atomic_write(&metrics_path, &csvio::metrics_csv(&report))?;
    println!("wrote {}", metrics_path.display());

    Ok((traj, report))
}

fn cmd_simulate(path: &Path, compare: bool) -> cdfilter::Result<ExitCode> {
    let file = scenario::load(path)?;
    if !compare {
        let loaded = scenario::build(&file)?;
        let label = match loaded.kind {
            ControllerKind::OpenLoop => "open_loop",
            ControllerKind::Pi => "pi",
            ControllerKind::Mpc => "mpc",
        };
        let (_, report) = run_and_write(&loaded, path, "")?;
        print_metrics_table(label, &report);
        return Ok(ExitCode::SUCCESS);
    }

    let pi = scenario::build_with_controller(&file, ControllerKind::Pi)?;
    let mpc = scenario::build_with_controller(&file, ControllerKind::Mpc)?;
    let (pi_out, mpc_out) = std::thread::scope(|s| {
        let pi_handle = s.spawn(|| run_and_write(&pi, path, "_pi"));
        let mpc_handle = s.spawn(|| run_and_write(&mpc, path, "_mpc"));
        (pi_handle.join().unwrap(), mpc_handle.join().unwrap())
    });
    let (_, pi_report) = pi_out?;
    let (_, mpc_report) = mpc_out?;

    print_metrics_table("pi", &pi_report);
    print_metrics_table("mpc", &mpc_report);
    println!("mpc vs pi:");
    for d in analyze::diff_reports(&pi_report, &mpc_report) {
        let overshoot = d
            .overshoot_delta_pct
            .map(|v| format!("{v:+.4} pp"))
            .unwrap_or_else(|| "-".to_string());
        let settling = d
            .settling_delta
            .map(|v| format!("{v:+.2} s"))
            .unwrap_or_else(|| "-".to_string());
        println!(
            "  {:<8} ise reduction {:+.2}%  sigma reduction {:+.2}%  overshoot delta {}  settling delta {}",
            d.variable, d.ise_reduction_pct, d.stddev_reduction_pct, overshoot, settling
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_range(text: &str) -> cdfilter::Result<(f64, f64, usize)> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::invalid(format!(
            "range must be start:end:count, got `{text}`"
        )));
    }
    let start: f64 = parts[0]
        .parse()
        .map_err(|_| Error::invalid(format!("bad range start `{}`", parts[0])))?;
    let end: f64 = parts[1]
        .parse()
        .map_err(|_| Error::invalid(format!("bad range end `{}`", parts[1])))?;
    let count: usize = parts[2]
        .parse()
        .map_err(|_| Error::invalid(format!("bad range count `{}`", parts[2])))?;
    Ok((start, end, count))
}

fn cmd_surface(
    path: &Path,
    fin: &str,
    cin: &str,
    qf: f64,
    cr: f64,
    out: Option<&Path>,
) -> cdfilter::Result<ExitCode> {
    // The scenario is parsed for strictness even though the surface only
    // needs the fixed values and ranges.
    let _file = scenario::load(path)?;
    let (fin_start, fin_end, n_fin) = parse_range(fin)?;
    let (cin_start, cin_end, n_cin) = parse_range(cin)?;
    let grid = analyze::efficiency_surface(qf, cr, (fin_start, fin_end), (cin_start, cin_end), n_fin, n_cin)?;

    let out_path = match out {
        Some(p) => resolve_output(&p.display().to_string(), path),
        None => resolve_output("surface.csv", path),
    };
    csvio::atomic_write(&out_path, &csvio::surface_csv(&grid))?;
    println!("wrote {} ({} cells)", out_path.display(), n_fin * n_cin);
    println!(
        "monotonicity self-check: every row and column strictly increasing = {}",
        grid.is_strictly_monotone()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_dump_defaults(path: Option<&Path>) -> cdfilter::Result<ExitCode> {
    let text = scenario::to_toml(&scenario::default_file());
    match path {
        Some(p) => {
            csvio::atomic_write(p, &text)?;
            println!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
