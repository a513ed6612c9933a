//! `mmtrack` command-line entry point.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 solver failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mmtrack::config::load_scenario_file;
use mmtrack::ftcnd::{self, FtcndParams};
use mmtrack::qp::QpProblem;
use mmtrack::qp_oracle;
use mmtrack::sim::{error_metrics, run_closed_loop, Controller, ErrorMetrics, SimTrace};
use mmtrack::Error;
use nalgebra::DVector;

const EXIT_CONFIG: u8 = 1;
const EXIT_SOLVER: u8 = 2;
/// Steady-state window (s), shortened for runs under twice this long.
const SETTLE_WINDOW: f64 = 2.0;

#[derive(Parser)]
#[command(name = "mmtrack", version, about = "Mobile-manipulator tracking simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace.csv, metrics.json and plot scripts.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a QP stored in the text matrix format.
    SolveQp {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long, value_enum, default_value_t = SolverChoice::Ftcnd)]
        solver: SolverChoice,
        /// Penalty factor.
        #[arg(long, default_value_t = FtcndParams::default().xi)]
        xi: f64,
        #[arg(long, default_value_t = FtcndParams::default().mu)]
        mu: f64,
        #[arg(long, default_value_t = FtcndParams::default().kappa)]
        kappa: f64,
        #[arg(long, default_value_t = FtcndParams::default().ode_step)]
        ode_step: f64,
        /// Virtual-time budget (s).
        #[arg(long, default_value_t = FtcndParams::default().max_time)]
        max_time: f64,
    },
    /// Run one scenario under several controllers and compare errors.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: nftsm, pd, nftsm-no-taub.
        #[arg(long, value_delimiter = ',', required = true)]
        controllers: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolverChoice {
    Ftcnd,
    Oracle,
    Both,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonConvergence(_)
            | Error::NumericalBlowup
            | Error::Infeasible { .. }
            | Error::Singular(_)
            | Error::IllConditioned { .. } => EXIT_SOLVER,
            _ => EXIT_CONFIG,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| usage(format!("{}: cannot write: {e}", path.display())))
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("{}: cannot create directory: {e}", dir.display())))
}

fn metrics_for(trace: &SimTrace, duration: f64) -> Result<ErrorMetrics, Failure> {
    Ok(error_metrics(trace, SETTLE_WINDOW.min(duration / 2.0))?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::SolveQp {
            problem,
            solver,
            xi,
            mu,
            kappa,
            ode_step,
            max_time,
        } => {
            let params = FtcndParams {
                xi,
                mu,
                kappa,
                ode_step,
                max_time,
                ..FtcndParams::default()
            };
            solve_qp(&problem, solver, &params)
        }
        Command::Compare { config, controllers, out } => compare(&config, &controllers, &out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn simulate(config: &Path, out: &Path) -> Result<(), Failure> {
    let scenario = load_scenario_file(config)?;
    prepare_out(out)?;
    let trace = run_closed_loop(&scenario.model, &scenario.params, &scenario.script)?;
    let metrics = metrics_for(&trace, scenario.script.duration)?;
    write_file(&out.join("trace.csv"), &trace.to_csv())?;
    write_file(&out.join("metrics.json"), &(serde_json::to_string_pretty(&metrics).unwrap() + "\n"))?;
    write_plot_scripts(out, trace.dof(), trace.arm_joints())?;
    println!(
        "{} records, steady-state position error {:.3e} m, orientation error {:.3e} rad",
        trace.records.len(),
        metrics.steady_state_pos_err,
        metrics.steady_state_ori_err
    );
    Ok(())
}

fn fmt_vec(v: &DVector<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.10e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn solve_qp(path: &Path, solver: SolverChoice, params: &FtcndParams) -> Result<(), Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: cannot read problem: {e}", path.display())))?;
    let problem = QpProblem::from_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    params.validate()?;
    let report_kkt = |label: &str, z: &DVector<f64>| {
        let kkt = qp_oracle::check_kkt(&problem, z, 1e-6);
        println!(
            "{label} KKT: stationarity {:.3e}, primal violation {:.3e}, complementarity {:.3e}, penalized stationarity {:.3e}",
            kkt.stationarity_residual,
            kkt.primal_violation,
            kkt.complementarity_residual,
            qp_oracle::penalized_stationarity(&problem, z, params.xi)
        );
    };

    let mut ftcnd_z = None;
    if solver != SolverChoice::Oracle {
        let sol = ftcnd::solve(&problem, params, None)?;
        sol.ensure_converged()?;
        let d = &sol.diagnostics;
        println!("ftcnd z* = {}", fmt_vec(&sol.z));
        println!("ftcnd objective = {:.10e}", problem.objective(&sol.z));
        report_kkt("ftcnd", &sol.z);
        println!(
            "ftcnd converge_time = {:.6e} s, bound = {:.6e} s, within bound: {}",
            d.converge_time.unwrap_or(f64::NAN),
            d.bound_t_f,
            d.within_bound
        );
        ftcnd_z = Some(sol.z);
    }
    if solver != SolverChoice::Ftcnd {
        let exact = qp_oracle::solve_exact(&problem)?;
        let penalized = qp_oracle::solve_penalized(&problem, params.xi)?;
        println!("oracle z* = {}", fmt_vec(&exact.z));
        println!("oracle objective = {:.10e}", problem.objective(&exact.z));
        report_kkt("oracle", &exact.z);
        println!("oracle penalized z* = {}", fmt_vec(&penalized));
        if let Some(z) = &ftcnd_z {
            println!("|z_ftcnd - z_oracle|_inf = {:.3e} (penalized oracle)", (z - &penalized).amax());
        }
    }
    Ok(())
}

fn thread_cap() -> usize {
    std::env::var("MMTRACK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn compare(config: &Path, names: &[String], out: &Path) -> Result<(), Failure> {
    let controllers: Vec<Controller> = names
        .iter()
        .map(|n| n.trim().parse::<Controller>().map_err(Failure::from))
        .collect::<Result<_, _>>()?;
    if controllers.len() < 2 {
        return Err(usage("compare needs at least two controllers"));
    }
    if let Some(c) = controllers.iter().enumerate().find(|(i, c)| controllers[..*i].contains(c)) {
        return Err(usage(format!("controller '{}' listed twice", c.1)));
    }
    let base = load_scenario_file(config)?;
    prepare_out(out)?;

    let run = |c: Controller| -> Result<SimTrace, Error> {
        let mut params = base.params.clone();
        params.controller = c;
        run_closed_loop(&base.model, &params, &base.script)
    };
    let mut traces: Vec<Option<Result<SimTrace, Error>>> = (0..controllers.len()).map(|_| None).collect();
    let cap = thread_cap();
    for (chunk_idx, chunk) in controllers.chunks(cap).enumerate() {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&c| s.spawn(move || run(c))).collect();
            handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
        });
        for (i, r) in results.into_iter().enumerate() {
            traces[chunk_idx * cap + i] = Some(r);
        }
    }
    let traces: Vec<SimTrace> = traces.into_iter().map(|t| t.unwrap()).collect::<Result<_, _>>()?;

    let mut summary = Vec::new();
    for (c, trace) in controllers.iter().zip(&traces) {
        write_file(&out.join(format!("trace_{}.csv", c.name())), &trace.to_csv())?;
        summary.push((c.name(), metrics_for(trace, base.script.duration)?));
    }
    write_file(&out.join("errors.csv"), &side_by_side(&controllers, &traces))?;
    let json: serde_json::Map<String, serde_json::Value> = summary
        .iter()
        .map(|(name, m)| (name.to_string(), serde_json::to_value(m).unwrap()))
        .collect();
    write_file(&out.join("summary.json"), &(serde_json::to_string_pretty(&json).unwrap() + "\n"))?;
    let table = summary_table(&summary);
    write_file(&out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn side_by_side(controllers: &[Controller], traces: &[SimTrace]) -> String {
    let mut out = String::from("time");
    for c in controllers {
        write!(out, ",pos_err_{0},ori_err_{0}", c.name()).unwrap();
    }
    out.push('\n');
    let rows = traces.iter().map(|t| t.records.len()).min().unwrap_or(0);
    for k in 0..rows {
        write!(out, "{:.16e}", traces[0].records[k].time).unwrap();
        for t in traces {
            let r = &t.records[k];
            write!(out, ",{:.16e},{:.16e}", t.position_error(r), t.orientation_error(r)).unwrap();
        }
        out.push('\n');
    }
    out
}

fn summary_table(summary: &[(&str, ErrorMetrics)]) -> String {
    let opt = |v: Option<f64>| v.map_or("never".to_string(), |t| format!("{t:.3}"));
    let mut out = format!(
        "{:<14} {:>14} {:>14} {:>10} {:>10} {:>12} {:>8}\n",
        "controller", "ss_pos_err_m", "ss_ori_err_rad", "t_pos_s", "t_ori_s", "max_viol", "failures"
    );
    for (name, m) in summary {
        writeln!(
            out,
            "{:<14} {:>14.4e} {:>14.4e} {:>10} {:>10} {:>12.3e} {:>8}",
            name,
            m.steady_state_pos_err,
            m.steady_state_ori_err,
            opt(m.pos_convergence_time),
            opt(m.ori_convergence_time),
            m.max_constraint_violation,
            m.solver_failures
        )
        .unwrap();
    }
    out
}

/// One matplotlib script per panel, each reading `trace.csv` beside it.
fn write_plot_scripts(out: &Path, m: usize, n: usize) -> Result<(), Failure> {
    let cols = |prefix: &str, k: usize| -> String {
        let names: Vec<String> = (0..k).map(|i| format!("\"{prefix}_{i}\"")).collect();
        format!("[{}]", names.join(", "))
    };
    let base = m - n;
    let arm = |prefix: &str| -> String {
        let names: Vec<String> = (base..m).map(|i| format!("\"{prefix}_{i}\"")).collect();
        format!("[{}]", names.join(", "))
    };
    let panels: Vec<(&str, String)> = vec![
        (
            "path",
            "fig = plt.figure()\n\
             ax = fig.add_subplot(projection=\"3d\")\n\
             ax.plot(col(\"x\"), col(\"y\"), col(\"z\"), label=\"end effector\")\n\
             ax.plot(col(\"ref_x\"), col(\"ref_y\"), col(\"ref_z\"), \"--\", label=\"reference\")\n\
             ax.set_xlabel(\"x (m)\"); ax.set_ylabel(\"y (m)\"); ax.set_zlabel(\"z (m)\")\n\
             ax.legend()\n\
             fig2, ax2 = plt.subplots()\n\
             ax2.plot(col(\"x\"), col(\"y\"), label=\"end effector\")\n\
             ax2.plot(col(\"ref_x\"), col(\"ref_y\"), \"--\", label=\"reference\")\n\
             ax2.set_xlabel(\"x (m)\"); ax2.set_ylabel(\"y (m)\"); ax2.axis(\"equal\"); ax2.legend()\n\
             fig2.savefig(\"path_2d.png\", dpi=150)\n"
                .to_string(),
        ),
        ("position_error", lines("[\"ex\", \"ey\", \"ez\"]", "position error (m)")),
        ("joint_angles", lines(&arm("q"), "joint angle (rad)")),
        ("joint_velocities", lines(&arm("qd"), "joint velocity (rad/s)")),
        ("torques", lines(&cols("tau", n), "torque (N m)")),
        ("orientation", lines("[\"roll\", \"pitch\", \"yaw\", \"ref_roll\", \"ref_pitch\", \"ref_yaw\"]", "angle (rad)")),
        ("orientation_error", lines("[\"eroll\", \"epitch\", \"eyaw\"]", "orientation error (rad)")),
    ];
    for (name, body) in panels {
        let script = format!(
            "import csv\n\
             import os\n\
             import matplotlib.pyplot as plt\n\
             \n\
             os.chdir(os.path.dirname(os.path.abspath(__file__)))\n\
             with open(\"trace.csv\", newline=\"\") as f:\n\
             \x20   rows = list(csv.DictReader(f))\n\
             \n\
             \n\
             def col(name):\n\
             \x20   return [float(r[name]) for r in rows]\n\
             \n\
             \n\
             t = col(\"time\")\n\
             {body}\
             plt.savefig(\"{name}.png\", dpi=150)\n"
        );
        write_file(&out.join(format!("plot_{name}.py")), &script)?;
    }
    Ok(())
}

fn lines(columns: &str, ylabel: &str) -> String {
    format!(
        "fig, ax = plt.subplots()\n\
         for c in {columns}:\n\
         \x20   ax.plot(t, col(c), label=c)\n\
         ax.set_xlabel(\"time (s)\")\n\
         ax.set_ylabel(\"{ylabel}\")\n\
         ax.legend()\n"
    )
}
