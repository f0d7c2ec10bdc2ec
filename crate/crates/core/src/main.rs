use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stokes_lab::harness::experiments::{is_solver_error, solve_instance};
use stokes_lab::harness::{run, write_outputs, RunConfig, EXPERIMENTS};
use stokes_lab::Result;

#[derive(Parser)]
#[command(name = "stokes-lab", version, about = "Layered-coefficient Stokes solver and estimate verification suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file overlaid on the experiment defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV, manifest and solution files
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Grid size(s), comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    /// Integrability exponent(s), comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    q: Option<Vec<f64>>,
    /// Interface count(s), comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    jumps: Option<Vec<usize>>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Solve one layered instance and write the solution
    Solve,
    /// L₂ estimate across interface counts
    L2,
    /// L_q estimate across interface counts and exponents
    Lq,
    /// Interface jumps of D₁u₂, U and D_{x'}u for layered shear
    Interface,
    /// Mean-oscillation decay of (D_{x'}u, U)
    Oscillation,
    /// Caccioppoli ratio against the constant-coefficient baseline
    Caccioppoli,
    /// Pressure-oscillation ratio against the constant-coefficient baseline
    PressureOsc,
    /// Divergence-equation solvability and its constant
    Divergence,
    /// Fefferman–Stein and Hardy–Littlewood constants
    SharpMaximal,
    /// Solver equivalence, convergence order and eigenvalue checks
    Oracle,
    /// Dyadic filtration and Lipschitz-constant checks
    Geometry,
    /// Every experiment in turn
    All,
}

impl Command {
    fn experiment(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::L2 => "l2",
            Command::Lq => "lq",
            Command::Interface => "interface",
            Command::Oscillation => "oscillation",
            Command::Caccioppoli => "caccioppoli",
            Command::PressureOsc => "pressure-osc",
            Command::Divergence => "divergence",
            Command::SharpMaximal => "sharp-maximal",
            Command::Oracle => "oracle",
            Command::Geometry => "geometry",
            Command::All => "all",
        }
    }
}

fn configure(cli: &Cli, name: &str) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_toml(name, &std::fs::read_to_string(path)?)?,
        None => RunConfig::for_experiment(name)?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(grid) = &cli.grid {
        cfg.grids = grid.clone();
    }
    if let Some(q) = &cli.q {
        cfg.q = q.clone();
    }
    if let Some(jumps) = &cli.jumps {
        cfg.jumps = jumps.clone();
    }
    if let Some(out) = &cli.out {
        cfg.output = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli, name: &str) -> Result<bool> {
    let cfg = configure(cli, name)?;
    let report = run(&cfg)?;
    println!("{:<14} {}  ({})", name, if report.pass { "PASS" } else { "FAIL" }, report.criterion);
    for (k, v) in &report.summary {
        println!("    {k} = {v:.4e}");
    }
    if let Some(dir) = &cfg.output {
        let path = write_outputs(dir, &cfg, &report)?;
        println!("    wrote {}", path.display());
        if name == "solve" {
            let (field, _) = solve_instance(&cfg)?;
            let path = dir.join("solution.lstf");
            field.write_to(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
            println!("    wrote {}", path.display());
        }
    }
    Ok(report.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let names: Vec<&str> = match cli.command {
        Command::All => EXPERIMENTS.iter().copied().filter(|n| *n != "solve").collect(),
        c => vec![c.experiment()],
    };
    let mut all_pass = true;
    for name in names {
        match execute(&cli, name) {
            Ok(pass) => all_pass &= pass,
            Err(e) => {
                eprintln!("{name}: {e}");
                return ExitCode::from(if is_solver_error(&e) { 3 } else { 1 });
            }
        }
    }
    ExitCode::from(if all_pass { 0 } else { 2 })
}
