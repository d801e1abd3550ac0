use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSub};
use qproc::cli::{execute, validate, ExperimentConfig, Subcommand};

#[derive(Parser)]
#[command(name = "qproc", version, about = "Decoherence-functional experiments on phase-space histories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "quad-order")]
    quad_order: Option<usize>,
    #[arg(long)]
    cutoff: Option<usize>,
}

#[derive(ClapSub)]
enum Command {
    /// Axiom defects of the decoherence functional.
    Axioms(Common),
    /// One functional value on both routes.
    Decfun(Common),
    /// Two-beam interference scan and phase fit.
    Interfere(Common),
    /// Conditional pairs on a pointer field.
    Condition(Common),
    /// Two-point kernel tables.
    Correlate(Common),
    /// Closed-time-path functional against its Gaussian form.
    Ctp(Common),
    /// Chapman-Kolmogorov composition defect.
    #[command(name = "ck-check")]
    CkCheck(Common),
    /// Propagator symmetries and time reversal.
    Reversibility(Common),
    /// Subspace and spectrum from propagator tables.
    Reconstruct(Common),
    /// Wigner table and cell functional.
    Wigner(Common),
    /// Report every config violation without running.
    Validate(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig, String> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).map_err(|d| d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("\n"))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(q) = c.quad_order {
        cfg.numeric.quad_order = q;
    }
    if let Some(n) = c.cutoff {
        cfg.engine.cutoff = n;
    }
    if let Some(o) = &c.out {
        cfg.output.dir = o.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (sub, common) = match &cli.command {
        Command::Axioms(c) => (Some(Subcommand::Axioms), c),
        Command::Decfun(c) => (Some(Subcommand::Decfun), c),
        Command::Interfere(c) => (Some(Subcommand::Interfere), c),
        Command::Condition(c) => (Some(Subcommand::Condition), c),
        Command::Correlate(c) => (Some(Subcommand::Correlate), c),
        Command::Ctp(c) => (Some(Subcommand::Ctp), c),
        Command::CkCheck(c) => (Some(Subcommand::CkCheck), c),
        Command::Reversibility(c) => (Some(Subcommand::Reversibility), c),
        Command::Reconstruct(c) => (Some(Subcommand::Reconstruct), c),
        Command::Wigner(c) => (Some(Subcommand::Wigner), c),
        Command::Validate(c) => (None, c),
    };
    let cfg = match load(common) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("config error:\n{msg}");
            return ExitCode::from(2);
        }
    };
    let Some(sub) = sub else {
        let d = validate(&cfg);
        println!("{}", serde_json::to_string_pretty(&d).expect("diagnostics serialize"));
        return ExitCode::from(if d.is_empty() { 0 } else { 2 });
    };
    match execute(sub, &cfg, &cfg.output.dir) {
        Ok(code) => {
            let path = cfg.output.dir.join("result.json");
            eprintln!("{sub}: exit {code}, envelope at {}", path.display());
            ExitCode::from(code as u8)
        }
        Err(e) => {
            eprintln!("cannot write outputs: {e}");
            ExitCode::from(2)
        }
    }
}
