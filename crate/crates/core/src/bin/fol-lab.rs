use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fol_lab::cli::{run_experiment, CostKind, ExperimentConfig, ExperimentId, MethodKind, OtConfig};

#[derive(Parser)]
#[command(name = "fol-lab", version, about = "Decay of correlations and transport experiments on T1 and T2")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cost {
    D,
    DBeta,
    Stable,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Exact,
    Sinkhorn,
}

#[derive(clap::Args)]
struct Run {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    ExpandingDecay(Run),
    AnosovDecay(Run),
    StableCoupling(Run),
    Stability(Run),
    /// Transport between two CSV measures, from flags or from a config.
    Ot {
        #[arg(long, conflicts_with_all = ["mu", "nu"])]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "config")]
        mu: Option<PathBuf>,
        #[arg(long, required_unless_present = "config")]
        nu: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "d")]
        cost: Cost,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, value_enum, default_value = "exact")]
        method: Method,
        #[arg(long, default_value_t = 1e-3)]
        regularization: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn load(id: ExperimentId, run: &Run) -> fol_lab::Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(&run.config)?;
    if cfg.experiment != id {
        return Err(fol_lab::Error::Config(format!(
            "config is for `{}`, not `{}`",
            cfg.experiment.as_str(),
            id.as_str()
        )));
    }
    Ok((cfg, run.out_dir.clone()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("FOL_LAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("fol-lab: cannot size the thread pool: {e}");
        }
    }
    let args = Args::parse();
    let job = match &args.command {
        Command::ExpandingDecay(r) => load(ExperimentId::ExpandingDecay, r).map(|(c, d)| (c, Some(d))),
        Command::AnosovDecay(r) => load(ExperimentId::AnosovDecay, r).map(|(c, d)| (c, Some(d))),
        Command::StableCoupling(r) => load(ExperimentId::StableCoupling, r).map(|(c, d)| (c, Some(d))),
        Command::Stability(r) => load(ExperimentId::Stability, r).map(|(c, d)| (c, Some(d))),
        Command::Ot {
            config,
            mu,
            nu,
            cost,
            beta,
            method,
            regularization,
            out_dir,
        } => match config {
            Some(path) => ExperimentConfig::load(path).map(|c| (c, out_dir.clone())),
            None => {
                let mut cfg = ExperimentConfig::new(ExperimentId::Ot);
                cfg.ot = Some(OtConfig {
                    mu: mu.clone().expect("required by clap"),
                    nu: nu.clone().expect("required by clap"),
                    cost: match cost {
                        Cost::D => CostKind::D,
                        Cost::DBeta => CostKind::DBeta,
                        Cost::Stable => CostKind::Stable,
                    },
                    beta: *beta,
                    method: match method {
                        Method::Exact => MethodKind::Exact,
                        Method::Sinkhorn => MethodKind::Sinkhorn,
                    },
                    regularization: *regularization,
                    half_width: 0.1,
                });
                Ok((cfg, out_dir.clone()))
            }
        },
    };
    let result = job.and_then(|(cfg, dir)| run_experiment(&cfg, dir.as_deref()));
    match result {
        Ok(report) => {
            for t in &report.thresholds {
                println!(
                    "{} {} = {} {} {}",
                    if t.pass { "PASS" } else { "FAIL" },
                    t.name,
                    fol_lab::cli::fmt_f64(t.value),
                    t.relation,
                    fol_lab::cli::fmt_f64(t.limit)
                );
            }
            if let Some(cost) = report.constants.get("cost") {
                println!("cost = {}", fol_lab::cli::fmt_f64(*cost));
            }
            if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("fol-lab: {e}");
            ExitCode::from(2)
        }
    }
}
