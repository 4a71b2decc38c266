use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use mfg_irl::harness::{ExperimentConfig, Pipeline, StageResult};

#[derive(Parser)]
#[command(
    name = "mfg-irl",
    version,
    about = "Learns network-coupled multi-class LQG mean-field feedback strategies from \
             trajectory data and validates them against the model-based solution"
)]
struct Cli {
    /// Experiment configuration (JSON). Omitted fields take the built-in
    /// three-class defaults; omitting the file uses them all.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for artifacts.
    #[arg(long, global = true, env = "MFG_IRL_OUT", default_value = "out")]
    out_dir: PathBuf,

    /// Overrides the data-collection seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overwrite results already present in the output directory.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the configuration and the standing model assumptions.
    Validate,
    /// Solve the model-based equations and write truth.json.
    Truth,
    /// Generate the exploration ensemble and write ensemble.bin.
    Simulate,
    /// Learn gains from data and write learned.json.
    Learn {
        /// Integrate a previously saved ensemble instead of streaming fresh
        /// runs.
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
    /// Full learn-and-compare pass without saving raw trajectories.
    Evaluate,
    /// Full pipeline: validate, truth, simulate, learn, evaluate.
    Run {
        /// Also save the raw ensemble to ensemble.bin.
        #[arg(long)]
        save_ensemble: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let mut config = match &cli.config {
        Some(path) => match ExperimentConfig::from_file(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: cannot load {}: {e}", path.display());
                return ExitCode::from(1);
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.simulation.seed = seed;
    }
    let pipeline = Pipeline::new(config, cli.out_dir);

    if !matches!(cli.command, Command::Validate) {
        if let Err(e) = pipeline.prepare_out_dir(cli.force) {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    match dispatch(&pipeline, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.stage.exit_code() as u8)
        }
    }
}

fn dispatch(pipeline: &Pipeline, command: &Command) -> StageResult<()> {
    match command {
        Command::Validate => {
            let (pop, report) = pipeline.validate()?;
            print!("{report}");
            println!(
                "configuration ok: {} classes, {} states, {} inputs",
                pop.num_classes(),
                pop.n_total(),
                pop.m_total()
            );
            Ok(())
        }
        Command::Truth => {
            let (pop, _) = pipeline.validate()?;
            let (truth, gains) = pipeline.ground_truth(&pop)?;
            let path = pipeline.out_dir.join("truth.json");
            pipeline
                .stage_write(mfg_irl::harness::Stage::Truth, || {
                    mfg_irl::harness::report::write_truth_json(&truth, &gains, &path)
                })?;
            println!(
                "ground truth solved: {} Kleinman iterations, residuals p {:.2e} / omega {:.2e} / pi {:.2e}",
                truth.iterations, truth.residual_p, truth.residual_omega, truth.residual_pi
            );
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Simulate => {
            let (pop, _) = pipeline.validate()?;
            let ens = pipeline.simulate(&pop)?;
            let path = pipeline.out_dir.join("ensemble.bin");
            pipeline
                .stage_write(mfg_irl::harness::Stage::Simulate, || ens.write_binary(&path))?;
            println!(
                "simulated {} runs of {} recorded steps; wrote {}",
                ens.n_runs(),
                ens.times.len(),
                path.display()
            );
            Ok(())
        }
        Command::Learn { ensemble } => {
            let (pop, _) = pipeline.validate()?;
            let raw = match ensemble {
                Some(path) => {
                    let ens = pipeline.load_ensemble(path)?;
                    pipeline.integrals_from_ensemble(&ens)?
                }
                None => pipeline.integrals_streaming(&pop)?,
            };
            let (excitation, learned, gains) = pipeline.learn(&pop, &raw)?;
            let path = pipeline.out_dir.join("learned.json");
            pipeline.stage_write(mfg_irl::harness::Stage::Learn, || {
                mfg_irl::harness::report::write_learned_json(&learned, &gains, &excitation, &path)
            })?;
            print!("{excitation}");
            println!("converged in {} iterations; wrote {}", learned.iterations(), path.display());
            Ok(())
        }
        Command::Evaluate => finish(pipeline, pipeline.run(false)?),
        Command::Run { save_ensemble } => finish(pipeline, pipeline.run(*save_ensemble)?),
    }
}

fn finish(
    pipeline: &Pipeline,
    outcome: mfg_irl::harness::PipelineOutcome,
) -> StageResult<()> {
    print!("{}", outcome.excitation);
    println!(
        "learned in {} iterations; final error {:.4e} (Frobenius), {:.4e} (max-abs)",
        outcome.report.iterations,
        outcome.report.final_error_frobenius,
        outcome.report.final_error_max
    );
    for label in ["Omega[1,1]", "2*Omega[1,2]", "L_P_1[1,1]", "L_P_1[1,2]"] {
        if let Some(e) = outcome.report.entry_table.iter().find(|e| e.label == label) {
            println!(
                "  {}: learned {:.4} truth {:.4} |err| {:.4}",
                e.label, e.learned, e.truth, e.abs_error
            );
        }
    }
    println!("artifacts in {}", pipeline.out_dir.display());
    Ok(())
}
