//! `lgd`: dataset generation, target precomputation, training, evaluation
//! and the ablation matrix from one command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 diverged run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lgd_core::harness::{self, RunConfig};
use lgd_core::model::ModelKind;
use lgd_core::synth::{self, DatasetManifest, NucleiSource, TargetParams};
use lgd_core::tensor::ParamStore;
use lgd_core::LgdError;

#[derive(Parser, Debug)]
#[command(name = "lgd", version, about = "Latent-guided HER2 scoring toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic paired dataset and its manifest.
    GenData {
        #[arg(long)]
        n_train: usize,
        #[arg(long)]
        n_test: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = synth::DEFAULT_SIZE)]
        size: usize,
    },
    /// Recompute nuclei density and membrane mask targets.
    Precompute {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = lgd_core::stain::DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = lgd_core::stain::DEFAULT_GRID)]
        grid: usize,
        /// Derive density from the IHC counterstain instead of H&E.
        #[arg(long)]
        counterstain: bool,
    },
    /// Pretrain the IHC teacher encoder.
    PretrainTeacher(RunArgs),
    /// Train one variant.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run the full ablation matrix.
    Ablate(RunArgs),
    /// List the parameters of a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<ModelKind>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    teacher_ckpt: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<LgdError> for Failure {
    fn from(e: LgdError) -> Self {
        let code = match e {
            LgdError::Diverged { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(|e| match e {
                LgdError::Format { .. } | LgdError::InvalidArgument(_) => usage(e.to_string()),
                other => other.into(),
            })?,
            None => RunConfig::default(),
        };
        cfg.apply_env().map_err(|e| usage(e.to_string()))?;
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(o) = &self.out_dir {
            cfg.out_dir = o.clone();
        }
        if let Some(t) = &self.teacher_ckpt {
            cfg.teacher_ckpt = Some(t.clone());
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn print_counts(manifest: &DatasetManifest) {
    for (split, counts) in synth::summarize(manifest) {
        let total: usize = counts.iter().sum();
        println!(
            "{split}: {total} pairs (0: {}, 1+: {}, 2+: {}, 3+: {})",
            counts[0], counts[1], counts[2], counts[3]
        );
    }
}

fn print_run(result: &harness::RunResult) {
    println!("run dir: {}", result.run_dir.display());
    println!("checkpoint: {}", result.checkpoint.display());
    println!("{}", result.metrics);
}

fn inspect(path: &Path) -> Result<(), Failure> {
    let params = ParamStore::load(path)?;
    for (name, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        println!("{name}\t[{}]\t{:.6}", shape.join(","), t.norm());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            n_train,
            n_test,
            seed,
            out,
            size,
        } => {
            if n_train < 4 || n_test < 4 {
                return Err(usage("--n-train and --n-test must be at least 4"));
            }
            if size < 16 || size % 8 != 0 {
                return Err(usage("--size must be a multiple of 8 and at least 16"));
            }
            let manifest = synth::build_dataset_sized(n_train, n_test, seed, size, &out)?;
            println!("manifest: {}", manifest.path().display());
            print_counts(&manifest);
        }
        Command::Precompute {
            manifest,
            sigma,
            grid,
            counterstain,
        } => {
            if sigma.is_nan() || sigma <= 0.0 || grid == 0 {
                return Err(usage("--sigma and --grid must be positive"));
            }
            let manifest = DatasetManifest::load(&manifest)?;
            let params = TargetParams {
                sigma,
                grid,
                nuclei_source: if counterstain {
                    NucleiSource::IhcCounterstain
                } else {
                    NucleiSource::HeHematoxylin
                },
            };
            let n = synth::precompute_targets(&manifest, &params)?;
            println!("wrote targets for {n} pairs ({grid}x{grid})");
        }
        Command::PretrainTeacher(args) => {
            let cfg = args.resolve()?;
            print_run(&harness::pretrain_teacher(&cfg)?);
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            print_run(&harness::train(&cfg)?);
        }
        Command::Eval { ckpt, manifest } => {
            let report = harness::evaluate(&ckpt, &manifest)?;
            println!("{}", report.to_json());
        }
        Command::Ablate(args) => {
            let cfg = args.resolve()?;
            let report = harness::run_ablation_matrix(&cfg)?;
            println!("results: {}", report.csv_path.display());
            print!("{}", harness::format_ablation_table(&report.rows));
        }
        Command::Inspect { ckpt } => inspect(&ckpt)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn kebab_case_flags() {
        let cli = Cli::try_parse_from([
            "lgd", "gen-data", "--n-train", "8", "--n-test", "4", "--seed", "7", "--out", "d",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::GenData { n_train: 8, .. }));
        assert!(Cli::try_parse_from(["lgd", "gen-data", "--n-train", "8"]).is_err());
        assert!(Cli::try_parse_from(["lgd", "frobnicate"]).is_err());
    }
}
