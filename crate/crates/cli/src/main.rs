use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dptwopart::data::load_dataset;
use dptwopart::diagnostics::{format_psrf, format_table};
use dptwopart::error::Error;
use dptwopart::run::{
    format_confusion, run_diagnose, run_fit, run_predict, FitRequest, GridSpec, PredictRequest, SplitRule,
};
use dptwopart::simulate::{format_true_densities, format_truth, generator_to_text, parse_generator, simulate};
use dptwopart::{Dataset, GeneratorSpec};

/// Semiparametric Bayesian two-part model for semicontinuous data.
#[derive(Parser)]
#[command(name = "dptwopart", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run both samplers and write a run directory.
    Fit {
        /// Delimited data file with header (id, y, w1.., x1.., area, in_sample).
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
        /// `key = value` overrides; a complete file replaces the dataset defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fit a seeded random fraction of the units (1/3 when given
        /// without a value) and hold out the rest.
        #[arg(long, num_args = 0..=1, default_missing_value = "0.3333333333333333")]
        split: Option<f64>,
    },
    /// Predictive surfaces, classification and area tables from a run.
    Predict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `auto`, `auto:<points>` or `<lo>:<hi>:<points>`.
        #[arg(long, default_value = "auto")]
        grid: GridSpec,
        #[arg(long, default_value_t = 0.5)]
        cutoff: f64,
        /// Also write the tables behind the reference figures.
        #[arg(long)]
        reference_figure: bool,
    },
    /// Rewrite the posterior table and PSRF report of a run.
    Diagnose {
        #[arg(long)]
        run: PathBuf,
    },
    /// Draw a synthetic dataset with its ground truth.
    Simulate {
        /// Generator description; the standard two-expert design when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Units, overriding the generator file.
        #[arg(long)]
        n: Option<usize>,
    },
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load(path: &Path) -> Result<Dataset, Error> {
    load_dataset(path, None)
}

fn fit(data: &Path, out: &Path, config: Option<&Path>, seed: Option<u64>, split: Option<f64>) -> Result<(), Error> {
    let dataset = load(data)?;
    println!("{}", dataset.summary_line());
    let text = config.map(read).transpose()?;
    let split = match split {
        Some(f) => SplitRule::Fraction(f),
        None if dataset.in_sample.is_some() => SplitRule::InSample,
        None => SplitRule::All,
    };
    let req = FitRequest {
        config_text: text.as_deref(),
        seed,
        split,
    };
    let report = run_fit(&dataset, &req, out)?;
    println!("fitted {} units; run written to {}", report.fit_units, out.display());
    print!("{}", format_table(&report.posterior.table()?));
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn predict(
    run: &Path,
    data: &Path,
    out: Option<&Path>,
    grid: GridSpec,
    cutoff: f64,
    reference_figure: bool,
) -> Result<(), Error> {
    let dataset = load(data)?;
    let out = out.unwrap_or(run);
    let req = PredictRequest {
        grid,
        cutoff,
        reference_figure,
    };
    let report = run_predict(run, &dataset, &req, out)?;
    let held = report.fitted.iter().filter(|&&f| !f).count();
    println!(
        "{} units predicted ({held} held out); tables written to {}",
        report.surfaces.len(),
        out.display()
    );
    if let Some(c) = &report.confusion {
        print!("{}", format_confusion(c));
    }
    Ok(())
}

fn diagnose(run: &Path) -> Result<(), Error> {
    let (table, psrf) = run_diagnose::<f64>(run)?;
    print!("{}", format_table(&table));
    println!();
    print!("{}", format_psrf(&psrf));
    Ok(())
}

fn simulate_cmd(config: Option<&Path>, out: &Path, seed: Option<u64>, n: Option<usize>) -> Result<(), Error> {
    let mut spec: GeneratorSpec = match config {
        Some(p) => parse_generator(&read(p)?)?,
        None => GeneratorSpec::standard(800, 1),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = n {
        spec.n = n;
    }
    let (data, truth) = simulate(&spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut buf = Vec::new();
    dptwopart::data::write_dataset(&mut buf, &data).map_err(|e| Error::io(out.join("data.tsv"), e))?;
    fs::write(out.join("data.tsv"), buf).map_err(|e| Error::io(out.join("data.tsv"), e))?;
    write(&out.join("truth.tsv"), &format_truth(&truth))?;
    write(&out.join("generator.txt"), &generator_to_text(&spec))?;
    let probes: Vec<Vec<f64>> = spec.experts.iter().map(|e| e.center.clone()).collect();
    let hi = data.y.as_ref().map_or(1.0, |y| y.iter().copied().fold(0.0, f64::max)) * 1.2;
    let grid: Vec<f64> = (0..=200).map(|i| hi * i as f64 / 200.0).skip(1).collect();
    write(&out.join("true_densities.tsv"), &format_true_densities(&spec, &probes, &grid))?;
    println!("{}; written to {}", data.summary_line(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit {
            data,
            out,
            config,
            seed,
            split,
        } => fit(data, out, config.as_deref(), *seed, *split),
        Command::Predict {
            run,
            data,
            out,
            grid,
            cutoff,
            reference_figure,
        } => predict(run, data, out.as_deref(), *grid, *cutoff, *reference_figure),
        Command::Diagnose { run } => diagnose(run),
        Command::Simulate { config, out, seed, n } => simulate_cmd(config.as_deref(), out, *seed, *n),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Sampler(_) | Error::Dist(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use dptwopart::run::DEFAULT_SPLIT;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn split_flag_defaults_to_one_third() {
        let cli = Cli::try_parse_from(["dptwopart", "fit", "--data", "d", "--out", "o", "--split"]).unwrap();
        match cli.command {
            Command::Fit { split, .. } => assert_eq!(split, Some(DEFAULT_SPLIT)),
            _ => unreachable!(),
        }
    }
}
