//! `sgnd`: fit, simulate, ΔBIC, bootstrap and density curves from the
//! command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sgnd_core::io::{
    cmd_bootstrap, cmd_delta_bic, cmd_density_curve, cmd_fit, cmd_simulate, parse_criterion, parse_telescope,
    resolve_scenario, write_error, CurveLevels, DensityCurveRequest, Profile, RunConfig,
};
use sgnd_core::{Criterion, Error, Family, Mode, RefitSupport, TelescopeConfig};

#[derive(Parser)]
#[command(name = "sgnd", version, about = "Robust distributional regression with SIC variable selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write estimates, path, summary and residuals.
    Fit(Common),
    /// Run a Monte Carlo study.
    Simulate(SimulateArgs),
    /// BIC increase from removing each variable.
    DeltaBic(DeltaBicArgs),
    /// Bootstrap standard errors.
    Bootstrap(BootstrapArgs),
    /// Model-based conditional density curves.
    DensityCurve(CurveArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Mpr,
    Spr,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Sgnd,
    NormalFixed,
    LaplaceFixed,
}

fn criterion_arg(s: &str) -> Result<Criterion, String> {
    parse_criterion(s).map_err(|e| e.to_string())
}

fn telescope_arg(s: &str) -> Result<TelescopeConfig, String> {
    parse_telescope(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct Common {
    /// Input CSV with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Response column.
    #[arg(long)]
    response: Option<String>,
    /// Covariate columns (comma separated); default is every other column.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    #[arg(long, value_enum, default_value = "mpr")]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "sgnd")]
    family: FamilyArg,
    #[arg(long, default_value_t = 0.15)]
    tau: f64,
    #[arg(long, default_value_t = 0.2)]
    kappa_min: f64,
    /// `bic`, `aic` or a penalty weight.
    #[arg(long, default_value = "bic", value_parser = criterion_arg)]
    criterion: Criterion,
    /// Smoothing schedule as start:end:steps.
    #[arg(long, default_value = "10:1e-4:100", value_parser = telescope_arg)]
    telescope: TelescopeConfig,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Prefix for every output file, e.g. `out/boston_`.
    #[arg(long, default_value = "")]
    out_prefix: String,
    /// Worker threads for replicate, ΔBIC and bootstrap fits.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl Common {
    fn run_config(&self) -> RunConfig {
        RunConfig {
            data_path: self.data.clone(),
            response: self.response.clone(),
            covariates: self.covariates.clone(),
            model: match self.model {
                ModelArg::Mpr => Mode::Mpr,
                ModelArg::Spr => Mode::Spr,
            },
            family: match self.family {
                FamilyArg::Sgnd => Family::Sgnd,
                FamilyArg::NormalFixed => Family::NormalFixed,
                FamilyArg::LaplaceFixed => Family::LaplaceFixed,
            },
            tau: self.tau,
            kappa_min: self.kappa_min,
            criterion: self.criterion,
            telescope: self.telescope,
            seed: self.seed,
            out_prefix: self.out_prefix.clone(),
            threads: self.threads,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Preset (table1-kappa1, table1-kappa1.33, table1-kappa1.67,
    /// table1-kappa2, null) or a scenario JSON file.
    #[arg(long, default_value = "table1-kappa2")]
    scenario: String,
    /// Sample size per replicate.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 100)]
    replicates: usize,
}

#[derive(Args)]
struct DeltaBicArgs {
    #[command(flatten)]
    common: Common,
    /// Restrict to these covariates.
    #[arg(long, value_delimiter = ',')]
    variables: Option<Vec<String>>,
    /// `fixed` keeps the other variables at the full-model support;
    /// `reselect` lets them re-enter during the refit.
    #[arg(long, value_enum, default_value = "fixed")]
    refit: RefitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefitArg {
    Fixed,
    Reselect,
}

#[derive(Args)]
struct BootstrapArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 100)]
    resamples: usize,
}

#[derive(Args)]
struct CurveArgs {
    #[command(flatten)]
    common: Common,
    /// Covariate whose levels define the curves.
    #[arg(long)]
    vary: String,
    /// `quartiles` or comma-separated values.
    #[arg(long, default_value = "quartiles")]
    levels: String,
    /// `median` or name=value pairs, comma separated.
    #[arg(long, default_value = "median")]
    others_at: String,
    #[arg(long, requires = "y_max")]
    y_min: Option<f64>,
    #[arg(long, requires = "y_min")]
    y_max: Option<f64>,
    #[arg(long, default_value_t = 200)]
    points: usize,
    /// Output prefix of an earlier `fit` whose estimates to use.
    #[arg(long)]
    from_fit: Option<String>,
}

fn bad(msg: String) -> Error {
    Error::InvalidConfig(msg)
}

impl CurveArgs {
    fn request(&self) -> Result<DensityCurveRequest, Error> {
        let levels = if self.levels.eq_ignore_ascii_case("quartiles") {
            CurveLevels::Quartiles
        } else {
            CurveLevels::Values(
                self.levels
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| bad(format!("bad level `{v}`"))))
                    .collect::<Result<_, _>>()?,
            )
        };
        let others_at = if self.others_at.eq_ignore_ascii_case("median") {
            Profile::Median
        } else {
            Profile::Values(
                self.others_at
                    .split(',')
                    .map(|kv| {
                        let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("expected name=value, got `{kv}`")))?;
                        let v = v.trim().parse::<f64>().map_err(|_| bad(format!("bad value in `{kv}`")))?;
                        Ok((k.trim().to_string(), v))
                    })
                    .collect::<Result<_, Error>>()?,
            )
        };
        Ok(DensityCurveRequest {
            vary: self.vary.clone(),
            levels,
            others_at,
            y_grid: self.y_min.zip(self.y_max),
            points: self.points,
        })
    }
}

fn run(command: &Command, config: &RunConfig) -> Result<Vec<PathBuf>, Error> {
    match command {
        Command::Fit(_) => {
            let out = cmd_fit(config)?;
            let f = &out.fit;
            eprintln!(
                "bic {:.1}  kappa {:.3}  active beta {}  active alpha {}",
                f.bic,
                f.kappa_hat,
                f.active_beta.iter().filter(|a| **a).count(),
                f.active_alpha.iter().filter(|a| **a).count()
            );
            Ok(out.files)
        }
        Command::Simulate(a) => {
            let sc = resolve_scenario(&a.scenario, a.n, config)?;
            cmd_simulate(config, &sc, a.replicates)
        }
        Command::DeltaBic(a) => {
            let support = match a.refit {
                RefitArg::Fixed => RefitSupport::Fixed,
                RefitArg::Reselect => RefitSupport::Reselect,
            };
            Ok(vec![cmd_delta_bic(config, a.variables.as_deref(), support)?.0])
        }
        Command::Bootstrap(a) => Ok(vec![cmd_bootstrap(config, a.resamples)?]),
        Command::DensityCurve(a) => Ok(vec![cmd_density_curve(config, &a.request()?, a.from_fit.as_deref())?]),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Fit(c) => c,
        Command::Simulate(a) => &a.common,
        Command::DeltaBic(a) => &a.common,
        Command::Bootstrap(a) => &a.common,
        Command::DensityCurve(a) => &a.common,
    };
    let config = common.run_config();
    match run(&cli.command, &config) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", sgnd_core::io::error_json(&e));
            if let Err(w) = write_error(&config, &e) {
                eprintln!("could not write error file: {w}");
            }
            ExitCode::FAILURE
        }
    }
}
