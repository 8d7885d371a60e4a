use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use streamfpca::eval::{self, FpcTruth};
use streamfpca::fit::{fit, FitConfig};
use streamfpca::modelfile::ModelFile;
use streamfpca::simgen::{self, Setting, SimTruth};
use streamfpca::stream::{read_subjects, write_ndjson, DataSource};
use streamfpca::tuning::write_tuning_csv;
use streamfpca::{FpcaError, Result, Subject64};

const WORKERS_ENV: &str = "STREAMFPCA_WORKERS";

#[derive(Parser)]
#[command(
    name = "streamfpca",
    version,
    about = "Streaming functional PCA on the generalized Stiefel manifold"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a dataset with known components.
    Simulate {
        /// `1d` or `2d`.
        #[arg(long)]
        setting: Setting,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// NDJSON output, one subject per line.
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth sidecar; defaults to `<out stem>.truth.json`.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit the top components of a dataset.
    Fit {
        /// NDJSON or CSV (`id,loc_1..loc_d,y`) data.
        #[arg(long)]
        data: PathBuf,
        /// `key = value` configuration file.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Starting defaults when no configuration file is given.
        #[arg(long, default_value = "1d")]
        preset: String,
        #[arg(long)]
        model_out: PathBuf,
        /// Per-step trace of the smoothed gradient norm and variances.
        #[arg(long)]
        metrics_out: PathBuf,
        /// Every scored tuning candidate; defaults to `<model stem>.tuning.csv`.
        #[arg(long)]
        tuning_out: Option<PathBuf>,
        #[command(flatten)]
        overrides: ConfigFlags,
    },
    /// Compare a fitted model with known components.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// `builtin:1d`, `builtin:2d` or a truth sidecar written by `simulate`.
        #[arg(long)]
        truth: String,
        /// Grid points per axis.
        #[arg(long)]
        grid: Option<usize>,
        /// JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Tabulate the fitted components on a regular grid.
    ExportFpc {
        #[arg(long)]
        model: PathBuf,
        /// Grid points per axis.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// One `--kebab-case` flag per configuration key, applied over the file or preset.
#[derive(Debug, Clone, Default)]
struct ConfigFlags(Vec<(&'static str, String)>);

impl FromArgMatches for ConfigFlags {
    fn from_arg_matches(matches: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        Ok(Self(
            FitConfig::KEYS
                .iter()
                .filter_map(|k| matches.get_one::<String>(k).map(|v| (*k, v.clone())))
                .collect(),
        ))
    }

    fn update_from_arg_matches(
        &mut self,
        matches: &ArgMatches,
    ) -> std::result::Result<(), clap::Error> {
        *self = Self::from_arg_matches(matches)?;
        Ok(())
    }
}

impl Args for ConfigFlags {
    fn augment_args(cmd: Command) -> Command {
        FitConfig::KEYS.iter().fold(cmd, |cmd, key| {
            cmd.arg(
                Arg::new(*key)
                    .long(key.replace('_', "-"))
                    .value_name("VALUE")
                    .help_heading("Configuration overrides"),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        FpcaError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn simulate(
    setting: Setting,
    n: usize,
    seed: u64,
    out: &Path,
    truth: Option<PathBuf>,
) -> Result<()> {
    let (subjects, sim) = simgen::generate::<f64>(setting, n, seed)?;
    write_ndjson(&subjects, create(out)?)?;
    let truth = truth.unwrap_or_else(|| sibling(out, ".truth.json"));
    sim.write(&truth)?;
    log::info!(
        "wrote {n} subjects to {} and truth to {}",
        out.display(),
        truth.display()
    );
    Ok(())
}

fn load_config(config: Option<&Path>, preset: &str, overrides: &ConfigFlags) -> Result<FitConfig> {
    let mut cfg = match config {
        Some(path) => FitConfig::parse(&std::fs::read_to_string(path)?)?,
        None => FitConfig::preset(preset)?,
    };
    for (key, value) in &overrides.0 {
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct FitArgs<'a> {
    data: &'a Path,
    config: FitConfig,
    model_out: &'a Path,
    metrics_out: &'a Path,
    tuning_out: PathBuf,
}

fn run_fit(args: FitArgs) -> Result<()> {
    let cfg = &args.config;
    let source = DataSource {
        dims: Some(cfg.dims()),
        domain: Some(cfg.domain.clone()),
        ..DataSource::new(args.data)
    };
    let subjects: Vec<Subject64> = read_subjects(&source)?;
    let output = fit(&subjects, cfg)?;
    ModelFile::from_fit(&output, cfg).save(args.model_out)?;
    let mut metrics = create(args.metrics_out)?;
    eval::write_metrics_csv(&eval::diagnostics(&output.history)?, &mut metrics)?;
    metrics.flush()?;
    let mut tuning = create(&args.tuning_out)?;
    write_tuning_csv(&output.tuning_log, &mut tuning)?;
    tuning.flush()?;
    log::info!(
        "fitted {} subjects in {} steps, τ = {:e}",
        output.n_subjects,
        output.steps,
        output.tau
    );
    Ok(())
}

fn truth_from(source: &str) -> Result<SimTruth> {
    match source.strip_prefix("builtin:") {
        Some(name) => Ok(SimTruth::new(name.parse()?, 0, 0)),
        None => SimTruth::read(Path::new(source)),
    }
}

fn run_eval(model: &Path, truth: &str, grid: Option<usize>, report: Option<&Path>) -> Result<()> {
    let model = ModelFile::<f64>::load(model)?;
    let truth = truth_from(truth)?;
    let estimate = model.estimate()?;
    let resolution = grid.unwrap_or_else(|| eval::default_resolution(truth.dims()));
    let rmse = eval::fpc_rmse(&estimate, &truth, Some(resolution))?;
    for (r, e) in rmse.iter().enumerate() {
        println!(
            "phi_{} rmse {e:.6} lambda {:.6} (true {:.6})",
            r + 1,
            model.lambda[r],
            truth.eigenvalue(r)
        );
    }
    if let Some(path) = report {
        let doc = serde_json::json!({
            "setting": truth.setting.name(),
            "grid": resolution,
            "components": rmse.len(),
            "rmse": rmse,
            "lambda": model.lambda.iter().collect::<Vec<_>>(),
            "lambda_true": (0..rmse.len()).map(|r| truth.eigenvalue(r)).collect::<Vec<_>>(),
            "sigma2": model.sigma2,
            "tau": model.tau,
        });
        let mut out = create(path)?;
        serde_json::to_writer_pretty(&mut out, &doc).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        out.flush()?;
    }
    Ok(())
}

fn export_fpc(model: &Path, grid: Option<usize>, out: &Path) -> Result<()> {
    let model = ModelFile::<f64>::load(model)?;
    let estimate = model.estimate()?;
    let domain = model.domain.clone();
    let d = domain.len();
    let resolution = grid.unwrap_or_else(|| eval::default_resolution(d));
    if resolution < 2 {
        return Err(FpcaError::Argument(
            "grid needs at least 2 points per axis".into(),
        ));
    }
    let points = eval::grid(&domain, resolution);
    let values = estimate.components_on(&points)?;
    let mut w = create(out)?;
    let header: Vec<String> = (1..=d)
        .map(|i| format!("loc_{i}"))
        .chain((1..=model.rank()).map(|r| format!("fpc_{r}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (i, x) in points.chunks(d).enumerate() {
        let row: Vec<String> = x
            .iter()
            .copied()
            .chain(values.row(i).iter().copied())
            .map(|v| format!("{v:e}"))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn init_workers() -> Result<()> {
    let Ok(value) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            FpcaError::Config(format!(
                "{WORKERS_ENV}: expected a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| FpcaError::Config(format!("{WORKERS_ENV}: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_workers()?;
    match cli.command {
        Cmd::Simulate {
            setting,
            n,
            seed,
            out,
            truth,
        } => simulate(setting, n, seed, &out, truth),
        Cmd::Fit {
            data,
            config,
            preset,
            model_out,
            metrics_out,
            tuning_out,
            overrides,
        } => run_fit(FitArgs {
            data: &data,
            config: load_config(config.as_deref(), &preset, &overrides)?,
            tuning_out: tuning_out.unwrap_or_else(|| sibling(&model_out, ".tuning.csv")),
            model_out: &model_out,
            metrics_out: &metrics_out,
        }),
        Cmd::Eval {
            model,
            truth,
            grid,
            report,
        } => run_eval(&model, &truth, grid, report.as_deref()),
        Cmd::ExportFpc { model, grid, out } => export_fpc(&model, grid, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
