//! `spikemix` command-line front end.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use spikemix::bench::{bench_variance, write_variance_csv, Method, VarianceGrid};
use spikemix::dpm::{CsmcEstimator, GibbsState, Sampler};
use spikemix::io::{read_trace_file, write_cooccurrence_csv, ClusteringFile, Dataset, TraceWriter};
use spikemix::oracle::{grid_loglik, GridSpec};
use spikemix::postsel::{mean_cooccurrence, select};
use spikemix::simgen::{generate_synthetic, SimConfig};
use spikemix::ssm::ClusterParams;
use spikemix::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "spikemix", version, about = "Dirichlet-process clustering of binomial state-space time series")]
struct Cli {
    /// Worker threads for likelihood evaluations; results do not depend on it.
    #[arg(long, global = true, env = "SPIKEMIX_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the labeled synthetic dataset.
    Simulate {
        /// Generator settings (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the Gibbs sampler and stream one trace record per iteration.
    Infer {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pick the posterior sample closest to the mean co-occurrence matrix.
    Select {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        burnin: usize,
        /// Dataset supplying series ids; indices are used without it.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Clustering JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Mean co-occurrence CSV path [default: OUT with a .csv extension].
        #[arg(long)]
        cooccurrence: Option<PathBuf>,
    },
    /// Replicate variance of the likelihood estimators over a (mu, log psi) grid.
    BenchVariance {
        #[arg(long)]
        data: PathBuf,
        /// Series index within the dataset.
        #[arg(long, default_value_t = 0)]
        series: usize,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [-1.0, 0.0, 1.0])]
        grid_mu: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [-12.0, -8.0, -4.0])]
        grid_logpsi: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, value_enum, default_value_t = MethodChoice::Both)]
        method: MethodChoice,
        #[arg(long, default_value_t = 1024)]
        bpf_particles: usize,
        #[arg(long, default_value_t = 64)]
        csmc_particles: usize,
        #[arg(long, default_value_t = 3)]
        csmc_rounds: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Reuse one random stream for every replicate (variance is then zero).
        #[arg(long, hide = true)]
        fixed_stream: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deterministic grid log-likelihood of one series.
    OracleLoglik {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        series: usize,
        #[arg(long, allow_negative_numbers = true)]
        mu: f64,
        #[arg(long, allow_negative_numbers = true)]
        log_psi: f64,
        #[arg(long, default_value_t = 2001)]
        grid_points: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodChoice {
    Bpf,
    Csmc,
    Both,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": first } }));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            eprintln!("{}", json!({ "error": { "kind": kind, "message": e.to_string() } }));
            ExitCode::from(code)
        }
    }
}

/// Error kind and exit status: 2 for numerical failures, 1 otherwise.
fn classify(e: &Error) -> (&'static str, u8) {
    if e.is_numerical() {
        ("numerical", 2)
    } else {
        ("config", 1)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let cfg: SimConfig = match config {
                Some(path) => read_json(&path)?,
                None => SimConfig::default(),
            };
            generate_synthetic(&cfg, seed)?.write(&out)
        }
        Command::Infer { data, config, out, seed } => {
            let mut cfg = match config {
                Some(path) => RunConfig::read(&path)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = data.or(cfg.data.clone()).ok_or_else(|| missing("--data"))?;
            let out = out.or(cfg.out.clone()).ok_or_else(|| missing("--out"))?;
            let workers = cli.workers.or(cfg.workers);
            with_workers(workers, || infer(&cfg, &data, &out))
        }
        Command::Select { trace, burnin, data, out, cooccurrence } => {
            let samples = read_trace_file(&trace)?;
            let n = samples.first().map_or(0, |s| s.state.assignments.len());
            let ids = match data {
                Some(path) => Dataset::read(&path)?.ids(),
                None => (0..n).map(|i| i.to_string()).collect(),
            };
            let sel = select(&samples, burnin)?;
            let matrix = mean_cooccurrence(&samples, burnin)?;
            let csv_path = cooccurrence.unwrap_or_else(|| out.with_extension("csv"));
            let file = create(&csv_path)?;
            write_cooccurrence_csv(BufWriter::new(file), &ids, &matrix)?;
            ClusteringFile::new(sel, ids, burnin)?.write(&out)
        }
        Command::BenchVariance {
            data,
            series,
            grid_mu,
            grid_logpsi,
            reps,
            method,
            bpf_particles,
            csmc_particles,
            csmc_rounds,
            seed,
            fixed_stream,
            out,
        } => {
            let ds = Dataset::read(&data)?;
            let obs = ds.observations()?.into_iter().nth(series).ok_or_else(|| bad_index(series, ds.series.len()))?;
            let mut methods = Vec::new();
            if method != MethodChoice::Csmc {
                methods.push(Method::Bpf { particles: bpf_particles });
            }
            if method != MethodChoice::Bpf {
                methods.push(Method::Csmc { particles: csmc_particles, rounds: csmc_rounds });
            }
            let grid = VarianceGrid { mu: grid_mu, log_psi: grid_logpsi, replicates: reps, methods };
            grid.validate()?;
            let rows = with_workers(cli.workers, || bench_variance(&obs, &grid, seed, fixed_stream))?;
            write_variance_csv(BufWriter::new(create(&out)?), &rows)
        }
        Command::OracleLoglik { data, series, mu, log_psi, grid_points } => {
            let ds = Dataset::read(&data)?;
            let obs = ds.observations()?.into_iter().nth(series).ok_or_else(|| bad_index(series, ds.series.len()))?;
            let theta = ClusterParams::new(mu, log_psi)?;
            let ll = grid_loglik(&obs, &theta, &GridSpec::covering(&obs, &theta, grid_points)?)?;
            println!("{ll}");
            Ok(())
        }
    }
}

fn infer(cfg: &RunConfig, data_path: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::read(data_path)?;
    if let Some(d) = cfg.domain {
        if d != ds.domain {
            return Err(Error::InvalidParameter(format!(
                "config expects a {d:?} domain dataset but {} is {:?}",
                data_path.display(),
                ds.domain
            )));
        }
    }
    let data = ds.observations()?;
    let est = CsmcEstimator::from_hyper(&cfg.hyper);
    let sampler = Sampler::new(&data, &cfg.hyper, &est, cfg.seed)?;
    let mut writer = TraceWriter::new(BufWriter::new(create(out)?));
    sampler.run_with(GibbsState::initial(data.len(), &cfg.hyper.base, cfg.seed), |s| writer.write(s))?;
    writer.into_inner().flush()?;
    Ok(())
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        None => f(),
        Some(0) => Err(Error::InvalidParameter("workers must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .install(f),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { line: e.line(), message: format!("{}: {e}", path.display()) })
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::from(e).context(path.display().to_string()))
}

fn missing(flag: &str) -> Error {
    Error::InvalidParameter(format!("{flag} is required (or set it in the config)"))
}

fn bad_index(index: usize, len: usize) -> Error {
    Error::InvalidParameter(format!("series index {index} out of range for {len} series"))
}
