//! `bloomcoreset` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 runtime error (for example an empty candidate set). Data goes to
//! stdout, diagnostics to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bloomcoreset::bench::{self, SyntheticSpec};
use bloomcoreset::{
    build_fingerprint, load_matrix, sample_with_filter, write_matrix, Aggregation,
    CountingBloomFilter, EmbeddingMatrix, Error, HashFamily, SamplerConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "bloomcoreset",
    version,
    about = "Bloom-filter coreset sampling over embedding pools"
)]
struct Cli {
    /// Print the resolved configuration to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,

    /// Worker thread cap; 1 runs sequentially.
    #[arg(long, global = true, env = "BLOOMCORESET_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fingerprint a downstream BCF1 matrix into a CBF1 filter file.
    BuildFilter(BuildFilterArgs),
    /// Screen an open-set through a filter and select a budgeted coreset.
    Sample(SampleArgs),
    /// Compare bloom_topk, bloom_only, random and exhaustive sampling on synthetic data.
    Bench(BenchArgs),
    /// Print statistics of a CBF1 filter file.
    Stats(StatsArgs),
    /// Write synthetic downstream and open-set matrices.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
struct BuildFilterArgs {
    #[arg(long)]
    downstream: PathBuf,
    /// Counter count (default: 10000 per 3500 downstream rows).
    #[arg(long)]
    size: Option<usize>,
    /// Hash seeds, comma separated (default: 0..9).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    seeds: Option<Vec<u32>>,
    #[arg(long, default_value_t = 32)]
    counter_bits: u32,
    /// Keep rows as stored instead of scaling them to unit norm.
    #[arg(long)]
    no_normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    filter: PathBuf,
    #[arg(long)]
    downstream: PathBuf,
    #[arg(long)]
    openset: PathBuf,
    /// Coreset size as a fraction of the open-set.
    #[arg(long, default_value_t = 0.01)]
    budget: f64,
    #[arg(long, value_enum, default_value_t = Agg::Max)]
    agg: Agg,
    #[arg(long)]
    no_normalize: bool,
    /// Output JSON document.
    #[arg(long)]
    out: PathBuf,
    /// Optional plain-text file with one selected index per line.
    #[arg(long)]
    indices: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Synthetic data spec as JSON (default: the bundled spec).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec's rng_seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.01)]
    budget: f64,
    #[arg(long, value_enum, default_value_t = Agg::Max)]
    agg: Agg,
    /// Counter count override for the filter.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    filter: PathBuf,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_downstream: PathBuf,
    #[arg(long)]
    out_openset: PathBuf,
    /// Optional cluster label per open-set row, one per line.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Agg {
    Base,
    Sum,
    Max,
}

impl From<Agg> for Aggregation {
    fn from(a: Agg) -> Self {
        match a {
            Agg::Base => Aggregation::Base,
            Agg::Sum => Aggregation::Sum,
            Agg::Max => Aggregation::Max,
        }
    }
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Lib(Error::Config(_)) => 1,
            Failure::Lib(Error::EmptyCandidates { .. }) => 3,
            Failure::Lib(_) => 2,
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
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
            match &f {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Lib(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    if cli.threads == Some(0) {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::BuildFilter(args) => build_filter(args, cli.threads, cli.verbose),
        Command::Sample(args) => sample(args, cli.threads, cli.verbose),
        Command::Bench(args) => run_bench(args, cli.threads, cli.verbose),
        Command::Stats(args) => stats(args),
        Command::Gen(args) => generate(args, cli.verbose),
    }
}

fn load(path: &Path, normalize: bool) -> Result<EmbeddingMatrix, Error> {
    let m = load_matrix(path)?;
    if normalize {
        m.normalize()
    } else {
        Ok(m)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn build_filter(args: BuildFilterArgs, threads: Option<usize>, verbose: bool) -> CliResult {
    let family = match args.seeds {
        Some(seeds) => HashFamily::new(seeds)?,
        None => HashFamily::default(),
    };
    let config = SamplerConfig {
        normalize: !args.no_normalize,
        family,
        filter_size: args.size,
        counter_bits: args.counter_bits,
        threads,
        ..SamplerConfig::default()
    };
    if verbose {
        eprintln!(
            "build-filter: downstream={} out={} {config:?}",
            args.downstream.display(),
            args.out.display()
        );
    }
    let downstream = load(&args.downstream, config.normalize)?;
    let filter = build_fingerprint(&downstream, &config)?;
    filter.save(&args.out)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&filter.stats()).expect("stats serialize")
    );
    Ok(())
}

fn sample(args: SampleArgs, threads: Option<usize>, verbose: bool) -> CliResult {
    let config = SamplerConfig {
        budget_fraction: args.budget,
        aggregation: args.agg.into(),
        normalize: !args.no_normalize,
        threads,
        ..SamplerConfig::default()
    };
    config
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if verbose {
        eprintln!(
            "sample: filter={} downstream={} openset={} {config:?}",
            args.filter.display(),
            args.downstream.display(),
            args.openset.display()
        );
    }
    let start = Instant::now();
    let filter = CountingBloomFilter::load(&args.filter)?;
    let downstream = load_matrix(&args.downstream)?;
    let openset = load_matrix(&args.openset)?;
    let report = sample_with_filter(&filter, &downstream, &openset, &config)?;
    write_file(&args.out, report.to_json())?;
    if let Some(path) = &args.indices {
        write_file(path, report.indices_text())?;
    }
    if report.shortfall() > 0 {
        eprintln!(
            "warning: only {} candidates for a budget of {}",
            report.n_selected, report.budget_count
        );
    }
    println!(
        "n_candidates={} n_selected={} total_ms={:.1}",
        report.n_candidates,
        report.n_selected,
        start.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn read_spec(path: Option<&Path>, seed: Option<u64>) -> Result<SyntheticSpec, Failure> {
    let mut spec = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            SyntheticSpec::from_json(&text).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = seed {
        spec.rng_seed = seed;
    }
    Ok(spec)
}

fn run_bench(args: BenchArgs, threads: Option<usize>, verbose: bool) -> CliResult {
    let spec = read_spec(args.spec.as_deref(), args.seed)?;
    let config = SamplerConfig {
        budget_fraction: args.budget,
        aggregation: args.agg.into(),
        filter_size: args.size,
        threads,
        ..SamplerConfig::default()
    };
    config
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if verbose {
        eprintln!("bench: {spec:?} {config:?}");
    }
    let report = bench::run_bench(&spec, &config)?;
    if let Some(path) = &args.csv {
        write_file(path, report.to_csv())?;
    }
    match args.format {
        Format::Json => println!("{}", report.to_json()),
        Format::Table => print!("{}", report.to_table()),
    }
    Ok(())
}

fn stats(args: StatsArgs) -> CliResult {
    let filter = CountingBloomFilter::load(&args.filter)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&filter.stats()).expect("stats serialize")
    );
    Ok(())
}

fn generate(args: GenArgs, verbose: bool) -> CliResult {
    let spec = read_spec(args.spec.as_deref(), args.seed)?;
    if verbose {
        eprintln!("gen: {spec:?}");
    }
    let data = bench::generate(&spec)?;
    write_matrix(&data.downstream, &args.out_downstream)?;
    write_matrix(&data.openset, &args.out_openset)?;
    if let Some(path) = &args.labels {
        let text: String = data.labels.iter().map(|l| format!("{l}\n")).collect();
        write_file(path, text)?;
    }
    Ok(())
}
