use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cthmm_dp::data::Dataset;
use cthmm_dp::io::{
    dataset_fingerprint, read_checkpoint, read_dataset, read_samples, read_truth, write_checkpoint, write_dataset,
    write_summary, write_truth, Checkpoint, ConfigFile, IoError, RunManifest, SampleWriter, SummaryOptions,
};
use cthmm_dp::sampler::{Sampler, SamplerError, Variant};
use cthmm_dp::sim::{generate_dataset, SimError};

/// Environment variable holding the worker-thread count.
const THREADS_ENV: &str = "CTHMM_THREADS";

#[derive(Parser)]
#[command(name = "cthmm-dp", version, about = "Cluster irregularly sampled trajectories with a DP mixture of CTHMMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known clusters.
    Simulate(SimulateArgs),
    /// Run the sampler on a dataset.
    Fit(FitArgs),
    /// Summarize posterior samples.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// ex1-poisson, ex1-gaussian, ex2 or ex3.
    #[arg(long)]
    preset: Option<String>,
    /// TOML file with a [simulation] section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Observations per subject.
    #[arg(long = "T", value_name = "T")]
    num_observations: Option<usize>,
    #[arg(long)]
    subjects_per_cluster: Option<usize>,
    /// Residual standard deviation of Gaussian presets.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    QOnly,
}

#[derive(Args)]
struct FitArgs {
    /// Long-format CSV with subject_id,time,outcome[,covariate_level].
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the fitting defaults of a named design.
    #[arg(long)]
    preset: Option<String>,
    /// Known residual standard deviation for Gaussian outcomes.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    burn_in: Option<u64>,
    #[arg(long)]
    thin: Option<u64>,
    #[arg(long)]
    restricted_scans: Option<usize>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    /// Continue from a checkpoint; only --iterations may change.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Samples file or a fit output directory.
    #[arg(long)]
    samples: PathBuf,
    /// Truth sidecar from `simulate`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Dataset, used to label assignments with subject ids.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 15.0)]
    horizon: f64,
    #[arg(long, default_value_t = 61)]
    grid_points: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Config(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let m = e.to_string();
        match e {
            IoError::UnknownPreset(_) | IoError::ConfigParse(_) => Failure::Config(m),
            IoError::DataParse { .. } | IoError::Data(_) | IoError::SampleParse { .. } | IoError::EmptySamples(_) => {
                Failure::Data(m)
            }
            _ => Failure::Runtime(m),
        }
    }
}

impl From<SamplerError> for Failure {
    fn from(e: SamplerError) -> Self {
        let m = e.to_string();
        match e {
            SamplerError::InvalidConfig(_) => Failure::Config(m),
            SamplerError::DataModelMismatch(_) | SamplerError::Data(_) => Failure::Data(m),
            _ => Failure::Runtime(m),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let m = e.to_string();
        match e {
            SimError::UnknownPreset(_) | SimError::InvalidConfig(_) => Failure::Config(m),
            _ => Failure::Runtime(m),
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn load_config(path: Option<&Path>, preset: Option<&str>, sigma: Option<f64>) -> Result<ConfigFile, Failure> {
    match (path, preset) {
        (Some(p), _) => {
            let mut c = ConfigFile::read(p).map_err(|e| match e {
                IoError::Io { .. } => Failure::Config(e.to_string()),
                other => other.into(),
            })?;
            if let Some(name) = preset {
                c.simulation.preset = Some(name.to_string());
            }
            Ok(c)
        }
        (None, Some(name)) => Ok(ConfigFile::for_preset(name, sigma)?),
        (None, None) => Ok(ConfigFile::default()),
    }
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.as_deref(), args.preset.as_deref(), args.sigma)?;
    let sim = &mut config.simulation;
    if sim.preset.is_none() && sim.custom.is_none() {
        return Err(Failure::Config("give --preset or a config with a [simulation] section".into()));
    }
    if args.num_observations.is_some() {
        sim.num_observations = args.num_observations;
    }
    if args.subjects_per_cluster.is_some() {
        sim.subjects_per_cluster = args.subjects_per_cluster;
    }
    if args.sigma.is_some() {
        sim.sigma = args.sigma;
    }
    if args.seed.is_some() {
        sim.seed = args.seed;
    }
    let design = sim.build()?;
    let start = Instant::now();
    let (data, truth) = generate_dataset(&design)?;
    let elapsed = start.elapsed().as_secs_f64();

    let data_path = args.out.join("data.csv");
    let truth_path = args.out.join("truth.json");
    let config_path = args.out.join("config.toml");
    write_dataset(&data_path, &data)?;
    write_truth(&truth_path, &truth)?;
    cthmm_dp::io::write_atomic(&config_path, config.to_toml().as_bytes())?;

    let mut manifest = RunManifest::new("simulate", design.seed, &design, dataset_fingerprint(&data));
    manifest.timings.insert("simulate".into(), elapsed);
    manifest.record_outputs([data_path.as_path(), truth_path.as_path(), config_path.as_path()])?;
    manifest.write(&args.out.join("manifest.json"))?;
    println!("wrote {} subjects to {}", data.len(), data_path.display());
    Ok(())
}

fn fit_config(args: &FitArgs, data: &Dataset) -> Result<(ConfigFile, cthmm_dp::sampler::SamplerConfig), Failure> {
    let mut file = load_config(args.config.as_deref(), args.preset.as_deref(), args.sigma)?;
    if let Some(s) = args.sigma {
        file.model.sigma = s;
    }
    let s = &mut file.sampler;
    macro_rules! set {
        ($($f:ident),*) => {$(if args.$f.is_some() { s.$f = args.$f; })*};
    }
    set!(iterations, burn_in, thin, restricted_scans, seed, checkpoint_interval);
    if let Some(v) = args.variant {
        s.variant = Some(match v {
            VariantArg::Full => Variant::Full,
            VariantArg::QOnly => Variant::QOnly,
        });
    }
    let config = file.sampler_config(data.num_levels())?;
    Ok((file, config))
}

fn fit(args: FitArgs) -> Result<(), Failure> {
    let data = read_dataset(&args.data).map_err(|e| match e {
        IoError::Io { .. } => Failure::Data(e.to_string()),
        other => other.into(),
    })?;
    let fingerprint = dataset_fingerprint(&data);
    let samples_path = args.out.join("samples.jsonl");
    let checkpoint_path = args.out.join("checkpoint.bin");

    let (mut sampler, mut writer, config_echo) = match &args.resume {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            if ck.dataset_sha256 != fingerprint {
                return Err(Failure::Data("checkpoint was written for a different dataset".into()));
            }
            let mut config = ck.config;
            if let Some(n) = args.iterations {
                config.num_iterations = n;
            }
            let writer = SampleWriter::resume(&samples_path, ck.state.iteration)?;
            let mut sampler = Sampler::resume(&data, config, ck.state)?;
            sampler.moves = ck.moves;
            (sampler, writer, None)
        }
        None => {
            let (file, config) = fit_config(&args, &data)?;
            let sampler = Sampler::new(&data, config)?;
            (sampler, SampleWriter::create(&samples_path)?, Some(file))
        }
    };
    if let Some(file) = &config_echo {
        cthmm_dp::io::write_atomic(&args.out.join("config.toml"), file.to_toml().as_bytes())?;
    }

    let start = Instant::now();
    let mut failure: Option<IoError> = None;
    let config = sampler.config().clone();
    let result = {
        let ck_config = config.clone();
        let mut on_sample = |s: &cthmm_dp::sampler::PosteriorSample| {
            writer.write(s).map_err(|e| SamplerError::Checkpoint(e.to_string()))
        };
        let mut on_checkpoint = |state: &cthmm_dp::sampler::SamplerState, moves: &cthmm_dp::sampler::MoveCounts| {
            let ck = Checkpoint {
                config: ck_config.clone(),
                dataset_sha256: fingerprint.clone(),
                state: state.clone(),
                moves: *moves,
            };
            write_checkpoint(&checkpoint_path, &ck).map_err(|e| {
                let msg = e.to_string();
                failure = Some(e);
                SamplerError::Checkpoint(msg)
            })
        };
        sampler.run_with(&mut on_sample, &mut on_checkpoint)
    };
    writer.flush()?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    result?;
    let elapsed = start.elapsed().as_secs_f64();

    let mut outputs = vec![samples_path.clone()];
    if checkpoint_path.exists() && config.checkpoint_interval > 0 {
        outputs.push(checkpoint_path.clone());
    }
    let mut manifest = RunManifest::new("fit", config.seed, &config, fingerprint);
    let t = sampler.timings;
    let timings: BTreeMap<String, f64> = [
        ("latent", t.latent.as_secs_f64()),
        ("gibbs", t.gibbs.as_secs_f64()),
        ("split_merge", t.split_merge.as_secs_f64()),
        ("refresh", t.refresh.as_secs_f64()),
        ("total", elapsed),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    manifest.timings = timings;
    manifest.record_outputs(outputs.iter().map(PathBuf::as_path))?;
    manifest.write(&args.out.join("manifest.json"))?;
    let m = sampler.moves;
    println!(
        "finished {} iterations; {} clusters; splits {}/{} merges {}/{}",
        sampler.state().iteration,
        sampler.state().num_clusters(),
        m.split_accepted,
        m.split_proposed,
        m.merge_accepted,
        m.merge_proposed
    );
    Ok(())
}

fn summarize(args: SummarizeArgs) -> Result<(), Failure> {
    let path = if args.samples.is_dir() { args.samples.join("samples.jsonl") } else { args.samples.clone() };
    let samples = read_samples(&path).map_err(|e| match e {
        IoError::Io { .. } => Failure::Data(e.to_string()),
        other => other.into(),
    })?;
    let truth = args.truth.as_deref().map(read_truth).transpose().map_err(|e| Failure::Data(e.to_string()))?;
    let ids: Option<Vec<String>> = match &args.data {
        Some(p) => Some(read_dataset(p)?.subjects.into_iter().map(|s| s.id).collect()),
        None => None,
    };
    if let Some(t) = &truth {
        if t.labels.len() != samples[0].labels.len() {
            return Err(Failure::Data("truth and samples disagree on the number of subjects".into()));
        }
    }
    if !(args.horizon >= 0.0) || args.grid_points == 0 {
        return Err(Failure::Config("--horizon must be nonnegative and --grid-points positive".into()));
    }
    let opts = SummaryOptions { horizon: args.horizon, grid_points: args.grid_points, ..Default::default() };
    let start = Instant::now();
    let written = write_summary(&samples, ids.as_deref(), truth.as_ref(), &args.out, opts)?;
    let mut manifest = RunManifest::new("summarize", 0, &serde_summary(&args, &path), String::new());
    manifest.timings.insert("summarize".into(), start.elapsed().as_secs_f64());
    manifest.record_outputs(written.iter().map(PathBuf::as_path))?;
    manifest.write(&args.out.join("manifest.json"))?;
    println!("wrote {} tables to {}", written.len(), args.out.display());
    Ok(())
}

fn serde_summary(args: &SummarizeArgs, samples: &Path) -> BTreeMap<&'static str, String> {
    BTreeMap::from([
        ("samples", samples.display().to_string()),
        ("truth", args.truth.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
        ("horizon", args.horizon.to_string()),
        ("grid_points", args.grid_points.to_string()),
    ])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Summarize(a) => summarize(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
