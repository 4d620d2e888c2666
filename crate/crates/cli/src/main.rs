//! `nlscore`: simulate worlds, estimate stats, train transforms, score trials
//! and run the cross-domain experiments.
//!
//! Exit codes: 0 success, 1 usage error, 2 any data, estimation, training or
//! evaluation error (reported on stderr as `error: <Class>: message`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use nlscore::experiment::{
    run_table1_sweep, run_table2_experiment, run_table3_sweep, ExperimentConfig, ResultTable,
    SplitCorpus,
};
use nlscore::io;
use nlscore::{
    compute_eer, estimate_domain_stats, generate_world, make_trials, mdt_estimate, score_trials,
    train_transform, BatchSize, Error, LabelMixConfig, LabeledDataset, Method, Result,
    StatsOptions, TrainConfig, TransformInit, WorldConfig,
};

#[derive(Parser)]
#[command(
    name = "nlscore",
    version,
    about = "Normalized-likelihood scoring under domain mismatch"
)]
struct Cli {
    /// Log verbosity (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain world with known ground truth
    Simulate(SimulateArgs),
    /// Estimate between/within-speaker variances of one domain
    EstimateStats(EstimateStatsArgs),
    /// Estimate multi-domain stats from pooled data with label sharing
    TrainMdt(TrainMdtArgs),
    /// Train the test-to-enrollment transform
    TrainTransform(TrainTransformArgs),
    /// Score enrollment/test trials with one method
    Score(ScoreArgs),
    /// Equal error rate of a score file
    Evaluate(EvaluateArgs),
    /// Label-sharing sweep of multi-domain stats
    Table1(Table1Args),
    /// Method comparison over every domain pair
    Table2(Table2Args),
    /// Training-speaker-count sweep
    Table3(Table3Args),
}

#[derive(Args, Clone)]
struct WorldArgs {
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 260)]
    speakers: usize,
    /// Utterances per speaker and domain
    #[arg(long, default_value_t = 20)]
    utts: usize,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 1.5)]
    channel_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    shift_norm: f64,
    /// Use identity rotations in every channel
    #[arg(long)]
    no_rotation: bool,
    /// Comma-separated domain ids; the first is canonical
    #[arg(long, value_delimiter = ',', default_value = "A,B")]
    domains: Vec<String>,
}

impl WorldArgs {
    fn config(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            dim: self.dim,
            n_speakers: self.speakers,
            n_utts_per_domain: self.utts,
            epsilon_true: self.epsilon,
            sigma_true: self.sigma,
            channel_scale: self.channel_scale,
            channel_shift_norm: self.shift_norm,
            random_rotation: !self.no_rotation,
            rotation_seed: seed,
            sample_seed: seed.wrapping_add(1),
            domains: self.domains.clone(),
        }
    }
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, default_value_t = 1e-6)]
    min_variance: f64,
    /// Scale every vector to unit length before use
    #[arg(long)]
    length_normalize: bool,
}

impl StatsArgs {
    fn options(&self) -> StatsOptions {
        StatsOptions {
            min_variance: self.min_variance,
            length_normalize: self.length_normalize,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Identity,
    Random,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    /// Mini-batch size; omit for full batch
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Identity)]
    init: InitArg,
    /// Drop the log|det M| volume term from the objective
    #[arg(long)]
    no_jacobian: bool,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            max_iters: self.max_iters,
            batch_size: self.batch_size.map_or(BatchSize::All, BatchSize::Size),
            seed,
            convergence_tol: self.tol,
            init: match self.init {
                InitArg::Identity => TransformInit::Identity,
                InitArg::Random => TransformInit::RandomOrthogonal,
            },
            jacobian: !self.no_jacobian,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long)]
    seed: u64,
    /// Also split each domain into train/enroll/test files with this many
    /// held-out evaluation speakers
    #[arg(long)]
    eval_speakers: Option<usize>,
    #[arg(long, default_value_t = 3)]
    enroll_utts: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EstimateStatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    stats: StatsArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainMdtArgs {
    /// Embedding files to pool (two or more domains)
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Fraction of speakers labeled domain-independently
    #[arg(long, default_value_t = 1.0)]
    proportion: f64,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    stats: StatsArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainTransformArgs {
    /// Enrollment-condition training data
    #[arg(long)]
    enroll_data: PathBuf,
    /// Test-condition training data (same speakers)
    #[arg(long)]
    test_data: PathBuf,
    #[arg(long)]
    enroll_stats: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    length_normalize: bool,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    method: Method,
    #[arg(long)]
    enroll: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    enroll_stats: Option<PathBuf>,
    #[arg(long)]
    test_stats: Option<PathBuf>,
    #[arg(long)]
    mdt_stats: Option<PathBuf>,
    #[arg(long)]
    transform: Option<PathBuf>,
    /// Nontarget speakers sampled per model; omit to keep all
    #[arg(long)]
    max_nontarget: Option<usize>,
    #[arg(long)]
    length_normalize: bool,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scores: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Pooled embedding files; when absent a world is simulated
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    eval_speakers: usize,
    #[arg(long, default_value_t = 3)]
    enroll_utts: usize,
    #[arg(long)]
    max_nontarget: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    #[command(flatten)]
    stats: StatsArgs,
    /// Evaluate domain pairs in parallel (results are identical)
    #[arg(long)]
    parallel: bool,
    /// Machine-readable results file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Table1Args {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1.0")]
    proportions: Vec<f64>,
}

#[derive(Args)]
struct Table2Args {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "mdt,dat,dsd")]
    methods: Vec<Method>,
    /// Label-sharing proportion for MDT
    #[arg(long, default_value_t = 1.0)]
    mdt_proportion: f64,
}

#[derive(Args)]
struct Table3Args {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "20,50,100,200")]
    counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "mdt,dat,dsd")]
    methods: Vec<Method>,
}

fn main() -> ExitCode {
    ExitCode::from(dispatch(std::env::args_os(), true))
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
fn dispatch<I, T>(argv: I, init_logging: bool) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if init_logging {
        let level = match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        };
        env_logger::Builder::new()
            .filter_level(level)
            .format_timestamp(None)
            .init();
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::EstimateStats(a) => {
            let data = io::parse_embedding_file(&a.data)?;
            let stats = estimate_domain_stats(&data, &a.stats.options())?;
            io::write_stats_file(&a.out, &stats)
        }
        Command::TrainMdt(a) => {
            let pooled = read_pooled(&a.data)?;
            let mix = LabelMixConfig {
                proportion_independent: a.proportion,
                seed: a.seed,
            };
            let stats = mdt_estimate(&pooled, &mix, &a.stats.options())?;
            io::write_stats_file(&a.out, &stats)
        }
        Command::TrainTransform(a) => {
            let enroll = read_data(&a.enroll_data, a.length_normalize)?;
            let test = read_data(&a.test_data, a.length_normalize)?;
            let stats = io::read_stats_file(&a.enroll_stats)?;
            let t = train_transform(&enroll, &test, &stats, &a.train.config(a.seed))?;
            io::write_transform_file(&a.out, &t)
        }
        Command::Score(a) => score(a),
        Command::Evaluate(a) => {
            let records = io::read_score_file(&a.scores)?;
            let r = compute_eer(&records)?;
            println!(
                "EER {:.4}% threshold {} targets {} nontargets {}",
                100.0 * r.eer,
                io::fmt_float(r.threshold),
                r.n_target,
                r.n_nontarget
            );
            Ok(())
        }
        Command::Table1(a) => {
            let (split, cfg) = experiment_setup(&a.exp, 1.0)?;
            let table = run_table1_sweep(&split, &a.proportions, &cfg)?;
            emit(&table, a.exp.out.as_deref())
        }
        Command::Table2(a) => {
            let (split, cfg) = experiment_setup(&a.exp, a.mdt_proportion)?;
            let table = run_table2_experiment(&split, &a.methods, &cfg)?;
            emit(&table, a.exp.out.as_deref())
        }
        Command::Table3(a) => {
            let (split, cfg) = experiment_setup(&a.exp, 1.0)?;
            let table = run_table3_sweep(&split, &a.counts, &a.methods, &cfg)?;
            emit(&table, a.exp.out.as_deref())
        }
    }
}

fn read_data(path: &Path, length_normalize: bool) -> Result<LabeledDataset> {
    let data = io::parse_embedding_file(path)?;
    Ok(if length_normalize {
        data.length_normalized()
    } else {
        data
    })
}

fn read_pooled(paths: &[PathBuf]) -> Result<LabeledDataset> {
    let sets = paths
        .iter()
        .map(|p| io::parse_embedding_file(p))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&LabeledDataset> = sets.iter().collect();
    LabeledDataset::concat(&refs)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let world = generate_world(&a.world.config(a.seed))?;
    create_dir(&a.out_dir)?;
    for data in &world.datasets {
        let dom = &data.records()[0].domain_id;
        io::write_embedding_file(&a.out_dir.join(format!("{dom}.emb")), data)?;
        let stats = world.truth.stats(dom).expect("every domain has truth");
        io::write_stats_file(&a.out_dir.join(format!("{dom}.truth.stats")), stats)?;
        if let Some(ch) = world.truth.channel(dom) {
            io::write_transform_file(
                &a.out_dir.join(format!("{dom}.truth.transform")),
                &ch.inverse(),
            )?;
        }
    }
    if let Some(n_eval) = a.eval_speakers {
        let cfg = ExperimentConfig {
            n_eval_speakers: n_eval,
            n_enroll_utts: a.enroll_utts,
            seed: a.seed,
            ..ExperimentConfig::default()
        };
        let split = SplitCorpus::from_world(&world, &cfg)?;
        for (i, dom) in split.domains.iter().enumerate() {
            for (part, data) in [
                ("train", &split.train[i]),
                ("enroll", &split.enroll[i]),
                ("test", &split.test[i]),
            ] {
                io::write_embedding_file(&a.out_dir.join(format!("{dom}.{part}.emb")), data)?;
            }
        }
    }
    info!("wrote world to {}", a.out_dir.display());
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let enroll = read_data(&a.enroll, a.length_normalize)?;
    let test = read_data(&a.test, a.length_normalize)?;
    let read_stats = |p: &Option<PathBuf>| p.as_deref().map(io::read_stats_file).transpose();
    let enroll_stats = read_stats(&a.enroll_stats)?;
    let test_stats = read_stats(&a.test_stats)?;
    let mdt_stats = read_stats(&a.mdt_stats)?;
    let transform = a
        .transform
        .as_deref()
        .map(io::read_transform_file)
        .transpose()?;

    let trials = make_trials(&enroll, &test, a.max_nontarget, a.seed)?;
    let mut art = nlscore::eval::ScoringArtifacts::new(&enroll, &test);
    art.enroll_stats = enroll_stats.as_ref();
    art.test_stats = test_stats.as_ref();
    art.mdt_stats = mdt_stats.as_ref();
    art.transform = transform.as_ref();
    let records = score_trials(&trials, a.method, &art)?;
    info!("scored {} trials with {}", records.len(), a.method);
    io::write_score_file(&a.out, &records)
}

fn experiment_setup(
    a: &ExperimentArgs,
    mdt_proportion: f64,
) -> Result<(SplitCorpus, ExperimentConfig)> {
    let default = ExperimentConfig::default();
    let cfg = ExperimentConfig {
        n_eval_speakers: a.eval_speakers,
        n_enroll_utts: a.enroll_utts,
        max_nontarget: a.max_nontarget,
        seed: a.seed,
        train: TrainConfig {
            learning_rate: a.lr,
            max_iters: a.max_iters,
            seed: a.seed,
            ..default.train
        },
        stats: a.stats.options(),
        mdt_proportion,
        parallel: a.parallel,
    };
    let split = if a.data.is_empty() {
        SplitCorpus::from_world(&generate_world(&a.world.config(a.seed))?, &cfg)?
    } else {
        SplitCorpus::new(&read_pooled(&a.data)?, &cfg)?
    };
    Ok((split, cfg))
}

fn emit(table: &ResultTable, out: Option<&Path>) -> Result<()> {
    print!("{}", table.render());
    if let Some(path) = out {
        io::write_text(path, &io::format_results(&table.rows))?;
    }
    Ok(())
}
