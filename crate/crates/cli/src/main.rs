use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use binagg::clustering::LearningMethod;
use binagg::config::{Method, PipelineConfig};
use binagg::descriptor::PackedDescriptorSet;
use binagg::encode::FvOptions;
use binagg::error::Error;
use binagg::io;
use binagg::pipeline::{
    format_rankings, format_report, fused_pairs, renormalize_cnn, retrieve, retrieve_direct, run_pipeline, train_bmm, train_gmm,
    train_vocabulary, Fusion, TrainedModel,
};
use binagg::postproc::{pca_train, postprocess_set, PostprocOptions, StageOrder, DEFAULT_BETA};
use binagg::retrieval::{evaluate, Rescale, RetrievalRun, DEFAULT_RATIO};

const EXIT_IO: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_PARSE: u8 = 3;
const EXIT_DEGENERATE: u8 = 4;

#[derive(Parser)]
#[command(name = "binagg", version, about = "Aggregate binary local descriptors into global image signatures")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a vocabulary or a mixture model from sample descriptors.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Encode every image of a descriptor file into a global vector.
    Encode(EncodeArgs),
    /// Power-law, L2 and optional PCA on a vector file.
    Postproc(PostprocArgs),
    #[command(subcommand)]
    Pca(PcaCommand),
    /// Fused distances between all image pairs of two paired vector files.
    Fuse(FuseArgs),
    /// Rank a database for each query and report AP and mAP.
    Evaluate(EvaluateArgs),
    /// Direct descriptor matching with the ratio test, then mAP.
    Match(MatchArgs),
    /// Sample synthetic images from a Bernoulli mixture.
    Synth(SynthArgs),
    /// Run a whole pipeline from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrainCommand {
    Vocab {
        #[arg(long, value_enum)]
        method: ClusterArg,
        #[command(flatten)]
        common: TrainCommon,
    },
    Bmm {
        #[arg(long, default_value_t = binagg::mixture::DEFAULT_EPS)]
        eps: f64,
        #[command(flatten)]
        common: TrainCommon,
    },
    Gmm {
        #[arg(long, default_value_t = binagg::mixture::DEFAULT_EPS)]
        eps: f64,
        #[command(flatten)]
        common: TrainCommon,
    },
}

#[derive(Args)]
struct TrainCommon {
    #[arg(long)]
    k: usize,
    /// DSC1 file; all its images are pooled.
    #[arg(long)]
    sample: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short)]
    o: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClusterArg {
    Kmeans,
    Kmajority,
    Kmedoids,
}

impl From<ClusterArg> for LearningMethod {
    fn from(c: ClusterArg) -> Self {
        match c {
            ClusterArg::Kmeans => LearningMethod::KMeans,
            ClusterArg::Kmajority => LearningMethod::KMajority,
            ClusterArg::Kmedoids => LearningMethod::KMedoids,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EncodeMethod {
    Bow,
    Vlad,
    FvBmm,
    FvGmm,
}

impl From<EncodeMethod> for Method {
    fn from(m: EncodeMethod) -> Self {
        match m {
            EncodeMethod::Bow => Method::Bow,
            EncodeMethod::Vlad => Method::Vlad,
            EncodeMethod::FvBmm => Method::FvBmm,
            EncodeMethod::FvGmm => Method::FvGmm,
        }
    }
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long, value_enum)]
    method: EncodeMethod,
    /// VOC1, BMM1 or GMM1 file.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(short)]
    o: PathBuf,
    #[arg(long)]
    include_weights: bool,
    /// GMM only.
    #[arg(long)]
    include_variances: bool,
    #[arg(long)]
    stats_form: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    PowerFirst,
    PcaFirst,
}

#[derive(Args)]
struct PostprocArgs {
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long)]
    pca: Option<PathBuf>,
    /// L2-normalize after PCA (the default).
    #[arg(long, overrides_with = "no_renorm")]
    renorm: bool,
    #[arg(long)]
    no_renorm: bool,
    #[arg(long, value_enum, default_value = "power-first")]
    order: OrderArg,
    #[arg(short)]
    i: PathBuf,
    #[arg(short)]
    o: PathBuf,
}

#[derive(Subcommand)]
enum PcaCommand {
    /// Learn a projection from the rows of a vector file.
    Train {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short)]
        o: PathBuf,
    },
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    alpha: f64,
    /// CNN vectors.
    #[arg(long)]
    left: PathBuf,
    /// FV (or VLAD) vectors with the same ids.
    #[arg(long)]
    right: PathBuf,
    /// TSV output; stdout when absent.
    #[arg(short)]
    o: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RescaleArg {
    None,
    Max,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// CNN_DB,CNN_QUERIES vector files to fuse with.
    #[arg(long, value_name = "CNN_DB,CNN_QUERIES", value_parser = parse_pair, requires = "alpha")]
    fuse: Option<(PathBuf, PathBuf)>,
    #[arg(long, requires = "fuse")]
    alpha: Option<f64>,
    #[arg(long, value_enum, default_value = "none", requires = "fuse")]
    rescale: RescaleArg,
    #[command(flatten)]
    output: EvalOutput,
}

fn parse_pair(s: &str) -> Result<(PathBuf, PathBuf), String> {
    match s.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains(',') => Ok((a.into(), b.into())),
        _ => Err("expected two comma-separated files".into()),
    }
}

#[derive(Args)]
struct EvalOutput {
    /// Append `key=value` lines to the report.
    #[arg(long)]
    kv: bool,
    /// Write the full ranked lists as TSV.
    #[arg(long)]
    rankings: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RATIO)]
    ratio: f64,
    #[arg(long)]
    gt: PathBuf,
    #[command(flatten)]
    output: EvalOutput,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    per_image: usize,
    #[arg(long)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short)]
    o: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } => EXIT_PARSE,
        Error::InvalidParameter { .. }
        | Error::DimensionMismatch { .. }
        | Error::Config(_)
        | Error::NoPositives(_)
        | Error::MissingRanking(_) => EXIT_USAGE,
        Error::ZeroVector
        | Error::EmptyImage
        | Error::InsufficientSample { .. }
        | Error::NotUnitNorm { .. }
        | Error::Degenerate(_) => EXIT_DEGENERATE,
        Error::Io { .. } => EXIT_IO,
    }
}

fn read_pooled(path: &Path) -> binagg::Result<PackedDescriptorSet> {
    let (_, images) = io::read_descriptors(path)?;
    PackedDescriptorSet::pool("sample", &images)
}

fn train(cmd: TrainCommand) -> binagg::Result<()> {
    let (model, out) = match cmd {
        TrainCommand::Vocab { method, common } => {
            let sample = read_pooled(&common.sample)?;
            (TrainedModel::Vocabulary(train_vocabulary(method.into(), &sample, common.k, common.seed)?), common.o)
        }
        TrainCommand::Bmm { eps, common } => {
            let sample = read_pooled(&common.sample)?;
            (TrainedModel::Bmm(train_bmm(&sample, common.k, common.seed, eps)?), common.o)
        }
        TrainCommand::Gmm { eps, common } => {
            let sample = read_pooled(&common.sample)?;
            (TrainedModel::Gmm(train_gmm(&sample, common.k, common.seed, eps)?), common.o)
        }
    };
    model.write(&out)
}

fn encode(a: EncodeArgs) -> binagg::Result<()> {
    let model = TrainedModel::read(&a.model)?;
    let options = FvOptions {
        include_weights: a.include_weights,
        include_variances: a.include_variances,
        stats_form: a.stats_form,
    };
    let encoder = model.encoder(a.method.into(), options)?;
    let (_, images) = io::read_descriptors(&a.input)?;
    let set = encoder.encode_all(&images)?;
    info!("encoded {} images into {}-dimensional {} vectors", set.len(), set.dim(), set.kind());
    io::write_vectors(&a.o, &set)
}

fn postproc(a: PostprocArgs) -> binagg::Result<()> {
    let pca = a.pca.as_deref().map(io::read_pca).transpose()?;
    let opts = PostprocOptions {
        beta: a.beta,
        renorm: !a.no_renorm || a.renorm,
        order: match a.order {
            OrderArg::PowerFirst => StageOrder::PowerFirst,
            OrderArg::PcaFirst => StageOrder::PcaFirst,
        },
    };
    let set = io::read_vectors(&a.i)?;
    io::write_vectors(&a.o, &postprocess_set(&set, pca.as_ref(), opts)?)
}

fn pca(cmd: PcaCommand) -> binagg::Result<()> {
    let PcaCommand::Train { dim, sample, seed, o } = cmd;
    let set = io::read_vectors(&sample)?;
    io::write_pca(&o, &pca_train(&set.to_matrix(), dim, seed)?)
}

fn fuse(a: FuseArgs) -> binagg::Result<()> {
    let cnn = renormalize_cnn(&io::read_vectors(&a.left)?)?;
    let fv = io::read_vectors(&a.right)?;
    let mut out = String::from("a\tb\tdistance\n");
    for (x, y, d) in fused_pairs(&cnn, &fv, a.alpha)? {
        writeln!(out, "{x}\t{y}\t{d}").expect("writing to a String");
    }
    match a.o {
        Some(path) => io::write_atomic(&path, out.as_bytes()),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn report(run: &RetrievalRun, gt_path: &Path, output: &EvalOutput) -> binagg::Result<()> {
    let gt = io::read_ground_truth(gt_path)?;
    let eval = evaluate(run, &gt)?;
    if let Some(path) = &output.rankings {
        io::write_atomic(path, format_rankings(run).as_bytes())?;
    }
    print!("{}", format_report(&eval, output.kv));
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> binagg::Result<()> {
    let db = renormalize_cnn(&io::read_vectors(&a.db)?)?;
    let queries = renormalize_cnn(&io::read_vectors(&a.queries)?)?;
    let run = match (a.fuse, a.alpha) {
        (Some((db_file, query_file)), Some(alpha)) => {
            let cnn_db = renormalize_cnn(&io::read_vectors(&db_file)?)?;
            let cnn_queries = renormalize_cnn(&io::read_vectors(&query_file)?)?;
            let rescale = match a.rescale {
                RescaleArg::None => Rescale::None,
                RescaleArg::Max => Rescale::Max,
            };
            let fusion = Fusion {
                cnn_db: &cnn_db,
                cnn_queries: &cnn_queries,
                alpha,
                rescale,
            };
            retrieve(&db, &queries, Some(fusion))?
        }
        _ => retrieve(&db, &queries, None)?,
    };
    report(&run, &a.gt, &a.output)
}

fn match_cmd(a: MatchArgs) -> binagg::Result<()> {
    let (db_dim, db) = io::read_descriptors(&a.db)?;
    let (q_dim, queries) = io::read_descriptors(&a.queries)?;
    if db_dim != q_dim {
        return Err(Error::DimensionMismatch {
            expected: db_dim,
            found: q_dim,
        });
    }
    let run = retrieve_direct(&db, &queries, a.ratio)?;
    report(&run, &a.gt, &a.output)
}

fn synth(a: SynthArgs) -> binagg::Result<()> {
    let model = io::read_bmm(&a.model)?;
    let images = binagg::synth::sample_images(&model, a.images, a.per_image, a.seed)?;
    io::write_descriptors(&a.o, model.dim(), &images)
}

fn run(cli: Cli) -> binagg::Result<()> {
    match cli.command {
        Command::Train(c) => train(c),
        Command::Encode(a) => encode(a),
        Command::Postproc(a) => postproc(a),
        Command::Pca(c) => pca(c),
        Command::Fuse(a) => fuse(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Match(a) => match_cmd(a),
        Command::Synth(a) => synth(a),
        Command::Run { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let outcome = run_pipeline(&cfg)?;
            print!("{}", format_report(&outcome.evaluation, false));
            Ok(())
        }
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("BINAGG_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("BINAGG_THREADS must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
