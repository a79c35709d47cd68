//! The `xverify` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.

use std::ffi::OsString;
use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;
use xverify_core::embedding::{Concurrency, EmbeddingError};
use xverify_core::imaging::colormap_diverging;
use xverify_core::params::parse_edge_blur;
use xverify_core::xmap::XMapError;
use xverify_core::{
    cosine_distance, explain_pair, ConfidenceModel, DistanceSample, EmbeddingBackend, Image, MethodKind,
    PairExplainContext, PatchFill, PatchShape, PatchSpec, ReferenceEmbedder, SubprocessBackend, SweepParams,
};
use xverify_store::{load_pairs, run_batch, BatchConfig, BatchError, PairRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Backend(m) => f.write_str(m),
        }
    }
}

fn embedding_failure(err: &EmbeddingError, message: String) -> CliError {
    if matches!(err.root(), EmbeddingError::DegenerateImage) {
        CliError::Data(message)
    } else {
        CliError::Backend(message)
    }
}

fn xmap_failure(err: XMapError) -> CliError {
    match err.embedding_error() {
        Some(e) => embedding_failure(e, err.to_string()),
        None => CliError::Data(err.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "xverify", version, about = "Explain and score face verification decisions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a confidence model from a labelled pairs file.
    Fit(FitArgs),
    /// Explain a single image pair.
    Explain(ExplainArgs),
    /// Run the full pipeline over a pairs file into a results store.
    Batch(BatchArgs),
    /// Serve a results store over HTTP.
    Serve(ServeArgs),
    /// Write a synthetic pairs file and images for trying things out.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// `reference` or `cmd:PROGRAM [ARGS..]`.
    #[arg(long)]
    backend: String,
    #[arg(long)]
    out: PathBuf,
    /// Fit one model on all pairs instead of one per fold.
    #[arg(long)]
    single: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "7,14,28")]
    patch_sizes: Vec<usize>,
    #[arg(long, default_value_t = PatchSpec::DEFAULT_STRIDE)]
    stride: usize,
    /// black, gray, white or noise.
    #[arg(long, value_parser = fill, default_value = "black")]
    fill: PatchFill,
    /// rect or round.
    #[arg(long, value_parser = shape, default_value = "rect")]
    shape: PatchShape,
    /// Gaussian patch edge as `KERNEL,SIGMA`.
    #[arg(long, value_parser = edge_blur, value_name = "K,SIGMA")]
    edge_blur: Option<String>,
    /// Seed for noise fills.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SweepArgs {
    fn specs(&self) -> Result<Vec<PatchSpec>, CliError> {
        SweepParams {
            patch_sizes: self.patch_sizes.clone(),
            stride: self.stride,
            fill: self.fill,
            shape: self.shape,
            edge_blur: self.edge_blur.clone(),
            seed: self.seed,
        }
        .to_specs()
        .map_err(|e| CliError::Usage(e.to_string()))
    }
}

fn fill(text: &str) -> Result<PatchFill, String> {
    text.parse().map_err(|e: xverify_core::occlusion::OcclusionError| e.to_string())
}

fn shape(text: &str) -> Result<PatchShape, String> {
    text.parse().map_err(|e: xverify_core::occlusion::OcclusionError| e.to_string())
}

fn edge_blur(text: &str) -> Result<String, String> {
    parse_edge_blur(text).map_err(|e| e.to_string())?;
    Ok(text.to_owned())
}

fn method(text: &str) -> Result<MethodKind, String> {
    text.parse().map_err(|e: XMapError| e.to_string())
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    img1: PathBuf,
    #[arg(long)]
    img2: PathBuf,
    #[arg(long)]
    backend: String,
    /// I, II or III.
    #[arg(long, value_parser = method, default_value = "III")]
    method: MethodKind,
    #[command(flatten)]
    sweep: SweepArgs,
    /// Confidence model from `xverify fit`; adds the score to meta.json.
    #[arg(long)]
    conf: Option<PathBuf>,
    /// Fold whose parameters score the pair, for fold-wise models.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BatchArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    backend: String,
    #[arg(long, value_parser = method, value_delimiter = ',', default_value = "I,II,III")]
    methods: Vec<MethodKind>,
    #[arg(long)]
    out: PathBuf,
    /// Dataset name in the store; defaults to the pairs file name.
    #[arg(long)]
    dataset: Option<String>,
    /// Score with this model instead of fitting one on the batch.
    #[arg(long)]
    conf: Option<PathBuf>,
    #[command(flatten)]
    sweep: SweepArgs,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = xverify_service::STORE_ENV)]
    store: PathBuf,
    #[arg(long, env = xverify_service::ADDR_ENV, default_value = xverify_service::DEFAULT_ADDR)]
    addr: SocketAddr,
    /// Enables on-demand recomputation.
    #[arg(long)]
    backend: Option<String>,
    /// Scores recomputed pairs.
    #[arg(long)]
    conf: Option<PathBuf>,
    /// Allowed CORS origin; repeatable. Without it any localhost origin is allowed.
    #[arg(long = "cors-origin")]
    cors_origins: Vec<String>,
    #[arg(long, default_value_t = 4)]
    max_jobs: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "synthetic")]
    name: String,
    #[arg(long, default_value_t = 60)]
    pairs: usize,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Fit(a) => fit(a),
        Command::Explain(a) => explain(a),
        Command::Batch(a) => batch(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("xverify: {e}");
            e.exit_code()
        }
    }
}

/// `reference` or `cmd:PROGRAM [ARGS..]`.
pub fn make_backend(spec: &str) -> Result<Arc<dyn EmbeddingBackend>, CliError> {
    if spec == "reference" {
        return Ok(Arc::new(ReferenceEmbedder));
    }
    if let Some(command) = spec.strip_prefix("cmd:") {
        let backend = SubprocessBackend::from_command_line(command).map_err(|e| CliError::Usage(e.to_string()))?;
        return Ok(Arc::new(backend));
    }
    Err(CliError::Usage(format!(
        "unknown backend {spec:?}; expected \"reference\" or \"cmd:PROGRAM [ARGS..]\""
    )))
}

fn load_model(path: &Path) -> Result<ConfidenceModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.parse().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_image(path: &Path) -> Result<Image, CliError> {
    Image::load_png(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

const FIT_CHUNK: usize = 64;

/// Distance of every pair, embedding in chunks so subprocess backends see
/// batches rather than single images.
fn pair_distances(pairs: &[PairRecord], backend: &dyn EmbeddingBackend) -> Result<Vec<f64>, CliError> {
    let chunk = |pairs: &[PairRecord]| -> Result<Vec<f64>, CliError> {
        let mut imgs = Vec::with_capacity(2 * pairs.len());
        for p in pairs {
            imgs.push(load_image(&p.path1)?);
            imgs.push(load_image(&p.path2)?);
        }
        let feats = backend.embed_batch(&imgs).map_err(|e| {
            let pair = match &e {
                EmbeddingError::AtIndex { index, .. } => pairs.get(index / 2).map(|p| p.pair_id.as_str()),
                _ => None,
            };
            let message = match pair {
                Some(id) => format!("pair {id}: {e}"),
                None => e.to_string(),
            };
            embedding_failure(&e, message)
        })?;
        feats
            .chunks(2)
            .zip(pairs)
            .map(|(f, p)| {
                cosine_distance(&f[0], &f[1]).map_err(|e| embedding_failure(&e, format!("pair {}: {e}", p.pair_id)))
            })
            .collect()
    };
    let parts: Vec<Result<Vec<f64>, CliError>> = match backend.concurrency() {
        Concurrency::Parallel => pairs.par_chunks(FIT_CHUNK).map(chunk).collect(),
        Concurrency::Serial => pairs.chunks(FIT_CHUNK).map(chunk).collect(),
    };
    let mut out = Vec::with_capacity(pairs.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

fn read_pairs(path: &Path) -> Result<Vec<PairRecord>, CliError> {
    load_pairs(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn fit(args: FitArgs) -> Result<i32, CliError> {
    let backend = make_backend(&args.backend)?;
    let pairs = read_pairs(&args.pairs)?;
    let labelled: Vec<PairRecord> = pairs.into_iter().filter(|p| p.label.known().is_some()).collect();
    if labelled.is_empty() {
        return Err(CliError::Data("no labelled pairs to fit on".into()));
    }
    let distances = pair_distances(&labelled, backend.as_ref())?;
    let samples: Vec<DistanceSample> = labelled
        .iter()
        .zip(&distances)
        .filter_map(|(p, &d)| Some(DistanceSample::new(d, p.label.known()?, usize::from(p.fold), p.pair_id.clone())))
        .collect();
    let model = if args.single {
        ConfidenceModel::fit_validation(&samples)
    } else {
        ConfidenceModel::fit_folds(&samples)
    }
    .map_err(|e| CliError::Data(format!("fit failed: {e}")))?;
    std::fs::write(&args.out, model.to_text()).map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;

    println!("{:>4} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}", "fold", "t", "L", "d0", "k", "b", "residual");
    for (i, f) in model.folds.iter().enumerate() {
        let p = &f.params;
        println!(
            "{:>4} {:>10.6} {:>10.6} {:>10.6} {:>10.4} {:>10.6} {:>10.3e}",
            if model.is_fold_wise() { i.to_string() } else { "all".into() },
            f.threshold,
            p.amplitude,
            p.midpoint,
            p.steepness,
            p.offset,
            f.fit_residual
        );
    }
    println!("{} pairs, model written to {}", samples.len(), args.out.display());
    Ok(EXIT_OK)
}

fn write_png(img: &Image, path: &Path) -> Result<(), CliError> {
    img.save_png(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn explain(args: ExplainArgs) -> Result<i32, CliError> {
    let specs = args.sweep.specs()?;
    let backend = make_backend(&args.backend)?;
    let model = args.conf.as_deref().map(load_model).transpose()?;
    let img1 = load_image(&args.img1)?;
    let img2 = load_image(&args.img2)?;

    let ctx = PairExplainContext::new(img1, img2, backend.as_ref(), specs).map_err(xmap_failure)?;
    let result = explain_pair(&ctx, args.method).map_err(xmap_failure)?;

    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    let m = args.method;
    let mut files = Vec::new();
    for side in 0..2 {
        let which = side + 1;
        let source = format!("source_{which}.png");
        let xmap = format!("xmap_{which}_{m}.png");
        let smap = format!("smap_{which}_{m}.png");
        write_png(if side == 0 { &ctx.img1 } else { &ctx.img2 }, &args.out.join(&source))?;
        write_png(&result.blended[side], &args.out.join(&xmap))?;
        write_png(&colormap_diverging(&result.maps[side]), &args.out.join(&smap))?;
        files.extend([source, xmap, smap]);
    }

    let mut meta = json!({
        "backend": backend.name(),
        "image1": args.img1.to_string_lossy(),
        "image2": args.img2.to_string_lossy(),
        "method": m,
        "d_orig": ctx.d_orig,
        "parameters": ctx.specs,
        "artifacts": files,
    });
    if let Some(model) = &model {
        let fold = model
            .fold(Some(args.fold))
            .map_err(|e| CliError::Usage(format!("--fold {}: {e}", args.fold)))?;
        let c = fold.score(ctx.d_orig);
        meta["fold"] = json!(args.fold);
        meta["threshold"] = json!(fold.threshold);
        meta["prediction"] = json!(c.prediction);
        meta["c_score"] = json!(c.value);
        println!("d_orig {:.6}  prediction {}  C {:.4}", ctx.d_orig, c.prediction, c.value);
    } else {
        println!("d_orig {:.6}", ctx.d_orig);
    }
    let path = args.out.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(EXIT_OK)
}

fn batch(args: BatchArgs) -> Result<i32, CliError> {
    let specs = args.sweep.specs()?;
    let backend = make_backend(&args.backend)?;
    let confidence = args.conf.as_deref().map(load_model).transpose()?;
    let mut pairs = read_pairs(&args.pairs)?;
    let dataset = match &args.dataset {
        Some(name) => {
            for p in &mut pairs {
                p.dataset.clone_from(name);
            }
            name.clone()
        }
        None => match pairs.first() {
            Some(p) => p.dataset.clone(),
            None => xverify_store::pairs::dataset_name(&args.pairs),
        },
    };
    let config = BatchConfig {
        methods: args.methods,
        specs,
        confidence,
        ..BatchConfig::new(dataset)
    };
    let summary = run_batch(&pairs, backend.as_ref(), &config, &args.out).map_err(|e| match e {
        BatchError::InvalidConfig(m) => CliError::Usage(m),
        other => CliError::Data(other.to_string()),
    })?;
    println!(
        "{}/{}: {} computed, {} reused, {} failed ({} backend)",
        summary.dataset, summary.model, summary.computed, summary.skipped, summary.failed, summary.backend_failures
    );
    if let Some(note) = &summary.confidence_note {
        println!("no confidence scores: {note}");
    }
    println!("index: {}", summary.index_path.display());
    Ok(if summary.backend_failures > 0 {
        EXIT_BACKEND
    } else if summary.failed > 0 {
        EXIT_DATA
    } else {
        EXIT_OK
    })
}

fn serve(args: ServeArgs) -> Result<i32, CliError> {
    let mut config = xverify_service::ApiConfig::new(&args.store);
    config.addr = args.addr;
    config.backend = args.backend.as_deref().map(make_backend).transpose()?;
    config.confidence = args.conf.as_deref().map(load_model).transpose()?;
    config.cors_origins = args.cors_origins;
    config.max_running_jobs = args.max_jobs.max(1);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Data(e.to_string()))?;
    eprintln!("serving {} on http://{}", args.store.display(), args.addr);
    runtime
        .block_on(xverify_service::serve(config))
        .map_err(|e| match e {
            xverify_service::ServeError::Cors(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        })?;
    Ok(EXIT_OK)
}

fn synth(args: SynthArgs) -> Result<i32, CliError> {
    let csv = xverify_store::synthetic::write_dataset(&args.out, &args.name, args.pairs)
        .map_err(|e| CliError::Data(e.to_string()))?;
    println!("{}", csv.display());
    Ok(EXIT_OK)
}
