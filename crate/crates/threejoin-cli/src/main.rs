//! Command-line pipeline: synthetic data, edge extraction, three-stream
//! training, embedding export, retrieval, evaluation and ablation.
//!
//! Exit codes are stable per error class: 0 success, 1 usage, 2
//! data/validation, 3 numeric.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use threejoin_core::dataset::{
    generate_synthetic_corpus, load_manifest, SyntheticSpec, ZeroShotSplit,
};
use threejoin_core::edgemap::{extract_corpus, open_corpus, CannyExtractor, ExtractorConfig};
use threejoin_core::network::teacher::{make_teacher, TeacherConfig, TeacherModel};
use threejoin_core::retrieval::dumps::{read_embeddings, write_embeddings};
use threejoin_core::retrieval::itq::itq_fit;
use threejoin_core::retrieval::{
    evaluate, precision_curve, rank_cosine, EvalMode, Role, PREC_CUTOFF,
};
use threejoin_core::training::ablation::run_ablation;
use threejoin_core::training::config_file::load_overrides;
use threejoin_core::training::{
    encode_embeddings, load_checkpoint_stack, train, Ablation, TrainConfig,
};
use threejoin_core::util::{derive_seed, fnv1a64};
use threejoin_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "threejoin",
    version,
    about = "Zero-shot sketch-based image retrieval: train three joined encoder streams, hash, rank, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic zero-shot corpus and its manifest.
    GenData(GenDataArgs),
    /// Extract edge maps for every training image into a cache.
    ExtractEdges(ExtractEdgesArgs),
    /// Train the three-stream model against a frozen teacher.
    Train(TrainArgs),
    /// Encode one partition's images and sketches into embedding dumps.
    Encode(EncodeArgs),
    /// Rank the gallery for one query and print the top-k ids.
    Retrieve(RetrieveArgs),
    /// Score queries against a gallery; prints a JSON report.
    Evaluate(EvaluateArgs),
    /// Train and score the seven-variant ablation ladder.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for rasters and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Training (seen) classes; the rest are zero-shot test classes.
    #[arg(long, default_value_t = 6)]
    seen: usize,
    #[arg(long, default_value_t = 20)]
    images_per_class: usize,
    #[arg(long, default_value_t = 20)]
    sketches_per_class: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ExtractEdgesArgs {
    /// Dataset manifest written by gen-data.
    #[arg(long)]
    manifest: PathBuf,
    /// Cache root; maps land under <out>/edges/<extractor>/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "canny")]
    extractor: String,
    /// Gaussian smoothing width in pixels.
    #[arg(long)]
    sigma: Option<f64>,
    /// Hysteresis thresholds as fractions of the peak gradient.
    #[arg(long)]
    low: Option<f64>,
    #[arg(long)]
    high: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Edge cache root (the --out of extract-edges). Maps must already
    /// exist; training never extracts.
    #[arg(long)]
    edges: PathBuf,
    #[arg(long, default_value = "canny")]
    extractor: String,
    /// TOML overrides layered onto the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated loss terms, e.g. "cls,kd,align"; wins over the config file.
    #[arg(long)]
    ablation: Option<String>,
    /// Run directory for checkpoints and metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Cross-entropy pretraining epochs for the frozen teacher.
    #[arg(long, default_value_t = 3)]
    teacher_epochs: usize,
    /// Also render loss_curve.png into the run directory.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct EncodeArgs {
    /// Checkpoint written by train (epoch_NNN.ck).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Which partition to encode.
    #[arg(long, value_parser = ["train", "test"], default_value = "test")]
    split: String,
    /// Output directory for <split>_images.emb and <split>_sketches.emb.
    #[arg(long)]
    out: PathBuf,
    /// Samples per forward batch.
    #[arg(long, default_value_t = 64)]
    chunk: usize,
}

#[derive(Args)]
struct RetrieveArgs {
    /// Query embedding dump (sketches).
    #[arg(long)]
    queries: PathBuf,
    /// Gallery embedding dump (images).
    #[arg(long)]
    gallery: PathBuf,
    /// Id of the query to rank for.
    #[arg(long)]
    query_id: String,
    /// Gallery ids printed, best first.
    #[arg(long, default_value_t = 8)]
    top_k: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    /// "cosine" or "hamming<bits>", e.g. hamming64.
    #[arg(long, default_value = "cosine")]
    mode: String,
    /// Seen-class training-image embeddings for fitting the ITQ codec
    /// (required for hamming modes).
    #[arg(long)]
    fit: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    itq_iterations: usize,
    /// Seeds the ITQ rotation initializer.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Also write the JSON report to this path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Render a precision@k curve PNG to this path.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long, default_value = "canny")]
    extractor: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; each variant trains under <out>/variant_N.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 3)]
    teacher_epochs: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::ExtractEdges(args) => extract_edges(args),
        Command::Train(args) => run_train(args),
        Command::Encode(args) => encode(args),
        Command::Retrieve(args) => retrieve(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Ablate(args) => ablate(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: args.classes,
        images_per_class: args.images_per_class,
        sketches_per_class: args.sketches_per_class,
        image_size: args.image_size,
        seed: args.seed,
        seen_classes: Some(args.seen),
    };
    let split = generate_synthetic_corpus(&args.out, &spec)?;
    println!(
        "generated {} train images, {} train sketches, {} test images, {} test sketches ({} seen / {} unseen classes)",
        split.train_images.len(),
        split.train_sketches.len(),
        split.test_images.len(),
        split.test_sketches.len(),
        split.label_space.num_seen(),
        split.label_space.num_classes() - split.label_space.num_seen(),
    );
    println!("manifest: {}", args.out.join("manifest.jsonl").display());
    Ok(())
}

fn canny_config(name: &str, sigma: Option<f64>, low: Option<f64>, high: Option<f64>) -> Result<ExtractorConfig> {
    if name != "canny" {
        return Err(Error::Validation(format!(
            "unknown extractor {name:?}; available: canny"
        )));
    }
    let mut config = ExtractorConfig::default();
    if let Some(s) = sigma {
        config.gaussian_sigma = s;
    }
    if let Some(l) = low {
        config.low_threshold = l;
    }
    if let Some(h) = high {
        config.high_threshold = h;
    }
    Ok(config)
}

fn extract_edges(args: ExtractEdgesArgs) -> Result<()> {
    let split = load_manifest(&args.manifest)?;
    let config = canny_config(&args.extractor, args.sigma, args.low, args.high)?;
    let extractor = CannyExtractor::new(config)?;
    let corpus = extract_corpus(&split, &extractor, &args.out)?;
    println!(
        "{} edge maps ready ({} newly extracted) under {}",
        corpus.len(),
        corpus.newly_extracted,
        args.out.join("edges").join(&corpus.extractor_name).display()
    );
    Ok(())
}

fn resolve_config(
    config_path: Option<&Path>,
    ablation: Option<&str>,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(path) = config_path {
        load_overrides(&mut config, path)?;
    }
    if let Some(spec) = ablation {
        config.ablation = Ablation::parse(spec)?;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

/// The teacher is a deterministic function of (corpus, config, seed), so
/// re-running a command rebuilds the same frozen teacher and checkpoint
/// checksums line up.
fn build_teacher(
    split: &ZeroShotSplit,
    config: &TrainConfig,
    teacher_epochs: usize,
) -> Result<TeacherModel> {
    let teacher_config = TeacherConfig {
        backbone: config.backbone.clone(),
        epochs: teacher_epochs,
        batch_size: config.batch_size,
        optimizer: config.optimizer,
    };
    log::info!("pretraining teacher for {teacher_epochs} epoch(s) on the seen classes");
    let teacher = make_teacher(
        &split.train_images,
        &split.label_space,
        &teacher_config,
        derive_seed(config.seed, fnv1a64(b"teacher")),
    )?;
    log::info!("teacher frozen, checksum {:016x}", teacher.checksum());
    Ok(teacher)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let split = load_manifest(&args.manifest)?;
    let config = resolve_config(args.config.as_deref(), args.ablation.as_deref(), args.seed)?;
    config.validate()?;
    let edges = open_corpus(&split, &args.extractor, &args.edges)?;
    let teacher = build_teacher(&split, &config, args.teacher_epochs)?;
    let outcome = train(&split, &edges, &teacher, &config, &args.out)?;
    println!(
        "trained ablation [{}] for {} epoch(s), {} step(s) this run",
        config.ablation, config.epochs, outcome.steps_run
    );
    if let (Some(first), Some(last)) = (outcome.first_total, outcome.last_total) {
        println!("total loss: first {first:.6}, last {last:.6}");
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("metrics: {}", outcome.metrics.display());
    if args.plot {
        let path = args.out.join("loss_curve.png");
        plot_loss_curve(&outcome.metrics, &path)?;
        println!("loss curve: {}", path.display());
    }
    Ok(())
}

fn plot_loss_curve(metrics: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(metrics).map_err(|e| Error::io(metrics, e))?;
    let keys = ["total", "cls", "kd", "align", "center", "triplet"];
    let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::new(); keys.len()];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let record: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Validation(format!("bad metrics line: {e}")))?;
        let step = record["step"].as_f64().unwrap_or(f64::NAN);
        for (i, key) in keys.iter().enumerate() {
            if let Some(v) = record[*key].as_f64() {
                series[i].push((step, v));
            }
        }
    }
    let drawn: Vec<plot::Series<'_>> = series
        .into_iter()
        .enumerate()
        .filter(|(_, points)| !points.is_empty())
        .map(|(i, points)| plot::Series {
            label: keys[i],
            color: plot::PALETTE[i % plot::PALETTE.len()],
            points,
        })
        .collect();
    plot::line_plot(out, "TRAINING LOSS", &drawn)
}

fn encode(args: EncodeArgs) -> Result<()> {
    let (stack, _label_space) = load_checkpoint_stack(&args.checkpoint)?;
    let split = load_manifest(&args.manifest)?;
    let (images, sketches) = match args.split.as_str() {
        "train" => (&split.train_images, &split.train_sketches),
        _ => (&split.test_images, &split.test_sketches),
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let gallery = encode_embeddings(&stack, images, Role::Gallery, args.chunk)?;
    let queries = encode_embeddings(&stack, sketches, Role::Query, args.chunk)?;
    let image_path = args.out.join(format!("{}_images.emb", args.split));
    let sketch_path = args.out.join(format!("{}_sketches.emb", args.split));
    write_embeddings(&image_path, &gallery)?;
    write_embeddings(&sketch_path, &queries)?;
    println!(
        "encoded {} images -> {}",
        gallery.len(),
        image_path.display()
    );
    println!(
        "encoded {} sketches -> {}",
        queries.len(),
        sketch_path.display()
    );
    Ok(())
}

fn retrieve(args: RetrieveArgs) -> Result<()> {
    if args.top_k == 0 {
        return Err(Error::Validation("top-k must be at least 1".into()));
    }
    let queries = read_embeddings(&args.queries, Role::Query)?;
    let gallery = read_embeddings(&args.gallery, Role::Gallery)?;
    let index = queries
        .ids
        .iter()
        .position(|id| *id == args.query_id)
        .ok_or_else(|| {
            Error::Validation(format!(
                "query id {:?} not present among the {} queries in {}",
                args.query_id,
                queries.len(),
                args.queries.display()
            ))
        })?;
    if args.top_k > gallery.len() {
        return Err(Error::Validation(format!(
            "top-k {} exceeds the gallery size {}",
            args.top_k,
            gallery.len()
        )));
    }
    let ranking = rank_cosine(queries.vectors.row(index), &gallery)?;
    for &g in ranking.iter().take(args.top_k) {
        println!("{}", gallery.ids[g]);
    }
    Ok(())
}

fn parse_mode(
    mode: &str,
    fit: Option<&Path>,
    iterations: usize,
    seed: u64,
) -> Result<EvalMode> {
    if mode == "cosine" {
        return Ok(EvalMode::Cosine);
    }
    let Some(bits) = mode.strip_prefix("hamming") else {
        return Err(Error::Validation(format!(
            "unknown mode {mode:?}; expected cosine or hamming<bits>"
        )));
    };
    let bits: usize = bits.parse().map_err(|_| {
        Error::Validation(format!(
            "unknown mode {mode:?}; expected cosine or hamming<bits> like hamming64"
        ))
    })?;
    let fit = fit.ok_or_else(|| {
        Error::Validation(
            "hamming evaluation needs --fit with seen-class training-image embeddings".into(),
        )
    })?;
    let train_set = read_embeddings(fit, Role::Gallery)?;
    let (codec, losses) = itq_fit(&train_set.vectors, bits, iterations, seed)?;
    log::info!(
        "ITQ codec fitted on {} rows: {} bits, final quantization loss {:.6}",
        train_set.len(),
        codec.bits(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(EvalMode::Hamming(codec))
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let queries = read_embeddings(&args.queries, Role::Query)?;
    let gallery = read_embeddings(&args.gallery, Role::Gallery)?;
    let mode = parse_mode(&args.mode, args.fit.as_deref(), args.itq_iterations, args.seed)?;
    let report = evaluate(&queries, &gallery, &mode)?;
    let rendered = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Validation(format!("cannot serialize report: {e}")))?;
    println!("{rendered}");
    if let Some(path) = &args.out {
        fs::write(path, format!("{rendered}\n")).map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &args.plot {
        let max_k = PREC_CUTOFF.min(gallery.len());
        let curve = precision_curve(&queries, &gallery, &mode, max_k)?;
        let points = curve
            .iter()
            .enumerate()
            .map(|(i, &p)| ((i + 1) as f64, p))
            .collect();
        plot::line_plot(
            path,
            "PRECISION@K",
            &[plot::Series {
                label: "P@K",
                color: plot::PALETTE[2],
                points,
            }],
        )?;
        println!("precision curve: {}", path.display());
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let split = load_manifest(&args.manifest)?;
    let config = resolve_config(args.config.as_deref(), None, args.seed)?;
    config.validate()?;
    let edges = open_corpus(&split, &args.extractor, &args.edges)?;
    let teacher = build_teacher(&split, &config, args.teacher_epochs)?;
    let rows = run_ablation(&split, &edges, &teacher, &config, &args.out)?;
    println!("{:<24} {:>8} {:>9}", "variant", "mAP@all", "Prec@100");
    for row in &rows {
        println!(
            "{:<24} {:>8.4} {:>9.4}",
            row.variant, row.map_all, row.prec_100
        );
    }
    println!("csv: {}", args.out.join("ablation.csv").display());
    Ok(())
}
