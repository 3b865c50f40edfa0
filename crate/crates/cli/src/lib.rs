//! Batch entry points for every pipeline stage. The `lyncean` binary is a thin
//! wrapper around [`run`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lyncean::experiment::{evaluate_clicks, load_corpus, sensitivity, write_corpus, ClickProtocol};
use lyncean::fusion::{annotate, best_match, load_proposals, MatchCriterion, DEFAULT_TOP_K};
use lyncean::imagecore::{encode_gray, load_image, load_mask, save_image, save_mask};
use lyncean::interaction::{
    build_training_pair, gen_shapes_dataset, load_pairs_manifest, rng_from, save_pairs_manifest, PairRecord, Polarity,
    Seed, SeedConstraints,
};
use lyncean::lfcn::{
    init_network, load_checkpoint, save_checkpoint, segment, train, Granularity, NetworkConfig, TrainConfig,
};
use lyncean::metrics::{confusion, EvalReport};
use lyncean::{Network32, TrainingPair32};
use lyncean_service::{ServiceConfig, DEFAULT_PORT, DEFAULT_SESSION_CAP};
use rand::RngCore;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] lyncean::Error),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for usage errors, 1 for everything that went wrong at runtime.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "lyncean", version, about = "Click-driven region segmentation and captioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of shape images and masks.
    GenShapes(GenShapesArgs),
    /// Sample click interactions for every corpus mask and write pairs.json.
    GenPairs(GenPairsArgs),
    /// Train a network on a pairs directory and write a checkpoint.
    Train(TrainArgs),
    /// Segment one image from a list of clicks.
    Segment(SegmentArgs),
    /// Score a checkpoint on a corpus or a pairs directory.
    Eval(EvalArgs),
    /// Pick the caption of the proposal that best matches a mask.
    Fuse(FuseArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Mean IoU as a function of the number of positive clicks.
    Sensitivity(SensitivityArgs),
}

#[derive(Debug, Args)]
pub struct GenShapesArgs {
    /// Number of image/mask pairs.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    /// Side length in pixels; a multiple of 8, at least 16.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn positive_usize(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

fn non_negative_f64(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a non-negative number, got {s:?}")),
    }
}

fn unit_f64(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("expected a number in [0, 1], got {s:?}")),
    }
}

/// Seed sampling flags shared by `gen-pairs`, `eval` and `sensitivity`.
#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    /// Negative clicks per MCD level.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_neg: u64,
    /// Dilation levels for the cortex rings, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 4, 8])]
    pub levels: Vec<usize>,
    /// Minimum distance between positive clicks (strict).
    #[arg(long, default_value_t = 10.0, value_parser = positive_f64)]
    pub d1: f64,
    /// Minimum distance from a positive click to the object boundary (strict).
    #[arg(long, default_value_t = 3.0, value_parser = positive_f64)]
    pub d2: f64,
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
}

impl SamplingArgs {
    fn constraints(&self) -> Result<SeedConstraints> {
        Ok(SeedConstraints::new(self.d1, self.d2)?)
    }

    fn levels(&self) -> Result<Vec<usize>> {
        if self.levels.is_empty() || self.levels.contains(&0) {
            return Err(CliError::Usage("--levels needs one or more positive integers".into()));
        }
        Ok(self.levels.clone())
    }

    fn protocol(&self, positives: usize) -> Result<ClickProtocol> {
        Ok(ClickProtocol {
            positives,
            negatives: self.n_neg as usize,
            levels: self.levels()?,
            constraints: self.constraints()?,
            rng_seed: self.rng_seed,
        })
    }
}

#[derive(Debug, Args)]
pub struct GenPairsArgs {
    /// Corpus directory written by gen-shapes.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Interaction variants sampled per image.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub variants: u64,
    /// Positive clicks per pair.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_pos: u64,
    /// Cycle the positive count through 1..=n-pos across records instead of fixing it.
    #[arg(long)]
    pub vary_n_pos: bool,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GranularityArg {
    Coarse,
    Fine,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Coarse => Granularity::Coarse,
            GranularityArg::Fine => Granularity::Fine,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding pairs.json.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "fine")]
    pub granularity: GranularityArg,
    /// Copy matching parameters from this (usually coarse) checkpoint before training.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().base_lr, value_parser = non_negative_f64)]
    pub lr: f64,
    /// Learning-rate multiplier for the head and its projections.
    #[arg(long, default_value_t = TrainConfig::default().head_lr_multiplier, value_parser = non_negative_f64)]
    pub head_lr_mult: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay, value_parser = non_negative_f64)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = TrainConfig::default().iterations)]
    pub iterations: usize,
    /// Seeds both the weight initialisation and the sample order.
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
    /// Write the per-iteration loss as a JSON array.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

/// Parses `+x,y` (positive) or `-x,y` / `−x,y` (negative).
pub fn parse_click(s: &str) -> std::result::Result<Seed, String> {
    let s = s.trim();
    let (polarity, rest) = if let Some(r) = s.strip_prefix('+') {
        (Polarity::Positive, r)
    } else if let Some(r) = s.strip_prefix('-').or_else(|| s.strip_prefix('\u{2212}')) {
        (Polarity::Negative, r)
    } else {
        return Err(format!("click {s:?} must start with + or -"));
    };
    let (x, y) = rest
        .split_once(',')
        .ok_or_else(|| format!("click {s:?} must look like +x,y"))?;
    let coord = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad coordinate {v:?} in click {s:?}"))
    };
    Ok(Seed {
        x: coord(x)?,
        y: coord(y)?,
        polarity,
    })
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Clicks such as "+16,16 -2,2"; space separated, the flag may repeat.
    #[arg(long, required = true, num_args = 1, action = clap::ArgAction::Append, value_delimiter = ' ', allow_hyphen_values = true, value_parser = parse_click)]
    pub clicks: Vec<Seed>,
    /// Output mask PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional grayscale probability PNG.
    #[arg(long)]
    pub prob: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5, value_parser = unit_f64)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["corpus", "pairs"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory; clicks are simulated (see --clicks).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Pairs directory; the recorded clicks are used as is.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Positive clicks per corpus image.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub clicks: u64,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, default_value_t = 0.5, value_parser = unit_f64)]
    pub threshold: f64,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CriterionArg {
    BoxIou,
    MaskIou,
}

impl From<CriterionArg> for MatchCriterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::BoxIou => MatchCriterion::BoxIou,
            CriterionArg::MaskIou => MatchCriterion::MaskIou,
        }
    }
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub mask: PathBuf,
    /// JSON list of {"box": [x, y, w, h], "score": s, "caption": "..."}.
    #[arg(long)]
    pub proposals: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K, value_parser = positive_usize)]
    pub top_k: usize,
    #[arg(long, value_enum, default_value = "box-iou")]
    pub criterion: CriterionArg,
    /// Source image; with --annotated, draws the chosen box and mask contour on it.
    #[arg(long, requires = "annotated")]
    pub image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    pub annotated: Option<PathBuf>,
    /// Sidecar JSON path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "LYNCEAN_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "LYNCEAN_PORT", default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long, env = "LYNCEAN_SESSION_CAP", default_value_t = DEFAULT_SESSION_CAP,
          value_parser = positive_usize)]
    pub session_cap: usize,
    #[arg(long, default_value_t = 0.5, value_parser = unit_f64)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_K, value_parser = positive_usize)]
    pub top_k: usize,
    #[arg(long, value_enum, default_value = "box-iou")]
    pub criterion: CriterionArg,
    /// Directory with the browser client, served at /.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_clicks: u64,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, default_value_t = 0.5, value_parser = unit_f64)]
    pub threshold: f64,
    /// JSON table path; an aligned text copy is written next to it with a .txt extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenShapes(a) => gen_shapes(&a),
        Command::GenPairs(a) => gen_pairs(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Segment(a) => segment_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Fuse(a) => fuse_cmd(&a),
        Command::Serve(a) => serve_cmd(&a),
        Command::Sensitivity(a) => sensitivity_cmd(&a),
    }
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).map_err(io_err(p)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_shapes(a: &GenShapesArgs) -> Result<()> {
    if a.size < 16 || !a.size.is_multiple_of(8) {
        return Err(CliError::Usage(format!(
            "--size must be a multiple of 8 and at least 16, got {}",
            a.size
        )));
    }
    let samples = gen_shapes_dataset(a.count as usize, a.size, a.size, a.rng_seed);
    let entries = write_corpus(&a.out, &samples)?;
    eprintln!("wrote {} shapes to {}", entries.len(), a.out.display());
    Ok(())
}

fn is_sampling_failure(e: &lyncean::Error) -> bool {
    matches!(
        e,
        lyncean::Error::Infeasible { .. } | lyncean::Error::EmptyRing { .. } | lyncean::Error::EmptyRegion
    )
}

fn gen_pairs(a: &GenPairsArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    if corpus.is_empty() {
        return Err(lyncean::Error::EmptyDataset.into());
    }
    let constraints = a.sampling.constraints()?;
    let levels = a.sampling.levels()?;
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    // Paths stay relative when the manifest sits in the corpus directory.
    let same_dir = a.corpus.canonicalize().ok() == a.out.canonicalize().ok();
    let base = if same_dir {
        PathBuf::new()
    } else {
        a.corpus.canonicalize().map_err(io_err(&a.corpus))?
    };
    let entries = lyncean::experiment::read_corpus_manifest(&a.corpus)?;
    let mut master = rng_from(a.sampling.rng_seed);
    let mut records = Vec::new();
    let mut skipped = 0;
    for (i, (item, entry)) in corpus.iter().zip(&entries).enumerate() {
        for v in 0..a.variants as usize {
            let rng_seed = master.next_u64();
            let n_pos = if a.vary_n_pos {
                1 + (i * a.variants as usize + v) % a.n_pos as usize
            } else {
                a.n_pos as usize
            };
            let s = &item.sample;
            let pair: TrainingPair32 = match build_training_pair(
                &s.image,
                &s.mask,
                n_pos,
                a.sampling.n_neg as usize,
                &levels,
                constraints,
                rng_seed,
            ) {
                Ok(p) => p,
                Err(e) if is_sampling_failure(&e) => {
                    eprintln!("warning: skipping {} variant {v}: {e}", item.id);
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let coords = |p: Polarity| {
                pair.seeds
                    .iter()
                    .filter(|s| s.polarity == p)
                    .map(|s| [s.x, s.y])
                    .collect::<Vec<_>>()
            };
            records.push(PairRecord {
                image: base.join(&entry.image),
                label: base.join(&entry.mask),
                pos_seeds: coords(Polarity::Positive),
                neg_seeds: coords(Polarity::Negative),
                levels: levels.clone(),
                rng_seed,
            });
        }
    }
    save_pairs_manifest(&a.out, &records)?;
    eprintln!(
        "wrote {} pairs ({skipped} skipped) to {}",
        records.len(),
        a.out.display()
    );
    Ok(())
}

fn load_pairs(dir: &Path) -> Result<Vec<(PairRecord, TrainingPair32)>> {
    load_pairs_manifest(dir)?
        .into_iter()
        .map(|r| {
            let p = r.load(dir)?;
            Ok((r, p))
        })
        .collect()
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let pairs: Vec<TrainingPair32> = load_pairs(&a.pairs)?.into_iter().map(|(_, p)| p).collect();
    let config = NetworkConfig::default().with_granularity(a.granularity.into());
    let coarse: Option<Network32> = a.init_from.as_ref().map(load_checkpoint).transpose()?;
    let net = init_network(config, a.rng_seed, coarse.as_ref())?;
    let tc = TrainConfig {
        base_lr: a.lr,
        head_lr_multiplier: a.head_lr_mult,
        weight_decay: a.weight_decay,
        iterations: a.iterations,
        rng_seed: a.rng_seed,
    };
    let (net, history) = train(&pairs, net, &tc)?;
    save_checkpoint(&net, &a.out)?;
    if let Some(p) = &a.history {
        write_json(Some(p), &history)?;
    }
    let tail = &history[history.len().saturating_sub(100)..];
    if !tail.is_empty() {
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        eprintln!(
            "trained {} iterations on {} pairs, recent loss {mean:.4}",
            history.len(),
            pairs.len()
        );
    }
    Ok(())
}

fn segment_cmd(a: &SegmentArgs) -> Result<()> {
    let net: Network32 = load_checkpoint(&a.checkpoint)?;
    let image = load_image(&a.image)?;
    let (w, h) = image.dims();
    if let Some(s) = a.clicks.iter().find(|s| !s.in_bounds(w, h)) {
        return Err(CliError::Usage(format!(
            "click ({}, {}) is outside the {w}x{h} image",
            s.x, s.y
        )));
    }
    let seg = segment(&net, &image, &a.clicks, a.threshold)?;
    save_mask(&seg.mask, &a.out)?;
    if let Some(p) = &a.prob {
        let gray: Vec<u8> = seg.prob.data().iter().map(|&v| (255.0 * v).round() as u8).collect();
        std::fs::write(p, encode_gray(w, h, &gray)?).map_err(io_err(p))?;
    }
    eprintln!("mask has {} foreground pixels", seg.mask.count());
    Ok(())
}

/// Metrics of `net` on every pair, using the clicks recorded in the manifest.
pub fn eval_pairs(net: &Network32, dir: &Path, threshold: f64) -> Result<EvalReport> {
    let rows = load_pairs(dir)?
        .into_iter()
        .enumerate()
        .map(|(i, (r, p))| {
            let seg = segment(net, &p.image, &p.seeds, threshold)?;
            let stem = r
                .image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((format!("{i:04}-{stem}"), confusion(&seg.mask, &p.label)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::build(rows)?)
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let net: Network32 = load_checkpoint(&a.checkpoint)?;
    let report = match (&a.corpus, &a.pairs) {
        (Some(dir), None) => {
            let corpus = load_corpus(dir)?;
            let k = a.clicks as usize;
            evaluate_clicks(&net, &corpus, &a.sampling.protocol(k)?, k, a.threshold)?
        }
        (None, Some(dir)) => eval_pairs(&net, dir, a.threshold)?,
        _ => unreachable!("clap enforces exactly one source"),
    };
    let m = report.mean;
    eprintln!(
        "{} images: pixel_acc {:.4} mean_acc {:.4} mean_iou {:.4} fg_iou {:.4}",
        report.images.len(),
        m.pixel_acc,
        m.mean_acc,
        m.mean_iou,
        m.fg_iou
    );
    write_json(a.out.as_deref(), &report)
}

fn fuse_cmd(a: &FuseArgs) -> Result<()> {
    let mask = load_mask(&a.mask)?;
    let proposals = load_proposals(&a.proposals)?;
    let result = best_match(&mask, &proposals, a.top_k, a.criterion.into())?;
    let sidecar = match (&a.image, &a.annotated) {
        (Some(img), Some(out)) => {
            let (annotated, sidecar) = annotate(&load_image(img)?, &mask, &result)?;
            save_image(&annotated, out)?;
            sidecar
        }
        _ => (&result).into(),
    };
    write_json(a.out.as_deref(), &sidecar)
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let net: Network32 = load_checkpoint(&a.checkpoint)?;
    let config = ServiceConfig {
        session_cap: a.session_cap,
        threshold: a.threshold,
        top_k: a.top_k,
        criterion: a.criterion.into(),
        static_dir: a.static_dir.clone(),
    };
    let addr = std::net::SocketAddr::new(a.host, a.port);
    let runtime = tokio::runtime::Runtime::new().map_err(io_err(Path::new("<tokio runtime>")))?;
    eprintln!("listening on http://{addr}");
    runtime
        .block_on(lyncean_service::serve(net, config, addr))
        .map_err(|source| CliError::Io {
            path: PathBuf::from(addr.to_string()),
            source,
        })
}

fn sensitivity_cmd(a: &SensitivityArgs) -> Result<()> {
    let net: Network32 = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let max = a.max_clicks as usize;
    let table = sensitivity(&net, &corpus, &a.sampling.protocol(max)?, max, a.threshold)?;
    let text = table.to_text();
    match &a.out {
        Some(p) => {
            write_json(Some(p), &table)?;
            let txt = p.with_extension("txt");
            std::fs::write(&txt, &text).map_err(io_err(&txt))?;
            print!("{text}");
        }
        None => write_json(None, &table)?,
    }
    Ok(())
}
