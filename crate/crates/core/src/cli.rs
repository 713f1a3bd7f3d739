//! Command-line front end.
//!
//! Exit codes: 0 success, 1 output could not be written, 2 bad input (usage,
//! unreadable or unsupported files, unknown preset), 3 format or weight
//! mismatch, 4 numeric failure, 5 self-check failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::clidd::DEFAULT_BLOCK;
use crate::config::{param_count, round_matches, ModelConfig, PRESETS, PUBLISHED_PARAMS};
use crate::detect::{nms_reference, nms_topk};
use crate::error::Error;
use crate::features::{format_matches, FeatureFile};
use crate::geometry::{
    corner_error, estimate_homography_ransac, synth_pair, EvalReport, PairOutcome, RansacParams, SynthParams,
    DEFAULT_JITTER, MHA_THRESHOLDS,
};
use crate::image::{read_pnm, value_noise, write_pnm};
use crate::losses::{opp_solve, random_orthogonal};
use crate::matcher::{dual_softmax_match, mnn_match, MatchSet, MATCH_TEMPERATURE, MATCH_THRESHOLD};
use crate::pipeline::{DescribePath, ExtractOptions, Extractor, Features, DEFAULT_NMS_RADIUS, DEFAULT_TOP_K};
use crate::tensor::FeatureMap;
use crate::weights::{init_weights, WeightStore};

pub const EVAL_CSV_VERSION: u32 = 1;
pub const BENCH_CSV_VERSION: u32 = 1;
pub const PROCEDURAL_HEIGHT: usize = 480;
pub const PROCEDURAL_WIDTH: usize = 640;

#[derive(Debug, Parser)]
#[command(name = "clidd", version, about = "Sparse local features with deformable cross-layer description")]
pub struct Cli {
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect and describe keypoints in a PPM/PGM image.
    Extract(ExtractArgs),
    /// Match two feature files.
    Match(MatchArgs),
    /// Homography accuracy on synthetic warps.
    EvalSynthetic(EvalArgs),
    /// Time the description stage.
    Bench(BenchArgs),
    /// Run built-in consistency checks.
    Selfcheck(SelfcheckArgs),
    /// Write seeded random weights for a preset.
    InitWeights(InitWeightsArgs),
    /// Write a procedural test image.
    Noise(NoiseArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Preset name (A48, N64, T64, S64, M64, L64, G128, E128, U128).
    #[arg(long, default_value = "A48")]
    pub config: String,
    /// CLDW weight file.
    #[arg(long, conflicts_with = "random_seed")]
    pub weights: Option<PathBuf>,
    /// Use seeded random weights instead of a file.
    #[arg(long)]
    pub random_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    pub image: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    #[arg(long, default_value_t = DEFAULT_NMS_RADIUS)]
    pub nms_radius: usize,
    /// Use the unfused reference path.
    #[arg(long, conflicts_with = "fused")]
    pub naive: bool,
    /// Use the blocked path (default).
    #[arg(long)]
    pub fused: bool,
    #[arg(long, default_value_t = DEFAULT_BLOCK)]
    pub block: usize,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Dualsoftmax,
    Mnn,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Dualsoftmax)]
    pub method: MethodArg,
    #[arg(long, default_value_t = MATCH_THRESHOLD)]
    pub threshold: f32,
    /// Dual-softmax temperature; similarities are divided by it.
    #[arg(long, default_value_t = MATCH_TEMPERATURE)]
    pub temperature: f32,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of PPM/PGM images, one pair per image.
    #[arg(long, conflicts_with = "procedural", required_unless_present = "procedural")]
    pub images: Option<PathBuf>,
    /// Number of procedural 480x640 images instead of a directory.
    #[arg(long)]
    pub procedural: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest inward corner displacement as a fraction of each side.
    #[arg(long, default_value_t = DEFAULT_JITTER)]
    pub jitter: f64,
    /// Random brightness and contrast on the warped image.
    #[arg(long)]
    pub photometric: bool,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    #[arg(long, default_value_t = 2000)]
    pub ransac_iters: usize,
    #[arg(long, default_value_t = 3.0)]
    pub ransac_threshold: f64,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PathArg {
    Naive,
    Fused,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "A48,U128")]
    pub configs: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192,16384")]
    pub n_keypoints: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "naive,fused")]
    pub paths: Vec<PathArg>,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub blocks: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Seed for weights and the procedural input image.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Perturb one preset before checking (for testing the checker).
    #[arg(long, hide = true)]
    pub corrupt_preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    #[arg(long)]
    pub config: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = PROCEDURAL_HEIGHT)]
    pub height: usize,
    #[arg(long, default_value_t = PROCEDURAL_WIDTH)]
    pub width: usize,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Image(_) | Error::Io(_) | Error::Config(_) => 2,
            Error::Shape(_)
            | Error::BadMagic { .. }
            | Error::Version { .. }
            | Error::Truncated(_)
            | Error::TensorMismatch { .. } => 3,
            Error::Numeric(_) | Error::Estimation(_) => 4,
        };
        Self::new(code, e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::new(2, e.to_string()))?
            .install(|| dispatch(cli.command)),
        None => dispatch(cli.command),
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Extract(a) => cmd_extract(&a),
        Command::Match(a) => cmd_match(&a),
        Command::EvalSynthetic(a) => cmd_eval_synthetic(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Selfcheck(a) => {
            let presets = corrupted_presets(a.corrupt_preset.as_deref())?;
            let report = selfcheck(&presets);
            print!("{}", report.render());
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::new(5, "self-check failed"))
            }
        }
        Command::InitWeights(a) => {
            let cfg = ModelConfig::by_name(&a.config)?;
            write_out(&a.out, &init_weights(&cfg, a.seed).to_bytes())
        }
        Command::Noise(a) => {
            if a.height == 0 || a.width == 0 {
                return Err(CliError::new(2, "image dimensions must be positive"));
            }
            write_pnm(&a.out, &value_noise(a.height, a.width, a.seed))
                .map_err(|e| CliError::new(1, format!("{}: {e}", a.out.display())))
        }
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::new(1, format!("cannot write {}: {e}", path.display())))
}

/// Loads or generates the weights named by `args`.
pub fn load_model(args: &ModelArgs) -> CliResult<Extractor> {
    let cfg = ModelConfig::by_name(&args.config)?;
    let store = match &args.weights {
        Some(path) => {
            let store = WeightStore::load(path)?;
            if store.config != cfg {
                return Err(CliError::new(
                    3,
                    format!("{} holds {} weights, not {}", path.display(), store.config.name, cfg.name),
                ));
            }
            store
        }
        None => init_weights(&cfg, args.random_seed.unwrap_or(0)),
    };
    Ok(Extractor::new(&store)?)
}

fn cmd_extract(a: &ExtractArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let image = read_pnm(&a.image)?;
    let options = ExtractOptions {
        top_k: a.top_k,
        nms_radius: a.nms_radius,
        path: if a.naive {
            DescribePath::Naive
        } else {
            DescribePath::Fused { block: a.block }
        },
    };
    let features = model.extract(&image, &options)?;
    let file = FeatureFile {
        config_name: model.config().name.to_string(),
        features,
    };
    write_out(&a.out, &file.to_bytes())
}

fn cmd_match(a: &MatchArgs) -> CliResult<()> {
    let fa = FeatureFile::load(&a.a).map_err(input_or_format)?;
    let fb = FeatureFile::load(&a.b).map_err(input_or_format)?;
    let (da, db) = (&fa.features.descriptors, &fb.features.descriptors);
    let matches = match a.method {
        MethodArg::Dualsoftmax => dual_softmax_match(da, db, a.temperature, a.threshold)?,
        MethodArg::Mnn => mnn_match(da, db)?,
    };
    write_out(&a.out, format_matches(&matches).as_bytes())
}

/// Missing or unreadable files are input errors; malformed ones are format
/// errors.
fn input_or_format(e: Error) -> CliError {
    match e {
        Error::Io(io) => CliError::new(2, io.to_string()),
        other => other.into(),
    }
}

/// Stable per-item seed derived from a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Matched keypoint coordinates of a match set.
pub fn matched_points(fa: &Features, fb: &Features, m: &MatchSet) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let pt = |c: [f32; 2]| [c[0] as f64, c[1] as f64];
    m.pairs
        .iter()
        .map(|p| (pt(fa.keypoints.coords[p.a]), pt(fb.keypoints.coords[p.b])))
        .unzip()
}

/// The `index`-th procedural image of an evaluation run.
pub fn procedural_image(seed: u64, index: usize) -> FeatureMap {
    value_noise(PROCEDURAL_HEIGHT, PROCEDURAL_WIDTH, derive_seed(seed, 2 * index as u64))
}

/// One evaluated synthetic pair.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub source: String,
    pub keypoints: (usize, usize),
    pub outcome: PairOutcome,
    pub status: String,
}

pub struct EvalSettings {
    pub synth: SynthParams,
    pub extract: ExtractOptions,
    pub ransac_iters: usize,
    pub ransac_threshold: f64,
    pub seed: u64,
}

/// Warps `image`, extracts and matches both views, estimates the homography
/// and scores it against the ground truth.
pub fn eval_pair(model: &Extractor, image: &FeatureMap, index: usize, settings: &EvalSettings) -> CliResult<EvalRow> {
    let (warped, h_gt) = synth_pair(image, derive_seed(settings.seed, 2 * index as u64 + 1), &settings.synth)?;
    let fa = model.extract(image, &settings.extract)?;
    let fb = model.extract(&warped, &settings.extract)?;
    let m = dual_softmax_match(&fa.descriptors, &fb.descriptors, MATCH_TEMPERATURE, MATCH_THRESHOLD)?;
    let (src, dst) = matched_points(&fa, &fb, &m);
    let params = RansacParams {
        iterations: settings.ransac_iters,
        inlier_threshold: settings.ransac_threshold,
        seed: derive_seed(settings.seed, 2 * index as u64 + 2),
    };
    let (outcome, status) = match estimate_homography_ransac(&src, &dst, &params) {
        Ok(r) => (
            PairOutcome {
                corner_error: Some(corner_error(&r.homography, &h_gt, image.width, image.height)),
                matches: m.len(),
                inliers: r.inlier_count(),
            },
            "ok".to_string(),
        ),
        Err(e) => (
            PairOutcome {
                corner_error: None,
                matches: m.len(),
                inliers: 0,
            },
            match e {
                Error::Estimation(msg) => format!("estimation failed: {msg}"),
                other => other.to_string(),
            }
            .replace(',', ";"),
        ),
    };
    Ok(EvalRow {
        source: String::new(),
        keypoints: (fa.keypoints.len(), fb.keypoints.len()),
        outcome,
        status,
    })
}

pub fn render_eval_csv(rows: &[EvalRow], config: &str, seed: u64) -> String {
    let mut out = String::new();
    writeln!(out, "# clidd eval-synthetic v{EVAL_CSV_VERSION} config={config} seed={seed}").unwrap();
    writeln!(
        out,
        "row,source,keypoints_a,keypoints_b,matches,inliers,corner_error_px,pass_1px,pass_3px,pass_5px,status"
    )
    .unwrap();
    for (i, r) in rows.iter().enumerate() {
        let o = &r.outcome;
        let err = o.corner_error.map_or(String::new(), |e| format!("{e:.6}"));
        let pass = MHA_THRESHOLDS.map(|t| u8::from(o.passes(t)));
        writeln!(
            out,
            "{i},{},{},{},{},{},{err},{},{},{},{}",
            r.source, r.keypoints.0, r.keypoints.1, o.matches, o.inliers, pass[0], pass[1], pass[2], r.status
        )
        .unwrap();
    }
    let outcomes: Vec<_> = rows.iter().map(|r| r.outcome).collect();
    let rep = EvalReport::aggregate(&outcomes, MHA_THRESHOLDS);
    writeln!(
        out,
        "aggregate,{} pairs,,,{:.2},,{:.6},{:.2},{:.2},{:.2},{} failures",
        rep.pairs, rep.mean_matches, rep.mean_corner_error, rep.mha[0], rep.mha[1], rep.mha[2], rep.failures
    )
    .unwrap();
    out
}

fn image_list(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::new(2, format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "ppm" | "pgm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::new(2, format!("no .ppm or .pgm images in {}", dir.display())));
    }
    Ok(paths)
}

fn cmd_eval_synthetic(a: &EvalArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let sources: Vec<(String, Option<PathBuf>)> = match (&a.images, a.procedural) {
        (Some(dir), _) => image_list(dir)?
            .into_iter()
            .map(|p| (p.file_name().unwrap_or_default().to_string_lossy().into_owned(), Some(p)))
            .collect(),
        (None, Some(n)) if n >= 1 => (0..n).map(|i| (format!("procedural-{i}"), None)).collect(),
        _ => return Err(CliError::new(2, "need --images DIR or --procedural N with N >= 1")),
    };
    let settings = EvalSettings {
        synth: SynthParams {
            jitter: a.jitter,
            photometric: a.photometric,
        },
        extract: ExtractOptions {
            top_k: a.top_k,
            ..Default::default()
        },
        ransac_iters: a.ransac_iters,
        ransac_threshold: a.ransac_threshold,
        seed: a.seed,
    };
    let rows = sources
        .par_iter()
        .enumerate()
        .map(|(i, (name, path))| {
            let image = match path {
                Some(p) => read_pnm(p)?,
                None => procedural_image(a.seed, i),
            };
            let mut row = eval_pair(&model, &image, i, &settings)?;
            row.source = name.replace(',', "_");
            Ok(row)
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_out(&a.out, render_eval_csv(&rows, model.config().name, a.seed).as_bytes())
}

/// One line of the benchmark table.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub config: String,
    pub path: PathArg,
    pub n_keypoints: usize,
    /// `None` for the naive path.
    pub block: Option<usize>,
    pub repeats: usize,
    pub median_ms: f64,
    pub throughput: f64,
    pub peak_aux_scalars: usize,
    pub checksum: u64,
}

pub const BENCH_COLUMNS: &str =
    "config,path,n_keypoints,block,repeats,median_ms,throughput_per_s,peak_aux_scalars,descriptor_checksum";

pub fn render_bench_csv(records: &[BenchRecord]) -> String {
    let mut out = String::new();
    writeln!(out, "# clidd bench v{BENCH_CSV_VERSION}").unwrap();
    writeln!(out, "{BENCH_COLUMNS}").unwrap();
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{:.3},{:.3},{},{:016x}",
            r.config,
            match r.path {
                PathArg::Naive => "naive",
                PathArg::Fused => "fused",
            },
            r.n_keypoints,
            r.block.map_or("-".to_string(), |b| b.to_string()),
            r.repeats,
            r.median_ms,
            r.throughput,
            r.peak_aux_scalars,
            r.checksum
        )
        .unwrap();
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times the description stage for every requested combination. Detection
/// runs once per preset on a procedural 480x640 image; the `N` keypoints are
/// the `N` strongest heatmap cells.
pub fn run_bench(a: &BenchArgs) -> CliResult<Vec<BenchRecord>> {
    if a.repeats == 0 {
        return Err(CliError::new(2, "--repeats must be at least 1"));
    }
    if a.blocks.contains(&0) {
        return Err(CliError::new(2, "block sizes must be at least 1"));
    }
    let image = value_noise(PROCEDURAL_HEIGHT, PROCEDURAL_WIDTH, a.seed);
    let mut records = Vec::new();
    for name in &a.configs {
        let cfg = ModelConfig::by_name(name)?;
        let model = Extractor::new(&init_weights(&cfg, a.seed))?;
        let (pyramid, heatmap, (h, w)) = model.dense(&image)?;
        for &n in &a.n_keypoints {
            let kps = nms_topk(&heatmap, 0, n, w, h).coords;
            for &path in &a.paths {
                let variants: Vec<(DescribePath, Option<usize>)> = match path {
                    PathArg::Naive => vec![(DescribePath::Naive, None)],
                    PathArg::Fused => a
                        .blocks
                        .iter()
                        .map(|&b| (DescribePath::Fused { block: b }, Some(b)))
                        .collect(),
                };
                for (dp, block) in variants {
                    let mut times = Vec::with_capacity(a.repeats);
                    let mut last = None;
                    for _ in 0..a.repeats {
                        let t = Instant::now();
                        let out = model.describe(&pyramid, &kps, dp)?;
                        times.push(t.elapsed().as_secs_f64() * 1e3);
                        last = Some(out);
                    }
                    let (desc, stats) = last.expect("at least one repeat");
                    let mut hasher = DefaultHasher::new();
                    desc.data.iter().for_each(|v| v.to_bits().hash(&mut hasher));
                    let median_ms = median(times);
                    records.push(BenchRecord {
                        config: cfg.name.to_string(),
                        path,
                        n_keypoints: kps.len(),
                        block,
                        repeats: a.repeats,
                        median_ms,
                        throughput: if median_ms > 0.0 { 1e3 / median_ms } else { f64::INFINITY },
                        peak_aux_scalars: stats.peak_scalars,
                        checksum: hasher.finish(),
                    });
                }
            }
        }
    }
    Ok(records)
}

fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let records = run_bench(a)?;
    write_out(&a.out, render_bench_csv(&records).as_bytes())
}

#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct SelfcheckReport {
    pub lines: Vec<CheckLine>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.lines.push(CheckLine {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn render(&self) -> String {
        let width = self.lines.iter().map(|l| l.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for l in &self.lines {
            let status = if l.passed { "PASS" } else { "FAIL" };
            writeln!(out, "{status}  {:<width$}  {}", l.name, l.detail).unwrap();
        }
        let failed = self.lines.iter().filter(|l| !l.passed).count();
        writeln!(out, "{} checks, {failed} failed", self.lines.len()).unwrap();
        out
    }
}

/// The preset table, optionally with one preset's descriptor width bumped.
pub fn corrupted_presets(name: Option<&str>) -> CliResult<Vec<ModelConfig>> {
    let mut presets = PRESETS.to_vec();
    if let Some(name) = name {
        let p = presets
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| CliError::new(2, format!("unknown preset {name}")))?;
        p.c_desc += 1;
    }
    Ok(presets)
}

pub fn selfcheck(presets: &[ModelConfig]) -> SelfcheckReport {
    let mut report = SelfcheckReport::default();

    for cfg in presets {
        let pc = param_count(cfg);
        let published = PUBLISHED_PARAMS.iter().find(|(n, _)| *n == cfg.name).map(|(_, p)| p);
        let counts = [pc.backbone, pc.detect, pc.desc, pc.total];
        let ok = published.is_some_and(|p| counts.iter().zip(p).all(|(&c, d)| round_matches(c, d)));
        let shown = published.map_or("unpublished".to_string(), |p| p.join("/"));
        report.push(
            format!("params {}", cfg.name),
            ok,
            format!(
                "{} total {} (backbone {}, detect {}, desc {}; published {shown})",
                cfg.name, pc.total, pc.backbone, pc.detect, pc.desc
            ),
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for name in ["A48", "T64"] {
        let Some(cfg) = presets.iter().find(|p| p.name == name) else { continue };
        let result = (|| -> crate::Result<f32> {
            let model = Extractor::new(&init_weights(cfg, 1))?;
            let (pyramid, _, _) = model.dense(&value_noise(64, 96, 2))?;
            let kps: Vec<[f32; 2]> = (0..100)
                .map(|_| [rng.random_range(-4.0..100.0), rng.random_range(-4.0..68.0)])
                .collect();
            let (naive, _) = model.describe(&pyramid, &kps, DescribePath::Naive)?;
            let mut worst = 0.0f32;
            for block in [1, 17, 64, 100] {
                let (fused, _) = model.describe(&pyramid, &kps, DescribePath::Fused { block })?;
                for (x, y) in naive.data.iter().zip(&fused.data) {
                    worst = worst.max((x - y).abs());
                }
            }
            Ok(worst)
        })();
        match result {
            Ok(d) => report.push(format!("fused {name}"), d <= 1e-4, format!("max |fused - naive| = {d:e}")),
            Err(e) => report.push(format!("fused {name}"), false, e.to_string()),
        }
    }

    let mut nms_ok = 0;
    let trials = 50;
    for t in 0..trials {
        let r = t % 4;
        let hm = FeatureMap::from_fn(20, 20, 1, |_, _, _| rng.random_range(0..12) as f32);
        let got = nms_topk(&hm, r, 40, 20, 20);
        let want: Vec<[f32; 2]> = nms_reference(&hm, r, 40)
            .iter()
            .map(|&(_, y, x)| [x as f32, y as f32])
            .collect();
        nms_ok += usize::from(got.coords == want);
    }
    report.push("nms oracle", nms_ok == trials, format!("{nms_ok}/{trials} random maps agree"));

    let mut opp_ok = 0;
    let instances = 20;
    for i in 0..instances {
        let d = 2 + i % 7;
        let a = nalgebra::DMatrix::from_fn(12, d, |_, _| rng.random_range(-1.0..1.0));
        let b = nalgebra::DMatrix::from_fn(12, d, |_, _| rng.random_range(-1.0..1.0));
        let cross = a.transpose() * &b;
        let Ok(omega) = opp_solve(&a, &b) else { continue };
        let best = (&cross * omega).trace();
        if (0..200).all(|_| (&cross * random_orthogonal(&mut rng, d)).trace() <= best + 1e-9) {
            opp_ok += 1;
        }
    }
    report.push(
        "procrustes optimality",
        opp_ok == instances,
        format!("{opp_ok}/{instances} instances beat 200 random rotations"),
    );
    report
}
