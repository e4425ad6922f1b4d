//! Command-line surface: scene generation, inversion, single transfers,
//! batch dataset stylization, metrics reports, and a built-in selftest.
//!
//! Exit codes: 0 success (including `--help`/`--version`), 1 invalid
//! input or configuration, 2 I/O failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::adain::FallbackPolicy;
use crate::diffusion::{
    invert, make_schedule, replay, ToyAttentionDenoiser, DEFAULT_SKIP, DEFAULT_STEPS,
};
use crate::eval::{
    channel_stat_vector, frechet_gaussian, gen_scene, per_class_stat_error, psnr, GaussianStats,
    ScenePalette,
};
use crate::io::{
    atomic_write, load_fmap, load_image, load_mask, save_fmap, save_image, save_mask, FileRecord,
    RunManifest, ENGINE_VERSION,
};
use crate::pipeline::{
    baseline_adain_diffusion, baseline_cross_image, transfer, QuerySource, TransferConfig,
    TransferMode, DEFAULT_P,
};
use crate::tensor::FeatureMap;
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "semstyle",
    version = ENGINE_VERSION,
    about = "Semantically consistent style transfer on deterministic diffusion features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural scenes with ground-truth masks.
    GenScenes(GenScenesArgs),
    /// Invert an image into a replayable diffusion trajectory.
    Invert(InvertArgs),
    /// Transfer one style image onto one content image.
    Transfer(TransferArgs),
    /// Stylize every image of a content directory with one style reference.
    Batch(BatchArgs),
    /// Compare image sets: Fréchet distance, optional PSNR and per-class
    /// statistic error.
    Metrics(MetricsArgs),
    /// Run the built-in invariant battery.
    Selftest,
}

#[derive(Args)]
struct GenScenesArgs {
    /// Directory receiving scene_NNNN.png and scene_NNNN_mask.png files.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Base seed; scene i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Palette preset: day, snow, night, fog.
    #[arg(long, default_value = "day")]
    palette: String,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    /// Number of scenes to generate (evaluation-set size).
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Objects placed per scene.
    #[arg(long, default_value_t = 3)]
    objects: usize,
}

#[derive(Args)]
struct InvertArgs {
    /// Input image (.png) or tensor (.fmap).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination for the fully noised latent (.fmap).
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON report with the round-trip error.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Transfer options shared by `transfer` and `batch`.
#[derive(Args, Clone)]
struct TransferOpts {
    /// Transfer variant.
    #[arg(long, value_enum, default_value_t = ModeArg::Cactif)]
    mode: ModeArg,
    /// Fraction of attention rows kept on the content branch (cactif only).
    #[arg(long, default_value_t = DEFAULT_P)]
    p: f64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    /// Denoising steps skipped at the start.
    #[arg(long, default_value_t = DEFAULT_SKIP)]
    skip: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Attention sites to hook, as HxW names.
    #[arg(long, value_delimiter = ',', default_value = "16x16,32x32")]
    sites: Vec<String>,
    /// Statistics fallback for classes present on only one side.
    #[arg(long, value_enum, default_value_t = FallbackArg::Global)]
    fallback: FallbackArg,
    /// Source of the output stream's attention queries.
    #[arg(long, value_enum, default_value_t = QueryArg::OutputStream)]
    query_source: QueryArg,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum ModeArg {
    Adain,
    Cross,
    Cacti,
    Cactif,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum FallbackArg {
    Global,
    Identity,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum QueryArg {
    OutputStream,
    ContentReplay,
}

impl TransferOpts {
    fn mode(&self) -> TransferMode {
        match self.mode {
            ModeArg::Adain => TransferMode::AdainDiffusion,
            ModeArg::Cross => TransferMode::CrossImageAttention,
            ModeArg::Cacti => TransferMode::Cacti,
            ModeArg::Cactif => TransferMode::Cactif,
        }
    }

    fn to_config(&self) -> TransferConfig {
        let mut cfg = TransferConfig::for_mode(self.mode());
        cfg.p = self.p;
        cfg.steps = self.steps;
        cfg.skip = self.skip;
        cfg.seed = self.seed;
        cfg.sites = self.sites.clone();
        cfg.fallback = match self.fallback {
            FallbackArg::Global => FallbackPolicy::GlobalStyleStats,
            FallbackArg::Identity => FallbackPolicy::Identity,
        };
        cfg.query_source = match self.query_source {
            QueryArg::OutputStream => QuerySource::OutputStream,
            QueryArg::ContentReplay => QuerySource::ContentReplay,
        };
        cfg
    }

    fn needs_masks(&self) -> bool {
        matches!(self.mode, ModeArg::Cacti | ModeArg::Cactif)
    }

    fn build_denoiser(&self) -> Result<ToyAttentionDenoiser> {
        let mut resolutions = Vec::with_capacity(self.sites.len());
        for site in &self.sites {
            resolutions.push(parse_site(site)?);
        }
        ToyAttentionDenoiser::new(self.seed, &resolutions)
    }
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    /// Content label mask (required for cacti and cactif).
    #[arg(long)]
    content_mask: Option<PathBuf>,
    /// Style label mask (required for cacti and cactif).
    #[arg(long)]
    style_mask: Option<PathBuf>,
    #[command(flatten)]
    opts: TransferOpts,
    /// Output image (.png) or tensor (.fmap).
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON run manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct BatchArgs {
    /// Directory of content PNGs; masks follow the <stem>_mask.png
    /// convention.
    #[arg(long)]
    content_dir: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    style_mask: Option<PathBuf>,
    #[command(flatten)]
    opts: TransferOpts,
    /// Output directory; receives one PNG per content image plus
    /// manifest.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Directory of generated images.
    #[arg(long)]
    generated: PathBuf,
    /// Directory of reference images (content scenes or target-domain set).
    #[arg(long)]
    reference: PathBuf,
    /// Also report PSNR between files sharing a name in both directories.
    #[arg(long)]
    paired: bool,
    /// Style image enabling per-class statistic error (needs masks in the
    /// reference directory and --style-mask).
    #[arg(long)]
    style: Option<PathBuf>,
    #[arg(long)]
    style_mask: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the CLI on the given arguments, returning the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(argv.iter()) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let command_echo: Vec<String> =
        argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.command {
        Command::GenScenes(a) => run_gen_scenes(&a),
        Command::Invert(a) => run_invert(&a),
        Command::Transfer(a) => run_transfer_cmd(&a, command_echo),
        Command::Batch(a) => run_batch(&a, command_echo),
        Command::Metrics(a) => run_metrics(&a),
        Command::Selftest => run_selftest(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn parse_site(site: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = site.split('x').collect();
    let parse = |s: &str| -> Option<usize> { s.parse().ok().filter(|&v| v >= 1) };
    match parts.as_slice() {
        [h, w] => match (parse(h), parse(w)) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::Config(format!("site {site:?} is not of the form HxW"))),
        },
        _ => Err(Error::Config(format!("site {site:?} is not of the form HxW"))),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Io { path: dir.to_path_buf(), reason: e.to_string() })
}

fn load_any(path: &Path) -> Result<FeatureMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => load_image(path),
        Some("fmap") => load_fmap(path),
        _ => Err(Error::InvalidInput(format!(
            "{} must end in .png or .fmap",
            path.display()
        ))),
    }
}

fn save_any(f: &FeatureMap, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => save_image(f, path),
        Some("fmap") => save_fmap(f, path),
        _ => Err(Error::InvalidInput(format!(
            "{} must end in .png or .fmap",
            path.display()
        ))),
    }
}

/// PNG files in a directory, sorted by name, excluding mask files.
fn list_scene_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::Io { path: dir.to_path_buf(), reason: e.to_string() })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry =
            entry.map_err(|e| Error::Io { path: dir.to_path_buf(), reason: e.to_string() })?;
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if name.ends_with(".png") && !name.ends_with("_mask.png") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn mask_path_for(image_path: &Path) -> PathBuf {
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    image_path.with_file_name(format!("{stem}_mask.png"))
}

fn run_gen_scenes(args: &GenScenesArgs) -> Result<()> {
    let palette = ScenePalette::from_name(&args.palette)?;
    ensure_dir(&args.out_dir)?;
    for i in 0..args.count {
        let seed = args.seed.wrapping_add(i as u64);
        let (img, mask) = gen_scene(seed, &palette, args.height, args.width, args.objects)?;
        let img_path = args.out_dir.join(format!("scene_{i:04}.png"));
        save_image(&img, &img_path)?;
        save_mask(&mask, &mask_path_for(&img_path))?;
    }
    println!(
        "wrote {} {} scene(s) at {}x{} to {}",
        args.count,
        args.palette,
        args.height,
        args.width,
        args.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct InvertReport {
    engine_version: String,
    input: FileRecord,
    steps: usize,
    seed: u64,
    roundtrip_max_abs_error: f64,
    latent: FileRecord,
}

fn run_invert(args: &InvertArgs) -> Result<()> {
    let img = load_any(&args.input)?;
    let sched = make_schedule(args.steps, 0)?;
    let mut d = ToyAttentionDenoiser::new(args.seed, &[(16, 16), (32, 32)])?;
    let traj = invert(&img, &mut d, &sched, args.seed.wrapping_add(1))?;
    let replayed = replay(&traj, &mut d, &sched)?;
    let roundtrip = replayed.max_abs_diff(&img)? as f64;
    let latent = traj
        .latent(args.steps)
        .ok_or_else(|| Error::InvalidState("trajectory lacks its final latent".into()))?;
    save_fmap(latent, &args.out)?;
    if let Some(report_path) = &args.report {
        let report = InvertReport {
            engine_version: ENGINE_VERSION.to_string(),
            input: FileRecord::for_file(&args.input)?,
            steps: args.steps,
            seed: args.seed,
            roundtrip_max_abs_error: roundtrip,
            latent: FileRecord::for_file(&args.out)?,
        };
        let json = serde_json::to_vec_pretty(&report)
            .map_err(|e| Error::InvalidState(format!("report serialization failed: {e}")))?;
        atomic_write(report_path, &json)?;
    }
    println!(
        "inverted {} over {} steps; round-trip max abs error {:.3e}",
        args.input.display(),
        args.steps,
        roundtrip
    );
    Ok(())
}

fn execute_transfer(
    content: &FeatureMap,
    style: &FeatureMap,
    masks: Option<(&crate::tensor::SegmentationMask, &crate::tensor::SegmentationMask)>,
    cfg: &TransferConfig,
    d: &mut ToyAttentionDenoiser,
) -> Result<FeatureMap> {
    match cfg.mode {
        TransferMode::AdainDiffusion => baseline_adain_diffusion(content, style, cfg, d),
        TransferMode::CrossImageAttention => baseline_cross_image(content, style, cfg, d),
        TransferMode::Cacti | TransferMode::Cactif => {
            let (cm, sm) = masks.ok_or_else(|| {
                Error::InvalidInput(
                    "cacti and cactif need --content-mask and --style-mask".into(),
                )
            })?;
            transfer(content, style, cm, sm, cfg, d)
        }
    }
}

fn run_transfer_cmd(args: &TransferArgs, command_echo: Vec<String>) -> Result<()> {
    let cfg = args.opts.to_config();
    cfg.validate()?;
    let content = load_any(&args.content)?;
    let style = load_any(&args.style)?;
    let masks = if args.opts.needs_masks() {
        let cm_path = args.content_mask.as_ref().ok_or_else(|| {
            Error::InvalidInput("this mode needs --content-mask".into())
        })?;
        let sm_path = args.style_mask.as_ref().ok_or_else(|| {
            Error::InvalidInput("this mode needs --style-mask".into())
        })?;
        Some((load_mask(cm_path)?, load_mask(sm_path)?))
    } else {
        None
    };
    let mut d = args.opts.build_denoiser()?;
    let out = execute_transfer(
        &content,
        &style,
        masks.as_ref().map(|(c, s)| (c, s)),
        &cfg,
        &mut d,
    )?;
    save_any(&out, &args.out)?;

    if let Some(manifest_path) = &args.manifest {
        let mut manifest = RunManifest::new(command_echo, cfg.clone());
        manifest.inputs.insert("content".into(), FileRecord::for_file(&args.content)?);
        manifest.inputs.insert("style".into(), FileRecord::for_file(&args.style)?);
        if let Some(p) = &args.content_mask {
            manifest.inputs.insert("content-mask".into(), FileRecord::for_file(p)?);
        }
        if let Some(p) = &args.style_mask {
            manifest.inputs.insert("style-mask".into(), FileRecord::for_file(p)?);
        }
        manifest.outputs.push(FileRecord::for_file(&args.out)?);
        manifest.metrics.insert("psnr_vs_content_db".into(), psnr(&out, &content, 1.0)?);
        manifest
            .metrics
            .insert("max_abs_vs_content".into(), out.max_abs_diff(&content)? as f64);
        manifest.save(manifest_path)?;
    }
    println!(
        "wrote {} ({:?}, p={}, {} of {} steps executed)",
        args.out.display(),
        cfg.mode,
        cfg.p,
        cfg.steps - cfg.skip,
        cfg.steps
    );
    Ok(())
}

fn run_batch(args: &BatchArgs, command_echo: Vec<String>) -> Result<()> {
    let base_cfg = args.opts.to_config();
    base_cfg.validate()?;
    ensure_dir(&args.out_dir)?;
    let in_dir = fs::canonicalize(&args.content_dir)
        .map_err(|e| Error::Io { path: args.content_dir.clone(), reason: e.to_string() })?;
    let out_dir = fs::canonicalize(&args.out_dir)
        .map_err(|e| Error::Io { path: args.out_dir.clone(), reason: e.to_string() })?;
    if in_dir == out_dir {
        return Err(Error::InvalidInput(
            "--out-dir must differ from --content-dir (outputs keep input names)".into(),
        ));
    }
    let contents = list_scene_pngs(&args.content_dir)?;
    if contents.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no content PNGs found in {}",
            args.content_dir.display()
        )));
    }
    let style = load_any(&args.style)?;
    let style_mask = match &args.style_mask {
        Some(p) => Some(load_mask(p)?),
        None if args.opts.needs_masks() => {
            return Err(Error::InvalidInput("this mode needs --style-mask".into()))
        }
        None => None,
    };

    let mut manifest = RunManifest::new(command_echo, base_cfg.clone());
    manifest.inputs.insert("style".into(), FileRecord::for_file(&args.style)?);
    if let Some(p) = &args.style_mask {
        manifest.inputs.insert("style-mask".into(), FileRecord::for_file(p)?);
    }

    for (i, content_path) in contents.iter().enumerate() {
        let name = content_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidInput(format!("bad file name under {}", in_dir.display())))?
            .to_string();
        let content = load_image(content_path)?;
        let mut cfg = base_cfg.clone();
        cfg.seed = base_cfg.seed.wrapping_add(i as u64);
        // Each item behaves exactly like a standalone `transfer` with
        // seed + i: the denoiser is rebuilt with the per-item seed.
        let mut opts = args.opts.clone();
        opts.seed = cfg.seed;
        let mut d = opts.build_denoiser()?;
        manifest.inputs.insert(format!("content/{name}"), FileRecord::for_file(content_path)?);
        let masks = if args.opts.needs_masks() {
            let mask_path = mask_path_for(content_path);
            let cm = load_mask(&mask_path)?;
            manifest
                .inputs
                .insert(format!("content-mask/{name}"), FileRecord::for_file(&mask_path)?);
            Some((cm, style_mask.clone().expect("checked above")))
        } else {
            None
        };
        let out = execute_transfer(
            &content,
            &style,
            masks.as_ref().map(|(c, s)| (c, s)),
            &cfg,
            &mut d,
        )?;
        let out_path = args.out_dir.join(&name);
        save_image(&out, &out_path)?;
        manifest.outputs.push(FileRecord::for_file(&out_path)?);
    }
    manifest.save(&args.out_dir.join("manifest.json"))?;
    println!(
        "stylized {} image(s) into {} (manifest.json written)",
        contents.len(),
        args.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PairedPsnr {
    mean_db: f64,
    per_image_db: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct ClassStatReport {
    mean: f64,
    per_image: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct MetricsReport {
    engine_version: String,
    generated_dir: String,
    reference_dir: String,
    generated_count: usize,
    reference_count: usize,
    frechet: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    psnr: Option<PairedPsnr>,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_stat_error: Option<ClassStatReport>,
}

fn run_metrics(args: &MetricsArgs) -> Result<()> {
    let gen_files = list_scene_pngs(&args.generated)?;
    let ref_files = list_scene_pngs(&args.reference)?;
    if gen_files.len() < 2 || ref_files.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 images per side for a covariance, found {} and {}",
            gen_files.len(),
            ref_files.len()
        )));
    }
    let stat_vectors = |files: &[PathBuf]| -> Result<Vec<Vec<f64>>> {
        files.iter().map(|p| channel_stat_vector(&load_image(p)?)).collect()
    };
    let gen_stats = GaussianStats::fit(&stat_vectors(&gen_files)?)?;
    let ref_stats = GaussianStats::fit(&stat_vectors(&ref_files)?)?;
    let frechet = frechet_gaussian(&gen_stats, &ref_stats)?;

    let psnr_report = if args.paired {
        let ref_by_name: BTreeMap<String, &PathBuf> = ref_files
            .iter()
            .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(|n| (n.to_string(), p)))
            .collect();
        let mut per_image_db = BTreeMap::new();
        for gen_path in &gen_files {
            let Some(name) = gen_path.file_name().and_then(|n| n.to_str()) else { continue };
            if let Some(ref_path) = ref_by_name.get(name) {
                let db = psnr(&load_image(gen_path)?, &load_image(ref_path)?, 1.0)?;
                per_image_db.insert(name.to_string(), db);
            }
        }
        if per_image_db.is_empty() {
            return Err(Error::InvalidInput(
                "--paired found no file names common to both directories".into(),
            ));
        }
        let mean_db = per_image_db.values().sum::<f64>() / per_image_db.len() as f64;
        Some(PairedPsnr { mean_db, per_image_db })
    } else {
        None
    };

    let class_report = match (&args.style, &args.style_mask) {
        (Some(style_path), Some(style_mask_path)) => {
            let style = load_image(style_path)?;
            let style_mask = load_mask(style_mask_path)?;
            let mut per_image = BTreeMap::new();
            for gen_path in &gen_files {
                let Some(name) = gen_path.file_name().and_then(|n| n.to_str()) else { continue };
                // The generated image keeps its content's layout, so its
                // mask is the reference directory's mask of the same name.
                let mask_path = mask_path_for(&args.reference.join(name));
                let mask = load_mask(&mask_path)?;
                let img = load_image(gen_path)?;
                let table =
                    crate::adain::ClassStatsTable::build(&img, &mask, &style, &style_mask)?;
                per_image.insert(name.to_string(), per_class_stat_error(&img, &table, &mask)?);
            }
            if per_image.is_empty() {
                return Err(Error::InvalidInput("no generated images to score".into()));
            }
            let mean = per_image.values().sum::<f64>() / per_image.len() as f64;
            Some(ClassStatReport { mean, per_image })
        }
        (None, None) => None,
        _ => {
            return Err(Error::InvalidInput(
                "--style and --style-mask must be given together".into(),
            ))
        }
    };

    let report = MetricsReport {
        engine_version: ENGINE_VERSION.to_string(),
        generated_dir: args.generated.display().to_string(),
        reference_dir: args.reference.display().to_string(),
        generated_count: gen_files.len(),
        reference_count: ref_files.len(),
        frechet,
        psnr: psnr_report,
        class_stat_error: class_report,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidState(format!("report serialization failed: {e}")))?;
    match &args.out {
        Some(path) => atomic_write(path, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

type CheckResult = std::result::Result<(), String>;

fn check(ok: bool, detail: &str) -> CheckResult {
    if ok {
        Ok(())
    } else {
        Err(detail.to_string())
    }
}

type Check = (&'static str, fn() -> CheckResult);

fn selftest_checks() -> Vec<Check> {
    use crate::adain::{adain, class_adain, ClassStatsTable};
    use crate::attention::{
        cross_image_attention, filtered_cross_attention, percentile_filter, self_attention,
        AttentionProjections, SimilarityScores, SourceTag,
    };
    use crate::diffusion::AnalyticDenoiser;
    use crate::pipeline::AdainScope;
    use crate::tensor::{channel_stats, masked_class_stats, Matrix, SegmentationMask};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_projections(rng: &mut ChaCha8Rng, n: usize, d: usize, tag: SourceTag) -> AttentionProjections {
        let mut m = || {
            let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Matrix::new(n, d, data).unwrap()
        };
        AttentionProjections::new(m(), m(), m(), "s".into(), tag).unwrap()
    }

    vec![
        ("schedule defaults", || {
            let s = make_schedule(DEFAULT_STEPS, DEFAULT_SKIP).map_err(|e| e.to_string())?;
            check(s.steps() == 50 && s.skip() == 30, "bad defaults")?;
            for t in 1..=s.steps() {
                check(s.alpha_bar(t) < s.alpha_bar(t - 1), "alpha_bar not decreasing")?;
            }
            Ok(())
        }),
        ("adain identity", || {
            let x = FeatureMap::new(1, 2, 2, vec![0.1, 0.4, 0.7, 0.9]).map_err(|e| e.to_string())?;
            let out = adain(&x, &x).map_err(|e| e.to_string())?;
            check(out.max_abs_diff(&x).unwrap() < 1e-4, "adain(x, x) drifted")
        }),
        ("class adain matches style statistics", || {
            let content = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).map_err(|e| e.to_string())?;
            let style = FeatureMap::new(1, 2, 2, vec![10.0, 12.0, 20.0, 22.0]).map_err(|e| e.to_string())?;
            let mask = SegmentationMask::new(2, 2, vec![0, 0, 1, 1], 255).map_err(|e| e.to_string())?;
            let out = class_adain(&content, &style, &mask, &mask, FallbackPolicy::GlobalStyleStats)
                .map_err(|e| e.to_string())?;
            for class_id in [0u32, 1] {
                let got = masked_class_stats(&out, &mask, class_id).map_err(|e| e.to_string())?;
                let want = masked_class_stats(&style, &mask, class_id).map_err(|e| e.to_string())?;
                check(
                    (got.mean[0] - want.mean[0]).abs() < 1e-3
                        && (got.std[0] - want.std[0]).abs() < 1e-3,
                    "per-class stats diverged",
                )?;
            }
            Ok(())
        }),
        ("percentile filter counts", || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for n in [1usize, 7, 32] {
                for p in [0.0f64, 0.25, 0.5, 1.0] {
                    let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let scores = SimilarityScores::new(values).map_err(|e| e.to_string())?;
                    let decision = percentile_filter(&scores, p).map_err(|e| e.to_string())?;
                    let expected = (p * n as f64).floor() as usize;
                    check(
                        decision.filtered_count() == expected.min(n),
                        "filtered count mismatch",
                    )?;
                }
            }
            Ok(())
        }),
        ("filtering reduction identities", || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for _ in 0..50 {
                let n = rng.gen_range(1..=16);
                let d = rng.gen_range(1..=8);
                let content = random_projections(&mut rng, n, d, SourceTag::Content);
                let style = random_projections(&mut rng, n, d, SourceTag::Style);
                let p0 = filtered_cross_attention(&content, &style, 0.0).map_err(|e| e.to_string())?;
                let cross = cross_image_attention(&content, &style).map_err(|e| e.to_string())?;
                check(p0.max_abs_diff(&cross).unwrap() <= 1e-6, "p=0 is not cross attention")?;
                let p1 = filtered_cross_attention(&content, &style, 1.0).map_err(|e| e.to_string())?;
                let own = self_attention(&content).map_err(|e| e.to_string())?;
                check(p1.max_abs_diff(&own).unwrap() <= 1e-6, "p=1 is not self attention")?;
            }
            Ok(())
        }),
        ("analytic inversion round trip", || {
            let z0 = FeatureMap::new(1, 2, 2, vec![0.2, -0.4, 0.8, 0.5]).map_err(|e| e.to_string())?;
            let sched = make_schedule(10, 0).map_err(|e| e.to_string())?;
            let mut d = AnalyticDenoiser::new();
            let traj = invert(&z0, &mut d, &sched, 3).map_err(|e| e.to_string())?;
            let back = replay(&traj, &mut d, &sched).map_err(|e| e.to_string())?;
            check(back.max_abs_diff(&z0).unwrap() <= 1e-6, "analytic replay diverged")
        }),
        ("toy denoiser inversion round trip", || {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let data: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.gen_range(0.0..1.0)).collect();
            let z0 = FeatureMap::new(3, 8, 8, data).map_err(|e| e.to_string())?;
            let sched = make_schedule(10, 0).map_err(|e| e.to_string())?;
            let mut d = ToyAttentionDenoiser::new(4, &[(4, 4), (8, 8)]).map_err(|e| e.to_string())?;
            let traj = invert(&z0, &mut d, &sched, 8).map_err(|e| e.to_string())?;
            let back = replay(&traj, &mut d, &sched).map_err(|e| e.to_string())?;
            check(back.max_abs_diff(&z0).unwrap() <= 1e-3, "toy replay diverged")
        }),
        ("pipeline mode identity", || {
            let palette = ScenePalette::day();
            let (content, cm) = gen_scene(31, &palette, 8, 16, 1).map_err(|e| e.to_string())?;
            let (style, sm) =
                gen_scene(32, &ScenePalette::snow(), 8, 16, 1).map_err(|e| e.to_string())?;
            let mut cfg = TransferConfig::for_mode(TransferMode::Cactif);
            cfg.p = 0.0;
            cfg.steps = 6;
            cfg.skip = 3;
            cfg.sites = vec!["4x4".into()];
            let mut cacti_cfg = cfg.clone();
            cacti_cfg.mode = TransferMode::Cacti;
            cacti_cfg.adain_scope = AdainScope::ClassWise;
            let mut d = ToyAttentionDenoiser::new(6, &[(4, 4)]).map_err(|e| e.to_string())?;
            let a = transfer(&content, &style, &cm, &sm, &cfg, &mut d).map_err(|e| e.to_string())?;
            let b = transfer(&content, &style, &cm, &sm, &cacti_cfg, &mut d)
                .map_err(|e| e.to_string())?;
            check(a == b, "cactif(p=0) differs from cacti")
        }),
        ("frechet closed form", || {
            let a = GaussianStats::new(vec![0.0], DMatrix::from_row_slice(1, 1, &[1.0]))
                .map_err(|e| e.to_string())?;
            let b = GaussianStats::new(vec![3.0], DMatrix::from_row_slice(1, 1, &[4.0]))
                .map_err(|e| e.to_string())?;
            let d = frechet_gaussian(&a, &b).map_err(|e| e.to_string())?;
            check((d - 10.0).abs() <= 1e-6, "1-D closed form violated")
        }),
        ("tensor file round trip", || {
            let f = FeatureMap::new(2, 3, 4, (0..24).map(|i| i as f32 * 0.37 - 2.0).collect())
                .map_err(|e| e.to_string())?;
            let bytes = crate::io::encode_fmap(&f).map_err(|e| e.to_string())?;
            let back =
                crate::io::decode_fmap(&bytes, Path::new("selftest")).map_err(|e| e.to_string())?;
            check(f == back, "FMAP round trip not bit-exact")
        }),
        ("psnr hand value", || {
            let a = FeatureMap::filled(1, 4, 4, 100.0).map_err(|e| e.to_string())?;
            let b = FeatureMap::filled(1, 4, 4, 116.0).map_err(|e| e.to_string())?;
            let db = psnr(&a, &b, 255.0).map_err(|e| e.to_string())?;
            check((db - 24.0490).abs() < 1e-3, "psnr hand value violated")
        }),
        ("global stats equal single-class masked stats", || {
            let f = FeatureMap::new(1, 2, 3, vec![0.1, 0.9, 0.4, 0.2, 0.7, 0.3])
                .map_err(|e| e.to_string())?;
            let mask = SegmentationMask::filled(2, 3, 0);
            let global = channel_stats(&f).map_err(|e| e.to_string())?;
            let masked = masked_class_stats(&f, &mask, 0).map_err(|e| e.to_string())?;
            check(global == masked, "masked full-coverage stats diverge from global")?;
            let table = ClassStatsTable::build(&f, &mask, &f, &mask).map_err(|e| e.to_string())?;
            check(table.valid_classes().count() == 1, "table missed the single class")
        }),
    ]
}

fn run_selftest() -> Result<()> {
    let mut failures = 0usize;
    let checks = selftest_checks();
    let total = checks.len();
    for (name, f) in checks {
        match f() {
            Ok(()) => println!("ok   {name}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failures == 0 {
        println!("selftest passed ({total} checks)");
        Ok(())
    } else {
        Err(Error::InvalidState(format!("{failures} of {total} selftest checks failed")))
    }
}
