//! `taxa`: synthetic dataset generation, progressive training, guided
//! sampling and probe-based evaluation, driven by one JSON config.

mod failure;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use taxa_core::checkpoint::{Checkpoint, CheckpointError};
use taxa_core::config::{GuidanceMode, Precision, ProjectConfig, Strategy};
use taxa_core::dataset::{build_dataset, load_manifest, DatasetManifest, Split};
use taxa_core::eval::{check_reliability, evaluate, load_generated, train_probe, EvalError, Probe, Reliability};
use taxa_core::sampler::{sample, sample_file_name, write_samples, GuidanceConfig, SampleRecord, SampleRun};
use taxa_core::taxonomy::{TaxonPath, TaxonomyLevel, TaxonomyTree, LEVEL_NAMES, NUM_LEVELS};
use taxa_core::trainer::{checkpoint_config, Project, TrainData, TrainOptions};
use taxa_numeric::Scalar;

use failure::{code, CliResult, Failure};

/// Species with at most this many samples are listed as rare.
const RARE_MAX: usize = 5;

#[derive(Parser)]
#[command(name = "taxa", version, about = "Taxonomy-conditioned progressive diffusion at desk scale")]
struct Cli {
    /// Log filter passed to env_logger, e.g. `info` or `taxa_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset and write its manifest.
    GenData(GenDataArgs),
    /// Train a project with the given strategy.
    Train(TrainArgs),
    /// Generate images for one taxonomy path.
    Sample(SampleArgs),
    /// Score generated images with a trained probe.
    Eval(EvalArgs),
    /// Train the evaluation probe on real images.
    ProbeTrain(ProbeTrainArgs),
    /// Summarize a dataset manifest.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overwrite a non-empty dataset directory.
    #[arg(long)]
    force: bool,
    /// Overrides `data.spec.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `data.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to `training.strategy`.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this progressive stage.
    #[arg(long)]
    through_level: Option<usize>,
    /// Stop after this many optimizer steps and write `interrupted.taxd`.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Full path `Kingdom-Phylum-Class-Order-Family-Genus-Species`.
    #[arg(long)]
    path: String,
    #[arg(long)]
    level: usize,
    #[arg(long)]
    mode: Option<GuidanceMode>,
    /// Guidance scale.
    #[arg(short = 'w')]
    w: Option<f64>,
    #[arg(short = 'n', default_value_t = 10)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Reference level of taxa guidance (experimental; default 0).
    #[arg(long)]
    anchor: Option<usize>,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint the images were sampled from; checked against the probe.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Directory with generated images and `samples.jsonl`.
    #[arg(long)]
    gen: PathBuf,
    /// Manifest whose evaluation split is the real reference set.
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    probe: PathBuf,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeTrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the manifest named by the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// List every taxon at this level with its counts.
    #[arg(long)]
    level: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ProbeTrain(a) => probe_train(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<ProjectConfig> {
    match path {
        Some(p) => Ok(ProjectConfig::load(p)?),
        None => Ok(ProjectConfig::default()),
    }
}

fn echo(config: &ProjectConfig, dir: &Path) -> CliResult<()> {
    config.echo_into(dir).map_err(|e| Failure::new(code::IO, anyhow!("writing config.json into {}: {e}", dir.display())))?;
    Ok(())
}

fn print_summary(manifest: &DatasetManifest, tree: &TaxonomyTree) {
    let train = manifest.split(Split::Train).count();
    let eval = manifest.split(Split::Eval).count();
    println!("species: {} ({} train images, {} eval images)", tree.species_count(), train, eval);
    let sizes: Vec<String> = TaxonomyLevel::all().map(|l| tree.level_vocabulary(l).len().to_string()).collect();
    println!("vocabulary sizes: {}", sizes.join(","));
    let rare: Vec<&TaxonPath> = tree.species().filter(|p| tree.sample_count(p) <= RARE_MAX).collect();
    if rare.is_empty() {
        println!("rare species: none");
    } else {
        println!("rare species (<= {RARE_MAX} samples):");
        for p in rare {
            println!("  {} ({})", p.full_name(), tree.sample_count(p));
        }
    }
}

fn gen_data(args: GenDataArgs) -> CliResult<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        config.data.spec.seed = s;
    }
    if let Some(dir) = args.out {
        config.data.dir = dir;
    }
    config.validate()?;
    let manifest = build_dataset(&config.data.spec, &config.data.dir, args.force)?;
    echo(&config, &config.data.dir)?;
    let tree = manifest.tree().map_err(|e| Failure::new(code::CONFIG, e))?;
    println!("wrote {}", config.manifest_path().display());
    print_summary(&manifest, &tree);
    Ok(())
}

fn train(args: TrainArgs) -> CliResult<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(out) = &args.out {
        config.output = out.clone();
    }
    if let Some(s) = args.strategy {
        config.training.strategy = s;
    }
    config.validate()?;
    match config.training.precision {
        Precision::F32 => train_with::<f32>(config, &args),
        Precision::F64 => train_with::<f64>(config, &args),
    }
}

fn train_with<T: Scalar>(config: ProjectConfig, args: &TrainArgs) -> CliResult<()> {
    let manifest = load_manifest(&config.manifest_path())?;
    let data = TrainData::<T>::from_manifest(&manifest, config.data.spec.image_size)?;
    let mut project = match &args.resume {
        Some(path) => Project::<T>::from_checkpoint_with(&Checkpoint::load(path)?, config.clone())?,
        None => Project::<T>::new(config.clone(), manifest.tree().map_err(|e| Failure::new(code::CONFIG, e))?)?,
    };
    let out = config.output.clone();
    echo(&config, &out)?;
    let opts = TrainOptions { through_level: args.through_level, out_dir: Some(out), stop_after: args.stop_after };
    let outcome = project.train(&data, config.training.strategy, &opts)?;
    for phase in &outcome.phases {
        let n = phase.losses.len();
        if n == 0 {
            continue;
        }
        let k = (n / 10).max(1);
        let head = phase.losses[..k].iter().sum::<f64>() / k as f64;
        let tail = phase.losses[n - k..].iter().sum::<f64>() / k as f64;
        println!("{}: {n} steps, loss {head:.3} -> {tail:.3}", phase.name);
    }
    for path in &outcome.checkpoints {
        println!("checkpoint {}", path.display());
    }
    if !outcome.completed {
        println!("stopped at step {}; resume with --resume", project.progress.global_step);
    }
    Ok(())
}

fn sample_cmd(args: SampleArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let mut config = checkpoint_config(&ckpt)?;
    let g = &mut config.guidance;
    g.mode = args.mode.unwrap_or(g.mode);
    g.scale = args.w.unwrap_or(g.scale);
    g.seed = args.seed.unwrap_or(g.seed);
    g.steps = args.steps.unwrap_or(g.steps);
    g.anchor = args.anchor.unwrap_or(g.anchor);
    let path = TaxonPath::parse(&args.path).map_err(|e| Failure::new(code::UNKNOWN_PATH, e))?;
    match config.training.precision {
        Precision::F32 => sample_with::<f32>(&ckpt, config, path, &args),
        Precision::F64 => sample_with::<f64>(&ckpt, config, path, &args),
    }
}

fn sample_with<T: Scalar>(ckpt: &Checkpoint, config: ProjectConfig, path: TaxonPath, args: &SampleArgs) -> CliResult<()> {
    let project = Project::<T>::from_checkpoint(ckpt)?;
    let d = &config.guidance;
    let guidance = GuidanceConfig { mode: d.mode, scale: d.scale, level: args.level, anchor: d.anchor };
    let run = SampleRun { seed: d.seed, steps: d.steps, batch: d.batch };
    let images = sample(&project, &path, args.n, &guidance, &run)?;
    let records: Vec<(SampleRecord, Vec<f64>)> = images
        .into_iter()
        .enumerate()
        .map(|(k, pixels)| {
            let rec = SampleRecord {
                file: sample_file_name(&path, &guidance, run.seed, k as u64),
                level: args.level,
                mode: guidance.mode,
                w: guidance.scale,
                seed: run.seed,
                path: path.full_name(),
            };
            (rec, pixels)
        })
        .collect();
    let sidecar = write_samples(&args.out, &records, config.data.spec.image_size)?;
    echo(&config, &args.out)?;
    println!("wrote {} images to {} ({})", records.len(), args.out.display(), sidecar.display());
    Ok(())
}

fn load_probe_then<R>(
    path: &Path,
    f32_case: impl FnOnce(Probe<f32>) -> CliResult<R>,
    f64_case: impl FnOnce(Probe<f64>) -> CliResult<R>,
) -> CliResult<R> {
    match Probe::<f32>::load(path) {
        Ok(p) => f32_case(p),
        Err(EvalError::Checkpoint(CheckpointError::DTypeMismatch { .. })) => f64_case(Probe::<f64>::load(path)?),
        Err(e) => Err(e.into()),
    }
}

fn print_reliability(r: &Reliability) {
    for l in &r.levels {
        match l.accuracy {
            Some(a) => println!(
                "probe {:<8} accuracy {:.3} (floor {:.3}, {} classes){}",
                LEVEL_NAMES[l.level],
                a,
                l.floor,
                l.classes,
                if l.reliable { "" } else { "  UNRELIABLE" }
            ),
            None => println!("probe {:<8} single class, no head", LEVEL_NAMES[l.level]),
        }
    }
}

fn eval_cmd(args: EvalArgs) -> CliResult<()> {
    load_probe_then(&args.probe, |p| eval_with(p, &args), |p| eval_with(p, &args))
}

fn eval_with<T: Scalar>(probe: Probe<T>, args: &EvalArgs) -> CliResult<()> {
    let size = probe.image_size;
    if let Some(path) = &args.ckpt {
        let config = checkpoint_config(&Checkpoint::load(path)?)?;
        if config.data.spec.image_size != size {
            return Err(Failure::new(
                code::CONFIG,
                anyhow!("checkpoint images are {0}x{0} but the probe expects {size}x{size}", config.data.spec.image_size),
            ));
        }
    }
    let manifest = load_manifest(&args.real)?;
    let real = manifest.load_images(Split::Eval, size)?;
    if real.is_empty() {
        return Err(Failure::new(code::CONFIG, anyhow!("{} has no eval split", args.real.display())));
    }
    let reliability = check_reliability(&probe, &real)?;
    print_reliability(&reliability);
    let generated = load_generated(&args.gen, size)?;
    let levels = evaluate(&probe, &generated, &real)?;
    for l in levels.iter().filter(|l| l.n_generated > 0) {
        println!(
            "level {} ({}): alignment {:.3} (by category {:.3}), frechet {:.3}, {} generated",
            l.level,
            LEVEL_NAMES[l.level],
            l.alignment.unwrap_or(f64::NAN),
            l.alignment_by_category.unwrap_or(f64::NAN),
            l.frechet.unwrap_or(f64::NAN),
            l.n_generated
        );
    }
    let report = serde_json::json!({
        "reliable": reliability.reliable,
        "reliability": reliability.levels,
        "levels": levels,
    });
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::new(code::IO, e))?;
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    fs::write(&args.out, text).map_err(|e| Failure::new(code::IO, anyhow!("writing {}: {e}", args.out.display())))?;
    if !reliability.reliable {
        return Err(Failure::new(code::UNRELIABLE_PROBE, anyhow!("probe is below the reliability floor; alignment is not meaningful")));
    }
    Ok(())
}

fn probe_train(args: ProbeTrainArgs) -> CliResult<()> {
    let config = load_config(args.config.as_deref())?;
    match config.training.precision {
        Precision::F32 => probe_train_with::<f32>(&config, &args),
        Precision::F64 => probe_train_with::<f64>(&config, &args),
    }
}

fn probe_train_with<T: Scalar>(config: &ProjectConfig, args: &ProbeTrainArgs) -> CliResult<()> {
    let manifest = load_manifest(&args.manifest.clone().unwrap_or_else(|| config.manifest_path()))?;
    let tree = manifest.tree().map_err(|e| Failure::new(code::CONFIG, e))?;
    let size = config.data.spec.image_size;
    let train = manifest.load_images(Split::Train, size)?;
    let held_out = manifest.load_images(Split::Eval, size)?;
    if held_out.is_empty() {
        return Err(Failure::new(code::CONFIG, anyhow!("the manifest has no eval split to check the probe on")));
    }
    let probe = train_probe::<T>(&train, &tree, config.model.levels, size, &config.probe)?;
    probe.save(&args.out)?;
    println!("wrote {}", args.out.display());
    let reliability = check_reliability(&probe, &held_out)?;
    print_reliability(&reliability);
    if !reliability.reliable {
        return Err(Failure::new(code::UNRELIABLE_PROBE, anyhow!("probe is below the reliability floor")));
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> CliResult<()> {
    let manifest = load_manifest(&args.manifest)?;
    let tree = manifest.tree().map_err(|e| Failure::new(code::CONFIG, e))?;
    match args.level {
        Some(l) if l >= NUM_LEVELS => {
            Err(Failure::new(code::CONFIG, anyhow!("--level must be below {NUM_LEVELS}, got {l}")))
        }
        Some(l) => {
            let level = TaxonomyLevel::at(l);
            println!("{} ({} taxa)", LEVEL_NAMES[l], tree.level_vocabulary(level).len());
            for name in tree.level_vocabulary(level) {
                let node = tree.node(level, &name).expect("vocabulary entries are nodes");
                println!("  {name}  species: {}  samples: {}", node.species_count, node.sample_count);
            }
            Ok(())
        }
        None => {
            print!("{}", tree.dump());
            print_summary(&manifest, &tree);
            Ok(())
        }
    }
}
