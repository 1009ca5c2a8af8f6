//! Command-line entry point: dataset generation, training, restoration,
//! evaluation, flow-trace dumps, and model inspection.

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use uniflow::config::RunConfig;
use uniflow::data::{self, ClipRecord, Manifest, Split};
use uniflow::degrade::{sample_spec, DegradationSpec, MixtureConfig, Registry};
use uniflow::error::{Error, Result};
use uniflow::flow::{restore_frame, Capture, FieldToggles, SolverConfig};
use uniflow::nn::{count, Model};
use uniflow::tensor::Tensor;
use uniflow::train::{derive_seed, evaluate, train, Checkpoint};

#[derive(Parser)]
#[command(
    name = "uniflow",
    about = "Prompt-guided flow restoration of degraded frames",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a degraded/clean pair dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a model on a gen-data manifest.
    Train(TrainArgs),
    /// Restore images with a trained checkpoint.
    Restore(RestoreArgs),
    /// Per-frame PSNR/SSIM report over a manifest split.
    Eval(EvalArgs),
    /// Dump the per-step restoration trajectory of one frame.
    DumpFlow(DumpFlowArgs),
    /// Parameter and MAC counts plus the architecture summary.
    Inspect(InspectArgs),
    /// Echo the effective run configuration as JSON.
    PrintConfig(PrintConfigArgs),
}

/// Flag overrides applied on top of --config values.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Training crop size.
    #[arg(long)]
    crop: Option<usize>,
    /// Validate every N iterations (0 disables).
    #[arg(long)]
    val_every: Option<usize>,
    /// Disable the pre-training gradient audit.
    #[arg(long)]
    no_grad_audit: bool,
    /// Solver steps T.
    #[arg(long)]
    steps: Option<usize>,
    /// Solver step size.
    #[arg(long)]
    dt: Option<f64>,
    /// Potential decay rate.
    #[arg(long)]
    lambda: Option<f64>,
    /// Total integration time T*dt; keeps T and sets dt = tdt/T.
    #[arg(long)]
    tdt: Option<f64>,
    /// Field toggles: full, simplified, momentum-only, none, or a comma list
    /// of momentum/potential/decay/prompt.
    #[arg(long)]
    toggles: Option<String>,
    /// Encoder depth.
    #[arg(long)]
    levels: Option<usize>,
    /// Channels at the top level.
    #[arg(long)]
    base_channels: Option<usize>,
    /// Prompt width d.
    #[arg(long)]
    prompt_dim: Option<usize>,
    /// Prompt mode: literal or pool_late.
    #[arg(long)]
    prompt_mode: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.seed {
            cfg.train.seed = v;
            cfg.mix.seed = v;
        }
        if let Some(v) = self.iters {
            cfg.train.iterations = v;
        }
        if let Some(v) = self.batch {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.crop {
            cfg.train.crop = v;
        }
        if let Some(v) = self.val_every {
            cfg.train.val_every = v;
        }
        if self.no_grad_audit {
            cfg.train.grad_audit = false;
        }
        if let Some(v) = self.steps {
            cfg.solver.steps = v;
        }
        if let Some(v) = self.dt {
            cfg.solver.dt = v;
        }
        if let Some(v) = self.lambda {
            cfg.solver.lambda = v;
        }
        if let Some(v) = self.tdt {
            if cfg.solver.steps == 0 {
                return Err(Error::Config("--tdt needs steps >= 1".into()));
            }
            cfg.solver.dt = v / cfg.solver.steps as f64;
        }
        if let Some(t) = &self.toggles {
            cfg.toggles = FieldToggles::parse(t)?;
        }
        if let Some(v) = self.levels {
            cfg.arch.levels = v;
        }
        if let Some(v) = self.base_channels {
            cfg.arch.base_channels = v;
        }
        if let Some(v) = self.prompt_dim {
            cfg.arch.prompt_dim = v;
        }
        if let Some(m) = &self.prompt_mode {
            cfg.arch.prompt_mode = m.parse()?;
        }
        Ok(())
    }
}

fn effective_config(config: &Option<PathBuf>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory of clean frames; subdirectories become clips.
    #[arg(long)]
    clean_dir: Option<PathBuf>,
    /// Generate this many synthetic clean frames instead of reading a dir.
    #[arg(long)]
    synth: Option<usize>,
    /// Synthetic frame edge length.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Frames per synthetic clip.
    #[arg(long, default_value_t = 1)]
    clip_len: usize,
    /// Output directory for the degraded/clean tree.
    #[arg(long)]
    out_dir: PathBuf,
    /// Manifest path; must live directly inside --out-dir.
    #[arg(long)]
    out_manifest: Option<PathBuf>,
    /// JSON mixture config (the "mix" section of a run config).
    #[arg(long)]
    mix_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Subsample clips at this many frames per second (3..10).
    #[arg(long)]
    sample_rate: Option<u32>,
    /// Clip frame rate recorded in the manifest.
    #[arg(long, default_value_t = 10)]
    fps: u32,
    /// Fraction of clips held out for validation.
    #[arg(long, default_value_t = 0.15)]
    val_frac: f64,
    /// Fraction of clips held out for testing.
    #[arg(long, default_value_t = 0.15)]
    test_frac: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Run config JSON; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct RestoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Per-frame report CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Per-task summary CSV path.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Raw prompt-embedding CSV path.
    #[arg(long)]
    dump_prompts: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct DumpFlowArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Clean reference for the l1_to_gt trace column.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Print every layer, not just the totals.
    #[arg(long)]
    detailed: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PrintConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits; usage errors are code 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Restore(args) => cmd_restore(args),
        Command::Eval(args) => cmd_eval(args),
        Command::DumpFlow(args) => cmd_dump_flow(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::PrintConfig(args) => {
            let cfg = effective_config(&args.config, &args.overrides)?;
            println!("{}", cfg.to_json_pretty());
            Ok(())
        }
    }
}

/// A clean frame either on disk or synthesized in memory.
enum FrameSource {
    Path(PathBuf),
    Synth(Tensor),
}

impl FrameSource {
    fn load(&self) -> Result<Tensor> {
        match self {
            FrameSource::Path(p) => data::load_image(p),
            FrameSource::Synth(t) => Ok(t.clone()),
        }
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let registry = Registry::builtin();
    let mut mix = match &args.mix_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<MixtureConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => MixtureConfig::default(),
    };
    if let Some(seed) = args.seed {
        mix.seed = seed;
    }
    mix.validate(&registry)?;
    if args.val_frac < 0.0 || args.test_frac < 0.0 || args.val_frac + args.test_frac >= 1.0 {
        return Err(Error::Config(
            "val/test fractions must be nonnegative and sum below 1".into(),
        ));
    }

    let mut clips: Vec<(String, Vec<FrameSource>)> = Vec::new();
    match (&args.clean_dir, args.synth) {
        (Some(dir), None) => {
            for (id, paths) in data::scan_clips(dir)? {
                let frames = paths.into_iter().map(FrameSource::Path).collect();
                clips.push((id, frames));
            }
        }
        (None, Some(n)) => {
            if args.clip_len == 0 {
                return Err(Error::Config("clip_len must be >= 1".into()));
            }
            let mut made = 0usize;
            let mut clip_idx = 0usize;
            while made < n {
                let take = args.clip_len.min(n - made);
                let frames = (0..take)
                    .map(|j| {
                        FrameSource::Synth(data::synth_clean_frame(
                            args.size,
                            args.size,
                            derive_seed(mix.seed, (clip_idx * 4096 + j) as u64),
                        ))
                    })
                    .collect();
                clips.push((format!("synth{clip_idx:04}"), frames));
                made += take;
                clip_idx += 1;
            }
        }
        _ => {
            return Err(Error::Config(
                "provide exactly one of --clean-dir or --synth".into(),
            ))
        }
    }
    if clips.is_empty() || clips.iter().all(|(_, f)| f.is_empty()) {
        return Err(Error::Config("no input frames".into()));
    }

    let manifest_path = args
        .out_manifest
        .clone()
        .unwrap_or_else(|| args.out_dir.join("manifest.jsonl"));
    if manifest_path.parent() != Some(args.out_dir.as_path()) {
        return Err(Error::Config(
            "--out-manifest must live directly inside --out-dir".into(),
        ));
    }

    // Seeded split assignment over a shuffled clip order.
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(mix.seed);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    order.shuffle(&mut rng);
    let n_test = (clips.len() as f64 * args.test_frac).round() as usize;
    let n_val = (clips.len() as f64 * args.val_frac).round() as usize;
    let mut split_of = vec![Split::Train; clips.len()];
    for (rank, idx) in order.iter().enumerate() {
        split_of[*idx] = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
    }

    let mut records = Vec::new();
    let mut spec_rng = ChaCha8Rng::seed_from_u64(derive_seed(mix.seed, 0xdeca));
    for (ci, (clip_id, frames)) in clips.iter().enumerate() {
        let mut chosen: Vec<usize> = (0..frames.len()).collect();
        if let Some(rate) = args.sample_rate {
            let probe = ClipRecord {
                clip_id: clip_id.clone(),
                frames: frames.iter().map(|_| String::new()).collect(),
                fps: args.fps,
                split: split_of[ci],
                clean_frames: None,
                specs: None,
            };
            chosen = data::sample_frames(&probe, rate, &mut rng)?;
        }
        let clip_spec: Option<DegradationSpec> = if mix.per_clip {
            Some(sample_spec(&mix, &registry, &mut spec_rng)?)
        } else {
            None
        };
        let mut rec_frames = Vec::new();
        let mut rec_clean = Vec::new();
        let mut rec_specs = Vec::new();
        for (j, fi) in chosen.iter().enumerate() {
            let clean = frames[*fi].load()?;
            let spec = match &clip_spec {
                Some(s) => s.clone(),
                None => sample_spec(&mix, &registry, &mut spec_rng)?,
            };
            let degraded = registry.apply_spec(&spec, &clean)?;
            let deg_rel = format!("frames/{clip_id}/deg_{j:03}.ppm");
            let clean_rel = format!("frames/{clip_id}/clean_{j:03}.ppm");
            data::save_image(&degraded, &args.out_dir.join(&deg_rel))?;
            data::save_image(&clean, &args.out_dir.join(&clean_rel))?;
            rec_frames.push(deg_rel);
            rec_clean.push(clean_rel);
            rec_specs.push(spec);
        }
        records.push(ClipRecord {
            clip_id: clip_id.clone(),
            frames: rec_frames,
            fps: args.fps,
            split: split_of[ci],
            clean_frames: Some(rec_clean),
            specs: Some(rec_specs),
        });
    }

    let manifest = Manifest {
        records,
        root: args.out_dir.clone(),
    };
    manifest.save(&manifest_path)?;
    let echo = RunConfig {
        mix,
        ..RunConfig::default()
    };
    echo.save(&args.out_dir.join("config.json"))?;
    let n_frames: usize = manifest.records.iter().map(|r| r.frames.len()).sum();
    println!(
        "wrote {} clips / {} frame pairs under {} (manifest {})",
        manifest.records.len(),
        n_frames,
        args.out_dir.display(),
        manifest_path.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = effective_config(&args.config, &args.overrides)?;
    let manifest = Manifest::load(&args.manifest)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    cfg.save(&args.out_dir.join("config.json"))?;
    let summary = train(
        &manifest,
        &cfg.arch,
        &cfg.train,
        &cfg.solver,
        &cfg.toggles,
        &args.out_dir,
    )?;
    println!(
        "trained {} iterations; final l1 {:.5}; last checkpoint {}",
        cfg.train.iterations,
        summary.final_loss,
        summary.last_checkpoint.display()
    );
    if let (Some(best), Some(psnr)) = (&summary.best_checkpoint, summary.best_val_psnr) {
        println!("best val psnr {:.3} dB -> {}", psnr, best.display());
    }
    Ok(())
}

/// Solver settings come from the checkpoint, then flag overrides.
fn solver_from(ck: &Checkpoint, overrides: &Overrides) -> Result<(SolverConfig, FieldToggles)> {
    let mut solver = ck.solver;
    let mut toggles = ck.toggles;
    if let Some(v) = overrides.steps {
        solver.steps = v;
    }
    if let Some(v) = overrides.dt {
        solver.dt = v;
    }
    if let Some(v) = overrides.lambda {
        solver.lambda = v;
    }
    if let Some(v) = overrides.tdt {
        if solver.steps == 0 {
            return Err(Error::Config("--tdt needs steps >= 1".into()));
        }
        solver.dt = v / solver.steps as f64;
    }
    if let Some(t) = &overrides.toggles {
        toggles = FieldToggles::parse(t)?;
    }
    solver.validate()?;
    Ok((solver, toggles))
}

fn image_paths_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm") | Some("png")
            )
        })
        .collect();
    v.sort();
    Ok(v)
}

fn cmd_restore(args: RestoreArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (solver, toggles) = solver_from(&ck, &args.overrides)?;
    let model = ck.to_model()?;
    let inputs = if args.input.is_dir() {
        image_paths_in(&args.input)?
    } else {
        vec![args.input.clone()]
    };
    if inputs.is_empty() {
        return Err(Error::Config("no input images".into()));
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    for path in inputs {
        let x = data::load_image(&path)?;
        let out = restore_frame(&model, &x, &solver, &toggles, None)?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        let dest = args.out_dir.join(format!("{stem}_restored.ppm"));
        data::save_image(&out.output.clamped(0.0, 1.0), &dest)?;
        println!("{} -> {}", path.display(), dest.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (solver, toggles) = solver_from(&ck, &args.overrides)?;
    let model = ck.to_model()?;
    let manifest = Manifest::load(&args.manifest)?;
    let split: Split = args.split.parse()?;
    let report = evaluate(&model, &manifest, split, &solver, &toggles)?;
    report.write_csv(&args.out)?;
    if let Some(path) = &args.summary {
        report.write_summary_csv(path)?;
    }
    if let Some(path) = &args.dump_prompts {
        report.write_prompts_csv(path)?;
    }
    println!("task            frames   psnr_in  psnr_out   ssim_in  ssim_out");
    for gr in report.groups.iter().chain(std::iter::once(&report.overall)) {
        println!(
            "{:<15} {:>6} {:>9.3} {:>9.3} {:>9.4} {:>9.4}",
            gr.task, gr.frames, gr.psnr_in, gr.psnr_out, gr.ssim_in, gr.ssim_out
        );
    }
    match report.separation() {
        Ok(stats) => println!(
            "prompt separation: intra {:.4}, inter {:.4}, ratio {:.3}",
            stats.intra, stats.inter, stats.ratio
        ),
        Err(_) => println!("prompt separation: needs >= 2 tasks with >= 4 frames each"),
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

fn cmd_dump_flow(args: DumpFlowArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (solver, toggles) = solver_from(&ck, &args.overrides)?;
    let model = ck.to_model()?;
    let x = data::load_image(&args.input)?;
    let gt = match &args.gt {
        Some(p) => Some(data::load_image(p)?),
        None => None,
    };
    let out = restore_frame(
        &model,
        &x,
        &solver,
        &toggles,
        Some(Capture {
            ground_truth: gt.as_ref(),
        }),
    )?;
    let trace = out.trace.expect("capture requested");
    trace.export(&args.out_dir)?;
    println!(
        "wrote {} step images and trace.csv to {}",
        trace.steps.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let (arch, solver) = match (&args.checkpoint, &args.config) {
        (Some(path), None) => {
            let ck = Checkpoint::load(path)?;
            (ck.arch, ck.solver)
        }
        (None, maybe_cfg) => {
            let cfg = effective_config(maybe_cfg, &args.overrides)?;
            (cfg.arch, cfg.solver)
        }
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "pass --checkpoint or --config, not both".into(),
            ))
        }
    };
    let report = count::count_params_macs(&arch, args.height, args.width, solver.steps)?;
    let live = Model::new(arch.clone(), 0)?.params.total_scalars();
    println!(
        "architecture: {} levels, base {} channels, prompt dim {} ({:?} mode), {} input channels",
        arch.levels, arch.base_channels, arch.prompt_dim, arch.prompt_mode, arch.in_channels
    );
    println!(
        "resolution {}x{}, {} solver steps",
        args.height, args.width, solver.steps
    );
    if args.detailed {
        println!("{:<18} {:>10} {:>14}", "layer", "params", "macs");
        for l in &report.layers {
            println!("{:<18} {:>10} {:>14}", l.name, l.params, l.macs);
        }
    }
    println!("total params: {}", report.total_params);
    println!("total macs: {}", report.total_macs);
    if live != report.total_params {
        return Err(Error::Numeric(format!(
            "live parameter count {live} disagrees with the counter {}",
            report.total_params
        )));
    }
    println!("live parameter count matches: {live}");
    Ok(())
}
