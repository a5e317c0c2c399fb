use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use gespolicy::checks::{codec_round_trip, denoiser_grad_check, gap_grad_check};
use gespolicy::codec::motion::{load_gmo1, save_gmo1, write_csv, GESTURE_DIM};
use gespolicy::codec::{GestureTemplate, MotionSequence, Normalizer};
use gespolicy::config::{ConfigError, RunConfig};
use gespolicy::decision::{train, DecisionError, DenoiserConfig, Dataset, NoiseSchedule, TrainedModel};
use gespolicy::environment::{
    gen_synthetic_motion, load_gft1, save_gft1, AudioFeatureSeq, Clip, EnvError, PhonemeFeatureSeq,
};
use gespolicy::metrics::{evaluate, IdentityAdapter, MetricReport};
use gespolicy::numerics::{GradCheckOptions, GradCheckReport};
use gespolicy::perception::GapConfig;

const MOTION_FILE: &str = "motion.gmo1";
const AUDIO_FILE: &str = "audio.gft1";
const PHONEME_FILE: &str = "phonemes.gft1";
const PHONEME_IDS_FILE: &str = "phoneme_ids.json";
const MODEL_FILE: &str = "model.gpk1";
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "gespolicy", version, about = "Co-speech gesture synthesis with a diffusion action policy")]
struct Cli {
    /// JSON run configuration; defaults apply to anything it leaves out
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random draw of the run
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override a config value, e.g. `--set train.learning_rate=1e-4`
    #[arg(long = "set", value_name = "K=V", global = true)]
    overrides: Vec<String>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Suppress the human-readable summary
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic motion clip with matching audio and phoneme features
    SynthData {
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Fit the normalizer and train the policy on a data directory
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Roll out a trained policy over a data directory's speech features
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Compute FGD, DIV, MSE and LVD of a generated sequence against a reference
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Encode and reconstruct a motion file, reporting any frame that drifts
    Roundtrip {
        #[arg(long)]
        motion: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tolerance: f64,
    },
    /// Finite-difference gradient checks of the fusion module and denoiser at toy widths
    Gradcheck {
        /// Check this many seeded entries per parameter instead of all of them
        #[arg(long)]
        entries: Option<usize>,
        /// Central-difference step
        #[arg(long, default_value_t = 1e-4)]
        perturbation: f64,
    },
}

/// A numerical check that ran and failed.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<CheckFailed>() || matches!(cause.downcast_ref::<DecisionError>(), Some(DecisionError::NonFinite { .. })) {
            return 1;
        }
    }
    2
}

struct Ctx {
    cfg: RunConfig,
    out: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn out_dir(&self, default: &Path) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| default.to_path_buf());
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_motion(path: &Path) -> Result<MotionSequence> {
    load_gmo1(path).with_context(|| format!("reading {}", path.display()))
}

fn load_streams(dir: &Path) -> Result<(AudioFeatureSeq, PhonemeFeatureSeq)> {
    let audio = load_gft1(&dir.join(AUDIO_FILE)).with_context(|| format!("reading {}", dir.join(AUDIO_FILE).display()))?;
    let features =
        load_gft1(&dir.join(PHONEME_FILE)).with_context(|| format!("reading {}", dir.join(PHONEME_FILE).display()))?;
    let ids_path = dir.join(PHONEME_IDS_FILE);
    let ids: Vec<usize> = serde_json::from_str(
        &fs::read_to_string(&ids_path).with_context(|| format!("reading {}", ids_path.display()))?,
    )
    .with_context(|| format!("parsing {}", ids_path.display()))?;
    Ok((AudioFeatureSeq { features: audio }, PhonemeFeatureSeq::new(features, ids)?))
}

fn synth_data(ctx: &Ctx, frames: Option<usize>) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(n) = frames {
        cfg.synth.n_frames = n;
    }
    cfg.validate()?;
    let (motion, audio, phonemes) = gen_synthetic_motion(&cfg.synth, &cfg.sampler)?;
    let dir = ctx.out_dir(&cfg.paths.data)?;
    let path = dir.join(MOTION_FILE);
    save_gmo1(&path, &motion).with_context(|| format!("writing {}", path.display()))?;
    let path = dir.join(AUDIO_FILE);
    save_gft1(&path, &audio.features).with_context(|| format!("writing {}", path.display()))?;
    let path = dir.join(PHONEME_FILE);
    save_gft1(&path, &phonemes.features).with_context(|| format!("writing {}", path.display()))?;
    write_json(&dir.join(PHONEME_IDS_FILE), &phonemes.phoneme_ids)?;
    ctx.say(format!("wrote {} frames (seed {}) to {}", motion.len(), cfg.synth.seed, dir.display()));
    Ok(())
}

fn train_cmd(ctx: &Ctx, data: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let data = data.unwrap_or_else(|| cfg.paths.data.clone());
    let motion = load_motion(&data.join(MOTION_FILE))?;
    motion.validate_raw()?;
    let (audio, phonemes) = load_streams(&data)?;

    let normalizer = Normalizer::fit(&motion);
    let z = normalizer.normalize(&motion);
    let template = GestureTemplate::new(GestureTemplate::mean_pose(&z).template, "training mean pose, normalized")?;
    let clip = Clip::new(z, audio, phonemes, &cfg.codec)?;
    let dataset = Dataset::all_windows(clip, &cfg.sampler)?;
    let mut model = TrainedModel::new(cfg.policy(), normalizer, template, cfg.seed)?;

    let dir = ctx.out_dir(&cfg.paths.checkpoints)?;
    let started = Instant::now();
    let mut log = Vec::new();
    let report = train(
        &mut model.store,
        &model.policy,
        &model.policy.schedule,
        &dataset,
        &cfg.sampler,
        &cfg.codec,
        &cfg.train,
        |r| {
            log.push(format!("{:.3}s step {} loss {}", started.elapsed().as_secs_f64(), r.step, r.loss.total));
        },
    )?;
    let last = report.steps.last().map(|r| r.loss);
    let manifest = json!({
        "config": cfg,
        "config_hash": cfg.hash(),
        "data": data,
        "windows": dataset.starts.len(),
        "steps": report.steps.len(),
        "final_loss": last,
        "checkpoint": MODEL_FILE,
    });
    model.save(&dir.join(MODEL_FILE), json!({ "config_hash": cfg.hash(), "seed": cfg.seed }))?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    fs::write(dir.join("loss.csv"), report.steps_csv())?;
    fs::write(dir.join("epochs.csv"), report.epochs_csv())?;
    fs::write(dir.join("train.log"), log.join("\n") + "\n")?;
    if let Some(l) = last {
        ctx.say(format!(
            "trained {} steps on {} windows; final loss {:.6} (diff {:.6}, rec {:.6}, vel {:.6}); wrote {}",
            report.steps.len(),
            dataset.starts.len(),
            l.total,
            l.diff,
            l.rec,
            l.vel,
            dir.display()
        ));
    }
    Ok(())
}

fn generate_cmd(ctx: &Ctx, checkpoint: &Path, data: Option<PathBuf>, frames: Option<usize>) -> Result<()> {
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let model = TrainedModel::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = data.unwrap_or_else(|| cfg.paths.data.clone());
    let reference = load_motion(&data.join(MOTION_FILE))?;
    let (audio, phonemes) = load_streams(&data)?;
    let frames = frames.unwrap_or(cfg.generate.frames);
    if frames < model.config.sampler.obs_len {
        bail!(EnvError::Invalid(format!("{frames} frames is below the {} seed frames", model.config.sampler.obs_len)));
    }
    if frames > audio.features.rows() {
        bail!(EnvError::Invalid(format!("{frames} frames requested but speech features cover {}", audio.features.rows())));
    }
    let out = model.generate(
        Some(&reference),
        &audio.features,
        &phonemes.features,
        frames,
        cfg.generate.template_mode,
        cfg.seed,
    )?;
    let dir = ctx.out_dir(&cfg.paths.reports)?;
    let path = dir.join("generated.gmo1");
    save_gmo1(&path, &out).with_context(|| format!("writing {}", path.display()))?;
    let csv = dir.join("generated.csv");
    write_csv(fs::File::create(&csv).with_context(|| format!("writing {}", csv.display()))?, &out)?;
    ctx.say(format!("generated {} frames (seed {}) into {}", out.len(), cfg.seed, dir.display()));
    Ok(())
}

fn evaluate_cmd(ctx: &Ctx, generated: &Path, reference: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let gen = load_motion(generated)?;
    let reference = load_motion(reference)?;
    let report = evaluate(&gen, &reference, &cfg.metrics, &IdentityAdapter)?;
    let dir = ctx.out_dir(&cfg.paths.reports)?;
    write_json(&dir.join("metrics.json"), &report)?;
    fs::write(dir.join("metrics.csv"), format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()))?;
    ctx.say(format!(
        "FGD {:.6}  DIV {:.6}  MSE {:.6}  LVD {:.6}  ({} vs {} windows)",
        report.fgd, report.div, report.mse, report.lvd, report.sample_counts.generated_windows, report.sample_counts.real_windows
    ));
    Ok(())
}

fn roundtrip_cmd(ctx: &Ctx, motion: &Path, tolerance: f64) -> Result<()> {
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let seq = load_motion(motion)?;
    let report = codec_round_trip(&seq, &cfg.codec, tolerance);
    let dir = ctx.out_dir(&cfg.paths.reports)?;
    write_json(&dir.join("roundtrip.json"), &report)?;
    if !report.passed() {
        let why = report.error.clone().unwrap_or_else(|| format!("{} frames above tolerance", report.failures.len()));
        return Err(CheckFailed(format!("round trip failed: {why}")).into());
    }
    ctx.say(format!("round trip ok: {} frames, max abs error {:.3e}", report.frames, report.max_abs_error));
    Ok(())
}

fn summarize(name: &str, r: &GradCheckReport) -> serde_json::Value {
    json!({
        "module": name,
        "max_rel_error": r.max_rel_error(),
        "entries_checked": r.entries_checked(),
        "params": r.params.iter().map(|p| json!({
            "name": p.name,
            "entries": p.entries_checked,
            "max_rel_error": p.max_rel_error,
        })).collect::<Vec<_>>(),
    })
}

fn gradcheck_cmd(ctx: &Ctx, entries: Option<usize>, perturbation: f64) -> Result<()> {
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let opts = GradCheckOptions { perturbation, max_entries_per_param: entries, seed: cfg.seed };
    let gap_cfg = GapConfig::toy();
    let gap = gap_grad_check(&gap_cfg, 4, cfg.seed, &opts)?;
    let schedule = NoiseSchedule::new(cfg.schedule)?;
    let den_cfg = DenoiserConfig::toy();
    let den = denoiser_grad_check(&den_cfg, &schedule, cfg.sampler.act_len, GESTURE_DIM, gap_cfg.obs_dim, 37, cfg.seed, &opts)?;
    let report = json!({
        "tolerance": GRAD_TOLERANCE,
        "perturbation": perturbation,
        "modules": [summarize("gap", &gap), summarize("denoiser", &den)],
    });
    let dir = ctx.out_dir(&cfg.paths.reports)?;
    write_json(&dir.join("gradcheck.json"), &report)?;
    for (name, r) in [("gap", &gap), ("denoiser", &den)] {
        ctx.say(format!("{name:<9} max rel error {:.3e} over {} entries", r.max_rel_error(), r.entries_checked()));
    }
    let worst = gap.max_rel_error().max(den.max_rel_error());
    if worst.is_nan() || worst > GRAD_TOLERANCE {
        return Err(CheckFailed(format!("gradient check failed: max relative error {worst:.3e} > {GRAD_TOLERANCE:e}")).into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let ctx = Ctx { cfg, out: cli.out, quiet: cli.quiet };
    match cli.command {
        Command::SynthData { frames } => synth_data(&ctx, frames),
        Command::Train { data } => train_cmd(&ctx, data),
        Command::Generate { checkpoint, data, frames } => generate_cmd(&ctx, &checkpoint, data, frames),
        Command::Evaluate { generated, reference } => evaluate_cmd(&ctx, &generated, &reference),
        Command::Roundtrip { motion, tolerance } => roundtrip_cmd(&ctx, &motion, tolerance),
        Command::Gradcheck { entries, perturbation } => gradcheck_cmd(&ctx, entries, perturbation),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
