//! Command-line entrypoint wiring the whole pipeline: synthetic episode
//! generation, dataset building, training, single-image prediction,
//! evaluation, and multi-frame rollouts.
//!
//! Exit codes: 0 success, 1 usage error (bad flags/values), 2 runtime
//! failure. Diagnostics go to stderr; artifacts only under `--out`/`--report`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use framecast_core::checkpoint::load_checkpoint;
use framecast_core::config::{load_config, AppConfig};
use framecast_core::dataset::{assemble_manifest, load_manifest, split_dataset,
    write_instructpix2pix_layout, Split};
use framecast_core::episode::{load_episode_dir, render_synthetic_episode,
    write_episode_dir, Episode, SyntheticSceneSpec, Task, MIN_SYNTHETIC_RESOLUTION,
    TASK_LABEL_FILE};
use framecast_core::eval::{aggregate_report, evaluate_pairs, identity_baseline_pairs,
    rollout_eval, rollout_grid, ConfigEcho};
use framecast_core::img::Image;
use framecast_core::model::Model;
use framecast_core::sampler::{predict_future_frame, SamplerConfig};
use framecast_core::text::Vocab;
use framecast_core::trainer::{load_split_pairs, train};
use framecast_core::{CoreError, Result};

#[derive(Parser)]
#[command(
    name = "framecast",
    version,
    about = "Instruction-conditioned future-frame prediction",
    propagate_version = true
)]
struct Cli {
    /// Master random seed; overrides seeds from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// TOML configuration file (defaults apply for missing keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Verbose diagnostics on stderr.
    #[arg(long, global = true)]
    verbose: bool,

    /// Worker threads. The numeric pipeline is single-threaded for
    /// reproducibility; values above 1 are accepted but run as 1.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic episode directories (frames + task label).
    GenEpisodes {
        /// Task id: hammer_beat, handover, or stack.
        #[arg(long)]
        task: String,
        /// Number of episodes to generate.
        #[arg(long)]
        episodes: usize,
        /// Frames per episode.
        #[arg(long)]
        frames: usize,
        /// Square frame resolution in pixels.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Output directory; one subdirectory per episode.
        #[arg(long)]
        out: PathBuf,
    },

    /// Pair episode frames into a train/val/test dataset layout.
    BuildDataset {
        /// Directory holding episode subdirectories.
        #[arg(long)]
        episodes_dir: PathBuf,
        /// Frame horizon between input and target (default from config).
        #[arg(long)]
        dt: Option<usize>,
        /// Start-frame stride (default from config).
        #[arg(long)]
        stride: Option<usize>,
        /// Train,val,test fractions, e.g. 0.8,0.1,0.1 (default from config).
        #[arg(long)]
        splits: Option<String>,
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
    },

    /// Train a model on a built dataset.
    Train {
        /// Dataset root (must contain manifest.json).
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for checkpoints and loss logs.
        #[arg(long)]
        out: PathBuf,
        /// Fine-tune only the parameter-efficient subset (cross-attention,
        /// self-attention output projections, last codec encoder layers).
        #[arg(long)]
        peft: bool,
    },

    /// Predict the future frame for one image + instruction.
    Predict {
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (PNG/JPEG).
        #[arg(long)]
        image: PathBuf,
        /// Action instruction text.
        #[arg(long)]
        instruction: String,
        /// Denoising steps (default from config).
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance weight w (default from config).
        #[arg(long)]
        guidance: Option<f64>,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },

    /// Evaluate a checkpoint on a dataset's held-out test split.
    Evaluate {
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root (must contain manifest.json).
        #[arg(long)]
        dataset: PathBuf,
        /// Denoising steps (default from config).
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance weight w (default from config).
        #[arg(long)]
        guidance: Option<f64>,
        /// Output directory for report.json / report.csv.
        #[arg(long)]
        report: PathBuf,
    },

    /// Predict several consecutive future frames from an episode.
    Rollout {
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode directory (frames + task label file).
        #[arg(long)]
        episode: PathBuf,
        /// First input frame index.
        #[arg(long, default_value_t = 47)]
        start: usize,
        /// Number of consecutive input frames.
        #[arg(long, default_value_t = 3)]
        count: usize,
        /// Output directory for the grid image and per-frame predictions.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help/version are successful outcomes, not usage errors.
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };

    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Info
        })
        .format_timestamp(None)
        .init();

    // Pure flag-value validation: no file or directory is touched until
    // every value is known to be well-formed.
    if let Err(msg) = validate(&cli) {
        eprintln!("error: {msg}");
        return 1;
    }
    if cli.threads > 1 {
        log::warn!("--threads {} requested; running single-threaded", cli.threads);
    }

    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn parse_splits(text: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(format!(
            "--splits needs three comma-separated fractions, got '{text}'"
        ));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("--splits entry '{part}' is not a number"))?;
        if !(0.0..=1.0).contains(slot) {
            return Err(format!("--splits entry {slot} outside [0,1]"));
        }
    }
    let sum: f64 = out.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(format!("--splits must sum to 1, got {sum}"));
    }
    Ok(out)
}

fn validate(cli: &Cli) -> std::result::Result<(), String> {
    if cli.threads == 0 {
        return Err("--threads must be >= 1".into());
    }
    match &cli.cmd {
        Command::GenEpisodes {
            task,
            episodes,
            frames,
            resolution,
            ..
        } => {
            Task::parse(task).map_err(|e| e.to_string())?;
            if *episodes == 0 {
                return Err("--episodes must be >= 1".into());
            }
            if *frames < 2 {
                return Err("--frames must be >= 2".into());
            }
            if *resolution < MIN_SYNTHETIC_RESOLUTION {
                return Err(format!(
                    "--resolution must be >= {MIN_SYNTHETIC_RESOLUTION}"
                ));
            }
        }
        Command::BuildDataset {
            dt,
            stride,
            splits,
            ..
        } => {
            if dt == &Some(0) {
                return Err("--dt must be >= 1".into());
            }
            if stride == &Some(0) {
                return Err("--stride must be >= 1".into());
            }
            if let Some(s) = splits {
                parse_splits(s)?;
            }
        }
        Command::Train { .. } => {}
        Command::Predict {
            steps, guidance, ..
        }
        | Command::Evaluate {
            steps, guidance, ..
        } => {
            if steps == &Some(0) {
                return Err("--steps must be >= 1".into());
            }
            if let Some(w) = guidance {
                if !(w.is_finite() && *w >= 0.0) {
                    return Err(format!("--guidance {w} must be finite and >= 0"));
                }
            }
        }
        Command::Rollout { count, .. } => {
            if *count == 0 {
                return Err("--count must be >= 1".into());
            }
        }
    }
    Ok(())
}

fn load_app_config(path: Option<&PathBuf>) -> Result<AppConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(AppConfig::default()),
    }
}

fn sampler_from(
    config: &AppConfig,
    steps: Option<usize>,
    guidance: Option<f64>,
    seed: Option<u64>,
    post_process: Option<bool>,
) -> SamplerConfig {
    SamplerConfig {
        num_steps: steps.unwrap_or(config.sampler.num_steps),
        guidance_weight: guidance.unwrap_or(config.sampler.guidance_weight),
        eta: config.sampler.eta,
        seed: seed.unwrap_or(config.sampler.seed),
        post_process: post_process.unwrap_or(config.sampler.post_process),
    }
}

fn checkpoint_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn execute(cli: Cli) -> Result<()> {
    let config = load_app_config(cli.config.as_ref())?;
    config.validate()?;
    let seed = cli.seed;

    match cli.cmd {
        Command::GenEpisodes {
            task,
            episodes,
            frames,
            resolution,
            out,
        } => {
            let task = Task::parse(&task)?;
            let base_seed = seed.unwrap_or(0);
            for i in 0..episodes {
                let spec =
                    SyntheticSceneSpec::new(task, base_seed + i as u64, frames, resolution)?;
                let ep = render_synthetic_episode(&spec)?;
                let dir = write_episode_dir(&ep, &out)?;
                log::info!("wrote episode {}", dir.display());
            }
            Ok(())
        }

        Command::BuildDataset {
            episodes_dir,
            dt,
            stride,
            splits,
            out,
        } => {
            let delta_t = dt.unwrap_or(config.dataset.delta_t);
            let stride = stride.unwrap_or(config.dataset.stride);
            let fractions = match splits {
                Some(s) => parse_splits(&s).map_err(CoreError::Config)?,
                None => config.dataset.splits,
            };
            let episodes = read_episode_dirs(&episodes_dir)?;
            log::info!("loaded {} episodes", episodes.len());

            let mut provenance = BTreeMap::new();
            provenance.insert(
                "episodes_dir".to_string(),
                episodes_dir.display().to_string(),
            );
            let eps: Vec<Episode> = episodes.values().cloned().collect();
            let (manifest, warnings) = assemble_manifest(&eps, delta_t, stride, provenance)?;
            for w in &warnings {
                log::warn!("{w}");
            }
            let manifest = split_dataset(
                &manifest,
                (fractions[0], fractions[1], fractions[2]),
                seed.unwrap_or(config.train.seed),
            )?;
            write_instructpix2pix_layout(&manifest, &episodes, &out)?;
            log::info!(
                "dataset written to {}: {} samples",
                out.display(),
                manifest.samples.len()
            );
            Ok(())
        }

        Command::Train { dataset, out, peft } => {
            let manifest = load_manifest(&dataset)?;
            let train_pairs = load_split_pairs(&manifest, &dataset, Split::Train)?;
            let val_pairs = load_split_pairs(&manifest, &dataset, Split::Val)?;
            log::info!(
                "dataset: {} train / {} val pairs",
                train_pairs.len(),
                val_pairs.len()
            );

            let mut train_cfg = config.train.clone();
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            if peft && train_cfg.peft.is_none() {
                train_cfg.peft = Some(Default::default());
            }

            let vocab = Vocab::build(manifest.samples.iter().map(|s| s.instruction.as_str()))?;
            let mut model = Model::new(&config.model, vocab, train_cfg.seed)?;
            let outcome = train(&mut model, &train_pairs, &val_pairs, &train_cfg, &out)?;
            log::info!(
                "training done: {} steps, final checkpoint {}",
                outcome.total_steps,
                outcome.final_checkpoint.display()
            );
            Ok(())
        }

        Command::Predict {
            checkpoint,
            image,
            instruction,
            steps,
            guidance,
            out,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let input = Image::load(&image)?;
            let cfg = sampler_from(&config, steps, guidance, seed, None);
            let predicted = predict_future_frame(&model, &input, &instruction, &cfg)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
                }
            }
            predicted.save_png(&out)?;
            log::info!("prediction written to {}", out.display());
            Ok(())
        }

        Command::Evaluate {
            checkpoint,
            dataset,
            steps,
            guidance,
            report,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let manifest = load_manifest(&dataset)?;
            let pairs = load_split_pairs(&manifest, &dataset, Split::Test)?;
            if pairs.is_empty() {
                return Err(CoreError::Dataset(
                    "test split is empty; rebuild the dataset with a nonzero test fraction"
                        .into(),
                ));
            }
            // Post-processing stays off here so metrics reflect the raw
            // model output.
            let cfg = sampler_from(&config, steps, guidance, seed, Some(false));
            let results = evaluate_pairs(&model, &pairs, &cfg);
            let baseline = identity_baseline_pairs(&pairs)?;
            let echo = ConfigEcho::from_sampler(checkpoint_id(&checkpoint), &cfg, manifest.delta_t);
            let rep = aggregate_report(results, Some(baseline), echo)?;
            rep.write(&report)?;
            let b = rep.baseline.as_ref().expect("baseline supplied");
            log::info!(
                "evaluated {} samples: mean SSIM {:.4} (identity {:.4}), mean PSNR {:.2} dB",
                rep.overall.count,
                rep.overall.mean_ssim,
                b.overall.mean_ssim,
                rep.overall.mean_psnr
            );
            Ok(())
        }

        Command::Rollout {
            checkpoint,
            episode,
            start,
            count,
            out,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let ep = load_episode_dir(&episode, MIN_SYNTHETIC_RESOLUTION)?;
            let cfg = sampler_from(&config, None, None, seed, None);
            let items = rollout_eval(&model, &ep, start, count, config.dataset.delta_t, &cfg)?;
            fs::create_dir_all(&out).map_err(|e| CoreError::io(&out, e))?;
            let grid = rollout_grid(&items)?;
            let grid_path = out.join("rollout_grid.png");
            grid.save_png(&grid_path)?;
            let mut metrics = Vec::with_capacity(items.len());
            for it in &items {
                it.predicted
                    .save_png(&out.join(format!("pred_{:05}.png", it.target_frame)))?;
                metrics.push(it.metrics.clone());
            }
            let metrics_path = out.join("rollout_metrics.json");
            fs::write(&metrics_path, serde_json::to_string_pretty(&metrics)?)
                .map_err(|e| CoreError::io(&metrics_path, e))?;
            log::info!(
                "rollout grid written to {} ({} predictions)",
                grid_path.display(),
                items.len()
            );
            Ok(())
        }
    }
}

/// Load every episode subdirectory (detected by its task label file).
fn read_episode_dirs(dir: &Path) -> Result<BTreeMap<String, Episode>> {
    let entries = fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| CoreError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() && path.join(TASK_LABEL_FILE).exists() {
            let ep = load_episode_dir(&path, MIN_SYNTHETIC_RESOLUTION)?;
            out.insert(ep.episode_id.clone(), ep);
        }
    }
    if out.is_empty() {
        return Err(CoreError::Dataset(format!(
            "no episode directories found under {}",
            dir.display()
        )));
    }
    Ok(out)
}
