//! Two-stage progressive training loop: codec pretraining, diffusion
//! optimization with warmup + condition dropout, delayed adversarial phase
//! with 1:1 discriminator alternation, per-epoch validation and checkpoints,
//! and CSV loss logging.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, Axis, Slice};
use rand::Rng;
use serde::{Deserialize, Serialize};

use framecast_autograd::{AdamW, Arr, BindMode, Binder, Graph, TrainMask};

use crate::checkpoint::{save_checkpoint, OptimizerState, TrainState};
use crate::codec::{compute_latent_scale, image_batch_nchw, train_codec, CodecTrainConfig};
use crate::dataset::{load_pair_images, DatasetManifest, Split};
use crate::error::{CoreError, Result};
use crate::img::Image;
use crate::loss::{composite_loss, discriminator_step, LatentInputs, LossInputs, LossWeights};
use crate::model::Model;
use crate::peft::{peft_mask, PeftPolicy};
use crate::rng::derive_rng;
use crate::text::{cond_batch, TokenSequence, TEXT_TABLE_PARAM};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;
pub const DEFAULT_WARMUP_STEPS: usize = 200;
pub const DEFAULT_COND_DROPOUT: f64 = 0.1;
pub const DEFAULT_ADV_START_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Pixel resolution per stage, e.g. [64, 128] for progressive training.
    pub stage_resolutions: Vec<usize>,
    /// Epochs to run at each stage; parallel to `stage_resolutions`.
    pub stage_epochs: Vec<usize>,
    /// Linear learning-rate warmup length; scale at step s is exactly
    /// `s / warmup_steps` while s < warmup_steps, then 1.
    pub warmup_steps: usize,
    pub loss_weights: LossWeights,
    /// Probability of replacing the instruction with the null condition,
    /// which is what makes classifier-free guidance possible at sampling.
    pub cond_dropout: f64,
    pub seed: u64,
    /// Fine-tuning mode: train only the policy's parameter subset. `None`
    /// trains from scratch (codec pretrain phase + full denoiser training).
    pub peft: Option<PeftPolicy>,
    /// Full f64 precision. The flag exists for config compatibility; reduced
    /// precision is not implemented.
    pub full_precision: bool,
    /// Codec reconstruction pretraining steps before the diffusion phase
    /// (from-scratch mode only; the codec is frozen afterwards).
    pub codec_pretrain_steps: usize,
    pub codec_learning_rate: f64,
    /// Fraction of total steps after which the adversarial term activates.
    pub adv_start_fraction: f64,
    /// Keep a separate checkpoint file per epoch in addition to
    /// `checkpoint_latest`.
    pub keep_epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            batch_size: 8,
            stage_resolutions: vec![64, 128],
            stage_epochs: vec![1, 1],
            warmup_steps: DEFAULT_WARMUP_STEPS,
            loss_weights: LossWeights::default(),
            cond_dropout: DEFAULT_COND_DROPOUT,
            seed: 0,
            peft: None,
            full_precision: true,
            codec_pretrain_steps: 500,
            codec_learning_rate: 3e-3,
            adv_start_fraction: DEFAULT_ADV_START_FRACTION,
            keep_epoch_checkpoints: false,
        }
    }
}

impl TrainConfig {
    /// Small-machine preset: single 32x32 stage, batch 4.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            stage_resolutions: vec![32],
            stage_epochs: vec![4],
            warmup_steps: 50,
            codec_pretrain_steps: 300,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(CoreError::Config(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch size must be >= 1".into()));
        }
        if self.stage_resolutions.is_empty() {
            return Err(CoreError::Config("no training stages configured".into()));
        }
        if self.stage_resolutions.len() != self.stage_epochs.len() {
            return Err(CoreError::Config(format!(
                "{} stage resolutions but {} stage epoch counts",
                self.stage_resolutions.len(),
                self.stage_epochs.len()
            )));
        }
        if self.stage_epochs.iter().sum::<usize>() == 0 {
            return Err(CoreError::Config("all stages have zero epochs".into()));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(CoreError::Config(format!(
                "condition dropout {} outside [0,1)",
                self.cond_dropout
            )));
        }
        if !(0.0..=1.0).contains(&self.adv_start_fraction) {
            return Err(CoreError::Config(format!(
                "adversarial start fraction {} outside [0,1]",
                self.adv_start_fraction
            )));
        }
        if self.codec_pretrain_steps > 0
            && !(self.codec_learning_rate > 0.0 && self.codec_learning_rate.is_finite())
        {
            return Err(CoreError::Config(format!(
                "codec learning rate {} must be positive",
                self.codec_learning_rate
            )));
        }
        self.loss_weights.validate()
    }
}

/// Learning-rate multiplier at a (0-based) optimizer step.
pub fn warmup_scale(step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        1.0
    } else {
        step as f64 / warmup_steps as f64
    }
}

/// Whether the adversarial term is active once `completed_steps` of
/// `total_steps` are done.
pub fn adv_active_at(completed_steps: usize, total_steps: usize, start_fraction: f64) -> bool {
    completed_steps as f64 >= start_fraction * total_steps as f64
}

/// Area-average downsample to a square stage resolution. Refuses upsampling
/// and resolutions that do not divide into codec latents.
pub fn resize_for_stage(image: &Image, resolution: usize, spatial_factor: usize) -> Result<Image> {
    if spatial_factor == 0 || resolution % spatial_factor != 0 {
        return Err(CoreError::Config(format!(
            "stage resolution {resolution} is not divisible by the codec factor {spatial_factor}"
        )));
    }
    if resolution == image.height() && resolution == image.width() {
        return Ok(image.clone());
    }
    image.resize_area(resolution, resolution)
}

/// One sample pair loaded into memory at source resolution.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub sample_id: String,
    pub task_id: String,
    pub input: Image,
    pub target: Image,
    pub instruction: String,
}

/// Load every pair of one split from an on-disk dataset layout.
pub fn load_split_pairs(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
) -> Result<Vec<LoadedPair>> {
    let mut out = Vec::new();
    for pair in manifest.samples.iter().filter(|p| p.split == split) {
        let (input, target) = load_pair_images(root, pair)?;
        out.push(LoadedPair {
            sample_id: pair.sample_id.clone(),
            task_id: pair.task.id().to_string(),
            input,
            target,
            instruction: pair.instruction.clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub diff: f64,
    pub perc: f64,
    pub adv: f64,
    /// Wall-clock seconds since training started; kept in memory only (the
    /// CSV schema is fixed and timestamps would break run-to-run identity).
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: usize,
    pub total: f64,
    pub diff: f64,
    pub perc: f64,
    pub adv: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub val: Vec<ValRecord>,
}

impl TrainLog {
    pub fn step_csv(&self) -> String {
        let mut s = String::from("step,loss_total,loss_diff,loss_perc,loss_adv\n");
        for r in &self.steps {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.total, r.diff, r.perc, r.adv
            ));
        }
        s
    }

    pub fn val_csv(&self) -> String {
        let mut s = String::from("epoch,loss_total,loss_diff,loss_perc,loss_adv\n");
        for r in &self.val {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.total, r.diff, r.perc, r.adv
            ));
        }
        s
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let step_path = out_dir.join("train_log.csv");
        fs::write(&step_path, self.step_csv()).map_err(|e| CoreError::io(&step_path, e))?;
        let val_path = out_dir.join("val.csv");
        fs::write(&val_path, self.val_csv()).map_err(|e| CoreError::io(&val_path, e))
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub latest_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub total_steps: usize,
}

/// Per-stage tensors. Latents are cached only when the codec is fully frozen
/// (from-scratch mode); in fine-tuning mode pixels are encoded inside each
/// loss graph so trainable encoder layers receive gradients.
struct StageData {
    target_px: Arr,
    cond_px: Arr,
    z_target: Option<Arr>,
    z_cond: Option<Arr>,
    seqs: Vec<TokenSequence>,
    n: usize,
}

fn select_rows(a: &Arr, idx: &[usize]) -> Arr {
    a.select(Axis(0), idx)
}

fn encode_in_chunks(model: &Model, px: &Arr) -> Result<Arr> {
    let n = px.shape()[0];
    let chunk = 16usize;
    let mut parts = Vec::new();
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let view = px.slice_axis(Axis(0), Slice::from(at..hi)).to_owned();
        parts.push(model.codec.encode_arr(&model.store, &view)?);
        at = hi;
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| CoreError::shape("encode_in_chunks", e.to_string()))
}

fn prepare_stage(
    model: &Model,
    pairs: &[LoadedPair],
    resolution: usize,
    cache_latents: bool,
) -> Result<StageData> {
    let factor = model.codec.cfg.spatial_factor;
    let mut targets = Vec::with_capacity(pairs.len());
    let mut conds = Vec::with_capacity(pairs.len());
    let mut seqs = Vec::with_capacity(pairs.len());
    for p in pairs {
        targets.push(resize_for_stage(&p.target, resolution, factor)?);
        conds.push(resize_for_stage(&p.input, resolution, factor)?);
        seqs.push(model.vocab.encode(&p.instruction)?);
    }
    let target_px = image_batch_nchw(&targets.iter().collect::<Vec<_>>())?;
    let cond_px = image_batch_nchw(&conds.iter().collect::<Vec<_>>())?;
    let (z_target, z_cond) = if cache_latents {
        let s = model.latent_scale;
        let zt = encode_in_chunks(model, &target_px)?.mapv_into(|v| v * s);
        let zc = encode_in_chunks(model, &cond_px)?.mapv_into(|v| v * s);
        (Some(zt), Some(zc))
    } else {
        (None, None)
    };
    Ok(StageData {
        target_px,
        cond_px,
        z_target,
        z_cond,
        seqs,
        n: pairs.len(),
    })
}

fn shuffled_indices(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Evaluate the composite loss over a prepared split without updating
/// anything. The noise/timestep draws restart from fixed streams, so numbers
/// are comparable across epochs.
fn eval_split_loss(
    model: &Model,
    data: &StageData,
    cfg: &TrainConfig,
    adv_now: bool,
) -> Result<(f64, f64, f64, f64)> {
    let mut ts_rng = derive_rng(cfg.seed, "val-ts");
    let mut eps_rng = derive_rng(cfg.seed, "val-noise");
    let t_max = model.schedule.num_steps;
    let (mut s_tot, mut s_diff, mut s_perc, mut s_adv) = (0.0, 0.0, 0.0, 0.0);
    let mut at = 0;
    while at < data.n {
        let hi = (at + cfg.batch_size).min(data.n);
        let idx: Vec<usize> = (at..hi).collect();
        let bs = idx.len();
        let ts: Vec<usize> = (0..bs).map(|_| ts_rng.random_range(1..=t_max)).collect();
        let zshape = latent_batch_shape(model, &data.target_px, bs)?;
        let eps = crate::schedule::sample_eps(&mut eps_rng, &zshape);
        let seqs: Vec<TokenSequence> = idx.iter().map(|&i| data.seqs[i].clone()).collect();
        let cond = cond_batch(&seqs)?;
        let target_px = select_rows(&data.target_px, &idx);
        let (zt_rows, zc_rows, cond_px_rows);
        let latents = match (&data.z_target, &data.z_cond) {
            (Some(zt), Some(zc)) => {
                zt_rows = select_rows(zt, &idx);
                zc_rows = select_rows(zc, &idx);
                LatentInputs::Cached {
                    z_target: &zt_rows,
                    z_cond: &zc_rows,
                }
            }
            _ => {
                cond_px_rows = Some(select_rows(&data.cond_px, &idx));
                LatentInputs::EncodePixels {
                    target: &target_px,
                    cond: cond_px_rows.as_ref().expect("set above"),
                }
            }
        };
        let li = LossInputs {
            latents,
            target_pixels: &target_px,
            cond: &cond,
            ts: &ts,
            eps: &eps,
            latent_scale: model.latent_scale,
        };
        let mut g = Graph::new(false);
        let b = Binder::bind(&mut g, &model.store, BindMode::Infer);
        let terms = composite_loss(
            &mut g,
            &b,
            &model.denoiser,
            &model.codec,
            &model.schedule,
            &li,
            &cfg.loss_weights,
            adv_now,
        )?;
        let v = terms.values(&g)?;
        let w = bs as f64;
        s_tot += v.total * w;
        s_diff += v.diff * w;
        s_perc += v.perc * w;
        s_adv += v.adv * w;
        at = hi;
    }
    let n = data.n as f64;
    Ok((s_tot / n, s_diff / n, s_perc / n, s_adv / n))
}

fn latent_batch_shape(model: &Model, px: &Arr, batch: usize) -> Result<Vec<usize>> {
    let (lh, lw) = model.codec.latent_shape(px.shape()[2], px.shape()[3])?;
    Ok(vec![batch, model.codec.cfg.latent_channels, lh, lw])
}

/// Run the full training procedure, mutating `model` in place. Artifacts
/// (checkpoints, loss CSVs) land under `out_dir`.
pub fn train(
    model: &mut Model,
    train_pairs: &[LoadedPair],
    val_pairs: &[LoadedPair],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(CoreError::Dataset("train split is empty".into()));
    }
    if val_pairs.is_empty() {
        return Err(CoreError::Dataset("validation split is empty".into()));
    }
    for &res in &cfg.stage_resolutions {
        model.check_resolution(res, res)?;
    }
    fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let latest_path = out_dir.join("checkpoint_latest.fckp");
    let final_path = out_dir.join("checkpoint_final.fckp");
    let started = Instant::now();

    let from_scratch = cfg.peft.is_none();
    let stage0_res = cfg.stage_resolutions[0];

    // Phase 1 (from-scratch only): codec reconstruction pretraining at the
    // first stage resolution, then latent-scale calibration. The codec is
    // frozen for the diffusion phase — training it jointly admits a latent
    // collapse that trivializes the noise-prediction objective.
    if from_scratch && cfg.codec_pretrain_steps > 0 {
        let factor = model.codec.cfg.spatial_factor;
        let mut frames = Vec::with_capacity(train_pairs.len() * 2);
        for p in train_pairs {
            frames.push(resize_for_stage(&p.input, stage0_res, factor)?);
            frames.push(resize_for_stage(&p.target, stage0_res, factor)?);
        }
        let report = train_codec(
            &model.codec,
            &mut model.store,
            &frames,
            &CodecTrainConfig {
                steps: cfg.codec_pretrain_steps,
                lr: cfg.codec_learning_rate,
                batch_size: cfg.batch_size.max(2),
                seed: cfg.seed,
            },
        )?;
        log::info!(
            "codec pretraining: {} steps, reconstruction MSE {:.6}",
            cfg.codec_pretrain_steps,
            report.final_loss
        );
    }
    if from_scratch {
        let factor = model.codec.cfg.spatial_factor;
        let mut frames = Vec::with_capacity(train_pairs.len());
        for p in train_pairs {
            frames.push(resize_for_stage(&p.target, stage0_res, factor)?);
        }
        let px = image_batch_nchw(&frames.iter().collect::<Vec<_>>())?;
        let latents = encode_in_chunks(model, &px)?;
        model.latent_scale = compute_latent_scale(&latents)?;
        log::info!("latent scale calibrated to {:.6}", model.latent_scale);
    }

    // Trainable parameter set for the diffusion phase.
    let mask = match &cfg.peft {
        Some(policy) => peft_mask(&model.store, &model.codec, policy)?,
        None => TrainMask::from_predicate(&model.store, |n| {
            n.starts_with("denoiser.") || n == TEXT_TABLE_PARAM
        }),
    };
    if mask.is_empty() {
        return Err(CoreError::Train("no trainable parameters".into()));
    }

    let steps_per_epoch = train_pairs.len().div_ceil(cfg.batch_size);
    let total_steps: usize = cfg
        .stage_epochs
        .iter()
        .map(|&e| e * steps_per_epoch)
        .sum();
    if total_steps == 0 {
        return Err(CoreError::Train("no training steps to run".into()));
    }
    let adv_enabled = cfg.loss_weights.lambda_adv > 0.0;

    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut opt_disc = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut drop_rng = derive_rng(cfg.seed, "cond-dropout");
    let mut ts_rng = derive_rng(cfg.seed, "train-ts");
    let mut eps_rng = derive_rng(cfg.seed, "train-noise");
    let t_max = model.schedule.num_steps;

    let mut log_out = TrainLog::default();
    let mut global_step = 0usize;
    let mut epoch_counter = 0usize;

    // A baseline checkpoint before the first step, so an abort at any point
    // leaves a loadable artifact behind.
    let initial_state = TrainState {
        epoch: 0,
        step: 0,
        rng_seed: cfg.seed,
        optimizer: None,
    };
    save_checkpoint(&latest_path, model, &initial_state)?;

    // Flush logs along every exit path, successful or not.
    macro_rules! abort {
        ($err:expr) => {{
            log_out.write(out_dir)?;
            return Err($err);
        }};
    }

    for (stage, (&res, &epochs)) in cfg
        .stage_resolutions
        .iter()
        .zip(cfg.stage_epochs.iter())
        .enumerate()
    {
        if epochs == 0 {
            continue;
        }
        let data = prepare_stage(model, train_pairs, res, from_scratch)?;
        let val_data = prepare_stage(model, val_pairs, res, from_scratch)?;
        log::info!(
            "stage {stage}: {res}x{res}, {} train / {} val pairs, {epochs} epochs",
            data.n,
            val_data.n
        );

        for epoch_in_stage in 0..epochs {
            let mut shuffle_rng =
                derive_rng(cfg.seed, &format!("shuffle-s{stage}-e{epoch_in_stage}"));
            let order = shuffled_indices(data.n, &mut shuffle_rng);

            for chunk in order.chunks(cfg.batch_size) {
                let idx = chunk.to_vec();
                let bs = idx.len();
                let adv_now = adv_enabled
                    && adv_active_at(global_step, total_steps, cfg.adv_start_fraction);

                let ts: Vec<usize> =
                    (0..bs).map(|_| ts_rng.random_range(1..=t_max)).collect();
                let zshape = latent_batch_shape(model, &data.target_px, bs)?;
                let eps = crate::schedule::sample_eps(&mut eps_rng, &zshape);
                let seqs: Vec<TokenSequence> = idx
                    .iter()
                    .map(|&i| {
                        if drop_rng.random::<f64>() < cfg.cond_dropout {
                            TokenSequence::null()
                        } else {
                            data.seqs[i].clone()
                        }
                    })
                    .collect();
                let cond = cond_batch(&seqs)?;
                let target_px = select_rows(&data.target_px, &idx);

                let (zt_rows, zc_rows, cond_px_rows);
                let latents = match (&data.z_target, &data.z_cond) {
                    (Some(zt), Some(zc)) => {
                        zt_rows = select_rows(zt, &idx);
                        zc_rows = select_rows(zc, &idx);
                        LatentInputs::Cached {
                            z_target: &zt_rows,
                            z_cond: &zc_rows,
                        }
                    }
                    _ => {
                        cond_px_rows = Some(select_rows(&data.cond_px, &idx));
                        LatentInputs::EncodePixels {
                            target: &target_px,
                            cond: cond_px_rows.as_ref().expect("set above"),
                        }
                    }
                };
                let li = LossInputs {
                    latents,
                    target_pixels: &target_px,
                    cond: &cond,
                    ts: &ts,
                    eps: &eps,
                    latent_scale: model.latent_scale,
                };

                let mut g = Graph::new(true);
                let (values, grads, decoded) = {
                    let b = Binder::bind(&mut g, &model.store, BindMode::Train(&mask));
                    let terms = match composite_loss(
                        &mut g,
                        &b,
                        &model.denoiser,
                        &model.codec,
                        &model.schedule,
                        &li,
                        &cfg.loss_weights,
                        adv_now,
                    ) {
                        Ok(t) => t,
                        Err(e) => abort!(e),
                    };
                    let values = match terms.values(&g) {
                        Ok(v) => v,
                        Err(e) => {
                            abort!(CoreError::Train(format!(
                                "aborted at step {}: {e}; last good checkpoint retained at {}",
                                global_step + 1,
                                latest_path.display()
                            )))
                        }
                    };
                    if let Err(e) = g.backward(terms.total) {
                        abort!(e.into());
                    }
                    let grads = match b.grads(&g, &model.store, &mask) {
                        Ok(gr) => gr,
                        Err(e) => abort!(e.into()),
                    };
                    let decoded = terms.decoded.map(|n| g.value(n).clone());
                    (values, grads, decoded)
                };
                drop(g);

                let lr_scale = warmup_scale(global_step, cfg.warmup_steps);
                opt.step(&mut model.store, &grads, lr_scale)?;

                // 1:1 generator/discriminator alternation once the
                // adversarial phase is active; fakes are the detached
                // decoded estimates from the generator pass.
                if adv_now {
                    let fake = decoded.ok_or_else(|| {
                        CoreError::Train(
                            "adversarial step active but no decoded estimate produced".into(),
                        )
                    })?;
                    if let Err(e) = discriminator_step(
                        &mut model.store,
                        &mut opt_disc,
                        &target_px,
                        &fake,
                    ) {
                        abort!(CoreError::Train(format!(
                            "discriminator aborted at step {}: {e}",
                            global_step + 1
                        )));
                    }
                }

                global_step += 1;
                log_out.steps.push(StepRecord {
                    step: global_step,
                    total: values.total,
                    diff: values.diff,
                    perc: values.perc,
                    adv: values.adv,
                    elapsed_secs: started.elapsed().as_secs_f64(),
                });
                if global_step % 50 == 0 || global_step == total_steps {
                    log::info!(
                        "step {global_step}/{total_steps}: total={:.5} diff={:.5} perc={:.5} adv={:.5}",
                        values.total,
                        values.diff,
                        values.perc,
                        values.adv
                    );
                }
            }

            epoch_counter += 1;
            let adv_now = adv_enabled
                && adv_active_at(global_step, total_steps, cfg.adv_start_fraction);
            let (vt, vd, vp, va) = match eval_split_loss(model, &val_data, cfg, adv_now) {
                Ok(v) => v,
                Err(e) => abort!(e),
            };
            log_out.val.push(ValRecord {
                epoch: epoch_counter,
                total: vt,
                diff: vd,
                perc: vp,
                adv: va,
            });
            log::info!(
                "epoch {epoch_counter}: val total={vt:.5} diff={vd:.5} perc={vp:.5} adv={va:.5}"
            );

            let state = TrainState {
                epoch: epoch_counter,
                step: global_step,
                rng_seed: cfg.seed,
                optimizer: Some(OptimizerState::capture(&opt)),
            };
            save_checkpoint(&latest_path, model, &state)?;
            if cfg.keep_epoch_checkpoints {
                let p = out_dir.join(format!("checkpoint_epoch_{epoch_counter:04}.fckp"));
                save_checkpoint(&p, model, &state)?;
            }
        }
    }

    let final_state = TrainState {
        epoch: epoch_counter,
        step: global_step,
        rng_seed: cfg.seed,
        optimizer: Some(OptimizerState::capture(&opt)),
    };
    save_checkpoint(&final_path, model, &final_state)?;
    log_out.write(out_dir)?;
    Ok(TrainOutcome {
        log: log_out,
        latest_checkpoint: latest_path,
        final_checkpoint: final_path,
        total_steps,
    })
}
