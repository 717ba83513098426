//! Evaluation harness: per-sample SSIM/PSNR measurement, episode sweeps,
//! the identity (input-copied-forward) baseline, sliding-window rollouts with
//! an image-grid artifact, and aggregated JSON/CSV reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{CoreError, Result};
use crate::img::Image;
use crate::metrics::{psnr, ssim, PSNR_CAP_DB};
use crate::model::Model;
use crate::sampler::{predict_future_frame, SamplerConfig};
use crate::trainer::LoadedPair;

/// Frame horizon the model is trained to predict across.
pub const DEFAULT_DELTA_T: usize = 100;
/// White gutter between cells in the rollout grid artifact.
pub const GRID_GAP: usize = 2;

/// One evaluated sample. PSNR is stored capped (identical images would be
/// +infinity, which JSON cannot carry); `psnr_capped` flags when the cap was
/// applied so the sentinel is never silently absorbed into statistics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricResult {
    pub sample_id: String,
    pub task: String,
    pub ssim: f64,
    pub psnr: f64,
    pub psnr_capped: bool,
    /// Set when prediction failed for this sample; metric fields are zero
    /// and the entry is excluded from aggregates.
    pub failure: Option<String>,
}

impl MetricResult {
    /// Measure a prediction against ground truth.
    pub fn measure(
        sample_id: impl Into<String>,
        task: impl Into<String>,
        predicted: &Image,
        truth: &Image,
    ) -> Result<MetricResult> {
        let s = ssim(predicted, truth)?;
        let p_raw = psnr(predicted, truth)?;
        let capped = !p_raw.is_finite();
        Ok(MetricResult {
            sample_id: sample_id.into(),
            task: task.into(),
            ssim: s,
            psnr: if capped { PSNR_CAP_DB } else { p_raw },
            psnr_capped: capped,
            failure: None,
        })
    }

    pub fn failed(
        sample_id: impl Into<String>,
        task: impl Into<String>,
        message: impl Into<String>,
    ) -> MetricResult {
        MetricResult {
            sample_id: sample_id.into(),
            task: task.into(),
            ssim: 0.0,
            psnr: 0.0,
            psnr_capped: false,
            failure: Some(message.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }
}

/// Summary statistics over the successful entries of a result list.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Aggregate {
    pub count: usize,
    pub failures: usize,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub min_ssim: f64,
    pub max_ssim: f64,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub min_psnr: f64,
    pub max_psnr: f64,
    /// How many entries had their infinite PSNR capped to `PSNR_CAP_DB`.
    pub psnr_caps_applied: usize,
}

fn stats(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

/// Aggregate a result list. Failed entries are counted but excluded from the
/// statistics; an input with no successful entry is an error.
pub fn aggregate(results: &[MetricResult]) -> Result<Aggregate> {
    if results.is_empty() {
        return Err(CoreError::invalid("aggregate", "no results to aggregate"));
    }
    let ok: Vec<&MetricResult> = results.iter().filter(|r| r.is_ok()).collect();
    let failures = results.len() - ok.len();
    if ok.is_empty() {
        return Err(CoreError::invalid("aggregate", format!("all {failures} samples failed")));
    }
    let ssims: Vec<f64> = ok.iter().map(|r| r.ssim).collect();
    let psnrs: Vec<f64> = ok.iter().map(|r| r.psnr).collect();
    let (mean_ssim, std_ssim, min_ssim, max_ssim) = stats(&ssims);
    let (mean_psnr, std_psnr, min_psnr, max_psnr) = stats(&psnrs);
    Ok(Aggregate {
        count: ok.len(),
        failures,
        mean_ssim,
        std_ssim,
        min_ssim,
        max_ssim,
        mean_psnr,
        std_psnr,
        min_psnr,
        max_psnr,
        psnr_caps_applied: ok.iter().filter(|r| r.psnr_capped).count(),
    })
}

fn per_task_aggregates(results: &[MetricResult]) -> Result<BTreeMap<String, Aggregate>> {
    let mut by_task: BTreeMap<String, Vec<MetricResult>> = BTreeMap::new();
    for r in results {
        by_task.entry(r.task.clone()).or_default().push(r.clone());
    }
    let mut out = BTreeMap::new();
    for (task, rs) in by_task {
        // A task whose every sample failed is reported via the overall
        // failure counts rather than aborting the whole report.
        if rs.iter().any(|r| r.is_ok()) {
            out.insert(task, aggregate(&rs)?);
        }
    }
    Ok(out)
}

/// Settings echo stored inside a report so numbers stay interpretable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConfigEcho {
    pub checkpoint: String,
    pub num_steps: usize,
    pub guidance_weight: f64,
    pub eta: f64,
    pub seed: u64,
    pub post_process: bool,
    pub delta_t: usize,
}

impl ConfigEcho {
    pub fn from_sampler(checkpoint: impl Into<String>, cfg: &SamplerConfig, delta_t: usize) -> Self {
        ConfigEcho {
            checkpoint: checkpoint.into(),
            num_steps: cfg.num_steps,
            guidance_weight: cfg.guidance_weight,
            eta: cfg.eta,
            seed: cfg.seed,
            post_process: cfg.post_process,
            delta_t,
        }
    }
}

/// Baseline statistics plus model-minus-baseline deltas.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BaselineBlock {
    pub overall: Aggregate,
    pub per_task: BTreeMap<String, Aggregate>,
    pub delta_mean_ssim: f64,
    pub delta_mean_psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub config: ConfigEcho,
    pub per_sample: Vec<MetricResult>,
    pub overall: Aggregate,
    pub per_task: BTreeMap<String, Aggregate>,
    pub baseline: Option<BaselineBlock>,
}

/// Build the full report from per-sample results and an optional baseline
/// result list (same samples, identity predictor).
pub fn aggregate_report(
    results: Vec<MetricResult>,
    baseline: Option<Vec<MetricResult>>,
    config: ConfigEcho,
) -> Result<EvalReport> {
    let overall = aggregate(&results)?;
    let per_task = per_task_aggregates(&results)?;
    let baseline = match baseline {
        Some(b) => {
            let b_overall = aggregate(&b)?;
            let b_tasks = per_task_aggregates(&b)?;
            Some(BaselineBlock {
                delta_mean_ssim: overall.mean_ssim - b_overall.mean_ssim,
                delta_mean_psnr: overall.mean_psnr - b_overall.mean_psnr,
                overall: b_overall,
                per_task: b_tasks,
            })
        }
        None => None,
    };
    Ok(EvalReport {
        config,
        per_sample: results,
        overall,
        per_task,
        baseline,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-sample CSV with a fixed header.
    pub fn csv(&self) -> String {
        let mut s = String::from("sample_id,task,ssim,psnr,psnr_capped,failure\n");
        for r in &self.per_sample {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.sample_id,
                r.task,
                r.ssim,
                r.psnr,
                r.psnr_capped,
                r.failure.as_deref().unwrap_or("")
            ));
        }
        s
    }

    /// Write `report.json` and `report.csv` under a directory.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let json_path = dir.join("report.json");
        fs::write(&json_path, self.to_json()?).map_err(|e| CoreError::io(&json_path, e))?;
        let csv_path = dir.join("report.csv");
        fs::write(&csv_path, self.csv()).map_err(|e| CoreError::io(&csv_path, e))
    }
}

/// Evaluate a list of dataset pairs: predict from each input frame and
/// measure against the stored target. Per-sample failures are recorded and
/// the run continues.
pub fn evaluate_pairs(
    model: &Model,
    pairs: &[LoadedPair],
    cfg: &SamplerConfig,
) -> Vec<MetricResult> {
    pairs
        .iter()
        .map(|p| {
            match predict_future_frame(model, &p.input, &p.instruction, cfg)
                .and_then(|pred| MetricResult::measure(&p.sample_id, &p.task_id, &pred, &p.target))
            {
                Ok(r) => r,
                Err(e) => MetricResult::failed(&p.sample_id, &p.task_id, e.to_string()),
            }
        })
        .collect()
}

/// Identity baseline over dataset pairs: the input frame itself is the
/// prediction. Needs no model or sampler.
pub fn identity_baseline_pairs(pairs: &[LoadedPair]) -> Result<Vec<MetricResult>> {
    pairs
        .iter()
        .map(|p| MetricResult::measure(&p.sample_id, &p.task_id, &p.input, &p.target))
        .collect()
}

fn sweep_starts(num_frames: usize, delta_t: usize, stride: usize) -> Result<Vec<usize>> {
    if delta_t == 0 {
        return Err(CoreError::invalid("sweep", "delta_t must be >= 1"));
    }
    if stride == 0 {
        return Err(CoreError::invalid("sweep", "frame stride must be >= 1"));
    }
    if num_frames <= delta_t {
        return Err(CoreError::invalid("sweep", format!(
                "episode has {num_frames} frames; needs more than delta_t = {delta_t}"
            )));
    }
    Ok((0..num_frames - delta_t).step_by(stride).collect())
}

fn sweep_sample_id(episode: &Episode, frame: usize) -> String {
    format!("{}:{:05}", episode.episode_id, frame)
}

/// Sweep an episode: for each selected start frame i, predict the frame
/// `delta_t` ahead from frame i and measure against the real one. Sampler
/// errors mark the sample failed and the sweep continues.
pub fn evaluate_episode_sweep(
    model: &Model,
    episode: &Episode,
    cfg: &SamplerConfig,
    delta_t: usize,
    stride: usize,
) -> Result<Vec<MetricResult>> {
    let starts = sweep_starts(episode.num_frames(), delta_t, stride)?;
    let task = episode.task.id();
    Ok(starts
        .into_iter()
        .map(|i| {
            let id = sweep_sample_id(episode, i);
            let truth = &episode.frames[i + delta_t];
            match predict_future_frame(model, &episode.frames[i], &episode.instruction, cfg)
                .and_then(|pred| MetricResult::measure(&id, task, &pred, truth))
            {
                Ok(r) => r,
                Err(e) => MetricResult::failed(&id, task, e.to_string()),
            }
        })
        .collect())
}

/// Identity baseline over an episode: frame i measured directly against
/// frame i + delta_t. Sampler-independent.
pub fn identity_baseline(
    episode: &Episode,
    delta_t: usize,
    stride: usize,
) -> Result<Vec<MetricResult>> {
    let starts = sweep_starts(episode.num_frames(), delta_t, stride)?;
    let task = episode.task.id();
    starts
        .into_iter()
        .map(|i| {
            MetricResult::measure(
                sweep_sample_id(episode, i),
                task,
                &episode.frames[i],
                &episode.frames[i + delta_t],
            )
        })
        .collect()
}

/// One slot of a rollout evaluation.
#[derive(Debug, Clone)]
pub struct RolloutItem {
    pub input_frame: usize,
    pub target_frame: usize,
    pub input: Image,
    pub predicted: Image,
    pub truth: Image,
    pub metrics: MetricResult,
}

/// Sliding-input rollout: for k in 0..count, predict from frame
/// `start_frame + k` and compare to frame `start_frame + k + delta_t`.
/// The whole window must fit inside the episode.
pub fn rollout_eval(
    model: &Model,
    episode: &Episode,
    start_frame: usize,
    count: usize,
    delta_t: usize,
    cfg: &SamplerConfig,
) -> Result<Vec<RolloutItem>> {
    if count == 0 {
        return Err(CoreError::invalid("rollout", "count must be >= 1"));
    }
    let last_target = start_frame + count - 1 + delta_t;
    if last_target >= episode.num_frames() {
        return Err(CoreError::invalid("rollout", format!(
                "rollout needs frame {last_target} but episode '{}' has only {} frames",
                episode.episode_id,
                episode.num_frames()
            )));
    }
    let task = episode.task.id();
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let input_frame = start_frame + k;
        let target_frame = input_frame + delta_t;
        let predicted =
            predict_future_frame(model, &episode.frames[input_frame], &episode.instruction, cfg)?;
        let truth = episode.frames[target_frame].clone();
        let metrics = MetricResult::measure(
            sweep_sample_id(episode, input_frame),
            task,
            &predicted,
            &truth,
        )?;
        out.push(RolloutItem {
            input_frame,
            target_frame,
            input: episode.frames[input_frame].clone(),
            predicted,
            truth,
            metrics,
        });
    }
    Ok(out)
}

/// Assemble the rollout grid artifact: three rows (inputs, ground truths,
/// predictions) by `count` columns, separated by a white gutter.
pub fn rollout_grid(items: &[RolloutItem]) -> Result<Image> {
    if items.is_empty() {
        return Err(CoreError::invalid("rollout grid", "no rollout items"));
    }
    let h = items[0].truth.height();
    let w = items[0].truth.width();
    for it in items {
        for img in [&it.input, &it.predicted, &it.truth] {
            if img.height() != h || img.width() != w {
                return Err(CoreError::shape(
                    "rollout grid",
                    format!(
                        "mixed frame sizes: {}x{} vs {}x{}",
                        img.height(),
                        img.width(),
                        h,
                        w
                    ),
                ));
            }
        }
    }
    let cols = items.len();
    let gh = 3 * h + 2 * GRID_GAP;
    let gw = cols * w + (cols - 1) * GRID_GAP;
    let mut canvas = Array3::<f64>::from_elem((gh, gw, 3), 1.0);
    for (col, it) in items.iter().enumerate() {
        let x0 = col * (w + GRID_GAP);
        let rows: [&Image; 3] = [&it.input, &it.truth, &it.predicted];
        for (row, img) in rows.iter().enumerate() {
            let y0 = row * (h + GRID_GAP);
            let mut slot = canvas.slice_mut(ndarray::s![y0..y0 + h, x0..x0 + w, ..]);
            slot.assign(&img.pixels);
        }
    }
    Image::new(canvas)
}
