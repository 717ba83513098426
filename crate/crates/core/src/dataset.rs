//! Paired-frame dataset assembly: (input frame t, target frame t+Δt,
//! instruction) samples written as per-sample directories plus a manifest.
//!
//! Layout: `<root>/samples/<id>/{<id>_0.png, <id>_1.png, prompt.json}` and
//! `<root>/manifest.json`. Splits are assigned per episode, never per pair —
//! adjacent pairs within an episode are near-duplicates and would leak.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episode::{Episode, Task};
use crate::error::{CoreError, Result};
use crate::img::Image;
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplePair {
    pub sample_id: String,
    pub episode_id: String,
    pub task: Task,
    pub input_frame: usize,
    pub target_frame: usize,
    pub delta_t: usize,
    /// Templated instruction, exactly what prompt.json carries.
    pub instruction: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub delta_t: usize,
    pub stride: usize,
    pub provenance: BTreeMap<String, String>,
    pub samples: Vec<SamplePair>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptJson {
    instruction: String,
    task: String,
    input_frame: usize,
    target_frame: usize,
}

/// "Scene after executing '<instruction>'."
pub fn apply_prompt_template(raw_instruction: &str) -> Result<String> {
    if raw_instruction.trim().is_empty() {
        return Err(CoreError::Dataset("empty instruction".to_string()));
    }
    Ok(format!("Scene after executing '{raw_instruction}'."))
}

/// Pair count for an episode: floor((n-1-Δt)/stride)+1 when n > Δt, else 0.
pub fn expected_pair_count(num_frames: usize, delta_t: usize, stride: usize) -> usize {
    if num_frames <= delta_t {
        return 0;
    }
    if stride == 0 {
        return 1;
    }
    (num_frames - 1 - delta_t) / stride + 1
}

/// Enumerates pairs with input indices 0, stride, 2·stride, … while
/// t+Δt fits. `stride == 0` means a single pair starting at frame 0.
/// Returns a warning record instead of pairs when the episode is too short.
pub fn build_pairs(
    episode: &Episode,
    delta_t: usize,
    stride: usize,
) -> Result<(Vec<SamplePair>, Option<String>)> {
    if delta_t == 0 {
        return Err(CoreError::invalid("build_pairs", "delta_t must be >= 1"));
    }
    let n = episode.num_frames();
    if n <= delta_t {
        return Ok((
            Vec::new(),
            Some(format!(
                "episode {} has {n} frames, too short for delta_t {delta_t}",
                episode.episode_id
            )),
        ));
    }
    let instruction = apply_prompt_template(&episode.instruction)?;
    let starts: Vec<usize> = if stride == 0 {
        vec![0]
    } else {
        (0..).map(|k| k * stride).take_while(|t| t + delta_t <= n - 1).collect()
    };
    let pairs = starts
        .into_iter()
        .enumerate()
        .map(|(i, t)| SamplePair {
            sample_id: format!("{i:06}"),
            episode_id: episode.episode_id.clone(),
            task: episode.task,
            input_frame: t,
            target_frame: t + delta_t,
            delta_t,
            instruction: instruction.clone(),
            split: Split::Train,
        })
        .collect();
    Ok((pairs, None))
}

/// Builds pairs across episodes and renumbers sample ids globally in episode
/// order. Warnings from short episodes are collected, not fatal.
pub fn assemble_manifest(
    episodes: &[Episode],
    delta_t: usize,
    stride: usize,
    provenance: BTreeMap<String, String>,
) -> Result<(DatasetManifest, Vec<String>)> {
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for ep in episodes {
        let (pairs, warning) = build_pairs(ep, delta_t, stride)?;
        warnings.extend(warning);
        samples.extend(pairs);
    }
    for (i, s) in samples.iter_mut().enumerate() {
        s.sample_id = format!("{i:06}");
    }
    Ok((
        DatasetManifest {
            delta_t,
            stride,
            provenance,
            samples,
        },
        warnings,
    ))
}

/// Largest-remainder apportionment of `n` into the given fractions.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [
        quotas[0].floor() as usize,
        quotas[1].floor() as usize,
        quotas[2].floor() as usize,
    ];
    // The floors undershoot n by at most 2, so one ordered pass settles it.
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Episode-level split assignment, deterministic in the seed.
pub fn split_dataset(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(CoreError::Dataset(format!(
            "fractions must lie in [0,1], got {fr:?}"
        )));
    }
    let sum: f64 = fr.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CoreError::Dataset(format!(
            "split fractions must sum to 1, got {sum}"
        )));
    }
    let episode_ids: Vec<String> = manifest
        .samples
        .iter()
        .map(|s| s.episode_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if episode_ids.is_empty() {
        return Err(CoreError::Dataset("no episodes to split".to_string()));
    }
    let n = episode_ids.len();
    let counts = apportion(n, &fr);
    for (i, split) in Split::ALL.iter().enumerate() {
        if fr[i] > 0.0 && counts[i] == 0 {
            return Err(CoreError::Dataset(format!(
                "{} split would be empty: fraction {} of {n} episodes rounds to zero",
                split.name(),
                fr[i]
            )));
        }
    }

    let mut shuffled = episode_ids;
    let mut rng = derive_rng(seed, "dataset-split");
    // Fisher-Yates over the sorted id list.
    for i in (1..shuffled.len()).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        shuffled.swap(i, j);
    }
    let mut assignment: BTreeMap<String, Split> = BTreeMap::new();
    let mut cursor = 0usize;
    for (count, split) in counts.iter().zip(Split::ALL) {
        for id in shuffled.iter().skip(cursor).take(*count) {
            assignment.insert(id.clone(), split);
        }
        cursor += count;
    }

    let mut out = manifest.clone();
    for s in &mut out.samples {
        s.split = assignment[&s.episode_id];
    }
    Ok(out)
}

pub fn samples_dir(root: &Path) -> PathBuf {
    root.join("samples")
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

pub fn sample_image_paths(root: &Path, sample_id: &str) -> (PathBuf, PathBuf) {
    let dir = samples_dir(root).join(sample_id);
    (
        dir.join(format!("{sample_id}_0.png")),
        dir.join(format!("{sample_id}_1.png")),
    )
}

/// Writes all sample directories plus `manifest.json`. Fails on duplicate
/// sample ids or frames that do not resolve against `episodes`.
pub fn write_instructpix2pix_layout(
    manifest: &DatasetManifest,
    episodes: &BTreeMap<String, Episode>,
    out: &Path,
) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in &manifest.samples {
        if !seen.insert(s.sample_id.clone()) {
            return Err(CoreError::Dataset(format!(
                "duplicate sample_id {}",
                s.sample_id
            )));
        }
        let ep = episodes.get(&s.episode_id).ok_or_else(|| {
            CoreError::Dataset(format!("episode {} not provided", s.episode_id))
        })?;
        if s.target_frame >= ep.num_frames() || s.target_frame != s.input_frame + s.delta_t {
            return Err(CoreError::Dataset(format!(
                "sample {} references frames ({}, {}) outside episode {} ({} frames)",
                s.sample_id,
                s.input_frame,
                s.target_frame,
                s.episode_id,
                ep.num_frames()
            )));
        }
    }

    for s in &manifest.samples {
        let ep = &episodes[&s.episode_id];
        let dir = samples_dir(out).join(&s.sample_id);
        std::fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
        let (p0, p1) = sample_image_paths(out, &s.sample_id);
        ep.frames[s.input_frame].save_png(&p0)?;
        ep.frames[s.target_frame].save_png(&p1)?;
        let prompt = PromptJson {
            instruction: s.instruction.clone(),
            task: s.task.id().to_string(),
            input_frame: s.input_frame,
            target_frame: s.target_frame,
        };
        let ppath = dir.join("prompt.json");
        std::fs::write(&ppath, serde_json::to_string_pretty(&prompt)?)
            .map_err(|e| CoreError::io(&ppath, e))?;
    }
    save_manifest(manifest, out)
}

pub fn save_manifest(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| CoreError::io(root, e))?;
    let path = manifest_path(root);
    std::fs::write(&path, serde_json::to_string_pretty(manifest)?)
        .map_err(|e| CoreError::io(&path, e))
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(root);
    let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let mut seen = BTreeSet::new();
    for s in &manifest.samples {
        if !seen.insert(&s.sample_id) {
            return Err(CoreError::Dataset(format!(
                "manifest has duplicate sample_id {}",
                s.sample_id
            )));
        }
    }
    Ok(manifest)
}

pub fn load_pair_images(root: &Path, pair: &SamplePair) -> Result<(Image, Image)> {
    let (p0, p1) = sample_image_paths(root, &pair.sample_id);
    Ok((Image::load(&p0)?, Image::load(&p1)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{render_synthetic_episode, SyntheticSceneSpec};
    use proptest::prelude::*;

    fn episode(task: Task, seed: u64, frames: usize) -> Episode {
        let spec = SyntheticSceneSpec::new(task, seed, frames, 32).unwrap();
        render_synthetic_episode(&spec).unwrap()
    }

    #[test]
    fn template_examples() {
        assert_eq!(
            apply_prompt_template("beat the block with the hammer").unwrap(),
            "Scene after executing 'beat the block with the hammer'."
        );
        assert_eq!(
            apply_prompt_template("stack blocks").unwrap(),
            "Scene after executing 'stack blocks'."
        );
        assert!(apply_prompt_template("").is_err());
        assert!(apply_prompt_template("   ").is_err());
    }

    #[test]
    fn pairs_400_frames_stride_10() {
        let ep = episode(Task::HammerBeat, 1, 400);
        let (pairs, warn) = build_pairs(&ep, 100, 10).unwrap();
        assert!(warn.is_none());
        assert_eq!(pairs.len(), 30);
        let starts: Vec<usize> = pairs.iter().map(|p| p.input_frame).collect();
        assert_eq!(starts, (0..30).map(|k| k * 10).collect::<Vec<_>>());
        assert!(pairs.iter().all(|p| p.target_frame == p.input_frame + 100));
    }

    #[test]
    fn pairs_boundary_cases() {
        let ep101 = episode(Task::Handover, 2, 101);
        let (pairs, _) = build_pairs(&ep101, 100, 10).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].input_frame, pairs[0].target_frame), (0, 100));

        let ep100 = episode(Task::Handover, 3, 100);
        let (pairs, warn) = build_pairs(&ep100, 100, 10).unwrap();
        assert!(pairs.is_empty());
        assert!(warn.is_some());
    }

    #[test]
    fn stride_zero_means_single_pair() {
        let ep = episode(Task::Stack, 4, 150);
        let (pairs, _) = build_pairs(&ep, 100, 0).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].input_frame, pairs[0].target_frame), (0, 100));
    }

    proptest! {
        #[test]
        fn pair_count_matches_brute_force(n in 1usize..600, dt in 1usize..150, stride in 1usize..40) {
            let brute = (0..n).step_by(stride).filter(|t| t + dt <= n.saturating_sub(1)).count();
            prop_assert_eq!(expected_pair_count(n, dt, stride), brute);
        }
    }

    #[test]
    fn pair_counts_agree_with_build() {
        for (frames, dt, stride) in [(400usize, 100usize, 10usize), (137, 50, 7), (101, 100, 10)] {
            let ep = episode(Task::HammerBeat, 5, frames);
            let (pairs, _) = build_pairs(&ep, dt, stride).unwrap();
            assert_eq!(pairs.len(), expected_pair_count(frames, dt, stride));
        }
    }

    fn toy_manifest(n_episodes: usize) -> DatasetManifest {
        let episodes: Vec<Episode> = (0..n_episodes)
            .map(|i| episode(Task::ALL[i % 3], i as u64, 120))
            .collect();
        assemble_manifest(&episodes, 100, 10, BTreeMap::new())
            .unwrap()
            .0
    }

    #[test]
    fn split_is_deterministic_and_episode_atomic() {
        let manifest = toy_manifest(10);
        let a = split_dataset(&manifest, (0.8, 0.1, 0.1), 0).unwrap();
        let b = split_dataset(&manifest, (0.8, 0.1, 0.1), 0).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.split, y.split);
        }
        let mut by_episode: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
        for s in &a.samples {
            by_episode.entry(&s.episode_id).or_default().insert(s.split);
        }
        assert!(by_episode.values().all(|set| set.len() == 1));
        let episodes_in = |split: Split| {
            by_episode
                .iter()
                .filter(|(_, v)| v.contains(&split))
                .count()
        };
        assert_eq!(episodes_in(Split::Train), 8);
        assert_eq!(episodes_in(Split::Val), 1);
        assert_eq!(episodes_in(Split::Test), 1);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let manifest = toy_manifest(6);
        assert!(split_dataset(&manifest, (0.5, 0.5, 0.5), 0).is_err());
        assert!(split_dataset(&manifest, (1.1, -0.1, 0.0), 0).is_err());
    }

    #[test]
    fn split_errors_when_a_requested_split_would_be_empty() {
        let manifest = toy_manifest(2);
        let err = split_dataset(&manifest, (0.8, 0.1, 0.1), 0).unwrap_err();
        assert!(err.to_string().contains("empty"));
    }

    #[test]
    fn layout_round_trip_and_prompt_content() {
        let dir = tempfile::tempdir().unwrap();
        let eps: Vec<Episode> = vec![episode(Task::Stack, 7, 120)];
        let (manifest, _) = assemble_manifest(&eps, 100, 10, BTreeMap::new()).unwrap();
        let manifest = split_dataset(&manifest, (1.0, 0.0, 0.0), 0).unwrap();
        let map: BTreeMap<String, Episode> =
            eps.into_iter().map(|e| (e.episode_id.clone(), e)).collect();
        write_instructpix2pix_layout(&manifest, &map, dir.path()).unwrap();

        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), 2);
        for s in &loaded.samples {
            let (i0, i1) = load_pair_images(dir.path(), s).unwrap();
            let ep = &map[&s.episode_id];
            assert_eq!(
                i0.pixels.as_slice().unwrap(),
                ep.frames[s.input_frame].pixels.as_slice().unwrap()
            );
            assert_eq!(
                i1.pixels.as_slice().unwrap(),
                ep.frames[s.target_frame].pixels.as_slice().unwrap()
            );
            let pdir = samples_dir(dir.path()).join(&s.sample_id);
            let prompt: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(pdir.join("prompt.json")).unwrap())
                    .unwrap();
            assert_eq!(
                prompt["instruction"],
                "Scene after executing 'stack blocks'."
            );
            assert_eq!(prompt["input_frame"], s.input_frame);
        }
    }

    #[test]
    fn layout_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let eps = vec![episode(Task::Stack, 8, 120)];
        let (mut manifest, _) = assemble_manifest(&eps, 100, 10, BTreeMap::new()).unwrap();
        manifest.samples[1].sample_id = manifest.samples[0].sample_id.clone();
        let map: BTreeMap<String, Episode> =
            eps.into_iter().map(|e| (e.episode_id.clone(), e)).collect();
        let err = write_instructpix2pix_layout(&manifest, &map, dir.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn empty_manifest_writes_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) = assemble_manifest(&[], 100, 10, BTreeMap::new()).unwrap();
        write_instructpix2pix_layout(&manifest, &BTreeMap::new(), dir.path()).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert!(loaded.samples.is_empty());
    }
}
