//! Episode sources: a deterministic synthetic renderer for three tabletop
//! manipulation tasks, plus ingestion of episode directories in the
//! `<episode_id>/<frame_index>.<ext>` + `task.txt` layout.
//!
//! Every object pose is a pure piecewise-linear function of (spec, t), so any
//! frame can be recomputed analytically — tests rely on that to check future
//! frames without replaying the sequence. Rendering uses hard-edged rectangles
//! (no anti-aliasing) and a fixed 8-bit palette so frames survive PNG
//! round-trips bit-exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::img::Image;
use crate::rng::derive_rng;

pub const MIN_SYNTHETIC_RESOLUTION: usize = 32;
pub const MIN_INGEST_RESOLUTION: usize = 128;
pub const TASK_LABEL_FILE: &str = "task.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    HammerBeat,
    Handover,
    Stack,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::HammerBeat, Task::Handover, Task::Stack];

    pub fn id(&self) -> &'static str {
        match self {
            Task::HammerBeat => "hammer_beat",
            Task::Handover => "handover",
            Task::Stack => "stack",
        }
    }

    /// Raw task instruction; the dataset builder applies the prompt template.
    pub fn instruction(&self) -> &'static str {
        match self {
            Task::HammerBeat => "beat the block with the hammer",
            Task::Handover => "handover the blocks",
            Task::Stack => "stack blocks",
        }
    }

    /// Accepts both our short ids and the upstream episode-directory labels.
    pub fn parse(s: &str) -> Result<Task> {
        match s.trim() {
            "hammer_beat" | "block_hammer_beat" => Ok(Task::HammerBeat),
            "handover" | "block_handover" => Ok(Task::Handover),
            "stack" | "blocks_stack_easy" => Ok(Task::Stack),
            other => Err(CoreError::Episode(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub task: Task,
    pub seed: u64,
    pub num_frames: usize,
    pub resolution: usize,
}

impl SyntheticSceneSpec {
    pub fn new(task: Task, seed: u64, num_frames: usize, resolution: usize) -> Result<Self> {
        if resolution < MIN_SYNTHETIC_RESOLUTION {
            return Err(CoreError::invalid(
                "scene",
                format!("resolution {resolution} below minimum {MIN_SYNTHETIC_RESOLUTION}"),
            ));
        }
        if num_frames == 0 {
            return Err(CoreError::invalid("scene", "num_frames must be >= 1"));
        }
        Ok(SyntheticSceneSpec {
            task,
            seed,
            num_frames,
            resolution,
        })
    }

    pub fn episode_id(&self) -> String {
        format!("{}_{:05}", self.task.id(), self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub episode_id: String,
    pub task: Task,
    pub instruction: String,
    pub frames: Vec<Image>,
}

impl Episode {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

fn rgb(r: u8, g: u8, b: u8) -> [f64; 3] {
    [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
}

const BG: [u8; 3] = [212, 212, 216];
const TABLE: [u8; 3] = [186, 158, 118];
const BLOCK_RED: [u8; 3] = [198, 64, 54];
const BLOCK_GREEN: [u8; 3] = [84, 160, 90];
const BLOCK_BLUE: [u8; 3] = [70, 110, 190];
const HAMMER_HEAD: [u8; 3] = [92, 92, 104];
const HAMMER_HANDLE: [u8; 3] = [150, 112, 62];
const ARM: [u8; 3] = [120, 132, 168];

struct Canvas {
    res: usize,
    pixels: Array3<f64>,
}

impl Canvas {
    fn new(res: usize, bg: [u8; 3]) -> Self {
        let c = rgb(bg[0], bg[1], bg[2]);
        let mut pixels = Array3::zeros((res, res, 3));
        for ch in 0..3 {
            pixels.slice_mut(ndarray::s![.., .., ch]).fill(c[ch]);
        }
        Canvas { res, pixels }
    }

    /// Fills the rectangle [x0,x1)×[y0,y1) in normalized coordinates with
    /// hard pixel edges.
    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
        let c = rgb(color[0], color[1], color[2]);
        let px0 = ((x0 * self.res as f64).round().max(0.0) as usize).min(self.res);
        let px1 = ((x1 * self.res as f64).round().max(0.0) as usize).min(self.res);
        let py0 = ((y0 * self.res as f64).round().max(0.0) as usize).min(self.res);
        let py1 = ((y1 * self.res as f64).round().max(0.0) as usize).min(self.res);
        for y in py0..py1 {
            for x in px0..px1 {
                for ch in 0..3 {
                    self.pixels[[y, x, ch]] = c[ch];
                }
            }
        }
    }
}

/// Piecewise-linear keyframe track over normalized episode time.
struct Track {
    taus: &'static [f64],
    values: Vec<f64>,
}

impl Track {
    fn at(&self, tau: f64) -> f64 {
        let n = self.taus.len();
        if tau <= self.taus[0] {
            return self.values[0];
        }
        for k in 1..n {
            if tau <= self.taus[k] {
                let f = (tau - self.taus[k - 1]) / (self.taus[k] - self.taus[k - 1]);
                return self.values[k - 1] + f * (self.values[k] - self.values[k - 1]);
            }
        }
        self.values[n - 1]
    }
}

/// Triangle wave in [0,1] with `beats` full up-down cycles over tau in [0,1].
fn triangle(tau: f64, beats: f64) -> f64 {
    let phase = (tau * beats).fract();
    if phase < 0.5 {
        phase * 2.0
    } else {
        2.0 - phase * 2.0
    }
}

/// Per-spec geometry jitter, deterministic in the seed. Kept small so objects
/// never leave the scene.
struct Jitter {
    dx: f64,
    size: f64,
}

fn jitter(spec: &SyntheticSceneSpec) -> Jitter {
    let mut rng = derive_rng(spec.seed, &format!("scene-{}", spec.task.id()));
    Jitter {
        dx: rng.random_range(-0.04..0.04),
        size: rng.random_range(0.9..1.1),
    }
}

const TABLE_TOP: f64 = 0.78;

fn draw_hammer_beat(c: &mut Canvas, tau: f64, j: &Jitter) {
    let bs = 0.16 * j.size;
    // Block and hammer drift monotonically left to right while the hammer
    // beats; the drift keeps every pose unique so frame t determines t+dt.
    let bx = 0.18 + j.dx + 0.46 * tau;
    c.rect(bx, TABLE_TOP - bs, bx + bs, TABLE_TOP, BLOCK_RED);

    let lift = 0.06 + 0.30 * triangle(tau, 3.0);
    let head_w = 0.20 * j.size;
    let head_h = 0.09;
    let hx = bx + bs / 2.0 - head_w / 2.0;
    let hy = TABLE_TOP - bs - lift;
    c.rect(hx, hy, hx + head_w, hy + head_h, HAMMER_HEAD);
    let handle_w = 0.045;
    let cx = hx + head_w / 2.0;
    c.rect(
        cx - handle_w / 2.0,
        hy - 0.22,
        cx + handle_w / 2.0,
        hy,
        HAMMER_HANDLE,
    );
}

fn draw_handover(c: &mut Canvas, tau: f64, j: &Jitter) {
    let bs = 0.15 * j.size;
    // Static giver and receiver arms.
    c.rect(0.02, 0.40, 0.14, 0.52, ARM);
    c.rect(0.86, 0.40, 0.98, 0.52, ARM);
    // The block travels left to right, lifting through the midpoint.
    let x = Track {
        taus: &[0.0, 0.40, 0.60, 1.0],
        values: vec![0.10 + j.dx, 0.40, 0.52, 0.80 + j.dx],
    };
    let y = Track {
        taus: &[0.0, 0.40, 0.60, 1.0],
        values: vec![
            TABLE_TOP - bs,
            0.42,
            0.42,
            TABLE_TOP - bs,
        ],
    };
    let bx = x.at(tau);
    let by = y.at(tau);
    c.rect(bx, by, bx + bs, by + bs, BLOCK_GREEN);
    c.rect(bx, by, bx + bs, by + 0.03, BLOCK_BLUE);
}

fn draw_stack(c: &mut Canvas, tau: f64, j: &Jitter) {
    let bs = 0.15 * j.size;
    let base_x = 0.45 + j.dx;
    // Base block stays put.
    c.rect(base_x, TABLE_TOP - bs, base_x + bs, TABLE_TOP, BLOCK_RED);
    // Second block arcs onto the base during the first half.
    let bx = Track {
        taus: &[0.0, 0.20, 0.40, 0.50, 1.0],
        values: vec![0.08, 0.20, base_x, base_x, base_x],
    };
    let by = Track {
        taus: &[0.0, 0.20, 0.40, 0.50, 1.0],
        values: vec![
            TABLE_TOP - bs,
            0.35,
            0.38,
            TABLE_TOP - 2.0 * bs,
            TABLE_TOP - 2.0 * bs,
        ],
    };
    c.rect(
        bx.at(tau),
        by.at(tau),
        bx.at(tau) + bs,
        by.at(tau) + bs,
        BLOCK_GREEN,
    );
    // Third block arcs onto the second during the second half.
    let cx = Track {
        taus: &[0.0, 0.50, 0.70, 0.90, 1.0],
        values: vec![0.84, 0.84, 0.64, base_x, base_x],
    };
    let cy = Track {
        taus: &[0.0, 0.50, 0.70, 0.90, 1.0],
        values: vec![
            TABLE_TOP - bs,
            TABLE_TOP - bs,
            0.30,
            TABLE_TOP - 3.0 * bs,
            TABLE_TOP - 3.0 * bs,
        ],
    };
    c.rect(
        cx.at(tau),
        cy.at(tau),
        cx.at(tau) + bs,
        cy.at(tau) + bs,
        BLOCK_BLUE,
    );
}

/// Renders a single frame as a pure function of (spec, t).
pub fn render_frame(spec: &SyntheticSceneSpec, t: usize) -> Result<Image> {
    if t >= spec.num_frames {
        return Err(CoreError::invalid(
            "render",
            format!("frame {t} out of range 0..{}", spec.num_frames),
        ));
    }
    let tau = if spec.num_frames > 1 {
        t as f64 / (spec.num_frames - 1) as f64
    } else {
        0.0
    };
    let j = jitter(spec);
    let mut canvas = Canvas::new(spec.resolution, BG);
    canvas.rect(0.0, TABLE_TOP, 1.0, 1.0, TABLE);
    match spec.task {
        Task::HammerBeat => draw_hammer_beat(&mut canvas, tau, &j),
        Task::Handover => draw_handover(&mut canvas, tau, &j),
        Task::Stack => draw_stack(&mut canvas, tau, &j),
    }
    Ok(Image::new(canvas.pixels)?.with_meta(&spec.episode_id(), t))
}

pub fn render_synthetic_episode(spec: &SyntheticSceneSpec) -> Result<Episode> {
    let frames: Result<Vec<Image>> = (0..spec.num_frames)
        .map(|t| render_frame(spec, t))
        .collect();
    Ok(Episode {
        episode_id: spec.episode_id(),
        task: spec.task,
        instruction: spec.task.instruction().to_string(),
        frames: frames?,
    })
}

/// Writes `<root>/<episode_id>/<index>.png` frames plus the task label file;
/// returns the episode directory.
pub fn write_episode_dir(episode: &Episode, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&episode.episode_id);
    std::fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
    for (i, frame) in episode.frames.iter().enumerate() {
        frame.save_png(&dir.join(format!("{i}.png")))?;
    }
    let label_path = dir.join(TASK_LABEL_FILE);
    std::fs::write(&label_path, episode.task.id()).map_err(|e| CoreError::io(&label_path, e))?;
    Ok(dir)
}

/// Loads an upstream-format episode directory, enforcing that format's
/// 128x128 frame minimum.
pub fn ingest_robotwin_episode(path: &Path) -> Result<Episode> {
    load_episode_dir(path, MIN_INGEST_RESOLUTION)
}

/// Loads an episode directory (numerically named frames + `task.txt`) with a
/// caller-chosen minimum resolution — our own synthetic episodes are valid
/// from 32x32 up.
pub fn load_episode_dir(path: &Path, min_resolution: usize) -> Result<Episode> {
    let label_path = path.join(TASK_LABEL_FILE);
    let label = std::fs::read_to_string(&label_path)
        .map_err(|e| CoreError::io(&label_path, e))?;
    let task = Task::parse(&label)?;

    let mut indexed: BTreeMap<usize, PathBuf> = BTreeMap::new();
    let entries = std::fs::read_dir(path).map_err(|e| CoreError::io(path, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CoreError::io(path, e))?;
        let p = entry.path();
        let ext_ok = p
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            .unwrap_or(false);
        if !ext_ok {
            continue;
        }
        if let Some(idx) = p
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
        {
            indexed.insert(idx, p);
        }
    }
    if indexed.is_empty() {
        return Err(CoreError::Episode(format!(
            "no numerically named frames in {}",
            path.display()
        )));
    }
    let n = *indexed.keys().next_back().unwrap() + 1;
    let gaps: Vec<usize> = (0..n).filter(|i| !indexed.contains_key(i)).collect();
    if !gaps.is_empty() {
        return Err(CoreError::Episode(format!(
            "missing frame indices {gaps:?} in {}",
            path.display()
        )));
    }

    let episode_id = path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("episode")
        .to_string();
    let mut frames = Vec::with_capacity(n);
    let mut dims: Option<(usize, usize)> = None;
    for i in 0..n {
        let frame = Image::load(&indexed[&i])?;
        let (h, w) = (frame.height(), frame.width());
        if h < min_resolution || w < min_resolution {
            return Err(CoreError::Episode(format!(
                "frame {i} is {h}x{w}, below the {min_resolution}x{min_resolution} minimum"
            )));
        }
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(CoreError::Episode(format!(
                    "frame {i} is {h}x{w}, expected {}x{}",
                    d.0, d.1
                )));
            }
            _ => {}
        }
        frames.push(frame.with_meta(&episode_id, i));
    }
    Ok(Episode {
        episode_id,
        task,
        instruction: task.instruction().to_string(),
        frames,
    })
}
