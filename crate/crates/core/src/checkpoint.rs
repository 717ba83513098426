//! Binary checkpoint format for model weights, optimizer moments, and
//! training progress.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..4   magic "FCKP"
//! bytes 4..8   format version (u32)
//! bytes 8..16  header length in bytes (u64)
//! ...          JSON header: configs, vocabulary, counters, tensor directory
//! ...          tensor payload: concatenated f64 values, little-endian,
//!              addressed by (offset, len) pairs from the directory
//! ```
//!
//! The noise schedule's betas travel as a reserved tensor so floating-point
//! values round-trip bit-exactly without going through decimal text.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use framecast_autograd::{AdamW, Arr, ParamStore};

use crate::codec::Codec;
use crate::denoiser::Denoiser;
use crate::error::{CoreError, Result};
use crate::model::{Model, ModelConfig};
use crate::schedule::NoiseSchedule;
use crate::text::Vocab;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Reserved tensor name carrying the noise schedule. Model parameters all
/// live under `codec.`/`denoiser.`/`text.`/`perc.`/`disc.` prefixes, so this
/// cannot collide.
const BETAS_TENSOR: &str = "meta.schedule.betas";
const OPT_M_PREFIX: &str = "opt.m.";
const OPT_V_PREFIX: &str = "opt.v.";

/// Optimizer moments captured alongside the weights so training can resume
/// mid-run without a cold Adam restart.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub steps: u64,
    pub m: BTreeMap<String, Arr>,
    pub v: BTreeMap<String, Arr>,
}

impl OptimizerState {
    pub fn capture(opt: &AdamW) -> OptimizerState {
        let (steps, m, v) = opt.state();
        OptimizerState {
            steps,
            m: m.clone(),
            v: v.clone(),
        }
    }

    pub fn restore_into(self, opt: &mut AdamW) {
        opt.restore_state(self.steps, self.m, self.v);
    }
}

/// Training progress stored next to the weights.
#[derive(Debug, Clone, Default)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub rng_seed: u64,
    pub optimizer: Option<OptimizerState>,
}

impl TrainState {
    pub fn fresh(rng_seed: u64) -> TrainState {
        TrainState {
            epoch: 0,
            step: 0,
            rng_seed,
            optimizer: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements (not bytes).
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    epoch: usize,
    step: usize,
    latent_scale: f64,
    rng_seed: u64,
    optimizer_steps: Option<u64>,
    tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> CoreError {
    CoreError::CheckpointCorrupt(msg.into())
}

pub fn save_checkpoint(path: &Path, model: &Model, state: &TrainState) -> Result<()> {
    // Directory in a fixed order: model params, schedule, optimizer moments.
    let mut entries: Vec<(String, &Arr)> = model
        .store
        .iter()
        .map(|(n, a)| (n.clone(), a))
        .collect();
    let betas_arr = Arr::from_shape_vec(IxDyn(&[model.schedule.betas.len()]), {
        model.schedule.betas.clone()
    })
    .expect("1-D betas");
    entries.push((BETAS_TENSOR.to_string(), &betas_arr));
    if let Some(opt) = &state.optimizer {
        for (n, a) in &opt.m {
            entries.push((format!("{OPT_M_PREFIX}{n}"), a));
        }
        for (n, a) in &opt.v {
            entries.push((format!("{OPT_V_PREFIX}{n}"), a));
        }
    }

    let mut directory = Vec::with_capacity(entries.len());
    let mut offset: u64 = 0;
    for (name, arr) in &entries {
        directory.push(TensorEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            offset,
        });
        offset += arr.len() as u64;
    }

    let header = Header {
        config: model.config(),
        vocab: model.vocab.token_strings().to_vec(),
        epoch: state.epoch,
        step: state.step,
        latent_scale: model.latent_scale,
        rng_seed: state.rng_seed,
        optimizer_steps: state.optimizer.as_ref().map(|o| o.steps),
        tensors: directory,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    // Write to a sibling temp file and rename, so an interrupted save never
    // destroys the previous checkpoint at `path`.
    let tmp = path.with_extension("fckp.tmp");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
    }
    {
        let file = File::create(&tmp).map_err(|e| CoreError::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| CoreError::io(&tmp, e);
        w.write_all(&CHECKPOINT_MAGIC).map_err(io_err)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&header_bytes).map_err(io_err)?;
        for (_, arr) in &entries {
            for v in arr.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainState)> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    if bytes.len() < 16 {
        return Err(corrupt(format!(
            "file is {} bytes, shorter than the fixed preamble",
            bytes.len()
        )));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(corrupt(format!(
            "bad magic {:02x?}, expected {:02x?}",
            &bytes[0..4],
            CHECKPOINT_MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::CheckpointVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .ok_or_else(|| corrupt("header length overflows"))?;
    if payload_start > bytes.len() {
        return Err(corrupt(format!(
            "header claims {header_len} bytes but only {} remain",
            bytes.len() - 16
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| corrupt(format!("header does not parse: {e}")))?;

    let payload = &bytes[payload_start..];
    if payload.len() % 8 != 0 {
        return Err(corrupt(format!(
            "payload length {} is not a multiple of 8",
            payload.len()
        )));
    }
    let payload_elems = payload.len() / 8;

    let read_tensor = |entry: &TensorEntry| -> Result<Arr> {
        let len: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(len)
            .ok_or_else(|| corrupt(format!("tensor {} range overflows", entry.name)))?;
        if end > payload_elems {
            return Err(corrupt(format!(
                "tensor {} needs elements {start}..{end} but payload has {payload_elems} \
                 (file truncated?)",
                entry.name
            )));
        }
        let vals: Vec<f64> = payload[start * 8..end * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Arr::from_shape_vec(IxDyn(&entry.shape), vals)
            .map_err(|e| corrupt(format!("tensor {}: {e}", entry.name)))
    };

    let mut store = ParamStore::new();
    let mut betas: Option<Vec<f64>> = None;
    let mut opt_m = BTreeMap::new();
    let mut opt_v = BTreeMap::new();
    for entry in &header.tensors {
        let arr = read_tensor(entry)?;
        if entry.name == BETAS_TENSOR {
            betas = Some(arr.iter().copied().collect());
        } else if let Some(n) = entry.name.strip_prefix(OPT_M_PREFIX) {
            opt_m.insert(n.to_string(), arr);
        } else if let Some(n) = entry.name.strip_prefix(OPT_V_PREFIX) {
            opt_v.insert(n.to_string(), arr);
        } else {
            store.insert(entry.name.clone(), arr);
        }
    }
    let betas = betas.ok_or_else(|| corrupt("missing schedule tensor"))?;
    if store.is_empty() {
        return Err(corrupt("checkpoint contains no model parameters"));
    }
    if !(header.latent_scale.is_finite() && header.latent_scale > 0.0) {
        return Err(corrupt(format!(
            "latent scale {} is not positive and finite",
            header.latent_scale
        )));
    }

    let codec = Codec::new(header.config.codec.clone())?;
    let denoiser = Denoiser::new(header.config.denoiser.clone())?;
    if header.config.codec.latent_channels != header.config.denoiser.latent_channels {
        return Err(corrupt("codec/denoiser latent channel mismatch"));
    }
    let vocab = Vocab::from_token_strings(header.vocab)?;
    let schedule = NoiseSchedule::from_betas(betas)?;

    let model = Model {
        codec,
        denoiser,
        vocab,
        schedule,
        store,
        latent_scale: header.latent_scale,
    };
    let optimizer = header.optimizer_steps.map(|steps| OptimizerState {
        steps,
        m: opt_m,
        v: opt_v,
    });
    let state = TrainState {
        epoch: header.epoch,
        step: header.step,
        rng_seed: header.rng_seed,
        optimizer,
    };
    Ok((model, state))
}
