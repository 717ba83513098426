//! Scratch sizing for the epoch-ablation check.

use framecast_core::dataset::apply_prompt_template;
use framecast_core::episode::{render_synthetic_episode, SyntheticSceneSpec, Task};
use framecast_core::eval::{aggregate, evaluate_pairs};
use framecast_core::model::{Model, ModelConfig};
use framecast_core::sampler::SamplerConfig;
use framecast_core::text::Vocab;
use framecast_core::trainer::{train, LoadedPair, TrainConfig};
use framecast_core::codec::CodecConfig;
use framecast_core::denoiser::DenoiserConfig;

fn small_model_config() -> ModelConfig {
    ModelConfig {
        codec: CodecConfig {
            latent_channels: 4,
            spatial_factor: 4,
            widths: vec![8, 16],
        },
        denoiser: DenoiserConfig {
            base_channels: 16,
            channel_mults: vec![1, 2],
            attention_resolutions: vec![2, 1],
            heads: 2,
            transformer_blocks: 1,
            latent_channels: 4,
            context_dim: 16,
        },
        ..ModelConfig::desk()
    }
}

fn main() {
    let getu = |k: &str, d: usize| {
        std::env::var(k)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(d)
    };
    let dt = getu("DT", 5);
    let stride = getu("STRIDE", 2);
    let pretrain = getu("PRETRAIN", 600);
    let batch = getu("BATCH", 4);
    let n = getu("N", 48);
    let eval_steps = getu("EVAL_STEPS", 15);

    let instruction = apply_prompt_template(Task::HammerBeat.instruction()).unwrap();
    let spec = SyntheticSceneSpec::new(Task::HammerBeat, 21, 200, 32).unwrap();
    let ep = render_synthetic_episode(&spec).unwrap();
    let mut pairs = Vec::new();
    let mut t = 0;
    while t + dt < 200 {
        pairs.push(LoadedPair {
            sample_id: format!("p{t:05}"),
            task_id: ep.task.id().to_string(),
            input: ep.frames[t].clone(),
            target: ep.frames[t + dt].clone(),
            instruction: instruction.clone(),
        });
        t += stride;
    }
    let train_set: Vec<LoadedPair> = pairs.iter().take(n).cloned().collect();
    let val_set: Vec<LoadedPair> = pairs.iter().skip(n).take(4).cloned().collect();
    eprintln!("toy set: {} train, {} val, dt {}", train_set.len(), val_set.len(), dt);

    let scfg = SamplerConfig {
        num_steps: eval_steps,
        guidance_weight: 1.0,
        eta: 0.0,
        seed: 3,
        post_process: false,
    };
    for epochs in [2usize, 10] {
        let vocab = Vocab::build([train_set[0].instruction.as_str()]).unwrap();
        let mut model = Model::new(&small_model_config(), vocab, 11).unwrap();
        let cfg = TrainConfig {
            batch_size: batch,
            stage_resolutions: vec![32],
            stage_epochs: vec![epochs],
            warmup_steps: 8,
            codec_pretrain_steps: pretrain,
            seed: 11,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let t0 = std::time::Instant::now();
        let out = train(&mut model, &train_set, &val_set, &cfg, dir.path()).unwrap();
        let agg = aggregate(&evaluate_pairs(&model, &train_set, &scfg)).unwrap();
        eprintln!(
            "epochs {epochs:2}: {} steps, {:.1}s, train-set ssim {:.4} (failures {})",
            out.total_steps,
            t0.elapsed().as_secs_f64(),
            agg.mean_ssim,
            agg.failures
        );
    }
}
