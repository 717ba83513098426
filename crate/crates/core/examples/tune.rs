//! Scratch sizing experiment for the end-to-end learning check.

use framecast_core::checkpoint::load_checkpoint;
use framecast_core::dataset::apply_prompt_template;
use framecast_core::episode::{render_synthetic_episode, SyntheticSceneSpec, Task};
use framecast_core::eval::{aggregate, evaluate_pairs, identity_baseline_pairs};
use framecast_core::loss::LossWeights;
use framecast_core::metrics::ssim;
use framecast_core::model::{Model, ModelConfig};
use framecast_core::sampler::{predict_future_frame, SamplerConfig};
use framecast_core::text::Vocab;
use framecast_core::trainer::{train, LoadedPair, TrainConfig};
use std::path::Path;

fn pairs_from(task: Task, seeds: &[u64], frames: usize, dt: usize, stride: usize) -> Vec<LoadedPair> {
    let instruction = apply_prompt_template(task.instruction()).unwrap();
    let mut out = Vec::new();
    for &s in seeds {
        let spec = SyntheticSceneSpec::new(task, s, frames, 32).unwrap();
        let ep = render_synthetic_episode(&spec).unwrap();
        let mut t = 0;
        while t + dt < frames {
            out.push(LoadedPair {
                sample_id: format!("{}:{t:05}", ep.episode_id),
                task_id: ep.task.id().to_string(),
                input: ep.frames[t].clone(),
                target: ep.frames[t + dt].clone(),
                instruction: instruction.clone(),
            });
            t += stride;
        }
    }
    out
}

fn main() {
    let getu = |k: &str, d: usize| {
        std::env::var(k)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(d)
    };
    let getf = |k: &str, d: f64| {
        std::env::var(k)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(d)
    };
    let epochs = getu("EPOCHS", 100);
    let pretrain = getu("PRETRAIN", 1000);
    let dt = getu("DT", 100);
    let n_eps = getu("EPS", 7);
    let frames = getu("FRAMES", 401);
    let stride = getu("STRIDE", 10);
    let batch = getu("BATCH", 8);
    let warmup = getu("WARMUP", 100);
    let lr = getf("LR", 1e-4);
    let perc = getf("PERC", 0.1);
    let adv = getf("ADV", 0.01);
    let task = match std::env::var("TASK").as_deref() {
        Ok("handover") => Task::Handover,
        Ok("stack") => Task::Stack,
        _ => Task::HammerBeat,
    };
    let out_dir = std::env::var("OUT").unwrap_or_else(|_| "/tmp/tune_model".to_string());
    let load_only = std::env::var("LOAD").is_ok();

    let train_seeds: Vec<u64> = (0..n_eps as u64).collect();
    let tr = pairs_from(task, &train_seeds, frames, dt, stride);
    let va = pairs_from(task, &[90], frames, dt, stride * 3);
    let te = pairs_from(task, &[100, 101], frames, dt, 31);
    eprintln!(
        "task {} lr {lr} perc {perc} adv {adv}: pairs train {} val {} test {}",
        task.id(),
        tr.len(),
        va.len(),
        te.len()
    );

    let ident = aggregate(&identity_baseline_pairs(&te).unwrap()).unwrap();
    eprintln!(
        "identity(held-out): ssim {:.4} psnr {:.2}",
        ident.mean_ssim, ident.mean_psnr
    );

    let model = if load_only {
        let (m, _) = load_checkpoint(Path::new(&out_dir).join("checkpoint_final.fckp").as_path())
            .expect("load checkpoint");
        m
    } else {
        let vocab = Vocab::build([tr[0].instruction.as_str()]).unwrap();
        let mut model = Model::new(&ModelConfig::desk(), vocab, 7).unwrap();
        let cfg = TrainConfig {
            learning_rate: lr,
            batch_size: batch,
            stage_resolutions: vec![32],
            stage_epochs: vec![epochs],
            warmup_steps: warmup,
            codec_pretrain_steps: pretrain,
            seed: 7,
            loss_weights: LossWeights {
                lambda_diff: 1.0,
                lambda_perc: perc,
                lambda_adv: adv,
            },
            adv_start_fraction: if adv == 0.0 { 1.0 } else { 0.1 },
            ..TrainConfig::default()
        };
        std::fs::create_dir_all(&out_dir).unwrap();
        let t0 = std::time::Instant::now();
        let out = train(&mut model, &tr, &va, &cfg, Path::new(&out_dir)).unwrap();
        let first: f64 = out.log.steps.iter().take(5).map(|s| s.total).sum::<f64>() / 5.0;
        let last: f64 = out.log.steps.iter().rev().take(5).map(|s| s.total).sum::<f64>() / 5.0;
        eprintln!(
            "train: {} steps in {:.1}s, loss first5 {:.4} last5 {:.4} ratio {:.3}",
            out.total_steps,
            t0.elapsed().as_secs_f64(),
            first,
            last,
            last / first
        );
        model
    };

    // Codec reconstruction ceiling on held-out targets.
    let mut recon_ssim = 0.0;
    for p in &te {
        let x = framecast_core::codec::image_batch_nchw(&[&p.target]).unwrap();
        let z = model.codec.encode_arr(&model.store, &x).unwrap();
        let y = model.codec.decode_arr(&model.store, &z).unwrap();
        let img = framecast_core::codec::nchw_to_images(&y).unwrap().remove(0);
        recon_ssim += ssim(&p.target, &img).unwrap();
    }
    eprintln!("codec recon ssim (ceiling): {:.4}", recon_ssim / te.len() as f64);

    // Sweep sampler settings on a small subset of train pairs (overfit check)
    // and the full held-out set.
    let train_sub: Vec<LoadedPair> = tr.iter().step_by(22).cloned().collect();
    eprintln!("train subset for overfit eval: {}", train_sub.len());
    for steps in [25usize, 50] {
        for w in [1.0f64, 1.5, 2.0] {
            let scfg = SamplerConfig {
                num_steps: steps,
                guidance_weight: w,
                eta: 0.0,
                seed: 9,
                post_process: false,
            };
            let tr_agg = aggregate(&evaluate_pairs(&model, &train_sub, &scfg)).unwrap();
            let te_agg = aggregate(&evaluate_pairs(&model, &te, &scfg)).unwrap();
            eprintln!(
                "steps {steps:3} w {w:.1}: train ssim {:.4}, held-out ssim {:.4} (identity {:.4})",
                tr_agg.mean_ssim, te_agg.mean_ssim, ident.mean_ssim
            );
        }
    }

    // Dump one sample triplet for visual inspection.
    let p = &te[5];
    let scfg = SamplerConfig {
        num_steps: 50,
        guidance_weight: 1.0,
        eta: 0.0,
        seed: 9,
        post_process: false,
    };
    let pred = predict_future_frame(&model, &p.input, &p.instruction, &scfg).unwrap();
    let dump = Path::new(&out_dir);
    p.input.save_png(&dump.join("sample_input.png")).unwrap();
    p.target.save_png(&dump.join("sample_target.png")).unwrap();
    pred.save_png(&dump.join("sample_pred.png")).unwrap();
    eprintln!(
        "sample: pred-vs-target ssim {:.4}, pred-vs-input ssim {:.4}, input-vs-target {:.4}",
        ssim(&p.target, &pred).unwrap(),
        ssim(&p.input, &pred).unwrap(),
        ssim(&p.input, &p.target).unwrap()
    );
    eprintln!(
        "pred stats: mean {:.3} std {:.3}; target mean {:.3} std {:.3}",
        pred.pixels.mean().unwrap(),
        pred.pixels.std(0.0),
        p.target.pixels.mean().unwrap(),
        p.target.pixels.std(0.0)
    );
}
