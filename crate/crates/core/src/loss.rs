//! Training losses: latent-noise MSE, perceptual feature distance, and a
//! patch-discriminator adversarial term, combined as
//! `total = λ_diff·L_diff + λ_perc·L_perc + λ_adv·L_adv`.
//!
//! L_perc and L_adv operate on the decoded one-step clean-latent estimate
//! ẑ0 = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t, so their gradients reach the noise
//! predictor through the (frozen) decoder. The perceptual extractor is a
//! frozen randomly initialized four-layer SiLU conv stack; the discriminator
//! sees decoded estimates detached from the generator graph.

use framecast_autograd::{nn, optim::AdamW, Arr, BindMode, Binder, Graph, NodeId, ParamStore, TrainMask};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::denoiser::GraphDenoiser;
use crate::error::{CoreError, Result};
use crate::schedule::NoiseSchedule;
use crate::text::{embed_cond, CondBatch, TEXT_TABLE_PARAM};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_diff: f64,
    pub lambda_perc: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_diff: 1.0,
            lambda_perc: 0.1,
            lambda_adv: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_diff, self.lambda_perc, self.lambda_adv];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(CoreError::invalid(
                "loss weights",
                format!("weights must be finite and >= 0, got {all:?}"),
            ));
        }
        Ok(())
    }
}

const PERC_WIDTHS: [usize; 4] = [8, 16, 32, 64];
const DISC_WIDTHS: [usize; 3] = [8, 16, 32];

/// Frozen random feature extractor: four stride-2 SiLU convs.
pub fn register_perceptual(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let mut cin = 3;
    for (i, &w) in PERC_WIDTHS.iter().enumerate() {
        nn::register_conv2d(store, rng, &format!("perc.{i}.conv"), cin, w, 3);
        cin = w;
    }
}

/// Feature map of the final extractor layer for an NCHW pixel batch.
pub fn perceptual_features(g: &mut Graph, b: &Binder, x: NodeId) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(CoreError::shape(
            "perceptual_features",
            format!("expected (B,3,H,W), got {shape:?}"),
        ));
    }
    if shape[2] < 16 || shape[3] < 16 {
        return Err(CoreError::shape(
            "perceptual_features",
            format!("need at least 16x16 pixels, got {}x{}", shape[2], shape[3]),
        ));
    }
    let mut h = x;
    for i in 0..PERC_WIDTHS.len() {
        h = nn::conv2d(g, b, &format!("perc.{i}.conv"), h, 2, 1)?;
        h = g.silu(h);
    }
    Ok(h)
}

/// Lightweight strided-conv patch discriminator ending in a 1×1 logit map.
pub fn register_discriminator(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let mut cin = 3;
    for (i, &w) in DISC_WIDTHS.iter().enumerate() {
        nn::register_conv2d(store, rng, &format!("disc.{i}.conv"), cin, w, 3);
        cin = w;
    }
    nn::register_conv2d(store, rng, "disc.out.conv", cin, 1, 1);
}

/// Patch logits (B,1,h',w') for an NCHW pixel batch.
pub fn discriminate(g: &mut Graph, b: &Binder, x: NodeId) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(CoreError::shape(
            "discriminate",
            format!("expected (B,3,H,W), got {shape:?}"),
        ));
    }
    let mut h = x;
    for i in 0..DISC_WIDTHS.len() {
        h = nn::conv2d(g, b, &format!("disc.{i}.conv"), h, 2, 1)?;
        h = g.silu(h);
    }
    Ok(nn::conv2d(g, b, "disc.out.conv", h, 1, 0)?)
}

/// Where the clean and conditioning latents come from.
///
/// `Cached` takes precomputed (already scaled) latents — valid only while the
/// codec is frozen. `EncodePixels` runs the encoder inside the loss graph, so
/// any trainable encoder layers (the parameter-efficient fine-tuning policy
/// unfreezes the last few) receive gradients through both latent paths.
#[derive(Debug)]
pub enum LatentInputs<'a> {
    Cached {
        /// Clean target latents z0, scaled; (B,C,h,w).
        z_target: &'a Arr,
        /// Conditioning image latents, scaled; same shape.
        z_cond: &'a Arr,
    },
    EncodePixels {
        /// Target frames (B,3,H,W) in [0,1].
        target: &'a Arr,
        /// Conditioning frames, same shape.
        cond: &'a Arr,
    },
}

/// Inputs to one composite-loss evaluation. Latents are pre-scaled (unit-std
/// convention); `latent_scale` lets the loss unscale ẑ0 before decoding.
#[derive(Debug)]
pub struct LossInputs<'a> {
    pub latents: LatentInputs<'a>,
    /// Target frames as pixels (B,3,H,W) for the perceptual/adversarial terms.
    pub target_pixels: &'a Arr,
    /// Prepared instruction batch (dropout already applied by the caller).
    pub cond: &'a CondBatch,
    /// One diffusion timestep per batch row, each in 1..=T.
    pub ts: &'a [usize],
    /// Pre-sampled standard normal noise, same shape as `z_target`.
    pub eps: &'a Arr,
    pub latent_scale: f64,
}

/// Graph nodes of the loss terms; disabled terms are absent.
pub struct LossTerms {
    pub total: NodeId,
    pub diff: NodeId,
    pub perc: Option<NodeId>,
    pub adv: Option<NodeId>,
    /// Decoded ẑ0 estimate, present when any pixel-space term ran; its
    /// detached value feeds the discriminator step.
    pub decoded: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub diff: f64,
    pub perc: f64,
    pub adv: f64,
}

impl LossTerms {
    /// Extracts scalar values, failing loudly (with the full component
    /// breakdown) on non-finite losses.
    pub fn values(&self, g: &Graph) -> Result<LossValues> {
        let read = |n: NodeId| g.value(n)[ndarray::IxDyn(&[])];
        let v = LossValues {
            total: read(self.total),
            diff: read(self.diff),
            perc: self.perc.map(read).unwrap_or(0.0),
            adv: self.adv.map(read).unwrap_or(0.0),
        };
        if !v.total.is_finite() || !v.diff.is_finite() || !v.perc.is_finite() || !v.adv.is_finite()
        {
            return Err(CoreError::Train(format!(
                "non-finite loss: total={} diff={} perc={} adv={}",
                v.total, v.diff, v.perc, v.adv
            )));
        }
        Ok(v)
    }
}

fn per_row_coeff(values: Vec<f64>, batch: usize) -> Arr {
    ArrayD::from_shape_vec(vec![batch, 1, 1, 1], values).expect("batch coefficient shape")
}

/// Builds the composite training loss inside `g`.
///
/// `adv_active` gates the adversarial term independently of its weight (the
/// trainer enables it only after the warm-in fraction of total steps).
#[allow(clippy::too_many_arguments)]
pub fn composite_loss(
    g: &mut Graph,
    b: &Binder,
    denoiser: &dyn GraphDenoiser,
    codec: &Codec,
    schedule: &NoiseSchedule,
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
    adv_active: bool,
) -> Result<LossTerms> {
    weights.validate()?;
    if inputs.latent_scale <= 0.0 || !inputs.latent_scale.is_finite() {
        return Err(CoreError::invalid(
            "composite_loss",
            format!("latent scale {} must be positive", inputs.latent_scale),
        ));
    }

    // Latent nodes for the clean target and the conditioning image, either as
    // plain data or as live encoder outputs.
    let (z_target_node, z_cond_node) = match inputs.latents {
        LatentInputs::Cached { z_target, z_cond } => {
            if z_cond.shape() != z_target.shape() {
                return Err(CoreError::shape(
                    "composite_loss",
                    format!(
                        "z_target {:?} vs z_cond {:?}",
                        z_target.shape(),
                        z_cond.shape()
                    ),
                ));
            }
            (g.constant(z_target.clone()), g.constant(z_cond.clone()))
        }
        LatentInputs::EncodePixels { target, cond } => {
            if cond.shape() != target.shape() {
                return Err(CoreError::shape(
                    "composite_loss",
                    format!("target {:?} vs cond {:?}", target.shape(), cond.shape()),
                ));
            }
            let t_node = g.constant(target.clone());
            let c_node = g.constant(cond.clone());
            let zt = codec.encode(g, b, t_node)?;
            let zc = codec.encode(g, b, c_node)?;
            (
                g.scale(zt, inputs.latent_scale),
                g.scale(zc, inputs.latent_scale),
            )
        }
    };
    let zshape = g.value(z_target_node).shape().to_vec();
    let batch = zshape[0];
    if inputs.eps.shape() != zshape.as_slice() {
        return Err(CoreError::shape(
            "composite_loss",
            format!("eps {:?} vs latents {:?}", inputs.eps.shape(), zshape),
        ));
    }
    if inputs.ts.len() != batch {
        return Err(CoreError::invalid(
            "composite_loss",
            format!("{} timesteps for batch {batch}", inputs.ts.len()),
        ));
    }
    let mut sqrt_ab = Vec::with_capacity(batch);
    let mut sqrt_1m = Vec::with_capacity(batch);
    for &t in inputs.ts {
        if t == 0 || t > schedule.num_steps {
            return Err(CoreError::invalid(
                "composite_loss",
                format!("timestep {t} outside 1..={}", schedule.num_steps),
            ));
        }
        let ab = schedule.alpha_bar[t];
        sqrt_ab.push(ab.sqrt());
        sqrt_1m.push((1.0 - ab).sqrt());
    }

    // z_t = sqrt(ab_t)*z0 + sqrt(1-ab_t)*eps, built as graph ops so gradients
    // can reach a live encoder behind z0; per-row coefficients broadcast.
    let eps_node = g.constant(inputs.eps.clone());
    let ab_node = g.constant(per_row_coeff(sqrt_ab.clone(), batch));
    let s1m_node = g.constant(per_row_coeff(sqrt_1m.clone(), batch));
    let signal = g.mul(ab_node, z_target_node);
    let noise_term = g.mul(s1m_node, eps_node);
    let z_t_node = g.add(signal, noise_term);
    let table = b.node(TEXT_TABLE_PARAM)?;
    let context = embed_cond(g, table, inputs.cond);
    let ts_f: Vec<f64> = inputs.ts.iter().map(|&t| t as f64).collect();

    let eps_hat = denoiser.eps(g, b, z_t_node, z_cond_node, &ts_f, context, &inputs.cond.mask)?;
    let diff = g.mse(eps_hat, eps_node);

    let need_pixels =
        weights.lambda_perc > 0.0 || (weights.lambda_adv > 0.0 && adv_active);
    let (mut perc, mut adv, mut decoded) = (None, None, None);
    if need_pixels {
        // ẑ0 = (z_t − √(1−ᾱ)·ε̂) / √ᾱ, per-row coefficients.
        let s_node = g.constant(per_row_coeff(sqrt_1m.clone(), batch));
        let ra_node = g.constant(per_row_coeff(
            sqrt_ab.iter().map(|a| 1.0 / a).collect(),
            batch,
        ));
        let scaled_eps = g.mul(s_node, eps_hat);
        let numer = g.sub(z_t_node, scaled_eps);
        let z0_hat = g.mul(numer, ra_node);
        let z0_raw = g.scale(z0_hat, 1.0 / inputs.latent_scale);
        let dec = codec.decode(g, b, z0_raw)?;
        decoded = Some(dec);

        if weights.lambda_perc > 0.0 {
            let target = g.constant(inputs.target_pixels.clone());
            let f_pred = perceptual_features(g, b, dec)?;
            let f_tgt = perceptual_features(g, b, target)?;
            perc = Some(g.mse(f_pred, f_tgt));
        }
        if weights.lambda_adv > 0.0 && adv_active {
            // Non-saturating generator loss: mean softplus(−D(x̂)).
            let logits = discriminate(g, b, dec)?;
            let neg = g.scale(logits, -1.0);
            let sp = g.softplus_op(neg);
            adv = Some(g.mean_all(sp));
        }
    }

    let mut total = g.scale(diff, weights.lambda_diff);
    if let Some(p) = perc {
        let scaled = g.scale(p, weights.lambda_perc);
        total = g.add(total, scaled);
    }
    if let Some(a) = adv {
        let scaled = g.scale(a, weights.lambda_adv);
        total = g.add(total, scaled);
    }

    Ok(LossTerms {
        total,
        diff,
        perc,
        adv,
        decoded,
    })
}

/// One discriminator update on `real` pixel batches vs detached `fake`
/// batches. Touches only `disc.*` parameters; returns the scalar loss.
pub fn discriminator_step(
    store: &mut ParamStore,
    opt: &mut AdamW,
    real: &Arr,
    fake: &Arr,
) -> Result<f64> {
    if real.shape() != fake.shape() {
        return Err(CoreError::shape(
            "discriminator_step",
            format!("real {:?} vs fake {:?}", real.shape(), fake.shape()),
        ));
    }
    let mask = TrainMask::from_predicate(store, |n| n.starts_with("disc."));
    let mut g = Graph::new(true);
    let b = Binder::bind(&mut g, store, BindMode::Train(&mask));
    let rn = g.constant(real.clone());
    let fn_ = g.constant(fake.clone());
    let lr = discriminate(&mut g, &b, rn)?;
    let lf = discriminate(&mut g, &b, fn_)?;
    // mean softplus(−D(real)) + mean softplus(D(fake))
    let nr = g.scale(lr, -1.0);
    let sp_r = g.softplus_op(nr);
    let m_r = g.mean_all(sp_r);
    let sp_f = g.softplus_op(lf);
    let m_f = g.mean_all(sp_f);
    let loss = g.add(m_r, m_f);
    let v = g.value(loss)[ndarray::IxDyn(&[])];
    if !v.is_finite() {
        return Err(CoreError::Train(format!("discriminator loss non-finite: {v}")));
    }
    g.backward(loss)?;
    let grads = b.grads(&g, store, &mask)?;
    opt.step(store, &grads, 1.0)?;
    Ok(v)
}

/// Patch-level accuracy of the discriminator: fraction of real patches with
/// positive logits plus fake patches with negative logits, halved. Identical
/// real/fake inputs give exactly 0.5 for any weights.
pub fn discriminator_accuracy(store: &ParamStore, real: &Arr, fake: &Arr) -> Result<f64> {
    let mut g = Graph::new(false);
    let b = Binder::bind(&mut g, store, BindMode::Infer);
    let rn = g.constant(real.clone());
    let fn_ = g.constant(fake.clone());
    let lr = discriminate(&mut g, &b, rn)?;
    let lf = discriminate(&mut g, &b, fn_)?;
    let lr = g.value(lr);
    let lf = g.value(lf);
    let n = lr.len() as f64;
    let acc_real = lr.iter().filter(|&&v| v > 0.0).count() as f64 / n;
    let acc_fake = lf.iter().filter(|&&v| v <= 0.0).count() as f64 / n;
    Ok(0.5 * (acc_real + acc_fake))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{image_batch_nchw, CodecConfig};
    use crate::denoiser::TinyConvDenoiser;
    use crate::episode::{render_frame, SyntheticSceneSpec, Task};
    use crate::rng::derive_rng;
    use crate::text::{cond_batch, register_text_table, TokenSequence, MAX_TEXT_LEN};
    use framecast_autograd::init;

    struct Oracle {
        eps: Arr,
    }

    impl GraphDenoiser for Oracle {
        fn eps(
            &self,
            g: &mut Graph,
            _b: &Binder,
            _zn: NodeId,
            _zc: NodeId,
            _ts: &[f64],
            _context: NodeId,
            _mask: &ndarray::Array2<f64>,
        ) -> Result<NodeId> {
            Ok(g.constant(self.eps.clone()))
        }

        fn latent_channels(&self) -> usize {
            self.eps.shape()[1]
        }
    }

    fn seq() -> TokenSequence {
        let mut ids = vec![0usize; MAX_TEXT_LEN];
        ids[0] = 3;
        TokenSequence {
            ids,
            len: 1,
            is_null: false,
        }
    }

    struct Fixture {
        codec: Codec,
        store: ParamStore,
        schedule: NoiseSchedule,
        tiny: TinyConvDenoiser,
    }

    fn fixture() -> Fixture {
        let codec = Codec::new(CodecConfig::desk()).unwrap();
        let mut store = ParamStore::new();
        let mut rng = derive_rng(0, "loss-test-init");
        codec.register(&mut store, &mut rng);
        register_text_table(&mut store, &mut rng, 8, 5);
        register_perceptual(&mut store, &mut rng);
        register_discriminator(&mut store, &mut rng);
        let tiny = TinyConvDenoiser::new(4, 6);
        tiny.register(&mut store, &mut rng);
        Fixture {
            codec,
            store,
            schedule: NoiseSchedule::default_schedule(),
            tiny,
        }
    }

    fn frame_batch(batch: usize, res: usize) -> Arr {
        let spec = SyntheticSceneSpec::new(Task::Stack, 5, 200, res).unwrap();
        let frames: Vec<_> = (0..batch)
            .map(|i| render_frame(&spec, i * 40).unwrap())
            .collect();
        image_batch_nchw(&frames.iter().collect::<Vec<_>>()).unwrap()
    }

    fn inputs_up_to<'a>(
        z: &'a Arr,
        zc: &'a Arr,
        px: &'a Arr,
        cond: &'a CondBatch,
        ts: &'a [usize],
        eps: &'a Arr,
    ) -> LossInputs<'a> {
        LossInputs {
            latents: LatentInputs::Cached {
                z_target: z,
                z_cond: zc,
            },
            target_pixels: px,
            cond,
            ts,
            eps,
            latent_scale: 1.0,
        }
    }

    #[test]
    fn weight_masking_reduces_to_diff_exactly() {
        let f = fixture();
        let mut rng = derive_rng(1, "z");
        let z = init::normal(&mut rng, &[2, 4, 8, 8], 1.0);
        let zc = init::normal(&mut rng, &[2, 4, 8, 8], 1.0);
        let eps = init::normal(&mut rng, &[2, 4, 8, 8], 1.0);
        let px = frame_batch(2, 32);
        let cond = cond_batch(&[seq(), TokenSequence::null()]).unwrap();
        let ts = [250usize, 900];

        let mut g = Graph::new(false);
        let b = Binder::bind(&mut g, &f.store, BindMode::Infer);
        let li = inputs_up_to(&z, &zc, &px, &cond, &ts, &eps);
        let lw = LossWeights {
            lambda_diff: 1.0,
            lambda_perc: 0.0,
            lambda_adv: 0.0,
        };
        let terms =
            composite_loss(&mut g, &b, &f.tiny, &f.codec, &f.schedule, &li, &lw, true).unwrap();
        let vals = terms.values(&g).unwrap();
        assert_eq!(vals.total, vals.diff, "weight masking must be exact");
        assert!(terms.perc.is_none() && terms.adv.is_none() && terms.decoded.is_none());
    }

    #[test]
    fn oracle_noise_gives_zero_diff_loss() {
        let f = fixture();
        let mut rng = derive_rng(2, "z");
        let z = init::normal(&mut rng, &[1, 4, 8, 8], 1.0);
        let zc = init::normal(&mut rng, &[1, 4, 8, 8], 1.0);
        let eps = init::normal(&mut rng, &[1, 4, 8, 8], 1.0);
        let px = frame_batch(1, 32);
        let cond = cond_batch(&[seq()]).unwrap();
        let oracle = Oracle { eps: eps.clone() };

        let mut g = Graph::new(false);
        let b = Binder::bind(&mut g, &f.store, BindMode::Infer);
        let li = inputs_up_to(&z, &zc, &px, &cond, &[500], &eps);
        let terms = composite_loss(
            &mut g,
            &b,
            &oracle,
            &f.codec,
            &f.schedule,
            &li,
            &LossWeights::default(),
            false,
        )
        .unwrap();
        let vals = terms.values(&g).unwrap();
        assert_eq!(vals.diff, 0.0, "oracle noise must zero the diffusion loss");
        // Perceptual term still active (λ_perc > 0), adversarial gated off.
        assert!(terms.perc.is_some());
        assert!(terms.adv.is_none());
    }

    #[test]
    fn total_is_weighted_sum_of_components() {
        let f = fixture();
        let mut rng = derive_rng(3, "z");
        let z = init::normal(&mut rng, &[2, 4, 8, 8], 1.0);
        let zc = init::normal(&mut rng, &[2, 4, 8, 8], 1.0);
        let eps = init::normal(&mut rng, &[2, 4, 8, 8], 1.0);
        let px = frame_batch(2, 32);
        let cond = cond_batch(&[seq(), seq()]).unwrap();
        let ts = [100usize, 700];

        let mut g = Graph::new(false);
        let b = Binder::bind(&mut g, &f.store, BindMode::Infer);
        let li = inputs_up_to(&z, &zc, &px, &cond, &ts, &eps);
        let lw = LossWeights::default();
        let terms =
            composite_loss(&mut g, &b, &f.tiny, &f.codec, &f.schedule, &li, &lw, true).unwrap();
        let v = terms.values(&g).unwrap();
        let expect = 1.0 * v.diff + 0.1 * v.perc + 0.01 * v.adv;
        assert!((v.total - expect).abs() < 1e-15);
        assert!(v.perc > 0.0 && v.adv > 0.0);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let f = fixture();
        let mut rng = derive_rng(4, "z");
        let z = init::normal(&mut rng, &[1, 4, 8, 8], 1.0);
        let zc = init::normal(&mut rng, &[1, 4, 8, 8], 1.0);
        let eps_bad = init::normal(&mut rng, &[1, 4, 4, 4], 1.0);
        let eps = init::normal(&mut rng, &[1, 4, 8, 8], 1.0);
        let px = frame_batch(1, 32);
        let cond = cond_batch(&[seq()]).unwrap();

        let mut g = Graph::new(false);
        let b = Binder::bind(&mut g, &f.store, BindMode::Infer);
        let li = inputs_up_to(&z, &zc, &px, &cond, &[500], &eps_bad);
        assert!(composite_loss(
            &mut g, &b, &f.tiny, &f.codec, &f.schedule, &li, &LossWeights::default(), false
        )
        .is_err());

        // Out-of-range timestep.
        let li = inputs_up_to(&z, &zc, &px, &cond, &[0], &eps);
        assert!(composite_loss(
            &mut g, &b, &f.tiny, &f.codec, &f.schedule, &li, &LossWeights::default(), false
        )
        .is_err());

        // Negative weight.
        let li = inputs_up_to(&z, &zc, &px, &cond, &[5], &eps);
        let lw = LossWeights {
            lambda_diff: -1.0,
            ..LossWeights::default()
        };
        assert!(
            composite_loss(&mut g, &b, &f.tiny, &f.codec, &f.schedule, &li, &lw, false).is_err()
        );
    }

    #[test]
    fn non_finite_loss_reports_component_breakdown() {
        let f = fixture();
        let mut rng = derive_rng(5, "z");
        let mut z = init::normal(&mut rng, &[1, 4, 8, 8], 1.0);
        z[[0, 0, 0, 0]] = f64::NAN;
        let zc = init::normal(&mut rng, &[1, 4, 8, 8], 1.0);
        let eps = init::normal(&mut rng, &[1, 4, 8, 8], 1.0);
        let px = frame_batch(1, 32);
        let cond = cond_batch(&[seq()]).unwrap();

        let mut g = Graph::new(false);
        let b = Binder::bind(&mut g, &f.store, BindMode::Infer);
        let li = inputs_up_to(&z, &zc, &px, &cond, &[500], &eps);
        let terms = composite_loss(
            &mut g,
            &b,
            &f.tiny,
            &f.codec,
            &f.schedule,
            &li,
            &LossWeights::default(),
            false,
        )
        .unwrap();
        let err = terms.values(&g).unwrap_err().to_string();
        assert!(err.contains("diff=") && err.contains("perc="), "{err}");
    }

    #[test]
    fn gradients_reach_the_denoiser_through_all_terms() {
        let f = fixture();
        let mut rng = derive_rng(6, "z");
        let z = init::normal(&mut rng, &[1, 4, 8, 8], 1.0);
        let zc = init::normal(&mut rng, &[1, 4, 8, 8], 1.0);
        let eps = init::normal(&mut rng, &[1, 4, 8, 8], 1.0);
        let px = frame_batch(1, 32);
        let cond = cond_batch(&[seq()]).unwrap();

        let mask = TrainMask::from_predicate(&f.store, |n| n.starts_with("tiny."));
        let mut g = Graph::new(true);
        let b = Binder::bind(&mut g, &f.store, BindMode::Train(&mask));
        let li = inputs_up_to(&z, &zc, &px, &cond, &[400], &eps);
        let terms = composite_loss(
            &mut g,
            &b,
            &f.tiny,
            &f.codec,
            &f.schedule,
            &li,
            &LossWeights::default(),
            true,
        )
        .unwrap();
        g.backward(terms.total).unwrap();
        let grads = b.grads(&g, &f.store, &mask).unwrap();
        let total_norm: f64 = grads
            .values()
            .map(|a| a.iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!(total_norm > 0.0, "no gradient reached the denoiser");
    }

    #[test]
    fn discriminator_step_touches_only_disc_params() {
        let f = fixture();
        let mut store = f.store;
        let real = frame_batch(2, 32);
        let fake = init::uniform(&mut derive_rng(7, "fake"), &[2, 3, 32, 32], 0.0, 1.0);
        let before: Vec<(String, Vec<f64>)> = store
            .iter()
            .map(|(n, v)| (n.clone(), v.iter().copied().collect()))
            .collect();
        let mut opt = AdamW::new(1e-3, 0.0);
        discriminator_step(&mut store, &mut opt, &real, &fake).unwrap();
        let mut disc_changed = false;
        for (name, old) in before {
            let now: Vec<f64> = store.get(&name).unwrap().iter().copied().collect();
            if name.starts_with("disc.") {
                disc_changed |= old != now;
            } else {
                assert_eq!(old, now, "{name} must stay frozen during disc step");
            }
        }
        assert!(disc_changed);
    }

    #[test]
    fn discriminator_learns_to_separate_disjoint_batches() {
        let f = fixture();
        let mut store = f.store;
        let real = frame_batch(2, 32);
        let fake = init::uniform(&mut derive_rng(8, "fake"), &[2, 3, 32, 32], 0.0, 1.0);
        let mut opt = AdamW::new(2e-3, 0.0);
        let first = discriminator_step(&mut store, &mut opt, &real, &fake).unwrap();
        let mut last = first;
        for _ in 0..199 {
            last = discriminator_step(&mut store, &mut opt, &real, &fake).unwrap();
        }
        assert!(
            last < first * 0.5,
            "disc loss did not decrease: {first} -> {last}"
        );
        let acc = discriminator_accuracy(&store, &real, &fake).unwrap();
        assert!(acc > 0.9, "trained disc accuracy {acc}");
    }

    #[test]
    fn identical_inputs_pin_accuracy_at_half() {
        let f = fixture();
        let real = frame_batch(2, 32);
        let acc = discriminator_accuracy(&f.store, &real, &real).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn disc_shape_mismatch_is_rejected() {
        let f = fixture();
        let mut store = f.store;
        let real = frame_batch(1, 32);
        let fake = init::zeros(&[1, 3, 16, 16]);
        let mut opt = AdamW::new(1e-3, 0.0);
        assert!(discriminator_step(&mut store, &mut opt, &real, &fake).is_err());
    }

    #[test]
    fn perceptual_features_shape_and_determinism() {
        let f = fixture();
        let px = frame_batch(1, 32);
        let mut g = Graph::new(false);
        let b = Binder::bind(&mut g, &f.store, BindMode::Infer);
        let x = g.constant(px.clone());
        let feats = perceptual_features(&mut g, &b, x).unwrap();
        assert_eq!(g.value(feats).shape(), &[1, 64, 2, 2]);
        let small = g.constant(init::zeros(&[1, 3, 8, 8]));
        assert!(perceptual_features(&mut g, &b, small).is_err());
    }
}
