//! Convolutional image↔latent codec.
//!
//! The encoder downsamples by a power-of-two spatial factor into a small
//! latent with `latent_channels` channels; the decoder mirrors it and
//! squashes its output through a sigmoid so decoded pixels always lie in
//! (0, 1). Parameter names are `codec.enc.<i>.*` / `codec.dec.<i>.*`, with
//! `<i>` a numeric layer index — selective fine-tuning keys off those
//! indices, so they are part of the public contract.

use framecast_autograd::{nn, Arr, BindMode, Binder, Graph, NodeId, ParamStore, TrainMask};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::img::Image;
use crate::rng::derive_rng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CodecConfig {
    /// Latent channel count C.
    pub latent_channels: usize,
    /// Spatial reduction factor f; power of two, one downsample per octave.
    pub spatial_factor: usize,
    /// Feature widths per downsampling stage (length log2(f)).
    pub widths: Vec<usize>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig::full()
    }
}

impl CodecConfig {
    /// Small profile for CPU-scale experiments.
    pub fn desk() -> CodecConfig {
        CodecConfig {
            latent_channels: 4,
            spatial_factor: 4,
            widths: vec![16, 32],
        }
    }

    /// Full-size profile.
    pub fn full() -> CodecConfig {
        CodecConfig {
            latent_channels: 4,
            spatial_factor: 4,
            widths: vec![64, 128],
        }
    }

    fn octaves(&self) -> Result<usize> {
        if self.spatial_factor < 2 || !self.spatial_factor.is_power_of_two() {
            return Err(CoreError::invalid(
                "codec config",
                format!(
                    "spatial_factor must be a power of two >= 2, got {}",
                    self.spatial_factor
                ),
            ));
        }
        let k = self.spatial_factor.trailing_zeros() as usize;
        if self.widths.len() != k {
            return Err(CoreError::invalid(
                "codec config",
                format!(
                    "need one width per downsampling stage: factor {} wants {k}, got {}",
                    self.spatial_factor,
                    self.widths.len()
                ),
            ));
        }
        if self.latent_channels == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(CoreError::invalid("codec config", "zero-sized layer"));
        }
        Ok(k)
    }
}

/// Largest of {8,4,2,1} dividing the channel count.
pub(crate) fn gn_groups(channels: usize) -> usize {
    [8usize, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Codec {
    pub cfg: CodecConfig,
    octaves: usize,
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Codec> {
        let octaves = cfg.octaves()?;
        Ok(Codec { cfg, octaves })
    }

    /// Encoder layer count: refine+down per octave plus the latent head.
    pub fn num_encoder_layers(&self) -> usize {
        2 * self.octaves + 1
    }

    /// Numeric layer index of an encoder parameter name, if it is one.
    pub fn encoder_layer_index(name: &str) -> Option<usize> {
        let rest = name.strip_prefix("codec.enc.")?;
        rest.split('.').next()?.parse().ok()
    }

    pub fn latent_shape(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.cfg.spatial_factor;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(CoreError::shape(
                "codec",
                format!("spatial dims {h}x{w} not divisible by factor {f}"),
            ));
        }
        Ok((h / f, w / f))
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let k = self.octaves;
        let w = &self.cfg.widths;
        let c = self.cfg.latent_channels;
        for s in 0..k {
            let cin = if s == 0 { 3 } else { w[s - 1] };
            let refine = format!("codec.enc.{}", 2 * s);
            nn::register_conv2d(store, rng, &format!("{refine}.conv"), cin, w[s], 3);
            nn::register_group_norm(store, &format!("{refine}.norm"), w[s]);
            let down = format!("codec.enc.{}", 2 * s + 1);
            nn::register_conv2d(store, rng, &format!("{down}.conv"), w[s], w[s], 3);
            nn::register_group_norm(store, &format!("{down}.norm"), w[s]);
        }
        nn::register_conv2d(store, rng, &format!("codec.enc.{}.conv", 2 * k), w[k - 1], c, 1);

        nn::register_conv2d(store, rng, "codec.dec.0.conv", c, w[k - 1], 3);
        nn::register_group_norm(store, "codec.dec.0.norm", w[k - 1]);
        for (li, s) in (0..k).rev().enumerate() {
            let cout = if s == 0 { w[0] } else { w[s - 1] };
            let name = format!("codec.dec.{}", li + 1);
            nn::register_conv2d(store, rng, &format!("{name}.conv"), w[s], cout, 3);
            nn::register_group_norm(store, &format!("{name}.norm"), cout);
        }
        nn::register_conv2d(store, rng, &format!("codec.dec.{}.conv", k + 1), w[0], 3, 3);
    }

    fn check_image_input(&self, g: &Graph, x: NodeId) -> Result<()> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(CoreError::shape(
                "codec encode",
                format!("expected (B,3,H,W), got {shape:?}"),
            ));
        }
        self.latent_shape(shape[2], shape[3])?;
        Ok(())
    }

    /// (B,3,H,W) -> (B,C,H/f,W/f). Deterministic; no noise is injected.
    pub fn encode(&self, g: &mut Graph, b: &Binder, x: NodeId) -> Result<NodeId> {
        self.check_image_input(g, x)?;
        let k = self.octaves;
        let mut h = x;
        for s in 0..k {
            let width = self.cfg.widths[s];
            let refine = format!("codec.enc.{}", 2 * s);
            h = nn::conv2d(g, b, &format!("{refine}.conv"), h, 1, 1)?;
            h = nn::group_norm(g, b, &format!("{refine}.norm"), h, gn_groups(width))?;
            h = g.silu(h);
            let down = format!("codec.enc.{}", 2 * s + 1);
            h = nn::conv2d(g, b, &format!("{down}.conv"), h, 2, 1)?;
            h = nn::group_norm(g, b, &format!("{down}.norm"), h, gn_groups(width))?;
            h = g.silu(h);
        }
        Ok(nn::conv2d(g, b, &format!("codec.enc.{}.conv", 2 * k), h, 1, 0)?)
    }

    /// (B,C,h,w) -> (B,3,h·f,w·f), sigmoid-squashed into (0,1).
    pub fn decode(&self, g: &mut Graph, b: &Binder, z: NodeId) -> Result<NodeId> {
        let shape = g.value(z).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.latent_channels {
            return Err(CoreError::shape(
                "codec decode",
                format!(
                    "expected (B,{},h,w), got {shape:?}",
                    self.cfg.latent_channels
                ),
            ));
        }
        let k = self.octaves;
        let w = &self.cfg.widths;
        let mut h = nn::conv2d(g, b, "codec.dec.0.conv", z, 1, 1)?;
        h = nn::group_norm(g, b, "codec.dec.0.norm", h, gn_groups(w[k - 1]))?;
        h = g.silu(h);
        for (li, s) in (0..k).rev().enumerate() {
            let cout = if s == 0 { w[0] } else { w[s - 1] };
            let name = format!("codec.dec.{}", li + 1);
            h = g.upsample2x(h);
            h = nn::conv2d(g, b, &format!("{name}.conv"), h, 1, 1)?;
            h = nn::group_norm(g, b, &format!("{name}.norm"), h, gn_groups(cout))?;
            h = g.silu(h);
        }
        let out = nn::conv2d(g, b, &format!("codec.dec.{}.conv", k + 1), h, 1, 1)?;
        Ok(g.sigmoid_op(out))
    }

    /// No-grad encode of a pixel batch.
    pub fn encode_arr(&self, store: &ParamStore, x: &Arr) -> Result<Arr> {
        let mut g = Graph::new(false);
        let b = Binder::bind(&mut g, store, BindMode::Infer);
        let xn = g.constant(x.clone());
        let z = self.encode(&mut g, &b, xn)?;
        Ok(g.value(z).clone())
    }

    /// No-grad decode of a latent batch.
    pub fn decode_arr(&self, store: &ParamStore, z: &Arr) -> Result<Arr> {
        let mut g = Graph::new(false);
        let b = Binder::bind(&mut g, store, BindMode::Infer);
        let zn = g.constant(z.clone());
        let x = self.decode(&mut g, &b, zn)?;
        Ok(g.value(x).clone())
    }
}

/// Stacks images into an NCHW batch.
pub fn image_batch_nchw(images: &[&Image]) -> Result<Arr> {
    if images.is_empty() {
        return Err(CoreError::invalid("image_batch_nchw", "empty batch"));
    }
    let (h, w, _) = images[0].pixels.dim();
    let mut out = ArrayD::<f64>::zeros(vec![images.len(), 3, h, w]);
    for (i, img) in images.iter().enumerate() {
        if img.pixels.dim() != (h, w, 3) {
            return Err(CoreError::shape(
                "image_batch_nchw",
                format!("mixed sizes: {:?} vs {:?}", img.pixels.dim(), (h, w, 3)),
            ));
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[i, c, y, x]] = img.pixels[[y, x, c]];
                }
            }
        }
    }
    Ok(out)
}

/// Splits an NCHW batch back into images, clamping to [0,1].
pub fn nchw_to_images(batch: &Arr) -> Result<Vec<Image>> {
    let shape = batch.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(CoreError::shape(
            "nchw_to_images",
            format!("expected (B,3,H,W), got {shape:?}"),
        ));
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut px = ndarray::Array3::<f64>::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    px[[y, x, c]] = batch[[i, c, y, x]].clamp(0.0, 1.0);
                }
            }
        }
        out.push(Image::new(px)?);
    }
    Ok(out)
}

/// Global scalar that rescales encoded latents to unit standard deviation.
pub fn compute_latent_scale(latents: &Arr) -> Result<f64> {
    let n = latents.len();
    if n < 2 {
        return Err(CoreError::invalid("latent scale", "need at least 2 values"));
    }
    let mean = latents.iter().sum::<f64>() / n as f64;
    let var = latents.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < 1e-9 {
        return Err(CoreError::invalid(
            "latent scale",
            "latents are (near-)constant; cannot normalize",
        ));
    }
    Ok(1.0 / std)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            steps: 500,
            lr: 3e-3,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CodecTrainReport {
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

/// Reconstruction training (pixel MSE) of the codec parameters only.
/// Zero steps is a no-op that leaves every weight untouched.
pub fn train_codec(
    codec: &Codec,
    store: &mut ParamStore,
    images: &[Image],
    tc: &CodecTrainConfig,
) -> Result<CodecTrainReport> {
    if images.is_empty() {
        return Err(CoreError::invalid("train_codec", "no training images"));
    }
    let mask = TrainMask::from_predicate(store, |n| n.starts_with("codec."));
    let mut opt = framecast_autograd::optim::AdamW::new(tc.lr, 0.0);
    let mut rng = derive_rng(tc.seed, "codec-train");
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch: Vec<&Image> = (0..tc.batch_size.min(images.len()))
            .map(|_| &images[rand::Rng::random_range(&mut rng, 0..images.len())])
            .collect();
        let x = image_batch_nchw(&batch)?;
        let mut g = Graph::new(true);
        let b = Binder::bind(&mut g, store, BindMode::Train(&mask));
        let xn = g.constant(x);
        let z = codec.encode(&mut g, &b, xn)?;
        let recon = codec.decode(&mut g, &b, z)?;
        let loss = g.mse(recon, xn);
        let loss_v = g.value(loss)[ndarray::IxDyn(&[])];
        if !loss_v.is_finite() {
            return Err(CoreError::Train(format!(
                "codec training diverged at step {step}: loss {loss_v}"
            )));
        }
        g.backward(loss)?;
        let grads = b.grads(&g, store, &mask)?;
        opt.step(store, &grads, 1.0)?;
        losses.push(loss_v);
    }
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    Ok(CodecTrainReport { losses, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{render_frame, SyntheticSceneSpec, Task};

    fn test_frame(res: usize) -> Image {
        let spec = SyntheticSceneSpec::new(Task::HammerBeat, 3, 120, res).unwrap();
        render_frame(&spec, 60).unwrap()
    }

    fn desk_codec() -> (Codec, ParamStore) {
        let codec = Codec::new(CodecConfig::desk()).unwrap();
        let mut store = ParamStore::new();
        codec.register(&mut store, &mut derive_rng(7, "codec-init"));
        (codec, store)
    }

    #[test]
    fn config_validation() {
        let mut cfg = CodecConfig::desk();
        cfg.spatial_factor = 3;
        assert!(Codec::new(cfg).is_err());
        let mut cfg = CodecConfig::desk();
        cfg.widths = vec![16];
        assert!(Codec::new(cfg).is_err());
        let mut cfg = CodecConfig::desk();
        cfg.spatial_factor = 8;
        cfg.widths = vec![8, 16, 32];
        assert!(Codec::new(cfg).is_ok());
    }

    #[test]
    fn encode_shape_and_determinism() {
        let (codec, store) = desk_codec();
        let img = test_frame(32);
        let x = image_batch_nchw(&[&img, &img]).unwrap();
        let z1 = codec.encode_arr(&store, &x).unwrap();
        let z2 = codec.encode_arr(&store, &x).unwrap();
        assert_eq!(z1.shape(), &[2, 4, 8, 8]);
        assert_eq!(z1.as_slice().unwrap(), z2.as_slice().unwrap());
    }

    #[test]
    fn decode_output_lies_in_unit_interval() {
        let (codec, store) = desk_codec();
        let z = framecast_autograd::init::normal(&mut derive_rng(1, "z"), &[1, 4, 8, 8], 3.0);
        let x = codec.decode_arr(&store, &z).unwrap();
        assert_eq!(x.shape(), &[1, 3, 32, 32]);
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let (codec, store) = desk_codec();
        let x = ArrayD::zeros(vec![1, 3, 30, 32]);
        assert!(codec.encode_arr(&store, &x).is_err());
        assert!(codec.latent_shape(30, 32).is_err());
        assert!(codec.latent_shape(32, 32).is_ok());
    }

    #[test]
    fn encoder_layer_index_parsing() {
        assert_eq!(Codec::encoder_layer_index("codec.enc.3.conv.w"), Some(3));
        assert_eq!(Codec::encoder_layer_index("codec.enc.0.norm.g"), Some(0));
        assert_eq!(Codec::encoder_layer_index("codec.dec.1.conv.w"), None);
        assert_eq!(Codec::encoder_layer_index("denoiser.in.w"), None);
    }

    #[test]
    fn zero_step_training_changes_nothing() {
        let (codec, mut store) = desk_codec();
        let before: Vec<(String, Vec<f64>)> = store
            .iter()
            .map(|(n, v)| (n.clone(), v.iter().copied().collect()))
            .collect();
        let tc = CodecTrainConfig {
            steps: 0,
            ..CodecTrainConfig::default()
        };
        train_codec(&codec, &mut store, &[test_frame(32)], &tc).unwrap();
        for (name, vals) in before {
            let now: Vec<f64> = store.get(&name).unwrap().iter().copied().collect();
            assert_eq!(vals, now, "{name} changed with zero steps");
        }
    }

    #[test]
    fn single_image_overfit_reaches_low_mse() {
        let (codec, mut store) = desk_codec();
        let img = test_frame(32);
        let tc = CodecTrainConfig {
            steps: 500,
            lr: 3e-3,
            batch_size: 1,
            seed: 0,
        };
        let report = train_codec(&codec, &mut store, &[img.clone()], &tc).unwrap();
        let x = image_batch_nchw(&[&img]).unwrap();
        let z = codec.encode_arr(&store, &x).unwrap();
        let recon = codec.decode_arr(&store, &z).unwrap();
        let mse = (&recon - &x).mapv(|d| d * d).mean().unwrap();
        assert!(
            mse < 0.01,
            "overfit MSE {mse} (first loss {}, last {})",
            report.losses[0],
            report.final_loss
        );
        assert!(report.final_loss < report.losses[0]);
    }

    #[test]
    fn latent_scale_normalizes_std() {
        let z = framecast_autograd::init::normal(&mut derive_rng(2, "z"), &[4, 4, 8, 8], 3.7);
        let s = compute_latent_scale(&z).unwrap();
        let scaled = &z * s;
        let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
        let var = scaled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / scaled.len() as f64;
        assert!((var.sqrt() - 1.0).abs() < 1e-12);
        let flat = ArrayD::from_elem(vec![8], 0.3);
        assert!(compute_latent_scale(&flat).is_err());
    }

    #[test]
    fn image_batch_round_trip_is_exact() {
        let img = test_frame(32);
        let batch = image_batch_nchw(&[&img]).unwrap();
        let back = nchw_to_images(&batch).unwrap();
        assert_eq!(
            back[0].pixels.as_slice().unwrap(),
            img.pixels.as_slice().unwrap()
        );
    }

    #[test]
    fn mixed_size_batches_are_rejected() {
        let a = test_frame(32);
        let b = test_frame(64);
        assert!(image_batch_nchw(&[&a, &b]).is_err());
    }
}
