//! Conditional U-Net noise predictor.
//!
//! Input is the channel concatenation of the noisy latent and the
//! conditioning image latent (2·C channels); output is the predicted noise
//! (C channels). Text enters through cross-attention against the token
//! embeddings; the timestep enters as a sinusoidal embedding pushed through
//! an MLP and added inside every residual block.
//!
//! Parameter-name conventions are load-bearing for selective fine-tuning:
//! cross-attention weights contain `.cross.` and self-attention output
//! projections contain `.self.to_out`.

use framecast_autograd::{nn, Arr, BindMode, Binder, Graph, NodeId, ParamStore};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::gn_groups;
use crate::error::{CoreError, Result};
use crate::text::CondBatch;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Channel width of the first stage (full-size: 320).
    pub base_channels: usize,
    /// Per-stage width multipliers; length = number of resolution stages.
    pub channel_mults: Vec<usize>,
    /// Downsample factors (2^stage) at which transformer blocks run.
    pub attention_resolutions: Vec<usize>,
    /// Attention heads (full-size: 8).
    pub heads: usize,
    /// Transformer blocks per attention site.
    pub transformer_blocks: usize,
    /// Latent channel count C; the network maps 2C -> C.
    pub latent_channels: usize,
    /// Width of the text token embeddings fed to cross-attention.
    pub context_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig::full()
    }
}

impl DenoiserConfig {
    /// CPU-friendly profile with the full-size topology.
    pub fn desk() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 32,
            channel_mults: vec![1, 2, 4, 4],
            attention_resolutions: vec![4, 2, 1],
            heads: 2,
            transformer_blocks: 1,
            latent_channels: 4,
            context_dim: 32,
        }
    }

    /// Full-size profile.
    pub fn full() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 320,
            channel_mults: vec![1, 2, 4, 4],
            attention_resolutions: vec![4, 2, 1],
            heads: 8,
            transformer_blocks: 1,
            latent_channels: 4,
            context_dim: 64,
        }
    }

    pub fn stages(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn stage_width(&self, s: usize) -> usize {
        self.base_channels * self.channel_mults[s]
    }

    fn attend_at(&self, stage: usize) -> bool {
        self.attention_resolutions.contains(&(1 << stage))
    }

    fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(CoreError::invalid("denoiser config", "no stages"));
        }
        if self.base_channels == 0
            || self.latent_channels == 0
            || self.heads == 0
            || self.transformer_blocks == 0
            || self.context_dim == 0
        {
            return Err(CoreError::invalid("denoiser config", "zero-sized field"));
        }
        if self.base_channels % 2 != 0 {
            return Err(CoreError::invalid(
                "denoiser config",
                "base_channels must be even for sinusoidal features",
            ));
        }
        let stages = self.stages();
        for &r in &self.attention_resolutions {
            let ok = r.is_power_of_two() && (r.trailing_zeros() as usize) < stages;
            if !ok {
                return Err(CoreError::invalid(
                    "denoiser config",
                    format!("attention resolution {r} has no matching stage (stages: {stages})"),
                ));
            }
        }
        for s in 0..stages {
            if self.attend_at(s) && self.stage_width(s) % self.heads != 0 {
                return Err(CoreError::invalid(
                    "denoiser config",
                    format!(
                        "stage {s} width {} not divisible by {} heads",
                        self.stage_width(s),
                        self.heads
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Anything that can predict noise inside a graph; the trainer and the
/// gradient-check harness are generic over this so a micro model can stand
/// in for the full U-Net.
pub trait GraphDenoiser {
    /// `z_noisy`/`z_cond`: (B,C,h,w); `ts`: one timestep per batch row;
    /// `context`: (B,L,D) token embeddings; `mask`: additive key mask (B,L).
    fn eps(
        &self,
        g: &mut Graph,
        b: &Binder,
        z_noisy: NodeId,
        z_cond: NodeId,
        ts: &[f64],
        context: NodeId,
        mask: &Array2<f64>,
    ) -> Result<NodeId>;

    fn latent_channels(&self) -> usize;
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Denoiser> {
        cfg.validate()?;
        Ok(Denoiser { cfg })
    }

    fn time_dim(&self) -> usize {
        4 * self.cfg.base_channels
    }

    fn register_res_block(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        tdim: usize,
    ) {
        nn::register_group_norm(store, &format!("{prefix}.norm1"), cin);
        nn::register_conv2d(store, rng, &format!("{prefix}.conv1"), cin, cout, 3);
        nn::register_linear(store, rng, &format!("{prefix}.temb"), tdim, cout, true);
        nn::register_group_norm(store, &format!("{prefix}.norm2"), cout);
        nn::register_conv2d(store, rng, &format!("{prefix}.conv2"), cout, cout, 3);
        if cin != cout {
            nn::register_conv2d(store, rng, &format!("{prefix}.skip"), cin, cout, 1);
        }
    }

    fn register_transformer(
        &self,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        c: usize,
    ) {
        let ctx = self.cfg.context_dim;
        nn::register_layer_norm(store, &format!("{prefix}.ln1"), c);
        nn::register_linear(store, rng, &format!("{prefix}.self.to_q"), c, c, false);
        nn::register_linear(store, rng, &format!("{prefix}.self.to_k"), c, c, false);
        nn::register_linear(store, rng, &format!("{prefix}.self.to_v"), c, c, false);
        nn::register_linear(store, rng, &format!("{prefix}.self.to_out"), c, c, true);
        nn::register_layer_norm(store, &format!("{prefix}.ln2"), c);
        nn::register_linear(store, rng, &format!("{prefix}.cross.to_q"), c, c, false);
        nn::register_linear(store, rng, &format!("{prefix}.cross.to_k"), ctx, c, false);
        nn::register_linear(store, rng, &format!("{prefix}.cross.to_v"), ctx, c, false);
        nn::register_linear(store, rng, &format!("{prefix}.cross.to_out"), c, c, true);
        nn::register_layer_norm(store, &format!("{prefix}.ln3"), c);
        nn::register_linear(store, rng, &format!("{prefix}.ff.l1"), c, 4 * c, true);
        nn::register_linear(store, rng, &format!("{prefix}.ff.l2"), 4 * c, c, true);
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let cfg = &self.cfg;
        let stages = cfg.stages();
        let tdim = self.time_dim();
        let c_in = 2 * cfg.latent_channels;

        nn::register_linear(store, rng, "denoiser.time.l1", cfg.base_channels, tdim, true);
        nn::register_linear(store, rng, "denoiser.time.l2", tdim, tdim, true);
        nn::register_conv2d(store, rng, "denoiser.in.conv", c_in, cfg.stage_width(0), 3);

        let mut prev = cfg.stage_width(0);
        for s in 0..stages {
            let w = cfg.stage_width(s);
            Self::register_res_block(store, rng, &format!("denoiser.down.{s}.res"), prev, w, tdim);
            if cfg.attend_at(s) {
                for bidx in 0..cfg.transformer_blocks {
                    self.register_transformer(
                        store,
                        rng,
                        &format!("denoiser.down.{s}.attn.{bidx}"),
                        w,
                    );
                }
            }
            if s + 1 < stages {
                nn::register_conv2d(store, rng, &format!("denoiser.down.{s}.down.conv"), w, w, 3);
            }
            prev = w;
        }

        let wm = cfg.stage_width(stages - 1);
        Self::register_res_block(store, rng, "denoiser.mid.res0", wm, wm, tdim);
        Self::register_res_block(store, rng, "denoiser.mid.res1", wm, wm, tdim);

        let mut above = wm;
        for s in (0..stages).rev() {
            let w = cfg.stage_width(s);
            let skip_w = cfg.stage_width(s);
            Self::register_res_block(
                store,
                rng,
                &format!("denoiser.up.{s}.res"),
                above + skip_w,
                w,
                tdim,
            );
            if cfg.attend_at(s) {
                for bidx in 0..cfg.transformer_blocks {
                    self.register_transformer(store, rng, &format!("denoiser.up.{s}.attn.{bidx}"), w);
                }
            }
            above = w;
        }

        nn::register_group_norm(store, "denoiser.out.norm", cfg.stage_width(0));
        nn::register_conv2d(
            store,
            rng,
            "denoiser.out.conv",
            cfg.stage_width(0),
            cfg.latent_channels,
            3,
        );
    }

    fn res_block(
        g: &mut Graph,
        b: &Binder,
        prefix: &str,
        x: NodeId,
        temb: NodeId,
        cin: usize,
        cout: usize,
    ) -> Result<NodeId> {
        let mut h = nn::group_norm(g, b, &format!("{prefix}.norm1"), x, gn_groups(cin))?;
        h = g.silu(h);
        h = nn::conv2d(g, b, &format!("{prefix}.conv1"), h, 1, 1)?;
        let te = g.silu(temb);
        let te = nn::linear(g, b, &format!("{prefix}.temb"), te)?;
        let bsz = g.value(te).shape()[0];
        let te = g.reshape(te, &[bsz, cout, 1, 1]);
        h = g.add(h, te);
        h = nn::group_norm(g, b, &format!("{prefix}.norm2"), h, gn_groups(cout))?;
        h = g.silu(h);
        h = nn::conv2d(g, b, &format!("{prefix}.conv2"), h, 1, 1)?;
        let skip = if cin == cout {
            x
        } else {
            nn::conv2d(g, b, &format!("{prefix}.skip"), x, 1, 0)?
        };
        Ok(g.add(h, skip))
    }

    fn transformer(
        &self,
        g: &mut Graph,
        b: &Binder,
        prefix: &str,
        x: NodeId,
        context: NodeId,
        mask: &Array2<f64>,
    ) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let heads = self.cfg.heads;

        let tokens = g.permute(x, &[0, 2, 3, 1]);
        let mut tokens = g.reshape(tokens, &[bsz, h * w, c]);

        let ln = nn::layer_norm(g, b, &format!("{prefix}.ln1"), tokens)?;
        let q = nn::linear(g, b, &format!("{prefix}.self.to_q"), ln)?;
        let k = nn::linear(g, b, &format!("{prefix}.self.to_k"), ln)?;
        let v = nn::linear(g, b, &format!("{prefix}.self.to_v"), ln)?;
        let sa = nn::attention(g, q, k, v, heads, None);
        let sa = nn::linear(g, b, &format!("{prefix}.self.to_out"), sa)?;
        tokens = g.add(tokens, sa);

        let ln = nn::layer_norm(g, b, &format!("{prefix}.ln2"), tokens)?;
        let q = nn::linear(g, b, &format!("{prefix}.cross.to_q"), ln)?;
        let k = nn::linear(g, b, &format!("{prefix}.cross.to_k"), context)?;
        let v = nn::linear(g, b, &format!("{prefix}.cross.to_v"), context)?;
        let ca = nn::attention(g, q, k, v, heads, Some(mask));
        let ca = nn::linear(g, b, &format!("{prefix}.cross.to_out"), ca)?;
        tokens = g.add(tokens, ca);

        let ln = nn::layer_norm(g, b, &format!("{prefix}.ln3"), tokens)?;
        let f = nn::linear(g, b, &format!("{prefix}.ff.l1"), ln)?;
        let f = g.silu(f);
        let f = nn::linear(g, b, &format!("{prefix}.ff.l2"), f)?;
        tokens = g.add(tokens, f);

        let out = g.reshape(tokens, &[bsz, h, w, c]);
        Ok(g.permute(out, &[0, 3, 1, 2]))
    }

    fn check_inputs(
        &self,
        g: &Graph,
        z_noisy: NodeId,
        z_cond: NodeId,
        ts: &[f64],
        context: NodeId,
        mask: &Array2<f64>,
    ) -> Result<()> {
        let zn = g.value(z_noisy).shape().to_vec();
        let zc = g.value(z_cond).shape().to_vec();
        if zn != zc {
            return Err(CoreError::shape(
                "denoise_eps",
                format!("z_noisy {zn:?} vs z_cond {zc:?}"),
            ));
        }
        if zn.len() != 4 || zn[1] != self.cfg.latent_channels {
            return Err(CoreError::shape(
                "denoise_eps",
                format!(
                    "expected (B,{},h,w) latents, got {zn:?}",
                    self.cfg.latent_channels
                ),
            ));
        }
        let div = 1usize << (self.cfg.stages() - 1);
        if zn[2] % div != 0 || zn[3] % div != 0 || zn[2] == 0 || zn[3] == 0 {
            return Err(CoreError::shape(
                "denoise_eps",
                format!("latent {}x{} not divisible by {div}", zn[2], zn[3]),
            ));
        }
        let ctx = g.value(context).shape().to_vec();
        if ts.len() != zn[0]
            || ctx.len() != 3
            || ctx[0] != zn[0]
            || ctx[2] != self.cfg.context_dim
            || mask.shape() != [zn[0], ctx[1]]
        {
            return Err(CoreError::shape(
                "denoise_eps",
                format!(
                    "batch {} with {} timesteps, context {ctx:?}, mask {:?}",
                    zn[0],
                    ts.len(),
                    mask.shape()
                ),
            ));
        }
        Ok(())
    }
}

impl GraphDenoiser for Denoiser {
    fn eps(
        &self,
        g: &mut Graph,
        b: &Binder,
        z_noisy: NodeId,
        z_cond: NodeId,
        ts: &[f64],
        context: NodeId,
        mask: &Array2<f64>,
    ) -> Result<NodeId> {
        self.check_inputs(g, z_noisy, z_cond, ts, context, mask)?;
        let cfg = &self.cfg;
        let stages = cfg.stages();

        let sin = nn::sinusoidal_embedding(ts, cfg.base_channels);
        let sin = g.constant(sin);
        let temb = nn::linear(g, b, "denoiser.time.l1", sin)?;
        let temb = g.silu(temb);
        let temb = nn::linear(g, b, "denoiser.time.l2", temb)?;

        let x = g.concat(1, &[z_noisy, z_cond]);
        let mut h = nn::conv2d(g, b, "denoiser.in.conv", x, 1, 1)?;

        let mut skips: Vec<NodeId> = Vec::with_capacity(stages);
        let mut prev = cfg.stage_width(0);
        for s in 0..stages {
            let w = cfg.stage_width(s);
            h = Self::res_block(g, b, &format!("denoiser.down.{s}.res"), h, temb, prev, w)?;
            if cfg.attend_at(s) {
                for bidx in 0..cfg.transformer_blocks {
                    h = self.transformer(
                        g,
                        b,
                        &format!("denoiser.down.{s}.attn.{bidx}"),
                        h,
                        context,
                        mask,
                    )?;
                }
            }
            skips.push(h);
            if s + 1 < stages {
                h = nn::conv2d(g, b, &format!("denoiser.down.{s}.down.conv"), h, 2, 1)?;
            }
            prev = w;
        }

        let wm = cfg.stage_width(stages - 1);
        h = Self::res_block(g, b, "denoiser.mid.res0", h, temb, wm, wm)?;
        h = Self::res_block(g, b, "denoiser.mid.res1", h, temb, wm, wm)?;

        let mut above = wm;
        for s in (0..stages).rev() {
            if s + 1 < stages {
                h = g.upsample2x(h);
            }
            let w = cfg.stage_width(s);
            let skip = skips[s];
            h = g.concat(1, &[h, skip]);
            h = Self::res_block(
                g,
                b,
                &format!("denoiser.up.{s}.res"),
                h,
                temb,
                above + w,
                w,
            )?;
            if cfg.attend_at(s) {
                for bidx in 0..cfg.transformer_blocks {
                    h = self.transformer(
                        g,
                        b,
                        &format!("denoiser.up.{s}.attn.{bidx}"),
                        h,
                        context,
                        mask,
                    )?;
                }
            }
            above = w;
        }

        h = nn::group_norm(g, b, "denoiser.out.norm", h, gn_groups(cfg.stage_width(0)))?;
        h = g.silu(h);
        Ok(nn::conv2d(g, b, "denoiser.out.conv", h, 1, 1)?)
    }

    fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }
}

/// No-grad convenience wrapper used by the sampler: embeds one prepared
/// condition batch from the stored text table and predicts noise.
pub fn denoise_eps_arr(
    denoiser: &Denoiser,
    store: &ParamStore,
    z_noisy: &Arr,
    z_cond: &Arr,
    t: usize,
    cond: &CondBatch,
) -> Result<Arr> {
    let mut g = Graph::new(false);
    let b = Binder::bind(&mut g, store, BindMode::Infer);
    let zn = g.constant(z_noisy.clone());
    let zc = g.constant(z_cond.clone());
    let table = b.node(crate::text::TEXT_TABLE_PARAM)?;
    let context = crate::text::embed_cond(&mut g, table, cond);
    let ts = vec![t as f64; z_noisy.shape()[0]];
    let out = denoiser.eps(&mut g, &b, zn, zc, &ts, context, &cond.mask)?;
    Ok(g.value(out).clone())
}

/// Minimal time-conditioned convolutional noise predictor (< 5k parameters)
/// used for finite-difference gradient validation, where the full U-Net
/// would be too slow to probe parameter-by-parameter.
#[derive(Debug, Clone)]
pub struct TinyConvDenoiser {
    pub latent_channels: usize,
    pub hidden: usize,
}

impl TinyConvDenoiser {
    pub fn new(latent_channels: usize, hidden: usize) -> TinyConvDenoiser {
        TinyConvDenoiser {
            latent_channels,
            hidden,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = self.latent_channels;
        let h = self.hidden;
        nn::register_conv2d(store, rng, "tiny.conv1", 2 * c, h, 3);
        nn::register_linear(store, rng, "tiny.temb", 4, h, true);
        nn::register_linear(store, rng, "tiny.ctx", 1, h, true);
        nn::register_conv2d(store, rng, "tiny.conv2", h, c, 3);
    }
}

impl GraphDenoiser for TinyConvDenoiser {
    fn eps(
        &self,
        g: &mut Graph,
        b: &Binder,
        z_noisy: NodeId,
        z_cond: NodeId,
        ts: &[f64],
        context: NodeId,
        _mask: &Array2<f64>,
    ) -> Result<NodeId> {
        if g.value(z_noisy).shape() != g.value(z_cond).shape() {
            return Err(CoreError::shape("tiny denoiser", "latent shape mismatch"));
        }
        let bsz = g.value(z_noisy).shape()[0];
        let x = g.concat(1, &[z_noisy, z_cond]);
        let mut h = nn::conv2d(g, b, "tiny.conv1", x, 1, 1)?;

        let sin = g.constant(nn::sinusoidal_embedding(ts, 4));
        let te = nn::linear(g, b, "tiny.temb", sin)?;
        let te = g.reshape(te, &[bsz, self.hidden, 1, 1]);
        h = g.add(h, te);

        // Mean-pooled context projected to a per-channel bias: enough to make
        // gradients flow through the conditioning path.
        let ctx_shape = g.value(context).shape().to_vec();
        let pooled = g.reshape(context, &[bsz, ctx_shape[1] * ctx_shape[2], 1]);
        let pooled = g.permute(pooled, &[0, 2, 1]);
        let ones = g.constant(ndarray::ArrayD::from_elem(
            vec![bsz, ctx_shape[1] * ctx_shape[2], 1],
            1.0 / (ctx_shape[1] * ctx_shape[2]) as f64,
        ));
        let pooled = g.batch_matmul(pooled, ones);
        let pooled = g.reshape(pooled, &[bsz, 1]);
        let cb = nn::linear(g, b, "tiny.ctx", pooled)?;
        let cb = g.reshape(cb, &[bsz, self.hidden, 1, 1]);
        h = g.add(h, cb);

        h = g.silu(h);
        Ok(nn::conv2d(g, b, "tiny.conv2", h, 1, 1)?)
    }

    fn latent_channels(&self) -> usize {
        self.latent_channels
    }
}
